//! Central finite-difference verification of the graph's analytic gradients,
//! in f64, on seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{forward, Mode, ModelConfig, ModelParams};
use crate::tensor::{Graph, Padding, Tensor, Var};

/// Step of the per-operation checks.
pub const EPS: f64 = 1e-4;
/// Relative tolerance of the per-operation checks.
pub const OP_TOL: f64 = 1e-3;
/// Step of the whole-network check.
pub const NETWORK_EPS: f64 = 1e-6;
/// Relative tolerance of the whole-network check.
pub const NETWORK_TOL: f64 = 1e-2;
/// Random instances per operation.
pub const TRIALS: u64 = 10;

pub fn close(analytic: f64, numeric: f64, tol: f64) -> bool {
    (analytic - numeric).abs() <= tol * analytic.abs().max(numeric.abs()) + 1e-7
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape").with_grad()
}

/// Values bounded away from zero, so ReLU kinks are never crossed.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).expect("shape").with_grad()
}

/// Reduces any output to a scalar with fixed random weights.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape");
    let prod = g.mul(out, w).expect("same shape");
    g.sum(prod).expect("sum")
}

/// Compares the analytic gradient of `f` with central differences for every
/// coordinate of every input. Returns a description of the first mismatch.
pub fn check(inputs: &[Tensor<f64>], tol: f64, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> Result<(), String> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let loss = f(&mut g, &vars);
    g.backward(loss).map_err(|e| e.to_string())?;
    let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();

    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t).expect("leaf")).collect();
        let loss = f(&mut g, &vars);
        g.item(loss)
    };
    for (k, grad) in grads.iter().enumerate() {
        if grad.len() != inputs[k].len() {
            return Err(format!("input {k} received no gradient"));
        }
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            if !close(grad[i], numeric, tol) {
                return Err(format!("input {k}[{i}]: analytic {} numeric {numeric}", grad[i]));
            }
        }
    }
    Ok(())
}

/// One named operation check over `TRIALS` random instances.
pub struct OpCheck {
    pub name: &'static str,
    run: fn(&mut ChaCha8Rng, u64) -> Result<(), String>,
}

impl OpCheck {
    pub fn run(&self) -> Result<(), String> {
        for t in 0..TRIALS {
            (self.run)(&mut ChaCha8Rng::seed_from_u64(1000 + t), t).map_err(|e| format!("{} trial {t}: {e}", self.name))?;
        }
        Ok(())
    }
}

fn conv2d(rng: &mut ChaCha8Rng, t: u64) -> Result<(), String> {
    let x = random_tensor(rng, &[2, 3, 8, 8], 1.0);
    let k = random_tensor(rng, &[4, 3, 3, 3], 0.5);
    let b = random_tensor(rng, &[4], 0.5);
    let padding = if t % 2 == 0 { Padding::Same } else { Padding::Valid };
    check(&[x, k, b], OP_TOL, &|g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), padding).unwrap();
        project(g, y, t)
    })
}

fn maxpool2(rng: &mut ChaCha8Rng, t: u64) -> Result<(), String> {
    check(&[random_tensor(rng, &[1, 2, 4, 4], 1.0)], OP_TOL, &|g, v| {
        let y = g.maxpool2(v[0]).unwrap();
        project(g, y, t)
    })
}

fn global_avg_pool(rng: &mut ChaCha8Rng, t: u64) -> Result<(), String> {
    check(&[random_tensor(rng, &[2, 3, 4, 5], 1.0)], OP_TOL, &|g, v| {
        let y = g.global_avg_pool(v[0]).unwrap();
        project(g, y, t)
    })
}

fn relu(rng: &mut ChaCha8Rng, t: u64) -> Result<(), String> {
    check(&[away_from_zero(rng, &[3, 7])], OP_TOL, &|g, v| {
        let y = g.relu(v[0]).unwrap();
        project(g, y, t)
    })
}

fn batchnorm_train(rng: &mut ChaCha8Rng, t: u64) -> Result<(), String> {
    let x = random_tensor(rng, &[3, 2, 3, 3], 1.0);
    let gamma = random_tensor(rng, &[2], 1.0);
    let beta = random_tensor(rng, &[2], 1.0);
    check(&[x, gamma, beta], OP_TOL, &|g, v| {
        let (y, _) = g.batchnorm2d_train(v[0], v[1], v[2]).unwrap();
        project(g, y, t)
    })
}

fn batchnorm_eval(rng: &mut ChaCha8Rng, t: u64) -> Result<(), String> {
    let x = random_tensor(rng, &[3, 2, 3, 3], 1.0);
    let gamma = random_tensor(rng, &[2], 1.0);
    let beta = random_tensor(rng, &[2], 1.0);
    let mean = vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let var = vec![rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
    check(&[x, gamma, beta], OP_TOL, &|g, v| {
        let y = g.batchnorm2d_eval(v[0], v[1], v[2], &mean, &var).unwrap();
        project(g, y, t)
    })
}

fn dense(rng: &mut ChaCha8Rng, t: u64) -> Result<(), String> {
    let x = random_tensor(rng, &[4, 5], 1.0);
    let w = random_tensor(rng, &[3, 5], 1.0);
    let b = random_tensor(rng, &[3], 1.0);
    check(&[x, w, b], OP_TOL, &|g, v| {
        let y = g.dense(v[0], v[1], v[2]).unwrap();
        project(g, y, t)
    })
}

fn softmax(rng: &mut ChaCha8Rng, t: u64) -> Result<(), String> {
    let temperature = [1.0, 0.8, 2.0][t as usize % 3];
    check(&[random_tensor(rng, &[3, 5], 2.0)], OP_TOL, &|g, v| {
        let y = g.softmax(v[0], temperature).unwrap();
        project(g, y, t)
    })
}

fn cross_entropy(rng: &mut ChaCha8Rng, t: u64) -> Result<(), String> {
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    let mask: Vec<bool> = (0..4).map(|i| i == 0 || rng.gen_bool(0.6)).collect();
    check(&[random_tensor(rng, &[4, 5], 2.0)], OP_TOL, &|g, v| {
        let p = g.softmax(v[0], 1.0).unwrap();
        let m = if t % 2 == 0 { Some(mask.as_slice()) } else { None };
        g.cross_entropy(p, &labels, m).unwrap()
    })
}

fn kl_divergence(rng: &mut ChaCha8Rng, _: u64) -> Result<(), String> {
    let mask: Vec<bool> = (0..4).map(|i| i == 0 || rng.gen_bool(0.6)).collect();
    let a = random_tensor(rng, &[4, 5], 2.0);
    let b = random_tensor(rng, &[4, 5], 2.0);
    check(&[a, b], OP_TOL, &|g, v| {
        let p = g.softmax(v[0], 0.8).unwrap();
        let q = g.softmax(v[1], 1.0).unwrap();
        g.kl_divergence(p, q, Some(&mask)).unwrap()
    })
}

fn entropy(rng: &mut ChaCha8Rng, _: u64) -> Result<(), String> {
    check(&[random_tensor(rng, &[4, 6], 2.0)], OP_TOL, &|g, v| {
        let p = g.softmax(v[0], 1.0).unwrap();
        g.entropy(p, None).unwrap()
    })
}

fn elementwise(rng: &mut ChaCha8Rng, _: u64) -> Result<(), String> {
    let a = random_tensor(rng, &[2, 3], 1.0);
    let b = random_tensor(rng, &[2, 3], 1.0);
    check(&[a, b], OP_TOL, &|g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let p = g.mul(s, v[0]).unwrap();
        let p = g.scale(p, -1.7).unwrap();
        g.sum(p).unwrap()
    })
}

/// Every differentiable operation of the graph.
pub const OPS: [OpCheck; 12] = [
    OpCheck { name: "conv2d", run: conv2d },
    OpCheck { name: "maxpool2", run: maxpool2 },
    OpCheck { name: "global_avg_pool", run: global_avg_pool },
    OpCheck { name: "relu", run: relu },
    OpCheck { name: "batchnorm2d_train", run: batchnorm_train },
    OpCheck { name: "batchnorm2d_eval", run: batchnorm_eval },
    OpCheck { name: "dense", run: dense },
    OpCheck { name: "softmax", run: softmax },
    OpCheck { name: "cross_entropy", run: cross_entropy },
    OpCheck { name: "kl_divergence", run: kl_divergence },
    OpCheck { name: "entropy", run: entropy },
    OpCheck { name: "add/mul/scale/sum", run: elementwise },
];

/// Total loss of the mini network on a small batch: supervised cross-entropy
/// plus a consistency term towards a frozen target distribution.
fn mini_loss(
    params: &ModelParams<f64>,
    x: &Tensor<f64>,
    x_aug: &Tensor<f64>,
    labels: &[usize],
    target: &Tensor<f64>,
) -> (f64, Vec<Option<Vec<f64>>>) {
    let mut g = Graph::new();
    let xv = g.leaf(x).unwrap();
    let fwd = forward(params, &mut g, xv, Mode::Train).unwrap();
    let p = g.softmax(fwd.logits, 1.0).unwrap();
    let ce = g.cross_entropy(p, labels, None).unwrap();
    let av = g.leaf(x_aug).unwrap();
    let fa = forward(params, &mut g, av, Mode::Train).unwrap();
    let target = g.constant(target.shape(), target.data().to_vec()).unwrap();
    let q = g.softmax(fa.logits, 1.0).unwrap();
    let kl = g.kl_divergence(target, q, None).unwrap();
    let kl = g.scale(kl, 0.5).unwrap();
    let loss = g.add(ce, kl).unwrap();
    let value = g.item(loss);
    g.backward(loss).unwrap();
    let grads = fwd
        .param_vars
        .iter()
        .zip(&fa.param_vars)
        .map(|(&a, &b)| match (g.grad(a), g.grad(b)) {
            (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| x + y).collect()),
            (Some(a), None) => Some(a.to_vec()),
            (None, Some(b)) => Some(b.to_vec()),
            (None, None) => None,
        })
        .collect();
    (value, grads)
}

/// Checks `samples` random parameter coordinates of a 5-class mini network
/// on a batch of three 32x32 images. Returns every mismatch.
pub fn network(samples: usize) -> Result<(), Vec<String>> {
    let params: ModelParams<f64> = ModelParams::build(&ModelConfig::sononet_mini(5), 3).expect("mini builds").cast();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let image = |rng: &mut ChaCha8Rng| {
        Tensor::new(&[3, 1, 32, 32], (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    };
    let (x, x_aug) = (image(&mut rng), image(&mut rng));
    let labels = [0, 3, 1];
    let target = {
        let mut g = Graph::new();
        let xv = g.leaf(&x).unwrap();
        let fwd = forward(&params, &mut g, xv, Mode::Train).unwrap();
        let p = g.softmax(fwd.logits, 0.8).unwrap();
        g.to_tensor(p)
    };
    let loss = |p: &ModelParams<f64>| mini_loss(p, &x, &x_aug, &labels, &target);
    let (_, grads) = loss(&params);

    let trainable: Vec<usize> = (0..params.len()).filter(|&i| grads[i].is_some()).collect();
    let mut failures = Vec::new();
    for _ in 0..samples {
        let k = trainable[rng.gen_range(0..trainable.len())];
        let i = rng.gen_range(0..params.tensors()[k].len());
        let mut plus = params.clone();
        plus.tensors_mut()[k].data_mut()[i] += NETWORK_EPS;
        let mut minus = params.clone();
        minus.tensors_mut()[k].data_mut()[i] -= NETWORK_EPS;
        let numeric = (loss(&plus).0 - loss(&minus).0) / (2.0 * NETWORK_EPS);
        let analytic = grads[k].as_ref().expect("trainable")[i];
        if !close(analytic, numeric, NETWORK_TOL) {
            failures.push(format!("{}[{i}]: analytic {analytic} numeric {numeric}", params.names()[k]));
        }
    }
    if failures.is_empty() { Ok(()) } else { Err(failures) }
}
