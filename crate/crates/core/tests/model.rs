use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssl_lab::model::{forward, predict_logits, ConvBlock, Mode, ModelConfig, ModelParams};
use ssl_lab::tensor::{Graph, Tensor};
use ssl_lab::train::{Optimizer, OptimizerConfig};

fn random_batch(n: usize, hw: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[n, 1, hw, hw], (0..n * hw * hw).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn wider_mini_layout_stays_under_half_a_million_parameters() {
    let cfg = ModelConfig {
        blocks: [(2, 16), (2, 32), (3, 64)].iter().map(|&(convs, width)| ConvBlock { convs, width }).collect(),
        ..ModelConfig::sononet_mini(14)
    };
    assert_eq!(cfg.conv_layers(), 7);
    assert_eq!(cfg.maxpools(), 2);
    let p = ModelParams::<f32>::build(&cfg, 0).unwrap();
    let convs = 9 * (16 + 16 * 16 + 16 * 32 + 32 * 32 + 32 * 64 + 64 * 64 + 64 * 64);
    let bn = 2 * (16 * 2 + 32 * 2 + 64 * 3);
    assert_eq!(p.parameter_count(), convs + bn + 64 * 14 + 14);
    assert!(p.parameter_count() < 500_000);
    assert!(ModelParams::<f32>::build(&ModelConfig::sononet_mini(14), 0).unwrap().parameter_count() < 500_000);
}

#[test]
fn eval_forward_is_pure_and_permutation_equivariant() {
    let params = ModelParams::<f32>::build(&ModelConfig::sononet_mini(14), 4).unwrap();
    let batch = random_batch(6, 32, 1);
    let a = predict_logits(&params, &batch).unwrap();
    let b = predict_logits(&params, &batch).unwrap();
    assert_eq!(a, b);
    assert!(a.is_finite());

    let perm = [3usize, 0, 5, 1, 4, 2];
    let img = 32 * 32;
    let permuted: Vec<f32> = perm.iter().flat_map(|&i| batch.data()[i * img..(i + 1) * img].to_vec()).collect();
    let pa = predict_logits(&params, &Tensor::new(&[6, 1, 32, 32], permuted).unwrap()).unwrap();
    for (row, &i) in perm.iter().enumerate() {
        assert_eq!(&pa.data()[row * 14..(row + 1) * 14], &a.data()[i * 14..(i + 1) * 14]);
    }
}

#[test]
fn full_batch_adam_strictly_lowers_the_loss() {
    let mut params = ModelParams::<f32>::build(&ModelConfig::sononet_mini(4), 2).unwrap();
    let batch = random_batch(8, 32, 2);
    let labels = [0usize, 1, 2, 3, 0, 1, 2, 3];
    let mut opt = Optimizer::new(OptimizerConfig::Adam { lr: 1e-3 }, params.tensors(), 1);
    let mut losses = Vec::new();
    for _ in 0..20 {
        let mut g = Graph::new();
        let x = g.leaf(&batch).unwrap();
        let f = forward(&params, &mut g, x, Mode::Train).unwrap();
        let p = g.softmax(f.logits, 1.0).unwrap();
        let loss = g.cross_entropy(p, &labels, None).unwrap();
        losses.push(g.item(loss));
        g.backward(loss).unwrap();
        let grads: Vec<Option<Vec<f32>>> = f.param_vars.iter().map(|&v| g.grad(v).map(<[f32]>::to_vec)).collect();
        opt.step(params.tensors_mut(), &grads).unwrap();
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss did not decrease: {losses:?}");
    }
}

#[test]
fn full_preset_builds_and_runs_at_reduced_batch() {
    let cfg = ModelConfig::sononet_full(14);
    let params = ModelParams::<f32>::build(&cfg, 0).unwrap();
    assert_eq!(cfg.conv_layers(), 15);
    let batch = Tensor::full(&[1, 1, 224, 288], 0.5);
    let logits = predict_logits(&params, &batch).unwrap();
    assert_eq!(logits.shape(), &[1, 14]);
}
