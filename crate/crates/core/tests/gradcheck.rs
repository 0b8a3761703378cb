use ssl_lab::gradcheck::{self, OPS};
use ssl_lab::model::{ModelConfig, ModelParams};

fn op(name: &str) {
    let check = OPS.iter().find(|c| c.name == name).unwrap();
    if let Err(e) = check.run() {
        panic!("{e}");
    }
}

#[test]
fn conv2d_same_and_valid() {
    op("conv2d");
}

#[test]
fn maxpool2() {
    op("maxpool2");
}

#[test]
fn global_avg_pool() {
    op("global_avg_pool");
}

#[test]
fn relu() {
    op("relu");
}

#[test]
fn batchnorm_train_and_eval() {
    op("batchnorm2d_train");
    op("batchnorm2d_eval");
}

#[test]
fn dense() {
    op("dense");
}

#[test]
fn softmax_with_temperature() {
    op("softmax");
}

#[test]
fn cross_entropy_with_mask() {
    op("cross_entropy");
}

#[test]
fn kl_divergence_both_arguments() {
    op("kl_divergence");
}

#[test]
fn entropy() {
    op("entropy");
}

#[test]
fn elementwise_add_mul_scale_sum() {
    op("add/mul/scale/sum");
}

#[test]
fn end_to_end_through_mini_network() {
    let params = ModelParams::<f32>::build(&ModelConfig::sononet_mini(5), 3).unwrap();
    assert!(params.len() >= 2 * 7 + 2);
    if let Err(failures) = gradcheck::network(60) {
        panic!("{}", failures.join("\n"));
    }
}

#[test]
fn a_wrong_gradient_is_detected() {
    use ssl_lab::tensor::Tensor;
    let x = Tensor::new(&[3], vec![0.3, -0.2, 0.9]).unwrap().with_grad();
    let ok = gradcheck::check(&[x.clone()], gradcheck::OP_TOL, &|g, v| {
        let y = g.mul(v[0], v[0]).unwrap();
        g.sum(y).unwrap()
    });
    assert!(ok.is_ok());
    let frozen = gradcheck::check(&[x], gradcheck::OP_TOL, &|g, v| {
        let y = g.stop_gradient(v[0]).unwrap();
        let y = g.mul(y, v[0]).unwrap();
        g.sum(y).unwrap()
    });
    assert!(frozen.is_err());
}
