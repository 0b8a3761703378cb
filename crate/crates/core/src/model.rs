//! Sononet-style CNN: blocks of 3x3 conv + batchnorm + ReLU separated by
//! 2x2 max pooling, ending in global average pooling.
//!
//! The full preset follows the Sononet layout (13 feature convolutions plus
//! two 1x1 adaptation convolutions whose last layer emits one channel per
//! class, averaged into logits). The mini preset keeps the same code path
//! with fewer, narrower layers and a dense classifier after pooling.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{BatchStats, Graph, Padding, Real, Tensor, TensorError, Var};

/// Running-statistics momentum: `running = m·running + (1−m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match model input [N, 1, {h}, {w}]")]
    Input { got: Vec<usize>, h: usize, w: usize },
    #[error("parameter set does not match the model config: {0}")]
    Params(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub convs: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: Vec<ConvBlock>,
    pub num_classes: usize,
    /// Input (height, width).
    pub input_shape: (usize, usize),
    /// Width of the 1x1 adaptation layer. `None` uses a dense classifier.
    #[serde(default)]
    pub adaptation: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

fn blocks(spec: &[(usize, usize)]) -> Vec<ConvBlock> {
    spec.iter().map(|&(convs, width)| ConvBlock { convs, width }).collect()
}

impl ModelConfig {
    /// 15 convolutions and 4 max-pools at 224x288.
    pub fn sononet_full(num_classes: usize) -> Self {
        Self {
            blocks: blocks(&[(2, 32), (2, 64), (3, 128), (3, 256), (3, 256)]),
            num_classes,
            input_shape: (224, 288),
            adaptation: Some(128),
        }
    }

    /// 7 convolutions and 2 max-pools at 32x32.
    pub fn sononet_mini(num_classes: usize) -> Self {
        Self {
            blocks: blocks(&[(2, 8), (2, 16), (3, 32)]),
            num_classes,
            input_shape: (32, 32),
            adaptation: None,
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Option<Self> {
        match name {
            "sononet_full" => Some(Self::sononet_full(num_classes)),
            "sononet_mini" => Some(Self::sononet_mini(num_classes)),
            _ => None,
        }
    }

    pub fn conv_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.convs).sum::<usize>() + if self.adaptation.is_some() { 2 } else { 0 }
    }

    pub fn maxpools(&self) -> usize {
        self.blocks.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.blocks.is_empty() || self.blocks.iter().any(|b| b.convs == 0 || b.width == 0) {
            return Err(ModelError::Config("every block needs at least one conv of positive width".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.adaptation == Some(0) {
            return Err(ModelError::Config("adaptation width must be positive".into()));
        }
        let div = 1usize << self.maxpools();
        let (h, w) = self.input_shape;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(ModelError::Config(format!(
                "input {h}x{w} is not divisible by 2^{} for {} max-pools",
                self.maxpools(),
                self.maxpools()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Named parameter tensors in a fixed, config-determined order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Parameter specs in the order the forward pass consumes them.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init, bool)> {
    let mut out = Vec::new();
    let conv_bn = |name: String, cin: usize, cout: usize, k: usize, out: &mut Vec<_>| {
        out.push((format!("{name}.weight"), vec![cout, cin, k, k], Init::HeUniform { fan_in: cin * k * k }, true));
        out.push((format!("{name}.bn.gamma"), vec![cout], Init::Ones, true));
        out.push((format!("{name}.bn.beta"), vec![cout], Init::Zeros, true));
        out.push((format!("{name}.bn.running_mean"), vec![cout], Init::Zeros, false));
        out.push((format!("{name}.bn.running_var"), vec![cout], Init::Ones, false));
    };
    let mut cin = 1;
    for (b, block) in cfg.blocks.iter().enumerate() {
        for c in 0..block.convs {
            conv_bn(format!("block{b}.conv{c}"), cin, block.width, 3, &mut out);
            cin = block.width;
        }
    }
    match cfg.adaptation {
        Some(hidden) => {
            conv_bn("adapt0".into(), cin, hidden, 1, &mut out);
            conv_bn("adapt1".into(), hidden, cfg.num_classes, 1, &mut out);
        }
        None => {
            out.push(("classifier.weight".into(), vec![cfg.num_classes, cin], Init::HeUniform { fan_in: cin }, true));
            out.push(("classifier.bias".into(), vec![cfg.num_classes], Init::Zeros, true));
        }
    }
    out
}

impl ModelParams<f32> {
    /// Deterministic initialization: He-uniform for all weights, batchnorm
    /// scale 1 and shift 0, zero biases.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init, trainable) in layout(config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
            };
            let mut t = Tensor::new(&shape, data)?;
            t.requires_grad = trainable;
            names.push(name);
            tensors.push(t);
        }
        Self::from_parts(config.clone(), names, tensors)
    }
}

impl<T: Real> ModelParams<T> {
    pub fn from_parts(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != names.len() || names.len() != tensors.len() {
            return Err(ModelError::Params(format!("expected {} tensors, got {}", expected.len(), names.len())));
        }
        let mut tensors = tensors;
        for ((name, shape, _, trainable), (got, t)) in expected.iter().zip(names.iter().zip(tensors.iter_mut())) {
            if name != got || t.shape() != shape.as_slice() {
                return Err(ModelError::Params(format!("expected {name} {shape:?}, found {got} {:?}", t.shape())));
            }
            t.requires_grad = *trainable;
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { config, names, tensors, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad).map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Folds training-mode batch statistics into the running estimates, in
    /// the order the forward pass produced them.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) {
        let m = T::from_f64c(BN_MOMENTUM);
        let one_minus = T::one() - m;
        let mut it = stats.iter();
        for i in 0..self.names.len() {
            if !self.names[i].ends_with(".running_mean") {
                continue;
            }
            let s = it.next().expect("one batch-stat record per batchnorm layer");
            for (r, &b) in self.tensors[i].data_mut().iter_mut().zip(&s.mean) {
                *r = m * *r + one_minus * b;
            }
            for (r, &b) in self.tensors[i + 1].data_mut().iter_mut().zip(&s.var) {
                *r = m * *r + one_minus * b;
            }
        }
    }
}

/// Result of a recorded forward pass.
pub struct Forward<T> {
    pub logits: Var,
    /// Graph variable of each parameter tensor (same order as the params).
    pub param_vars: Vec<Var>,
    /// Batch statistics of every batchnorm layer (train mode only).
    pub batch_stats: Vec<BatchStats<T>>,
}

/// Records the network on `graph`. `input` must be `[N, 1, H, W]`.
pub fn forward<T: Real>(params: &ModelParams<T>, graph: &mut Graph<T>, input: Var, mode: Mode) -> Result<Forward<T>, ModelError> {
    let cfg = &params.config;
    let (h, w) = cfg.input_shape;
    let s = graph.shape(input);
    if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
        return Err(ModelError::Input { got: s.to_vec(), h, w });
    }
    let param_vars = params.tensors.iter().map(|t| graph.leaf(t)).collect::<Result<Vec<_>, _>>()?;
    let mut batch_stats = Vec::new();
    let mut cursor = 0usize;
    let mut conv_bn = |graph: &mut Graph<T>, x: Var, relu: bool, stats: &mut Vec<BatchStats<T>>| -> Result<Var, ModelError> {
        let kernel = param_vars[cursor];
        let (gamma, beta) = (param_vars[cursor + 1], param_vars[cursor + 2]);
        let (rm, rv) = (&params.tensors[cursor + 3], &params.tensors[cursor + 4]);
        cursor += 5;
        let y = graph.conv2d(x, kernel, None, Padding::Same)?;
        let y = match mode {
            Mode::Train => {
                let (y, st) = graph.batchnorm2d_train(y, gamma, beta)?;
                stats.push(st);
                y
            }
            Mode::Eval => graph.batchnorm2d_eval(y, gamma, beta, rm.data(), rv.data())?,
        };
        Ok(if relu { graph.relu(y)? } else { y })
    };

    let mut x = input;
    for (b, block) in cfg.blocks.iter().enumerate() {
        if b > 0 {
            x = graph.maxpool2(x)?;
        }
        for _ in 0..block.convs {
            x = conv_bn(graph, x, true, &mut batch_stats)?;
        }
    }
    let logits = if cfg.adaptation.is_some() {
        x = conv_bn(graph, x, true, &mut batch_stats)?;
        x = conv_bn(graph, x, false, &mut batch_stats)?;
        graph.global_avg_pool(x)?
    } else {
        let pooled = graph.global_avg_pool(x)?;
        let n = param_vars.len();
        graph.dense(pooled, param_vars[n - 2], param_vars[n - 1])?
    };
    Ok(Forward { logits, param_vars, batch_stats })
}

/// Eval-mode logits `[N, num_classes]` for a batch `[N, 1, H, W]`.
pub fn predict_logits<T: Real>(params: &ModelParams<T>, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let mut graph = Graph::inference();
    let input = graph.leaf(batch)?;
    let fwd = forward(params, &mut graph, input, Mode::Eval)?;
    Ok(graph.to_tensor(fwd.logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { blocks: blocks(&[(1, 4), (1, 6)]), num_classes: 3, input_shape: (8, 8), adaptation: None }
    }

    #[test]
    fn full_preset_has_fifteen_convs_and_four_pools() {
        let cfg = ModelConfig::sononet_full(14);
        assert_eq!(cfg.conv_layers(), 15);
        assert_eq!(cfg.maxpools(), 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn mini_preset_is_small() {
        let cfg = ModelConfig::sononet_mini(14);
        assert_eq!(cfg.conv_layers(), 7);
        assert_eq!(cfg.maxpools(), 2);
        let p = ModelParams::build(&cfg, 0).unwrap();
        // 3x3 convs: 1*8 + 8*8 + 8*16 + 16*16 + 16*32 + 32*32 + 32*32 kernels,
        // two batchnorm scalars per channel, and a 32x14 classifier with bias.
        let convs = 9 * (8 + 64 + 128 + 256 + 512 + 1024 + 1024);
        let bn = 2 * (8 + 8 + 16 + 16 + 32 + 32 + 32);
        let head = 32 * 14 + 14;
        assert_eq!(p.parameter_count(), convs + bn + head);
        assert!(p.parameter_count() < 500_000);
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut cfg = tiny();
        cfg.input_shape = (6, 8);
        assert!(ModelParams::build(&cfg, 0).is_ok());
        cfg.input_shape = (7, 8);
        assert!(matches!(ModelParams::build(&cfg, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let a = ModelParams::build(&tiny(), 11).unwrap();
        let b = ModelParams::build(&tiny(), 11).unwrap();
        let c = ModelParams::build(&tiny(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn names_are_unique() {
        let p = ModelParams::build(&ModelConfig::sononet_full(14), 0).unwrap();
        let mut names = p.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), p.len());
    }

    #[test]
    fn logits_shape_and_identical_rows() {
        let p = ModelParams::build(&tiny(), 3).unwrap();
        let img: Vec<f32> = (0..64).map(|i| (i as f32 * 0.17).sin().abs()).collect();
        let batch = Tensor::new(&[3, 1, 8, 8], img.repeat(3)).unwrap();
        let logits = predict_logits(&p, &batch).unwrap();
        assert_eq!(logits.shape(), &[3, 3]);
        let d = logits.data();
        assert_eq!(&d[0..3], &d[3..6]);
        assert_eq!(&d[0..3], &d[6..9]);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let p = ModelParams::build(&tiny(), 3).unwrap();
        let batch = Tensor::<f32>::zeros(&[1, 1, 8, 6]);
        assert!(matches!(predict_logits(&p, &batch), Err(ModelError::Input { .. })));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut p = ModelParams::build(&tiny(), 0).unwrap();
        let stats = vec![
            BatchStats { mean: vec![1.0; 4], var: vec![3.0; 4] },
            BatchStats { mean: vec![2.0; 6], var: vec![5.0; 6] },
        ];
        p.update_running_stats(&stats);
        assert!((p.get("block0.conv0.bn.running_mean").unwrap().data()[0] - 0.1).abs() < 1e-7);
        assert!((p.get("block0.conv0.bn.running_var").unwrap().data()[0] - 1.2).abs() < 1e-6);
        assert!((p.get("block1.conv0.bn.running_mean").unwrap().data()[5] - 0.2).abs() < 1e-7);
    }
}
