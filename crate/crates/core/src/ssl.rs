//! Consistency-training objectives: training-signal annealing (TSA),
//! confidence-based masking (CBM), temperature-sharpened KL consistency and
//! entropy minimization, combined with the supervised cross-entropy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Real, Result as TensorResult, Var};

/// Steepness of the log and exp TSA schedules.
const TSA_RATE: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum SslError {
    #[error("step {step} exceeds total steps {total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid ssl config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TsaSchedule {
    Linear,
    Log,
    Exp,
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    /// Weight of the consistency term.
    pub lambda: f64,
    pub tsa_schedule: TsaSchedule,
    /// Keep labelled rows whose true-class probability EXCEEDS the TSA
    /// threshold instead of the rows at or below it.
    pub tsa_literal: bool,
    pub eta_cbm_default: f64,
    /// Per-class CBM overrides keyed by class name. Values above 1 disable
    /// consistency for images predicted as that class.
    pub eta_cbm_per_class: BTreeMap<String, f64>,
    /// Softmax temperature of the consistency target.
    pub temperature: f64,
    pub entropy_weight: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            tsa_schedule: TsaSchedule::Log,
            tsa_literal: false,
            eta_cbm_default: 0.75,
            eta_cbm_per_class: (0..4).map(|i| (format!("cardiac_{i}"), 0.25)).collect(),
            temperature: 0.8,
            entropy_weight: 0.1,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<(), SslError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SslError::Config(format!("ssl.lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SslError::Config(format!("ssl.temperature must be positive, got {}", self.temperature)));
        }
        if !(self.entropy_weight >= 0.0 && self.entropy_weight.is_finite()) {
            return Err(SslError::Config(format!("ssl.entropy_weight must be non-negative, got {}", self.entropy_weight)));
        }
        let bad = |v: f64| !(v >= 0.0 && v.is_finite());
        if bad(self.eta_cbm_default) {
            return Err(SslError::Config(format!("ssl.eta_cbm_default must be non-negative, got {}", self.eta_cbm_default)));
        }
        if let Some((k, v)) = self.eta_cbm_per_class.iter().find(|(_, &v)| bad(v)) {
            return Err(SslError::Config(format!("ssl.eta_cbm_per_class[{k}] must be non-negative, got {v}")));
        }
        Ok(())
    }

    /// Per-class CBM thresholds for the given class names. Overrides naming
    /// classes absent from the dataset are ignored.
    pub fn cbm_thresholds(&self, class_names: &[String]) -> Vec<f64> {
        class_names
            .iter()
            .map(|n| self.eta_cbm_per_class.get(n).copied().unwrap_or(self.eta_cbm_default))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub step: usize,
    pub total_steps: usize,
    pub num_classes: usize,
}

/// Schedule progress in `[0, 1]`, exactly 0 at the first step and exactly 1
/// at the last for every schedule.
pub fn tsa_alpha(progress: f64, schedule: TsaSchedule) -> f64 {
    let tail = (-TSA_RATE).exp();
    match schedule {
        TsaSchedule::Linear => progress,
        TsaSchedule::Log => (1.0 - (-TSA_RATE * progress).exp()) / (1.0 - tail),
        TsaSchedule::Exp => ((TSA_RATE * (progress - 1.0)).exp() - tail) / (1.0 - tail),
        TsaSchedule::Disabled => 1.0,
    }
}

/// `η_tsa` rising from `1/C` to 1.
pub fn tsa_threshold(ctx: &StepContext, schedule: TsaSchedule) -> Result<f64, SslError> {
    if ctx.step > ctx.total_steps || ctx.total_steps == 0 {
        return Err(SslError::StepOutOfRange { step: ctx.step, total: ctx.total_steps });
    }
    let alpha = tsa_alpha(ctx.step as f64 / ctx.total_steps as f64, schedule);
    let c = ctx.num_classes as f64;
    Ok((1.0 + alpha * (c - 1.0)) / c)
}

/// Rows of `probs` (`[N, C]`) that keep their supervised gradient.
///
/// Rows whose true-class probability is at most `eta` are kept; already
/// confident rows are dropped. `literal` inverts the comparison.
pub fn tsa_mask<T: Real>(probs: &[T], classes: usize, labels: &[usize], eta: f64, literal: bool) -> Vec<bool> {
    let eta = T::from_f64c(eta);
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let p = probs[r * classes + y];
            if literal {
                p > eta
            } else {
                p <= eta
            }
        })
        .collect()
}

/// Index and value of the row maximum (first index on ties).
pub fn row_argmax<T: Real>(row: &[T]) -> (usize, T) {
    row.iter().enumerate().fold((0, row[0]), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
}

/// Rows whose maximum probability exceeds the threshold of their predicted class.
pub fn cbm_mask<T: Real>(probs: &[T], thresholds: &[f64]) -> Vec<bool> {
    probs
        .chunks(thresholds.len())
        .map(|row| {
            let (c, p) = row_argmax(row);
            p.to_f64().unwrap() > thresholds[c]
        })
        .collect()
}

/// Graph nodes of the consistency term.
pub struct Consistency {
    pub loss: Var,
    /// Unsharpened prediction on the original images; drives the mask.
    pub original: Var,
    /// Sharpened, gradient-stopped target distribution.
    pub target: Var,
    /// Prediction on the augmented images.
    pub augmented: Var,
    pub mask: Vec<bool>,
}

/// Masked `KL(sharpen(p_orig) ‖ p_aug)`; only the augmented branch gets gradient.
pub fn consistency_loss<T: Real>(
    g: &mut Graph<T>,
    logits_orig: Var,
    logits_aug: Var,
    temperature: f64,
    thresholds: &[f64],
) -> TensorResult<Consistency> {
    let plain = g.softmax(logits_orig, T::one())?;
    let mask = cbm_mask(g.value(plain), thresholds);
    let sharp = g.softmax(logits_orig, T::from_f64c(temperature))?;
    let target = g.stop_gradient(sharp)?;
    let augmented = g.softmax(logits_aug, T::one())?;
    let loss = g.kl_divergence(target, augmented, Some(&mask))?;
    Ok(Consistency { loss, original: plain, target, augmented, mask })
}

/// `sup + λ·consistency + w·entropy`. Terms passed as `None` are omitted.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    supervised: Var,
    consistency: Option<Var>,
    entropy: Option<Var>,
    cfg: &SslConfig,
) -> TensorResult<Var> {
    let mut total = supervised;
    if let Some(c) = consistency {
        let c = g.scale(c, T::from_f64c(cfg.lambda))?;
        total = g.add(total, c)?;
    }
    if let Some(e) = entropy {
        let e = g.scale(e, T::from_f64c(cfg.entropy_weight))?;
        total = g.add(total, e)?;
    }
    Ok(total)
}
