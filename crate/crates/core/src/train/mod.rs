//! Supervised and consistency-regularized training loops.
//!
//! A supervised epoch is `ceil(|D_L| / batch_size)` steps and an SSL epoch
//! is `ceil(|D_U| / batch_size)` steps. Labelled batches come from a cyclic
//! stream of shuffled passes over D_L, so every batch is full and D_L is
//! recycled as often as needed; in SSL mode an independent cyclic stream
//! over D_U supplies the unlabelled batch of each step. Augmentation of a sample is keyed by (seed, sample,
//! pass), which makes every logged number a function of (config, seed).

mod grid;
pub mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{augment, AugmentPolicy};
use crate::data::{self, stack_images, DataError, Dataset, Split, UnlabelledSet};
use crate::eval::{evaluate, EvalError, MetricsReport};
use crate::image::Image;
use crate::model::{forward, Mode, ModelConfig, ModelError, ModelParams};
use crate::rng;
use crate::ssl::{self, row_argmax, SslConfig, SslError, StepContext, TsaSchedule};
use crate::tensor::{Graph, TensorError};

pub use grid::{completed, preset, replicate_seed, run_dir, run_grid, GridAxes, GridOutcome, GridRun, CBM_DISABLED, PRESETS};
pub use optim::{OptimizerConfig, Optimizer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty {0}")]
    EmptyData(&'static str),
    #[error("missing gradient: {0}")]
    MissingGradient(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error("io error at {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Supervised,
    Ssl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub optimizer: OptimizerConfig,
    /// Defaults to 50, or 5 for a budget of one label per class.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub labelled_per_class: usize,
    pub ssl: SslConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
    pub include_background: bool,
    /// Model preset name.
    pub model: String,
    /// Evaluate on the test split every this many epochs (0: final only).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Supervised,
            optimizer: OptimizerConfig::default(),
            epochs: None,
            batch_size: 32,
            labelled_per_class: 20,
            ssl: SslConfig::default(),
            augment: AugmentPolicy::default(),
            seed: 0,
            include_background: true,
            model: "sononet_mini".into(),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn effective_epochs(&self) -> usize {
        self.epochs.unwrap_or(if self.labelled_per_class == 1 { 5 } else { 50 })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let cfg = |m: String| Err(TrainError::Config(m));
        self.optimizer.validate().map_err(TrainError::Config)?;
        self.augment.validate().map_err(TrainError::Config)?;
        self.ssl.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if self.epochs == Some(0) {
            return cfg("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return cfg("batch_size must be positive".into());
        }
        if self.labelled_per_class == 0 {
            return cfg("labelled_per_class must be positive".into());
        }
        if ModelConfig::preset(&self.model, 2).is_none() {
            return cfg(format!("model '{}' is not a known preset (sononet_mini, sononet_full)", self.model));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Short description of what distinguishes this run inside a grid cell.
    pub fn variant(&self) -> String {
        match self.mode {
            TrainMode::Supervised => format!("supervised {}", self.optimizer.label()),
            TrainMode::Ssl => {
                let tsa = format!("{:?}", self.ssl.tsa_schedule).to_lowercase();
                let mut overrides: Vec<String> = self.ssl.eta_cbm_per_class.values().map(|v| fmt_threshold(*v)).collect();
                overrides.dedup();
                let cardiac = if overrides.is_empty() { "-".into() } else { overrides.join("/") };
                format!(
                    "ssl lambda={} tsa={tsa} cbm={} cardiac={cardiac} {}",
                    self.ssl.lambda,
                    fmt_threshold(self.ssl.eta_cbm_default),
                    self.optimizer.label()
                )
            }
        }
    }
}

fn fmt_threshold(v: f64) -> String {
    if v > 1.0 {
        "disabled".into()
    } else {
        format!("{v}")
    }
}

/// Diagnostics of one epoch, averaged over its steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub supervised_loss: f64,
    pub consistency_loss: Option<f64>,
    pub entropy: Option<f64>,
    /// TSA threshold at the first step of the epoch.
    pub eta_tsa: Option<f64>,
    pub tsa_kept_fraction: Option<f64>,
    pub cbm_kept_fraction: Option<f64>,
    /// CBM-kept fraction among unlabelled images predicted as each class;
    /// `None` where nothing was predicted as that class.
    pub cbm_kept_per_class: Option<Vec<Option<f64>>>,
    pub learning_rate: f64,
    pub test_overall: Option<f64>,
    pub test_grouped: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub config_hash: String,
    /// Hash of the source dataset's test split (before background removal).
    pub test_set_hash: String,
    pub class_names: Vec<String>,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    /// TSA-kept fraction of the very first labelled batch.
    pub first_step_tsa_kept: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: Option<MetricsReport>,
    /// Reason the run aborted, if it did.
    pub failed: Option<String>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Per-epoch diagnostics as CSV. Excludes wall-clock time, so identical
    /// runs produce identical files.
    pub fn metrics_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        let mut s = String::from(
            "epoch,supervised_loss,consistency_loss,entropy,eta_tsa,tsa_kept,cbm_kept,learning_rate,test_overall,test_grouped\n",
        );
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.9e},{},{},{},{},{},{:.9e},{},{}\n",
                e.epoch,
                e.supervised_loss,
                opt(e.consistency_loss),
                opt(e.entropy),
                opt(e.eta_tsa),
                opt(e.tsa_kept_fraction),
                opt(e.cbm_kept_fraction),
                e.learning_rate,
                opt(e.test_overall),
                opt(e.test_grouped)
            ));
        }
        s
    }
}

/// A finished run: its record and final parameters.
#[derive(Debug, Clone)]
pub struct Trained {
    pub record: RunRecord,
    pub params: ModelParams,
}

/// Endless sequence of shuffled passes over `0..n`.
struct CyclicSampler {
    n: usize,
    seed: u64,
    tag: &'static str,
    pass: u64,
    order: Vec<usize>,
    pos: usize,
}

impl CyclicSampler {
    fn new(n: usize, seed: u64, tag: &'static str) -> Self {
        let mut s = Self { n, seed, tag, pass: 0, order: Vec::new(), pos: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng::stream(self.seed, self.tag, &[self.pass]));
        self.pos = 0;
    }

    /// Next `b` (index, pass) pairs.
    fn next_batch(&mut self, b: usize) -> Vec<(usize, u64)> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.n {
                self.pass += 1;
                self.reshuffle();
            }
            out.push((self.order[self.pos], self.pass));
            self.pos += 1;
        }
        out
    }
}

fn augmented(images: &[&Image], picks: &[(usize, u64)], policy: &AugmentPolicy, seed: u64, tag: &str) -> Vec<Image> {
    picks.iter().map(|&(i, pass)| augment(images[i], policy, &mut rng::stream(seed, tag, &[i as u64, pass]))).collect()
}

#[derive(Default)]
struct EpochAcc {
    steps: usize,
    sup: f64,
    cons: f64,
    ent: f64,
    tsa_kept: usize,
    tsa_total: usize,
    cbm_kept: usize,
    cbm_total: usize,
    per_class_kept: Vec<usize>,
    per_class_total: Vec<usize>,
}

fn frac(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Sums parameter gradients over every forward pass recorded on `g`.
fn collect_grads(g: &Graph<f32>, params: &ModelParams, passes: &[&[crate::tensor::Var]]) -> Vec<Option<Vec<f32>>> {
    params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if !t.requires_grad {
                return None;
            }
            let mut acc = vec![0.0f32; t.len()];
            for vars in passes {
                if let Some(gr) = g.grad(vars[i]) {
                    acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
            }
            Some(acc)
        })
        .collect()
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    dl: &'a Dataset,
    test: &'a Dataset,
    du: Option<&'a UnlabelledSet>,
}

impl Loop<'_> {
    fn run(&self, mut params: ModelParams, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<Trained, TrainError> {
        let started = Instant::now();
        let cfg = self.cfg;
        cfg.validate()?;
        if self.dl.is_empty() {
            return Err(TrainError::EmptyData("labelled set"));
        }
        if self.test.is_empty() {
            return Err(TrainError::EmptyData("test set"));
        }
        if let Some(du) = self.du {
            if du.is_empty() {
                return Err(TrainError::EmptyData("unlabelled set"));
            }
        }
        let c = self.dl.num_classes();
        if params.config().num_classes != c {
            return Err(TrainError::Config(format!("model has {} outputs for {c} classes", params.config().num_classes)));
        }
        let ssl_mode = self.du.is_some();
        let b = cfg.batch_size;
        let epochs = cfg.effective_epochs();
        let steps_per_epoch = self.du.map_or(self.dl.len(), UnlabelledSet::len).div_ceil(b);
        let total_steps = epochs * steps_per_epoch;
        let thresholds = cfg.ssl.cbm_thresholds(self.dl.class_names());

        let mut opt = Optimizer::new(cfg.optimizer, params.tensors(), steps_per_epoch);
        let labelled: Vec<&Image> = self.dl.samples().iter().map(|s| &s.image).collect();
        let labels_all: Vec<usize> = self.dl.samples().iter().map(|s| s.label).collect();
        let unlabelled: Vec<&Image> = self.du.map(|d| d.images().iter().collect()).unwrap_or_default();
        let mut lsampler = CyclicSampler::new(labelled.len(), cfg.seed, "labelled-order");
        let mut usampler = CyclicSampler::new(unlabelled.len().max(1), cfg.seed, "unlabelled-order");

        let mut record = RunRecord {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            test_set_hash: self.test.content_hash(),
            class_names: self.dl.class_names().to_vec(),
            steps_per_epoch,
            total_steps,
            first_step_tsa_kept: None,
            epochs: Vec::new(),
            final_metrics: None,
            failed: None,
            wall_clock_secs: 0.0,
        };

        let mut step = 0usize;
        for epoch in 0..epochs {
            let mut acc = EpochAcc { per_class_kept: vec![0; c], per_class_total: vec![0; c], ..Default::default() };
            let lr = opt.current_lr();
            let eta_first = if ssl_mode && cfg.ssl.tsa_schedule != TsaSchedule::Disabled {
                Some(ssl::tsa_threshold(&StepContext { step, total_steps, num_classes: c }, cfg.ssl.tsa_schedule)?)
            } else {
                None
            };
            for _ in 0..steps_per_epoch {
                let picks = lsampler.next_batch(b);
                let ubatch = if ssl_mode { Some(usampler.next_batch(b)) } else { None };
                let outcome = self.step(&mut params, &mut opt, step, total_steps, &picks, ubatch.as_deref(), &labelled, &labels_all, &unlabelled, &thresholds, &mut acc);
                match outcome {
                    Ok(()) => {}
                    Err(TrainError::Tensor(TensorError::NonFinite { op })) => {
                        record.failed = Some(format!("non-finite value in {op} at epoch {epoch}, step {step}"));
                        record.wall_clock_secs = started.elapsed().as_secs_f64();
                        return Ok(Trained { record, params });
                    }
                    Err(e) => return Err(e),
                }
                if step == 0 && ssl_mode {
                    record.first_step_tsa_kept = Some(frac(acc.tsa_kept, acc.tsa_total));
                }
                step += 1;
            }
            let n = acc.steps as f64;
            let last = epoch + 1 == epochs;
            let metrics = if last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
                Some(evaluate(&params, self.test)?)
            } else {
                None
            };
            let row = EpochRecord {
                epoch,
                supervised_loss: acc.sup / n,
                consistency_loss: ssl_mode.then(|| acc.cons / n),
                entropy: ssl_mode.then(|| acc.ent / n),
                eta_tsa: eta_first,
                tsa_kept_fraction: ssl_mode.then(|| frac(acc.tsa_kept, acc.tsa_total)),
                cbm_kept_fraction: ssl_mode.then(|| frac(acc.cbm_kept, acc.cbm_total)),
                cbm_kept_per_class: ssl_mode.then(|| {
                    acc.per_class_kept.iter().zip(&acc.per_class_total).map(|(&k, &t)| (t > 0).then(|| frac(k, t))).collect()
                }),
                learning_rate: lr,
                test_overall: metrics.as_ref().map(|m| m.overall_accuracy_anatomical),
                test_grouped: metrics.as_ref().map(|m| m.grouped_cluster_accuracy),
            };
            on_epoch(&row);
            record.epochs.push(row);
            if last {
                record.final_metrics = metrics;
            }
        }
        record.wall_clock_secs = started.elapsed().as_secs_f64();
        Ok(Trained { record, params })
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        params: &mut ModelParams,
        opt: &mut Optimizer,
        step: usize,
        total_steps: usize,
        picks: &[(usize, u64)],
        upicks: Option<&[(usize, u64)]>,
        labelled: &[&Image],
        labels_all: &[usize],
        unlabelled: &[&Image],
        thresholds: &[f64],
        acc: &mut EpochAcc,
    ) -> Result<(), TrainError> {
        let cfg = self.cfg;
        let c = params.config().num_classes;
        let seed = cfg.seed;
        let labels: Vec<usize> = picks.iter().map(|&(i, _)| labels_all[i]).collect();
        let xl = stack_images(&augmented(labelled, picks, &cfg.augment, seed, "augment-labelled"));

        let mut g = Graph::new();
        let xl = g.leaf(&xl)?;
        let fl = forward(params, &mut g, xl, Mode::Train)?;
        let probs = g.softmax(fl.logits, 1.0)?;

        let Some(upicks) = upicks else {
            let loss = g.cross_entropy(probs, &labels, None)?;
            acc.sup += g.item(loss) as f64;
            acc.steps += 1;
            g.backward(loss)?;
            let grads = collect_grads(&g, params, &[&fl.param_vars]);
            opt.step(params.tensors_mut(), &grads)?;
            params.update_running_stats(&fl.batch_stats);
            return Ok(());
        };

        let tsa = match cfg.ssl.tsa_schedule {
            TsaSchedule::Disabled => None,
            schedule => {
                let eta = ssl::tsa_threshold(&StepContext { step, total_steps, num_classes: c }, schedule)?;
                Some(ssl::tsa_mask(g.value(probs), c, &labels, eta, cfg.ssl.tsa_literal))
            }
        };
        acc.tsa_total += labels.len();
        acc.tsa_kept += tsa.as_ref().map_or(labels.len(), |m| m.iter().filter(|&&k| k).count());
        let sup = g.cross_entropy(probs, &labels, tsa.as_deref())?;

        let originals: Vec<Image> = upicks.iter().map(|&(i, _)| unlabelled[i].clone()).collect();
        let xu = g.leaf(&stack_images(&originals))?;
        let xa = g.leaf(&stack_images(&augmented(unlabelled, upicks, &cfg.augment, seed, "augment-unlabelled")))?;
        let fo = forward(params, &mut g, xu, Mode::Train)?;
        let fa = forward(params, &mut g, xa, Mode::Train)?;
        let cons = ssl::consistency_loss(&mut g, fo.logits, fa.logits, cfg.ssl.temperature, thresholds)?;
        let ent = g.entropy(cons.augmented, None)?;
        let total = ssl::total_loss(&mut g, sup, Some(cons.loss), Some(ent), &cfg.ssl)?;

        for (row, &kept) in g.value(cons.original).chunks(c).zip(&cons.mask) {
            let (pred, _) = row_argmax(row);
            acc.per_class_total[pred] += 1;
            acc.per_class_kept[pred] += kept as usize;
        }
        acc.cbm_total += cons.mask.len();
        acc.cbm_kept += cons.mask.iter().filter(|&&k| k).count();
        acc.sup += g.item(sup) as f64;
        acc.cons += g.item(cons.loss) as f64;
        acc.ent += g.item(ent) as f64;
        acc.steps += 1;

        g.backward(total)?;
        let grads = collect_grads(&g, params, &[&fl.param_vars, &fo.param_vars, &fa.param_vars]);
        opt.step(params.tensors_mut(), &grads)?;
        params.update_running_stats(&fl.batch_stats);
        Ok(())
    }
}

/// Cross-entropy training on augmented labelled batches.
pub fn train_supervised(
    cfg: &TrainConfig,
    params: ModelParams,
    dl: &Dataset,
    test: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Trained, TrainError> {
    Loop { cfg, dl, test, du: None }.run(params, on_epoch)
}

/// Supervised loss on labelled batches plus masked consistency and entropy
/// on unlabelled batches.
pub fn train_ssl(
    cfg: &TrainConfig,
    params: ModelParams,
    dl: &Dataset,
    du: &UnlabelledSet,
    test: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Trained, TrainError> {
    Loop { cfg, dl, test, du: Some(du) }.run(params, on_epoch)
}

/// Full pipeline for one config on a source dataset: optional background
/// removal, label subsetting, model initialization and training.
pub fn run(cfg: &TrainConfig, source: &Dataset, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<Trained, TrainError> {
    cfg.validate()?;
    let test_set_hash = source.split(Split::Test).content_hash();
    let ds = if cfg.include_background { source.clone() } else { source.without_background() };
    let test = ds.split(Split::Test);
    let (dl, du) = data::subset_labels(&ds, cfg.labelled_per_class, rng::derive_seed(cfg.seed, "label-subset", &[]))?;
    let (h, w) = ds.image_size().ok_or(TrainError::EmptyData("dataset"))?;
    let mut model = ModelConfig::preset(&cfg.model, ds.num_classes()).expect("validated preset");
    if model.input_shape != (h, w) {
        if cfg.model == "sononet_mini" {
            model.input_shape = (h, w);
        } else {
            return Err(TrainError::Config(format!(
                "model '{}' expects {}x{} images, dataset has {h}x{w}",
                cfg.model, model.input_shape.0, model.input_shape.1
            )));
        }
    }
    let params = ModelParams::build(&model, rng::derive_seed(cfg.seed, "model-init", &[]))?;
    let mut trained = match cfg.mode {
        TrainMode::Supervised => train_supervised(cfg, params, &dl, &test, on_epoch)?,
        TrainMode::Ssl => train_ssl(cfg, params, &dl, &du, &test, on_epoch)?,
    };
    trained.record.test_set_hash = test_set_hash;
    Ok(trained)
}

/// Writes `record.json`, `metrics.csv`, `model.ckpt` and the evaluation
/// exports into `dir`.
pub fn write_run(trained: &Trained, dir: &std::path::Path) -> Result<(), TrainError> {
    let io = |path: &std::path::Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let rec = &trained.record;
    let json = serde_json::to_string_pretty(rec).expect("record serializes");
    let rpath = dir.join("record.json.partial");
    std::fs::write(&rpath, json).map_err(io(&rpath))?;
    let mpath = dir.join("metrics.csv");
    std::fs::write(&mpath, rec.metrics_csv()).map_err(io(&mpath))?;
    if rec.failed.is_none() {
        crate::checkpoint::save(&trained.params, &dir.join("model.ckpt")).map_err(|e| TrainError::Io {
            path: dir.join("model.ckpt"),
            source: std::io::Error::other(e.to_string()),
        })?;
    }
    if let Some(m) = &rec.final_metrics {
        let run = serde_json::json!({
            "config_hash": rec.config_hash,
            "test_set_hash": rec.test_set_hash,
            "variant": rec.config.variant(),
        });
        crate::eval::export(m, Some(&run), dir)?;
    }
    // The record lands last so its presence marks a complete run.
    let final_path = dir.join("record.json");
    std::fs::rename(&rpath, &final_path).map_err(io(&final_path))?;
    Ok(())
}

pub fn read_record(path: &std::path::Path) -> Result<RunRecord, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
}
