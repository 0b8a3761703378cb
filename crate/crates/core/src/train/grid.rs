//! Cartesian experiment grids with resumable, per-run output directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_record, run, write_run, EpochRecord, RunRecord, TrainConfig, TrainMode};
use crate::data::{Dataset, Split};
use crate::rng;
use crate::ssl::TsaSchedule;
use crate::train::OptimizerConfig;

/// Axes of a grid. An empty axis keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    pub labelled_per_class: Vec<usize>,
    pub include_background: Vec<bool>,
    pub mode: Vec<TrainMode>,
    pub tsa_schedule: Vec<TsaSchedule>,
    pub optimizer: Vec<OptimizerConfig>,
    /// CBM threshold applied to every cluster class; values above 1 disable
    /// consistency for images predicted as a cluster class.
    pub cardiac_threshold: Vec<f64>,
    /// Independent seeds per cell (at least 1).
    pub replicates: usize,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Threshold value used for the "disabled" cardiac setting.
pub const CBM_DISABLED: f64 = 2.0;

pub const PRESETS: [&str; 4] = ["fig2", "fig3", "table1", "table2"];

/// Named experiment grids (one replicate; callers set `replicates`).
///
/// * `fig2`: supervised baselines over budgets {1, 5, 20, 50, 100, 200}, with and without background;
/// * `fig3`: {5, 20, 50} x {background, none} x {supervised, ssl};
/// * `table1`: cardiac threshold sweep at 20 labels per class without background;
/// * `table2`: optimizer x TSA schedule sweep of SSL runs.
pub fn preset(name: &str) -> Option<GridAxes> {
    let base = GridAxes { replicates: 1, ..Default::default() };
    Some(match name {
        "fig2" => GridAxes {
            labelled_per_class: vec![1, 5, 20, 50, 100, 200],
            include_background: vec![false, true],
            mode: vec![TrainMode::Supervised],
            ..base
        },
        "fig3" => GridAxes {
            labelled_per_class: vec![5, 20, 50],
            include_background: vec![true, false],
            mode: vec![TrainMode::Supervised, TrainMode::Ssl],
            ..base
        },
        "table1" => GridAxes {
            labelled_per_class: vec![20],
            include_background: vec![false],
            mode: vec![TrainMode::Supervised, TrainMode::Ssl],
            cardiac_threshold: vec![0.75, 0.375, 0.25, 0.1875, CBM_DISABLED],
            ..base
        },
        "table2" => GridAxes {
            mode: vec![TrainMode::Ssl],
            optimizer: vec![
                OptimizerConfig::Adam { lr: 1e-3 },
                OptimizerConfig::Momentum { lr: 1e-3 },
                OptimizerConfig::SgdCyclic { lr_min: 7e-3, lr_max: 5e-2 },
            ],
            tsa_schedule: vec![TsaSchedule::Linear, TsaSchedule::Log],
            ..base
        },
        _ => return None,
    })
}

/// Seed of replicate `r`, shared by every cell so comparisons are paired.
pub fn replicate_seed(base: u64, r: usize) -> u64 {
    rng::derive_seed(base, "replicate", &[r as u64])
}

impl GridAxes {
    /// Every distinct config of the grid, in a fixed order. SSL-only axes do
    /// not multiply supervised runs.
    pub fn expand(&self, base: &TrainConfig, cluster_classes: &[String]) -> Vec<TrainConfig> {
        let mut out: Vec<TrainConfig> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for r in 0..self.replicates.max(1) {
            for &budget in &axis(&self.labelled_per_class, base.labelled_per_class) {
                for &bg in &axis(&self.include_background, base.include_background) {
                    for &mode in &axis(&self.mode, base.mode) {
                        for &opt in &axis(&self.optimizer, base.optimizer) {
                            for &tsa in &axis(&self.tsa_schedule, base.ssl.tsa_schedule) {
                                let thresholds: Vec<Option<f64>> = if self.cardiac_threshold.is_empty() {
                                    vec![None]
                                } else {
                                    self.cardiac_threshold.iter().map(|&t| Some(t)).collect()
                                };
                                for t in thresholds {
                                    let mut cfg = base.clone();
                                    cfg.seed = replicate_seed(base.seed, r);
                                    cfg.labelled_per_class = budget;
                                    cfg.include_background = bg;
                                    cfg.mode = mode;
                                    cfg.optimizer = opt;
                                    if mode == TrainMode::Ssl {
                                        cfg.ssl.tsa_schedule = tsa;
                                        if let Some(t) = t {
                                            cfg.ssl.eta_cbm_per_class =
                                                cluster_classes.iter().map(|c| (c.clone(), t)).collect();
                                        }
                                    } else {
                                        cfg.ssl = Default::default();
                                    }
                                    if seen.insert(cfg.hash()) {
                                        out.push(cfg);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GridRun {
    pub config: TrainConfig,
    pub dir: PathBuf,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
    /// Skipped because a completed record was already on disk.
    pub resumed: bool,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub runs: Vec<GridRun>,
}

impl GridOutcome {
    pub fn records(&self) -> Vec<RunRecord> {
        self.runs.iter().filter_map(|r| r.record.clone()).collect()
    }
}

/// Output directory of one run under `out`.
pub fn run_dir(out: &Path, cfg: &TrainConfig) -> PathBuf {
    out.join("runs").join(&cfg.hash()[..16])
}

/// A completed run for this config and test set, if one is on disk.
pub fn completed(out: &Path, cfg: &TrainConfig, test_set_hash: &str) -> Option<RunRecord> {
    let rec = read_record(&run_dir(out, cfg).join("record.json")).ok()?;
    (rec.config == *cfg && rec.test_set_hash == test_set_hash).then_some(rec)
}

/// Runs `configs` sequentially, writing each into its own directory as it
/// finishes. Completed runs are skipped; a failing run is recorded and the
/// grid moves on.
pub fn run_grid(
    configs: &[TrainConfig],
    source: &Dataset,
    out: &Path,
    on_progress: &mut dyn FnMut(usize, &TrainConfig, Option<&EpochRecord>),
) -> GridOutcome {
    let hash = source.split(Split::Test).content_hash();
    let mut runs = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        let dir = run_dir(out, cfg);
        if let Some(rec) = completed(out, cfg, &hash) {
            runs.push(GridRun { config: cfg.clone(), dir, record: Some(rec), error: None, resumed: true });
            continue;
        }
        on_progress(i, cfg, None);
        let result = run(cfg, source, &mut |e| on_progress(i, cfg, Some(e))).and_then(|t| {
            write_run(&t, &dir)?;
            Ok(t.record)
        });
        let (record, error) = match result {
            Ok(r) => {
                let err = r.failed.clone();
                (Some(r), err)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        runs.push(GridRun { config: cfg.clone(), dir, record, error, resumed: false });
    }
    GridOutcome { runs }
}
