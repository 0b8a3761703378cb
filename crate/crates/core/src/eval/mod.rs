//! Evaluation protocol: accuracy over anatomical classes only, accuracy with
//! the confusable cluster merged into one class, confusion matrices, file
//! exports and SSL-versus-supervised comparison tables.

mod compare;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{predict_logits, ModelError, ModelParams};
use crate::ssl::row_argmax;

pub use compare::{compare, Comparison, ComparisonRow};
pub use svg::{accuracy_bars_svg, confusion_svg};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTest,
    #[error("model predicts {model} classes but the test set has {data}")]
    ClassMismatch { model: usize, data: usize },
    #[error("need at least two records to compare, got {0}")]
    TooFewRecords(usize),
    #[error("records were evaluated on different test sets ({0} vs {1})")]
    HashMismatch(String, String),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub overall_accuracy_anatomical: f64,
    pub grouped_cluster_accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class_recall: Vec<Option<f64>>,
    pub background_included: bool,
    pub cluster: Vec<usize>,
}

impl MetricsReport {
    /// Builds the report from (truth, prediction) pairs.
    pub fn from_predictions(
        class_names: Vec<String>,
        pairs: impl IntoIterator<Item = (usize, usize)>,
        cluster: &[usize],
        background: Option<usize>,
    ) -> Self {
        let c = class_names.len();
        let mut confusion = vec![vec![0u64; c]; c];
        for (t, p) in pairs {
            confusion[t][p] += 1;
        }
        let in_cluster = |i: usize| cluster.contains(&i);
        let (mut total, mut correct, mut grouped) = (0u64, 0u64, 0u64);
        for (t, row) in confusion.iter().enumerate() {
            if Some(t) == background {
                continue;
            }
            for (p, &n) in row.iter().enumerate() {
                total += n;
                if p == t {
                    correct += n;
                    grouped += n;
                } else if in_cluster(t) && in_cluster(p) {
                    grouped += n;
                }
            }
        }
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class_recall = confusion
            .iter()
            .enumerate()
            .map(|(t, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[t] as f64 / n as f64)
            })
            .collect();
        Self {
            class_names,
            confusion,
            overall_accuracy_anatomical: ratio(correct, total),
            grouped_cluster_accuracy: ratio(grouped, total),
            per_class_recall,
            background_included: background.is_some(),
            cluster: cluster.to_vec(),
        }
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    /// Mean recall over the listed classes, skipping absent ones.
    pub fn mean_recall(&self, classes: &[usize]) -> Option<f64> {
        let vals: Vec<f64> = classes.iter().filter_map(|&c| self.per_class_recall.get(c).copied().flatten()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Eval-mode predictions for every sample of `test`, in order.
pub fn predict(params: &ModelParams, test: &Dataset) -> Result<Vec<usize>, EvalError> {
    let c = params.config().num_classes;
    let mut preds = Vec::with_capacity(test.len());
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = predict_logits(params, &test.batch(chunk))?;
        preds.extend(logits.data().chunks(c).map(|row| row_argmax(row).0));
    }
    Ok(preds)
}

pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<MetricsReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTest);
    }
    let model = params.config().num_classes;
    if model != test.num_classes() {
        return Err(EvalError::ClassMismatch { model, data: test.num_classes() });
    }
    let preds = predict(params, test)?;
    let pairs = test.samples().iter().map(|s| s.label).zip(preds);
    Ok(MetricsReport::from_predictions(
        test.class_names().to_vec(),
        pairs,
        &test.cluster_indices(),
        test.background_index(),
    ))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), EvalError> {
    fs::write(path, contents).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
}

pub fn confusion_csv(report: &MetricsReport) -> String {
    let mut out = format!("true\\pred,{}\n", report.class_names.join(","));
    for (name, row) in report.class_names.iter().zip(&report.confusion) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    out
}

/// Writes `confusion.csv`, `summary.json`, `confusion.svg` and
/// `accuracy_bars.svg` into `dir`. `extra` is merged into the summary under
/// the key `run`.
pub fn export(report: &MetricsReport, run: Option<&serde_json::Value>, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(|source| EvalError::Io { path: dir.to_path_buf(), source })?;
    write(&dir.join("confusion.csv"), confusion_csv(report))?;
    let mut summary = serde_json::to_value(report).expect("report serializes");
    if let Some(run) = run {
        summary["run"] = run.clone();
    }
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json"))?;
    write(&dir.join("confusion.svg"), confusion_svg(report))?;
    write(&dir.join("accuracy_bars.svg"), accuracy_bars_svg(report))?;
    Ok(())
}

/// Reads the report part of a `summary.json`.
pub fn read_summary(path: &Path) -> Result<MetricsReport, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}
