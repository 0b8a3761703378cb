//! SSL-minus-supervised delta tables over (budget, background) cells.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::train::{RunRecord, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub labelled_per_class: usize,
    pub include_background: bool,
    /// Description of the SSL configuration being compared.
    pub variant: String,
    pub supervised_runs: usize,
    pub ssl_runs: usize,
    pub supervised_overall: f64,
    pub ssl_overall: f64,
    pub delta_overall: f64,
    pub supervised_grouped: f64,
    pub ssl_grouped: f64,
    pub delta_grouped: f64,
    /// SSL did worse than the supervised baseline on overall accuracy.
    pub detrimental: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub test_set_hash: String,
    pub rows: Vec<ComparisonRow>,
    /// Cells that had SSL runs but no completed supervised baseline.
    pub unmatched: Vec<String>,
}

#[derive(Default)]
struct Acc {
    n: usize,
    overall: f64,
    grouped: f64,
}

impl Acc {
    fn mean(&self) -> (f64, f64) {
        (self.overall / self.n as f64, self.grouped / self.n as f64)
    }
}

/// Averages completed runs per cell and subtracts the supervised mean.
/// Failed runs are skipped.
pub fn compare(records: &[RunRecord]) -> Result<Comparison, EvalError> {
    if records.len() < 2 {
        return Err(EvalError::TooFewRecords(records.len()));
    }
    let hash = &records[0].test_set_hash;
    if let Some(r) = records.iter().find(|r| &r.test_set_hash != hash) {
        return Err(EvalError::HashMismatch(hash.clone(), r.test_set_hash.clone()));
    }
    let mut sup: BTreeMap<(usize, bool), Acc> = BTreeMap::new();
    let mut ssl: BTreeMap<(usize, bool, String), Acc> = BTreeMap::new();
    for r in records {
        let Some(m) = &r.final_metrics else { continue };
        let cell = (r.config.labelled_per_class, r.config.include_background);
        let acc = match r.config.mode {
            TrainMode::Supervised => sup.entry(cell).or_default(),
            TrainMode::Ssl => ssl.entry((cell.0, cell.1, r.config.variant())).or_default(),
        };
        acc.n += 1;
        acc.overall += m.overall_accuracy_anatomical;
        acc.grouped += m.grouped_cluster_accuracy;
    }
    let mut rows = Vec::new();
    let mut unmatched = Vec::new();
    for ((budget, bg, variant), acc) in &ssl {
        let Some(base) = sup.get(&(*budget, *bg)) else {
            unmatched.push(format!("{budget}/class bg={bg} {variant}"));
            continue;
        };
        let (so, sg) = base.mean();
        let (uo, ug) = acc.mean();
        rows.push(ComparisonRow {
            labelled_per_class: *budget,
            include_background: *bg,
            variant: variant.clone(),
            supervised_runs: base.n,
            ssl_runs: acc.n,
            supervised_overall: so,
            ssl_overall: uo,
            delta_overall: uo - so,
            supervised_grouped: sg,
            ssl_grouped: ug,
            delta_grouped: ug - sg,
            detrimental: uo < so,
        });
    }
    Ok(Comparison { test_set_hash: hash.clone(), rows, unmatched })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "labelled_per_class,include_background,variant,supervised_runs,ssl_runs,supervised_overall,ssl_overall,delta_overall,supervised_grouped,ssl_grouped,delta_grouped,detrimental\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.4},{:.4},{:+.4},{:.4},{:.4},{:+.4},{}",
                r.labelled_per_class,
                r.include_background,
                r.variant,
                r.supervised_runs,
                r.ssl_runs,
                r.supervised_overall,
                r.ssl_overall,
                r.delta_overall,
                r.supervised_grouped,
                r.ssl_grouped,
                r.delta_grouped,
                r.detrimental
            );
        }
        s
    }

    /// Fixed-width table for terminals; negative deltas are marked with `!`.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>6} {:>5} {:<34} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "budget", "bg", "variant", "sup", "ssl", "delta", "sup_grp", "ssl_grp", "d_grp"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6} {:>5} {:<34} {:>8.3} {:>8.3} {:>+8.3} {:>8.3} {:>8.3} {:>+8.3}{}",
                r.labelled_per_class,
                if r.include_background { "yes" } else { "no" },
                r.variant,
                r.supervised_overall,
                r.ssl_overall,
                r.delta_overall,
                r.supervised_grouped,
                r.ssl_grouped,
                r.delta_grouped,
                if r.detrimental { " !" } else { "" }
            );
        }
        s
    }
}
