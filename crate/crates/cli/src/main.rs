//! `ssl-lab`: generate data, train, evaluate and compare consistency-training
//! experiments.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure,
//! 4 comparison mismatch.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use ssl_lab::checkpoint;
use ssl_lab::data::{self, synth::ClassCount, Dataset, DatasetSpec, Split};
use ssl_lab::eval::{self, compare, EvalError};
use ssl_lab::ssl::TsaSchedule;
use ssl_lab::train::{self, GridAxes, RunRecord, TrainConfig, TrainError, TrainMode};

#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Mismatch(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::Mismatch(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) | Failure::Mismatch(e) => e,
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn train_err(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) | TrainError::Data(data::DataError::Budget { .. }) => config_err(e),
        other => runtime_err(other),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "ssl-lab", version, about = "Semi-supervised consistency training on a synthetic imbalanced dataset")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Base random seed [default: 0, or $SSL_LAB_SEED]
    #[arg(long, env = "SSL_LAB_SEED")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic dataset and write it to --out
    GenData(GenDataArgs),
    /// Train one run from a JSON config
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split and export reports
    Evaluate(EvaluateArgs),
    /// Run an experiment grid (resumable)
    Grid(GridArgs),
    /// Tabulate SSL minus supervised deltas over completed runs
    Compare(CompareArgs),
    /// Render SVG reports for completed runs
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// JSON dataset spec; flags below override its fields [default: built-in spec]
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Leave out the background class [default: false]
    #[arg(long)]
    no_background: bool,
    /// Number of distinct shape classes [default: 9]
    #[arg(long)]
    num_distinct: Option<usize>,
    /// Number of confusable cluster classes [default: 4]
    #[arg(long)]
    cluster_size: Option<usize>,
    /// Training images per anatomical class [default: 200]
    #[arg(long)]
    train_per_class: Option<usize>,
    /// Test images per anatomical class [default: 60]
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Training images of the background class [default: 600]
    #[arg(long)]
    background_train: Option<usize>,
    /// Test images of the background class [default: 180]
    #[arg(long)]
    background_test: Option<usize>,
    /// Noise standard deviation [default: 0.08]
    #[arg(long)]
    noise_sigma: Option<f32>,
    #[command(flatten)]
    common: Common,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Supervised,
    Ssl,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum TsaArg {
    Linear,
    Log,
    Exp,
    Disabled,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run config [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Override the training mode [default: from config]
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Override the consistency weight [default: from config]
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the entropy weight [default: from config]
    #[arg(long)]
    entropy_weight: Option<f64>,
    /// Override the TSA schedule [default: from config]
    #[arg(long, value_enum)]
    tsa: Option<TsaArg>,
    /// Override labelled images per class [default: from config]
    #[arg(long)]
    labelled_per_class: Option<usize>,
    /// Override the number of epochs [default: from config]
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the evaluation interval in epochs, 0 for final only [default: from config]
    #[arg(long)]
    eval_every: Option<usize>,
    /// Train without the background class [default: false]
    #[arg(long)]
    no_background: bool,
    /// Suppress per-epoch progress lines [default: false]
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoint file, or a run directory containing model.ckpt [required]
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Named grid: fig2, fig3, table1 or table2 [default: fig3 unless --axes is given]
    #[arg(long, conflicts_with = "axes")]
    preset: Option<String>,
    /// JSON grid axes, alternative to --preset [default: none]
    #[arg(long)]
    axes: Option<PathBuf>,
    /// JSON base run config [default: built-in defaults with eval_every 0]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Seeds per grid cell
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    /// Override the number of epochs of every run [default: from config]
    #[arg(long)]
    epochs: Option<usize>,
    /// Parallel worker processes
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Run directories, or directories containing runs/ [required]
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories, or directories containing runs/ [required]
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Evaluate(a) => evaluate_cmd(a),
        Cmd::Grid(a) => grid_cmd(a),
        Cmd::Compare(a) => compare_cmd(a),
        Cmd::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

/// Parses JSON, reporting `file:line:column` on syntax errors.
fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display())).map_err(config_err)?;
    serde_json::from_str(&text)
        .map_err(|e| config_err(anyhow!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display())).map_err(runtime_err)?;
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display())).map_err(runtime_err)
}

fn load_data(dir: &Path) -> CliResult<Dataset> {
    data::load(dir).with_context(|| format!("cannot load dataset from {}", dir.display())).map_err(runtime_err)
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let mut spec: DatasetSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default(),
    };
    if a.no_background {
        spec.include_background = false;
    }
    if let Some(v) = a.num_distinct {
        spec.num_distinct_classes = v;
    }
    if let Some(v) = a.cluster_size {
        spec.confusable_cluster_size = v;
    }
    let anat = &mut spec.anatomical_count;
    *anat = ClassCount { train: a.train_per_class.unwrap_or(anat.train), test: a.test_per_class.unwrap_or(anat.test) };
    let bg = &mut spec.background_count;
    *bg = ClassCount { train: a.background_train.unwrap_or(bg.train), test: a.background_test.unwrap_or(bg.test) };
    if let Some(v) = a.noise_sigma {
        spec.noise_sigma = v;
    }
    if let Some(s) = a.common.seed {
        spec.seed = s;
    }
    spec.validate().map_err(config_err)?;
    let ds = data::generate(&spec).map_err(runtime_err)?;
    data::save(&a.common.out, &ds).map_err(runtime_err)?;
    write_file(&a.common.out.join("spec.json"), serde_json::to_string_pretty(&spec).expect("spec serializes"))?;

    let train = ds.split(Split::Train).class_counts();
    let test = ds.split(Split::Test).class_counts();
    println!("{:<12} {:>6} {:>6}", "class", "train", "test");
    for (i, name) in ds.class_names().iter().enumerate() {
        println!("{name:<12} {:>6} {:>6}", train[i], test[i]);
    }
    let manifest = fs::read(a.common.out.join(data::MANIFEST_FILE)).map_err(runtime_err)?;
    println!("wrote {} images to {}", ds.len(), a.common.out.display());
    println!("manifest sha256 {}", hex::encode(Sha256::digest(manifest)));
    Ok(())
}

fn apply_train_overrides(cfg: &mut TrainConfig, a: &TrainArgs) {
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Supervised => TrainMode::Supervised,
            ModeArg::Ssl => TrainMode::Ssl,
        };
    }
    if let Some(v) = a.lambda {
        cfg.ssl.lambda = v;
    }
    if let Some(v) = a.entropy_weight {
        cfg.ssl.entropy_weight = v;
    }
    if let Some(t) = a.tsa {
        cfg.ssl.tsa_schedule = match t {
            TsaArg::Linear => TsaSchedule::Linear,
            TsaArg::Log => TsaSchedule::Log,
            TsaArg::Exp => TsaSchedule::Exp,
            TsaArg::Disabled => TsaSchedule::Disabled,
        };
    }
    if let Some(v) = a.labelled_per_class {
        cfg.labelled_per_class = v;
    }
    if a.epochs.is_some() {
        cfg.epochs = a.epochs;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if a.no_background {
        cfg.include_background = false;
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
}

fn print_epoch(prefix: &str, e: &train::EpochRecord) {
    let mut line = format!("{prefix}epoch {:>3}  sup {:.4}", e.epoch + 1, e.supervised_loss);
    if let Some(c) = e.consistency_loss {
        line += &format!("  cons {c:.4}");
    }
    if let Some(h) = e.entropy {
        line += &format!("  ent {h:.4}");
    }
    if let Some(t) = e.tsa_kept_fraction {
        line += &format!("  tsa_kept {t:.3}");
    }
    if let Some(c) = e.cbm_kept_fraction {
        line += &format!("  cbm_kept {c:.3}");
    }
    if let (Some(o), Some(g)) = (e.test_overall, e.test_grouped) {
        line += &format!("  acc {o:.4}  grouped {g:.4}");
    }
    println!("{line}");
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    apply_train_overrides(&mut cfg, &a);
    cfg.validate().map_err(config_err)?;
    let ds = load_data(&a.data)?;
    let quiet = a.quiet;
    let trained = train::run(&cfg, &ds, &mut |e| {
        if !quiet {
            print_epoch("", e);
            let _ = std::io::stdout().flush();
        }
    })
    .map_err(train_err)?;
    let dir = train::run_dir(&a.common.out, &cfg);
    train::write_run(&trained, &dir).map_err(runtime_err)?;
    let rec = &trained.record;
    if let Some(reason) = &rec.failed {
        return Err(runtime_err(anyhow!("run aborted: {reason} (record written to {})", dir.display())));
    }
    let m = rec.final_metrics.as_ref().expect("completed run has metrics");
    println!(
        "final  overall {:.4}  grouped {:.4}  -> {}",
        m.overall_accuracy_anatomical,
        m.grouped_cluster_accuracy,
        dir.display()
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult {
    let path = if a.checkpoint.is_dir() { a.checkpoint.join("model.ckpt") } else { a.checkpoint.clone() };
    let params = checkpoint::load(&path).map_err(runtime_err)?;
    let ds = load_data(&a.data)?;
    let classes = params.config().num_classes;
    let test = match ds.background_index() {
        Some(_) if classes == ds.num_classes() - 1 => ds.without_background(),
        _ => ds.clone(),
    }
    .split(Split::Test);
    let report = eval::evaluate(&params, &test).map_err(|e| match e {
        EvalError::ClassMismatch { .. } => config_err(e),
        other => runtime_err(other),
    })?;
    let run = serde_json::json!({
        "checkpoint": path.display().to_string(),
        "test_set_hash": ds.split(Split::Test).content_hash(),
    });
    eval::export(&report, Some(&run), &a.common.out).map_err(runtime_err)?;
    println!("overall {:.4}  grouped {:.4}", report.overall_accuracy_anatomical, report.grouped_cluster_accuracy);
    for (name, r) in report.class_names.iter().zip(&report.per_class_recall) {
        match r {
            Some(r) => println!("  {name:<12} recall {r:.4}"),
            None => println!("  {name:<12} recall n/a"),
        }
    }
    println!("reports written to {}", a.common.out.display());
    Ok(())
}

/// Every `record.json` under the given run or grid directories.
fn collect_records(paths: &[PathBuf]) -> CliResult<Vec<RunRecord>> {
    let mut files = Vec::new();
    for p in paths {
        if p.join("record.json").is_file() {
            files.push(p.join("record.json"));
            continue;
        }
        let runs = if p.join("runs").is_dir() { p.join("runs") } else { p.clone() };
        let entries = fs::read_dir(&runs).with_context(|| format!("cannot list {}", runs.display())).map_err(runtime_err)?;
        let mut found: Vec<PathBuf> =
            entries.filter_map(|e| e.ok()).map(|e| e.path().join("record.json")).filter(|f| f.is_file()).collect();
        found.sort();
        files.extend(found);
    }
    files.iter().map(|f| train::read_record(f).map_err(runtime_err)).collect()
}

fn compare_cmd(a: CompareArgs) -> CliResult {
    let records = collect_records(&a.runs)?;
    let cmp = compare(&records).map_err(|e| match e {
        EvalError::HashMismatch(..) => Failure::Mismatch(e.into()),
        other => config_err(other),
    })?;
    print!("{}", cmp.to_table());
    for u in &cmp.unmatched {
        println!("no supervised baseline for {u}");
    }
    write_file(&a.common.out.join("comparison.csv"), cmp.to_csv())?;
    Ok(())
}

fn report_cmd(a: ReportArgs) -> CliResult {
    let records = collect_records(&a.runs)?;
    let mut n = 0;
    for r in &records {
        let Some(m) = &r.final_metrics else { continue };
        let dir = a.common.out.join(&r.config_hash[..16]);
        let run = serde_json::json!({ "config_hash": r.config_hash, "variant": r.config.variant() });
        eval::export(m, Some(&run), &dir).map_err(runtime_err)?;
        n += 1;
    }
    if let Ok(cmp) = compare(&records) {
        write_file(&a.common.out.join("comparison.csv"), cmp.to_csv())?;
        write_file(&a.common.out.join("comparison.svg"), delta_svg(&cmp))?;
    }
    println!("rendered {n} runs into {}", a.common.out.display());
    Ok(())
}

/// Paired bars per comparison row: supervised (red) and SSL (blue).
fn delta_svg(cmp: &eval::Comparison) -> String {
    let (bar, gap, h) = (14usize, 30usize, 200usize);
    let width = 60 + cmp.rows.len() * (2 * bar + gap);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"9\">\n",
        h + 90
    );
    for (i, r) in cmp.rows.iter().enumerate() {
        let x = 50 + i * (2 * bar + gap);
        for (k, (v, fill)) in [(r.supervised_overall, "#c0392b"), (r.ssl_overall, "#2e86c1")].iter().enumerate() {
            let bh = (v.clamp(0.0, 1.0) * h as f64).round() as usize;
            s += &format!(
                "<rect class=\"bar\" x=\"{}\" y=\"{}\" width=\"{bar}\" height=\"{bh}\" fill=\"{fill}\"/>\n",
                x + k * bar,
                10 + h - bh
            );
        }
        let bg = if r.include_background { "bg" } else { "no-bg" };
        s += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}/{bg} {:+.3}</text>\n",
            x + bar,
            h + 25,
            r.labelled_per_class,
            r.delta_overall
        );
    }
    s + "</svg>\n"
}

fn grid_cmd(a: GridArgs) -> CliResult {
    let mut axes: GridAxes = match &a.axes {
        Some(p) => read_json(p)?,
        None => {
            let name = a.preset.as_deref().unwrap_or("fig3");
            train::preset(name)
                .ok_or_else(|| config_err(anyhow!("unknown preset '{name}' (expected one of {})", train::PRESETS.join(", "))))?
        }
    };
    if a.replicates == 0 || a.jobs == 0 {
        return Err(config_err(anyhow!("--replicates and --jobs must be positive")));
    }
    axes.replicates = a.replicates;
    let mut base: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig { eval_every: 0, ..Default::default() },
    };
    if let Some(s) = a.common.seed {
        base.seed = s;
    }
    if a.epochs.is_some() {
        base.epochs = a.epochs;
    }
    base.validate().map_err(config_err)?;
    let ds = load_data(&a.data)?;
    let cluster: Vec<String> = ds.cluster_indices().iter().map(|&i| ds.class_names()[i].clone()).collect();
    let configs = axes.expand(&base, &cluster);
    for c in &configs {
        c.validate().map_err(config_err)?;
    }
    println!("grid: {} runs -> {}", configs.len(), a.common.out.display());

    let failures = if a.jobs > 1 {
        run_parallel(&configs, &ds, &a)?
    } else {
        let total = configs.len();
        let outcome = train::run_grid(&configs, &ds, &a.common.out, &mut |i, cfg, e| match e {
            None => println!("[{}/{total}] {} {}/class bg={}", i + 1, cfg.variant(), cfg.labelled_per_class, cfg.include_background),
            Some(e) if e.epoch + 1 == cfg.effective_epochs() => print_epoch("        ", e),
            Some(_) => {}
        });
        let resumed = outcome.runs.iter().filter(|r| r.resumed).count();
        if resumed > 0 {
            println!("{resumed} runs resumed from earlier records");
        }
        outcome
            .runs
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.dir.display())))
            .collect::<Vec<_>>()
    };

    let test_hash = ds.split(Split::Test).content_hash();
    let records: Vec<RunRecord> = configs.iter().filter_map(|c| train::completed(&a.common.out, c, &test_hash)).collect();
    write_file(&a.common.out.join("grid_summary.csv"), grid_summary(&records))?;
    if let Ok(cmp) = compare(&records) {
        print!("{}", cmp.to_table());
        write_file(&a.common.out.join("comparison.csv"), cmp.to_csv())?;
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("failed: {f}");
        }
        return Err(runtime_err(anyhow!("{} of {} runs failed", failures.len(), configs.len())));
    }
    Ok(())
}

fn grid_summary(records: &[RunRecord]) -> String {
    let mut s = String::from("config_hash,variant,labelled_per_class,include_background,seed,overall,grouped,failed\n");
    for r in records {
        let (o, g) = r
            .final_metrics
            .as_ref()
            .map(|m| (format!("{:.4}", m.overall_accuracy_anatomical), format!("{:.4}", m.grouped_cluster_accuracy)))
            .unwrap_or_default();
        s += &format!(
            "{},{},{},{},{},{o},{g},{}\n",
            &r.config_hash[..16],
            r.config.variant(),
            r.config.labelled_per_class,
            r.config.include_background,
            r.config.seed,
            r.failed.is_some()
        );
    }
    s
}

/// Runs pending configs as `train` child processes, at most `jobs` at once.
fn run_parallel(configs: &[TrainConfig], ds: &Dataset, a: &GridArgs) -> CliResult<Vec<String>> {
    let exe = std::env::current_exe().map_err(runtime_err)?;
    let test_hash = ds.split(Split::Test).content_hash();
    let pending: Vec<&TrainConfig> = configs.iter().filter(|c| train::completed(&a.common.out, c, &test_hash).is_none()).collect();
    let cfg_dir = a.common.out.join("configs");
    fs::create_dir_all(&cfg_dir).map_err(runtime_err)?;
    let mut failures = Vec::new();
    let mut running: BTreeMap<u32, (std::process::Child, String)> = BTreeMap::new();
    let mut queue = pending.into_iter();
    loop {
        while running.len() < a.jobs {
            let Some(cfg) = queue.next() else { break };
            let hash = cfg.hash()[..16].to_string();
            let path = cfg_dir.join(format!("{hash}.json"));
            write_file(&path, serde_json::to_string_pretty(cfg).expect("config serializes"))?;
            let child = Command::new(&exe)
                .arg("train")
                .arg("--quiet")
                .arg("--config")
                .arg(&path)
                .arg("--data")
                .arg(&a.data)
                .arg("--out")
                .arg(&a.common.out)
                .arg("--seed")
                .arg(cfg.seed.to_string())
                .spawn()
                .map_err(runtime_err)?;
            println!("started {hash} {}", cfg.variant());
            running.insert(child.id(), (child, hash));
        }
        if running.is_empty() {
            break;
        }
        let mut finished = None;
        while finished.is_none() {
            for (id, (child, _)) in running.iter_mut() {
                if let Some(status) = child.try_wait().map_err(runtime_err)? {
                    finished = Some((*id, status));
                    break;
                }
            }
            if finished.is_none() {
                std::thread::sleep(std::time::Duration::from_millis(200));
            }
        }
        let (id, status) = finished.expect("a child finished");
        let (_, hash) = running.remove(&id).expect("tracked child");
        if status.success() {
            println!("finished {hash}");
        } else {
            failures.push(format!("{hash}: exit status {status}"));
        }
    }
    Ok(failures)
}
