//! Subcommands of the `btol` binary. Every stage reads its inputs from and writes its
//! outputs to a run directory, so stages can be rerun independently:
//!
//! ```text
//! <out>/config.json
//! <out>/data/{source,target}/{train,test}/
//! <out>/checkpoints/{source,baseline,bpba_adapter,bpba_target,blackbox_adapter,blackbox_target,blackbox_simulator}.btol
//! <out>/logs/{baseline,bpba,blackbox}.json
//! <out>/reports/{source,baseline,bpba,blackbox}.json
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use btol_core::eval::{evaluate, format_table, MetricReport};
use btol_core::experiment::{ordering_verdict, train_source_model, ExperimentConfig, MethodScores, OrderingVerdict};
use btol_core::models::{load_checkpoint, save_checkpoint, ModelError, Network};
use btol_core::oracle::{serve, OracleClient, OracleError, OracleMode, SourceOracle};
use btol_core::taskgen::{DataError, SegDataset};
use btol_core::trainer::{fresh_models, init_target, run_blackbox_from, run_bpba, RunLog, TrainError};
use serde::{Deserialize, Serialize};

pub use btol_core::experiment::{BPBA_MARGIN, SOURCE_MARGIN};

/// Exit status classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Failure = 1,
    Config = 2,
    Oracle = 3,
    Numerical = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match e.root() {
            _ if e.is_non_finite() => ExitKind::Numerical,
            TrainError::Oracle(OracleError::Io(_)) => ExitKind::Failure,
            TrainError::Oracle(_) => ExitKind::Oracle,
            TrainError::Config(_) => ExitKind::Config,
            _ => ExitKind::Failure,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        let kind = if matches!(e, OracleError::Io(_)) { ExitKind::Failure } else { ExitKind::Oracle };
        CliError::new(kind, e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = if matches!(e, DataError::InvalidParams(_)) { ExitKind::Config } else { ExitKind::Failure };
        CliError::new(kind, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let kind = if matches!(e, ModelError::InvalidSpec(_)) { ExitKind::Config } else { ExitKind::Failure };
        CliError::new(kind, e.to_string())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::new(ExitKind::Failure, format!("{}: {e}", path.display()))
}

pub type CliResult<T> = Result<T, CliError>;

/// Loads `path` (or the defaults) and applies a seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io(p))?;
            ExperimentConfig::from_json(&text)
                .map_err(|e| CliError::new(ExitKind::Config, format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.adapt.validate()?;
    cfg.data.source.validate()?;
    cfg.data.target.validate()?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

pub fn data_dir(out: &Path, domain: &str, split: &str) -> PathBuf {
    out.join("data").join(domain).join(split)
}

pub fn checkpoint_path(out: &Path, name: &str) -> PathBuf {
    out.join("checkpoints").join(format!("{name}.btol"))
}

pub fn report_path(out: &Path, subject: &str) -> PathBuf {
    out.join("reports").join(format!("{subject}.json"))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(ExitKind::Failure, format!("{}: {e}", path.display())))
}

fn save_model(net: &Network, out: &Path, name: &str) -> CliResult<String> {
    let path = checkpoint_path(out, name);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    save_checkpoint(net, &path)?;
    Ok(path.display().to_string())
}

fn load_model(out: &Path, name: &str) -> CliResult<Network> {
    let path = checkpoint_path(out, name);
    if !path.exists() {
        return Err(CliError::new(ExitKind::Failure, format!("missing checkpoint {}", path.display())));
    }
    Ok(load_checkpoint(&path)?)
}

fn load_data(out: &Path, domain: &str, split: &str) -> CliResult<SegDataset> {
    let dir = data_dir(out, domain, split);
    if !dir.join("manifest.json").exists() {
        return Err(CliError::new(
            ExitKind::Failure,
            format!("missing dataset {} (run gen-data first)", dir.display()),
        ));
    }
    Ok(SegDataset::load(&dir)?)
}

/// Generates the four dataset directories and records the effective config.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path, force: bool) -> CliResult<()> {
    let data = out.join("data");
    if data.exists() && fs::read_dir(&data).map_err(io(&data))?.next().is_some() {
        if !force {
            return Err(CliError::new(
                ExitKind::Failure,
                format!("{} is not empty (use --force to overwrite)", data.display()),
            ));
        }
        fs::remove_dir_all(&data).map_err(io(&data))?;
    }
    fs::create_dir_all(out).map_err(io(out))?;
    write_json(&out.join("config.json"), cfg)?;
    let (source, target) = cfg.data.generate()?;
    for (domain, splits) in [("source", &source), ("target", &target)] {
        splits.train.save(&data_dir(out, domain, "train"))?;
        splits.test.save(&data_dir(out, domain, "test"))?;
    }
    log::info!("wrote datasets under {}", data.display());
    Ok(())
}

pub fn cmd_train_source(cfg: &ExperimentConfig, out: &Path) -> CliResult<Network> {
    let train = load_data(out, "source", "train")?;
    let test = load_data(out, "source", "test")?;
    let splits = btol_core::taskgen::DomainSplits { train, test };
    let model = train_source_model(cfg, &splits)?;
    save_model(&model, out, "source")?;
    Ok(model)
}

/// Starts an oracle for a checkpoint. The caller decides how long to keep it alive.
pub fn cmd_serve_oracle(
    checkpoint: &Path,
    mode: OracleMode,
    bind: &str,
) -> CliResult<btol_core::oracle::OracleServer> {
    let model = load_checkpoint(checkpoint)?;
    Ok(serve(model, mode, bind)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AdaptMode {
    Bpba,
    Blackbox,
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Subject {
    Source,
    Baseline,
    Bpba,
    Blackbox,
}

impl Subject {
    pub const ALL: [Subject; 4] = [Subject::Source, Subject::Baseline, Subject::Blackbox, Subject::Bpba];

    pub fn name(self) -> &'static str {
        match self {
            Subject::Source => "source",
            Subject::Baseline => "baseline",
            Subject::Bpba => "bpba",
            Subject::Blackbox => "blackbox",
        }
    }
}

/// Baseline target from the run directory, or a fresh initialization that is then saved.
fn baseline_target(cfg: &ExperimentConfig, out: &Path, oracle: &mut dyn SourceOracle, data: &SegDataset) -> CliResult<Network> {
    if checkpoint_path(out, "baseline").exists() {
        return load_model(out, "baseline");
    }
    let (_, fresh) = fresh_models(&cfg.adapt)?;
    let (target, losses) = init_target(oracle, fresh, data, &cfg.adapt)?;
    let mut log = RunLog { mode: "baseline".into(), seed: cfg.adapt.seed, init_losses: losses, ..RunLog::default() };
    log.calls = oracle.calls();
    log.checkpoints.push(save_model(&target, out, "baseline")?);
    write_json(&out.join("logs").join("baseline.json"), &log)?;
    Ok(target)
}

pub fn cmd_adapt(cfg: &ExperimentConfig, out: &Path, oracle_addr: &str, mode: AdaptMode) -> CliResult<RunLog> {
    let data = load_data(out, "target", "train")?;
    let mut client = OracleClient::connect(oracle_addr)?;
    if mode == AdaptMode::Bpba && !client.supports_backward() {
        return Err(CliError::new(
            ExitKind::Oracle,
            format!("BACKWARD_DISABLED: oracle at {oracle_addr} serves forward requests only; use --mode blackbox"),
        ));
    }
    let baseline = baseline_target(cfg, out, &mut client, &data)?;
    let log = match mode {
        AdaptMode::Baseline => read_json(&out.join("logs").join("baseline.json"))?,
        AdaptMode::Bpba => {
            let (adapter, _) = fresh_models(&cfg.adapt)?;
            let (a, t, mut log) = run_bpba(&mut client, adapter, baseline, &data, &cfg.adapt)?;
            log.checkpoints.push(save_model(&a, out, "bpba_adapter")?);
            log.checkpoints.push(save_model(&t, out, "bpba_target")?);
            write_json(&out.join("logs").join("bpba.json"), &log)?;
            log
        }
        AdaptMode::Blackbox => {
            let (a, t, m, mut log) = run_blackbox_from(&mut client, baseline, &data, &cfg.adapt)?;
            log.checkpoints.push(save_model(&a, out, "blackbox_adapter")?);
            log.checkpoints.push(save_model(&t, out, "blackbox_target")?);
            log.checkpoints.push(save_model(&m, out, "blackbox_simulator")?);
            write_json(&out.join("logs").join("blackbox.json"), &log)?;
            log
        }
    };
    Ok(log)
}

/// Evaluates one subject on the target test split and writes its report.
pub fn cmd_evaluate(out: &Path, subject: Subject) -> CliResult<MetricReport> {
    let test = load_data(out, "target", "test")?;
    let model = match subject {
        Subject::Source => load_model(out, "source")?,
        Subject::Baseline => load_model(out, "baseline")?,
        Subject::Bpba => load_model(out, "bpba_target")?,
        Subject::Blackbox => load_model(out, "blackbox_target")?,
    };
    let report = evaluate(&model, None, &test).map_err(|e| CliError::new(ExitKind::Failure, e.to_string()))?;
    write_json(&report_path(out, subject.name()), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub per_run: Vec<f64>,
    pub mean: f64,
    /// Largest minus smallest per-run mean Dice.
    pub run_spread: f64,
    pub minus_baseline: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runs: Vec<String>,
    pub methods: Vec<MethodSummary>,
    pub verdict: OrderingVerdict,
    /// Per-method reports of the first run, for the per-class table.
    pub table: String,
}

/// Aggregates the four method reports of each run directory: per-method mean of per-run
/// mean foreground Dice, plus the ordering verdict.
pub fn cmd_report(runs: &[PathBuf]) -> CliResult<ComparisonReport> {
    if runs.is_empty() {
        return Err(CliError::new(ExitKind::Config, "report needs at least one run directory"));
    }
    let mut scores = Vec::new();
    let mut first_rows = Vec::new();
    let mut classes = None;
    for run in runs {
        let mut get = |s: Subject| -> CliResult<MetricReport> {
            let path = report_path(run, s.name());
            if !path.exists() {
                return Err(CliError::new(
                    ExitKind::Failure,
                    format!("run {}: missing report {}", run.display(), path.display()),
                ));
            }
            let r: MetricReport = read_json(&path)?;
            match classes {
                None => classes = Some(r.num_classes),
                Some(k) if k != r.num_classes => {
                    return Err(CliError::new(
                        ExitKind::Failure,
                        format!("run {}: {} has {} classes, expected {k}", run.display(), s.name(), r.num_classes),
                    ))
                }
                Some(_) => {}
            }
            Ok(r)
        };
        let reports: Vec<MetricReport> = Subject::ALL.iter().map(|&s| get(s)).collect::<CliResult<_>>()?;
        if first_rows.is_empty() {
            first_rows = Subject::ALL.iter().map(|s| s.name().to_string()).zip(reports.iter().cloned()).collect();
        }
        scores.push(MethodScores {
            source: reports[0].dice_avg_mean,
            baseline: reports[1].dice_avg_mean,
            blackbox: reports[2].dice_avg_mean,
            bpba: reports[3].dice_avg_mean,
        });
    }
    let verdict = ordering_verdict(&scores, BPBA_MARGIN, SOURCE_MARGIN);
    let pick: [(&str, fn(&MethodScores) -> f64); 4] =
        [("source", |s| s.source), ("baseline", |s| s.baseline), ("blackbox", |s| s.blackbox), ("bpba", |s| s.bpba)];
    let methods = pick
        .iter()
        .map(|&(name, f)| {
            let per_run: Vec<f64> = scores.iter().map(f).collect();
            let mean = f(&verdict.means);
            let (lo, hi) = per_run.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            MethodSummary { method: name.into(), per_run, mean, run_spread: hi - lo, minus_baseline: mean - verdict.means.baseline }
        })
        .collect();
    Ok(ComparisonReport {
        runs: runs.iter().map(|r| r.display().to_string()).collect(),
        methods,
        verdict,
        table: format_table(&first_rows),
    })
}

impl ComparisonReport {
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<10} {:>10} {:>12} {:>12}\n", "method", "mean Dice", "run spread", "Δ baseline");
        for m in &self.methods {
            out.push_str(&format!("{:<10} {:>10.4} {:>12.4} {:>+12.4}\n", m.method, m.mean, m.run_spread, m.minus_baseline));
        }
        out.push_str(&format!("{}\nordering: {}\n", self.verdict, if self.verdict.pass { "PASS" } else { "FAIL" }));
        out
    }
}

pub fn write_report(report: &ComparisonReport, out: &Path) -> CliResult<()> {
    write_json(&out.join("comparison.json"), report)?;
    let path = out.join("comparison.txt");
    fs::write(&path, format!("{}\n{}", report.table, report.summary_table())).map_err(io(&path))
}
