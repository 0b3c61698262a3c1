//! Experiment configuration and the in-process comparison of source-only, pseudo-label
//! baseline, gradient-oracle adaptation and forward-only adaptation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate, EvalError, MetricReport};
use crate::models::{Network, SegNetSpec};
use crate::netcore::Module;
use crate::oracle::{serve, OracleClient, OracleError, OracleMode};
use crate::taskgen::{
    generate_domain, source_params, target_params, DataError, DomainParams, DomainSplits, DEFAULT_TEST_SIZE,
    DEFAULT_TRAIN_SIZE, TARGET_SEED_SALT,
};
use crate::trainer::{
    argmax_agreement, derive_seed, fresh_models, init_target, run_blackbox_from, run_bpba, train_source,
    AdaptConfig, RunLog, TrainError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DomainParams,
    pub target: DomainParams,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: source_params(),
            target: target_params(),
            train_size: DEFAULT_TRAIN_SIZE,
            test_size: DEFAULT_TEST_SIZE,
            seed: 0,
        }
    }
}

impl DataConfig {
    /// Source and target domains; the target seed is salted so the two never share samples.
    pub fn generate(&self) -> Result<(DomainSplits, DomainSplits), DataError> {
        let source = generate_domain(&self.source, self.seed, self.train_size, self.test_size)?;
        let target = generate_domain(&self.target, self.seed ^ TARGET_SEED_SALT, self.train_size, self.test_size)?;
        Ok((source, target))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub spec: SegNetSpec,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self { spec: SegNetSpec::default(), epochs: 30, lr: 1e-4, batch_size: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub mode: OracleMode,
    pub address: String,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { mode: OracleMode::ForwardBackward, address: "127.0.0.1:7878".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub source: SourceConfig,
    pub adapt: AdaptConfig,
    pub oracle: OracleConfig,
    pub output_dir: String,
}

impl ExperimentConfig {
    /// Scaled-down setting that runs the whole comparison in well under a minute per seed
    /// on one CPU core: 32×32 images, 64 training images per domain, larger learning rate
    /// and a shortened schedule.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.data.source.image_size = 32;
        cfg.data.target.image_size = 32;
        cfg.data.train_size = 64;
        cfg.source.lr = 1e-3;
        cfg.source.epochs = 60;
        cfg.adapt = AdaptConfig {
            t_rounds: 2,
            e1: 5,
            e2: 15,
            lr: 1e-3,
            init_epochs: 60,
            satisfy_epochs: 5,
            distill_epochs: 15,
            ..AdaptConfig::default()
        };
        cfg
    }

    /// Copy with every seed set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.data.seed = seed;
        cfg.adapt.seed = seed;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Trains the source model of `cfg` on labeled source data.
pub fn train_source_model(cfg: &ExperimentConfig, source: &DomainSplits) -> Result<Network, TrainError> {
    let s = &cfg.source;
    train_source(&source.train, s.spec.clone(), s.epochs, s.lr, s.batch_size, derive_seed(cfg.data.seed, "source"))
}

/// Networks produced by [`compare_methods`].
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub baseline: Network,
    pub bpba_adapter: Network,
    pub bpba_target: Network,
    pub blackbox_adapter: Network,
    pub blackbox_target: Network,
    pub simulator: Network,
}

impl TrainedModels {
    pub fn named(&self) -> [(&'static str, &Network); 6] {
        [
            ("baseline", &self.baseline),
            ("bpba_adapter", &self.bpba_adapter),
            ("bpba_target", &self.bpba_target),
            ("blackbox_adapter", &self.blackbox_adapter),
            ("blackbox_target", &self.blackbox_target),
            ("blackbox_simulator", &self.simulator),
        ]
    }
}

/// Test-set reports of the four methods for one seed, plus pipeline logs.
#[derive(Clone, Debug, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub source: MetricReport,
    pub baseline: MetricReport,
    pub bpba: MetricReport,
    pub blackbox: MetricReport,
    /// Argmax agreement of simulator and source on adapted held-out target images.
    pub simulator_agreement: f64,
    pub bpba_log: RunLog,
    pub blackbox_log: RunLog,
    /// Backward requests the forward-only server answered during the forward-only pipeline.
    pub forward_only_backward_calls: u64,
    #[serde(skip)]
    pub models: TrainedModels,
}

/// Runs all methods against a source model served over local TCP: the baseline uses a
/// forward-only server, gradient-oracle adaptation a forward+backward server and the
/// forward-only pipeline the forward-only server again. Both adaptation methods start
/// from the baseline target.
pub fn compare_methods(
    cfg: &ExperimentConfig,
    source_model: &Network,
    target: &DomainSplits,
) -> Result<SeedOutcome, ExperimentError> {
    let adapt = &cfg.adapt;
    let fo = serve(source_model.clone(), OracleMode::ForwardOnly, "127.0.0.1:0")?;
    let fb = serve(source_model.clone(), OracleMode::ForwardBackward, "127.0.0.1:0")?;
    let mut fo_client = OracleClient::connect(fo.addr())?;
    let mut fb_client = OracleClient::connect(fb.addr())?;

    let (adapter, fresh_target) = fresh_models(adapt)?;
    let (baseline, init_losses) = init_target(&mut fo_client, fresh_target, &target.train, adapt)?;
    let (bpba_adapter, bpba_target, mut bpba_log) = run_bpba(&mut fb_client, adapter, baseline.clone(), &target.train, adapt)?;
    bpba_log.init_losses = init_losses.clone();
    let before = fo.stats();
    let (bb_adapter, bb_target, simulator, mut blackbox_log) =
        run_blackbox_from(&mut fo_client, baseline.clone(), &target.train, adapt)?;
    blackbox_log.init_losses = init_losses;

    let mut agree = Vec::new();
    for chunk in (0..target.test.len()).collect::<Vec<_>>().chunks(crate::eval::EVAL_BATCH) {
        let (x, _) = target.test.batch(chunk)?;
        let z = bb_adapter.predict(&x).map_err(TrainError::from)?;
        let m = simulator.predict(&z).map_err(TrainError::from)?;
        let s = source_model.predict(&z).map_err(TrainError::from)?;
        agree.push(argmax_agreement(&m, &s).map_err(TrainError::from)? * chunk.len() as f64);
    }
    Ok(SeedOutcome {
        seed: cfg.data.seed,
        source: evaluate(source_model, None, &target.test)?,
        baseline: evaluate(&baseline, None, &target.test)?,
        bpba: evaluate(&bpba_target, None, &target.test)?,
        blackbox: evaluate(&bb_target, None, &target.test)?,
        simulator_agreement: agree.iter().sum::<f64>() / target.test.len() as f64,
        bpba_log,
        blackbox_log,
        forward_only_backward_calls: fo.stats().since(before).backward_calls,
        models: TrainedModels { baseline, bpba_adapter, bpba_target, blackbox_adapter: bb_adapter, blackbox_target: bb_target, simulator },
    })
}

/// Data generation, source training and [`compare_methods`] for `cfg.with_seed(seed)`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome, ExperimentError> {
    let cfg = cfg.with_seed(seed);
    let (source, target) = cfg.data.generate()?;
    let model = train_source_model(&cfg, &source)?;
    compare_methods(&cfg, &model, &target)
}

/// Mean foreground Dice per method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub source: f64,
    pub baseline: f64,
    pub bpba: f64,
    pub blackbox: f64,
}

impl MethodScores {
    pub fn from_outcome(o: &SeedOutcome) -> Self {
        Self {
            source: o.source.dice_avg_mean,
            baseline: o.baseline.dice_avg_mean,
            bpba: o.bpba.dice_avg_mean,
            blackbox: o.blackbox.dice_avg_mean,
        }
    }

    pub fn mean(all: &[MethodScores]) -> Self {
        let n = all.len().max(1) as f64;
        let sum = |f: fn(&MethodScores) -> f64| all.iter().map(f).sum::<f64>() / n;
        Self { source: sum(|s| s.source), baseline: sum(|s| s.baseline), bpba: sum(|s| s.bpba), blackbox: sum(|s| s.blackbox) }
    }
}

pub const BPBA_MARGIN: f64 = 0.01;
pub const SOURCE_MARGIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingVerdict {
    pub seeds: usize,
    pub means: MethodScores,
    pub bpba_minus_baseline: f64,
    pub blackbox_minus_baseline: f64,
    /// Lowest adapted/baseline mean minus the source-only mean.
    pub source_gap: f64,
    pub bpba_beats_baseline: bool,
    pub blackbox_not_below_baseline: bool,
    pub source_lowest: bool,
    pub pass: bool,
}

/// Ordering over per-seed scores: bpba − baseline ≥ `bpba_margin`, blackbox ≥ baseline and
/// every other method above source-only by at least `source_margin`.
pub fn ordering_verdict(per_seed: &[MethodScores], bpba_margin: f64, source_margin: f64) -> OrderingVerdict {
    let m = MethodScores::mean(per_seed);
    let source_gap = m.baseline.min(m.bpba).min(m.blackbox) - m.source;
    let bpba_beats_baseline = m.bpba - m.baseline >= bpba_margin;
    let blackbox_not_below_baseline = m.blackbox >= m.baseline;
    let source_lowest = source_gap >= source_margin;
    OrderingVerdict {
        seeds: per_seed.len(),
        means: m,
        bpba_minus_baseline: m.bpba - m.baseline,
        blackbox_minus_baseline: m.blackbox - m.baseline,
        source_gap,
        bpba_beats_baseline,
        blackbox_not_below_baseline,
        source_lowest,
        pass: bpba_beats_baseline && blackbox_not_below_baseline && source_lowest,
    }
}

impl std::fmt::Display for OrderingVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let m = &self.means;
        write!(
            f,
            "mean Dice over {} seeds: source {:.4}, baseline {:.4}, bpba {:.4}, blackbox {:.4}; \
             bpba-baseline {:+.4}, blackbox-baseline {:+.4}, source gap {:+.4}",
            self.seeds, m.source, m.baseline, m.bpba, m.blackbox, self.bpba_minus_baseline,
            self.blackbox_minus_baseline, self.source_gap
        )
    }
}
