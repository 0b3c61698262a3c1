//! Training pipelines: supervised source training, target initialization from source
//! pseudo labels, freeze-and-thaw adaptation through a gradient-serving oracle, and the
//! forward-only variant that distills a local simulator first.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{build_adapter, build_segnet, clone_into_simulator, AdapterSpec, ModelError, Network, SegNetSpec};
use crate::netcore::{Adam, Graph, LabelTensor, Module, NetError, ParamSet, SplitMix64, Tensor};
use crate::oracle::{CallCounts, LocalOracle, OracleError, OracleMode, SourceOracle, BACKWARD_DISABLED};
use crate::taskgen::{DataError, SegDataset};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("stage {stage} failed: {source}")]
    Stage { stage: &'static str, source: Box<TrainError> },
}

impl TrainError {
    fn in_stage(self, stage: &'static str) -> TrainError {
        match self {
            e @ TrainError::Stage { .. } => e,
            e => TrainError::Stage { stage, source: Box::new(e) },
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &TrainError {
        match self {
            TrainError::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_backward_disabled(&self) -> bool {
        matches!(self.root(), TrainError::Oracle(e) if e.is_backward_disabled())
    }

    pub fn is_non_finite(&self) -> bool {
        matches!(self.root(), TrainError::Net(NetError::NonFinite(_)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    #[default]
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    #[serde(rename = "T_rounds")]
    pub t_rounds: usize,
    #[serde(rename = "E1")]
    pub e1: usize,
    #[serde(rename = "E2")]
    pub e2: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub init_epochs: usize,
    /// Epochs of dual-pseudo-label adapter training in the forward-only pipeline.
    pub satisfy_epochs: usize,
    /// Epochs of simulator distillation in the forward-only pipeline.
    pub distill_epochs: usize,
    pub adapter: AdapterSpec,
    pub target_arch: SegNetSpec,
    pub seed: u64,
    pub pseudo_mode: PseudoMode,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            t_rounds: 4,
            e1: 10,
            e2: 30,
            lr: 1e-4,
            batch_size: 8,
            init_epochs: 100,
            satisfy_epochs: 10,
            distill_epochs: 30,
            adapter: AdapterSpec::default(),
            target_arch: SegNetSpec::default(),
            seed: 0,
            pseudo_mode: PseudoMode::Hard,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.t_rounds > 0 && (self.e1 == 0 || self.e2 == 0) {
            return Err(TrainError::Config("E1 and E2 must be at least 1 when T_rounds > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn plan(&self) -> PhasePlan {
        PhasePlan::new(self.t_rounds, self.e1, self.e2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    TrainAdapter,
    TrainTarget,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phases: Vec<(Phase, usize)>,
}

impl PhasePlan {
    /// `T_rounds` repetitions of (adapter for `e1` epochs, target for `e2` epochs).
    pub fn new(t_rounds: usize, e1: usize, e2: usize) -> Self {
        let phases = (0..t_rounds).flat_map(|_| [(Phase::TrainAdapter, e1), (Phase::TrainTarget, e2)]).collect();
        Self { phases }
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.1).sum()
    }

    pub fn epochs_of(&self, phase: Phase) -> usize {
        self.phases.iter().filter(|p| p.0 == phase).map(|p| p.1).sum()
    }

    /// Oracle calls a freeze-and-thaw run makes: one forward and one backward per adapter
    /// batch, one forward per target batch.
    pub fn expected_calls(&self, batches_per_epoch: usize) -> CallCounts {
        let a = (self.epochs_of(Phase::TrainAdapter) * batches_per_epoch) as u64;
        let t = (self.epochs_of(Phase::TrainTarget) * batches_per_epoch) as u64;
        CallCounts { forward_calls: a + t, backward_calls: a }
    }
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Shuffled mini-batches for one epoch of a named stage; the last batch may be partial.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, stage: &str, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::stream(seed, &format!("batches:{stage}"), epoch).shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Independent seed for a named component.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    SplitMix64::stream(seed, tag, 0).next_u64()
}

/// Per-pixel argmax over the class axis of `[N,K,H,W]` logits; ties go to the lowest class.
pub fn pseudo_label(logits: &Tensor) -> Result<LabelTensor, NetError> {
    let [n, k, h, w] = logits.dims4()?;
    if !(2..=256).contains(&k) {
        return Err(NetError::Shape(format!("pseudo labels need 2..=256 classes, got {k}")));
    }
    let hw = h * w;
    let z = logits.data();
    let mut out = vec![0u8; n * hw];
    for s in 0..n {
        for p in 0..hw {
            let base = s * k * hw + p;
            let mut best = 0;
            for c in 1..k {
                if z[base + c * hw] > z[base + best * hw] {
                    best = c;
                }
            }
            out[s * hw + p] = best as u8;
        }
    }
    LabelTensor::new(vec![n, h, w], out)
}

/// Fraction of pixels where two logit tensors pick the same class.
pub fn argmax_agreement(a: &Tensor, b: &Tensor) -> Result<f64, NetError> {
    let (la, lb) = (pseudo_label(a)?, pseudo_label(b)?);
    if la.shape() != lb.shape() {
        return Err(NetError::Shape(format!("{:?} vs {:?}", la.shape(), lb.shape())));
    }
    let same = la.data().iter().zip(lb.data()).filter(|(x, y)| x == y).count();
    Ok(same as f64 / la.len() as f64)
}

/// FNV-1a over parameter names and value bits.
pub fn fingerprint(params: &ParamSet) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (name, p) in params.iter() {
        eat(name.as_bytes());
        eat(&p.value.to_le_bytes());
    }
    format!("{h:016x}")
}

/// One supervised Adam step of `net` on `(x, y)`; returns the batch loss.
fn supervised_step(net: &mut Network, x: &Tensor, y: &LabelTensor, lr: f32) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let fwd = net.forward(&mut g, xv)?;
    let loss = g.cross_entropy(fwd.output, y)?;
    g.backward(loss)?;
    net.params_mut().accumulate_grads(&g, &fwd.params)?;
    Adam::default().step(net.params_mut(), lr)?;
    net.steps += 1;
    Ok(f64::from(g.value(loss).item()))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn images(data: &SegDataset, idx: &[usize]) -> Result<Tensor, TrainError> {
    let imgs: Vec<&Tensor> = idx.iter().map(|&i| &data.samples[i].image).collect();
    Ok(Tensor::stack(&imgs)?)
}

/// Supervised cross-entropy training of a fresh `spec` network on a labeled dataset.
pub fn train_source(
    dataset: &SegDataset,
    spec: SegNetSpec,
    epochs: usize,
    lr: f32,
    batch_size: usize,
    seed: u64,
) -> Result<Network, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut net = build_segnet(spec, seed)?;
    for epoch in 0..epochs {
        let mut losses = Vec::new();
        for idx in epoch_batches(dataset.len(), batch_size, seed, "source", epoch as u64) {
            let (x, y) = dataset.batch(&idx)?;
            losses.push(supervised_step(&mut net, &x, &y, lr)?);
        }
        log::info!("source epoch {epoch}: loss {:.4}", mean(&losses));
    }
    Ok(net)
}

/// Trains `target` on pseudo labels of the source oracle (forward queries only),
/// recomputing labels for every batch. Returns per-epoch mean losses.
pub fn init_target(
    oracle: &mut dyn SourceOracle,
    mut target: Network,
    data: &SegDataset,
    cfg: &AdaptConfig,
) -> Result<(Network, Vec<f64>), TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    target.unfreeze();
    let mut epoch_losses = Vec::with_capacity(cfg.init_epochs);
    for epoch in 0..cfg.init_epochs {
        let mut losses = Vec::new();
        for idx in epoch_batches(data.len(), cfg.batch_size, cfg.seed, "init", epoch as u64) {
            let x = images(data, &idx)?;
            let y = pseudo_label(&oracle.forward(&x)?)?;
            losses.push(supervised_step(&mut target, &x, &y, cfg.lr)?);
        }
        log::info!("init epoch {epoch}: loss {:.4}", mean(&losses));
        epoch_losses.push(mean(&losses));
    }
    Ok((target, epoch_losses))
}

/// Snapshot handed to [`run_bpba_observed`] hooks at phase boundaries.
pub struct PhaseEvent<'a> {
    pub index: usize,
    pub phase: Phase,
    pub end: bool,
    pub adapter: &'a Network,
    pub target: &'a Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub round: usize,
    pub epochs: usize,
    /// Mean batch loss per epoch.
    pub losses: Vec<f64>,
    pub first_batch_loss: Option<f64>,
    pub calls: CallCounts,
    pub adapter_start: String,
    pub adapter_end: String,
    pub target_start: String,
    pub target_end: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub mode: String,
    pub seed: u64,
    pub batches_per_epoch: usize,
    pub init_losses: Vec<f64>,
    pub satisfy_losses: Vec<f64>,
    pub distill_losses: Vec<f64>,
    pub phases: Vec<PhaseRecord>,
    /// Requests made to the remote oracle.
    pub calls: CallCounts,
    /// Requests made to the local simulator (forward-only pipeline).
    pub simulator_calls: CallCounts,
    pub wall_time_secs: f64,
    pub checkpoints: Vec<String>,
}

impl RunLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run log serializes")
    }
}

/// Adapter step through the oracle: loss = CE(S(A(x)), y), with ∂loss/∂A(x) fetched as a VJP.
fn adapter_step(
    oracle: &mut dyn SourceOracle,
    adapter: &mut Network,
    x: &Tensor,
    y: &LabelTensor,
    lr: f32,
) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let fa = adapter.forward(&mut g, xv)?;
    let z = g.value(fa.output).clone();
    let logits = oracle.forward(&z)?;
    let mut lg = Graph::new();
    let lv = lg.leaf(logits, true);
    let loss = lg.cross_entropy(lv, y)?;
    lg.backward(loss)?;
    let g_logits = lg.grad(lv).expect("logits leaf tracks gradient").clone();
    let g_z = oracle.backward(&z, &g_logits)?;
    g.backward_from(fa.output, &g_z)?;
    adapter.params_mut().accumulate_grads(&g, &fa.params)?;
    Adam::default().step(adapter.params_mut(), lr)?;
    adapter.steps += 1;
    Ok(f64::from(lg.value(loss).item()))
}

/// Freeze-and-thaw adaptation with a gradient-serving oracle.
pub fn run_bpba(
    oracle: &mut dyn SourceOracle,
    adapter: Network,
    target: Network,
    data: &SegDataset,
    cfg: &AdaptConfig,
) -> Result<(Network, Network, RunLog), TrainError> {
    run_bpba_observed(oracle, adapter, target, data, cfg, &mut |_| {})
}

/// [`run_bpba`] calling `hook` at the start and end of every phase.
pub fn run_bpba_observed(
    oracle: &mut dyn SourceOracle,
    mut adapter: Network,
    mut target: Network,
    data: &SegDataset,
    cfg: &AdaptConfig,
    hook: &mut dyn FnMut(&PhaseEvent),
) -> Result<(Network, Network, RunLog), TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let plan = cfg.plan();
    if !plan.phases.is_empty() && !oracle.supports_backward() {
        return Err(OracleError::Remote {
            code: BACKWARD_DISABLED.into(),
            message: "oracle does not serve gradients; use the forward-only pipeline".into(),
        }
        .into());
    }
    let started = Instant::now();
    let calls_before = oracle.calls();
    let mut log = RunLog {
        mode: "bpba".into(),
        seed: cfg.seed,
        batches_per_epoch: batches_per_epoch(data.len(), cfg.batch_size),
        ..RunLog::default()
    };
    for (index, &(phase, epochs)) in plan.phases.iter().enumerate() {
        let round = index / 2;
        let phase_calls = oracle.calls();
        let (a0, t0) = (fingerprint(adapter.params()), fingerprint(target.params()));
        match phase {
            Phase::TrainAdapter => {
                adapter.unfreeze();
                target.freeze();
            }
            Phase::TrainTarget => {
                adapter.freeze();
                target.unfreeze();
            }
        }
        hook(&PhaseEvent { index, phase, end: false, adapter: &adapter, target: &target });
        let mut record = PhaseRecord {
            phase,
            round,
            epochs,
            losses: Vec::with_capacity(epochs),
            first_batch_loss: None,
            calls: CallCounts::default(),
            adapter_start: a0,
            adapter_end: String::new(),
            target_start: t0,
            target_end: String::new(),
        };
        let stage = match phase {
            Phase::TrainAdapter => format!("adapter:{round}"),
            Phase::TrainTarget => format!("target:{round}"),
        };
        for epoch in 0..epochs {
            let mut losses = Vec::new();
            for idx in epoch_batches(data.len(), cfg.batch_size, cfg.seed, &stage, epoch as u64) {
                let x = images(data, &idx)?;
                let loss = match phase {
                    Phase::TrainAdapter => {
                        let y = pseudo_label(&target.predict(&x)?)?;
                        adapter_step(oracle, &mut adapter, &x, &y, cfg.lr)?
                    }
                    Phase::TrainTarget => {
                        let z = adapter.predict(&x)?;
                        let y = pseudo_label(&oracle.forward(&z)?)?;
                        supervised_step(&mut target, &x, &y, cfg.lr)?
                    }
                };
                record.first_batch_loss.get_or_insert(loss);
                losses.push(loss);
            }
            log::info!("{stage} epoch {epoch}: loss {:.4}", mean(&losses));
            record.losses.push(mean(&losses));
        }
        record.adapter_end = fingerprint(adapter.params());
        record.target_end = fingerprint(target.params());
        record.calls = oracle.calls().since(phase_calls);
        hook(&PhaseEvent { index, phase, end: true, adapter: &adapter, target: &target });
        log.phases.push(record);
    }
    adapter.unfreeze();
    target.unfreeze();
    log.calls = oracle.calls().since(calls_before);
    log.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((adapter, target, log))
}

/// Adapter training without remote gradients: loss = CE(T(A(x)), ŷ_S) + CE(T(A(x)), ŷ_T)
/// with `T` frozen, so gradients reach `A` only through the local target.
pub fn train_adapter_satisfy_both(
    mut adapter: Network,
    target: &Network,
    oracle: &mut dyn SourceOracle,
    data: &SegDataset,
    epochs: usize,
    cfg: &AdaptConfig,
) -> Result<(Network, Vec<f64>), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut target = target.clone();
    target.freeze();
    adapter.unfreeze();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut losses = Vec::new();
        for idx in epoch_batches(data.len(), cfg.batch_size, cfg.seed, "satisfy", epoch as u64) {
            let x = images(data, &idx)?;
            let ys = pseudo_label(&oracle.forward(&x)?)?;
            let yt = pseudo_label(&target.predict(&x)?)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let fa = adapter.forward(&mut g, xv)?;
            let ft = target.forward(&mut g, fa.output)?;
            let ls = g.cross_entropy(ft.output, &ys)?;
            let lt = g.cross_entropy(ft.output, &yt)?;
            let loss = g.add(ls, lt)?;
            g.backward(loss)?;
            adapter.params_mut().accumulate_grads(&g, &fa.params)?;
            Adam::default().step(adapter.params_mut(), cfg.lr)?;
            adapter.steps += 1;
            losses.push(f64::from(g.value(loss).item()));
        }
        log::info!("satisfy-both epoch {epoch}: loss {:.4}", mean(&losses));
        epoch_losses.push(mean(&losses));
    }
    Ok((adapter, epoch_losses))
}

/// Fits `simulator` to the oracle's soft outputs on adapted inputs: loss = KL(softmax(S(z)) ‖ softmax(M(z))),
/// `z = A(x)` with `A` fixed.
pub fn distill_simulator(
    mut simulator: Network,
    adapter: &Network,
    oracle: &mut dyn SourceOracle,
    data: &SegDataset,
    epochs: usize,
    cfg: &AdaptConfig,
) -> Result<(Network, Vec<f64>), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    simulator.unfreeze();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut losses = Vec::new();
        for idx in epoch_batches(data.len(), cfg.batch_size, cfg.seed, "distill", epoch as u64) {
            let z = adapter.predict(&images(data, &idx)?)?;
            let soft = oracle.forward(&z)?;
            let mut g = Graph::new();
            let zv = g.input(z);
            let fm = simulator.forward(&mut g, zv)?;
            let loss = g.kl_div(fm.output, &soft)?;
            g.backward(loss)?;
            simulator.params_mut().accumulate_grads(&g, &fm.params)?;
            Adam::default().step(simulator.params_mut(), cfg.lr)?;
            simulator.steps += 1;
            losses.push(f64::from(g.value(loss).item()));
        }
        log::info!("distill epoch {epoch}: loss {:.4}", mean(&losses));
        epoch_losses.push(mean(&losses));
    }
    Ok((simulator, epoch_losses))
}

/// Fresh adapter and target for `cfg`, seeded independently of each other.
pub fn fresh_models(cfg: &AdaptConfig) -> Result<(Network, Network), TrainError> {
    let adapter = build_adapter(cfg.adapter.clone(), derive_seed(cfg.seed, "adapter"))?;
    let target = build_segnet(cfg.target_arch.clone(), derive_seed(cfg.seed, "target"))?;
    Ok((adapter, target))
}

/// Target initialization followed by [`run_bpba`].
pub fn run_bpba_pipeline(
    oracle: &mut dyn SourceOracle,
    data: &SegDataset,
    cfg: &AdaptConfig,
) -> Result<(Network, Network, RunLog), TrainError> {
    let started = Instant::now();
    let before = oracle.calls();
    if !oracle.supports_backward() && cfg.t_rounds > 0 {
        return Err(OracleError::Remote {
            code: BACKWARD_DISABLED.into(),
            message: "oracle does not serve gradients; use the forward-only pipeline".into(),
        }
        .into());
    }
    let (adapter, target) = fresh_models(cfg)?;
    let (target, init_losses) = init_target(oracle, target, data, cfg).map_err(|e| e.in_stage("init_target"))?;
    let (a, t, mut log) = run_bpba(oracle, adapter, target, data, cfg).map_err(|e| e.in_stage("run_bpba"))?;
    log.init_losses = init_losses;
    log.calls = oracle.calls().since(before);
    log.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((a, t, log))
}

/// Forward-only pipeline: init target, train the adapter against both pseudo labels, distill a
/// simulator, then freeze-and-thaw with the simulator as the local gradient provider.
pub fn run_blackbox(
    oracle: &mut dyn SourceOracle,
    data: &SegDataset,
    cfg: &AdaptConfig,
) -> Result<(Network, Network, Network, RunLog), TrainError> {
    let (_, target) = fresh_models(cfg)?;
    let (target, init_losses) = init_target(oracle, target, data, cfg).map_err(|e| e.in_stage("init_target"))?;
    let (a, t, m, mut log) = run_blackbox_from(oracle, target, data, cfg)?;
    log.init_losses = init_losses;
    Ok((a, t, m, log))
}

/// [`run_blackbox`] starting from an already initialized target.
pub fn run_blackbox_from(
    oracle: &mut dyn SourceOracle,
    target: Network,
    data: &SegDataset,
    cfg: &AdaptConfig,
) -> Result<(Network, Network, Network, RunLog), TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let before = oracle.calls();
    let (adapter, _) = fresh_models(cfg)?;
    let simulator = clone_into_simulator(&target);
    let (adapter, satisfy_losses) = train_adapter_satisfy_both(adapter, &target, oracle, data, cfg.satisfy_epochs, cfg)
        .map_err(|e| e.in_stage("train_adapter_satisfy_both"))?;
    let (mut simulator, distill_losses) =
        distill_simulator(simulator, &adapter, oracle, data, cfg.distill_epochs, cfg)
            .map_err(|e| e.in_stage("distill_simulator"))?;
    simulator.freeze();
    let mut local = LocalOracle::new(&simulator, OracleMode::ForwardBackward);
    let (adapter, target, mut log) =
        run_bpba(&mut local, adapter, target, data, cfg).map_err(|e| e.in_stage("freeze_and_thaw"))?;
    log.simulator_calls = local.calls();
    log.mode = "blackbox".into();
    log.satisfy_losses = satisfy_losses;
    log.distill_losses = distill_losses;
    log.calls = oracle.calls().since(before);
    log.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((adapter, target, simulator, log))
}
