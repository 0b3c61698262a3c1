//! The four networks of the method (adapter, target, source, simulator) and their checkpoints.
//!
//! Source, target and simulator are all small segmentation nets ([`SegNetSpec`]);
//! the adapter is a shape-preserving residual conv stack ([`AdapterSpec`]).

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::{xavier_uniform, Forward, Graph, Module, NetError, ParamSet, SplitMix64, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Residual adapter: `k` conv blocks mapping C → hidden → … → C, plus `x +`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSpec {
    pub k: usize,
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self { k: 3, in_channels: 1, hidden_channels: 16, kernel: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegArch {
    /// Four stride-preserving conv layers, the last a 1×1 head.
    #[serde(rename = "tinyA")]
    TinyA,
    /// Encoder with 2× average-pool downsampling, bottleneck, nearest 2× upsampling and one skip.
    #[serde(rename = "tinyB")]
    TinyB,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetSpec {
    pub arch: SegArch,
    pub in_channels: usize,
    pub num_classes: usize,
    pub width: usize,
}

impl Default for SegNetSpec {
    fn default() -> Self {
        Self { arch: SegArch::TinyA, in_channels: 1, num_classes: 3, width: 16 }
    }
}

/// Per-pixel linear map (a 1×1 convolution). Used as an analytically tractable model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSpec {
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    Adapter(AdapterSpec),
    SegNet(SegNetSpec),
    Linear(LinearSpec),
}

struct ConvLayer {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        match self {
            ArchSpec::Adapter(a) => {
                if a.k == 0 {
                    return bad("adapter needs at least one block".into());
                }
                if a.in_channels == 0 || a.hidden_channels == 0 {
                    return bad("adapter channel counts must be positive".into());
                }
                if a.kernel % 2 == 0 {
                    return bad(format!("adapter kernel must be odd, got {}", a.kernel));
                }
            }
            ArchSpec::SegNet(s) => {
                if s.in_channels == 0 || s.width == 0 {
                    return bad("segnet channel counts must be positive".into());
                }
                if s.num_classes < 2 {
                    return bad(format!("segnet needs at least 2 classes, got {}", s.num_classes));
                }
            }
            ArchSpec::Linear(l) => {
                if l.in_channels == 0 || l.out_channels == 0 {
                    return bad("linear channel counts must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Output channels for an input of `in_channels` channels.
    pub fn out_channels(&self) -> usize {
        match self {
            ArchSpec::Adapter(a) => a.in_channels,
            ArchSpec::SegNet(s) => s.num_classes,
            ArchSpec::Linear(l) => l.out_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            ArchSpec::Adapter(a) => a.in_channels,
            ArchSpec::SegNet(s) => s.in_channels,
            ArchSpec::Linear(l) => l.in_channels,
        }
    }

    fn layers(&self) -> Vec<ConvLayer> {
        match self {
            ArchSpec::Adapter(a) => (0..a.k)
                .map(|i| ConvLayer {
                    name: format!("block{i}"),
                    cin: if i == 0 { a.in_channels } else { a.hidden_channels },
                    cout: if i + 1 == a.k { a.in_channels } else { a.hidden_channels },
                    k: a.kernel,
                })
                .collect(),
            ArchSpec::SegNet(s) => {
                let (c, w, k) = (s.in_channels, s.width, s.num_classes);
                match s.arch {
                    SegArch::TinyA => vec![
                        ConvLayer { name: "conv0".into(), cin: c, cout: w, k: 3 },
                        ConvLayer { name: "conv1".into(), cin: w, cout: w, k: 3 },
                        ConvLayer { name: "conv2".into(), cin: w, cout: w, k: 3 },
                        ConvLayer { name: "head".into(), cin: w, cout: k, k: 1 },
                    ],
                    SegArch::TinyB => vec![
                        ConvLayer { name: "enc".into(), cin: c, cout: w, k: 3 },
                        ConvLayer { name: "down".into(), cin: w, cout: w, k: 3 },
                        ConvLayer { name: "bottleneck".into(), cin: w, cout: w, k: 3 },
                        ConvLayer { name: "dec".into(), cin: 2 * w, cout: w, k: 3 },
                        ConvLayer { name: "head".into(), cin: w, cout: k, k: 1 },
                    ],
                }
            }
            ArchSpec::Linear(l) => vec![ConvLayer { name: "linear".into(), cin: l.in_channels, cout: l.out_channels, k: 1 }],
        }
    }
}

/// A parameterized network: architecture description plus named parameters.
#[derive(Clone, Debug)]
pub struct Network {
    arch: ArchSpec,
    params: ParamSet,
    seed: u64,
    /// Optimizer steps taken since construction, carried through checkpoints.
    pub steps: u64,
}

fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

impl Network {
    /// Builds `arch` with seeded Xavier-uniform weights and zero biases.
    pub fn build(arch: ArchSpec, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = SplitMix64::stream(seed, "init", 0);
        let mut params = ParamSet::new();
        let layers = arch.layers();
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            let shape = [l.cout, l.cin, l.k, l.k];
            let kk = l.k * l.k;
            let weight = xavier_uniform(&shape, l.cin * kk, l.cout * kk, &mut rng);
            // Zero residual branch: the adapter starts as the identity.
            let weight = if matches!(arch, ArchSpec::Adapter(_)) && i == last { Tensor::zeros(&shape) } else { weight };
            params.insert(weight_name(&l.name), weight);
            params.insert(bias_name(&l.name), Tensor::zeros(&[l.cout]));
        }
        Ok(Self { arch, params, seed, steps: 0 })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn freeze(&mut self) {
        self.params.set_frozen(true);
    }

    pub fn unfreeze(&mut self) {
        self.params.set_frozen(false);
    }

    fn conv(
        &self,
        g: &mut Graph,
        x: Var,
        layer: &str,
        pad: usize,
        bindings: &mut Vec<(String, Var)>,
    ) -> Result<Var, NetError> {
        let w = g.param(&self.params, &weight_name(layer), bindings)?;
        let b = g.param(&self.params, &bias_name(layer), bindings)?;
        g.conv2d(x, w, Some(b), 1, pad)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<(), NetError> {
        let [_, c, _, _] = g.value(x).dims4()?;
        if c != self.arch.in_channels() {
            return Err(NetError::Shape(format!(
                "network expects {} input channels, got {c}",
                self.arch.in_channels()
            )));
        }
        Ok(())
    }
}

impl Module for Network {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Forward, NetError> {
        self.check_input(g, x)?;
        let mut bind = Vec::new();
        let output = match &self.arch {
            ArchSpec::Adapter(a) => {
                let pad = a.kernel / 2;
                let layers = self.arch.layers();
                let mut h = x;
                for (i, l) in layers.iter().enumerate() {
                    h = self.conv(g, h, &l.name, pad, &mut bind)?;
                    if i + 1 < layers.len() {
                        h = g.relu(h)?;
                    }
                }
                g.add(x, h)?
            }
            ArchSpec::SegNet(s) => match s.arch {
                SegArch::TinyA => {
                    let mut h = x;
                    for layer in ["conv0", "conv1", "conv2"] {
                        h = self.conv(g, h, layer, 1, &mut bind)?;
                        h = g.relu(h)?;
                    }
                    self.conv(g, h, "head", 0, &mut bind)?
                }
                SegArch::TinyB => {
                    let e = self.conv(g, x, "enc", 1, &mut bind)?;
                    let e = g.relu(e)?;
                    let d = g.avg_pool2(e)?;
                    let d = self.conv(g, d, "down", 1, &mut bind)?;
                    let d = g.relu(d)?;
                    let b = self.conv(g, d, "bottleneck", 1, &mut bind)?;
                    let b = g.relu(b)?;
                    let u = g.upsample2(b)?;
                    let m = g.concat_channels(u, e)?;
                    let m = self.conv(g, m, "dec", 1, &mut bind)?;
                    let m = g.relu(m)?;
                    self.conv(g, m, "head", 0, &mut bind)?
                }
            },
            ArchSpec::Linear(_) => self.conv(g, x, "linear", 0, &mut bind)?,
        };
        Ok(Forward { output, params: bind })
    }
}

pub fn build_adapter(spec: AdapterSpec, seed: u64) -> Result<Network, ModelError> {
    Network::build(ArchSpec::Adapter(spec), seed)
}

pub fn build_segnet(spec: SegNetSpec, seed: u64) -> Result<Network, ModelError> {
    Network::build(ArchSpec::SegNet(spec), seed)
}

/// Independent deep copy of `target` (fresh optimizer state, unfrozen) to serve as the simulator.
pub fn clone_into_simulator(target: &Network) -> Network {
    let mut params = ParamSet::new();
    for (name, p) in target.params.iter() {
        params.insert(name, p.value.clone());
    }
    Network { arch: target.arch.clone(), params, seed: target.seed, steps: 0 }
}
