//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse, so the tape order is already a topological order.

use super::conv::{self, ConvGeom};
use super::{LabelTensor, NetError, ParamSet, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    WeightedSum(Var, Tensor),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    CrossEntropy { logits: Var, labels: LabelTensor },
    KlDiv { logits: Var, target_logits: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    track: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Output of a module's forward pass plus the graph nodes of its trainable parameters.
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Var,
    pub params: Vec<(String, Var)>,
}

/// A parameterized differentiable function.
pub trait Module {
    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Records the forward pass on `g`. Unfrozen parameters become gradient-tracked leaves.
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Forward, NetError>;

    /// Forward pass without gradient tracking.
    fn predict(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let mut g = Graph::no_grad();
        let x = g.input(x.clone());
        let out = self.forward(&mut g, x)?.output;
        Ok(g.into_value(out))
    }

    /// Vector-Jacobian product `(∂f/∂x)ᵀ·upstream` at `x`. Parameters are left untouched.
    fn vjp(&self, x: &Tensor, upstream: &Tensor) -> Result<Tensor, NetError> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let fwd = self.forward(&mut g, xv)?;
        g.backward_from(fwd.output, upstream)?;
        Ok(g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
    }
}

fn ensure_finite(t: &Tensor, op: &'static str) -> Result<(), NetError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NetError::NonFinite(op))
    }
}

/// `(max, log Σ exp(z - max))` over the class axis for one pixel.
#[inline]
fn log_softmax_parts(z: &[f32], k: usize, stride: usize, base: usize) -> (f32, f32) {
    let mut m = f32::NEG_INFINITY;
    for c in 0..k {
        m = m.max(z[base + c * stride]);
    }
    let mut s = 0.0f32;
    for c in 0..k {
        s += (z[base + c * stride] - m).exp();
    }
    (m, s.ln())
}

fn pixel_layout(shape: &[usize]) -> Result<(usize, usize, usize), NetError> {
    match *shape {
        [n, k, h, w] => Ok((n, k, h * w)),
        _ => Err(NetError::Shape(format!("expected logits [N,K,H,W], got {shape:?}"))),
    }
}

impl Graph {
    /// A graph that records gradients.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new(), track: true }
    }

    /// A graph on which nothing ever requires a gradient.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new(), track: false }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var, NetError> {
        ensure_finite(&value, name)?;
        let requires_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: requires_grad && self.track });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf for parameter `name` of `set`, recorded in `bindings` when trainable.
    pub fn param(
        &mut self,
        set: &ParamSet,
        name: &str,
        bindings: &mut Vec<(String, Var)>,
    ) -> Result<Var, NetError> {
        let p = set.get(name).ok_or_else(|| NetError::UnknownParam(name.to_string()))?;
        let v = self.leaf(p.value.clone(), !p.frozen);
        if self.requires_grad(v) {
            bindings.push((name.to_string(), v));
        }
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// FNV-1a hash of which ReLU inputs are positive. Two evaluations with equal
    /// patterns lie on the same linear piece of every ReLU in the graph.
    pub fn activation_pattern(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in self.value(x).data() {
                    h ^= u64::from(v > 0.0);
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
                h ^= 0xFF;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NetError> {
        let [n, cin, h, w] = self.value(input).dims4()?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4()?;
        if wcin != cin || kh != kw {
            return Err(NetError::Shape(format!(
                "conv weight {:?} does not fit input {:?}",
                self.value(weight).shape(),
                self.value(input).shape()
            )));
        }
        let k = kh;
        if k % 2 == 0 || stride == 0 {
            return Err(NetError::Invalid(format!("conv needs an odd kernel and stride ≥ 1 (k={k}, stride={stride})")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(NetError::Shape(format!("bias shape {:?} != [{cout}]", self.value(b).shape())));
            }
        }
        let out_dim = |d: usize| -> Result<usize, NetError> {
            let span = (d + 2 * pad)
                .checked_sub(k)
                .ok_or_else(|| NetError::Shape(format!("kernel {k} larger than padded input {d}+2·{pad}")))?;
            if span % stride != 0 {
                return Err(NetError::Shape(format!(
                    "output size ({d} + 2·{pad} − {k})/{stride} is not integral"
                )));
            }
            Ok(span / stride + 1)
        };
        let geom = ConvGeom { n, cin, h, w, cout, k, stride, pad, ho: out_dim(h)?, wo: out_dim(w)? };
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(value, Op::Conv2d { input, weight, bias, geom }, &inputs, "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NetError> {
        let src = self.value(x);
        let value = Tensor::from_fn(src.shape(), |i| {
            let v = src.data()[i];
            if v < 0.0 { 0.0 } else { v }
        });
        self.push(value, Op::Relu(x), &[x], "relu")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<(), NetError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NetError::Shape(format!(
                "{op} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(x.shape(), |i| x.data()[i] + y.data()[i]);
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(x.shape(), |i| x.data()[i] * y.data()[i]);
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, alpha: f32) -> Result<Var, NetError> {
        let value = self.value(x).scale(alpha);
        self.push(value, Op::Scale(x, alpha), &[x], "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NetError> {
        let s: f64 = self.value(x).data().iter().map(|&v| f64::from(v)).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x], "sum")
    }

    /// `Σ x·weights` with fixed (untracked) weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var, NetError> {
        if self.value(x).shape() != weights.shape() {
            return Err(NetError::Shape("weighted_sum weights must match the input".into()));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        self.push(Tensor::scalar(s as f32), Op::WeightedSum(x, weights.clone()), &[x], "weighted_sum")
    }

    /// 2×2 average pooling; spatial sizes must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, NetError> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NetError::Shape(format!("avg_pool2 needs even spatial size, got {h}×{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y, x0) = (2 * oy, 2 * ox);
                    let v = s[y * w + x0] + s[y * w + x0 + 1] + s[(y + 1) * w + x0] + s[(y + 1) * w + x0 + 1];
                    out[p * ho * wo + oy * wo + ox] = 0.25 * v;
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(value, Op::AvgPool2(x), &[x], "avg_pool2")
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, NetError> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[p * ho * wo + oy * wo + ox] = src[p * h * w + (oy / 2) * w + ox / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(value, Op::Upsample2(x), &[x], "upsample2")
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(NetError::Shape("concat needs matching batch and spatial sizes".into()));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for s in 0..n {
            out.extend_from_slice(&da[s * pa..(s + 1) * pa]);
            out.extend_from_slice(&db[s * pb..(s + 1) * pb]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        self.push(value, Op::Concat(a, b), &[a, b], "concat")
    }

    /// Mean per-pixel softmax cross-entropy of `[N,K,H,W]` logits against `[N,H,W]` labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &LabelTensor) -> Result<Var, NetError> {
        let (n, k, hw) = pixel_layout(self.value(logits).shape())?;
        if labels.shape() != [n, self.value(logits).shape()[2], self.value(logits).shape()[3]] {
            return Err(NetError::Shape(format!(
                "labels {:?} do not match logits {:?}",
                labels.shape(),
                self.value(logits).shape()
            )));
        }
        if let Some(&bad) = labels.data().iter().find(|&&l| usize::from(l) >= k) {
            return Err(NetError::LabelOutOfRange { label: bad, classes: k });
        }
        let z = self.value(logits).data();
        let mut total = 0.0f64;
        for s in 0..n {
            for p in 0..hw {
                let base = s * k * hw + p;
                let (m, lse) = log_softmax_parts(z, k, hw, base);
                let y = usize::from(labels.data()[s * hw + p]);
                total += f64::from(lse - (z[base + y * hw] - m));
            }
        }
        let loss = (total / (n * hw) as f64) as f32;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.clone() },
            &[logits],
            "cross_entropy",
        )
    }

    /// Mean per-pixel KL(softmax(target) ‖ softmax(logits)).
    pub fn kl_div(&mut self, logits: Var, target_logits: &Tensor) -> Result<Var, NetError> {
        let shape = self.value(logits).shape().to_vec();
        if shape != target_logits.shape() {
            return Err(NetError::Shape(format!("kl_div target {:?} != logits {shape:?}", target_logits.shape())));
        }
        let (n, k, hw) = pixel_layout(&shape)?;
        let (z, t) = (self.value(logits).data(), target_logits.data());
        let mut total = 0.0f64;
        for s in 0..n {
            for p in 0..hw {
                let base = s * k * hw + p;
                let (mz, lz) = log_softmax_parts(z, k, hw, base);
                let (mt, lt) = log_softmax_parts(t, k, hw, base);
                for c in 0..k {
                    let i = base + c * hw;
                    let log_p = t[i] - mt - lt;
                    let log_q = z[i] - mz - lz;
                    total += f64::from(log_p.exp() * (log_p - log_q));
                }
            }
        }
        let loss = (total / (n * hw) as f64) as f32;
        self.push(
            Tensor::scalar(loss),
            Op::KlDiv { logits, target_logits: target_logits.clone() },
            &[logits],
            "kl_div",
        )
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NetError> {
        if !self.value(loss).is_scalar() {
            return Err(NetError::NotScalar(self.value(loss).shape().to_vec()));
        }
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        self.backward_from(loss, &seed)
    }

    /// Reverse pass seeded with an explicit upstream gradient for `v`.
    pub fn backward_from(&mut self, v: Var, upstream: &Tensor) -> Result<(), NetError> {
        if upstream.shape() != self.value(v).shape() {
            return Err(NetError::Shape(format!(
                "upstream gradient {:?} does not match {:?}",
                upstream.shape(),
                self.value(v).shape()
            )));
        }
        ensure_finite(upstream, "upstream gradient")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; v.0 + 1];
        grads[v.0] = Some(upstream.clone());
        for i in (0..=v.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &gout, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&gout),
                    slot @ None => *slot = Some(gout),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NetError> {
        let mut send = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let need = (rg(*input), rg(*weight), bias.is_some_and(rg));
                let r = conv::backward(geom, self.value(*input).data(), self.value(*weight).data(), gout.data(), need);
                if let Some(dx) = r.dx {
                    send(*input, Tensor::new(self.value(*input).shape().to_vec(), dx)?);
                }
                if let Some(dw) = r.dw {
                    send(*weight, Tensor::new(self.value(*weight).shape().to_vec(), dw)?);
                }
                if let (Some(b), Some(db)) = (bias, r.db) {
                    send(*b, Tensor::new(vec![geom.cout], db)?);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                send(*x, Tensor::from_fn(gout.shape(), |j| if xv[j] > 0.0 { gout.data()[j] } else { 0.0 }));
            }
            Op::Add(a, b) => {
                send(*a, gout.clone());
                send(*b, gout.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, Tensor::from_fn(gout.shape(), |j| gout.data()[j] * bv[j]));
                send(*b, Tensor::from_fn(gout.shape(), |j| gout.data()[j] * av[j]));
            }
            Op::Scale(x, alpha) => send(*x, gout.scale(*alpha)),
            Op::Sum(x) => send(*x, Tensor::full(self.value(*x).shape(), gout.item())),
            Op::WeightedSum(x, w) => send(*x, w.scale(gout.item())),
            Op::AvgPool2(x) => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0f32; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[p * h * w + y * w + xx] = 0.25 * gout.data()[p * ho * wo + (y / 2) * wo + xx / 2];
                        }
                    }
                }
                send(*x, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let (ho, wo) = (2 * h, 2 * w);
                let mut dx = vec![0.0f32; n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dx[p * h * w + (oy / 2) * w + ox / 2] += gout.data()[p * ho * wo + oy * wo + ox];
                        }
                    }
                }
                send(*x, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                let (mut ga, mut gb) = (Vec::with_capacity(n * pa), Vec::with_capacity(n * pb));
                for s in 0..n {
                    let chunk = &gout.data()[s * (pa + pb)..(s + 1) * (pa + pb)];
                    ga.extend_from_slice(&chunk[..pa]);
                    gb.extend_from_slice(&chunk[pa..]);
                }
                send(*a, Tensor::new(vec![n, ca, h, w], ga)?);
                send(*b, Tensor::new(vec![n, cb, h, w], gb)?);
            }
            Op::CrossEntropy { logits, labels } => {
                let zt = self.value(*logits);
                let (n, k, hw) = pixel_layout(zt.shape())?;
                let z = zt.data();
                let scale = gout.item() / (n * hw) as f32;
                let mut dz = vec![0.0f32; z.len()];
                for s in 0..n {
                    for p in 0..hw {
                        let base = s * k * hw + p;
                        let (m, lse) = log_softmax_parts(z, k, hw, base);
                        let y = usize::from(labels.data()[s * hw + p]);
                        for c in 0..k {
                            let q = (z[base + c * hw] - m - lse).exp();
                            let target = if c == y { 1.0 } else { 0.0 };
                            dz[base + c * hw] = (q - target) * scale;
                        }
                    }
                }
                send(*logits, Tensor::new(zt.shape().to_vec(), dz)?);
            }
            Op::KlDiv { logits, target_logits } => {
                let zt = self.value(*logits);
                let (n, k, hw) = pixel_layout(zt.shape())?;
                let (z, t) = (zt.data(), target_logits.data());
                let scale = gout.item() / (n * hw) as f32;
                let mut dz = vec![0.0f32; z.len()];
                for s in 0..n {
                    for p in 0..hw {
                        let base = s * k * hw + p;
                        let (mz, lz) = log_softmax_parts(z, k, hw, base);
                        let (mt, lt) = log_softmax_parts(t, k, hw, base);
                        for c in 0..k {
                            let i = base + c * hw;
                            let q = (z[i] - mz - lz).exp();
                            let p_t = (t[i] - mt - lt).exp();
                            dz[i] = (q - p_t) * scale;
                        }
                    }
                }
                send(*logits, Tensor::new(zt.shape().to_vec(), dz)?);
            }
        }
        Ok(())
    }
}
