//! Helpers shared by the integration suites: single-op and composed modules for gradient
//! checks, and brute-force metric implementations written independently of the library.

#![allow(dead_code)]

use btol_core::models::Network;
use btol_core::netcore::{Forward, Graph, Module, NetError, ParamSet, SplitMix64, Tensor, Var};

pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::stream(seed, "gradcheck-input", 0);
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0) as f32)
}

/// Single-op wrappers so each layer type can be checked in isolation.
pub struct OpNet {
    params: ParamSet,
    kind: OpKind,
}

#[derive(Clone, Copy)]
pub enum OpKind {
    Conv { stride: usize, pad: usize },
    ConvRelu,
    Pool,
    Upsample,
    ConcatConv,
    Mul,
}

impl OpNet {
    pub fn new(kind: OpKind, cin: usize, cout: usize, k: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::stream(seed, "opnet", 0);
        let mut params = ParamSet::new();
        let cin = if matches!(kind, OpKind::ConcatConv) { 2 * cin } else { cin };
        params.insert("w", Tensor::from_fn(&[cout, cin, k, k], |_| rng.uniform(-0.5, 0.5) as f32));
        params.insert("b", Tensor::from_fn(&[cout], |_| rng.uniform(-0.5, 0.5) as f32));
        Self { params, kind }
    }
}

impl Module for OpNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Forward, NetError> {
        let mut bind = Vec::new();
        let w = g.param(&self.params, "w", &mut bind)?;
        let b = g.param(&self.params, "b", &mut bind)?;
        let pad = g.value(w).shape()[2] / 2;
        let output = match self.kind {
            OpKind::Conv { stride, pad } => g.conv2d(x, w, Some(b), stride, pad)?,
            OpKind::ConvRelu => {
                let y = g.conv2d(x, w, Some(b), 1, pad)?;
                g.relu(y)?
            }
            OpKind::Pool => {
                let p = g.avg_pool2(x)?;
                g.conv2d(p, w, Some(b), 1, pad)?
            }
            OpKind::Upsample => {
                let u = g.upsample2(x)?;
                g.conv2d(u, w, Some(b), 1, pad)?
            }
            OpKind::ConcatConv => {
                let c = g.concat_channels(x, x)?;
                g.conv2d(c, w, Some(b), 1, pad)?
            }
            OpKind::Mul => {
                let y = g.conv2d(x, w, Some(b), 1, pad)?;
                g.mul(y, y)?
            }
        };
        Ok(Forward { output, params: bind })
    }
}

pub fn perturbed(mut net: Network, seed: u64) -> Network {
    // Random non-zero adapter tail so every block carries gradient.
    let mut rng = SplitMix64::stream(seed, "perturb", 0);
    for (_, p) in net.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.uniform(-0.1, 0.1) as f32;
        }
    }
    net
}

/// Adapter composed with a segnet, checked as one module.
pub struct Composed {
    adapter: Network,
    segnet: Network,
    params: ParamSet,
}

impl Composed {
    pub fn new(adapter: Network, segnet: Network) -> Self {
        let mut params = ParamSet::new();
        for (n, p) in adapter.params().iter() {
            params.insert(format!("a.{n}"), p.value.clone());
        }
        for (n, p) in segnet.params().iter() {
            params.insert(format!("s.{n}"), p.value.clone());
        }
        Self { adapter, segnet, params }
    }

    fn sync(&self) -> (Network, Network) {
        let (mut a, mut s) = (self.adapter.clone(), self.segnet.clone());
        for (n, p) in self.params.iter() {
            let (net, name) = if let Some(rest) = n.strip_prefix("a.") { (&mut a, rest) } else { (&mut s, &n[2..]) };
            net.params_mut().get_mut(name).unwrap().value = p.value.clone();
        }
        (a, s)
    }
}

impl Module for Composed {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Forward, NetError> {
        let (a, s) = self.sync();
        let fa = a.forward(g, x)?;
        let fs = s.forward(g, fa.output)?;
        let mut params: Vec<(String, Var)> = fa.params.into_iter().map(|(n, v)| (format!("a.{n}"), v)).collect();
        params.extend(fs.params.into_iter().map(|(n, v)| (format!("s.{n}"), v)));
        Ok(Forward { output: fs.output, params })
    }
}

pub fn brute_dice(p: &[u8], g: &[u8], c: u8) -> f64 {
    let a = p.iter().filter(|&&v| v == c).count();
    let b = g.iter().filter(|&&v| v == c).count();
    let i = p.iter().zip(g).filter(|(&x, &y)| x == c && y == c).count();
    if a + b == 0 {
        1.0
    } else {
        2.0 * i as f64 / (a + b) as f64
    }
}

pub fn brute_boundary(m: &[u8], h: usize, w: usize, c: u8) -> Vec<(i64, i64)> {
    let at = |y: i64, x: i64| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[y as usize * w + x as usize] == c;
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if at(y, x) && (!at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

pub fn brute_asd(p: &[u8], g: &[u8], h: usize, w: usize, c: u8) -> Option<f64> {
    let (bp, bg) = (brute_boundary(p, h, w, c), brute_boundary(g, h, w, c));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let nearest = |a: (i64, i64), set: &[(i64, i64)]| {
        set.iter()
            .map(|b| (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut forward = 0.0;
    for &a in &bp {
        forward += nearest(a, &bg);
    }
    let mut backward = 0.0;
    for &b in &bg {
        backward += nearest(b, &bp);
    }
    Some((forward + backward) / (bp.len() + bg.len()) as f64)
}

