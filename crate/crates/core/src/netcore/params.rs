use super::{Graph, NetError, SplitMix64, Tensor, Var};

/// One named parameter with its gradient slot and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub frozen: bool,
    adam_m: Tensor,
    adam_v: Tensor,
    adam_t: u64,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self { adam_m: zeros.clone(), adam_v: zeros, value, grad: None, frozen: false, adam_t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.adam_t
    }
}

/// Ordered name → parameter map. Order is construction order and is what
/// checkpoints serialize.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Param)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, p)) => *p = Param::new(value),
            None => self.entries.push((name, Param::new(value))),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.entries.iter_mut().for_each(|(_, p)| p.frozen = frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.entries.iter().all(|(_, p)| p.frozen)
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, p)| p.grad = None);
    }

    /// Adds the graph gradients of `bindings` into the matching parameters.
    pub fn accumulate_grads(&mut self, g: &Graph, bindings: &[(String, Var)]) -> Result<(), NetError> {
        for (name, var) in bindings {
            let Some(grad) = g.grad(*var) else { continue };
            let p = self.get_mut(name).ok_or_else(|| NetError::UnknownParam(name.clone()))?;
            match &mut p.grad {
                Some(acc) => acc.add_assign(grad),
                slot @ None => *slot = Some(grad.clone()),
            }
        }
        Ok(())
    }

    /// True when every value is bit-identical to `other`'s (same names, same order).
    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.value.bits_eq(&b.value))
    }

    /// Snapshot of the parameter values.
    pub fn values(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect()
    }
}

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    /// Updates every unfrozen parameter and clears all gradients.
    ///
    /// Fails without touching anything if a trainable parameter has no gradient.
    pub fn step(&self, params: &mut ParamSet, lr: f32) -> Result<(), NetError> {
        if let Some((name, _)) = params.iter().find(|(_, p)| !p.frozen && p.grad.is_none()) {
            return Err(NetError::MissingGrad(name.to_string()));
        }
        for (_, p) in params.iter_mut() {
            let grad = p.grad.take();
            if p.frozen {
                continue;
            }
            let grad = grad.expect("checked above");
            p.adam_t += 1;
            let bc1 = 1.0 - self.beta1.powi(p.adam_t as i32);
            let bc2 = 1.0 - self.beta2.powi(p.adam_t as i32);
            let (m, v) = (p.adam_m.data_mut(), p.adam_v.data_mut());
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            if !p.value.is_finite() {
                return Err(NetError::NonFinite("adam_step"));
            }
        }
        Ok(())
    }
}

/// [`Adam::step`] with β1 = 0.9, β2 = 0.999, ε = 1e-8.
pub fn adam_step(params: &mut ParamSet, lr: f32) -> Result<(), NetError> {
    Adam::default().step(params, lr)
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform(-bound, bound) as f32)
}
