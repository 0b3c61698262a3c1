use super::{Graph, Module, NetError, SplitMix64, Tensor};

/// Outcome of comparing analytic gradients with central differences.
///
/// Errors are norm-wise per tensor: `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)`,
/// with the denominator floored at [`GradCheckReport::DENOM_FLOOR`].
///
/// A central difference whose `±eps` probes land on different ReLU activation
/// patterns than the unperturbed point straddles a kink and does not estimate the
/// derivative; such elements are counted in `kink_skipped` and left out of the error.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub param_errors: Vec<(String, f64)>,
    pub input_error: f64,
    pub checked: usize,
    pub kink_skipped: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub const DENOM_FLOOR: f64 = 1e-4;

    pub fn max_error(&self) -> f64 {
        self.param_errors.iter().map(|(_, e)| *e).fold(self.input_error, f64::max)
    }

    pub fn skipped_fraction(&self) -> f64 {
        self.kink_skipped as f64 / (self.checked + self.kink_skipped).max(1) as f64
    }
}

/// Analytic/numeric pairs for one tensor, kinks already removed.
#[derive(Default)]
struct Pairs {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

impl Pairs {
    fn relative_error(&self) -> f64 {
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let diff = self.analytic.iter().zip(&self.numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        diff / inf(&self.analytic).max(inf(&self.numeric)).max(GradCheckReport::DENOM_FLOOR)
    }
}

/// Random projection weights that turn the network output into a scalar loss.
fn projection(shape: &[usize]) -> Tensor {
    let mut rng = SplitMix64::stream(0, "gradcheck-projection", shape.iter().product::<usize>() as u64);
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0) as f32)
}

/// Projected loss in f64 plus the activation pattern of the evaluation.
fn probe<M: Module>(net: &M, x: &Tensor, proj: &Tensor) -> Result<(f64, u64), NetError> {
    let mut g = Graph::no_grad();
    let xv = g.input(x.clone());
    let out = net.forward(&mut g, xv)?.output;
    let loss = g.value(out).data().iter().zip(proj.data()).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
    Ok((loss, g.activation_pattern()))
}

/// Checks every unfrozen parameter and the input of `net` against central differences
/// of the scalar loss `Σ r ⊙ net(x)` with fixed pseudo-random `r`.
///
/// A network that produces non-finite values yields an error rather than a report.
/// Parameter values are restored bit-exactly before returning.
pub fn finite_diff_check<M: Module>(
    net: &mut M,
    input: &Tensor,
    eps: f32,
    tol: f64,
) -> Result<GradCheckReport, NetError> {
    if !(eps > 0.0) {
        return Err(NetError::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(input.clone(), true);
    let fwd = net.forward(&mut g, xv)?;
    let proj = projection(g.value(fwd.output).shape());
    let loss = g.weighted_sum(fwd.output, &proj)?;
    g.backward(loss)?;
    let pattern = g.activation_pattern();

    let (mut checked, mut skipped) = (0usize, 0usize);
    let mut record = |pairs: &mut Pairs, analytic: f32, plus: (f64, u64), minus: (f64, u64)| {
        if plus.1 != pattern || minus.1 != pattern {
            skipped += 1;
            return;
        }
        checked += 1;
        pairs.analytic.push(f64::from(analytic));
        pairs.numeric.push((plus.0 - minus.0) / (2.0 * f64::from(eps)));
    };

    let mut param_errors = Vec::new();
    for (name, var) in &fwd.params {
        let analytic = g.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(g.value(*var).shape()));
        let mut pairs = Pairs::default();
        for (i, &a) in analytic.data().iter().enumerate() {
            let original = net.params().get(name).expect("bound parameter").value.data()[i];
            let mut eval_at = |v: f32| -> Result<(f64, u64), NetError> {
                net.params_mut().get_mut(name).expect("bound parameter").value.data_mut()[i] = v;
                probe(net, input, &proj)
            };
            let plus = eval_at(original + eps);
            let minus = eval_at(original - eps);
            net.params_mut().get_mut(name).expect("bound parameter").value.data_mut()[i] = original;
            record(&mut pairs, a, plus?, minus?);
        }
        param_errors.push((name.clone(), pairs.relative_error()));
    }

    let analytic = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
    let mut pairs = Pairs::default();
    let mut x = input.clone();
    for (i, &a) in analytic.data().iter().enumerate() {
        let original = x.data()[i];
        x.data_mut()[i] = original + eps;
        let plus = probe(net, &x, &proj)?;
        x.data_mut()[i] = original - eps;
        let minus = probe(net, &x, &proj)?;
        x.data_mut()[i] = original;
        record(&mut pairs, a, plus, minus);
    }
    let input_error = pairs.relative_error();

    let mut report =
        GradCheckReport { param_errors, input_error, checked, kink_skipped: skipped, tolerance: tol, pass: false };
    report.pass = checked > 0 && report.max_error() <= tol;
    Ok(report)
}
