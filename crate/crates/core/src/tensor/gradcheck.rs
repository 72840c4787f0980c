use super::{Graph, Tensor, Var};
use crate::error::{bail, Result};

/// Denominator floor for [`relative_error`]; below it the comparison is absolute.
const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central-difference check of a scalar function of one tensor.
///
/// Returns the largest relative error between `backward()` and
/// `(f(x+h) - f(x-h)) / 2h` over all elements. Every evaluation runs on a
/// fresh graph seeded with `seed`; a function whose value differs between
/// two identical evaluations is rejected.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, seed)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        bail!(Parameter, "finite-difference step {h} outside [1e-7, 1e-3]");
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(seed);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            bail!(Contract, "grad_check needs a scalar function, got shape {:?}", v.shape());
        }
        Ok(v.item())
    };

    let base = eval(inputs)?;
    if eval(inputs)?.to_bits() != base.to_bits() {
        bail!(Contract, "function is not deterministic for a fixed seed");
    }

    let mut g = Graph::new(seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
