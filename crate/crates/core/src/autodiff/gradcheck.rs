//! Central finite-difference checks of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per input tensor, in input order.
    pub per_leaf: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Checks the gradients of a scalar function built on a [`Graph`].
///
/// `f` receives a fresh graph and one leaf per entry of `point`, and returns
/// the scalar output.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + Send,
{
    grad_check_with(
        |p| {
            let mut g = Graph::new();
            let leaves = p.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
            let out = f(&mut g, &leaves)?;
            let value = g.value(out).item();
            g.backward(out)?;
            let grads = leaves
                .iter()
                .zip(p)
                .map(|(&l, t)| g.grad(l).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            Ok((value, grads))
        },
        |p| {
            let mut g = Graph::new();
            let leaves = p.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
            let out = f(&mut g, &leaves)?;
            Ok(g.value(out).item())
        },
        point,
        h,
        tol,
        Execution::Parallel,
    )
}

/// Compares an arbitrary analytic gradient routine against central differences
/// of `value`. Useful for checking hand-written gradients and negative controls.
pub fn grad_check_with<A, V>(
    analytic: A,
    value: V,
    point: &[Tensor],
    h: f64,
    tol: f64,
    exec: Execution,
) -> Result<GradCheckReport>
where
    A: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
    V: Fn(&[Tensor]) -> Result<f64> + Sync + Send,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let (f0, grads) = analytic(point)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let coords: Vec<(usize, usize)> =
        point.iter().enumerate().flat_map(|(li, t)| (0..t.numel()).map(move |j| (li, j))).collect();
    let numeric = exec::map_slice(exec, &coords, |&(li, j)| -> Result<f64> {
        let mut p = point.to_vec();
        let x = p[li].data()[j];
        p[li].data_mut()[j] = x + h;
        let fp = value(&p)?;
        p[li].data_mut()[j] = x - h;
        let fm = value(&p)?;
        Ok((fp - fm) / (2.0 * h))
    });
    let mut per_leaf = vec![0.0_f64; point.len()];
    for (&(li, j), n) in coords.iter().zip(numeric) {
        let n = n?;
        if !n.is_finite() {
            return Err(Error::NonFinite("finite-difference estimate".into()));
        }
        let err = relative_error(grads[li].data()[j], n);
        per_leaf[li] = per_leaf[li].max(err);
    }
    let max_rel_error = per_leaf.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { per_leaf, max_rel_error, tol, passed: max_rel_error < tol })
}
