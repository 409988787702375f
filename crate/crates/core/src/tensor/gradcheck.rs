//! Central finite-difference oracle for checking reverse-mode gradients.
//!
//! The oracle only evaluates the forward function; it never touches the
//! backward rules it is used to verify.

use super::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-4;

/// Numerical gradient of `f` at every coordinate of every input.
pub fn numeric_grad<F>(inputs: &[Tensor], mut f: F) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let fp = f(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let fm = f(&work);
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (fp - fm) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// Elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true derivative is (numerically) zero
/// from dividing roundoff by roundoff.
pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(x, y)| (*x, *y)))
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
