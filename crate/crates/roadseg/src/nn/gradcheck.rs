//! Central finite differences, used by tests as the independent oracle for
//! every hand-written backward pass.

use ndarray::ArrayD;

use super::Element;

/// Central-difference gradient of `f` at `x`.
pub fn fd_grad<F, G>(mut f: G, x: &ArrayD<F>, step: F) -> ArrayD<F>
where
    F: Element,
    G: FnMut(&ArrayD<F>) -> F,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + step;
        let plus = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - step;
        let minus = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (plus - minus) / (step + step);
    }
    grad
}

/// Relative L2 distance between two gradients.
pub fn rel_err<F: Element>(a: &ArrayD<F>, b: &ArrayD<F>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().to_f64().sqrt();
    let na = a.mapv(|v| v * v).sum().to_f64().sqrt();
    let nb = b.mapv(|v| v * v).sum().to_f64().sqrt();
    diff / na.max(nb).max(1e-12)
}
