//! Parameter initialization.

use super::Element;
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

/// Fan-in-scaled normal init: `std = sqrt(2 / fan_in)`.
pub fn he_normal<F: Element>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let std = F::from_f64((2.0 / fan_in as f64).sqrt());
    let mut out = ArrayD::zeros(ndarray::IxDyn(shape));
    for v in out.iter_mut() {
        *v = F::std_normal(rng) * std;
    }
    out
}

pub fn zeros<F: Element>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(ndarray::IxDyn(shape))
}

pub fn ones<F: Element>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(ndarray::IxDyn(shape), F::one())
}
