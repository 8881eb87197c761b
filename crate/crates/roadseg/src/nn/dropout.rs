//! Inverted dropout: active only on the training path.

use ndarray::{Array, ArrayD, Dimension};
use rand_chacha::ChaCha8Rng;

use super::Element;

pub struct Dropout<F: Element> {
    pub p: F,
    cache_mask: Option<ArrayD<F>>,
}

impl<F: Element> Dropout<F> {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
        Dropout {
            p: F::from_f64(p),
            cache_mask: None,
        }
    }

    pub fn forward<D: Dimension>(&mut self, x: &Array<F, D>, rng: &mut ChaCha8Rng) -> Array<F, D> {
        if self.p == F::zero() {
            self.cache_mask = None;
            return x.clone();
        }
        let keep = F::one() - self.p;
        let scale = F::one() / keep;
        let mut mask = ArrayD::<F>::zeros(x.raw_dim().into_dyn());
        for m in mask.iter_mut() {
            *m = if F::unit_uniform(rng) < keep {
                scale
            } else {
                F::zero()
            };
        }
        let y = x * &mask.view().into_dimensionality::<D>().unwrap();
        self.cache_mask = Some(mask);
        y
    }

    pub fn backward<D: Dimension>(&mut self, g: &Array<F, D>) -> Array<F, D> {
        match self.cache_mask.take() {
            None => g.clone(),
            Some(mask) => g * &mask.into_dimensionality::<D>().unwrap(),
        }
    }
}
