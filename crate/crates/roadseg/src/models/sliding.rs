//! Sliding-window baseline: a five-layer CNN (four conv/pool stages and a
//! dense head) classifying one context window into road / background.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

use super::unet::{visit_conv, StateTensor};
use crate::error::{Error, Result};
use crate::nn::activation::{softmax_rows, softmax_rows_backward};
use crate::nn::{Conv2d, Dense, Dropout, Element, LeakyRelu, MaxPool2, Param};

/// Conv stage channel ladder.
const LADDER: [usize; 4] = [32, 64, 128, 128];

/// Negative slope of the leaky rectifier.
const LEAKY_ALPHA: f64 = 0.3;

pub struct SlidingCnn<F: Element> {
    convs: Vec<Conv2d<F>>,
    acts: Vec<LeakyRelu<F>>,
    pools: Vec<MaxPool2<F>>,
    dropout: Dropout<F>,
    dense: Dense<F>,
    pub window_size: usize,
    flat_dim: (usize, usize, usize),
    cache_probs: Option<Array2<F>>,
}

impl<F: Element> SlidingCnn<F> {
    pub fn new(window_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if window_size == 0 || !window_size.is_multiple_of(16) {
            return Err(Error::InvalidConfig(format!(
                "window size must be divisible by 16, got {window_size}"
            )));
        }
        let mut convs = Vec::new();
        let mut in_c = 3;
        for &out_c in &LADDER {
            convs.push(Conv2d::new(in_c, out_c, 3, 1, rng));
            in_c = out_c;
        }
        let side = window_size / 16;
        let flat = LADDER[3] * side * side;
        Ok(SlidingCnn {
            convs,
            acts: (0..4).map(|_| LeakyRelu::new(LEAKY_ALPHA)).collect(),
            pools: (0..4).map(|_| MaxPool2::new()).collect(),
            dropout: Dropout::new(0.5),
            dense: Dense::new(flat, 2, rng),
            window_size,
            flat_dim: (LADDER[3], side, side),
            cache_probs: None,
        })
    }

    fn validate_input(&self, x: &Array4<F>) -> Result<()> {
        let (_b, c, h, w) = x.dim();
        if c != 3 || h != self.window_size || w != self.window_size {
            return Err(Error::InvalidInput(format!(
                "expected 3x{0}x{0} windows, got {c}x{h}x{w}",
                self.window_size
            )));
        }
        Ok(())
    }

    /// Eval-mode forward: per-window class probabilities.
    pub fn infer(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.validate_input(x)?;
        let mut cur = x.as_standard_layout().into_owned();
        for i in 0..4 {
            cur = self.convs[i].infer(&cur);
            cur = self.acts[i].infer(&cur);
            cur = self.pools[i].infer(&cur);
        }
        let b = cur.dim().0;
        let flat = cur
            .into_shape_with_order((b, self.dense.in_features))
            .expect("pooled maps are contiguous");
        let logits = self.dense.infer(&flat);
        Ok(softmax_rows(&logits))
    }

    pub fn forward_train(&mut self, x: &Array4<F>, rng: &mut ChaCha8Rng) -> Result<Array2<F>> {
        self.validate_input(x)?;
        let mut cur = x.as_standard_layout().into_owned();
        for i in 0..4 {
            cur = self.convs[i].forward(&cur);
            cur = self.acts[i].forward(&cur);
            cur = self.pools[i].forward(&cur);
        }
        let b = cur.dim().0;
        let flat = cur
            .into_shape_with_order((b, self.dense.in_features))
            .expect("pooled maps are contiguous");
        let dropped = self.dropout.forward(&flat, rng);
        let logits = self.dense.forward(&dropped);
        let probs = softmax_rows(&logits);
        self.cache_probs = Some(probs.clone());
        Ok(probs)
    }

    pub fn backward(&mut self, grad_probs: &Array2<F>) {
        let probs = self
            .cache_probs
            .take()
            .expect("backward without forward_train");
        let g = softmax_rows_backward(&probs, grad_probs);
        let g = self.dense.backward(&g);
        let g = self.dropout.backward(&g);
        let b = g.dim().0;
        let (c, h, w) = self.flat_dim;
        let mut g4 = g
            .into_shape_with_order((b, c, h, w))
            .expect("flattened gradient is contiguous");
        for i in (0..4).rev() {
            g4 = self.pools[i].backward(&g4);
            g4 = self.acts[i].backward(&g4);
            g4 = self.convs[i].backward(&g4);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.dense.weight);
        out.push(&mut self.dense.bias);
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(String, StateTensor<'_, F>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            visit_conv(c, &format!("conv{i}"), f);
        }
        f(
            "dense.weight".into(),
            StateTensor::Value(&mut self.dense.weight.value),
        );
        f(
            "dense.bias".into(),
            StateTensor::Value(&mut self.dense.bias.value),
        );
    }
}
