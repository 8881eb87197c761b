//! Fully connected layer for the window classifier head.

use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::init::{he_normal, zeros};
use super::{Element, Param};

pub struct Dense<F: Element> {
    pub weight: Param<F>, // [out, in]
    pub bias: Param<F>,   // [out]
    pub in_features: usize,
    pub out_features: usize,
    cache_x: Option<Array2<F>>,
}

impl<F: Element> Dense<F> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            weight: Param::new(he_normal(&[out_features, in_features], in_features, rng)),
            bias: Param::new(zeros(&[out_features])),
            in_features,
            out_features,
            cache_x: None,
        }
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, F> {
        self.weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    }

    pub fn infer(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight2().t());
        let bias = self.bias.value.as_slice().unwrap();
        for mut row in y.axis_iter_mut(Axis(0)) {
            for (v, b) in row.iter_mut().zip(bias.iter()) {
                *v += *b;
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Array2<F>) -> Array2<F> {
        let y = self.infer(x);
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, g: &Array2<F>) -> Array2<F> {
        let x = self.cache_x.take().expect("dense backward without forward");
        let gw = g.t().dot(&x); // [out, in]
        let mut wgrad = self
            .weight
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        wgrad += &gw;
        let gb = g.sum_axis(Axis(0));
        let mut bgrad = self
            .bias
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        bgrad += &gb;
        g.dot(&self.weight2())
    }
}
