//! Per-channel batch normalization, placed after each convolution and before
//! the nonlinearity.

use ndarray::{Array1, Array4, Axis};

use super::init::{ones, zeros};
use super::{Element, Param};

pub struct BatchNorm2d<F: Element> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub channels: usize,
    momentum: F,
    eps: F,
    cache: Option<BnCache<F>>,
}

struct BnCache<F: Element> {
    x_hat: Array4<F>,
    inv_std: Array1<F>,
}

impl<F: Element> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ones(&[channels])),
            beta: Param::new(zeros(&[channels])),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, F::one()),
            channels,
            momentum: F::from_f64(0.1),
            eps: F::from_f64(1e-5),
            cache: None,
        }
    }

    /// Eval path: normalize with the running statistics.
    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        let mut y = x.clone();
        for (c, mut chan) in y.axis_iter_mut(Axis(1)).enumerate() {
            let mean = self.running_mean[c];
            let inv_std = F::one() / (self.running_var[c] + self.eps).sqrt();
            let gamma = self.gamma.value[c];
            let beta = self.beta.value[c];
            chan.mapv_inplace(|v| (v - mean) * inv_std * gamma + beta);
        }
        y
    }

    /// Train path: normalize with batch statistics and update running stats.
    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let n = F::from_f64((b * h * w) as f64);
        let mut x_hat = x.clone();
        let mut inv_std = Array1::zeros(c);
        let mut y = Array4::zeros(x.raw_dim());

        for ci in 0..c {
            let chan = x.index_axis(Axis(1), ci);
            let mean = chan.sum() / n;
            let var = chan.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = F::one() / (var + self.eps).sqrt();
            inv_std[ci] = is;

            let mut xh = x_hat.index_axis_mut(Axis(1), ci);
            xh.mapv_inplace(|v| (v - mean) * is);
            let gamma = self.gamma.value[ci];
            let beta = self.beta.value[ci];
            let mut yc = y.index_axis_mut(Axis(1), ci);
            yc.assign(&xh);
            yc.mapv_inplace(|v| v * gamma + beta);

            let m = self.momentum;
            self.running_mean[ci] = (F::one() - m) * self.running_mean[ci] + m * mean;
            self.running_var[ci] = (F::one() - m) * self.running_var[ci] + m * var;
        }

        self.cache = Some(BnCache { x_hat, inv_std });
        y
    }

    pub fn backward(&mut self, g: &Array4<F>) -> Array4<F> {
        let BnCache { x_hat, inv_std } =
            self.cache.take().expect("batch norm backward without forward");
        let (b, c, h, w) = g.dim();
        let n = F::from_f64((b * h * w) as f64);
        let mut gx = Array4::zeros(g.raw_dim());

        for ci in 0..c {
            let g_c = g.index_axis(Axis(1), ci);
            let xh_c = x_hat.index_axis(Axis(1), ci);
            let sum_g = g_c.sum();
            let sum_g_xh = g_c
                .iter()
                .zip(xh_c.iter())
                .fold(F::zero(), |acc, (&gv, &xv)| acc + gv * xv);

            self.beta.grad[ci] += sum_g;
            self.gamma.grad[ci] += sum_g_xh;

            let scale = self.gamma.value[ci] * inv_std[ci];
            let mean_g = sum_g / n;
            let mean_g_xh = sum_g_xh / n;
            let mut gx_c = gx.index_axis_mut(Axis(1), ci);
            for ((gx_v, &g_v), &xh_v) in gx_c.iter_mut().zip(g_c.iter()).zip(xh_c.iter()) {
                *gx_v = scale * (g_v - mean_g - xh_v * mean_g_xh);
            }
        }
        gx
    }
}
