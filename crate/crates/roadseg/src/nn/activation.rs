//! Activations and softmax heads.

use ndarray::{Array2, Array4, Axis};

use super::Element;

/// Exponential linear unit, alpha = 1.
pub struct Elu<F: Element> {
    cache_y: Option<Array4<F>>,
}

impl<F: Element> Elu<F> {
    pub fn new() -> Self {
        Elu { cache_y: None }
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        x.mapv(elu_scalar)
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let y = self.infer(x);
        self.cache_y = Some(y.clone());
        y
    }

    pub fn backward(&mut self, g: &Array4<F>) -> Array4<F> {
        let y = self.cache_y.take().expect("elu backward without forward");
        // For x < 0, dy/dx = exp(x) = y + 1.
        let mut gx = g.clone();
        gx.zip_mut_with(&y, |gv, &yv| {
            if yv <= F::zero() {
                *gv *= yv + F::one();
            }
        });
        gx
    }
}

impl<F: Element> Default for Elu<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn elu_scalar<F: Element>(v: F) -> F {
    if v > F::zero() {
        v
    } else {
        v.exp() - F::one()
    }
}

/// Leaky rectifier with fixed negative slope.
pub struct LeakyRelu<F: Element> {
    pub alpha: F,
    cache_y: Option<Array4<F>>,
}

impl<F: Element> LeakyRelu<F> {
    pub fn new(alpha: f64) -> Self {
        LeakyRelu {
            alpha: F::from_f64(alpha),
            cache_y: None,
        }
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        let a = self.alpha;
        x.mapv(|v| if v > F::zero() { v } else { v * a })
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let y = self.infer(x);
        self.cache_y = Some(y.clone());
        y
    }

    pub fn backward(&mut self, g: &Array4<F>) -> Array4<F> {
        let y = self
            .cache_y
            .take()
            .expect("leaky relu backward without forward");
        let a = self.alpha;
        let mut gx = g.clone();
        // The slope is recoverable from the output sign (alpha > 0).
        gx.zip_mut_with(&y, |gv, &yv| {
            if yv <= F::zero() {
                *gv *= a;
            }
        });
        gx
    }
}

/// Per-pixel softmax over the channel axis of a `[b, classes, h, w]` map.
pub fn softmax_channels<F: Element>(x: &Array4<F>) -> Array4<F> {
    let mut y = x.clone();
    let classes = x.dim().1;
    for mut pix in y.lanes_mut(Axis(1)) {
        let mut max = pix[0];
        for i in 1..classes {
            if pix[i] > max {
                max = pix[i];
            }
        }
        let mut sum = F::zero();
        for i in 0..classes {
            let e = (pix[i] - max).exp();
            pix[i] = e;
            sum += e;
        }
        for i in 0..classes {
            pix[i] /= sum;
        }
    }
    y
}

/// Gradient of `softmax_channels` given its output `y` and upstream `g`.
pub fn softmax_channels_backward<F: Element>(y: &Array4<F>, g: &Array4<F>) -> Array4<F> {
    let classes = y.dim().1;
    let mut gx = g.clone();
    for (mut gx_pix, y_pix) in gx.lanes_mut(Axis(1)).into_iter().zip(y.lanes(Axis(1))) {
        let mut dot = F::zero();
        for i in 0..classes {
            dot += gx_pix[i] * y_pix[i];
        }
        for i in 0..classes {
            gx_pix[i] = y_pix[i] * (gx_pix[i] - dot);
        }
    }
    gx
}

/// Row-wise softmax for `[b, classes]` logits.
pub fn softmax_rows<F: Element>(x: &Array2<F>) -> Array2<F> {
    let mut y = x.clone();
    for mut row in y.axis_iter_mut(Axis(0)) {
        let max = row.fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

/// Gradient of `softmax_rows` given its output `y` and upstream `g`.
pub fn softmax_rows_backward<F: Element>(y: &Array2<F>, g: &Array2<F>) -> Array2<F> {
    let mut gx = g.clone();
    for (mut gx_row, y_row) in gx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
        let dot = gx_row
            .iter()
            .zip(y_row.iter())
            .fold(F::zero(), |acc, (&gv, &yv)| acc + gv * yv);
        for (gv, &yv) in gx_row.iter_mut().zip(y_row.iter()) {
            *gv = yv * (*gv - dot);
        }
    }
    gx
}
