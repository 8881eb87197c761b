//! Adaptive-moment gradient descent with decay coefficients (0.9, 0.999).

use ndarray::ArrayD;

use super::{Element, Param};

pub struct Adam<F: Element> {
    beta1: F,
    beta2: F,
    eps: F,
    step_count: u64,
    moments: Vec<(ArrayD<F>, ArrayD<F>)>,
}

impl<F: Element> Adam<F> {
    pub fn new() -> Self {
        Adam {
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            step_count: 0,
            moments: Vec::new(),
        }
    }

    /// One update over `params` (ordering must be stable across calls).
    pub fn step(&mut self, params: &mut [&mut Param<F>], lr: F) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| {
                    (
                        ArrayD::zeros(p.value.raw_dim()),
                        ArrayD::zeros(p.value.raw_dim()),
                    )
                })
                .collect();
        }
        assert_eq!(
            self.moments.len(),
            params.len(),
            "optimizer state does not match parameter list"
        );
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);

        for (param, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let b1 = self.beta1;
            let b2 = self.beta2;
            let eps = self.eps;
            ndarray::Zip::from(&mut param.value)
                .and(&param.grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m_i, v_i| {
                    *m_i = b1 * *m_i + (F::one() - b1) * g;
                    *v_i = b2 * *v_i + (F::one() - b2) * g * g;
                    let m_hat = *m_i / bc1;
                    let v_hat = *v_i / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

impl<F: Element> Default for Adam<F> {
    fn default() -> Self {
        Self::new()
    }
}
