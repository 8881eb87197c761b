//! Smoothed dice loss over a batch, with its analytic gradient.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use super::Element;

/// Dice loss of the road channel (class 1) pooled over the whole batch:
/// `1 - (2 * sum(p * t) + eps) / (sum(p) + sum(t) + eps)`.
///
/// Returns the loss and its gradient with respect to the class-probability
/// map (the background channel receives zero gradient; the softmax backward
/// couples the two).
pub fn dice_loss_batch<F: Element>(
    probs: &Array4<F>,
    truth: &Array3<F>,
    eps: F,
) -> (F, Array4<F>) {
    let (b, classes, h, w) = probs.dim();
    assert_eq!(classes, 2, "dice loss expects a 2-class map");
    assert_eq!(truth.dim(), (b, h, w), "dice loss shape mismatch");

    let road = probs.index_axis(Axis(1), 1);
    let mut inter = F::zero();
    let mut sum_p = F::zero();
    let mut sum_t = F::zero();
    for (&p, &t) in road.iter().zip(truth.iter()) {
        inter += p * t;
        sum_p += p;
        sum_t += t;
    }
    let num = F::from_f64(2.0) * inter + eps;
    let den = sum_p + sum_t + eps;
    let loss = F::one() - num / den;

    // d/dp_i [1 - N/D] = (N - 2 t_i D) / D^2
    let den2 = den * den;
    let mut grad = Array4::zeros(probs.raw_dim());
    {
        let mut g_road = grad.index_axis_mut(Axis(1), 1);
        for (gv, &t) in g_road.iter_mut().zip(truth.iter()) {
            *gv = (num - F::from_f64(2.0) * t * den) / den2;
        }
    }
    (loss, grad)
}

/// Dice loss over per-window `[batch, 2]` probability rows against binary
/// window labels, for the window classifier.
pub fn dice_loss_rows<F: Element>(
    probs: &Array2<F>,
    truth: &Array1<F>,
    eps: F,
) -> (F, Array2<F>) {
    let (b, classes) = probs.dim();
    assert_eq!(classes, 2, "dice loss expects 2-class rows");
    assert_eq!(truth.len(), b, "dice loss shape mismatch");

    let road = probs.index_axis(Axis(1), 1);
    let mut inter = F::zero();
    let mut sum_p = F::zero();
    let mut sum_t = F::zero();
    for (&p, &t) in road.iter().zip(truth.iter()) {
        inter += p * t;
        sum_p += p;
        sum_t += t;
    }
    let num = F::from_f64(2.0) * inter + eps;
    let den = sum_p + sum_t + eps;
    let loss = F::one() - num / den;

    let den2 = den * den;
    let mut grad = Array2::zeros(probs.raw_dim());
    {
        let mut g_road = grad.index_axis_mut(Axis(1), 1);
        for (gv, &t) in g_road.iter_mut().zip(truth.iter()) {
            *gv = (num - F::from_f64(2.0) * t * den) / den2;
        }
    }
    (loss, grad)
}
