//! Minimal layer stack with hand-written backward passes.
//!
//! Every layer exposes three entry points: `infer` (pure, no caching, the
//! eval-mode path), `forward` (training mode, caches what backward needs),
//! and `backward` (consumes the cache, accumulates parameter gradients and
//! returns the input gradient). Containers own the wiring between layers.
//!
//! The stack is generic over [`Element`] so gradient checks can run in
//! `f64` while training runs in `f32`.

pub mod activation;
pub mod adam;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod norm;
pub mod pool;

pub use activation::{softmax_channels, softmax_channels_backward, softmax_rows, Elu, LeakyRelu};
pub use adam::Adam;
pub use conv::{Conv2d, ConvTranspose2x2};
pub use dense::Dense;
pub use dropout::Dropout;
pub use loss::{dice_loss_batch, dice_loss_rows};
pub use norm::BatchNorm2d;
pub use pool::MaxPool2;

use ndarray::{ArrayD, NdFloat};
use rand::Rng;

/// Scalar type the layer stack runs on.
pub trait Element: NdFloat + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// One standard-normal draw.
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// One uniform draw in `[0, 1)`.
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample::<f32, _>(rand_distr::StandardNormal)
    }
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f32>()
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    }
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f64>()
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F: Element> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Element> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}
