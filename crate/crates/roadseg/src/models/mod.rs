//! Model family: three residual U-Net variants and the sliding-window
//! baseline CNN.

pub mod blocks;
pub mod sliding;
pub mod unet;

pub use blocks::{
    dilated_bottleneck_apply, residual_block_apply, DilatedBottleneck, ResidualBlock,
};
pub use sliding::SlidingCnn;
pub use unet::{StateTensor, Unet};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Element, Param};

/// Default dilation rates of the parallel bottleneck branches.
pub const DEFAULT_DILATIONS: [usize; 4] = [1, 2, 4, 8];

/// Default context window side for the sliding-window classifier
/// (16-pixel patch plus 24 pixels of mirrored context on each side).
pub const DEFAULT_WINDOW_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "unet-32")]
    Unet32,
    #[serde(rename = "unet-64")]
    Unet64,
    #[serde(rename = "unet-dilated")]
    UnetDilated,
    #[serde(rename = "sliding-window")]
    SlidingWindow,
}

pub const VARIANT_NAMES: [&str; 4] = ["unet-32", "unet-64", "unet-dilated", "sliding-window"];

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Unet32 => "unet-32",
            Variant::Unet64 => "unet-64",
            Variant::UnetDilated => "unet-dilated",
            Variant::SlidingWindow => "sliding-window",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet-32" => Ok(Variant::Unet32),
            "unet-64" => Ok(Variant::Unet64),
            "unet-dilated" => Ok(Variant::UnetDilated),
            "sliding-window" => Ok(Variant::SlidingWindow),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant `{other}`; valid names: {}",
                VARIANT_NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BottleneckKind {
    Plain,
    Dilated,
}

/// Architecture description; the canonical settings for each variant come
/// from [`ModelSpec::for_variant`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub first_layer_channels: usize,
    pub depth: usize,
    pub bottleneck: BottleneckKind,
    pub dropout_after_concat: f64,
    pub dilations: Vec<usize>,
    pub window_size: usize,
}

impl ModelSpec {
    pub fn for_variant(variant: Variant) -> Self {
        let (flc, bottleneck) = match variant {
            Variant::Unet32 => (32, BottleneckKind::Plain),
            Variant::Unet64 => (64, BottleneckKind::Plain),
            Variant::UnetDilated => (32, BottleneckKind::Dilated),
            Variant::SlidingWindow => (32, BottleneckKind::Plain),
        };
        ModelSpec {
            variant,
            first_layer_channels: flc,
            depth: 4,
            bottleneck,
            dropout_after_concat: 0.2,
            dilations: DEFAULT_DILATIONS.to_vec(),
            window_size: DEFAULT_WINDOW_SIZE,
        }
    }

    pub fn is_unet(&self) -> bool {
        !matches!(self.variant, Variant::SlidingWindow)
    }
}

/// Build one of the U-Net variants, seeded for reproducible initialization.
pub fn build_unet<F: Element>(spec: &ModelSpec, seed: u64) -> Result<Unet<F>> {
    if !spec.is_unet() {
        return Err(Error::InvalidConfig(format!(
            "`{}` is not a U-Net variant",
            spec.variant
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Unet::new(spec, &mut rng)
}

/// Build the sliding-window window classifier.
pub fn build_sliding_window_cnn<F: Element>(window_size: usize, seed: u64) -> Result<SlidingCnn<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SlidingCnn::new(window_size, &mut rng)
}

/// Either network behind one training/checkpoint surface.
pub enum Model<F: Element> {
    Unet(Unet<F>),
    Sliding(SlidingCnn<F>),
}

impl<F: Element> Model<F> {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        match spec.variant {
            Variant::SlidingWindow => Ok(Model::Sliding(build_sliding_window_cnn(
                spec.window_size,
                seed,
            )?)),
            _ => Ok(Model::Unet(build_unet(spec, seed)?)),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Unet(u) => u.spec.clone(),
            Model::Sliding(s) => {
                let mut spec = ModelSpec::for_variant(Variant::SlidingWindow);
                spec.window_size = s.window_size;
                spec
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        match self {
            Model::Unet(u) => u.params_mut(),
            Model::Sliding(s) => s.params_mut(),
        }
    }

    pub fn visit_state(&mut self, f: &mut dyn FnMut(String, StateTensor<'_, F>)) {
        match self {
            Model::Unet(u) => u.visit_state(f),
            Model::Sliding(s) => s.visit_state(f),
        }
    }
}

/// A 2-class per-pixel probability map, stored `[class, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub data: Array3<f32>,
}

impl ProbabilityMap {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().0 != 2 {
            return Err(Error::InvalidInput(format!(
                "probability map needs 2 classes, got {}",
                data.dim().0
            )));
        }
        let map = ProbabilityMap { data };
        map.check_normalized(1e-5)?;
        Ok(map)
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Road-class probabilities as a 2-D map.
    pub fn road(&self) -> Array2<f32> {
        self.data.index_axis(Axis(0), 1).to_owned()
    }

    pub fn road_f64(&self) -> Array2<f64> {
        self.data.index_axis(Axis(0), 1).mapv(f64::from)
    }

    pub fn check_normalized(&self, tol: f32) -> Result<()> {
        for pix in self.data.lanes(Axis(0)) {
            let s = pix[0] + pix[1];
            if !s.is_finite() || (s - 1.0).abs() > tol {
                return Err(Error::InvalidInput(format!(
                    "class probabilities sum to {s}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Run a batch through a U-Net in eval mode (dropout off, frozen
/// normalization statistics).
pub fn forward<F: Element>(model: &Unet<F>, batch: &Array4<F>) -> Result<Array4<F>> {
    model.infer(batch)
}
