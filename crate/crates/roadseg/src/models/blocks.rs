//! Building blocks of the U-Net variants: residual convolution blocks and
//! the parallel dilated bottleneck.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Element, Elu, Param};

/// Residual convolution block: `out = f(h(x) + F(x))` where `F` is
/// conv -> norm -> activation -> conv -> norm, `h` is a 1x1 projection of
/// the input, and `f` is the post-addition activation. The identity mapping
/// is added before the final nonlinearity.
pub struct ResidualBlock<F: Element> {
    pub conv1: Conv2d<F>,
    pub bn1: BatchNorm2d<F>,
    act1: Elu<F>,
    pub conv2: Conv2d<F>,
    pub bn2: BatchNorm2d<F>,
    pub shortcut: Conv2d<F>,
    act_out: Elu<F>,
    /// Post-addition activation; tests may disable it to probe `h(x) + F(x)`.
    pub final_activation: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl<F: Element> ResidualBlock<F> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(in_channels, out_channels, 3, 1, rng),
            bn1: BatchNorm2d::new(out_channels),
            act1: Elu::new(),
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, rng),
            bn2: BatchNorm2d::new(out_channels),
            shortcut: Conv2d::new(in_channels, out_channels, 1, 1, rng),
            act_out: Elu::new(),
            final_activation: true,
            in_channels,
            out_channels,
        }
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        let t = self.conv1.infer(x);
        let t = self.bn1.infer(&t);
        let t = self.act1.infer(&t);
        let t = self.conv2.infer(&t);
        let t = self.bn2.infer(&t);
        let y = self.shortcut.infer(x) + t;
        if self.final_activation {
            self.act_out.infer(&y)
        } else {
            y
        }
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let t = self.conv1.forward(x);
        let t = self.bn1.forward(&t);
        let t = self.act1.forward(&t);
        let t = self.conv2.forward(&t);
        let t = self.bn2.forward(&t);
        let y = self.shortcut.forward(x) + t;
        if self.final_activation {
            self.act_out.forward(&y)
        } else {
            y
        }
    }

    pub fn backward(&mut self, g: &Array4<F>) -> Array4<F> {
        let g = if self.final_activation {
            self.act_out.backward(g)
        } else {
            g.clone()
        };
        let gx_short = self.shortcut.backward(&g);
        let gt = self.bn2.backward(&g);
        let gt = self.conv2.backward(&gt);
        let gt = self.act1.backward(&gt);
        let gt = self.bn1.backward(&gt);
        let gx_main = self.conv1.backward(&gt);
        gx_short + gx_main
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.shortcut.weight,
            &mut self.shortcut.bias,
        ]
    }
}

/// Apply a block, checking the channel contract.
pub fn residual_block_apply<F: Element>(
    block: &ResidualBlock<F>,
    x: &Array4<F>,
) -> Result<Array4<F>> {
    if x.dim().1 != block.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "residual block expects {} channels, got {}",
            block.in_channels,
            x.dim().1
        )));
    }
    Ok(block.infer(x))
}

/// Parallel dilated convolutions over the bottleneck input; the branch
/// outputs are summed elementwise and fed to the decoder.
pub struct DilatedBottleneck<F: Element> {
    pub branches: Vec<Conv2d<F>>,
    pub channels: usize,
    pub dilations: Vec<usize>,
}

impl<F: Element> DilatedBottleneck<F> {
    pub fn new(channels: usize, dilations: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if dilations.is_empty() {
            return Err(Error::InvalidConfig(
                "dilated bottleneck needs at least one branch".into(),
            ));
        }
        let branches = dilations
            .iter()
            .map(|&d| Conv2d::new(channels, channels, 3, d, rng))
            .collect();
        Ok(DilatedBottleneck {
            branches,
            channels,
            dilations: dilations.to_vec(),
        })
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        let mut sum = self.branches[0].infer(x);
        for b in &self.branches[1..] {
            sum = sum + b.infer(x);
        }
        sum
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let mut out: Option<Array4<F>> = None;
        for b in &mut self.branches {
            let y = b.forward(x);
            out = Some(match out {
                None => y,
                Some(acc) => acc + y,
            });
        }
        out.expect("at least one branch")
    }

    pub fn backward(&mut self, g: &Array4<F>) -> Array4<F> {
        let mut gx: Option<Array4<F>> = None;
        for b in &mut self.branches {
            let gb = b.backward(g);
            gx = Some(match gx {
                None => gb,
                Some(acc) => acc + gb,
            });
        }
        gx.expect("at least one branch")
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.branches
            .iter_mut()
            .flat_map(|b| vec![&mut b.weight, &mut b.bias])
            .collect()
    }
}

/// Apply the bottleneck, checking the channel contract.
pub fn dilated_bottleneck_apply<F: Element>(
    bottleneck: &DilatedBottleneck<F>,
    x: &Array4<F>,
) -> Result<Array4<F>> {
    if x.dim().1 != bottleneck.channels {
        return Err(Error::ShapeMismatch(format!(
            "bottleneck expects {} channels, got {}",
            bottleneck.channels,
            x.dim().1
        )));
    }
    Ok(bottleneck.infer(x))
}
