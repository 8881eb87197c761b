//! Residual U-Net with four pooling stages, skip concatenations, decoder
//! dropout, and a 1x1-conv softmax head. The bottleneck is either a plain
//! residual block (channel count doubles once more) or a parallel dilated
//! stack (channel count preserved).

use ndarray::{s, Array4};
use rand_chacha::ChaCha8Rng;

use super::blocks::{DilatedBottleneck, ResidualBlock};
use super::{BottleneckKind, ModelSpec};
use crate::error::{Error, Result};
use crate::nn::{
    softmax_channels, softmax_channels_backward, Conv2d, ConvTranspose2x2, Dropout, Element,
    MaxPool2, Param,
};

pub enum Bottleneck<F: Element> {
    Plain(ResidualBlock<F>),
    Dilated(DilatedBottleneck<F>),
}

/// Channel concatenation into a standard-layout array (the conv lowering
/// requires contiguous per-sample views).
fn concat_channels<F: Element>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    let (ba, ca, h, w) = a.dim();
    let (bb, cb, hb, wb) = b.dim();
    assert_eq!((ba, h, w), (bb, hb, wb), "concat shapes disagree");
    let mut out = Array4::zeros((ba, ca + cb, h, w));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

pub struct Unet<F: Element> {
    pub spec: ModelSpec,
    enc: Vec<ResidualBlock<F>>,
    pools: Vec<MaxPool2<F>>,
    pub bottleneck: Bottleneck<F>,
    ups: Vec<ConvTranspose2x2<F>>,
    drops: Vec<Dropout<F>>,
    dec: Vec<ResidualBlock<F>>,
    head: Conv2d<F>,
    cache_probs: Option<Array4<F>>,
}

impl<F: Element> Unet<F> {
    pub fn new(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.first_layer_channels == 0 || spec.depth == 0 {
            return Err(Error::InvalidConfig(
                "first_layer_channels and depth must be positive".into(),
            ));
        }
        let depth = spec.depth;
        let widths: Vec<usize> = (0..depth)
            .map(|i| spec.first_layer_channels << i)
            .collect();

        let mut enc = Vec::with_capacity(depth);
        for i in 0..depth {
            let in_c = if i == 0 { 3 } else { widths[i - 1] };
            enc.push(ResidualBlock::new(in_c, widths[i], rng));
        }
        let pools = (0..depth).map(|_| MaxPool2::new()).collect();

        let deepest = widths[depth - 1];
        let (bottleneck, bott_out) = match spec.bottleneck {
            BottleneckKind::Plain => (
                Bottleneck::Plain(ResidualBlock::new(deepest, deepest * 2, rng)),
                deepest * 2,
            ),
            BottleneckKind::Dilated => (
                Bottleneck::Dilated(DilatedBottleneck::new(deepest, &spec.dilations, rng)?),
                deepest,
            ),
        };

        let mut ups = Vec::with_capacity(depth);
        let mut drops = Vec::with_capacity(depth);
        let mut dec = Vec::with_capacity(depth);
        for i in 0..depth {
            let up_in = if i == depth - 1 { bott_out } else { widths[i + 1] };
            ups.push(ConvTranspose2x2::new(up_in, widths[i], rng));
            drops.push(Dropout::new(spec.dropout_after_concat));
            dec.push(ResidualBlock::new(2 * widths[i], widths[i], rng));
        }

        let head = Conv2d::new(widths[0], 2, 1, 1, rng);
        Ok(Unet {
            spec: spec.clone(),
            enc,
            pools,
            bottleneck,
            ups,
            drops,
            dec,
            head,
            cache_probs: None,
        })
    }

    /// Encoder stage widths (`first_layer_channels * 2^i`).
    pub fn encoder_widths(&self) -> Vec<usize> {
        self.enc.iter().map(|b| b.out_channels).collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        match &self.bottleneck {
            Bottleneck::Plain(b) => b.out_channels,
            Bottleneck::Dilated(b) => b.channels,
        }
    }

    fn divisor(&self) -> usize {
        1 << self.spec.depth
    }

    pub fn validate_input(&self, x: &Array4<F>) -> Result<()> {
        let (_b, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::InvalidInput(format!(
                "expected 3 input channels, got {c}"
            )));
        }
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::InvalidInput(format!(
                "input sides must be divisible by {d}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Eval-mode forward: per-pixel class probabilities, no state mutation.
    pub fn infer(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.validate_input(x)?;
        let depth = self.spec.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut cur = x.as_standard_layout().into_owned();
        for i in 0..depth {
            let s = self.enc[i].infer(&cur);
            cur = self.pools[i].infer(&s);
            skips.push(s);
        }
        cur = match &self.bottleneck {
            Bottleneck::Plain(b) => b.infer(&cur),
            Bottleneck::Dilated(b) => b.infer(&cur),
        };
        for i in (0..depth).rev() {
            let up = self.ups[i].infer(&cur);
            let cat = concat_channels(&up, &skips[i]);
            cur = self.dec[i].infer(&cat);
        }
        let logits = self.head.infer(&cur);
        Ok(softmax_channels(&logits))
    }

    /// Train-mode forward: batch statistics, active dropout, caches for
    /// backward.
    pub fn forward_train(&mut self, x: &Array4<F>, rng: &mut ChaCha8Rng) -> Result<Array4<F>> {
        self.validate_input(x)?;
        let depth = self.spec.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut cur = x.as_standard_layout().into_owned();
        for i in 0..depth {
            let s = self.enc[i].forward(&cur);
            cur = self.pools[i].forward(&s);
            skips.push(s);
        }
        cur = match &mut self.bottleneck {
            Bottleneck::Plain(b) => b.forward(&cur),
            Bottleneck::Dilated(b) => b.forward(&cur),
        };
        for i in (0..depth).rev() {
            let up = self.ups[i].forward(&cur);
            let cat = concat_channels(&up, &skips[i]);
            let dropped = self.drops[i].forward(&cat, rng);
            cur = self.dec[i].forward(&dropped);
        }
        let logits = self.head.forward(&cur);
        let probs = softmax_channels(&logits);
        self.cache_probs = Some(probs.clone());
        Ok(probs)
    }

    /// Backpropagate from the gradient of the loss w.r.t. the probability
    /// map produced by the last `forward_train`.
    pub fn backward(&mut self, grad_probs: &Array4<F>) {
        let probs = self
            .cache_probs
            .take()
            .expect("backward without forward_train");
        let depth = self.spec.depth;
        let mut g = softmax_channels_backward(&probs, grad_probs);
        g = self.head.backward(&g);

        // Decoder stages unwind from the highest resolution back down,
        // collecting the gradient flowing into each encoder skip.
        let mut skip_grads: Vec<Option<Array4<F>>> = (0..depth).map(|_| None).collect();
        for i in 0..depth {
            g = self.dec[i].backward(&g);
            g = self.drops[i].backward(&g);
            let up_c = self.ups[i].out_channels;
            let g_up = g.slice(s![.., ..up_c, .., ..]).to_owned();
            skip_grads[i] = Some(g.slice(s![.., up_c.., .., ..]).to_owned());
            g = self.ups[i].backward(&g_up);
        }

        g = match &mut self.bottleneck {
            Bottleneck::Plain(b) => b.backward(&g),
            Bottleneck::Dilated(b) => b.backward(&g),
        };

        for i in (0..depth).rev() {
            g = self.pools[i].backward(&g);
            g = g + skip_grads[i].take().expect("collected above");
            g = self.enc[i].backward(&g);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        for b in &mut self.enc {
            out.extend(b.params_mut());
        }
        match &mut self.bottleneck {
            Bottleneck::Plain(b) => out.extend(b.params_mut()),
            Bottleneck::Dilated(b) => out.extend(b.params_mut()),
        }
        for u in &mut self.ups {
            out.push(&mut u.weight);
            out.push(&mut u.bias);
        }
        for b in &mut self.dec {
            out.extend(b.params_mut());
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }

    /// Walk every persistable tensor: parameters and normalization running
    /// statistics, in a stable order with stable names.
    pub fn visit_state(&mut self, f: &mut dyn FnMut(String, StateTensor<'_, F>)) {
        let depth = self.spec.depth;
        for i in 0..depth {
            visit_block(&mut self.enc[i], &format!("enc{i}"), f);
        }
        match &mut self.bottleneck {
            Bottleneck::Plain(b) => visit_block(b, "bottleneck", f),
            Bottleneck::Dilated(b) => {
                for (k, branch) in b.branches.iter_mut().enumerate() {
                    visit_conv(branch, &format!("bottleneck.branch{k}"), f);
                }
            }
        }
        for i in 0..depth {
            let u = &mut self.ups[i];
            f(format!("up{i}.weight"), StateTensor::Value(&mut u.weight.value));
            f(format!("up{i}.bias"), StateTensor::Value(&mut u.bias.value));
        }
        for i in 0..depth {
            visit_block(&mut self.dec[i], &format!("dec{i}"), f);
        }
        f("head.weight".into(), StateTensor::Value(&mut self.head.weight.value));
        f("head.bias".into(), StateTensor::Value(&mut self.head.bias.value));
    }
}

/// A persistable tensor slot: either a parameter value or a 1-D running
/// statistic.
pub enum StateTensor<'a, F: Element> {
    Value(&'a mut ndarray::ArrayD<F>),
    Stat(&'a mut ndarray::Array1<F>),
}

pub(crate) fn visit_conv<'a, F: Element>(
    conv: &'a mut Conv2d<F>,
    prefix: &str,
    f: &mut dyn FnMut(String, StateTensor<'_, F>),
) {
    f(format!("{prefix}.weight"), StateTensor::Value(&mut conv.weight.value));
    f(format!("{prefix}.bias"), StateTensor::Value(&mut conv.bias.value));
}

pub(crate) fn visit_bn<'a, F: Element>(
    bn: &'a mut crate::nn::BatchNorm2d<F>,
    prefix: &str,
    f: &mut dyn FnMut(String, StateTensor<'_, F>),
) {
    f(format!("{prefix}.gamma"), StateTensor::Value(&mut bn.gamma.value));
    f(format!("{prefix}.beta"), StateTensor::Value(&mut bn.beta.value));
    f(
        format!("{prefix}.running_mean"),
        StateTensor::Stat(&mut bn.running_mean),
    );
    f(
        format!("{prefix}.running_var"),
        StateTensor::Stat(&mut bn.running_var),
    );
}

pub(crate) fn visit_block<'a, F: Element>(
    block: &'a mut ResidualBlock<F>,
    prefix: &str,
    f: &mut dyn FnMut(String, StateTensor<'_, F>),
) {
    visit_conv(&mut block.conv1, &format!("{prefix}.conv1"), f);
    visit_bn(&mut block.bn1, &format!("{prefix}.bn1"), f);
    visit_conv(&mut block.conv2, &format!("{prefix}.conv2"), f);
    visit_bn(&mut block.bn2, &format!("{prefix}.bn2"), f);
    visit_conv(&mut block.shortcut, &format!("{prefix}.shortcut"), f);
}
