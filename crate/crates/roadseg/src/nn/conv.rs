//! Stride-1 same-padded convolution (with dilation) and the 2x2 stride-2
//! transpose convolution used for decoder upsampling.
//!
//! Convolutions lower onto matrix products through a row-tiled im2col so the
//! scratch buffer stays small; samples of a batch are processed in parallel
//! and gradient partials are reduced in index order to keep results
//! deterministic.

use ndarray::linalg::general_mat_mul;
use ndarray::{
    s, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut2, ArrayViewMut3, Axis, Ix4, Zip,
};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::init::{he_normal, zeros};
use super::{Element, Param};

/// Upper bound on im2col tile size (output positions per tile).
const TILE_ELEMS: usize = 8192;

pub struct Conv2d<F: Element> {
    pub weight: Param<F>, // [out_c, in_c, k, k]
    pub bias: Param<F>,   // [out_c]
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    cache_x: Option<Array4<F>>,
}

impl<F: Element> Conv2d<F> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "only odd kernels are supported");
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Param::new(he_normal(
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            )),
            bias: Param::new(zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            dilation,
            cache_x: None,
        }
    }

    fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    /// Weight viewed as the `[out_c, in_c*k*k]` matrix im2col multiplies by.
    fn weight_mat(&self) -> ArrayView2<'_, F> {
        let k = self.kernel;
        self.weight
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((self.out_channels, self.in_channels * k * k))
            .unwrap()
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let mut out = Array4::zeros((b, self.out_channels, h, w));
        let w_mat = self.weight_mat();
        let (k, dil, pad) = (self.kernel, self.dilation, self.pad());
        Zip::from(out.axis_iter_mut(Axis(0)))
            .and(x.axis_iter(Axis(0)))
            .par_for_each(|mut out_s, x_s| conv_sample(&x_s, &w_mat, &mut out_s, k, dil, pad));
        add_channel_bias(&mut out, self.bias.value.as_slice().unwrap());
        let _ = (b, h, w);
        out
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let y = self.infer(x);
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, g: &Array4<F>) -> Array4<F> {
        let x = self.cache_x.take().expect("conv backward without forward");
        let b = x.dim().0;
        let (k, dil, pad) = (self.kernel, self.dilation, self.pad());
        let ckk = self.in_channels * k * k;
        let w_mat = self.weight_mat().to_owned();

        // Input gradient: col2im of W^T * g, parallel over the batch.
        let mut gx = Array4::zeros(x.raw_dim());
        Zip::from(gx.axis_iter_mut(Axis(0)))
            .and(g.axis_iter(Axis(0)))
            .par_for_each(|mut gx_s, g_s| {
                conv_sample_input_grad(&g_s, &w_mat.view(), &mut gx_s, k, dil, pad)
            });

        // Weight gradient: per-sample partials, reduced in index order.
        let partials: Vec<Array2<F>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let x_s = x.index_axis(Axis(0), i);
                let g_s = g.index_axis(Axis(0), i);
                conv_sample_weight_grad(&x_s, &g_s, ckk, k, dil, pad)
            })
            .collect();
        let mut gw_mat = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((self.out_channels, ckk))
            .unwrap();
        for p in &partials {
            gw_mat += p;
        }

        let gb = self.bias.grad.as_slice_mut().unwrap();
        for (oc, gb_c) in gb.iter_mut().enumerate() {
            *gb_c += g.index_axis(Axis(1), oc).sum();
        }
        gx
    }
}

fn add_channel_bias<F: Element>(out: &mut Array4<F>, bias: &[F]) {
    for (mut chan, b) in out.axis_iter_mut(Axis(1)).zip(bias.iter()) {
        chan.mapv_inplace(|v| v + *b);
    }
}

fn tile_rows(h: usize, w: usize) -> usize {
    (TILE_ELEMS / w).clamp(1, h)
}

/// Fill one im2col tile covering output rows `[y0, y1)`.
///
/// `col` must be `[c*k*k, (y1 - y0) * w]` with contiguous rows. Out-of-image
/// taps are zero (zero padding inside convolutions).
fn fill_col_tile<F: Element>(
    x: &ArrayView3<F>,
    col: &mut ArrayViewMut2<F>,
    y0: usize,
    y1: usize,
    k: usize,
    dil: usize,
    pad: usize,
) {
    let (c_in, h, w) = x.dim();
    for c in 0..c_in {
        let x_c = x.index_axis(Axis(0), c);
        for ki in 0..k {
            for kj in 0..k {
                let row_idx = (c * k + ki) * k + kj;
                let off = (kj * dil) as isize - pad as isize;
                let x_lo = (-off).max(0) as usize;
                let x_hi = ((w as isize - off).min(w as isize)).max(0) as usize;
                let mut col_row = col.row_mut(row_idx);
                let dst = col_row.as_slice_mut().expect("col rows are contiguous");
                for y in y0..y1 {
                    let seg = &mut dst[(y - y0) * w..(y - y0) * w + w];
                    let sy = (y + ki * dil) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        seg.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    seg[..x_lo].iter_mut().for_each(|v| *v = F::zero());
                    seg[x_hi..].iter_mut().for_each(|v| *v = F::zero());
                    let src_row = x_c.row(sy as usize);
                    let src = src_row.to_slice().expect("image rows are contiguous");
                    seg[x_lo..x_hi].copy_from_slice(
                        &src[(x_lo as isize + off) as usize..(x_hi as isize + off) as usize],
                    );
                }
            }
        }
    }
}

/// Scatter-add one col tile back into the image (transpose of `fill_col_tile`).
fn add_col_tile<F: Element>(
    gx: &mut ArrayViewMut3<F>,
    col: &ArrayView2<F>,
    y0: usize,
    y1: usize,
    k: usize,
    dil: usize,
    pad: usize,
) {
    let (c_in, h, w) = gx.dim();
    for c in 0..c_in {
        let mut gx_c = gx.index_axis_mut(Axis(0), c);
        for ki in 0..k {
            for kj in 0..k {
                let row_idx = (c * k + ki) * k + kj;
                let off = (kj * dil) as isize - pad as isize;
                let x_lo = (-off).max(0) as usize;
                let x_hi = ((w as isize - off).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                let col_row = col.row(row_idx);
                let src_all = col_row.to_slice().expect("col rows are contiguous");
                for y in y0..y1 {
                    let sy = (y + ki * dil) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let seg = &src_all[(y - y0) * w..(y - y0) * w + w];
                    let mut dst_row = gx_c.row_mut(sy as usize);
                    let dst = dst_row.as_slice_mut().expect("rows are contiguous");
                    for xi in x_lo..x_hi {
                        let di = (xi as isize + off) as usize;
                        dst[di] += seg[xi];
                    }
                }
            }
        }
    }
}

fn conv_sample<F: Element>(
    x: &ArrayView3<F>,
    w_mat: &ArrayView2<F>,
    out: &mut ArrayViewMut3<F>,
    k: usize,
    dil: usize,
    pad: usize,
) {
    let (c_in, h, w) = x.dim();
    let oc = out.dim().0;
    let mut out_mat = out
        .view_mut()
        .into_shape_with_order((oc, h * w))
        .expect("conv output must be contiguous");

    if k == 1 {
        // 1x1 kernels are a plain matrix product; no lowering needed.
        let x_mat = x
            .view()
            .into_shape_with_order((c_in, h * w))
            .expect("conv input must be contiguous");
        general_mat_mul(F::one(), w_mat, &x_mat, F::zero(), &mut out_mat);
        return;
    }

    let rows = tile_rows(h, w);
    let mut col = Array2::<F>::zeros((c_in * k * k, rows * w));
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + rows).min(h);
        let n = (y1 - y0) * w;
        let mut col_view = col.slice_mut(s![.., ..n]);
        fill_col_tile(x, &mut col_view, y0, y1, k, dil, pad);
        let mut out_block = out_mat.slice_mut(s![.., y0 * w..y1 * w]);
        general_mat_mul(
            F::one(),
            w_mat,
            &col.slice(s![.., ..n]),
            F::zero(),
            &mut out_block,
        );
        y0 = y1;
    }
}

fn conv_sample_input_grad<F: Element>(
    g: &ArrayView3<F>,
    w_mat: &ArrayView2<F>,
    gx: &mut ArrayViewMut3<F>,
    k: usize,
    dil: usize,
    pad: usize,
) {
    let (c_in, h, w) = gx.dim();
    let oc = g.dim().0;
    let g_mat = g
        .view()
        .into_shape_with_order((oc, h * w))
        .expect("grad must be contiguous");

    if k == 1 {
        let mut gx_mat = gx.view_mut().into_shape_with_order((c_in, h * w)).unwrap();
        general_mat_mul(F::one(), &w_mat.t(), &g_mat, F::zero(), &mut gx_mat);
        return;
    }

    let rows = tile_rows(h, w);
    let mut col = Array2::<F>::zeros((c_in * k * k, rows * w));
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + rows).min(h);
        let n = (y1 - y0) * w;
        {
            let mut col_view = col.slice_mut(s![.., ..n]);
            let g_block = g_mat.slice(s![.., y0 * w..y1 * w]);
            general_mat_mul(F::one(), &w_mat.t(), &g_block, F::zero(), &mut col_view);
        }
        add_col_tile(gx, &col.slice(s![.., ..n]), y0, y1, k, dil, pad);
        y0 = y1;
    }
}

fn conv_sample_weight_grad<F: Element>(
    x: &ArrayView3<F>,
    g: &ArrayView3<F>,
    ckk: usize,
    k: usize,
    dil: usize,
    pad: usize,
) -> Array2<F> {
    let (c_in, h, w) = x.dim();
    let oc = g.dim().0;
    let g_mat = g
        .view()
        .into_shape_with_order((oc, h * w))
        .expect("grad must be contiguous");
    let mut gw = Array2::<F>::zeros((oc, ckk));

    if k == 1 {
        let x_mat = x.view().into_shape_with_order((c_in, h * w)).unwrap();
        general_mat_mul(F::one(), &g_mat, &x_mat.t(), F::zero(), &mut gw);
        return gw;
    }

    let rows = tile_rows(h, w);
    let mut col = Array2::<F>::zeros((ckk, rows * w));
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + rows).min(h);
        let n = (y1 - y0) * w;
        let mut col_view = col.slice_mut(s![.., ..n]);
        fill_col_tile(x, &mut col_view, y0, y1, k, dil, pad);
        let g_block = g_mat.slice(s![.., y0 * w..y1 * w]);
        general_mat_mul(F::one(), &g_block, &col.slice(s![.., ..n]).t(), F::one(), &mut gw);
        y0 = y1;
    }
    gw
}

/// 2x2-kernel stride-2 transpose convolution: doubles both spatial sides.
///
/// With stride equal to the kernel the output blocks do not overlap, so each
/// of the four kernel taps is an independent channel-mixing matrix product.
pub struct ConvTranspose2x2<F: Element> {
    pub weight: Param<F>, // [in_c, out_c, 2, 2]
    pub bias: Param<F>,   // [out_c]
    pub in_channels: usize,
    pub out_channels: usize,
    cache_x: Option<Array4<F>>,
}

impl<F: Element> ConvTranspose2x2<F> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvTranspose2x2 {
            weight: Param::new(he_normal(
                &[in_channels, out_channels, 2, 2],
                in_channels,
                rng,
            )),
            bias: Param::new(zeros(&[out_channels])),
            in_channels,
            out_channels,
            cache_x: None,
        }
    }

    /// Kernel tap `(di, dj)` as an `[out_c, in_c]` matrix.
    fn tap(&self, di: usize, dj: usize) -> Array2<F> {
        let w4 = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        w4.slice(s![.., .., di, dj]).t().to_owned()
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "transpose conv channel mismatch");
        let mut out = Array4::zeros((b, self.out_channels, 2 * h, 2 * w));
        for di in 0..2 {
            for dj in 0..2 {
                let tap = self.tap(di, dj);
                let mut out_slice = out.slice_mut(s![.., .., di..;2, dj..;2]);
                Zip::from(out_slice.axis_iter_mut(Axis(0)))
                    .and(x.axis_iter(Axis(0)))
                    .par_for_each(|mut o_s, x_s| {
                        let x_mat = x_s.into_shape_with_order((c, h * w)).unwrap();
                        let prod = tap.dot(&x_mat);
                        let prod = prod.into_shape_with_order((self.out_channels, h, w)).unwrap();
                        o_s.assign(&prod);
                    });
            }
        }
        add_channel_bias(&mut out, self.bias.value.as_slice().unwrap());
        let _ = b;
        out
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let y = self.infer(x);
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, g: &Array4<F>) -> Array4<F> {
        let x = self
            .cache_x
            .take()
            .expect("transpose conv backward without forward");
        let (b, c, h, w) = x.dim();
        let mut gx = Array4::<F>::zeros(x.raw_dim());
        let taps: Vec<Array2<F>> = (0..4).map(|i| self.tap(i / 2, i % 2)).collect();
        let mut w4g = self
            .weight
            .grad
            .view_mut()
            .into_dimensionality::<Ix4>()
            .unwrap();

        for di in 0..2 {
            for dj in 0..2 {
                let tap = &taps[di * 2 + dj]; // [out_c, in_c]
                let g_slice = g.slice(s![.., .., di..;2, dj..;2]);

                // dL/dx accumulates tap^T * g for every output phase.
                Zip::from(gx.axis_iter_mut(Axis(0)))
                    .and(g_slice.axis_iter(Axis(0)))
                    .par_for_each(|mut gx_s, g_s| {
                        let g_mat = g_s.to_owned().into_shape_with_order((self.out_channels, h * w)).unwrap();
                        let add = tap.t().dot(&g_mat);
                        let add = add.into_shape_with_order((c, h, w)).unwrap();
                        gx_s += &add;
                    });

                // dL/dW for this tap: sum over samples of x * g^T.
                let partials: Vec<Array2<F>> = (0..b)
                    .into_par_iter()
                    .map(|i| {
                        let x_mat = x
                            .index_axis(Axis(0), i)
                            .into_shape_with_order((c, h * w))
                            .unwrap();
                        let g_mat = g_slice
                            .index_axis(Axis(0), i)
                            .to_owned()
                            .into_shape_with_order((self.out_channels, h * w))
                            .unwrap();
                        x_mat.dot(&g_mat.t()) // [in_c, out_c]
                    })
                    .collect();
                let mut tap_grad = w4g.slice_mut(s![.., .., di, dj]);
                for p in &partials {
                    tap_grad += p;
                }
            }
        }

        let gb = self.bias.grad.as_slice_mut().unwrap();
        for (oc, gb_c) in gb.iter_mut().enumerate() {
            *gb_c += g.index_axis(Axis(1), oc).sum();
        }
        gx
    }
}
