//! 2x2 max pooling with stride 2.

use ndarray::Array4;

use super::Element;

pub struct MaxPool2<F: Element> {
    /// Winner position within each 2x2 window, encoded `di * 2 + dj`.
    cache_argmax: Option<Array4<u8>>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Element> MaxPool2<F> {
    pub fn new() -> Self {
        MaxPool2 {
            cache_argmax: None,
            _marker: std::marker::PhantomData,
        }
    }

    fn pool(x: &Array4<F>) -> (Array4<F>, Array4<u8>) {
        let (b, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::zeros((b, c, oh, ow));
        let mut arg = Array4::<u8>::zeros((b, c, oh, ow));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = x[[bi, ci, 2 * i, 2 * j]];
                        let mut code = 0u8;
                        for (k, (di, dj)) in
                            [(0usize, 1usize), (1, 0), (1, 1)].iter().enumerate()
                        {
                            let v = x[[bi, ci, 2 * i + di, 2 * j + dj]];
                            if v > best {
                                best = v;
                                code = (k + 1) as u8;
                            }
                        }
                        out[[bi, ci, i, j]] = best;
                        arg[[bi, ci, i, j]] = code;
                    }
                }
            }
        }
        (out, arg)
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        Self::pool(x).0
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let (out, arg) = Self::pool(x);
        self.cache_argmax = Some(arg);
        out
    }

    pub fn backward(&mut self, g: &Array4<F>) -> Array4<F> {
        let arg = self
            .cache_argmax
            .take()
            .expect("max pool backward without forward");
        let (b, c, oh, ow) = g.dim();
        let mut gx = Array4::zeros((b, c, oh * 2, ow * 2));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let code = arg[[bi, ci, i, j]] as usize;
                        let (di, dj) = [(0, 0), (0, 1), (1, 0), (1, 1)][code];
                        gx[[bi, ci, 2 * i + di, 2 * j + dj]] = g[[bi, ci, i, j]];
                    }
                }
            }
        }
        gx
    }
}

impl<F: Element> Default for MaxPool2<F> {
    fn default() -> Self {
        Self::new()
    }
}
