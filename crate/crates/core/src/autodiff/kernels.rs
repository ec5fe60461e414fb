//! Plain-slice forward/backward kernels used by the graph ops.

use crate::tensor::Real;

/// Geometry of a 2-D cross-correlation. 1-D convolutions use `h = kh = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output positions `o` along one axis for which `o*stride + k - pad` lands in `[0, extent)`.
    #[inline]
    fn valid_range(out: usize, stride: usize, k: usize, pad: usize, extent: usize) -> (usize, usize) {
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi = if extent + pad > k {
            ((extent - 1 + pad - k) / stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.filters * self.oh * self.ow
    }
}

pub(crate) fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![T::zero(); g.out_len()];
    for b in 0..g.batch {
        for f in 0..g.filters {
            let o = &mut out[(b * g.filters + f) * plane_out..][..plane_out];
            if let Some(bias) = bias {
                o.iter_mut().for_each(|v| *v = bias[f]);
            }
            for c in 0..g.channels {
                let xin = &x[(b * g.channels + c) * plane_in..][..plane_in];
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = ConvGeom::valid_range(g.oh, g.stride, ki, g.ph, g.h);
                    for kj in 0..g.kw {
                        let wv = k[((f * g.channels + c) * g.kh + ki) * g.kw + kj];
                        let (ow_lo, ow_hi) = ConvGeom::valid_range(g.ow, g.stride, kj, g.pw, g.w);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.ph;
                            let orow = &mut o[oh * g.ow..][..g.ow];
                            let xrow = &xin[ih * g.w..][..g.w];
                            for ow in ow_lo..ow_hi {
                                orow[ow] += wv * xrow[ow * g.stride + kj - g.pw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`; each is computed only when requested.
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    k: &[T],
    grad: &[T],
    want_x: bool,
    want_k: bool,
    want_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_k.then(|| vec![T::zero(); k.len()]);
    let db = want_b.then(|| {
        let mut db = vec![T::zero(); g.filters];
        for b in 0..g.batch {
            for (f, acc) in db.iter_mut().enumerate() {
                *acc += grad[(b * g.filters + f) * plane_out..][..plane_out]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        db
    });
    if dx.is_none() && dk.is_none() {
        return (dx, dk, db);
    }
    for b in 0..g.batch {
        for f in 0..g.filters {
            let go = &grad[(b * g.filters + f) * plane_out..][..plane_out];
            for c in 0..g.channels {
                let in_off = (b * g.channels + c) * plane_in;
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = ConvGeom::valid_range(g.oh, g.stride, ki, g.ph, g.h);
                    for kj in 0..g.kw {
                        let kidx = ((f * g.channels + c) * g.kh + ki) * g.kw + kj;
                        let wv = k[kidx];
                        let (ow_lo, ow_hi) = ConvGeom::valid_range(g.ow, g.stride, kj, g.pw, g.w);
                        let mut kacc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.ph;
                            let grow = &go[oh * g.ow..][..g.ow];
                            let row_off = in_off + ih * g.w;
                            if let Some(dx) = dx.as_mut() {
                                let dxrow = &mut dx[row_off..][..g.w];
                                for ow in ow_lo..ow_hi {
                                    dxrow[ow * g.stride + kj - g.pw] += wv * grow[ow];
                                }
                            }
                            if dk.is_some() {
                                let xrow = &x[row_off..][..g.w];
                                for ow in ow_lo..ow_hi {
                                    kacc += xrow[ow * g.stride + kj - g.pw] * grow[ow];
                                }
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk[kidx] += kacc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// `x[b,i]·w[i,o] + bias[o]`.
pub(crate) fn dense_forward<T: Real>(x: &[T], w: &[T], bias: &[T], rows: usize, inner: usize, outer: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * outer);
    for r in 0..rows {
        out.extend_from_slice(bias);
        let orow = &mut out[r * outer..][..outer];
        for i in 0..inner {
            let xv = x[r * inner + i];
            let wrow = &w[i * outer..][..outer];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// Per-channel layout helper for `[B, C, rest...]` tensors.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl ChannelLayout {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        if shape.len() < 2 {
            return None;
        }
        Some(ChannelLayout {
            batch: shape[0],
            channels: shape[1],
            spatial: shape[2..].iter().product(),
        })
    }

    pub fn count(&self) -> usize {
        self.batch * self.spatial
    }

    /// Calls `f(channel, flat_index)` for every element, channel-major within each batch row.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for b in 0..self.batch {
            for c in 0..self.channels {
                let base = (b * self.channels + c) * self.spatial;
                for s in 0..self.spatial {
                    f(c, base + s);
                }
            }
        }
    }
}

pub(crate) fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
