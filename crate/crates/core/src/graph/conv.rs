//! Spatial ops: 2-d convolution (im2col + GEMM), batch norm, max pooling,
//! and bilinear resizing.

use super::{accumulate, Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, ArrayView3, Axis, Ix1, Ix4, IxDyn};

pub(crate) fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unroll one sample into a `(C*k*k, Ho*Wo)` column matrix.
fn im2col<T: Scalar>(x: &ArrayView3<'_, T>, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);
    let mut cols = Array2::<T>::zeros((c_in * k * k, ho * wo));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (c * h + iy as usize) * w;
                    if stride == 1 {
                        // valid ox range keeps ix = ox + kj - pad inside [0, w)
                        let lo = pad.saturating_sub(kj);
                        let hi = (w + pad - kj).min(wo);
                        if lo < hi {
                            let src0 = src_row + (lo + kj - pad);
                            cs[base + oy * wo + lo..base + oy * wo + hi]
                                .copy_from_slice(&xs[src0..src0 + (hi - lo)]);
                        }
                    } else {
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[base + oy * wo + ox] = xs[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter a `(C*k*k, Ho*Wo)` column gradient back onto the input layout.
fn col2im<T: Scalar>(
    cols: &Array2<T>,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);
    let cs = cols.as_slice().expect("standard layout");
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst_row + ix as usize] += cs[base + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// `x: (N, Cin, H, W)`, `w: (Cout, Cin, k, k)`, optional `b: (Cout,)`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape("4-d input and square 4-d kernel", format!("{xs:?} / {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                format!("{} input channels", ws[1]),
                format!("{}", xs[1]),
            ));
        }
        let (n, h, win) = (xs[0], xs[2], xs[3]);
        let (c_out, k) = (ws[0], ws[2]);
        let ho = conv_out_len(h, k, stride, pad);
        let wo = conv_out_len(win, k, stride, pad);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[n, c_out, ho, wo]));
        {
            let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
            let w_mat = self.value(w).view().into_shape_with_order((c_out, ws[1] * k * k)).unwrap();
            for i in 0..n {
                let cols = im2col(&x4.index_axis(Axis(0), i), k, stride, pad);
                let mut out_view = out
                    .index_axis_mut(Axis(0), i)
                    .into_shape_with_order((c_out, ho * wo))
                    .unwrap();
                general_mat_mul(T::one(), &w_mat, &cols, T::zero(), &mut out_view);
            }
            if let Some(bias) = b {
                let bv = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
                for i in 0..n {
                    let mut ov = out.index_axis_mut(Axis(0), i);
                    for c in 0..c_out {
                        let add = bv[c];
                        ov.index_axis_mut(Axis(0), c).mapv_inplace(|v| v + add);
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        if let Some(bias) = b {
            inputs.push(bias);
        }
        let needs = self.any_needs(&inputs);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// In training mode the batch statistics are used and returned so the
    /// caller can fold them into running estimates; in eval mode the provided
    /// running statistics are used and `None` is returned.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Array1<T>,
        running_var: &Array1<T>,
        eps: T,
        use_batch_stats: bool,
    ) -> (NodeId, Option<(Array1<T>, Array1<T>)>) {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "batch_norm expects (N, C, H, W)");
        let c = shape[1];
        let count = shape[0] * shape[2] * shape[3];
        let (batch, hw) = (shape[0], shape[2] * shape[3]);
        let xs = self.vals[x.0].as_slice().expect("standard layout");
        let (mean, var) = if use_batch_stats {
            // contiguous per-(sample, channel) planes; two passes for a
            // cancellation-free variance
            let mut mean = Array1::<T>::zeros(c);
            let mut var = Array1::<T>::zeros(c);
            let cnt = T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut sum = T::zero();
                for ni in 0..batch {
                    let base = (ni * c + ch) * hw;
                    for &v in &xs[base..base + hw] {
                        sum += v;
                    }
                }
                let m = sum / cnt;
                let mut sq = T::zero();
                for ni in 0..batch {
                    let base = (ni * c + ch) * hw;
                    for &v in &xs[base..base + hw] {
                        let d = v - m;
                        sq += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = sq / cnt;
            }
            (mean, var)
        } else {
            (running_mean.clone(), running_var.clone())
        };
        let invstd = var.mapv(|v| T::one() / (v + eps).sqrt());

        let gv = self.vals[gamma.0].view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let bv = self.vals[beta.0].view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut out = ArrayD::<T>::zeros(IxDyn(&shape));
        {
            let os = out.as_slice_mut().expect("standard layout");
            for ni in 0..batch {
                for ch in 0..c {
                    let (m, istd, ga, be) = (mean[ch], invstd[ch], gv[ch], bv[ch]);
                    let scale = istd * ga;
                    let base = (ni * c + ch) * hw;
                    for (o, &v) in os[base..base + hw].iter_mut().zip(&xs[base..base + hw]) {
                        *o = (v - m) * scale + be;
                    }
                }
            }
        }

        let stats = if use_batch_stats {
            Some((mean.clone(), var.clone()))
        } else {
            None
        };
        let needs = self.any_needs(&[x, gamma, beta]);
        let id = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats: use_batch_stats,
            },
            needs,
        );
        (id, stats)
    }

    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "max_pool expects (N, C, H, W)");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let ho = conv_out_len(h, k, stride, pad);
        let wo = conv_out_len(w, k, stride, pad);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[n, c, ho, wo]));
        let mut argmax = vec![0usize; n * c * ho * wo];
        {
            let xs = self.vals[x.0].as_slice().expect("standard layout");
            let os = out.as_slice_mut().expect("standard layout");
            if k == 2 && stride == 2 && pad == 0 {
                // hot path for the halving ladder
                let mut oi = 0usize;
                for plane_idx in 0..n * c {
                    let plane = plane_idx * h * w;
                    for oy in 0..ho {
                        let r0 = plane + (2 * oy) * w;
                        let r1 = r0 + w;
                        for ox in 0..wo {
                            let i00 = r0 + 2 * ox;
                            let i01 = i00 + 1;
                            let i10 = r1 + 2 * ox;
                            let i11 = i10 + 1;
                            let (mut best, mut best_idx) = (xs[i00], i00);
                            if xs[i01] > best {
                                best = xs[i01];
                                best_idx = i01;
                            }
                            if xs[i10] > best {
                                best = xs[i10];
                                best_idx = i10;
                            }
                            if xs[i11] > best {
                                best = xs[i11];
                                best_idx = i11;
                            }
                            os[oi] = best;
                            argmax[oi] = best_idx;
                            oi += 1;
                        }
                    }
                }
            } else {
                let mut oi = 0usize;
                for plane_idx in 0..n * c {
                    let plane = plane_idx * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0usize;
                            for ki in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = plane + (iy as usize) * w + ix as usize;
                                    if xs[idx] > best {
                                        best = xs[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            os[oi] = best;
                            argmax[oi] = best_idx;
                            oi += 1;
                        }
                    }
                }
            }
        }
        let needs = self.needs[x.0];
        self.push(out, Op::MaxPool { x, argmax }, needs)
    }

    /// Bilinear resize of the spatial axes with half-pixel centers.
    pub fn resize_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "resize expects (N, C, H, W)");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let rows = interp_weights::<T>(h, out_h);
        let cols = interp_weights::<T>(w, out_w);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[n, c, out_h, out_w]));
        {
            let xs = self.vals[x.0].as_slice().expect("standard layout");
            let os = out.as_slice_mut().expect("standard layout");
            let mut oi = 0usize;
            for ni in 0..n {
                for ci in 0..c {
                    let plane = (ni * c + ci) * h * w;
                    for &(y0, y1, ty) in &rows {
                        for &(x0, x1, tx) in &cols {
                            let one = T::one();
                            let v = xs[plane + y0 * w + x0] * (one - ty) * (one - tx)
                                + xs[plane + y0 * w + x1] * (one - ty) * tx
                                + xs[plane + y1 * w + x0] * ty * (one - tx)
                                + xs[plane + y1 * w + x1] * ty * tx;
                            os[oi] = v;
                            oi += 1;
                        }
                    }
                }
            }
        }
        let needs = self.needs[x.0];
        self.push(out, Op::Resize { x, rows, cols }, needs)
    }
}

fn interp_weights<T: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, crate::scalar::lit::<T>(s - i0 as f64))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_conv2d<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    _out: usize,
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    stride: usize,
    pad: usize,
    g: ArrayD<T>,
) {
    let xs = vals[x.0].shape();
    let ws = vals[w.0].shape();
    let (n, c_in, h, win) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, k) = (ws[0], ws[2]);
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(win, k, stride, pad);
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let x4 = vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
    let w_mat = vals[w.0].view().into_shape_with_order((c_out, c_in * k * k)).unwrap();

    if let Some(bias) = b {
        if needs[bias.0] {
            let mut gb = Array1::<T>::zeros(c_out);
            for c in 0..c_out {
                gb[c] = g4.index_axis(Axis(1), c).iter().fold(T::zero(), |a, &v| a + v);
            }
            accumulate(grads, needs, bias, gb.into_dyn());
        }
    }

    let need_w = needs[w.0];
    let need_x = needs[x.0];
    let mut gw = Array2::<T>::zeros((c_out, c_in * k * k));
    let mut gx = if need_x {
        Some(ArrayD::<T>::zeros(vals[x.0].raw_dim()))
    } else {
        None
    };
    for i in 0..n {
        let cols = im2col(&x4.index_axis(Axis(0), i), k, stride, pad);
        let g_mat = g4
            .index_axis(Axis(0), i)
            .into_shape_with_order((c_out, ho * wo))
            .unwrap();
        if need_w {
            general_mat_mul(T::one(), &g_mat, &cols.t(), T::one(), &mut gw.view_mut());
        }
        if let Some(gx_arr) = gx.as_mut() {
            let mut gcols = Array2::<T>::zeros((c_in * k * k, ho * wo));
            general_mat_mul(T::one(), &w_mat.t(), &g_mat, T::zero(), &mut gcols.view_mut());
            let plane = c_in * h * win;
            let gx_sl = gx_arr.as_slice_mut().expect("standard layout");
            col2im(
                &gcols,
                c_in,
                h,
                win,
                k,
                stride,
                pad,
                &mut gx_sl[i * plane..(i + 1) * plane],
            );
        }
    }
    if need_w {
        accumulate(
            grads,
            needs,
            w,
            gw.into_shape_with_order((c_out, c_in, k, k)).unwrap().into_dyn(),
        );
    }
    if let Some(gx_arr) = gx {
        accumulate(grads, needs, x, gx_arr);
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_batch_norm<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    mean: &Array1<T>,
    invstd: &Array1<T>,
    batch_stats: bool,
    g: ArrayD<T>,
) {
    let shape = vals[x.0].shape();
    let (batch, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = batch * hw;
    let cnt = T::from_usize(count).unwrap();
    let xs = vals[x.0].as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    let gv = vals[gamma.0].view().into_dimensionality::<Ix1>().unwrap();

    let mut dgamma = Array1::<T>::zeros(c);
    let mut dbeta = Array1::<T>::zeros(c);
    let mut gx = if needs[x.0] {
        Some(ArrayD::<T>::zeros(vals[x.0].raw_dim()))
    } else {
        None
    };
    for ch in 0..c {
        let (m, istd, ga) = (mean[ch], invstd[ch], gv[ch]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for ni in 0..batch {
            let base = (ni * c + ch) * hw;
            for (&gi, &xi) in gs[base..base + hw].iter().zip(&xs[base..base + hw]) {
                sum_g += gi;
                sum_gx += gi * (xi - m) * istd;
            }
        }
        dbeta[ch] = sum_g;
        dgamma[ch] = sum_gx;
        if let Some(gx_arr) = gx.as_mut() {
            let dst = gx_arr.as_slice_mut().expect("standard layout");
            if batch_stats {
                let mean_g = sum_g / cnt;
                let mean_gx = sum_gx / cnt;
                let scale = ga * istd;
                for ni in 0..batch {
                    let base = (ni * c + ch) * hw;
                    for ((d, &gi), &xi) in dst[base..base + hw]
                        .iter_mut()
                        .zip(&gs[base..base + hw])
                        .zip(&xs[base..base + hw])
                    {
                        let xhat = (xi - m) * istd;
                        *d = scale * (gi - mean_g - xhat * mean_gx);
                    }
                }
            } else {
                let scale = ga * istd;
                for ni in 0..batch {
                    let base = (ni * c + ch) * hw;
                    for (d, &gi) in dst[base..base + hw].iter_mut().zip(&gs[base..base + hw]) {
                        *d = scale * gi;
                    }
                }
            }
        }
    }
    accumulate(grads, needs, gamma, dgamma.into_dyn());
    accumulate(grads, needs, beta, dbeta.into_dyn());
    if let Some(gx_arr) = gx {
        accumulate(grads, needs, x, gx_arr);
    }
}

pub(super) fn backward_max_pool<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    x: NodeId,
    argmax: &[usize],
    g: ArrayD<T>,
) {
    if !needs[x.0] {
        return;
    }
    let mut gx = ArrayD::<T>::zeros(vals[x.0].raw_dim());
    {
        let gxs = gx.as_slice_mut().expect("standard layout");
        let gs = g.as_slice().expect("standard layout");
        for (o, &src) in argmax.iter().enumerate() {
            gxs[src] += gs[o];
        }
    }
    accumulate(grads, needs, x, gx);
}

pub(super) fn backward_resize<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    x: NodeId,
    rows: &[(usize, usize, T)],
    cols: &[(usize, usize, T)],
    g: ArrayD<T>,
) {
    if !needs[x.0] {
        return;
    }
    let shape = vals[x.0].shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut gx = ArrayD::<T>::zeros(vals[x.0].raw_dim());
    {
        let gxs = gx.as_slice_mut().expect("standard layout");
        let gs = g.as_slice().expect("standard layout");
        let one = T::one();
        let mut oi = 0usize;
        for ni in 0..n {
            for ci in 0..c {
                let plane = (ni * c + ci) * h * w;
                for &(y0, y1, ty) in rows {
                    for &(x0, x1, tx) in cols {
                        let gv = gs[oi];
                        gxs[plane + y0 * w + x0] += gv * (one - ty) * (one - tx);
                        gxs[plane + y0 * w + x1] += gv * (one - ty) * tx;
                        gxs[plane + y1 * w + x0] += gv * ty * (one - tx);
                        gxs[plane + y1 * w + x1] += gv * ty * tx;
                        oi += 1;
                    }
                }
            }
        }
    }
    accumulate(grads, needs, x, gx);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, ArrayD};

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let mut g = Graph::<f64>::new(true);
        let x = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| (i * 3 + j) as f64);
        let xn = g.input(x.clone().into_dyn());
        // 3x3 kernel with center 1: identity under pad=1
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[(0, 0, 1, 1)] = 1.0;
        let wn = g.input(w.into_dyn());
        let y = g.conv2d(xn, wn, None, 1, 1).unwrap();
        assert_eq!(g.value(y).as_slice().unwrap(), x.as_slice().unwrap());
    }

    #[test]
    fn conv_channel_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new(true);
        let x = g.input(ArrayD::zeros(ndarray::IxDyn(&[1, 3, 4, 4])));
        let w = g.input(ArrayD::zeros(ndarray::IxDyn(&[2, 4, 3, 3])));
        assert!(g.conv2d(x, w, None, 1, 1).is_err());
    }

    #[test]
    fn max_pool_floors_odd_sizes() {
        let mut g = Graph::<f64>::new(true);
        let x = Array4::from_shape_fn((1, 1, 21, 21), |(_, _, i, j)| (i + j) as f64);
        let xn = g.input(x.into_dyn());
        let y = g.max_pool(xn, 2, 2, 0);
        assert_eq!(g.value(y).shape(), &[1, 1, 10, 10]);
    }

    #[test]
    fn resize_identity_when_shapes_match() {
        let mut g = Graph::<f64>::new(true);
        let x = Array4::from_shape_fn((1, 2, 5, 5), |(_, c, i, j)| (c * 25 + i * 5 + j) as f64);
        let xn = g.input(x.clone().into_dyn());
        let y = g.resize_bilinear(xn, 5, 5);
        for (a, b) in g.value(y).iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_normalizes_batch() {
        let mut g = Graph::<f64>::new(true);
        let x = Array4::from_shape_fn((2, 1, 2, 2), |(n, _, i, j)| (n * 4 + i * 2 + j) as f64);
        let xn = g.input(x.into_dyn());
        let gamma = g.input(ndarray::arr1(&[1.0]).into_dyn());
        let beta = g.input(ndarray::arr1(&[0.0]).into_dyn());
        let rm = ndarray::arr1(&[0.0]);
        let rv = ndarray::arr1(&[1.0]);
        let (y, stats) = g.batch_norm(xn, gamma, beta, &rm, &rv, 1e-5, true);
        let (mean, var) = stats.unwrap();
        assert!((mean[0] - 3.5).abs() < 1e-12);
        assert!(var[0] > 0.0);
        let out_mean: f64 = g.value(y).iter().sum::<f64>() / 8.0;
        assert!(out_mean.abs() < 1e-12);
    }
}
