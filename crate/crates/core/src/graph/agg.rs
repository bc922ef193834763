//! Feature-aggregation ops: global average pooling, heatmap attention
//! pooling, bilinear pooling with its signed-sqrt/L2 post-processing, and
//! the soft spatial assignment used by unsupervised pose normalization.

use super::{accumulate, Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::scalar::{attention_epsilon, lit, Scalar};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};

impl<T: Scalar> Graph<T> {
    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "global_avg_pool expects (N, C, H, W)");
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let denom = T::from_usize(hw).unwrap();
        let mut out = Array2::<T>::zeros((n, c));
        {
            let xs = self.vals[x.0].as_slice().expect("standard layout");
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let s = xs[base..base + hw].iter().fold(T::zero(), |a, &v| a + v);
                    out[(ni, ci)] = s / denom;
                }
            }
        }
        let needs = self.needs[x.0];
        self.push(out.into_dyn(), Op::GlobalAvgPool { x }, needs)
    }

    /// Attention pooling of a feature map under per-part heatmaps:
    /// `v_i = sum_hw F(h,w) m_i(h,w) / (eps + sum_hw m_i(h,w))`, concatenated
    /// over parts into `(N, M*C)`.
    pub fn attention_pool(&mut self, f: NodeId, m: NodeId) -> Result<NodeId> {
        let fs = self.value(f).shape().to_vec();
        let ms = self.value(m).shape().to_vec();
        if fs.len() != 4 || ms.len() != 4 || fs[0] != ms[0] || fs[2..] != ms[2..] {
            return Err(Error::shape(
                format!("heatmap (N={}, M, {}, {})", fs[0], fs[2], fs[3]),
                format!("{ms:?}"),
            ));
        }
        let (n, c, parts, hw) = (fs[0], fs[1], ms[1], fs[2] * fs[3]);
        let eps = attention_epsilon::<T>();
        let mut out = Array2::<T>::zeros((n, parts * c));
        {
            let f4 = self.value(f).view().into_dimensionality::<Ix4>().unwrap();
            let m4 = self.value(m).view().into_dimensionality::<Ix4>().unwrap();
            for ni in 0..n {
                let f_mat = f4
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((c, hw))
                    .unwrap();
                let m_mat = m4
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((parts, hw))
                    .unwrap();
                // numer[(i, c)] = sum_hw m_i(hw) F_c(hw)
                let mut numer = Array2::<T>::zeros((parts, c));
                general_mat_mul(T::one(), &m_mat, &f_mat.t(), T::zero(), &mut numer.view_mut());
                for i in 0..parts {
                    let s = m_mat.row(i).iter().fold(T::zero(), |a, &v| a + v);
                    let denom = eps + s;
                    for ci in 0..c {
                        out[(ni, i * c + ci)] = numer[(i, ci)] / denom;
                    }
                }
            }
        }
        let needs = self.any_needs(&[f, m]);
        Ok(self.push(out.into_dyn(), Op::AttentionPool { f, m }, needs))
    }

    /// `(N, C, H, W) -> (N, C*C)` sum of spatial outer products (raw bilinear
    /// descriptor, before signed-sqrt and L2 normalization).
    pub fn bilinear_pool(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 4, "bilinear_pool expects (N, C, H, W)");
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut out = Array2::<T>::zeros((n, c * c));
        {
            let x4 = self.vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
            for ni in 0..n {
                let f_mat = x4
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((c, hw))
                    .unwrap();
                let mut row = out
                    .row_mut(ni)
                    .into_shape_with_order((c, c))
                    .unwrap();
                general_mat_mul(T::one(), &f_mat, &f_mat.t(), T::zero(), &mut row);
            }
        }
        let needs = self.needs[x.0];
        self.push(out.into_dyn(), Op::BilinearPool { x }, needs)
    }

    /// Element-wise `sign(x) * sqrt(|x|)`.
    pub fn signed_sqrt(&mut self, x: NodeId) -> NodeId {
        let val = self.vals[x.0].mapv(|v| v.signum() * v.abs().sqrt());
        let needs = self.needs[x.0];
        self.push(val, Op::SignedSqrt { x }, needs)
    }

    /// Row-wise L2 normalization of `(N, d)`. Rows with norm below 1e-12 are
    /// passed through unchanged.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let x2 = self.vals[x.0].view().into_dimensionality::<Ix2>().unwrap();
        let n = x2.nrows();
        let min_norm = lit::<T>(1e-12);
        let mut norms = Vec::with_capacity(n);
        let mut out = x2.to_owned();
        for mut row in out.rows_mut() {
            let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            norms.push(norm);
            if norm >= min_norm {
                row.mapv_inplace(|v| v / norm);
            }
        }
        let needs = self.needs[x.0];
        self.push(out.into_dyn(), Op::L2NormRows { x, norms }, needs)
    }

    /// Soft spatial assignment of each feature-map location to the nearest
    /// bank vectors: softmax over parts of `-||F(h,w) - bank_i||^2 / temp`.
    /// `f: (N, C, H, W)`, `bank: (M, C)` -> `(N, M, H, W)`.
    pub fn soft_assign(&mut self, f: NodeId, bank: NodeId, temperature: T) -> Result<NodeId> {
        if temperature <= T::zero() {
            return Err(Error::invalid(format!(
                "soft_assign temperature must be positive, got {temperature}"
            )));
        }
        let fs = self.value(f).shape().to_vec();
        let bs = self.value(bank).shape().to_vec();
        if fs.len() != 4 || bs.len() != 2 || bs[1] != fs[1] {
            return Err(Error::shape(
                format!("bank (M, {})", fs[1]),
                format!("{bs:?}"),
            ));
        }
        let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        let (parts, hw) = (bs[0], h * w);
        let inv_temp = T::one() / temperature;
        let b2 = self.value(bank).view().into_dimensionality::<Ix2>().unwrap();
        let bank_sq: Vec<T> = (0..parts)
            .map(|i| b2.row(i).iter().fold(T::zero(), |a, &v| a + v * v))
            .collect();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[n, parts, h, w]));
        {
            let f4 = self.value(f).view().into_dimensionality::<Ix4>().unwrap();
            let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            for ni in 0..n {
                let f_mat = f4
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((c, hw))
                    .unwrap();
                // dots[(i, hw)] = bank_i . f(hw)
                let mut dots = Array2::<T>::zeros((parts, hw));
                general_mat_mul(T::one(), &b2, &f_mat, T::zero(), &mut dots.view_mut());
                let mut o_mat = o4
                    .index_axis_mut(Axis(0), ni)
                    .into_shape_with_order((parts, hw))
                    .unwrap();
                for loc in 0..hw {
                    let f_sq = f_mat
                        .column(loc)
                        .iter()
                        .fold(T::zero(), |a, &v| a + v * v);
                    // logits l_i = -(||f||^2 + ||b_i||^2 - 2 b_i.f) / temp
                    let mut max_l = T::neg_infinity();
                    for i in 0..parts {
                        let d = f_sq + bank_sq[i] - (dots[(i, loc)] + dots[(i, loc)]);
                        let l = -d * inv_temp;
                        o_mat[(i, loc)] = l;
                        if l > max_l {
                            max_l = l;
                        }
                    }
                    let mut z = T::zero();
                    for i in 0..parts {
                        let e = (o_mat[(i, loc)] - max_l).exp();
                        o_mat[(i, loc)] = e;
                        z += e;
                    }
                    for i in 0..parts {
                        o_mat[(i, loc)] = o_mat[(i, loc)] / z;
                    }
                }
            }
        }
        let needs = self.any_needs(&[f, bank]);
        Ok(self.push(out, Op::SoftAssign { f, bank, inv_temp }, needs))
    }
}

pub(super) fn backward_global_avg_pool<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    x: NodeId,
    g: ArrayD<T>,
) {
    if !needs[x.0] {
        return;
    }
    let shape = vals[x.0].shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let denom = T::from_usize(hw).unwrap();
    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
    let mut gx = ArrayD::<T>::zeros(vals[x.0].raw_dim());
    {
        let gxs = gx.as_slice_mut().expect("standard layout");
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let gv = g2[(ni, ci)] / denom;
                for s in &mut gxs[base..base + hw] {
                    *s += gv;
                }
            }
        }
    }
    accumulate(grads, needs, x, gx);
}

pub(super) fn backward_attention_pool<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    f: NodeId,
    m: NodeId,
    g: ArrayD<T>,
) {
    let fs = vals[f.0].shape();
    let ms = vals[m.0].shape();
    let (n, c, parts, hw) = (fs[0], fs[1], ms[1], fs[2] * fs[3]);
    let eps = attention_epsilon::<T>();
    let f4 = vals[f.0].view().into_dimensionality::<Ix4>().unwrap();
    let m4 = vals[m.0].view().into_dimensionality::<Ix4>().unwrap();
    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();

    let mut gf = needs[f.0].then(|| ArrayD::<T>::zeros(vals[f.0].raw_dim()));
    let mut gm = needs[m.0].then(|| ArrayD::<T>::zeros(vals[m.0].raw_dim()));
    for ni in 0..n {
        let f_mat = f4
            .index_axis(Axis(0), ni)
            .into_shape_with_order((c, hw))
            .unwrap();
        let m_mat = m4
            .index_axis(Axis(0), ni)
            .into_shape_with_order((parts, hw))
            .unwrap();
        let g_row = g2.row(ni).into_shape_with_order((parts, c)).unwrap();
        // Recompute the forward quantities for this sample.
        let mut numer = Array2::<T>::zeros((parts, c));
        general_mat_mul(T::one(), &m_mat, &f_mat.t(), T::zero(), &mut numer.view_mut());
        let denoms: Vec<T> = (0..parts)
            .map(|i| eps + m_mat.row(i).iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        // g_scaled[(i, c)] = g[(i, c)] / denom_i
        let mut g_scaled = g_row.to_owned();
        for i in 0..parts {
            let d = denoms[i];
            g_scaled.row_mut(i).mapv_inplace(|v| v / d);
        }
        if let Some(gf_arr) = gf.as_mut() {
            let mut gf_mat = gf_arr
                .view_mut()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .index_axis_move(Axis(0), ni)
                .into_shape_with_order((c, hw))
                .unwrap();
            // gF(c, hw) += sum_i g_scaled[(i, c)] m_i(hw)
            general_mat_mul(T::one(), &g_scaled.t(), &m_mat, T::one(), &mut gf_mat);
        }
        if let Some(gm_arr) = gm.as_mut() {
            let mut gm_mat = gm_arr
                .view_mut()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .index_axis_move(Axis(0), ni)
                .into_shape_with_order((parts, hw))
                .unwrap();
            // gm_i(hw) = sum_c g_scaled[(i, c)] (F_c(hw) - v[(i, c)])
            //          = (g_scaled . F)(i, hw) - sum_c g_scaled[(i, c)] v[(i, c)]
            general_mat_mul(T::one(), &g_scaled, &f_mat, T::one(), &mut gm_mat);
            for i in 0..parts {
                let mut offset = T::zero();
                for ci in 0..c {
                    offset += g_scaled[(i, ci)] * numer[(i, ci)] / denoms[i];
                }
                gm_mat.row_mut(i).mapv_inplace(|v| v - offset);
            }
        }
    }
    if let Some(gf_arr) = gf {
        accumulate(grads, needs, f, gf_arr);
    }
    if let Some(gm_arr) = gm {
        accumulate(grads, needs, m, gm_arr);
    }
}

pub(super) fn backward_bilinear_pool<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    x: NodeId,
    g: ArrayD<T>,
) {
    if !needs[x.0] {
        return;
    }
    let shape = vals[x.0].shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let x4 = vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
    let mut gx = ArrayD::<T>::zeros(vals[x.0].raw_dim());
    for ni in 0..n {
        let f_mat = x4
            .index_axis(Axis(0), ni)
            .into_shape_with_order((c, hw))
            .unwrap();
        let gb = g2.row(ni).into_shape_with_order((c, c)).unwrap();
        // gF = (gB + gB^T) F
        let gb_sym = &gb + &gb.t();
        let mut gf_mat = gx
            .view_mut()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .index_axis_move(Axis(0), ni)
            .into_shape_with_order((c, hw))
            .unwrap();
        general_mat_mul(T::one(), &gb_sym, &f_mat, T::one(), &mut gf_mat);
    }
    accumulate(grads, needs, x, gx);
}

pub(super) fn backward_signed_sqrt<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    x: NodeId,
    mut g: ArrayD<T>,
) {
    if !needs[x.0] {
        return;
    }
    let half = lit::<T>(0.5);
    g.zip_mut_with(&vals[x.0], |d, &v| {
        let a = v.abs().sqrt();
        // derivative 1/(2 sqrt(|x|)); zero at the origin as a numerical guard
        *d = if a > T::zero() { *d * half / a } else { T::zero() };
    });
    accumulate(grads, needs, x, g);
}

pub(super) fn backward_l2_norm_rows<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    out: usize,
    x: NodeId,
    norms: &[T],
    g: ArrayD<T>,
) {
    if !needs[x.0] {
        return;
    }
    let min_norm = lit::<T>(1e-12);
    let y2 = vals[out].view().into_dimensionality::<Ix2>().unwrap();
    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
    let mut gx = Array2::<T>::zeros(y2.raw_dim());
    for (i, &norm) in norms.iter().enumerate() {
        let grow = g2.row(i);
        let yrow = y2.row(i);
        let mut dst = gx.row_mut(i);
        if norm < min_norm {
            dst.assign(&grow);
        } else {
            let dot = grow
                .iter()
                .zip(yrow.iter())
                .fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
            ndarray::Zip::from(&mut dst).and(&grow).and(&yrow).for_each(|d, &gv, &yv| {
                *d = (gv - yv * dot) / norm;
            });
        }
    }
    accumulate(grads, needs, x, gx.into_dyn());
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_soft_assign<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    out: usize,
    f: NodeId,
    bank: NodeId,
    inv_temp: T,
    g: ArrayD<T>,
) {
    let fs = vals[f.0].shape();
    let (n, c, hw) = (fs[0], fs[1], fs[2] * fs[3]);
    let parts = vals[bank.0].shape()[0];
    let f4 = vals[f.0].view().into_dimensionality::<Ix4>().unwrap();
    let b2 = vals[bank.0].view().into_dimensionality::<Ix2>().unwrap();
    let a4 = vals[out].view().into_dimensionality::<Ix4>().unwrap();
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let two = lit::<T>(2.0);

    let mut gf = needs[f.0].then(|| ArrayD::<T>::zeros(vals[f.0].raw_dim()));
    let mut gb = needs[bank.0].then(|| Array2::<T>::zeros((parts, c)));
    for ni in 0..n {
        let f_mat = f4
            .index_axis(Axis(0), ni)
            .into_shape_with_order((c, hw))
            .unwrap();
        let a_mat = a4
            .index_axis(Axis(0), ni)
            .into_shape_with_order((parts, hw))
            .unwrap();
        let g_mat = g4
            .index_axis(Axis(0), ni)
            .into_shape_with_order((parts, hw))
            .unwrap();
        let mut gf_mat = gf.as_mut().map(|arr| {
            arr.view_mut()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .index_axis_move(Axis(0), ni)
                .into_shape_with_order((c, hw))
                .unwrap()
        });
        for loc in 0..hw {
            // softmax jacobian: gl_i = a_i (g_i - sum_j g_j a_j)
            let mut dot = T::zero();
            for i in 0..parts {
                dot += g_mat[(i, loc)] * a_mat[(i, loc)];
            }
            for i in 0..parts {
                let gl = a_mat[(i, loc)] * (g_mat[(i, loc)] - dot);
                if gl == T::zero() {
                    continue;
                }
                // l_i = -inv_temp * ||f - b_i||^2
                let coeff = two * inv_temp * gl;
                for ci in 0..c {
                    let diff = f_mat[(ci, loc)] - b2[(i, ci)];
                    if let Some(gfm) = gf_mat.as_mut() {
                        gfm[(ci, loc)] -= coeff * diff;
                    }
                    if let Some(gbm) = gb.as_mut() {
                        gbm[(i, ci)] += coeff * diff;
                    }
                }
            }
        }
    }
    if let Some(gf_arr) = gf {
        accumulate(grads, needs, f, gf_arr);
    }
    if let Some(gb_arr) = gb {
        accumulate(grads, needs, bank, gb_arr.into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array4};

    #[test]
    fn avg_pool_of_constant_map_is_constant() {
        let mut g = Graph::<f64>::new(false);
        let x = g.input(Array4::from_elem((1, 3, 4, 4), 2.5).into_dyn());
        let y = g.global_avg_pool(x);
        assert_eq!(g.value(y).shape(), &[1, 3]);
        for &v in g.value(y).iter() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_pool_matches_hand_computation() {
        // F 1-channel 2x2 = [[1,2],[3,4]], m = [[1,0],[0,1]]
        let mut g = Graph::<f64>::new(false);
        let mut f = Array4::<f64>::zeros((1, 1, 2, 2));
        f[(0, 0, 0, 0)] = 1.0;
        f[(0, 0, 0, 1)] = 2.0;
        f[(0, 0, 1, 0)] = 3.0;
        f[(0, 0, 1, 1)] = 4.0;
        let mut m = Array4::<f64>::zeros((1, 1, 2, 2));
        m[(0, 0, 0, 0)] = 1.0;
        m[(0, 0, 1, 1)] = 1.0;
        let fi = g.input(f.into_dyn());
        let mi = g.input(m.into_dyn());
        let v = g.attention_pool(fi, mi).unwrap();
        let expect = (1.0 + 4.0) / (1e-5 + 2.0);
        assert!((g.value(v)[[0, 0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn bilinear_pool_sums_squares_for_single_channel() {
        let mut g = Graph::<f64>::new(false);
        let mut f = Array4::<f64>::zeros((1, 1, 2, 2));
        f[(0, 0, 0, 0)] = 1.0;
        f[(0, 0, 0, 1)] = 2.0;
        f[(0, 0, 1, 0)] = 3.0;
        f[(0, 0, 1, 1)] = 4.0;
        let fi = g.input(f.into_dyn());
        let b = g.bilinear_pool(fi);
        assert!((g.value(b)[[0, 0]] - 30.0).abs() < 1e-12);
    }

    #[test]
    fn soft_assign_rows_sum_to_one() {
        let mut g = Graph::<f64>::new(false);
        let f = Array4::from_shape_fn((2, 3, 4, 4), |(n, c, i, j)| {
            ((n + 1) * (c + 2)) as f64 * 0.1 + (i as f64 - j as f64) * 0.05
        });
        let bank = arr2(&[[0.1, 0.2, 0.3], [0.5, 0.1, -0.2], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let fi = g.input(f.into_dyn());
        let bi = g.input(bank.into_dyn());
        let a = g.soft_assign(fi, bi, 0.7).unwrap();
        let a4 = g.value(a).view().into_dimensionality::<Ix4>().unwrap();
        for n in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let s: f64 = (0..4).map(|p| a4[(n, p, i, j)]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn soft_assign_rejects_nonpositive_temperature() {
        let mut g = Graph::<f64>::new(false);
        let f = g.input(Array4::<f64>::zeros((1, 2, 2, 2)).into_dyn());
        let b = g.input(arr2(&[[0.0, 0.0]]).into_dyn());
        assert!(g.soft_assign(f, b, 0.0).is_err());
        assert!(g.soft_assign(f, b, -1.0).is_err());
    }
}
