//! Dense heads and losses: linear and cosine classifiers, class-mean
//! prototypes, negative squared distances, cross-entropy, and the pixel-wise
//! binary log loss used for heatmap supervision.

use super::{accumulate, Graph, NodeId, Op};
use crate::scalar::{lit, log_clamp, Scalar};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2, IxDyn};

impl<T: Scalar> Graph<T> {
    /// `y = x W^T + b` with `x: (N, in)`, `w: (out, in)`, `b: (out,)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let x2 = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let w2 = self.value(w).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(x2.ncols(), w2.ncols(), "linear dims must agree");
        let mut out = Array2::<T>::zeros((x2.nrows(), w2.nrows()));
        general_mat_mul(T::one(), &x2, &w2.t(), T::zero(), &mut out.view_mut());
        if let Some(bias) = b {
            let bv = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
            for mut row in out.rows_mut() {
                row += &bv;
            }
        }
        let mut inputs = vec![x, w];
        if let Some(bias) = b {
            inputs.push(bias);
        }
        let needs = self.any_needs(&inputs);
        self.push(out.into_dyn(), Op::Linear { x, w, b }, needs)
    }

    /// Scaled cosine-similarity logits `s * cos(x_n, w_k)`.
    /// `scale` is a single-element node.
    pub fn cosine_logits(&mut self, x: NodeId, w: NodeId, scale: NodeId) -> NodeId {
        let x2 = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let w2 = self.value(w).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(x2.ncols(), w2.ncols(), "cosine dims must agree");
        let min_norm = lit::<T>(1e-12);
        let x_norms: Vec<T> = x2
            .rows()
            .into_iter()
            .map(|r| r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt().max(min_norm))
            .collect();
        let w_norms: Vec<T> = w2
            .rows()
            .into_iter()
            .map(|r| r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt().max(min_norm))
            .collect();
        let s = self.scalar(scale);
        let mut out = Array2::<T>::zeros((x2.nrows(), w2.nrows()));
        general_mat_mul(T::one(), &x2, &w2.t(), T::zero(), &mut out.view_mut());
        for (n, mut row) in out.rows_mut().into_iter().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = s * *v / (x_norms[n] * w_norms[k]);
            }
        }
        let needs = self.any_needs(&[x, w, scale]);
        self.push(
            out.into_dyn(),
            Op::CosineLogits {
                x,
                w,
                scale,
                x_norms,
                w_norms,
            },
            needs,
        )
    }

    /// Mean of selected row groups: `out[k] = mean_{n in groups[k]} x[n]`.
    pub fn mean_rows_groups(&mut self, x: NodeId, groups: Vec<Vec<usize>>) -> NodeId {
        let x2 = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let d = x2.ncols();
        let mut out = Array2::<T>::zeros((groups.len(), d));
        for (k, group) in groups.iter().enumerate() {
            assert!(!group.is_empty(), "empty prototype group");
            let denom = T::from_usize(group.len()).unwrap();
            let mut row = out.row_mut(k);
            for &n in group {
                row += &x2.row(n);
            }
            row.mapv_inplace(|v| v / denom);
        }
        let needs = self.needs[x.0];
        self.push(out.into_dyn(), Op::MeanRowsGroups { x, groups }, needs)
    }

    /// `logits[n, k] = -||q_n - p_k||^2`.
    pub fn neg_sqdist(&mut self, q: NodeId, p: NodeId) -> NodeId {
        let q2 = self.value(q).view().into_dimensionality::<Ix2>().unwrap();
        let p2 = self.value(p).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(q2.ncols(), p2.ncols(), "distance dims must agree");
        let mut out = Array2::<T>::zeros((q2.nrows(), p2.nrows()));
        for (n, qrow) in q2.rows().into_iter().enumerate() {
            for (k, prow) in p2.rows().into_iter().enumerate() {
                let d = qrow
                    .iter()
                    .zip(prow.iter())
                    .fold(T::zero(), |a, (&qa, &pa)| {
                        let diff = qa - pa;
                        a + diff * diff
                    });
                out[(n, k)] = -d;
            }
        }
        let needs = self.any_needs(&[q, p]);
        self.push(out.into_dyn(), Op::NegSqDist { q, p }, needs)
    }

    /// Mean softmax cross-entropy over rows with integer targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let z = self.value(logits).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(z.nrows(), targets.len(), "one target per row");
        let n = z.nrows();
        let mut probs = Array2::<T>::zeros(z.raw_dim());
        let mut loss = T::zero();
        for (i, row) in z.rows().into_iter().enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut z_sum = T::zero();
            for &v in row.iter() {
                z_sum += (v - max).exp();
            }
            let log_z = z_sum.ln() + max;
            loss += log_z - row[targets[i]];
            for (k, &v) in row.iter().enumerate() {
                probs[(i, k)] = (v - log_z).exp();
            }
        }
        loss = loss / T::from_usize(n).unwrap();
        let needs = self.needs[logits.0];
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// Mean binary cross-entropy against a fixed target tensor. Predictions
    /// are clamped to `[1e-7, 1 - 1e-7]` before the logs.
    pub fn bce_mean(&mut self, pred: NodeId, target: ArrayD<T>) -> NodeId {
        assert_eq!(self.value(pred).shape(), target.shape(), "bce shapes must agree");
        let clamp = log_clamp::<T>();
        let hi = T::one() - clamp;
        let count = T::from_usize(target.len()).unwrap();
        let mut loss = T::zero();
        for (&p, &t) in self.value(pred).iter().zip(target.iter()) {
            let pc = p.max(clamp).min(hi);
            loss -= t * pc.ln() + (T::one() - t) * (T::one() - pc).ln();
        }
        loss = loss / count;
        let needs = self.needs[pred.0];
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::BceMean { pred, target },
            needs,
        )
    }
}

pub(super) fn backward_linear<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    g: ArrayD<T>,
) {
    let x2 = vals[x.0].view().into_dimensionality::<Ix2>().unwrap();
    let w2 = vals[w.0].view().into_dimensionality::<Ix2>().unwrap();
    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
    if needs[x.0] {
        let mut gx = Array2::<T>::zeros(x2.raw_dim());
        general_mat_mul(T::one(), &g2, &w2, T::zero(), &mut gx.view_mut());
        accumulate(grads, needs, x, gx.into_dyn());
    }
    if needs[w.0] {
        let mut gw = Array2::<T>::zeros(w2.raw_dim());
        general_mat_mul(T::one(), &g2.t(), &x2, T::zero(), &mut gw.view_mut());
        accumulate(grads, needs, w, gw.into_dyn());
    }
    if let Some(bias) = b {
        if needs[bias.0] {
            let mut gb = Array1::<T>::zeros(w2.nrows());
            for row in g2.rows() {
                gb += &row;
            }
            accumulate(grads, needs, bias, gb.into_dyn());
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_cosine_logits<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    x: NodeId,
    w: NodeId,
    scale: NodeId,
    x_norms: &[T],
    w_norms: &[T],
    g: ArrayD<T>,
) {
    let x2 = vals[x.0].view().into_dimensionality::<Ix2>().unwrap();
    let w2 = vals[w.0].view().into_dimensionality::<Ix2>().unwrap();
    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
    let s = *vals[scale.0].iter().next().expect("scalar scale");

    // Normalized rows.
    let mut u = x2.to_owned();
    for (i, mut row) in u.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v / x_norms[i]);
    }
    let mut vmat = w2.to_owned();
    for (k, mut row) in vmat.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v / w_norms[k]);
    }

    if needs[scale.0] {
        let mut gs = T::zero();
        for (n, grow) in g2.rows().into_iter().enumerate() {
            for (k, &gv) in grow.iter().enumerate() {
                let cos = u
                    .row(n)
                    .iter()
                    .zip(vmat.row(k).iter())
                    .fold(T::zero(), |a, (&ua, &va)| a + ua * va);
                gs += gv * cos;
            }
        }
        accumulate(
            grads,
            needs,
            scale,
            ArrayD::from_elem(vals[scale.0].raw_dim(), gs),
        );
    }
    if needs[x.0] {
        // gu = s * g . v ; gx_n = (gu_n - u_n (gu_n . u_n)) / ||x_n||
        let mut gu = Array2::<T>::zeros(u.raw_dim());
        general_mat_mul(s, &g2, &vmat.view(), T::zero(), &mut gu.view_mut());
        let mut gx = Array2::<T>::zeros(u.raw_dim());
        for (n, (gur, ur)) in gu.rows().into_iter().zip(u.rows()).enumerate() {
            let dot = gur.iter().zip(ur.iter()).fold(T::zero(), |a, (&ga, &ua)| a + ga * ua);
            let mut dst = gx.row_mut(n);
            ndarray::Zip::from(&mut dst).and(&gur).and(&ur).for_each(|d, &ga, &ua| {
                *d = (ga - ua * dot) / x_norms[n];
            });
        }
        accumulate(grads, needs, x, gx.into_dyn());
    }
    if needs[w.0] {
        let mut gv = Array2::<T>::zeros(vmat.raw_dim());
        general_mat_mul(s, &g2.t(), &u.view(), T::zero(), &mut gv.view_mut());
        let mut gw = Array2::<T>::zeros(vmat.raw_dim());
        for (k, (gvr, vr)) in gv.rows().into_iter().zip(vmat.rows()).enumerate() {
            let dot = gvr.iter().zip(vr.iter()).fold(T::zero(), |a, (&ga, &va)| a + ga * va);
            let mut dst = gw.row_mut(k);
            ndarray::Zip::from(&mut dst).and(&gvr).and(&vr).for_each(|d, &ga, &va| {
                *d = (ga - va * dot) / w_norms[k];
            });
        }
        accumulate(grads, needs, w, gw.into_dyn());
    }
}

pub(super) fn backward_mean_rows_groups<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    x: NodeId,
    groups: &[Vec<usize>],
    g: ArrayD<T>,
) {
    if !needs[x.0] {
        return;
    }
    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
    let mut gx = Array2::<T>::zeros(
        vals[x.0]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .raw_dim(),
    );
    for (k, group) in groups.iter().enumerate() {
        let denom = T::from_usize(group.len()).unwrap();
        for &n in group {
            let mut dst = gx.row_mut(n);
            ndarray::Zip::from(&mut dst).and(&g2.row(k)).for_each(|d, &gv| {
                *d += gv / denom;
            });
        }
    }
    accumulate(grads, needs, x, gx.into_dyn());
}

pub(super) fn backward_neg_sqdist<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    q: NodeId,
    p: NodeId,
    g: ArrayD<T>,
) {
    let q2 = vals[q.0].view().into_dimensionality::<Ix2>().unwrap();
    let p2 = vals[p.0].view().into_dimensionality::<Ix2>().unwrap();
    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
    let two = lit::<T>(2.0);
    let mut gq = needs[q.0].then(|| Array2::<T>::zeros(q2.raw_dim()));
    let mut gp = needs[p.0].then(|| Array2::<T>::zeros(p2.raw_dim()));
    for (n, qrow) in q2.rows().into_iter().enumerate() {
        for (k, prow) in p2.rows().into_iter().enumerate() {
            let gv = g2[(n, k)];
            if gv == T::zero() {
                continue;
            }
            let coeff = two * gv;
            if let Some(gq_arr) = gq.as_mut() {
                let mut dst = gq_arr.row_mut(n);
                ndarray::Zip::from(&mut dst).and(&qrow).and(&prow).for_each(|d, &qa, &pa| {
                    *d -= coeff * (qa - pa);
                });
            }
            if let Some(gp_arr) = gp.as_mut() {
                let mut dst = gp_arr.row_mut(k);
                ndarray::Zip::from(&mut dst).and(&qrow).and(&prow).for_each(|d, &qa, &pa| {
                    *d += coeff * (qa - pa);
                });
            }
        }
    }
    if let Some(gq_arr) = gq {
        accumulate(grads, needs, q, gq_arr.into_dyn());
    }
    if let Some(gp_arr) = gp {
        accumulate(grads, needs, p, gp_arr.into_dyn());
    }
}

pub(super) fn backward_cross_entropy<T: Scalar>(
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    logits: NodeId,
    targets: &[usize],
    probs: &Array2<T>,
    g: ArrayD<T>,
) {
    if !needs[logits.0] {
        return;
    }
    let gval = *g.iter().next().expect("scalar grad");
    let n = T::from_usize(targets.len()).unwrap();
    let mut gz = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        gz[(i, t)] -= T::one();
    }
    gz.mapv_inplace(|v| v * gval / n);
    accumulate(grads, needs, logits, gz.into_dyn());
}

pub(super) fn backward_bce_mean<T: Scalar>(
    vals: &[ArrayD<T>],
    grads: &mut [Option<ArrayD<T>>],
    needs: &[bool],
    pred: NodeId,
    target: &ArrayD<T>,
    g: ArrayD<T>,
) {
    if !needs[pred.0] {
        return;
    }
    let gval = *g.iter().next().expect("scalar grad");
    let clamp = log_clamp::<T>();
    let hi = T::one() - clamp;
    let count = T::from_usize(target.len()).unwrap();
    let mut gp = ArrayD::<T>::zeros(vals[pred.0].raw_dim());
    {
        let ps = vals[pred.0].as_slice().expect("standard layout");
        let ts = target.as_slice().expect("standard layout");
        let gs = gp.as_slice_mut().expect("standard layout");
        for i in 0..ps.len() {
            let p = ps[i];
            // gradient passes only inside the clamp window
            if p >= clamp && p <= hi {
                gs[i] = gval * (-(ts[i] / p) + (T::one() - ts[i]) / (T::one() - p)) / count;
            }
        }
    }
    accumulate(grads, needs, pred, gp);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn cross_entropy_is_zero_for_degenerate_single_class() {
        let mut g = Graph::<f64>::new(true);
        let logits = g.variable(arr2(&[[3.7]]).into_dyn());
        let loss = g.cross_entropy(logits, &[0]);
        assert!(g.scalar(loss).abs() < 1e-15);
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        let mut g = Graph::<f64>::new(true);
        let pred = g.variable(ArrayD::from_elem(IxDyn(&[2, 3]), 0.5));
        let mut target = ArrayD::zeros(IxDyn(&[2, 3]));
        target[[0, 1]] = 1.0;
        let loss = g.bce_mean(pred, target);
        assert!((g.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn neg_sqdist_prefers_equal_vectors() {
        let mut g = Graph::<f64>::new(false);
        let q = g.input(arr2(&[[1.0, 2.0]]).into_dyn());
        let p = g.input(arr2(&[[1.0, 2.0], [0.0, 0.0]]).into_dyn());
        let z = g.neg_sqdist(q, p);
        assert_eq!(g.value(z)[[0, 0]], 0.0);
        assert!(g.value(z)[[0, 1]] < 0.0);
    }

    #[test]
    fn cosine_logits_scale_invariant_in_inputs() {
        let mut g = Graph::<f64>::new(false);
        let x = g.input(arr2(&[[1.0, 2.0], [3.0, 1.0]]).into_dyn());
        let x_scaled = g.input(arr2(&[[10.0, 20.0], [30.0, 10.0]]).into_dyn());
        let w = g.input(arr2(&[[0.5, -0.5], [1.0, 1.0]]).into_dyn());
        let s = g.input(arr1(&[10.0]).into_dyn());
        let z1 = g.cosine_logits(x, w, s);
        let z2 = g.cosine_logits(x_scaled, w, s);
        for (a, b) in g.value(z1).iter().zip(g.value(z2).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_rows_groups_averages() {
        let mut g = Graph::<f64>::new(false);
        let x = g.input(arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).into_dyn());
        let p = g.mean_rows_groups(x, vec![vec![0, 2], vec![1]]);
        assert_eq!(g.value(p)[[0, 0]], 3.0);
        assert_eq!(g.value(p)[[0, 1]], 4.0);
        assert_eq!(g.value(p)[[1, 0]], 3.0);
    }
}
