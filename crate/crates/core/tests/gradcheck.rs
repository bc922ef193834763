//! Central finite-difference checks for every differentiable op.
//!
//! The numeric oracle below evaluates the forward pass twice per perturbed
//! element and never touches the backward implementation it is judging.

use ndarray::{ArrayD, IxDyn};
use posenorm::graph::{Graph, NodeId};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

const TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn rand_array(rng: &mut ChaCha20Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences, for every element of every input.
fn check_grads<F>(inputs: &[ArrayD<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let forward = |vals: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new(true);
        let ids: Vec<NodeId> = vals.iter().map(|v| g.input(v.clone())).collect();
        let loss = build(&mut g, &ids);
        g.scalar(loss)
    };

    let mut g = Graph::new(true);
    let ids: Vec<NodeId> = inputs.iter().map(|v| g.variable(v.clone())).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(ids[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        let mut work = inputs.to_vec();
        for (j, &orig) in input.iter().enumerate() {
            let flat_view = work[i].as_slice_mut().unwrap();
            flat_view[j] = orig + FD_STEP;
            let plus = forward(&work);
            let flat_view = work[i].as_slice_mut().unwrap();
            flat_view[j] = orig - FD_STEP;
            let minus = forward(&work);
            let flat_view = work[i].as_slice_mut().unwrap();
            flat_view[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.as_slice().unwrap()[j];
            if a.abs() < 1e-7 && numeric.abs() < 1e-7 {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            worst = worst.max(rel);
            assert!(
                rel < TOL,
                "input {i} element {j}: analytic {a} vs numeric {numeric} (rel {rel:.2e})"
            );
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let x = rand_array(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
    let w = rand_array(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = rand_array(&mut rng, &[4], -0.2, 0.2);
    let probe = rand_array(&mut rng, &[2, 4, 5, 5], -1.0, 1.0);
    check_grads(&[x, w, b], |g, ids| {
        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1).unwrap();
        g.dot_const(y, probe.clone())
    });
}

#[test]
fn strided_conv2d_gradients() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let x = rand_array(&mut rng, &[1, 2, 7, 7], -1.0, 1.0);
    let w = rand_array(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let probe = rand_array(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
    check_grads(&[x, w], |g, ids| {
        let y = g.conv2d(ids[0], ids[1], None, 2, 1).unwrap();
        g.dot_const(y, probe.clone())
    });
}

#[test]
fn batch_norm_gradients_train_mode() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let x = rand_array(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
    let gamma = rand_array(&mut rng, &[2], 0.5, 1.5);
    let beta = rand_array(&mut rng, &[2], -0.3, 0.3);
    let probe = rand_array(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
    let rm = ndarray::Array1::zeros(2);
    let rv = ndarray::Array1::ones(2);
    check_grads(&[x, gamma, beta], |g, ids| {
        let (y, _) = g.batch_norm(ids[0], ids[1], ids[2], &rm, &rv, 1e-5, true);
        g.dot_const(y, probe.clone())
    });
}

#[test]
fn batch_norm_gradients_eval_mode() {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let x = rand_array(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let gamma = rand_array(&mut rng, &[2], 0.5, 1.5);
    let beta = rand_array(&mut rng, &[2], -0.3, 0.3);
    let probe = rand_array(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let rm = ndarray::arr1(&[0.1, -0.2]);
    let rv = ndarray::arr1(&[0.9, 1.4]);
    check_grads(&[x, gamma, beta], |g, ids| {
        let (y, _) = g.batch_norm(ids[0], ids[1], ids[2], &rm, &rv, 1e-5, false);
        g.dot_const(y, probe.clone())
    });
}

#[test]
fn max_pool_gradients() {
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    let x = rand_array(&mut rng, &[2, 2, 5, 5], 0.0, 1.0);
    let probe = rand_array(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
    check_grads(&[x], |g, ids| {
        let y = g.max_pool(ids[0], 2, 2, 0);
        g.dot_const(y, probe.clone())
    });
}

#[test]
fn resize_bilinear_gradients() {
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let x = rand_array(&mut rng, &[1, 3, 7, 7], -1.0, 1.0);
    let probe = rand_array(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
    check_grads(&[x], |g, ids| {
        let y = g.resize_bilinear(ids[0], 4, 4);
        g.dot_const(y, probe.clone())
    });
}

#[test]
fn attention_pool_gradients() {
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let f = rand_array(&mut rng, &[2, 4, 5, 5], -1.0, 1.0);
    let m = rand_array(&mut rng, &[2, 3, 5, 5], 0.05, 0.95);
    let probe = rand_array(&mut rng, &[2, 12], -1.0, 1.0);
    check_grads(&[f, m], |g, ids| {
        let v = g.attention_pool(ids[0], ids[1]).unwrap();
        g.dot_const(v, probe.clone())
    });
}

#[test]
fn bilinear_pool_chain_gradients() {
    // Positive inputs keep the signed sqrt away from its kink at zero.
    let mut rng = ChaCha20Rng::seed_from_u64(18);
    let x = rand_array(&mut rng, &[1, 3, 4, 4], 0.3, 1.3);
    let probe = rand_array(&mut rng, &[1, 9], -1.0, 1.0);
    check_grads(&[x], |g, ids| {
        let b = g.bilinear_pool(ids[0]);
        let s = g.signed_sqrt(b);
        let z = g.l2_normalize_rows(s);
        g.dot_const(z, probe.clone())
    });
}

#[test]
fn soft_assign_attention_chain_gradients() {
    let mut rng = ChaCha20Rng::seed_from_u64(19);
    let f = rand_array(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
    let bank = rand_array(&mut rng, &[3, 3], -0.8, 0.8);
    let probe = rand_array(&mut rng, &[1, 9], -1.0, 1.0);
    check_grads(&[f, bank], |g, ids| {
        let a = g.soft_assign(ids[0], ids[1], 0.7).unwrap();
        let v = g.attention_pool(ids[0], a).unwrap();
        g.dot_const(v, probe.clone())
    });
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha20Rng::seed_from_u64(20);
    let x = rand_array(&mut rng, &[3, 5], -1.0, 1.0);
    let w = rand_array(&mut rng, &[4, 5], -0.5, 0.5);
    let b = rand_array(&mut rng, &[4], -0.2, 0.2);
    let probe = rand_array(&mut rng, &[3, 4], -1.0, 1.0);
    check_grads(&[x, w, b], |g, ids| {
        let y = g.linear(ids[0], ids[1], Some(ids[2]));
        g.dot_const(y, probe.clone())
    });
}

#[test]
fn cosine_logits_gradients() {
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let x = rand_array(&mut rng, &[3, 4], 0.2, 1.2);
    let w = rand_array(&mut rng, &[2, 4], 0.2, 1.2);
    let s = ndarray::arr1(&[7.0]).into_dyn();
    let probe = rand_array(&mut rng, &[3, 2], -1.0, 1.0);
    check_grads(&[x, w, s], |g, ids| {
        let y = g.cosine_logits(ids[0], ids[1], ids[2]);
        g.dot_const(y, probe.clone())
    });
}

#[test]
fn prototype_cross_entropy_gradients() {
    let mut rng = ChaCha20Rng::seed_from_u64(22);
    let support = rand_array(&mut rng, &[6, 4], -1.0, 1.0);
    let query = rand_array(&mut rng, &[4, 4], -1.0, 1.0);
    check_grads(&[support, query], |g, ids| {
        let protos = g.mean_rows_groups(ids[0], vec![vec![0, 1, 2], vec![3, 4, 5]]);
        let logits = g.neg_sqdist(ids[1], protos);
        g.cross_entropy(logits, &[0, 1, 0, 1])
    });
}

#[test]
fn bce_mean_gradients() {
    let mut rng = ChaCha20Rng::seed_from_u64(23);
    let pred = rand_array(&mut rng, &[2, 3, 4], 0.05, 0.95);
    let target = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |_| {
        if rng.gen_bool(0.3) {
            1.0
        } else {
            0.0
        }
    });
    check_grads(&[pred], |g, ids| g.bce_mean(ids[0], target.clone()));
}

#[test]
fn select_rows_and_row_mix_gradients() {
    let mut rng = ChaCha20Rng::seed_from_u64(24);
    let x = rand_array(&mut rng, &[4, 3], -1.0, 1.0);
    let fixed = rand_array(&mut rng, &[4, 3], -1.0, 1.0);
    let probe = rand_array(&mut rng, &[3, 3], -1.0, 1.0);
    check_grads(&[x], |g, ids| {
        let mixed = g.row_mix(ids[0], &fixed, &[true, false, true, false]);
        let sel = g.select_rows(mixed, &[0, 2, 3]);
        g.dot_const(sel, probe.clone())
    });
}

#[test]
fn concat_rows_and_cosine_over_generated_weights() {
    // mirrors the weight-generation path: mean -> normalize -> linear ->
    // concat with fixed rows -> cosine logits -> CE
    let mut rng = ChaCha20Rng::seed_from_u64(26);
    let sup = rand_array(&mut rng, &[4, 3], 0.2, 1.0);
    let gen_w = rand_array(&mut rng, &[3, 3], -0.6, 0.6);
    let base_w = rand_array(&mut rng, &[2, 3], 0.2, 1.0);
    let queries = rand_array(&mut rng, &[3, 3], 0.2, 1.0);
    let scale = ndarray::arr1(&[5.0]).into_dyn();
    check_grads(&[sup.clone(), gen_w.clone(), base_w.clone(), scale.clone()], |g, ids| {
        let mean = g.mean_rows_groups(ids[0], vec![vec![0, 1], vec![2, 3]]);
        let unit = g.l2_normalize_rows(mean);
        let generated = g.linear(unit, ids[1], None);
        let weights = g.concat_rows(&[generated, ids[2]]);
        let q = g.input(queries.clone());
        let logits = g.cosine_logits(q, weights, ids[3]);
        g.cross_entropy(logits, &[0, 1, 3])
    });
}

#[test]
fn composite_micro_network_gradients() {
    // conv -> bn -> relu -> pool -> attention pooling -> prototype CE:
    // exercises gradient joins across the whole tape.
    let mut rng = ChaCha20Rng::seed_from_u64(25);
    let x = rand_array(&mut rng, &[4, 2, 6, 6], -1.0, 1.0);
    let w = rand_array(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let gamma = rand_array(&mut rng, &[3], 0.8, 1.2);
    let beta = rand_array(&mut rng, &[3], -0.1, 0.1);
    let wh = rand_array(&mut rng, &[2, 3, 3, 3], -0.5, 0.5);
    let rm = ndarray::Array1::zeros(3);
    let rv = ndarray::Array1::ones(3);
    check_grads(&[x, w, gamma, beta, wh], |g, ids| {
        let c = g.conv2d(ids[0], ids[1], None, 1, 1).unwrap();
        let (b, _) = g.batch_norm(c, ids[2], ids[3], &rm, &rv, 1e-5, true);
        let r = g.relu(b);
        let p = g.max_pool(r, 2, 2, 0);
        let h = g.conv2d(p, ids[4], None, 1, 1).unwrap();
        let m = g.sigmoid(h);
        let v = g.attention_pool(p, m).unwrap();
        let protos = g.mean_rows_groups(v, vec![vec![0, 1], vec![2, 3]]);
        let sel = g.select_rows(v, &[0, 3]);
        let logits = g.neg_sqdist(sel, protos);
        g.cross_entropy(logits, &[0, 1])
    });
}
