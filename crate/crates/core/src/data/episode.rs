//! Deterministic N-way K-shot episode sampling.

use super::types::{Episode, ImageSample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::util::rng_for;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

/// Draw an episode from a sample pool. Classes and instances are shuffled
/// under a seed-derived stream, so identical `(pool, args, seed)` yield
/// identical episodes. Errors name the first class that cannot supply
/// `k_shot + q_query` samples.
pub fn sample_episode<T: Scalar>(
    pool: &[ImageSample<T>],
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || q_query == 0 {
        return Err(Error::invalid("n_way, k_shot and q_query must be positive"));
    }
    let need = k_shot + q_query;
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        by_class.entry(s.class_id).or_default().push(i);
    }
    let mut eligible = Vec::new();
    let mut short: Option<(u32, usize)> = None;
    for (&cid, members) in &by_class {
        if members.len() >= need {
            eligible.push(cid);
        } else if short.is_none() {
            short = Some((cid, members.len()));
        }
    }
    if eligible.len() < n_way {
        let detail = match short {
            Some((cid, have)) => format!(
                "class {cid} has only {have} samples (need {need})"
            ),
            None => format!("pool holds {} classes", by_class.len()),
        };
        return Err(Error::data(format!(
            "cannot sample a {n_way}-way episode: {detail}"
        )));
    }

    let mut rng = rng_for(seed, "episode", 0);
    eligible.shuffle(&mut rng);
    let chosen = &eligible[..n_way];
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * q_query);
    for (class_idx, &cid) in chosen.iter().enumerate() {
        let mut members = by_class[&cid].clone();
        members.shuffle(&mut rng);
        for &i in &members[..k_shot] {
            support.push((i, class_idx));
        }
        for &i in &members[k_shot..need] {
            query.push((i, class_idx));
        }
    }
    let episode = Episode {
        support,
        query,
        n_way,
        k_shot,
        q_query,
    };
    episode.validate()?;
    Ok(episode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn pool(classes: usize, per_class: usize) -> Vec<ImageSample<f64>> {
        let mut v = Vec::new();
        for c in 0..classes {
            for _ in 0..per_class {
                v.push(ImageSample {
                    image: Array3::zeros((2, 2, 3)),
                    class_id: c as u32,
                    keypoints: None,
                    bbox: None,
                    path: None,
                });
            }
        }
        v
    }

    #[test]
    fn paper_episode_composition() {
        let p = pool(25, 20);
        let ep = sample_episode(&p, 20, 5, 15, 3).unwrap();
        assert_eq!(ep.support.len(), 100);
        assert_eq!(ep.query.len(), 300);
    }

    #[test]
    fn minimal_episode_is_disjoint() {
        let p = pool(1, 2);
        let ep = sample_episode(&p, 1, 1, 1, 0).unwrap();
        assert_eq!(ep.support.len(), 1);
        assert_eq!(ep.query.len(), 1);
        assert_ne!(ep.support[0].0, ep.query[0].0);
    }

    #[test]
    fn same_seed_same_episode() {
        let p = pool(8, 10);
        let a = sample_episode(&p, 4, 2, 3, 99).unwrap();
        let b = sample_episode(&p, 4, 2, 3, 99).unwrap();
        assert_eq!(a.support, b.support);
        assert_eq!(a.query, b.query);
        let c = sample_episode(&p, 4, 2, 3, 100).unwrap();
        assert!(a.support != c.support || a.query != c.query);
    }

    #[test]
    fn error_names_deficient_class() {
        let mut p = pool(3, 6);
        p.truncate(13); // class 2 keeps a single sample
        let err = sample_episode(&p, 3, 3, 3, 0).unwrap_err().to_string();
        assert!(err.contains("class 2"), "{err}");
    }

    #[test]
    fn episodes_never_leak_between_support_and_query() {
        let p = pool(6, 7);
        for seed in 0..20 {
            let ep = sample_episode(&p, 5, 3, 3, seed).unwrap();
            ep.validate().unwrap();
        }
    }
}
