//! Deterministic class and reference/query splitting.

use super::types::{ImageSample, SplitAssignment};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::util::rng_for;
use rand::seq::SliceRandom;
use std::collections::{BTreeMap, BTreeSet};

/// Partition class ids by the fixed rule: even ids are base classes, ids
/// congruent to 1 mod 4 are validation, the rest are novel.
pub fn split_classes(class_ids: &[u32]) -> Result<SplitAssignment> {
    if class_ids.is_empty() {
        return Err(Error::invalid("class id list is empty"));
    }
    let mut seen = BTreeSet::new();
    for &id in class_ids {
        if !seen.insert(id) {
            return Err(Error::invalid(format!("duplicate class id {id}")));
        }
    }
    let mut split = SplitAssignment::default();
    for &id in class_ids {
        if id % 2 == 0 {
            split.base.insert(id);
        } else if id % 4 == 1 {
            split.validation.insert(id);
        } else {
            split.novel.insert(id);
        }
    }
    Ok(split)
}

/// Split every class into reference and query samples: `ceil(fraction * n)`
/// (at least 1) go to the reference side. Deterministic in `seed`.
pub fn make_reference_query<T: Scalar>(
    samples_by_class: BTreeMap<u32, Vec<ImageSample<T>>>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<ImageSample<T>>, Vec<ImageSample<T>>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "reference fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut refer = Vec::new();
    let mut query = Vec::new();
    for (class_id, samples) in samples_by_class {
        let n = samples.len();
        if n < 2 {
            return Err(Error::data(format!(
                "class {class_id} has {n} samples; need at least 2 to split"
            )));
        }
        let take = ((fraction * n as f64).ceil() as usize).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_for(seed, "refer_query", class_id as u64);
        order.shuffle(&mut rng);
        let pick: BTreeSet<usize> = order[..take].iter().copied().collect();
        for (i, s) in samples.into_iter().enumerate() {
            if pick.contains(&i) {
                refer.push(s);
            } else {
                query.push(s);
            }
        }
    }
    Ok((refer, query))
}

/// Group a flat sample list by class id.
pub fn by_class<T: Scalar>(samples: Vec<ImageSample<T>>) -> BTreeMap<u32, Vec<ImageSample<T>>> {
    let mut map: BTreeMap<u32, Vec<ImageSample<T>>> = BTreeMap::new();
    for s in samples {
        map.entry(s.class_id).or_default().push(s);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sample(class_id: u32) -> ImageSample<f64> {
        ImageSample {
            image: Array3::zeros((4, 4, 3)),
            class_id,
            keypoints: None,
            bbox: None,
            path: None,
        }
    }

    #[test]
    fn split_rule_on_one_through_eight() {
        let split = split_classes(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert_eq!(split.base, [2, 4, 6, 8].into_iter().collect());
        assert_eq!(split.validation, [1, 5].into_iter().collect());
        assert_eq!(split.novel, [3, 7].into_iter().collect());
    }

    #[test]
    fn split_rule_on_cub_ids() {
        let ids: Vec<u32> = (1..=200).collect();
        let split = split_classes(&ids).unwrap();
        assert_eq!(split.base.len(), 100);
        assert_eq!(split.validation.len(), 50);
        assert_eq!(split.novel.len(), 50);
    }

    #[test]
    fn split_zero_goes_to_base() {
        let split = split_classes(&[0]).unwrap();
        assert!(split.base.contains(&0));
        assert!(split.validation.is_empty());
        assert!(split.novel.is_empty());
    }

    #[test]
    fn split_rejects_duplicates_and_empty() {
        assert!(split_classes(&[1, 1]).is_err());
        assert!(split_classes(&[]).is_err());
    }

    #[test]
    fn reference_counts_follow_ceil_with_min_one() {
        let mut map = BTreeMap::new();
        map.insert(7u32, (0..10).map(|_| sample(7)).collect::<Vec<_>>());
        map.insert(9u32, (0..5).map(|_| sample(9)).collect::<Vec<_>>());
        let (refer, query) = make_reference_query(map, 0.2, 42).unwrap();
        let r7 = refer.iter().filter(|s| s.class_id == 7).count();
        let r9 = refer.iter().filter(|s| s.class_id == 9).count();
        assert_eq!(r7, 2);
        assert_eq!(r9, 1);
        assert_eq!(query.iter().filter(|s| s.class_id == 7).count(), 8);
        assert_eq!(query.iter().filter(|s| s.class_id == 9).count(), 4);
    }

    #[test]
    fn reference_split_is_deterministic() {
        let build = || {
            let mut map = BTreeMap::new();
            for c in 0..4u32 {
                map.insert(
                    c,
                    (0..9)
                        .map(|i| {
                            let mut s = sample(c);
                            s.path = Some(format!("{c}/{i}"));
                            s
                        })
                        .collect::<Vec<_>>(),
                );
            }
            map
        };
        let (r1, q1) = make_reference_query(build(), 0.2, 7).unwrap();
        let (r2, q2) = make_reference_query(build(), 0.2, 7).unwrap();
        let paths = |v: &[ImageSample<f64>]| -> Vec<String> {
            v.iter().map(|s| s.path.clone().unwrap()).collect()
        };
        assert_eq!(paths(&r1), paths(&r2));
        assert_eq!(paths(&q1), paths(&q2));
        let (r3, _) = make_reference_query(build(), 0.2, 8).unwrap();
        assert_ne!(paths(&r1), paths(&r3), "different seed moves the split");
    }

    #[test]
    fn class_smaller_than_two_is_an_error() {
        let mut map = BTreeMap::new();
        map.insert(3u32, vec![sample(3)]);
        assert!(make_reference_query(map, 0.2, 0).is_err());
    }
}
