//! All-way evaluation, report statistics, and the interpretability analyses
//! (part importance, part-vector nearest neighbors).

use crate::error::{Error, Result};
use crate::data::ImageSample;
use crate::learners::{FinetuneSpec, TrainConfig};
use crate::model::{Algorithm, Model};
use crate::scalar::Scalar;
use crate::util::{config_hash, rng_for};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

/// Reference budget per class during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shots {
    K(usize),
    All,
}

impl std::fmt::Display for Shots {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shots::K(k) => write!(f, "{k}"),
            Shots::All => f.write_str("all"),
        }
    }
}

impl FromStr for Shots {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Shots::All);
        }
        s.parse::<usize>()
            .map(Shots::K)
            .map_err(|_| Error::invalid(format!("bad shots value '{s}' (use a number or 'all')")))
    }
}

pub const EVAL_REPORT_VERSION: u32 = 1;

/// Accuracy statistics plus provenance; serializes to versioned JSON.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub shots: String,
    pub mean_accuracy: f64,
    pub per_class_accuracy: f64,
    pub ci95: f64,
    pub n_trials: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| (0.0..=100.0).contains(&v);
        if !in_range(self.mean_accuracy) || !in_range(self.per_class_accuracy) || self.ci95 < 0.0 {
            return Err(Error::data(format!("report out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("report serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let report: EvalReport =
            serde_json::from_str(&text).map_err(|e| Error::data(format!("bad report: {e}")))?;
        if report.schema_version != EVAL_REPORT_VERSION {
            return Err(Error::data(format!(
                "unsupported report version {}",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalSettings {
    pub shots: Shots,
    pub n_trials: usize,
    pub seed: u64,
}

/// Nearest-centroid accuracy of query features against per-class reference
/// centroids (percent).
pub fn centroid_accuracy<T: Scalar>(
    refer_feats: &Array2<T>,
    refer_labels: &[u32],
    query_feats: &Array2<T>,
    query_labels: &[u32],
) -> Result<f64> {
    let classes = distinct(refer_labels);
    let preds = centroid_predict(refer_feats, refer_labels, query_feats, &classes)?;
    let correct = preds
        .iter()
        .zip(query_labels)
        .filter(|&(p, t)| classes[*p] == *t)
        .count();
    Ok(100.0 * correct as f64 / query_labels.len().max(1) as f64)
}

fn distinct(labels: &[u32]) -> Vec<u32> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Predict class indices (into `classes`) by nearest centroid under squared
/// Euclidean distance; ties go to the first class in sorted order.
pub fn centroid_predict<T: Scalar>(
    refer_feats: &Array2<T>,
    refer_labels: &[u32],
    query_feats: &Array2<T>,
    classes: &[u32],
) -> Result<Vec<usize>> {
    if refer_feats.nrows() != refer_labels.len() {
        return Err(Error::shape(
            format!("{} labels", refer_feats.nrows()),
            format!("{}", refer_labels.len()),
        ));
    }
    let d = refer_feats.ncols();
    let mut centroids = Array2::<T>::zeros((classes.len(), d));
    for (k, &cid) in classes.iter().enumerate() {
        let rows: Vec<usize> = refer_labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == cid).then_some(i))
            .collect();
        if rows.is_empty() {
            return Err(Error::data(format!("class {cid} has no reference samples")));
        }
        let denom = T::from_usize(rows.len()).unwrap();
        let mut c = centroids.row_mut(k);
        for &r in &rows {
            c += &refer_feats.row(r);
        }
        c.mapv_inplace(|v| v / denom);
    }
    Ok(query_feats
        .rows()
        .into_iter()
        .map(|q| {
            let mut best = 0usize;
            let mut best_d = T::infinity();
            for (k, c) in centroids.rows().into_iter().enumerate() {
                let dist = q
                    .iter()
                    .zip(c.iter())
                    .fold(T::zero(), |a, (&x, &y)| a + (x - y) * (x - y));
                if dist < best_d {
                    best_d = dist;
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Per-trial adaptation and prediction for the model's learner type.
fn adapt_predict<T: Scalar>(
    model: &Model<T>,
    support_feats: &Array2<T>,
    support_labels: &[u32],
    query_feats: &Array2<T>,
    classes: &[u32],
    finetune: &FinetuneSpec,
    trial_seed: u64,
) -> Result<Vec<usize>> {
    match model.spec.algorithm {
        Algorithm::Proto => centroid_predict(support_feats, support_labels, query_feats, classes),
        Algorithm::Transfer => {
            let head = crate::learners::transfer::fit_linear_head(
                support_feats,
                support_labels,
                finetune.epochs,
                finetune.lr,
                finetune.batch,
                trial_seed,
            )?;
            debug_assert_eq!(head.class_ids, classes);
            let mut preds = Vec::with_capacity(query_feats.nrows());
            for q in query_feats.rows() {
                let mut best = 0usize;
                let mut best_v = T::neg_infinity();
                for (k, w) in head.weight.rows().into_iter().enumerate() {
                    let v = q
                        .iter()
                        .zip(w.iter())
                        .fold(T::zero(), |a, (&x, &y)| a + x * y)
                        + head.bias[k];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                preds.push(best);
            }
            Ok(preds)
        }
        Algorithm::Dynamic => crate::learners::dynamic_generate_predict(
            model,
            support_feats,
            support_labels,
            query_feats,
        ),
    }
}

/// All-way evaluation: score the full query set against every class at once.
///
/// For 1/5-shot settings each trial samples that many reference images per
/// class and re-adapts the learner; `shots = all` is a single deterministic
/// pass over the full reference set. The report carries the mean accuracy,
/// mean per-class accuracy, and the normal-approximation 95% interval
/// `1.96 * sigma / sqrt(n)` over trials (zero for a single trial).
pub fn evaluate_allway<T: Scalar>(
    model: &mut Model<T>,
    refer: &[&ImageSample<T>],
    query: &[&ImageSample<T>],
    settings: &EvalSettings,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    if refer.is_empty() || query.is_empty() {
        return Err(Error::data("evaluation needs reference and query samples"));
    }
    let refer_labels: Vec<u32> = refer.iter().map(|s| s.class_id).collect();
    let query_labels: Vec<u32> = query.iter().map(|s| s.class_id).collect();
    let classes = distinct(&refer_labels);
    for q in &query_labels {
        if !classes.contains(q) {
            return Err(Error::data(format!(
                "query class {q} has no reference samples"
            )));
        }
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in refer_labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if let Shots::K(k) = settings.shots {
        for (cid, members) in &by_class {
            if members.len() < k {
                return Err(Error::data(format!(
                    "class {cid} has {} reference images, fewer than {k} shots",
                    members.len()
                )));
            }
        }
    }

    let refer_feats = model.extract_features(refer)?;
    let query_feats = model.extract_features(query)?;

    let n_trials = match settings.shots {
        Shots::All => 1,
        Shots::K(_) => settings.n_trials.max(1),
    };
    let mut trial_means = Vec::with_capacity(n_trials);
    let mut trial_per_class = Vec::with_capacity(n_trials);
    for t in 0..n_trials {
        let (support_feats, support_labels) = match settings.shots {
            Shots::All => (refer_feats.clone(), refer_labels.clone()),
            Shots::K(k) => {
                let mut rng = rng_for(settings.seed, "trial", t as u64);
                let mut rows = Vec::new();
                for members in by_class.values() {
                    let mut m = members.clone();
                    m.shuffle(&mut rng);
                    rows.extend(m.into_iter().take(k));
                }
                let mut feats = Array2::<T>::zeros((rows.len(), refer_feats.ncols()));
                let mut labels = Vec::with_capacity(rows.len());
                for (o, &r) in rows.iter().enumerate() {
                    feats.row_mut(o).assign(&refer_feats.row(r));
                    labels.push(refer_labels[r]);
                }
                (feats, labels)
            }
        };
        let preds = adapt_predict(
            model,
            &support_feats,
            &support_labels,
            &query_feats,
            &classes,
            &cfg.finetune,
            crate::util::derive_seed(settings.seed, "adapt", t as u64),
        )?;
        let (mean, per_class) = accuracy_stats(&preds, &query_labels, &classes);
        trial_means.push(mean);
        trial_per_class.push(per_class);
    }

    let mean_accuracy = mean(&trial_means);
    let per_class_accuracy = mean(&trial_per_class);
    let ci95 = if trial_means.len() > 1 {
        let m = mean_accuracy;
        let var = trial_means.iter().map(|a| (a - m) * (a - m)).sum::<f64>()
            / (trial_means.len() - 1) as f64;
        1.96 * var.sqrt() / (trial_means.len() as f64).sqrt()
    } else {
        0.0
    };
    let report = EvalReport {
        schema_version: EVAL_REPORT_VERSION,
        shots: settings.shots.to_string(),
        mean_accuracy,
        per_class_accuracy,
        ci95,
        n_trials,
        seed: settings.seed,
        config_hash: config_hash(&model.meta.provenance),
    };
    report.validate()?;
    Ok(report)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn accuracy_stats(preds: &[usize], query_labels: &[u32], classes: &[u32]) -> (f64, f64) {
    let mut correct = 0usize;
    let mut per_class: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in preds.iter().zip(query_labels.iter()) {
        let entry = per_class.entry(t).or_insert((0, 0));
        entry.1 += 1;
        if classes[p] == t {
            correct += 1;
            entry.0 += 1;
        }
    }
    let mean_acc = 100.0 * correct as f64 / query_labels.len().max(1) as f64;
    let per_class_acc = per_class
        .values()
        .map(|&(c, n)| 100.0 * c as f64 / n.max(1) as f64)
        .sum::<f64>()
        / per_class.len().max(1) as f64;
    (mean_acc, per_class_acc)
}

/// Accuracy drop for one class when each part's feature block is removed.
///
/// For every part the corresponding C-sized block is zeroed in all reference
/// and query representations, the all-way all-shot evaluation is re-run, and
/// the drop in the class's accuracy is recorded (negative drops are
/// possible).
pub fn part_importance<T: Scalar>(
    model: &mut Model<T>,
    refer: &[&ImageSample<T>],
    query: &[&ImageSample<T>],
    class_id: u32,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let layout = model.feature_layout();
    let (parts, _) = layout.part_blocks().ok_or_else(|| {
        Error::invalid(format!(
            "part importance needs a part-structured layout, not {layout:?}"
        ))
    })?;
    let refer_labels: Vec<u32> = refer.iter().map(|s| s.class_id).collect();
    let query_labels: Vec<u32> = query.iter().map(|s| s.class_id).collect();
    if !query_labels.contains(&class_id) {
        return Err(Error::data(format!(
            "class {class_id} has no query samples"
        )));
    }
    let classes = distinct(&refer_labels);
    let refer_feats = model.extract_features(refer)?;
    let query_feats = model.extract_features(query)?;
    let seed = crate::util::derive_seed(cfg.seed, "importance", class_id as u64);

    let class_acc = |rf: &Array2<T>, qf: &Array2<T>| -> Result<f64> {
        let preds = adapt_predict(model, rf, &refer_labels, qf, &classes, &cfg.finetune, seed)?;
        let mut correct = 0usize;
        let mut total = 0usize;
        for (&p, &t) in preds.iter().zip(query_labels.iter()) {
            if t == class_id {
                total += 1;
                if classes[p] == t {
                    correct += 1;
                }
            }
        }
        Ok(100.0 * correct as f64 / total.max(1) as f64)
    };

    let baseline = class_acc(&refer_feats, &query_feats)?;
    let mut drops = Vec::with_capacity(parts);
    for part in 0..parts {
        let mut rf = refer_feats.clone();
        let mut qf = query_feats.clone();
        crate::model::zero_part_block(&mut rf, layout, part)?;
        crate::model::zero_part_block(&mut qf, layout, part)?;
        let masked = class_acc(&rf, &qf)?;
        drops.push(baseline - masked);
    }
    Ok(drops)
}

/// Reference samples ranked by cosine similarity of one part's feature
/// block to the query sample's. Returns `(refer index, same class, cosine)`.
pub fn nearest_part_neighbors<T: Scalar>(
    model: &mut Model<T>,
    query_sample: &ImageSample<T>,
    part_index: usize,
    refer: &[&ImageSample<T>],
    k: usize,
) -> Result<Vec<(usize, bool, f64)>> {
    let layout = model.feature_layout();
    let (parts, channels) = layout.part_blocks().ok_or_else(|| {
        Error::invalid(format!(
            "nearest part neighbors need a part-structured layout, not {layout:?}"
        ))
    })?;
    if part_index >= parts {
        return Err(Error::invalid(format!(
            "part index {part_index} out of range for {parts} parts"
        )));
    }
    if k > refer.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the reference set size {}",
            refer.len()
        )));
    }
    let q_feats = model.extract_features(&[query_sample])?;
    let r_feats = model.extract_features(refer)?;
    let block = part_index * channels..(part_index + 1) * channels;
    let qv: Vec<f64> = q_feats.row(0).slice(ndarray::s![block.clone()])
        .iter()
        .map(|&v| Scalar::to_f64(v))
        .collect();
    let qn = norm(&qv);
    let mut scored: Vec<(usize, bool, f64)> = refer
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let rv: Vec<f64> = r_feats.row(i).slice(ndarray::s![block.clone()])
                .iter()
                .map(|&v| Scalar::to_f64(v))
                .collect();
            let denom = qn * norm(&rv);
            let cos = if denom > 0.0 {
                qv.iter().zip(&rv).map(|(a, b)| a * b).sum::<f64>() / denom
            } else {
                0.0
            };
            (i, s.class_id == query_sample.class_id, cos)
        })
        .collect();
    scored.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
    scored.truncate(k);
    Ok(scored)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shots_parse() {
        assert_eq!("1".parse::<Shots>().unwrap(), Shots::K(1));
        assert_eq!("5".parse::<Shots>().unwrap(), Shots::K(5));
        assert_eq!("all".parse::<Shots>().unwrap(), Shots::All);
        assert!("many".parse::<Shots>().is_err());
    }

    #[test]
    fn centroid_predict_prefers_identical_vector() {
        let refer = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.9]]);
        let labels = [10u32, 20, 20];
        let query = ndarray::arr2(&[[0.0, 0.95], [1.0, 0.1]]);
        let classes = distinct(&labels);
        let preds = centroid_predict(&refer, &labels, &query, &classes).unwrap();
        assert_eq!(classes[preds[0]], 20);
        assert_eq!(classes[preds[1]], 10);
    }

    #[test]
    fn centroid_predictions_are_translation_invariant() {
        use rand::Rng;
        let mut rng = crate::util::rng_for(8, "eval", 0);
        let refer = Array2::from_shape_fn((12, 6), |_| rng.gen_range(-1.0f64..1.0));
        let labels: Vec<u32> = (0..12).map(|i| (i % 4) as u32).collect();
        let query = Array2::from_shape_fn((9, 6), |_| rng.gen_range(-1.0f64..1.0));
        let classes = distinct(&labels);
        let base = centroid_predict(&refer, &labels, &query, &classes).unwrap();
        let shift = ndarray::Array1::from_shape_fn(6, |i| (i as f64) * 0.37 - 1.1);
        let shifted_r = &refer + &shift;
        let shifted_q = &query + &shift;
        let moved = centroid_predict(&shifted_r, &labels, &shifted_q, &classes).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = EvalReport {
            schema_version: EVAL_REPORT_VERSION,
            shots: "all".into(),
            mean_accuracy: 63.44,
            per_class_accuracy: 61.2,
            ci95: 0.55,
            n_trials: 1,
            seed: 7,
            config_hash: "00ff00ff00ff00ff".into(),
        };
        report.write(&path).unwrap();
        assert_eq!(EvalReport::read(&path).unwrap(), report);
    }
}
