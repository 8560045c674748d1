//! Detection metrics over flat score lists. Convention throughout: ID
//! examples are the positives and a higher score means more
//! in-distribution, so an OOD example scoring above the threshold is a
//! false positive.

pub mod report;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::model::DualHeadModel;

fn checked(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Input(format!("{what} scores are empty")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{what} scores contain a non-finite value")));
    }
    Ok(())
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Probability that an ID score exceeds an OOD score, ties worth 1/2
/// (the Mann–Whitney U statistic, computed through average ranks).
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    checked(id, "ID")?;
    checked(ood, "OOD")?;
    let mut combined: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    combined.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut id_rank_sum = 0.0;
    let mut start = 0;
    while start < combined.len() {
        let mut end = start;
        while end < combined.len() && combined[end].0 == combined[start].0 {
            end += 1;
        }
        // Ranks are 1-based; a tie group [start, end) shares the average.
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let ties_id = combined[start..end].iter().filter(|(_, is_id)| *is_id).count();
        id_rank_sum += avg_rank * ties_id as f64;
        start = end;
    }
    let n = id.len() as f64;
    let m = ood.len() as f64;
    let u = id_rank_sum - n * (n + 1.0) / 2.0;
    Ok(u / (n * m))
}

/// Area under the ID-positive precision-recall curve: a step-wise sweep
/// over descending score thresholds, tie groups entering together.
pub fn aupr(id: &[f64], ood: &[f64]) -> Result<f64> {
    checked(id, "ID")?;
    checked(ood, "OOD")?;
    let id_desc = {
        let mut v = sorted(id);
        v.reverse();
        v
    };
    let ood_desc = {
        let mut v = sorted(ood);
        v.reverse();
        v
    };
    let n_id = id_desc.len() as f64;

    let (mut i, mut j) = (0usize, 0usize);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    while i < id_desc.len() || j < ood_desc.len() {
        let value = match (id_desc.get(i), ood_desc.get(j)) {
            (Some(&a), Some(&b)) => a.max(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        while i < id_desc.len() && id_desc[i] == value {
            tp += 1;
            i += 1;
        }
        while j < ood_desc.len() && ood_desc[j] == value {
            fp += 1;
            j += 1;
        }
        let recall = tp as f64 / n_id;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// The largest threshold t with fraction(id ≥ t) ≥ level: the m-th
/// largest ID score for the smallest sufficient m.
pub fn tpr_threshold(id: &[f64], level: f64) -> Result<f64> {
    checked(id, "ID")?;
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::Input(format!("TPR level must be in (0, 1], got {level}")));
    }
    let n = id.len();
    let m = (1..=n)
        .find(|&m| m as f64 / n as f64 >= level)
        .expect("level <= 1 always reachable at m = n");
    let asc = sorted(id);
    Ok(asc[n - m])
}

/// False positive rate at the threshold that keeps `level` of the ID mass.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], level: f64) -> Result<f64> {
    checked(ood, "OOD")?;
    let t = tpr_threshold(id, level)?;
    let above = ood.iter().filter(|&&s| s >= t).count();
    Ok(above as f64 / ood.len() as f64)
}

/// Decision rule: 1 (OOD) iff score < threshold; the boundary stays ID so
/// the TPR-level threshold keeps exactly the ID mass it was chosen for.
pub fn detect(score: f64, threshold: f64) -> u8 {
    if score < threshold {
        1
    } else {
        0
    }
}

/// Top-1 accuracy over the first K logits; the domain logit never
/// participates in classification.
pub fn top1_from_logits(rows: &[(Vec<f64>, usize)], k: usize) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let mut hits = 0usize;
    for (logits, label) in rows {
        if logits.len() < k {
            return Err(Error::Input(format!(
                "logit vector of length {} cannot cover {k} classes",
                logits.len()
            )));
        }
        if *label >= k {
            return Err(Error::Input(format!("label {label} out of range for {k} classes")));
        }
        let mut best = 0usize;
        for c in 1..k {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        if best == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}

/// Run the classifier over labeled images and report top-1 accuracy on
/// the semantic classes.
pub fn top1_accuracy<'a>(
    model: &DualHeadModel<f32>,
    samples: impl IntoIterator<Item = (&'a Array3<f32>, usize)>,
) -> Result<f64> {
    let k = model.num_semantic_classes;
    let mut rows = Vec::new();
    for (image, label) in samples {
        let logits = model.forward_global(image)?;
        rows.push((logits.iter().map(|&v| v as f64).collect(), label));
    }
    top1_from_logits(&rows, k)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Histogram {
    /// bins+1 edges; bin i covers [edges[i], edges[i+1]), the last bin
    /// closing on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram over [min, max]. A constant sample widens the
/// range by ±0.5 so the bins keep nonzero width.
pub fn histogram(scores: &[f64], bins: usize) -> Result<Histogram> {
    checked(scores, "histogram")?;
    if bins == 0 {
        return Err(Error::Input("histogram needs at least one bin".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let raw = ((s - lo) / width) as usize;
        counts[raw.min(bins - 1)] += 1;
    }
    Ok(Histogram { edges, counts })
}
