//! Evaluation reports: per-OOD-split detection metrics for the domain
//! signal, each semantic scorer, and its fusion, plus score histograms
//! and run provenance. Serialized as one JSON document per run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{aupr, auroc, fpr_at_tpr, histogram, Histogram};
use crate::score::{ScoreRow, ScoreSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
}

pub fn metric_triple(id: &[f64], ood: &[f64], level: f64) -> Result<MetricTriple> {
    Ok(MetricTriple {
        fpr95: fpr_at_tpr(id, ood, level)?,
        auroc: auroc(id, ood)?,
        aupr: aupr(id, ood)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSplit {
    pub split: String,
    pub n_ood: usize,
    pub metrics: MetricTriple,
    pub ood_histogram: Histogram,
}

/// Metrics of the raw domain logit S_d — scorer-independent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainReport {
    pub n_id: usize,
    pub id_histogram: Histogram,
    pub splits: Vec<DomainSplit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScorerSplit {
    pub split: String,
    pub n_ood: usize,
    /// Detection quality of S_h alone.
    pub semantic: MetricTriple,
    /// Detection quality of the fused score S.
    pub fused: MetricTriple,
    pub ood_histogram: Histogram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScorerReport {
    pub scorer: String,
    pub value_type: String,
    pub fusion_temperature: f64,
    pub fusion_domain_floor: f64,
    pub clamp_event_count: usize,
    pub n_id: usize,
    pub id_histogram: Histogram,
    pub splits: Vec<ScorerSplit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub id_split: String,
    pub tpr_level: f64,
    pub histogram_bins: usize,
    /// Converted (K+1) model, argmax over the first K logits.
    pub id_top1_accuracy: f64,
    /// The original K-class classifier on the same split, for the
    /// accuracy-preservation comparison.
    pub vanilla_top1_accuracy: f64,
    /// Echo of the run configuration this report was produced under.
    pub config_echo: String,
    pub domain: DomainReport,
    pub scorers: Vec<ScorerReport>,
}

fn partition<'a>(
    set: &'a ScoreSet,
    id_split: &str,
) -> Result<(Vec<&'a ScoreRow>, BTreeMap<String, Vec<&'a ScoreRow>>)> {
    let mut id = Vec::new();
    let mut ood: BTreeMap<String, Vec<&ScoreRow>> = BTreeMap::new();
    for row in &set.rows {
        if row.split == id_split {
            id.push(row);
        } else {
            ood.entry(row.split.clone()).or_default().push(row);
        }
    }
    if id.is_empty() {
        return Err(Error::Input(format!(
            "score table has no rows for the ID split '{id_split}'"
        )));
    }
    Ok((id, ood))
}

pub fn domain_report(
    set: &ScoreSet,
    id_split: &str,
    level: f64,
    bins: usize,
) -> Result<DomainReport> {
    let (id, ood) = partition(set, id_split)?;
    let id_sd: Vec<f64> = id.iter().map(|r| r.s_d).collect();
    let mut splits = Vec::new();
    for (split, rows) in ood {
        let ood_sd: Vec<f64> = rows.iter().map(|r| r.s_d).collect();
        splits.push(DomainSplit {
            n_ood: rows.len(),
            metrics: metric_triple(&id_sd, &ood_sd, level)?,
            ood_histogram: histogram(&ood_sd, bins)?,
            split,
        });
    }
    Ok(DomainReport {
        n_id: id.len(),
        id_histogram: histogram(&id_sd, bins)?,
        splits,
    })
}

pub fn scorer_report(
    set: &ScoreSet,
    id_split: &str,
    level: f64,
    bins: usize,
) -> Result<ScorerReport> {
    let (id, ood) = partition(set, id_split)?;
    let id_sh: Vec<f64> = id.iter().map(|r| r.s_h).collect();
    let id_s: Vec<f64> = id.iter().map(|r| r.s).collect();
    let mut splits = Vec::new();
    for (split, rows) in ood {
        let ood_sh: Vec<f64> = rows.iter().map(|r| r.s_h).collect();
        let ood_s: Vec<f64> = rows.iter().map(|r| r.s).collect();
        splits.push(ScorerSplit {
            n_ood: rows.len(),
            semantic: metric_triple(&id_sh, &ood_sh, level)?,
            fused: metric_triple(&id_s, &ood_s, level)?,
            ood_histogram: histogram(&ood_sh, bins)?,
            split,
        });
    }
    Ok(ScorerReport {
        scorer: set.scorer.clone(),
        value_type: set.value_type.id().to_string(),
        fusion_temperature: set.fusion.temperature,
        fusion_domain_floor: set.fusion.domain_floor,
        clamp_event_count: set.clamp_events,
        n_id: id.len(),
        id_histogram: histogram(&id_sh, bins)?,
        splits,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn build_eval_report(
    sets: &[ScoreSet],
    id_split: &str,
    level: f64,
    bins: usize,
    seed: u64,
    id_top1_accuracy: f64,
    vanilla_top1_accuracy: f64,
    config_echo: String,
) -> Result<EvalReport> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Input("need at least one score table".into()))?;
    let mut scorers = Vec::with_capacity(sets.len());
    for set in sets {
        scorers.push(scorer_report(set, id_split, level, bins)?);
    }
    Ok(EvalReport {
        seed,
        id_split: id_split.to_string(),
        tpr_level: level,
        histogram_bins: bins,
        id_top1_accuracy,
        vanilla_top1_accuracy,
        config_echo,
        domain: domain_report(first, id_split, level, bins)?,
        scorers,
    })
}

pub fn save_report(path: &Path, report: &EvalReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&raw)?)
}

/// Human-readable metric table: one row for the domain signal and two per
/// scorer (semantic-only and fused) for every OOD split.
pub fn summary_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "ID top-1 accuracy: {:.4} converted vs {:.4} vanilla ({} examples)\n",
        report.id_top1_accuracy, report.vanilla_top1_accuracy, report.domain.n_id
    ));
    out.push_str(&format!(
        "{:<16} {:<10} {:<9} {:>7} {:>7} {:>7}\n",
        "split", "scorer", "signal", "fpr95", "auroc", "aupr"
    ));
    let mut line = |split: &str, scorer: &str, signal: &str, m: &MetricTriple| {
        out.push_str(&format!(
            "{:<16} {:<10} {:<9} {:>7.4} {:>7.4} {:>7.4}\n",
            split, scorer, signal, m.fpr95, m.auroc, m.aupr
        ));
    };
    for split in &report.domain.splits {
        line(&split.split, "-", "domain", &split.metrics);
    }
    for scorer in &report.scorers {
        for split in &scorer.splits {
            line(&split.split, &scorer.scorer, "semantic", &split.semantic);
            line(&split.split, &scorer.scorer, "fused", &split.fused);
        }
    }
    for scorer in &report.scorers {
        if scorer.clamp_event_count > 0 {
            out.push_str(&format!(
                "note: {} fusion floored the domain logit on {} example(s)\n",
                scorer.scorer, scorer.clamp_event_count
            ));
        }
    }
    out
}
