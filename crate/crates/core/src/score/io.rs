//! Flat score tables: one CSV record per example carrying both scores,
//! the fused score, and an echo of the scorer + fusion configuration, so
//! each file is self-describing and evaluation needs no side channel.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{FusionConfig, ScoreRow, ScoreSet, ValueType};

#[derive(Debug, Serialize, Deserialize)]
struct CsvRecord {
    example_id: String,
    split: String,
    s_h: f64,
    s_d: f64,
    s: f64,
    scorer: String,
    value_type: String,
    temperature: f64,
    domain_floor: f64,
}

pub fn save_scores(path: &Path, set: &ScoreSet) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("opening {}: {e}", path.display())))?;
    for row in &set.rows {
        writer
            .serialize(CsvRecord {
                example_id: row.id.clone(),
                split: row.split.clone(),
                s_h: row.s_h,
                s_d: row.s_d,
                s: row.s,
                scorer: set.scorer.clone(),
                value_type: set.value_type.id().to_string(),
                temperature: set.fusion.temperature,
                domain_floor: set.fusion.domain_floor,
            })
            .map_err(|e| Error::Data(format!("writing score row: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Data(format!("flushing {}: {e}", path.display())))?;
    Ok(())
}

pub fn load_scores(path: &Path) -> Result<ScoreSet> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("opening {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    let mut header: Option<(String, ValueType, FusionConfig)> = None;
    for record in reader.deserialize::<CsvRecord>() {
        let record = record.map_err(|e| Error::Data(format!("reading score row: {e}")))?;
        let value_type = ValueType::parse(&record.value_type)?;
        let fusion = FusionConfig {
            temperature: record.temperature,
            domain_floor: record.domain_floor,
        };
        match &header {
            None => header = Some((record.scorer.clone(), value_type, fusion)),
            Some((scorer, vt, cfg)) => {
                if *scorer != record.scorer || *vt != value_type || *cfg != fusion {
                    return Err(Error::Data(format!(
                        "mixed scorer configurations in {}",
                        path.display()
                    )));
                }
            }
        }
        rows.push(ScoreRow {
            id: record.example_id,
            split: record.split,
            s_h: record.s_h,
            s_d: record.s_d,
            s: record.s,
        });
    }
    let (scorer, value_type, fusion) =
        header.ok_or_else(|| Error::Data(format!("empty score table {}", path.display())))?;
    let mut set = ScoreSet {
        scorer,
        value_type,
        fusion,
        rows,
        clamp_events: 0,
    };
    set.recount_clamps();
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::fuse;

    fn sample_set() -> ScoreSet {
        let fusion = FusionConfig::default();
        let rows: Vec<ScoreRow> = [
            ("id_000", "id_test", 0.91, 3.2),
            ("sem_001", "ood_semantic", 0.44, -1.5),
            ("dom_002", "ood_domain", 0.63, 0.0000001),
        ]
        .iter()
        .map(|&(id, split, s_h, s_d)| ScoreRow {
            id: id.to_string(),
            split: split.to_string(),
            s_h,
            s_d,
            s: fuse(s_h, s_d, ValueType::SoftmaxBased, &fusion),
        })
        .collect();
        let mut set = ScoreSet {
            scorer: "msp".to_string(),
            value_type: ValueType::SoftmaxBased,
            fusion,
            rows,
            clamp_events: 0,
        };
        set.recount_clamps();
        set
    }

    #[test]
    fn score_table_round_trips_and_stays_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let set = sample_set();
        save_scores(&path, &set).unwrap();
        let loaded = load_scores(&path).unwrap();
        assert_eq!(loaded.scorer, "msp");
        assert_eq!(loaded.rows, set.rows);
        assert_eq!(loaded.clamp_events, 2);
        for row in &loaded.rows {
            let again = fuse(row.s_h, row.s_d, loaded.value_type, &loaded.fusion);
            assert!((again - row.s).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_configurations_in_one_table_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let set = sample_set();
        save_scores(&path, &set).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("x,id_test,0.1,0.2,0.3,energy,logit_based,2.5,0.000001\n");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_scores(&path), Err(Error::Data(_))));
    }

    #[test]
    fn empty_tables_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        std::fs::write(&path, "example_id,split,s_h,s_d,s,scorer,value_type,temperature,domain_floor\n").unwrap();
        assert!(matches!(load_scores(&path), Err(Error::Data(_))));
    }
}
