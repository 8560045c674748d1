//! Pseudo-mask persistence: per-example 8-bit rasters (0 = background,
//! 255 = foreground) plus a manifest recording the generating config and
//! quality statistics against the synthetic ground truth.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskEntry {
    pub id: String,
    pub label: usize,
    pub mask_file: String,
    /// IoU against the example's true mask, when ground truth exists.
    pub iou_vs_truth: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskManifest {
    pub config: MaskConfig,
    pub entries: Vec<MaskEntry>,
    /// Mean of `iou_vs_truth` over entries that have one.
    pub mean_iou: Option<f64>,
    /// Mean ground-truth foreground fraction — the chance-level IoU a
    /// degenerate all-foreground mask would approach.
    pub mean_fg_fraction: Option<f64>,
}

fn mask_to_png(mask: &Array2<u8>) -> image::GrayImage {
    let (h, w) = mask.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[(y as usize, x as usize)] == 1 { 255 } else { 0 }])
    })
}

fn png_to_mask(img: &image::GrayImage) -> Result<Array2<u8>> {
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = match px.0[0] {
            0 => 0,
            255 => 1,
            other => {
                return Err(Error::Data(format!(
                    "pseudo-mask pixel must be 0 or 255, found {other}"
                )))
            }
        };
    }
    Ok(out)
}

/// Write masks and their manifest into `dir`. `masks` pairs example ids
/// with (label, mask, optional IoU against truth).
pub fn save_masks(
    dir: &Path,
    config: &MaskConfig,
    masks: &[(String, usize, Array2<u8>, Option<f64>)],
) -> Result<()> {
    let files_dir = dir.join("files");
    fs::create_dir_all(&files_dir)?;
    let mut entries = Vec::with_capacity(masks.len());
    for (id, label, mask, iou) in masks {
        let mask_file = format!("files/{id}.png");
        mask_to_png(mask)
            .save(dir.join(&mask_file))
            .map_err(|e| Error::Data(format!("writing {mask_file}: {e}")))?;
        entries.push(MaskEntry {
            id: id.clone(),
            label: *label,
            mask_file,
            iou_vs_truth: *iou,
        });
    }
    let with_iou: Vec<f64> = entries.iter().filter_map(|e| e.iou_vs_truth).collect();
    let mean_iou = if with_iou.is_empty() {
        None
    } else {
        Some(with_iou.iter().sum::<f64>() / with_iou.len() as f64)
    };
    let manifest = MaskManifest {
        config: config.clone(),
        entries,
        mean_iou,
        mean_fg_fraction: None,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Update the stored manifest's chance-level statistic.
pub fn set_mean_fg_fraction(dir: &Path, value: f64) -> Result<()> {
    let path = dir.join("manifest.json");
    let raw = fs::read_to_string(&path)?;
    let mut manifest: MaskManifest = serde_json::from_str(&raw)?;
    manifest.mean_fg_fraction = Some(value);
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_masks(dir: &Path) -> Result<(MaskManifest, Vec<Array2<u8>>)> {
    let path = dir.join("manifest.json");
    let raw = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    let manifest: MaskManifest = serde_json::from_str(&raw)?;
    let mut masks = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let img = image::open(dir.join(&entry.mask_file))
            .map_err(|e| Error::Data(format!("reading {}: {e}", entry.mask_file)))?
            .into_luma8();
        masks.push(png_to_mask(&img)?);
    }
    Ok((manifest, masks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn masks_round_trip_with_statistics() {
        let dir = tempfile::tempdir().unwrap();
        let a = array![[1u8, 0], [0, 1]];
        let b = array![[0u8, 0], [1, 1]];
        let masks = vec![
            ("ex_a".to_string(), 0usize, a.clone(), Some(0.75)),
            ("ex_b".to_string(), 2usize, b.clone(), Some(0.25)),
        ];
        save_masks(dir.path(), &MaskConfig::default(), &masks).unwrap();
        set_mean_fg_fraction(dir.path(), 0.2).unwrap();

        let (manifest, loaded) = load_masks(dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        assert_eq!(loaded[0], a);
        assert_eq!(loaded[1], b);
        assert!((manifest.mean_iou.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(manifest.mean_fg_fraction, Some(0.2));
        assert_eq!(manifest.entries[1].label, 2);
    }

    #[test]
    fn missing_manifest_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_masks(dir.path()), Err(Error::Data(_))));
    }
}
