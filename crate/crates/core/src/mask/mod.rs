//! Pseudo-mask generation: project a class's classifier weights onto the
//! feature map (CAM), ensemble the map over scales and flips, smooth,
//! normalize to [0, 1], threshold into a foreground mask, and expand into
//! a (K+1)-category label map where background takes index K.

pub mod io;

use ndarray::{Array2, Array3, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::{flip_horizontal, flip_horizontal_2d, gaussian_blur_2d, resize_bilinear_2d};
use crate::model::{DualHeadModel, HeadMode};

/// Per-pixel class-evidence map.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub values: Array2<f32>,
    pub class: usize,
    pub normalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Foreground where the normalized value is >= the fixed threshold.
    Fixed,
    /// Foreground where the value is >= the map's own mean — suited to
    /// feature-rich images where a fixed cut keeps too much background.
    Mean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub scales: Vec<f64>,
    pub use_flips: bool,
    pub gaussian_sigma: f64,
    pub threshold_mode: ThresholdMode,
    pub threshold: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            scales: vec![0.5, 1.0, 1.5, 2.0],
            use_flips: true,
            gaussian_sigma: 1.0,
            threshold_mode: ThresholdMode::Fixed,
            threshold: 0.5,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("mask scales must be nonempty".into()));
        }
        if self.scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("mask scales must all be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.gaussian_sigma < 0.0 {
            return Err(Error::Config("gaussian_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Dot every spatial feature vector with one weight row: the raw CAM at
/// feature resolution. Bias is deliberately excluded.
pub fn cam_from_features<F: NdFloat>(features: &Array3<F>, weight_row: &[F]) -> Array2<F> {
    let (c, h, w) = features.dim();
    assert_eq!(weight_row.len(), c, "weight row does not match feature channels");
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = F::zero();
            for ch in 0..c {
                acc = acc + features[(ch, i, j)] * weight_row[ch];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Class activation map for class `y`, bilinearly resized to the input's
/// own resolution. Unnormalized.
pub fn cam(model: &DualHeadModel<f32>, image: &Array3<f32>, y: usize) -> Result<AttentionMap> {
    if model.mode != HeadMode::KClass {
        return Err(Error::Input(
            "attention maps are generated from the K-class classifier".into(),
        ));
    }
    if y >= model.num_semantic_classes {
        return Err(Error::Input(format!(
            "class {y} out of range for K={}",
            model.num_semantic_classes
        )));
    }
    let (_, h, w) = image.dim();
    let features = model.feature_map(image)?;
    let row: Vec<f32> = model.classifier.weight.row(y).to_vec();
    let raw = cam_from_features(&features, &row);
    Ok(AttentionMap {
        values: resize_bilinear_2d(&raw, h, w),
        class: y,
        normalized: false,
    })
}

/// Scale/flip-ensembled CAM: for every (scale, flip) variant compute the
/// map, undo the flip, resize back to the input resolution, and average;
/// the averaged map is then Gaussian-smoothed. Default config produces
/// the 8-variant ensemble (4 scales x 2 flips).
pub fn multiscale_cam(
    model: &DualHeadModel<f32>,
    image: &Array3<f32>,
    y: usize,
    cfg: &MaskConfig,
) -> Result<AttentionMap> {
    cfg.validate()?;
    let (_, h, w) = image.dim();
    let mut acc = Array2::<f32>::zeros((h, w));
    let mut count = 0usize;
    for &scale in &cfg.scales {
        let sh = (h as f64 * scale).round() as usize;
        let sw = (w as f64 * scale).round() as usize;
        if sh == 0 || sw == 0 {
            return Err(Error::Config(format!(
                "scale {scale} collapses a {h}x{w} image to zero pixels"
            )));
        }
        let scaled = if (sh, sw) == (h, w) {
            image.clone()
        } else {
            crate::imgops::resize_bilinear(image, sh, sw)
        };
        let flips: &[bool] = if cfg.use_flips { &[false, true] } else { &[false] };
        for &flip in flips {
            let variant = if flip { flip_horizontal(&scaled) } else { scaled.clone() };
            let map = cam(model, &variant, y)?.values;
            let map = if flip { flip_horizontal_2d(&map) } else { map };
            let map = if (sh, sw) == (h, w) {
                map
            } else {
                resize_bilinear_2d(&map, h, w)
            };
            acc += &map;
            count += 1;
        }
    }
    acc.mapv_inplace(|v| v / count as f32);
    let smoothed = gaussian_blur_2d(&acc, cfg.gaussian_sigma);
    Ok(AttentionMap {
        values: smoothed,
        class: y,
        normalized: false,
    })
}

/// Min-max normalize into [0, 1]; a constant map becomes all zeros so an
/// uninformative CAM claims no foreground.
pub fn normalize_map(map: &AttentionMap) -> AttentionMap {
    let min = map.values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = map.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let values = if max > min {
        map.values.mapv(|v| (v - min) / (max - min))
    } else {
        Array2::zeros(map.values.dim())
    };
    AttentionMap {
        values,
        class: map.class,
        normalized: true,
    }
}

/// Threshold a normalized map into a binary foreground mask.
pub fn threshold_mask(map: &AttentionMap, cfg: &MaskConfig) -> Result<Array2<u8>> {
    if !map.normalized {
        return Err(Error::Input("threshold_mask expects a normalized map".into()));
    }
    let theta = match cfg.threshold_mode {
        ThresholdMode::Fixed => cfg.threshold as f32,
        ThresholdMode::Mean => map.values.mean().unwrap_or(0.0),
    };
    Ok(map.values.mapv(|v| u8::from(v >= theta)))
}

/// Per-pixel pseudo-labels: foreground pixels carry the example's class,
/// background pixels carry the extra category index K.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub values: Array2<u8>,
}

pub fn build_label_map(mask: &Array2<u8>, y: usize, k: usize) -> Result<LabelMap> {
    if y >= k {
        return Err(Error::Input(format!("class {y} out of range for K={k}")));
    }
    if k > u8::MAX as usize - 1 {
        return Err(Error::Input(format!("K={k} exceeds the label map's u8 range")));
    }
    Ok(LabelMap {
        values: mask.mapv(|m| if m == 1 { y as u8 } else { k as u8 }),
    })
}

/// Intersection-over-union of two binary masks; two empty masks are
/// perfectly consistent, hence 1.
pub fn mask_iou(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::Input(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let p = p != 0;
        let t = t != 0;
        if p && t {
            inter += 1;
        }
        if p || t {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}
