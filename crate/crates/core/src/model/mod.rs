//! The dual-head network: a small convolutional feature extractor plus a
//! 1x1 linear pixel classifier, read through either of two weight-free
//! heads — bilinear upsampling for dense per-pixel prediction, or global
//! average pooling for image-level logits. Both heads share the same
//! parameter storage, which is what makes dense → classifier conversion
//! lossless: converting only switches the active head.

pub mod checkpoint;
pub mod layers;
pub mod train;

use ndarray::{Array1, Array2, Array3, Array4, Axis, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::resize_bilinear;
use crate::numerics::softmax_over_channels;
use crate::rng::rng_for;
use layers::{gap_forward, relu_forward, Conv2d, Linear};

pub const PROB_FLOOR: f64 = 1e-12;

/// Input pixels arrive in [0, 1]; the conv stack sees them centered and
/// rescaled to [-1, 1] so first-layer activations start in their active
/// range instead of a uniform-brightness plateau.
pub const INPUT_SCALE: f64 = 2.0;

pub(crate) fn normalize_input<F: NdFloat>(x: &Array4<F>) -> Array4<F> {
    let half = F::from(0.5).unwrap();
    let scale = F::from(INPUT_SCALE).unwrap();
    x.mapv(|v| (v - half) * scale)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub conv_channels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            conv_channels: vec![32, 64, 64, 64],
            conv_strides: vec![2, 2, 1, 1],
            kernel_size: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::Config("conv_channels must be nonempty".into()));
        }
        if self.conv_channels.len() != self.conv_strides.len() {
            return Err(Error::Config(format!(
                "conv_channels ({}) and conv_strides ({}) lengths differ",
                self.conv_channels.len(),
                self.conv_strides.len()
            )));
        }
        if self.conv_strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("conv strides must be positive".into()));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config("kernel_size must be odd and positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        Ok(())
    }
}

/// How many categories the classifier column space carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// K semantic categories (the initial classifier).
    KClass,
    /// K semantic categories plus the background category at index K.
    KPlusOne,
}

/// Which weight-free head answers by default; conversion flips this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveHead {
    Dense,
    Global,
}

#[derive(Debug, Clone)]
pub struct DualHeadModel<F: NdFloat> {
    pub convs: Vec<Conv2d<F>>,
    pub classifier: Linear<F>,
    pub num_semantic_classes: usize,
    pub mode: HeadMode,
    pub active_head: ActiveHead,
    pub config: ModelConfig,
}

impl<F: NdFloat> DualHeadModel<F> {
    pub fn new(config: &ModelConfig, k: usize, mode: HeadMode, seed: u64) -> Result<Self> {
        config.validate()?;
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {k}")));
        }
        let mut convs = Vec::with_capacity(config.conv_channels.len());
        let mut in_c = config.in_channels;
        for (layer, (&out_c, &stride)) in config
            .conv_channels
            .iter()
            .zip(config.conv_strides.iter())
            .enumerate()
        {
            let mut rng = rng_for(seed, &format!("conv{layer}"));
            convs.push(Conv2d::new(in_c, out_c, config.kernel_size, stride, &mut rng));
            in_c = out_c;
        }
        let out_dim = match mode {
            HeadMode::KClass => k,
            HeadMode::KPlusOne => k + 1,
        };
        let mut rng = rng_for(seed, "classifier");
        let classifier = Linear::new(in_c, out_dim, &mut rng);
        let active_head = match mode {
            HeadMode::KClass => ActiveHead::Global,
            HeadMode::KPlusOne => ActiveHead::Dense,
        };
        Ok(DualHeadModel {
            convs,
            classifier,
            num_semantic_classes: k,
            mode,
            active_head,
            config: config.clone(),
        })
    }

    pub fn num_outputs(&self) -> usize {
        match self.mode {
            HeadMode::KClass => self.num_semantic_classes,
            HeadMode::KPlusOne => self.num_semantic_classes + 1,
        }
    }

    /// Total spatial downsampling factor of the extractor.
    pub fn stride(&self) -> usize {
        self.config.conv_strides.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        *self.config.conv_channels.last().unwrap()
    }

    fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if c != self.config.in_channels {
            return Err(Error::Input(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Input("image has an empty spatial dimension".into()));
        }
        Ok(())
    }

    /// Extractor output G for a batch: (N, C_in, H, W) -> (N, C, h, w).
    pub fn features(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let (_, c, h, w) = x.dim();
        self.check_input(c, h, w)?;
        let mut cur = normalize_input(x);
        for conv in &self.convs {
            let (out, _) = conv.forward(&cur);
            let (act, _) = relu_forward(&out);
            cur = act;
        }
        Ok(cur)
    }

    fn single_to_batch(image: &Array3<F>) -> Array4<F> {
        image.clone().insert_axis(Axis(0))
    }

    /// Global head: GAP then classifier; returns the logit vector.
    pub fn forward_global(&self, image: &Array3<F>) -> Result<Array1<F>> {
        let batch = self.forward_global_batch(&Self::single_to_batch(image))?;
        Ok(batch.index_axis(Axis(0), 0).to_owned())
    }

    pub fn forward_global_batch(&self, x: &Array4<F>) -> Result<Array2<F>> {
        let features = self.features(x)?;
        let pooled = gap_forward(&features);
        Ok(self.classifier.forward_vec(&pooled))
    }

    /// Pooled feature vector (the classifier's input) — the feature
    /// representation used by feature-space scorers.
    pub fn pooled_features(&self, image: &Array3<F>) -> Result<Array1<F>> {
        let features = self.features(&Self::single_to_batch(image))?;
        Ok(gap_forward(&features).index_axis(Axis(0), 0).to_owned())
    }

    /// Feature map G for a single image: (C, h, w).
    pub fn feature_map(&self, image: &Array3<F>) -> Result<Array3<F>> {
        let features = self.features(&Self::single_to_batch(image))?;
        Ok(features.index_axis(Axis(0), 0).to_owned())
    }

    /// Per-pixel logit map at feature resolution: (K', h, w). This is the
    /// pre-upsample map whose spatial mean equals the global logits.
    pub fn dense_logits(&self, image: &Array3<F>) -> Result<Array3<F>> {
        let features = self.features(&Self::single_to_batch(image))?;
        let map = self.classifier.forward_map(&features);
        Ok(map.index_axis(Axis(0), 0).to_owned())
    }

    /// Dense head: upsample per-pixel logits to the input size, then
    /// per-pixel softmax. Returns (K', H, W) probabilities.
    pub fn forward_dense(&self, image: &Array3<F>) -> Result<Array3<F>> {
        let (_, h, w) = image.dim();
        let logits = self.dense_logits(image)?;
        let up = resize_bilinear(&logits, h, w);
        Ok(softmax_over_channels(&up))
    }

    /// Switch the dense predictor's active head to global pooling. No
    /// weight is touched; the same storage now answers as a classifier.
    pub fn convert_dense_to_classifier(mut self) -> Result<Self> {
        if self.mode != HeadMode::KPlusOne {
            return Err(Error::Input(
                "conversion applies to (K+1)-class dense models".into(),
            ));
        }
        self.active_head = ActiveHead::Global;
        Ok(self)
    }

    pub fn param_count(&self) -> usize {
        let conv: usize = self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum();
        conv + self.classifier.weight.len() + self.classifier.bias.len()
    }

    /// Visit every parameter tensor as a flat slice, in a fixed order.
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(&'a [F])) {
        for conv in &self.convs {
            f(conv.weight.as_slice().unwrap());
            f(conv.bias.as_slice().unwrap());
        }
        f(self.classifier.weight.as_slice().unwrap());
        f(self.classifier.bias.as_slice().unwrap());
    }
}

impl DualHeadModel<f32> {
    /// SHA-256 over all parameter bytes in visit order; equal checksums
    /// mean bit-identical weights.
    pub fn weight_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.visit_params(|slice| {
            for v in slice {
                hasher.update(v.to_le_bytes());
            }
        });
        format!("{:x}", hasher.finalize())
    }
}

/// Mean per-pixel negative log-likelihood of a label map under a dense
/// probability map: −(1/HW) Σ log p_label(i,j), with a 1e-12 floor inside
/// the log so an exactly-zero probability stays finite.
pub fn pixel_ce_loss<F: NdFloat>(pred: &Array3<F>, labels: &Array2<u8>) -> Result<F> {
    let (k1, h, w) = pred.dim();
    if labels.dim() != (h, w) {
        return Err(Error::Input(format!(
            "label map {:?} does not match prediction {:?}",
            labels.dim(),
            (h, w)
        )));
    }
    let floor = F::from(PROB_FLOOR).unwrap();
    let mut total = F::zero();
    for i in 0..h {
        for j in 0..w {
            let label = labels[(i, j)] as usize;
            if label >= k1 {
                return Err(Error::Input(format!(
                    "label {label} out of range for {k1} categories"
                )));
            }
            let p = pred[(label, i, j)].max(floor);
            total = total - p.ln();
        }
    }
    Ok(total / F::from((h * w) as f64).unwrap())
}
