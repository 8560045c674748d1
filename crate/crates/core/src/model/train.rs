//! Training: explicit backward passes through both heads, SGD with
//! momentum and stepped learning-rate decay, and flip/scale (optionally
//! mixup) augmentation. The loss/gradient entry points are generic over
//! the float type so the same code is finite-difference checked in f64.

use ndarray::{Array1, Array2, Array3, Array4, Axis, NdFloat};
use rand::distributions::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops::{flip_horizontal, resize_bilinear, resize_bilinear_backward, resize_nearest_u8};
use crate::model::layers::{gap_backward, gap_forward, relu_backward, relu_forward, ConvCache};
use crate::model::{DualHeadModel, HeadMode, ModelConfig, PROB_FLOOR};
use crate::numerics::softmax;
use crate::rng::{derive_seed, rng_for};
use crate::synth::ExampleSet;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fractions of total steps at which the learning rate is multiplied
    /// by `decay_factor` (e.g., [0.6, 0.9]).
    pub decay_milestones: Vec<f64>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment_flip: bool,
    pub augment_scale: bool,
    pub scale_range: [f64; 2],
    /// Beta(α, α) mixup strength; 0 disables mixup.
    pub mixup_alpha: f64,
    /// Console progress interval in steps; 0 silences progress output.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            learning_rate: 0.01,
            decay_milestones: vec![0.6, 0.9],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            augment_flip: true,
            augment_scale: true,
            scale_range: [0.5, 2.0],
            mixup_alpha: 0.0,
            log_every: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.augment_scale
            && !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1])
        {
            return Err(Error::Config(format!(
                "scale_range must satisfy 0 < lo <= hi, got {:?}",
                self.scale_range
            )));
        }
        if self.mixup_alpha < 0.0 {
            return Err(Error::Config("mixup_alpha must be >= 0".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.steps as f64;
        let decays = self
            .decay_milestones
            .iter()
            .filter(|&&m| frac >= m)
            .count() as i32;
        self.learning_rate * self.decay_factor.powi(decays)
    }
}

/// Parameter-shaped gradient (and momentum) storage.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub conv_w: Vec<Array4<F>>,
    pub conv_b: Vec<Array1<F>>,
    pub cls_w: Array2<F>,
    pub cls_b: Array1<F>,
}

impl<F: NdFloat> Grads<F> {
    pub fn zeros_like(model: &DualHeadModel<F>) -> Self {
        Grads {
            conv_w: model.convs.iter().map(|c| Array4::zeros(c.weight.dim())).collect(),
            conv_b: model.convs.iter().map(|c| Array1::zeros(c.bias.dim())).collect(),
            cls_w: Array2::zeros(model.classifier.weight.dim()),
            cls_b: Array1::zeros(model.classifier.bias.dim()),
        }
    }

    fn all_finite(&self) -> bool {
        self.conv_w.iter().all(|a| a.iter().all(|v| v.is_finite()))
            && self.conv_b.iter().all(|a| a.iter().all(|v| v.is_finite()))
            && self.cls_w.iter().all(|v| v.is_finite())
            && self.cls_b.iter().all(|v| v.is_finite())
    }
}

/// Caches from one extractor forward pass, consumed by the backward pass.
pub struct ExtractorCache<F> {
    conv_caches: Vec<ConvCache<F>>,
    relu_masks: Vec<Array4<u8>>,
    pub features: Array4<F>,
}

pub fn extract_with_cache<F: NdFloat>(
    model: &DualHeadModel<F>,
    x: &Array4<F>,
) -> Result<ExtractorCache<F>> {
    let (_, c, h, w) = x.dim();
    if c != model.config.in_channels || h == 0 || w == 0 {
        return Err(Error::Input(format!(
            "bad input shape ({c}, {h}, {w}) for training forward pass"
        )));
    }
    let mut conv_caches = Vec::with_capacity(model.convs.len());
    let mut relu_masks = Vec::with_capacity(model.convs.len());
    let mut cur = crate::model::normalize_input(x);
    for conv in &model.convs {
        let (out, cache) = conv.forward(&cur);
        conv_caches.push(cache);
        let (act, mask) = relu_forward(&out);
        relu_masks.push(mask);
        cur = act;
    }
    Ok(ExtractorCache {
        conv_caches,
        relu_masks,
        features: cur,
    })
}

/// Push a feature-space gradient back through the conv stack. Returns the
/// per-layer parameter gradients and the gradient w.r.t. the input batch.
pub fn backprop_extractor<F: NdFloat>(
    model: &DualHeadModel<F>,
    cache: &ExtractorCache<F>,
    grad_features: Array4<F>,
    grads: &mut Grads<F>,
) -> Array4<F> {
    let mut grad = grad_features;
    for layer in (0..model.convs.len()).rev() {
        grad = relu_backward(&cache.relu_masks[layer], &grad);
        let (grad_in, grad_w, grad_b) =
            model.convs[layer].backward(&cache.conv_caches[layer], &grad);
        grads.conv_w[layer] = grad_w;
        grads.conv_b[layer] = grad_b;
        grad = grad_in;
    }
    // Chain rule through the input normalization, so the result is the
    // gradient with respect to the raw [0, 1] image.
    let scale = F::from(crate::model::INPUT_SCALE).unwrap();
    grad.mapv_inplace(|g| g * scale);
    grad
}

/// Image-level cross entropy against soft targets (one-hot in the plain
/// case, mixed distributions under mixup). Returns (loss, grads,
/// grad_wrt_input).
pub fn global_ce_loss_and_grads<F: NdFloat>(
    model: &DualHeadModel<F>,
    x: &Array4<F>,
    targets: &Array2<F>,
) -> Result<(F, Grads<F>, Array4<F>)> {
    let n = x.dim().0;
    let k_out = model.num_outputs();
    if targets.dim() != (n, k_out) {
        return Err(Error::Input(format!(
            "targets {:?} do not match batch ({n}, {k_out})",
            targets.dim()
        )));
    }
    let cache = extract_with_cache(model, x)?;
    let (_, _, fh, fw) = cache.features.dim();
    let pooled = gap_forward(&cache.features);
    let logits = model.classifier.forward_vec(&pooled);

    let floor = F::from(PROB_FLOOR).unwrap();
    let inv_n = F::from(1.0 / n as f64).unwrap();
    let mut loss = F::zero();
    let mut grad_logits = Array2::<F>::zeros((n, k_out));
    for i in 0..n {
        let row: Vec<F> = logits.row(i).to_vec();
        let probs = softmax(&row);
        for k in 0..k_out {
            let t = targets[(i, k)];
            if t > F::zero() {
                loss = loss - t * probs[k].max(floor).ln();
            }
            grad_logits[(i, k)] = (probs[k] - t) * inv_n;
        }
    }
    loss = loss * inv_n;

    let mut grads = Grads::zeros_like(model);
    let (grad_pooled, grad_cls_w, grad_cls_b) =
        model.classifier.backward_vec(&pooled, &grad_logits);
    grads.cls_w = grad_cls_w;
    grads.cls_b = grad_cls_b;
    let grad_features = gap_backward(&grad_pooled, fh, fw);
    let grad_input = backprop_extractor(model, &cache, grad_features, &mut grads);
    Ok((loss, grads, grad_input))
}

/// Dense-head loss: upsample per-pixel logits to label-map resolution,
/// per-pixel softmax cross entropy, averaged over pixels and the batch.
pub fn dense_ce_loss_and_grads<F: NdFloat>(
    model: &DualHeadModel<F>,
    x: &Array4<F>,
    label_maps: &[Array2<u8>],
) -> Result<(F, Grads<F>, Array4<F>)> {
    let (n, _, h, w) = x.dim();
    if label_maps.len() != n {
        return Err(Error::Data(format!(
            "{} label maps for a batch of {n}",
            label_maps.len()
        )));
    }
    let k_out = model.num_outputs();
    for (i, map) in label_maps.iter().enumerate() {
        if map.dim() != (h, w) {
            return Err(Error::Data(format!(
                "label map {i} has size {:?}, expected ({h}, {w})",
                map.dim()
            )));
        }
        if map.iter().any(|&v| v as usize >= k_out) {
            return Err(Error::Data(format!(
                "label map {i} contains values outside [0, {})",
                k_out
            )));
        }
    }

    let cache = extract_with_cache(model, x)?;
    let (_, _, fh, fw) = cache.features.dim();
    let logit_maps = model.classifier.forward_map(&cache.features);

    let floor = F::from(PROB_FLOOR).unwrap();
    let inv_px = F::from(1.0 / (n * h * w) as f64).unwrap();
    let mut loss = F::zero();
    let mut grad_maps = Array4::<F>::zeros((n, k_out, fh, fw));
    let mut buf = vec![F::zero(); k_out];
    for i in 0..n {
        let up = resize_bilinear(
            &logit_maps.index_axis(Axis(0), i).to_owned(),
            h,
            w,
        );
        let mut grad_up = Array3::<F>::zeros((k_out, h, w));
        for y in 0..h {
            for xx in 0..w {
                for c in 0..k_out {
                    buf[c] = up[(c, y, xx)];
                }
                let probs = softmax(&buf);
                let label = label_maps[i][(y, xx)] as usize;
                loss = loss - probs[label].max(floor).ln();
                for c in 0..k_out {
                    let target = if c == label { F::one() } else { F::zero() };
                    grad_up[(c, y, xx)] = (probs[c] - target) * inv_px;
                }
            }
        }
        let grad_map = resize_bilinear_backward(&grad_up, fh, fw);
        grad_maps.index_axis_mut(Axis(0), i).assign(&grad_map);
    }
    loss = loss * inv_px;

    let mut grads = Grads::zeros_like(model);
    let (grad_features, grad_cls_w, grad_cls_b) =
        model.classifier.backward_map(&cache.features, &grad_maps);
    grads.cls_w = grad_cls_w;
    grads.cls_b = grad_cls_b;
    let grad_input = backprop_extractor(model, &cache, grad_features, &mut grads);
    Ok((loss, grads, grad_input))
}

/// SGD with momentum: v ← m·v − lr·(g + wd·w); w ← w + v. Weight decay
/// applies to weights only, never biases.
pub struct Sgd<F> {
    velocity: Grads<F>,
    momentum: F,
    weight_decay: F,
}

impl<F: NdFloat> Sgd<F> {
    pub fn new(model: &DualHeadModel<F>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            velocity: Grads::zeros_like(model),
            momentum: F::from(momentum).unwrap(),
            weight_decay: F::from(weight_decay).unwrap(),
        }
    }

    pub fn step(&mut self, model: &mut DualHeadModel<F>, grads: &Grads<F>, lr: f64) {
        let lr = F::from(lr).unwrap();
        let m = self.momentum;
        let wd = self.weight_decay;
        for layer in 0..model.convs.len() {
            azip_update(
                &mut self.velocity.conv_w[layer],
                &mut model.convs[layer].weight,
                &grads.conv_w[layer],
                m,
                lr,
                wd,
            );
            azip_update_bias(
                &mut self.velocity.conv_b[layer],
                &mut model.convs[layer].bias,
                &grads.conv_b[layer],
                m,
                lr,
            );
        }
        azip_update(
            &mut self.velocity.cls_w,
            &mut model.classifier.weight,
            &grads.cls_w,
            m,
            lr,
            wd,
        );
        azip_update_bias(
            &mut self.velocity.cls_b,
            &mut model.classifier.bias,
            &grads.cls_b,
            m,
            lr,
        );
    }
}

fn azip_update<F: NdFloat, D: ndarray::Dimension>(
    vel: &mut ndarray::Array<F, D>,
    weight: &mut ndarray::Array<F, D>,
    grad: &ndarray::Array<F, D>,
    m: F,
    lr: F,
    wd: F,
) {
    ndarray::Zip::from(vel).and(weight).and(grad).for_each(|v, w, &g| {
        *v = m * *v - lr * (g + wd * *w);
        *w = *w + *v;
    });
}

fn azip_update_bias<F: NdFloat, D: ndarray::Dimension>(
    vel: &mut ndarray::Array<F, D>,
    bias: &mut ndarray::Array<F, D>,
    grad: &ndarray::Array<F, D>,
    m: F,
    lr: F,
) {
    ndarray::Zip::from(vel).and(bias).and(grad).for_each(|v, b, &g| {
        *v = m * *v - lr * g;
        *b = *b + *v;
    });
}

struct BatchImages {
    tensor: Array4<f32>,
    flipped: Vec<bool>,
}

/// Assemble one augmented batch: per-example horizontal flips, then one
/// shared random scale for the whole batch (keeps the tensor rectangular).
fn build_batch(
    examples: &ExampleSet,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut crate::rng::Rng,
) -> BatchImages {
    let (c, h, w) = examples[indices[0]].image.dim();
    let scale = if cfg.augment_scale {
        rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1])
    } else {
        1.0
    };
    let th = ((h as f64 * scale).round() as usize).max(4);
    let tw = ((w as f64 * scale).round() as usize).max(4);

    let mut tensor = Array4::<f32>::zeros((indices.len(), c, th, tw));
    let mut flipped = Vec::with_capacity(indices.len());
    for (slot, &idx) in indices.iter().enumerate() {
        let mut img = examples[idx].image.clone();
        let flip = cfg.augment_flip && rng.gen_bool(0.5);
        if flip {
            img = flip_horizontal(&img);
        }
        flipped.push(flip);
        let img = if (th, tw) != (h, w) {
            resize_bilinear(&img, th, tw)
        } else {
            img
        };
        tensor.index_axis_mut(Axis(0), slot).assign(&img);
    }
    BatchImages { tensor, flipped }
}

fn report_progress(stage: &str, cfg: &TrainConfig, step: usize, loss: f64) {
    if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
        println!("[{stage}] step {}/{} loss {loss:.4}", step + 1, cfg.steps);
    }
}

/// Train the K-class image classifier from labeled examples.
/// Returns the model and the per-step loss curve.
pub fn train_classifier(
    train: &ExampleSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    k: usize,
) -> Result<(DualHeadModel<f32>, Vec<f64>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    for ex in train {
        match ex.label {
            Some(y) if y < k => {}
            Some(y) => {
                return Err(Error::Data(format!(
                    "label {y} out of range for K={k} ({})",
                    ex.id
                )))
            }
            None => {
                return Err(Error::Data(format!(
                    "example {} has no label for classifier training",
                    ex.id
                )))
            }
        }
    }

    let mut model =
        DualHeadModel::<f32>::new(model_cfg, k, HeadMode::KClass, derive_seed(cfg.seed, "init_cls"))?;
    let mut sgd = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let mut rng = rng_for(cfg.seed, "train_classifier");
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let indices: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.gen_range(0..train.len())).collect();
        let batch = build_batch(train, &indices, cfg, &mut rng);

        let mut targets = Array2::<f32>::zeros((indices.len(), k));
        for (slot, &idx) in indices.iter().enumerate() {
            targets[(slot, train[idx].label.unwrap())] = 1.0;
        }
        if cfg.mixup_alpha > 0.0 {
            let beta =
                rand_distr::Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).map_err(|e| {
                    Error::Config(format!("invalid mixup_alpha {}: {e}", cfg.mixup_alpha))
                })?;
            let lambda = beta.sample(&mut rng) as f32;
            let n = indices.len();
            let perm: Vec<usize> = {
                use rand::seq::SliceRandom;
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut rng);
                p
            };
            let mixed_images = {
                let mut out = batch.tensor.clone() * lambda;
                for slot in 0..n {
                    let other = batch.tensor.index_axis(Axis(0), perm[slot]).to_owned();
                    let mut dst = out.index_axis_mut(Axis(0), slot);
                    dst += &(&other * (1.0 - lambda));
                }
                out
            };
            let mixed_targets = {
                let mut out = targets.clone() * lambda;
                for slot in 0..n {
                    let other = targets.index_axis(Axis(0), perm[slot]).to_owned();
                    let mut dst = out.index_axis_mut(Axis(0), slot);
                    dst += &(&other * (1.0 - lambda));
                }
                out
            };
            let (loss, grads, _) = global_ce_loss_and_grads(&model, &mixed_images, &mixed_targets)?;
            finish_step(
                "train-cls", &mut model, &mut sgd, cfg, step, loss, &grads, &mut curve,
            )?;
            continue;
        }

        let (loss, grads, _) = global_ce_loss_and_grads(&model, &batch.tensor, &targets)?;
        finish_step(
            "train-cls", &mut model, &mut sgd, cfg, step, loss, &grads, &mut curve,
        )?;
    }
    Ok((model, curve))
}

/// Train the (K+1)-class dense predictor from pseudo-label maps. The
/// extractor warm-starts from `init` when given; the classifier head is
/// always freshly initialized at K+1 columns.
pub fn train_dense(
    init: Option<&DualHeadModel<f32>>,
    examples: &ExampleSet,
    label_maps: &[Array2<u8>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    k: usize,
) -> Result<(DualHeadModel<f32>, Vec<f64>)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if examples.len() != label_maps.len() {
        return Err(Error::Data(format!(
            "{} examples but {} label maps",
            examples.len(),
            label_maps.len()
        )));
    }
    for (ex, map) in examples.iter().zip(label_maps.iter()) {
        let (_, h, w) = ex.image.dim();
        if map.dim() != (h, w) {
            return Err(Error::Data(format!(
                "label map for {} has size {:?}, image is ({h}, {w})",
                ex.id,
                map.dim()
            )));
        }
        if map.iter().any(|&v| v as usize > k) {
            return Err(Error::Data(format!(
                "label map for {} has values beyond the background index {k}",
                ex.id
            )));
        }
    }

    let mut model = DualHeadModel::<f32>::new(
        model_cfg,
        k,
        HeadMode::KPlusOne,
        derive_seed(cfg.seed, "init_dense"),
    )?;
    if let Some(src) = init {
        if src.config.conv_channels != model_cfg.conv_channels
            || src.config.conv_strides != model_cfg.conv_strides
            || src.config.kernel_size != model_cfg.kernel_size
            || src.config.in_channels != model_cfg.in_channels
        {
            return Err(Error::Input(
                "warm-start model architecture does not match the dense config".into(),
            ));
        }
        for (dst, srcc) in model.convs.iter_mut().zip(src.convs.iter()) {
            dst.weight = srcc.weight.clone();
            dst.bias = srcc.bias.clone();
        }
    }

    let mut sgd = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let mut rng = rng_for(cfg.seed, "train_dense");
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let indices: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.gen_range(0..examples.len())).collect();
        let batch = build_batch(examples, &indices, cfg, &mut rng);
        let (_, _, th, tw) = batch.tensor.dim();

        let mut maps = Vec::with_capacity(indices.len());
        for (slot, &idx) in indices.iter().enumerate() {
            let mut map = label_maps[idx].clone();
            if batch.flipped[slot] {
                let (mh, mw) = map.dim();
                map = Array2::from_shape_fn((mh, mw), |(i, j)| map[(i, mw - 1 - j)]);
            }
            if map.dim() != (th, tw) {
                map = resize_nearest_u8(&map, th, tw);
            }
            maps.push(map);
        }

        let (loss, grads, _) = dense_ce_loss_and_grads(&model, &batch.tensor, &maps)?;
        finish_step(
            "train-dense", &mut model, &mut sgd, cfg, step, loss, &grads, &mut curve,
        )?;
    }
    Ok((model, curve))
}

#[allow(clippy::too_many_arguments)]
fn finish_step(
    stage: &str,
    model: &mut DualHeadModel<f32>,
    sgd: &mut Sgd<f32>,
    cfg: &TrainConfig,
    step: usize,
    loss: f32,
    grads: &Grads<f32>,
    curve: &mut Vec<f64>,
) -> Result<()> {
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Training {
            step,
            message: format!("non-finite loss or gradients (loss = {loss})"),
        });
    }
    sgd.step(model, grads, cfg.lr_at(step));
    curve.push(loss as f64);
    report_progress(stage, cfg, step, loss as f64);
    Ok(())
}
