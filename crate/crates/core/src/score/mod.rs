//! OOD scoring. Two independent signals per example:
//!
//! * a semantic score S_h from the first K logits (MSP, MaxLogit, ODIN,
//!   Energy, or ViM — the domain logit never enters these), and
//! * a domain score S_d, the (K+1)-th logit itself, which the dense
//!   training objective shaped into background evidence.
//!
//! `fuse` combines them into the final score S. Higher always means more
//! in-distribution, for every scorer and for the fusion.

pub mod io;

use ndarray::{Array1, Array2, Array3, Array4, Axis, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{gap_backward, gap_forward};
use crate::model::train::{backprop_extractor, extract_with_cache, Grads};
use crate::model::{DualHeadModel, HeadMode};
use crate::numerics::{log_sum_exp, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Msp,
    Maxlogit,
    Odin,
    Energy,
    Vim,
}

impl ScorerKind {
    pub fn id(self) -> &'static str {
        match self {
            ScorerKind::Msp => "msp",
            ScorerKind::Maxlogit => "maxlogit",
            ScorerKind::Odin => "odin",
            ScorerKind::Energy => "energy",
            ScorerKind::Vim => "vim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(ScorerKind::Msp),
            "maxlogit" => Ok(ScorerKind::Maxlogit),
            "odin" => Ok(ScorerKind::Odin),
            "energy" => Ok(ScorerKind::Energy),
            "vim" => Ok(ScorerKind::Vim),
            other => Err(Error::Config(format!("unknown scorer kind '{other}'"))),
        }
    }

    /// Probability-valued scorers fuse through a log; logit-valued ones
    /// are already on a log scale and fuse additively.
    pub fn natural_value_type(self) -> ValueType {
        match self {
            ScorerKind::Msp | ScorerKind::Odin => ValueType::SoftmaxBased,
            ScorerKind::Maxlogit | ScorerKind::Energy | ScorerKind::Vim => ValueType::LogitBased,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    SoftmaxBased,
    LogitBased,
}

impl ValueType {
    pub fn id(self) -> &'static str {
        match self {
            ValueType::SoftmaxBased => "softmax_based",
            ValueType::LogitBased => "logit_based",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax_based" => Ok(ValueType::SoftmaxBased),
            "logit_based" => Ok(ValueType::LogitBased),
            other => Err(Error::Config(format!("unknown value type '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerSpec {
    pub kind: ScorerKind,
    #[serde(default = "default_odin_temperature")]
    pub odin_temperature: f64,
    #[serde(default = "default_odin_epsilon")]
    pub odin_epsilon: f64,
    #[serde(default = "default_vim_dim")]
    pub vim_dim: usize,
    /// Leave unset to follow the scorer's natural type; setting it to the
    /// other type is rejected by validate().
    #[serde(default)]
    pub value_type: Option<ValueType>,
}

fn default_odin_temperature() -> f64 {
    1000.0
}

fn default_odin_epsilon() -> f64 {
    0.0014
}

fn default_vim_dim() -> usize {
    32
}

impl ScorerSpec {
    pub fn new(kind: ScorerKind) -> Self {
        ScorerSpec {
            kind,
            odin_temperature: default_odin_temperature(),
            odin_epsilon: default_odin_epsilon(),
            vim_dim: default_vim_dim(),
            value_type: None,
        }
    }

    pub fn effective_value_type(&self) -> ValueType {
        self.value_type.unwrap_or_else(|| self.kind.natural_value_type())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.odin_temperature > 0.0) {
            return Err(Error::Config(format!(
                "odin_temperature must be positive, got {}",
                self.odin_temperature
            )));
        }
        if !(self.odin_epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "odin_epsilon must be non-negative, got {}",
                self.odin_epsilon
            )));
        }
        if let Some(vt) = self.value_type {
            if vt != self.kind.natural_value_type() {
                return Err(Error::Config(format!(
                    "scorer '{}' is {}, not {}",
                    self.kind.id(),
                    self.kind.natural_value_type().id(),
                    vt.id()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub temperature: f64,
    /// Floor applied inside the log of the softmax-based rule; the domain
    /// logit is unbounded and can be non-positive.
    pub domain_floor: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            temperature: 2.5,
            domain_floor: 1e-6,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "fusion temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.domain_floor > 0.0) {
            return Err(Error::Config(format!(
                "domain_floor must be positive, got {}",
                self.domain_floor
            )));
        }
        Ok(())
    }
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Input("empty logit vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite logit".into()));
    }
    Ok(())
}

/// First K entries of a logit vector. Accepts a (K+1)-vector (the usual
/// case — the domain logit is dropped) or a bare K-vector (identity).
pub fn semantic_logits(logits: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Input("need at least one semantic class".into()));
    }
    if logits.len() != k && logits.len() != k + 1 {
        return Err(Error::Input(format!(
            "logit vector of length {} cannot carry {k} semantic classes",
            logits.len()
        )));
    }
    Ok(logits[..k].to_vec())
}

/// Maximum softmax probability.
pub fn msp(logits: &[f64]) -> Result<f64> {
    check_finite(logits)?;
    let probs = softmax(logits);
    Ok(probs.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Largest raw logit.
pub fn maxlogit(logits: &[f64]) -> Result<f64> {
    check_finite(logits)?;
    Ok(logits.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// log Σ exp(l_k), max-subtracted for stability.
pub fn energy(logits: &[f64]) -> Result<f64> {
    check_finite(logits)?;
    Ok(log_sum_exp(logits))
}

/// Max softmax of temperature-scaled logits — ODIN's reading of a logit
/// vector, and the objective its input perturbation climbs.
pub fn temperature_scaled_msp(logits: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Input(format!("temperature must be positive, got {tau}")));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / tau).collect();
    msp(&scaled)
}

fn true_sign<F: NdFloat>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Gradient of log max-softmax(semantic logits / tau) with respect to the
/// input image.
fn odin_input_gradient<F: NdFloat>(
    model: &DualHeadModel<F>,
    image: &Array3<F>,
    tau: f64,
) -> Result<Array3<F>> {
    let x = image.clone().insert_axis(Axis(0));
    let cache = extract_with_cache(model, &x)?;
    let (_, _, fh, fw) = cache.features.dim();
    let pooled = gap_forward(&cache.features);
    let logits = model.classifier.forward_vec(&pooled);

    let k = model.num_semantic_classes;
    let tau_f = F::from(tau).unwrap();
    let scaled: Vec<F> = logits.row(0).iter().take(k).map(|&v| v / tau_f).collect();
    let probs = softmax(&scaled);
    let star = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();

    // d/dl_j [ l_star/tau − logΣexp(l/tau) ] = (δ_{j,star} − p_j)/tau;
    // the domain logit (if present) gets zero.
    let mut grad_logits = Array2::<F>::zeros((1, model.num_outputs()));
    for j in 0..k {
        let delta = if j == star { F::one() } else { F::zero() };
        grad_logits[(0, j)] = (delta - probs[j]) / tau_f;
    }

    let (grad_pooled, _, _) = model.classifier.backward_vec(&pooled, &grad_logits);
    let grad_features = gap_backward(&grad_pooled, fh, fw);
    let mut grads = Grads::zeros_like(model);
    let grad_input: Array4<F> = backprop_extractor(model, &cache, grad_features, &mut grads);
    Ok(grad_input.index_axis(Axis(0), 0).to_owned())
}

/// ODIN: nudge the input by ε in the sign direction that increases the
/// temperature-scaled max softmax, re-run the model, and score the
/// perturbed semantic logits at temperature τ.
pub fn odin<F: NdFloat>(
    model: &DualHeadModel<F>,
    image: &Array3<F>,
    spec: &ScorerSpec,
) -> Result<f64> {
    spec.validate()?;
    let tau = spec.odin_temperature;
    let eps = spec.odin_epsilon;
    let scored = if eps > 0.0 {
        let grad = odin_input_gradient(model, image, tau)?;
        let eps_f = F::from(eps).unwrap();
        image + &grad.mapv(|v| true_sign(v) * eps_f)
    } else {
        image.clone()
    };
    let logits = model.forward_global(&scored)?;
    let as_f64: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap()).collect();
    let sem = semantic_logits(&as_f64, model.num_semantic_classes)?;
    temperature_scaled_msp(&sem, tau)
}

/// Feature-space residual scorer parameters.
#[derive(Debug, Clone)]
pub struct VimParams {
    /// Feature-space origin implied by the classifier: the minimum-norm
    /// point where the logits vanish.
    pub offset: Array1<f64>,
    /// Orthonormal basis of the principal complement, C×(C−d).
    pub basis: Array2<f64>,
    /// Residual-to-logit scale matched on the fitting set.
    pub alpha: f64,
}

impl VimParams {
    pub fn residual_norm(&self, feature: &[f64]) -> Result<f64> {
        let c = self.offset.len();
        if feature.len() != c {
            return Err(Error::Input(format!(
                "feature length {} does not match fitted dimension {c}",
                feature.len()
            )));
        }
        let centered: Vec<f64> = feature
            .iter()
            .zip(self.offset.iter())
            .map(|(f, o)| f - o)
            .collect();
        let mut sq = 0.0;
        for col in self.basis.columns() {
            let proj: f64 = col.iter().zip(centered.iter()).map(|(b, x)| b * x).sum();
            sq += proj * proj;
        }
        Ok(sq.sqrt())
    }
}

/// Fit the residual scorer from ID training features and the classifier's
/// weight (rows = classes) and bias. The offset and covariance use the
/// full classifier geometry; the scale α is matched against the first
/// `semantic_classes` rows only. The principal subspace is spanned by the
/// top-d eigenvectors of the covariance of offset-centered features;
/// residuals live in its complement.
pub fn fit_vim(
    features: &Array2<f64>,
    weight: &Array2<f64>,
    bias: &Array1<f64>,
    d: usize,
    semantic_classes: usize,
) -> Result<VimParams> {
    let (n, c) = features.dim();
    let (rows, cols) = weight.dim();
    if cols != c {
        return Err(Error::Input(format!(
            "classifier expects {cols}-dim features, fitting set has {c}"
        )));
    }
    if bias.len() != rows {
        return Err(Error::Input(format!(
            "bias length {} does not match {rows} classifier rows",
            bias.len()
        )));
    }
    if semantic_classes == 0 || semantic_classes > rows {
        return Err(Error::Input(format!(
            "semantic class count {semantic_classes} outside the classifier's {rows} rows"
        )));
    }
    if n == 0 {
        return Err(Error::Fitting("empty fitting set".into()));
    }
    if d >= c {
        return Err(Error::Input(format!(
            "principal dimension {d} must be below the feature dimension {c}"
        )));
    }

    // offset o = −W⁺ b: the least-squares, minimum-norm zero of W f + b.
    let w_na = nalgebra::DMatrix::from_fn(rows, c, |i, j| weight[(i, j)]);
    let b_na = nalgebra::DVector::from_fn(rows, |i, _| bias[i]);
    let pinv = w_na
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Fitting(format!("classifier weight pseudo-inverse failed: {e}")))?;
    let o_na = -(&pinv * &b_na);
    let offset = Array1::from_iter(o_na.iter().copied());

    // Covariance of offset-centered features, eigendecomposed.
    let mut cov = nalgebra::DMatrix::<f64>::zeros(c, c);
    for row in features.rows() {
        let centered = nalgebra::DVector::from_fn(c, |i, _| row[i] - offset[i]);
        cov += &centered * centered.transpose();
    }
    cov /= n as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    if d > 0 {
        let largest = eig.eigenvalues[order[0]].max(0.0);
        let cutoff = largest.max(1.0) * 1e-12;
        let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > cutoff).count();
        if d > rank {
            return Err(Error::Fitting(format!(
                "covariance rank {rank} is below the requested principal dimension {d}"
            )));
        }
    }

    let mut basis = Array2::<f64>::zeros((c, c - d));
    for (out_col, &idx) in order[d..].iter().enumerate() {
        for i in 0..c {
            basis[(i, out_col)] = eig.eigenvectors[(i, idx)];
        }
    }

    let params_unscaled = VimParams {
        offset,
        basis,
        alpha: 1.0,
    };
    let mut mean_residual = 0.0;
    let mut mean_max_logit = 0.0;
    for row in features.rows() {
        let feat: Vec<f64> = row.to_vec();
        mean_residual += params_unscaled.residual_norm(&feat)?;
        let mut best = f64::NEG_INFINITY;
        for class in 0..semantic_classes {
            let logit: f64 =
                (0..c).map(|j| weight[(class, j)] * feat[j]).sum::<f64>() + bias[class];
            best = best.max(logit);
        }
        mean_max_logit += best;
    }
    mean_residual /= n as f64;
    mean_max_logit /= n as f64;

    if mean_residual <= 1e-12 {
        return Err(Error::Fitting(
            "fitting features lie inside the principal subspace; residual scale is undefined"
                .into(),
        ));
    }
    // Match the scale of the residual to the scale of the logits. The
    // magnitude keeps the penalty's sign right even for a model whose top
    // logits are negative on its own fitting set.
    let alpha = mean_max_logit.abs() / mean_residual;
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Fitting(format!(
            "residual scale must be positive and finite, got {alpha}"
        )));
    }
    Ok(VimParams {
        alpha,
        ..params_unscaled
    })
}

/// energy(semantic logits) − α · residual norm of the pooled feature.
pub fn vim_score(params: &VimParams, feature: &[f64], logits: &[f64]) -> Result<f64> {
    Ok(energy(logits)? - params.alpha * params.residual_norm(feature)?)
}

/// The domain logit: last entry of the (K+1)-vector. Higher = the model
/// sees more in-distribution background evidence.
pub fn domain_score(logits: &[f64]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Input(format!(
            "domain scoring needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    check_finite(logits)?;
    Ok(*logits.last().unwrap())
}

/// Final score. Softmax-based scorers: S = S_h + ln(max(S_d, ε_d))/T;
/// logit-based: S = S_h + S_d/T.
pub fn fuse(s_h: f64, s_d: f64, value_type: ValueType, cfg: &FusionConfig) -> f64 {
    fuse_with_event(s_h, s_d, value_type, cfg).0
}

/// As `fuse`, also reporting whether the domain floor clipped S_d.
pub fn fuse_with_event(
    s_h: f64,
    s_d: f64,
    value_type: ValueType,
    cfg: &FusionConfig,
) -> (f64, bool) {
    match value_type {
        ValueType::SoftmaxBased => {
            let clamped = s_d < cfg.domain_floor;
            let s = s_h + s_d.max(cfg.domain_floor).ln() / cfg.temperature;
            (s, clamped)
        }
        ValueType::LogitBased => (s_h + s_d / cfg.temperature, false),
    }
}

/// One scored example.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub split: String,
    pub s_h: f64,
    pub s_d: f64,
    pub s: f64,
}

/// Every example's scores under one scorer and one fusion config.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub scorer: String,
    pub value_type: ValueType,
    pub fusion: FusionConfig,
    pub rows: Vec<ScoreRow>,
    /// How often the softmax-based fusion had to floor a non-positive
    /// (or tiny) domain logit.
    pub clamp_events: usize,
}

impl ScoreSet {
    pub fn recount_clamps(&mut self) {
        self.clamp_events = self
            .rows
            .iter()
            .filter(|r| {
                matches!(self.value_type, ValueType::SoftmaxBased) && r.s_d < self.fusion.domain_floor
            })
            .count();
    }
}

/// Semantic + domain scores for one image under a (K+1)-class classifier.
pub fn score_example(
    model: &DualHeadModel<f32>,
    image: &Array3<f32>,
    spec: &ScorerSpec,
    vim: Option<&VimParams>,
) -> Result<(f64, f64)> {
    if model.mode != HeadMode::KPlusOne {
        return Err(Error::Input(
            "domain scoring needs the (K+1)-class converted model".into(),
        ));
    }
    let logits = model.forward_global(image)?;
    let as_f64: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let s_d = domain_score(&as_f64)?;
    let sem = semantic_logits(&as_f64, model.num_semantic_classes)?;
    let s_h = match spec.kind {
        ScorerKind::Msp => msp(&sem)?,
        ScorerKind::Maxlogit => maxlogit(&sem)?,
        ScorerKind::Energy => energy(&sem)?,
        ScorerKind::Odin => odin(model, image, spec)?,
        ScorerKind::Vim => {
            let params = vim.ok_or_else(|| {
                Error::Input("vim scoring requires fitted parameters".into())
            })?;
            let feat = model.pooled_features(image)?;
            let feat_f64: Vec<f64> = feat.iter().map(|&v| v as f64).collect();
            vim_score(params, &feat_f64, &sem)?
        }
    };
    Ok((s_h, s_d))
}

/// Score a batch of (id, split, image) records into a ScoreSet.
pub fn score_examples<'a>(
    model: &DualHeadModel<f32>,
    records: impl IntoIterator<Item = (&'a str, &'a str, &'a Array3<f32>)>,
    spec: &ScorerSpec,
    fusion: &FusionConfig,
    vim: Option<&VimParams>,
) -> Result<ScoreSet> {
    spec.validate()?;
    fusion.validate()?;
    let value_type = spec.effective_value_type();
    let mut rows = Vec::new();
    let mut clamp_events = 0;
    for (id, split, image) in records {
        let (s_h, s_d) = score_example(model, image, spec, vim)?;
        let (s, clamped) = fuse_with_event(s_h, s_d, value_type, fusion);
        if clamped {
            clamp_events += 1;
        }
        rows.push(ScoreRow {
            id: id.to_string(),
            split: split.to_string(),
            s_h,
            s_d,
            s,
        });
    }
    Ok(ScoreSet {
        scorer: spec.kind.id().to_string(),
        value_type,
        fusion: fusion.clone(),
        rows,
        clamp_events,
    })
}
