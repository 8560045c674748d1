//! Staged, resumable run pipeline.
//!
//! A run lives in one output directory. Each stage records a cumulative
//! configuration hash in `manifest.json` when it finishes; a stage is
//! considered complete only if its record is present, its artifacts still
//! exist on disk, and its hash matches the current configuration. Editing
//! any upstream setting therefore invalidates every stage from that point
//! on, while downstream-only edits leave finished work untouched.

pub mod plot;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::{self, MaskConfig};
use crate::metrics::report::{
    build_eval_report, load_report, save_report, summary_table, EvalReport,
};
use crate::metrics::top1_accuracy;
use crate::model::checkpoint::{load_checkpoint_expecting, save_checkpoint};
use crate::model::train::{train_classifier, train_dense, TrainConfig};
use crate::model::{HeadMode, ModelConfig};
use crate::rng::derive_seed;
use crate::score::io::{load_scores, save_scores};
use crate::score::{
    fit_vim, score_examples, FusionConfig, ScoreRow, ScoreSet, ScorerKind, ScorerSpec, VimParams,
};
use crate::synth::io::{load_dataset, save_dataset, split_of};
use crate::synth::{gen_id_dataset, gen_ood_dataset, DatasetSpec, OodKind, SplitTag};

/// Settings for the eval stage: the operating point, histogram resolution,
/// and which OOD splits are pooled into the extra combined split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// TPR level the FPR threshold is calibrated at.
    pub tpr_level: f64,
    pub histogram_bins: usize,
    /// Source splits whose rows are pooled (in addition to appearing on
    /// their own) under `combined_name`. Empty disables pooling.
    pub combined_splits: Vec<String>,
    pub combined_name: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tpr_level: 0.95,
            histogram_bins: 30,
            combined_splits: vec!["ood_semantic".into(), "ood_domain".into()],
            combined_name: "ood_combined".into(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tpr_level > 0.0 && self.tpr_level < 1.0) {
            return Err(Error::Config(format!(
                "eval.tpr_level must lie in (0, 1), got {}",
                self.tpr_level
            )));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("eval.histogram_bins must be positive".into()));
        }
        if self.combined_name.is_empty() {
            return Err(Error::Config("eval.combined_name must not be empty".into()));
        }
        if self.combined_splits.contains(&self.combined_name) {
            return Err(Error::Config(format!(
                "eval.combined_name '{}' collides with one of its source splits",
                self.combined_name
            )));
        }
        Ok(())
    }
}

/// Full description of a run. Every stage reads its inputs from here; the
/// file form is TOML with unknown keys rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Single seed for the whole run; per-stage seeds are derived from it,
    /// so the nested `seed` fields below must stay 0.
    pub seed: u64,
    /// Recorded in artifacts for provenance. Runs are bit-reproducible
    /// either way; the flag marks that reproducibility was demanded.
    pub deterministic: bool,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train_classifier: TrainConfig,
    pub train_dense: TrainConfig,
    pub mask: MaskConfig,
    pub scorers: Vec<ScorerSpec>,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            output_dir: PathBuf::from("xdom_run"),
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            // The classifier that yields the best attention maps is not
            // the most confident one: a hotter-than-default rate with
            // stronger weight decay keeps evidence spread over the whole
            // object instead of collapsing onto a few discriminative
            // pixels. Training scales cover the mask ensemble's scales.
            train_classifier: TrainConfig {
                steps: 2000,
                learning_rate: 0.02,
                weight_decay: 5e-4,
                ..TrainConfig::default()
            },
            // Dense fine-tuning starts from trained extractor weights; a
            // gentler rate preserves them, and scale jitter is off because
            // resampling corrupts the thin pseudo-mask geometry.
            train_dense: TrainConfig {
                steps: 2500,
                learning_rate: 0.01,
                augment_scale: false,
                ..TrainConfig::default()
            },
            mask: MaskConfig::default(),
            scorers: [
                ScorerKind::Msp,
                ScorerKind::Maxlogit,
                ScorerKind::Odin,
                ScorerKind::Energy,
                ScorerKind::Vim,
            ]
            .into_iter()
            .map(ScorerSpec::new)
            .collect(),
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&raw)
            .map_err(|e| Error::Config(format!("parsing {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        self.dataset.validate()?;
        self.model.validate()?;
        self.train_classifier.validate()?;
        self.train_dense.validate()?;
        self.mask.validate()?;
        self.fusion.validate()?;
        self.eval.validate()?;
        if self.scorers.is_empty() {
            return Err(Error::Config("at least one scorer is required".into()));
        }
        let mut seen = BTreeSet::new();
        for spec in &self.scorers {
            spec.validate()?;
            if !seen.insert(spec.kind.id()) {
                return Err(Error::Config(format!(
                    "duplicate scorer '{}': each kind may appear once",
                    spec.kind.id()
                )));
            }
        }
        for (field, value) in [
            ("dataset.seed", self.dataset.seed),
            ("train_classifier.seed", self.train_classifier.seed),
            ("train_dense.seed", self.train_dense.seed),
        ] {
            if value != 0 {
                return Err(Error::Config(format!(
                    "{field} must stay 0; stage seeds are derived from the top-level seed"
                )));
            }
        }
        Ok(())
    }

    /// Dataset spec with the stage seed filled in from the run seed.
    pub fn dataset_effective(&self) -> DatasetSpec {
        let mut spec = self.dataset.clone();
        spec.seed = derive_seed(self.seed, "synth");
        spec
    }

    pub fn train_classifier_effective(&self) -> TrainConfig {
        let mut cfg = self.train_classifier.clone();
        cfg.seed = derive_seed(self.seed, "train-cls");
        cfg
    }

    pub fn train_dense_effective(&self) -> TrainConfig {
        let mut cfg = self.train_dense.clone();
        cfg.seed = derive_seed(self.seed, "train-dense");
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    TrainCls,
    Masks,
    TrainDense,
    Convert,
    Score,
    Eval,
    Plot,
}

/// Execution order; each stage depends on everything before it.
pub const STAGES: [Stage; 8] = [
    Stage::Synth,
    Stage::TrainCls,
    Stage::Masks,
    Stage::TrainDense,
    Stage::Convert,
    Stage::Score,
    Stage::Eval,
    Stage::Plot,
];

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainCls => "train-cls",
            Stage::Masks => "masks",
            Stage::TrainDense => "train-dense",
            Stage::Convert => "convert",
            Stage::Score => "score",
            Stage::Eval => "eval",
            Stage::Plot => "plot",
        }
    }

    pub fn parse(name: &str) -> Result<Stage> {
        STAGES
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = STAGES.iter().map(|s| s.name()).collect();
                Error::Config(format!(
                    "unknown stage '{name}'; expected one of {}",
                    known.join(", ")
                ))
            })
    }

    fn index(&self) -> usize {
        STAGES.iter().position(|s| s == self).unwrap()
    }

    fn prerequisites(&self) -> &'static [Stage] {
        &STAGES[..self.index()]
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub complete: bool,
    /// Cumulative hash of this stage's and all upstream stages' inputs.
    pub config_hash: String,
    /// Paths relative to the run directory that this stage produced.
    pub artifacts: Vec<String>,
    /// Seconds since the unix epoch.
    pub finished_at: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<RunManifest> {
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let raw = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

enum StageStatus {
    /// Never ran, marked incomplete, or an artifact has gone missing.
    Missing,
    /// Ran under a configuration that differs from the current one.
    Stale,
    Complete,
}

pub struct RunSummary {
    /// Every stage in order, paired with whether it actually executed
    /// (false = already up to date).
    pub executed: Vec<(Stage, bool)>,
    pub report: EvalReport,
}

pub struct Pipeline {
    config: RunConfig,
    root: PathBuf,
}

impl Pipeline {
    /// Validates the configuration, creates the output directory, and
    /// writes the effective config echo into it.
    pub fn new(config: RunConfig) -> Result<Pipeline> {
        config.validate()?;
        let root = config.output_dir.clone();
        fs::create_dir_all(&root)?;
        let pipeline = Pipeline { config, root };
        fs::write(
            pipeline.root.join("config.toml"),
            pipeline.config.to_toml()?,
        )?;
        Ok(pipeline)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    fn masks_dir(&self) -> PathBuf {
        self.root.join("masks")
    }

    fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    fn scores_path(&self, kind: ScorerKind) -> PathBuf {
        self.root.join("scores").join(format!("{}.csv", kind.id()))
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }

    /// Serialized inputs that stage reads from the configuration. Upstream
    /// settings are accounted for by hash chaining, so each stage lists
    /// only what it consumes directly.
    fn stage_payload(&self, stage: Stage) -> Result<String> {
        let value = match stage {
            Stage::Synth => serde_json::json!({
                "dataset": self.config.dataset_effective(),
                "deterministic": self.config.deterministic,
            }),
            Stage::TrainCls => serde_json::json!({
                "model": self.config.model,
                "train": self.config.train_classifier_effective(),
            }),
            Stage::Masks => serde_json::json!({ "mask": self.config.mask }),
            Stage::TrainDense => serde_json::json!({
                "train": self.config.train_dense_effective(),
            }),
            Stage::Convert => serde_json::json!({}),
            Stage::Score => serde_json::json!({
                "scorers": self.config.scorers,
                "fusion": self.config.fusion,
            }),
            Stage::Eval => serde_json::json!({ "eval": self.config.eval }),
            Stage::Plot => serde_json::json!({}),
        };
        Ok(serde_json::to_string(&value)?)
    }

    /// Hash chained over all stages up to and including `stage`.
    fn stage_hash(&self, stage: Stage) -> Result<String> {
        let mut acc = String::new();
        for s in &STAGES[..=stage.index()] {
            let mut hasher = Sha256::new();
            hasher.update(acc.as_bytes());
            hasher.update(s.name().as_bytes());
            hasher.update(self.stage_payload(*s)?.as_bytes());
            acc = hex_digest(hasher);
        }
        Ok(acc)
    }

    fn stage_status(&self, manifest: &RunManifest, stage: Stage) -> Result<StageStatus> {
        let record = match manifest.stages.get(stage.name()) {
            Some(r) if r.complete => r,
            _ => return Ok(StageStatus::Missing),
        };
        if record.config_hash != self.stage_hash(stage)? {
            return Ok(StageStatus::Stale);
        }
        if record.artifacts.iter().any(|a| !self.root.join(a).exists()) {
            return Ok(StageStatus::Missing);
        }
        Ok(StageStatus::Complete)
    }

    /// Run one stage. Prerequisites must be complete and current — a
    /// missing one is a dependency error, a mismatched one a stale-artifact
    /// error. Returns false if the stage was already up to date (and
    /// `force` was not set), true if it executed.
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<bool> {
        let mut manifest = RunManifest::load(&self.manifest_path())?;
        for pre in stage.prerequisites() {
            match self.stage_status(&manifest, *pre)? {
                StageStatus::Complete => {}
                StageStatus::Stale => {
                    return Err(Error::StaleArtifact {
                        stage: pre.name().to_string(),
                    })
                }
                StageStatus::Missing => {
                    return Err(Error::Dependency {
                        stage: pre.name().to_string(),
                    })
                }
            }
        }
        if !force && matches!(self.stage_status(&manifest, stage)?, StageStatus::Complete) {
            return Ok(false);
        }
        let artifacts = self.execute(stage)?;
        for artifact in &artifacts {
            if !self.root.join(artifact).exists() {
                return Err(Error::Data(format!(
                    "stage '{stage}' finished without producing {artifact}"
                )));
            }
        }
        manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                complete: true,
                config_hash: self.stage_hash(stage)?,
                artifacts,
                finished_at: now_epoch_secs(),
            },
        );
        manifest.save(&self.manifest_path())?;
        Ok(true)
    }

    /// Run every stage in order, skipping the ones that are already up to
    /// date. `force_stage` re-executes that one stage even if current.
    /// Prints the final metric table and returns it with the per-stage
    /// execution record.
    pub fn run_all(&self, force_stage: Option<Stage>) -> Result<RunSummary> {
        let mut executed = Vec::with_capacity(STAGES.len());
        for stage in STAGES {
            let ran = self.run_stage(stage, force_stage == Some(stage))?;
            println!(
                "[{}] {}",
                stage,
                if ran { "complete" } else { "up to date" }
            );
            executed.push((stage, ran));
        }
        let report = load_report(&self.report_path())?;
        println!("{}", summary_table(&report));
        Ok(RunSummary { executed, report })
    }

    fn execute(&self, stage: Stage) -> Result<Vec<String>> {
        match stage {
            Stage::Synth => self.stage_synth(),
            Stage::TrainCls => self.stage_train_cls(),
            Stage::Masks => self.stage_masks(),
            Stage::TrainDense => self.stage_train_dense(),
            Stage::Convert => self.stage_convert(),
            Stage::Score => self.stage_score(),
            Stage::Eval => self.stage_eval(),
            Stage::Plot => self.stage_plot(),
        }
    }

    fn stage_synth(&self) -> Result<Vec<String>> {
        let spec = self.config.dataset_effective();
        let (train, test) = gen_id_dataset(&spec)?;
        let n_ood = spec.n_test;
        let semantic = gen_ood_dataset(OodKind::Semantic, &spec, n_ood)?;
        let domain = gen_ood_dataset(OodKind::Domain, &spec, n_ood)?;
        let both = gen_ood_dataset(OodKind::Both, &spec, n_ood)?;
        let total = train.len() + test.len() + semantic.len() + domain.len() + both.len();
        save_dataset(
            &self.dataset_dir(),
            &spec,
            &[&train, &test, &semantic, &domain, &both],
        )?;
        println!("[synth] wrote {total} examples across 5 splits");
        Ok(vec!["dataset/manifest.json".into()])
    }

    fn stage_train_cls(&self) -> Result<Vec<String>> {
        let (spec, all) = load_dataset(&self.dataset_dir())?;
        let train = split_of(&all, SplitTag::IdTrain);
        let (model, curve) = train_classifier(
            &train,
            &self.config.model,
            &self.config.train_classifier_effective(),
            spec.num_classes,
        )?;
        let ckpt = self.checkpoint_path("classifier");
        save_checkpoint(&model, &ckpt)?;
        write_json(&self.root.join("curves/classifier_loss.json"), &curve)?;
        println!(
            "[train-cls] {} steps, final loss {:.4}",
            curve.len(),
            curve.last().copied().unwrap_or(f64::NAN)
        );
        Ok(vec![
            "checkpoints/classifier.ckpt".into(),
            "curves/classifier_loss.json".into(),
        ])
    }

    fn stage_masks(&self) -> Result<Vec<String>> {
        let (_, all) = load_dataset(&self.dataset_dir())?;
        let train = split_of(&all, SplitTag::IdTrain);
        let model = load_checkpoint_expecting(&self.checkpoint_path("classifier"), HeadMode::KClass)?;
        let cfg = &self.config.mask;
        let mut rows: Vec<(String, usize, Array2<u8>, Option<f64>)> =
            Vec::with_capacity(train.len());
        let mut fg_sum = 0.0;
        for ex in &train {
            let y = ex
                .label
                .ok_or_else(|| Error::Data(format!("train example {} has no label", ex.id)))?;
            let map = mask::multiscale_cam(&model, &ex.image, y, cfg)?;
            let pseudo = mask::threshold_mask(&mask::normalize_map(&map), cfg)?;
            let iou = mask::mask_iou(&pseudo, &ex.true_mask)?;
            fg_sum += ex.true_mask.iter().filter(|&&v| v != 0).count() as f64
                / ex.true_mask.len() as f64;
            rows.push((ex.id.clone(), y, pseudo, Some(iou)));
        }
        mask::io::save_masks(&self.masks_dir(), cfg, &rows)?;
        mask::io::set_mean_fg_fraction(&self.masks_dir(), fg_sum / train.len() as f64)?;
        let (manifest, _) = mask::io::load_masks(&self.masks_dir())?;
        println!(
            "[masks] {} pseudo-masks, mean IoU {:.4} (chance {:.4})",
            rows.len(),
            manifest.mean_iou.unwrap_or(f64::NAN),
            manifest.mean_fg_fraction.unwrap_or(f64::NAN)
        );
        Ok(vec!["masks/manifest.json".into()])
    }

    fn stage_train_dense(&self) -> Result<Vec<String>> {
        let (spec, all) = load_dataset(&self.dataset_dir())?;
        let train = split_of(&all, SplitTag::IdTrain);
        let (mask_manifest, masks) = mask::io::load_masks(&self.masks_dir())?;
        let by_id: BTreeMap<&str, &Array2<u8>> = mask_manifest
            .entries
            .iter()
            .zip(&masks)
            .map(|(entry, mask)| (entry.id.as_str(), mask))
            .collect();
        let mut label_maps = Vec::with_capacity(train.len());
        for ex in &train {
            let pseudo = by_id.get(ex.id.as_str()).ok_or_else(|| {
                Error::Data(format!("no pseudo-mask stored for example {}", ex.id))
            })?;
            let y = ex
                .label
                .ok_or_else(|| Error::Data(format!("train example {} has no label", ex.id)))?;
            label_maps.push(mask::build_label_map(pseudo, y, spec.num_classes)?.values);
        }
        let init =
            load_checkpoint_expecting(&self.checkpoint_path("classifier"), HeadMode::KClass)?;
        let (model, curve) = train_dense(
            Some(&init),
            &train,
            &label_maps,
            &self.config.model,
            &self.config.train_dense_effective(),
            spec.num_classes,
        )?;
        save_checkpoint(&model, &self.checkpoint_path("dense"))?;
        write_json(&self.root.join("curves/dense_loss.json"), &curve)?;
        println!(
            "[train-dense] {} steps, final loss {:.4}",
            curve.len(),
            curve.last().copied().unwrap_or(f64::NAN)
        );
        Ok(vec![
            "checkpoints/dense.ckpt".into(),
            "curves/dense_loss.json".into(),
        ])
    }

    fn stage_convert(&self) -> Result<Vec<String>> {
        let dense = load_checkpoint_expecting(&self.checkpoint_path("dense"), HeadMode::KPlusOne)?;
        let checksum_before = dense.weight_checksum();
        let converted = dense.convert_dense_to_classifier()?;
        if converted.weight_checksum() != checksum_before {
            return Err(Error::Checkpoint(
                "conversion must not touch weights, but the checksum changed".into(),
            ));
        }
        save_checkpoint(&converted, &self.checkpoint_path("converted"))?;
        println!("[convert] head flipped, weight checksum unchanged");
        Ok(vec!["checkpoints/converted.ckpt".into()])
    }

    fn stage_score(&self) -> Result<Vec<String>> {
        let (spec, all) = load_dataset(&self.dataset_dir())?;
        let model =
            load_checkpoint_expecting(&self.checkpoint_path("converted"), HeadMode::KPlusOne)?;
        let mut records: Vec<(String, &'static str, Array3<f32>)> = Vec::new();
        for tag in [
            SplitTag::IdTest,
            SplitTag::OodSemantic,
            SplitTag::OodDomain,
            SplitTag::OodBoth,
        ] {
            for ex in split_of(&all, tag) {
                records.push((ex.id, tag.as_str(), ex.image));
            }
        }
        fs::create_dir_all(self.root.join("scores"))?;
        let mut artifacts = Vec::with_capacity(self.config.scorers.len());
        for spec_scorer in &self.config.scorers {
            let vim = if spec_scorer.kind == ScorerKind::Vim {
                Some(self.fit_vim_on_train(&all, &model, spec_scorer, spec.num_classes)?)
            } else {
                None
            };
            let set = score_examples(
                &model,
                records.iter().map(|(id, split, image)| (id.as_str(), *split, image)),
                spec_scorer,
                &self.config.fusion,
                vim.as_ref(),
            )?;
            let path = self.scores_path(spec_scorer.kind);
            save_scores(&path, &set)?;
            println!(
                "[score] {}: {} rows, {} clamp event(s)",
                spec_scorer.kind.id(),
                set.rows.len(),
                set.clamp_events
            );
            artifacts.push(format!("scores/{}.csv", spec_scorer.kind.id()));
        }
        Ok(artifacts)
    }

    fn fit_vim_on_train(
        &self,
        all: &crate::synth::ExampleSet,
        model: &crate::model::DualHeadModel<f32>,
        spec_scorer: &ScorerSpec,
        k: usize,
    ) -> Result<VimParams> {
        let train = split_of(all, SplitTag::IdTrain);
        if train.is_empty() {
            return Err(Error::Data("no training split to fit the residual scorer".into()));
        }
        let channels = model.feature_channels();
        let mut features = Array2::<f64>::zeros((train.len(), channels));
        for (i, ex) in train.iter().enumerate() {
            let pooled = model.pooled_features(&ex.image)?;
            for (j, v) in pooled.iter().enumerate() {
                features[(i, j)] = *v as f64;
            }
        }
        let weight = model.classifier.weight.mapv(|v| v as f64);
        let bias: Array1<f64> = model.classifier.bias.mapv(|v| v as f64);
        fit_vim(&features, &weight, &bias, spec_scorer.vim_dim, k)
    }

    fn stage_eval(&self) -> Result<Vec<String>> {
        let (spec, all) = load_dataset(&self.dataset_dir())?;
        let id_test = split_of(&all, SplitTag::IdTest);
        let mut pairs = Vec::with_capacity(id_test.len());
        for ex in &id_test {
            let y = ex
                .label
                .ok_or_else(|| Error::Data(format!("test example {} has no label", ex.id)))?;
            pairs.push((&ex.image, y));
        }
        let converted =
            load_checkpoint_expecting(&self.checkpoint_path("converted"), HeadMode::KPlusOne)?;
        let vanilla =
            load_checkpoint_expecting(&self.checkpoint_path("classifier"), HeadMode::KClass)?;
        let converted_top1 = top1_accuracy(&converted, pairs.iter().copied())?;
        let vanilla_top1 = top1_accuracy(&vanilla, pairs.iter().copied())?;
        let _ = spec;
        let mut sets = Vec::with_capacity(self.config.scorers.len());
        for spec_scorer in &self.config.scorers {
            let mut set = load_scores(&self.scores_path(spec_scorer.kind))?;
            self.add_combined_split(&mut set);
            sets.push(set);
        }
        let report = build_eval_report(
            &sets,
            SplitTag::IdTest.as_str(),
            self.config.eval.tpr_level,
            self.config.eval.histogram_bins,
            self.config.seed,
            converted_top1,
            vanilla_top1,
            self.config.to_toml()?,
        )?;
        save_report(&self.report_path(), &report)?;
        fs::write(self.root.join("report.txt"), summary_table(&report))?;
        println!(
            "[eval] ID top-1 {:.4} converted vs {:.4} vanilla; {} scorer table(s)",
            converted_top1,
            vanilla_top1,
            sets.len()
        );
        Ok(vec!["report.json".into(), "report.txt".into()])
    }

    /// Pool the configured source splits into one extra OOD split so the
    /// report carries metrics over their union as well.
    fn add_combined_split(&self, set: &mut ScoreSet) {
        let eval = &self.config.eval;
        if eval.combined_splits.is_empty() {
            return;
        }
        if set.rows.iter().any(|r| r.split == eval.combined_name) {
            return;
        }
        let pooled: Vec<ScoreRow> = set
            .rows
            .iter()
            .filter(|r| eval.combined_splits.contains(&r.split))
            .map(|r| {
                let mut row = r.clone();
                row.split = eval.combined_name.clone();
                row
            })
            .collect();
        set.rows.extend(pooled);
    }

    fn stage_plot(&self) -> Result<Vec<String>> {
        let report = load_report(&self.report_path())?;
        let plots_dir = self.root.join("plots");
        let files = plot::render_all(&report, &plots_dir)?;
        println!("[plot] {} file(s) under plots/", files.len());
        Ok(files.into_iter().map(|f| format!("plots/{f}")).collect())
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn now_epoch_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string(value)?)?;
    Ok(())
}
