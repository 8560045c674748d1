//! Synthetic shapes-on-textures benchmark with exact foreground masks.
//!
//! Each in-distribution class is a shape; backgrounds are procedural
//! textures. Because shape vocabulary and texture vocabulary are
//! independent latent factors, semantic shift (unseen shape) and domain
//! shift (unseen texture) can be generated and verified separately.

pub mod io;
pub mod shapes;
pub mod textures;

use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use shapes::{feasible_sizes, ShapeKind, SHAPE_CATALOG};
pub use textures::{Texture, TEXTURE_CATALOG};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub image_size: usize,
    /// Shape identifier per class; length must equal `num_classes`.
    pub shapes_per_class: Vec<String>,
    /// Background texture ids for in-distribution data.
    pub id_texture_ids: Vec<String>,
    /// `[lo, hi]` bounds on foreground area as a fraction of the frame.
    pub fg_fraction_range: [f64; 2],
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 4,
            image_size: 32,
            shapes_per_class: ["square", "circle", "triangle", "cross"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            id_texture_ids: ["noise", "stripes:4:0", "checker:4"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            fg_fraction_range: [0.1, 0.35],
            n_train: 2000,
            n_test: 500,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size must be at least 16, got {}",
                self.image_size
            )));
        }
        if self.shapes_per_class.len() != self.num_classes {
            return Err(Error::Config(format!(
                "shapes_per_class has {} entries for {} classes",
                self.shapes_per_class.len(),
                self.num_classes
            )));
        }
        if self.id_texture_ids.is_empty() {
            return Err(Error::Config("id_texture_ids must be nonempty".into()));
        }
        let [lo, hi] = self.fg_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "fg_fraction_range must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]"
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &self.shapes_per_class {
            shapes::ShapeKind::parse(id)?;
            if !seen.insert(id.clone()) {
                return Err(Error::Config(format!("duplicate shape id '{id}'")));
            }
        }
        for id in &self.id_texture_ids {
            textures::Texture::parse(id)?;
        }
        for kind_id in &self.shapes_per_class {
            let kind = shapes::ShapeKind::parse(kind_id)?;
            if feasible_sizes(kind, self.image_size, self.image_size, lo, hi).is_empty() {
                return Err(Error::Config(format!(
                    "no size of shape '{kind_id}' fits fg_fraction_range on a {0}x{0} frame",
                    self.image_size
                )));
            }
        }
        Ok(())
    }

    /// Shape ids in the catalog but absent from this spec's class list.
    pub fn held_out_shapes(&self) -> Vec<String> {
        SHAPE_CATALOG
            .iter()
            .filter(|id| !self.shapes_per_class.iter().any(|s| s == *id))
            .map(|s| s.to_string())
            .collect()
    }

    /// Texture ids in the catalog but absent from this spec's ID list.
    pub fn held_out_textures(&self) -> Vec<String> {
        TEXTURE_CATALOG
            .iter()
            .filter(|id| !self.id_texture_ids.iter().any(|t| t == *id))
            .map(|s| s.to_string())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    IdTrain,
    IdTest,
    OodSemantic,
    OodDomain,
    OodBoth,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::IdTrain => "id_train",
            SplitTag::IdTest => "id_test",
            SplitTag::OodSemantic => "ood_semantic",
            SplitTag::OodDomain => "ood_domain",
            SplitTag::OodBoth => "ood_both",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    /// (3, H, W) tensor with values in [0, 1], quantized to 1/255 steps.
    pub image: Array3<f32>,
    /// Class index in [0, K); absent for examples with unseen shapes.
    pub label: Option<usize>,
    /// Exact foreground raster (1 = shape pixel).
    pub true_mask: Array2<u8>,
    pub split: SplitTag,
    pub shape_id: String,
    pub texture_id: String,
}

pub type ExampleSet = Vec<Example>;

/// Placement of a shape's bounding box inside the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

/// Foreground paint: one saturated channel against the mid-band ID
/// textures, so shapes are crisply visible and localizable. The held-out
/// texture families intrude into this same gamut, which is part of what
/// makes them out-of-domain for a background head tuned to ID scenes.
#[derive(Debug, Clone, Copy)]
pub struct Paint {
    pub rgb: [u8; CHANNELS],
}

impl Paint {
    pub fn sample(rng: &mut Rng) -> Self {
        let hot = rng.gen_range(0..CHANNELS);
        let hot_value = rng.gen_range(208..=255u32) as u8;
        let cold_value = rng.gen_range(16..=64u32) as u8;
        let mut rgb = [cold_value; CHANNELS];
        rgb[hot] = hot_value;
        Paint { rgb }
    }
}

/// Compose one image: texture background, shape foreground, exact mask.
/// The RNG drives texture phase only; geometry is fully explicit.
pub fn render_example(
    shape: ShapeKind,
    texture_id: &str,
    placement: Placement,
    paint: Paint,
    image_size: usize,
    rng: &mut Rng,
) -> Result<(Array3<f32>, Array2<u8>)> {
    let h = image_size;
    let w = image_size;
    if placement.size == 0 {
        return Err(Error::Placement("shape size must be positive".into()));
    }
    if placement.top + placement.size > h || placement.left + placement.size > w {
        return Err(Error::Placement(format!(
            "{}x{} box at ({}, {}) exceeds the {h}x{w} frame",
            placement.size, placement.size, placement.top, placement.left
        )));
    }

    let texture = Texture::parse(texture_id)?;
    let background = texture.render(h, w, rng);
    let box_mask = shape.rasterize(placement.size);

    let mut mask = Array2::<u8>::zeros((h, w));
    for i in 0..placement.size {
        for j in 0..placement.size {
            if box_mask[(i, j)] == 1 {
                mask[(placement.top + i, placement.left + j)] = 1;
            }
        }
    }

    let mut image_u8 = Array3::<u8>::zeros((CHANNELS, h, w));
    for c in 0..CHANNELS {
        let fg = paint.rgb[c];
        for i in 0..h {
            for j in 0..w {
                image_u8[(c, i, j)] =
                    if mask[(i, j)] == 1 { fg } else { background[(c, i, j)] };
            }
        }
    }
    let image = image_u8.mapv(|v| v as f32 / 255.0);
    Ok((image, mask))
}

/// Draw a feasible size and in-frame position for a shape. The feasible
/// size set is nonempty for validated specs, and sampling from it keeps
/// every true mask's area inside the configured fraction range.
fn sample_placement(
    kind: ShapeKind,
    image_size: usize,
    fg_range: [f64; 2],
    rng: &mut Rng,
) -> Result<Placement> {
    let sizes = feasible_sizes(kind, image_size, image_size, fg_range[0], fg_range[1]);
    let size = *sizes.choose(rng).ok_or_else(|| {
        Error::Config(format!(
            "no size of shape '{}' fits the fraction range on a {0}x{0} frame",
            kind.id()
        ))
    })?;
    let top = rng.gen_range(0..=image_size - size);
    let left = rng.gen_range(0..=image_size - size);
    Ok(Placement { top, left, size })
}

fn make_example(
    spec: &DatasetSpec,
    split: SplitTag,
    index: usize,
    shape_id: &str,
    texture_id: &str,
    label: Option<usize>,
) -> Result<Example> {
    let id = format!("{}_{index:05}", split.as_str());
    let mut rng = rng_for(spec.seed, &format!("example/{id}"));
    let kind = ShapeKind::parse(shape_id)?;
    let placement = sample_placement(kind, spec.image_size, spec.fg_fraction_range, &mut rng)?;
    let paint = Paint::sample(&mut rng);
    let (image, true_mask) =
        render_example(kind, texture_id, placement, paint, spec.image_size, &mut rng)?;
    Ok(Example {
        id,
        image,
        label,
        true_mask,
        split,
        shape_id: shape_id.to_string(),
        texture_id: texture_id.to_string(),
    })
}

fn gen_id_split(spec: &DatasetSpec, split: SplitTag, n: usize) -> Result<ExampleSet> {
    let mut out = Vec::with_capacity(n);
    for index in 0..n {
        // Round-robin class assignment keeps balance within one example.
        let class = index % spec.num_classes;
        let shape_id = spec.shapes_per_class[class].clone();
        let mut pick_rng = rng_for(spec.seed, &format!("texture_pick/{}/{index}", split.as_str()));
        let texture_id = spec.id_texture_ids.choose(&mut pick_rng).unwrap().clone();
        out.push(make_example(spec, split, index, &shape_id, &texture_id, Some(class))?);
    }
    Ok(out)
}

/// Generate balanced ID train and test splits. Pure in (spec); identical
/// specs produce byte-identical serialized datasets.
pub fn gen_id_dataset(spec: &DatasetSpec) -> Result<(ExampleSet, ExampleSet)> {
    spec.validate()?;
    let train = gen_id_split(spec, SplitTag::IdTrain, spec.n_train)?;
    let test = gen_id_split(spec, SplitTag::IdTest, spec.n_test)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodKind {
    Semantic,
    Domain,
    Both,
}

impl OodKind {
    pub fn split_tag(&self) -> SplitTag {
        match self {
            OodKind::Semantic => SplitTag::OodSemantic,
            OodKind::Domain => SplitTag::OodDomain,
            OodKind::Both => SplitTag::OodBoth,
        }
    }
}

/// Generate an OOD split. Semantic shift swaps in a held-out shape on an
/// ID texture; domain shift keeps an ID shape (so the example stays
/// classifiable) on a held-out texture; `Both` holds out both factors.
pub fn gen_ood_dataset(kind: OodKind, spec: &DatasetSpec, n: usize) -> Result<ExampleSet> {
    spec.validate()?;
    let held_shapes = spec.held_out_shapes();
    let held_textures = spec.held_out_textures();
    match kind {
        OodKind::Semantic | OodKind::Both if held_shapes.is_empty() => {
            return Err(Error::Config(
                "no held-out shape available for semantic-shift generation".into(),
            ));
        }
        OodKind::Domain | OodKind::Both if held_textures.is_empty() => {
            return Err(Error::Config(
                "no held-out texture available for domain-shift generation".into(),
            ));
        }
        _ => {}
    }

    let split = kind.split_tag();
    let mut out = Vec::with_capacity(n);
    for index in 0..n {
        let mut pick_rng = rng_for(spec.seed, &format!("ood_pick/{}/{index}", split.as_str()));
        let (shape_id, texture_id, label) = match kind {
            OodKind::Semantic => {
                let shape = held_shapes.choose(&mut pick_rng).unwrap().clone();
                let texture = spec.id_texture_ids.choose(&mut pick_rng).unwrap().clone();
                (shape, texture, None)
            }
            OodKind::Domain => {
                let class = index % spec.num_classes;
                let shape = spec.shapes_per_class[class].clone();
                let texture = held_textures.choose(&mut pick_rng).unwrap().clone();
                (shape, texture, Some(class))
            }
            OodKind::Both => {
                let shape = held_shapes.choose(&mut pick_rng).unwrap().clone();
                let texture = held_textures.choose(&mut pick_rng).unwrap().clone();
                (shape, texture, None)
            }
        };
        out.push(make_example(spec, split, index, &shape_id, &texture_id, label)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_train: 40,
            n_test: 12,
            seed: 42,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn id_dataset_is_class_balanced() {
        let spec = DatasetSpec {
            n_train: 200,
            n_test: 20,
            ..DatasetSpec::default()
        };
        let (train, _) = gen_id_dataset(&spec).unwrap();
        assert_eq!(train.len(), 200);
        let mut counts = vec![0usize; spec.num_classes];
        for ex in &train {
            counts[ex.label.unwrap()] += 1;
        }
        assert_eq!(counts, vec![50, 50, 50, 50]);
    }

    #[test]
    fn mask_fraction_stays_in_configured_range() {
        let spec = small_spec();
        let (train, test) = gen_id_dataset(&spec).unwrap();
        let total = (spec.image_size * spec.image_size) as f64;
        let [lo, hi] = spec.fg_fraction_range;
        for ex in train.iter().chain(test.iter()) {
            let area = ex.true_mask.iter().filter(|&&v| v == 1).count() as f64;
            let frac = area / total;
            assert!(frac >= lo && frac <= hi, "{}: fraction {frac}", ex.id);
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = small_spec();
        let (a, _) = gen_id_dataset(&spec).unwrap();
        let (b, _) = gen_id_dataset(&spec).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.true_mask, y.true_mask);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn ood_splits_respect_vocabulary_exclusions() {
        let spec = small_spec();
        let sem = gen_ood_dataset(OodKind::Semantic, &spec, 20).unwrap();
        for ex in &sem {
            assert!(!spec.shapes_per_class.contains(&ex.shape_id));
            assert!(spec.id_texture_ids.contains(&ex.texture_id));
            assert!(ex.label.is_none());
        }
        let dom = gen_ood_dataset(OodKind::Domain, &spec, 20).unwrap();
        for ex in &dom {
            assert!(spec.shapes_per_class.contains(&ex.shape_id));
            assert!(!spec.id_texture_ids.contains(&ex.texture_id));
            assert!(ex.label.is_some());
        }
        let both = gen_ood_dataset(OodKind::Both, &spec, 20).unwrap();
        for ex in &both {
            assert!(!spec.shapes_per_class.contains(&ex.shape_id));
            assert!(!spec.id_texture_ids.contains(&ex.texture_id));
        }
    }

    #[test]
    fn exhausted_vocabulary_is_a_config_error() {
        let mut spec = small_spec();
        spec.num_classes = 6;
        spec.shapes_per_class = SHAPE_CATALOG.iter().map(|s| s.to_string()).collect();
        assert!(matches!(
            gen_ood_dataset(OodKind::Semantic, &spec, 4),
            Err(Error::Config(_))
        ));
        let mut spec = small_spec();
        spec.id_texture_ids = TEXTURE_CATALOG.iter().map(|s| s.to_string()).collect();
        assert!(matches!(
            gen_ood_dataset(OodKind::Domain, &spec, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn render_rejects_out_of_frame_placement() {
        let mut rng = rng_for(1, "placement");
        let paint = Paint { rgb: [140, 110, 130] };
        let result = render_example(
            ShapeKind::Square,
            "noise",
            Placement { top: 28, left: 0, size: 8 },
            paint,
            32,
            &mut rng,
        );
        assert!(matches!(result, Err(Error::Placement(_))));
    }

    #[test]
    fn mask_extents_match_requested_placement() {
        let mut rng = rng_for(2, "extents");
        let paint = Paint { rgb: [120, 150, 100] };
        let placement = Placement { top: 5, left: 9, size: 12 };
        for shape_id in SHAPE_CATALOG {
            let kind = ShapeKind::parse(shape_id).unwrap();
            let (_, mask) =
                render_example(kind, "checker:4", placement, paint, 32, &mut rng).unwrap();
            let rows: Vec<usize> = mask
                .rows()
                .into_iter()
                .enumerate()
                .filter(|(_, r)| r.iter().any(|&v| v == 1))
                .map(|(i, _)| i)
                .collect();
            let cols: Vec<usize> = (0..32)
                .filter(|&j| (0..32).any(|i| mask[(i, j)] == 1))
                .collect();
            assert_eq!(*rows.first().unwrap(), placement.top, "{shape_id}");
            assert_eq!(*rows.last().unwrap(), placement.top + placement.size - 1, "{shape_id}");
            assert_eq!(*cols.first().unwrap(), placement.left, "{shape_id}");
            assert_eq!(*cols.last().unwrap(), placement.left + placement.size - 1, "{shape_id}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec();
        spec.num_classes = 1;
        spec.shapes_per_class = vec!["square".into()];
        assert!(spec.validate().is_err());

        let mut spec = small_spec();
        spec.image_size = 8;
        assert!(spec.validate().is_err());

        let mut spec = small_spec();
        spec.fg_fraction_range = [0.0, 0.3];
        assert!(spec.validate().is_err());

        let mut spec = small_spec();
        spec.id_texture_ids.clear();
        assert!(spec.validate().is_err());
    }
}
