//! Dataset persistence: one JSON manifest plus per-example PNG rasters.
//!
//! Images are 8-bit RGB; masks are 8-bit grayscale with 0 = background
//! and 255 = foreground. Pixel values are quantized to 1/255 steps at
//! render time, so save → load reproduces tensors exactly and identical
//! specs produce byte-identical directories.

use crate::error::{Error, Result};
use crate::synth::{DatasetSpec, Example, ExampleSet, SplitTag, CHANNELS};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: SplitTag,
    pub label: Option<usize>,
    pub shape_id: String,
    pub texture_id: String,
    pub image_file: String,
    pub mask_file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub examples: Vec<ManifestEntry>,
}

fn image_to_rgb8(image: &Array3<f32>) -> image::RgbImage {
    let (_, h, w) = image.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        let px = |c: usize| (image[(c, i, j)] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn mask_to_gray8(mask: &Array2<u8>) -> image::GrayImage {
    let (h, w) = mask.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[(y as usize, x as usize)] == 1 { 255 } else { 0 }])
    })
}

fn rgb8_to_image(img: &image::RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((CHANNELS, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..CHANNELS {
            out[(c, y as usize, x as usize)] = px.0[c] as f32 / 255.0;
        }
    }
    out
}

fn gray8_to_mask(img: &image::GrayImage) -> Result<Array2<u8>> {
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = match px.0[0] {
            0 => 0,
            255 => 1,
            other => {
                return Err(Error::Data(format!(
                    "mask pixel must be 0 or 255, found {other} at ({x}, {y})"
                )))
            }
        };
    }
    Ok(out)
}

/// Write every split into `dir`: `manifest.json`, `images/`, `masks/`.
pub fn save_dataset(dir: &Path, spec: &DatasetSpec, splits: &[&ExampleSet]) -> Result<()> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&masks_dir)?;

    let mut entries = Vec::new();
    for set in splits {
        for ex in set.iter() {
            let image_file = format!("images/{}.png", ex.id);
            let mask_file = format!("masks/{}.png", ex.id);
            image_to_rgb8(&ex.image)
                .save(dir.join(&image_file))
                .map_err(|e| Error::Data(format!("writing {image_file}: {e}")))?;
            mask_to_gray8(&ex.true_mask)
                .save(dir.join(&mask_file))
                .map_err(|e| Error::Data(format!("writing {mask_file}: {e}")))?;
            entries.push(ManifestEntry {
                id: ex.id.clone(),
                split: ex.split,
                label: ex.label,
                shape_id: ex.shape_id.clone(),
                texture_id: ex.texture_id.clone(),
                image_file,
                mask_file,
            });
        }
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        examples: entries,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Read a dataset directory back into memory, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<(DatasetSpec, ExampleSet)> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("reading {}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&raw)?;

    let mut examples = Vec::with_capacity(manifest.examples.len());
    for entry in manifest.examples {
        let img = image::open(dir.join(&entry.image_file))
            .map_err(|e| Error::Data(format!("reading {}: {e}", entry.image_file)))?
            .into_rgb8();
        let msk = image::open(dir.join(&entry.mask_file))
            .map_err(|e| Error::Data(format!("reading {}: {e}", entry.mask_file)))?
            .into_luma8();
        examples.push(Example {
            id: entry.id,
            image: rgb8_to_image(&img),
            label: entry.label,
            true_mask: gray8_to_mask(&msk)?,
            split: entry.split,
            shape_id: entry.shape_id,
            texture_id: entry.texture_id,
        });
    }
    Ok((manifest.spec, examples))
}

/// Select one split from a loaded example list.
pub fn split_of(examples: &ExampleSet, tag: SplitTag) -> ExampleSet {
    examples.iter().filter(|e| e.split == tag).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_id_dataset, gen_ood_dataset, DatasetSpec, OodKind};

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            n_train: 8,
            n_test: 4,
            seed: 9,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn save_load_round_trips_exactly() {
        let spec = tiny_spec();
        let (train, test) = gen_id_dataset(&spec).unwrap();
        let ood = gen_ood_dataset(OodKind::Domain, &spec, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &spec, &[&train, &test, &ood]).unwrap();

        let (_, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), train.len() + test.len() + ood.len());
        for (orig, back) in train.iter().chain(test.iter()).chain(ood.iter()).zip(&loaded) {
            assert_eq!(orig.id, back.id);
            assert_eq!(orig.image, back.image, "image drift for {}", orig.id);
            assert_eq!(orig.true_mask, back.true_mask);
            assert_eq!(orig.label, back.label);
            assert_eq!(orig.split, back.split);
        }
    }

    #[test]
    fn identical_specs_serialize_byte_identically() {
        let spec = tiny_spec();
        let dirs: Vec<tempfile::TempDir> = (0..2)
            .map(|_| {
                let (train, test) = gen_id_dataset(&spec).unwrap();
                let dir = tempfile::tempdir().unwrap();
                save_dataset(dir.path(), &spec, &[&train, &test]).unwrap();
                dir
            })
            .collect();

        let manifest_a = fs::read(dirs[0].path().join("manifest.json")).unwrap();
        let manifest_b = fs::read(dirs[1].path().join("manifest.json")).unwrap();
        assert_eq!(manifest_a, manifest_b);

        for sub in ["images", "masks"] {
            let mut names: Vec<String> = fs::read_dir(dirs[0].path().join(sub))
                .unwrap()
                .map(|e| e.unwrap().file_name().into_string().unwrap())
                .collect();
            names.sort();
            assert!(!names.is_empty());
            for name in names {
                let a = fs::read(dirs[0].path().join(sub).join(&name)).unwrap();
                let b = fs::read(dirs[1].path().join(sub).join(&name)).unwrap();
                assert_eq!(a, b, "{sub}/{name} differs between runs");
            }
        }
    }

    #[test]
    fn corrupt_mask_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let (train, test) = gen_id_dataset(&spec).unwrap();
        save_dataset(dir.path(), &spec, &[&train, &test]).unwrap();
        // Overwrite one mask with a gray value outside {0, 255}.
        let bad = image::GrayImage::from_pixel(32, 32, image::Luma([128]));
        bad.save(dir.path().join("masks/id_train_00000.png")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
