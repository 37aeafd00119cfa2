//! End-to-end distillation: compress every image into candidate crops,
//! keep the highest-scoring crops per class, tile them into full-size
//! images and attach per-patch soft labels from a teacher checkpoint.

mod config;
mod store;

pub use config::{CroppingMode, DistillConfig, KeyValues, TeacherChoice};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Image, ImageSample};
use crate::model::{soft_label, train_sgd, ArchSpec, CropAugment, Example, Label, ModelCheckpoint, SoftLabel, TrainConfig};
use crate::patch::{
    compress_dataset, random_crop_dataset, AttributionCache, CompressConfig, CompressedSample, CropOrigin,
    NoiseConfig,
};
use crate::seed;
use crate::utility::{score_samples, select_top};

/// Side of the attribution patch grid; crops are 2×2 blocks of it.
pub const IMAGE_GRID: usize = 4;

/// Early and converged checkpoints of one teacher run.
#[derive(Debug, Clone, PartialEq)]
pub struct Teachers {
    pub early: ModelCheckpoint,
    pub converged: ModelCheckpoint,
}

impl Teachers {
    /// Checkpoint used for soft labels under `config`.
    pub fn labeler(&self, config: &DistillConfig) -> &ModelCheckpoint {
        if config.uses_early_teacher() {
            &self.early
        } else {
            &self.converged
        }
    }
}

/// Named seeds derived from the master seed.
pub fn derived_seeds(master: u64) -> Vec<(&'static str, u64)> {
    ["teacher-init", "teacher-shuffle", "crop-noise", "kernel", "random-crop", "coreset"]
        .into_iter()
        .map(|name| (name, seed::split(master, name, 0)))
        .collect()
}

fn derived(master: u64, name: &str) -> u64 {
    seed::split(master, name, 0)
}

pub fn class_count(dataset: &[ImageSample]) -> Result<usize> {
    dataset
        .iter()
        .map(|s| s.label + 1)
        .max()
        .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))
}

/// Per-channel mean over a dataset.
pub fn dataset_mean(dataset: &[ImageSample]) -> Result<Vec<f64>> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
    let mut mean = vec![0.0; first.pixels.channels()];
    for s in dataset {
        for (m, v) in mean.iter_mut().zip(s.pixels.channel_means()) {
            *m += v;
        }
    }
    Ok(mean.into_iter().map(|m| m / dataset.len() as f64).collect())
}

/// Trains the ConvNet teacher with hard labels and keeps the early and
/// final checkpoints.
pub fn train_teachers(dataset: &[ImageSample], config: &DistillConfig) -> Result<Teachers> {
    config.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
    let arch = ArchSpec::convnet(
        first.pixels.height(),
        first.pixels.width(),
        first.pixels.channels(),
        config.teacher_conv,
        class_count(dataset)?,
    )
    .with_input_mean(dataset_mean(dataset)?);
    let init = ModelCheckpoint::init(arch, derived(config.seed, "teacher-init"))?;
    let examples: Vec<Example> = dataset
        .iter()
        .map(|s| Example {
            input: s.pixels.clone(),
            label: Label::Hard(s.label),
        })
        .collect();
    let train = TrainConfig {
        epochs: config.teacher_epochs,
        eta: config.teacher_eta,
        batch_size: config.teacher_batch,
        seed: derived(config.seed, "teacher-shuffle"),
        checkpoint_epochs: vec![config.early_epoch],
        augment: (config.teacher_augment > 0.0).then_some(CropAugment {
            prob: config.teacher_augment,
            min_side: config.teacher_min_side,
        }),
        ..TrainConfig::default()
    };
    let mut checkpoints = train_sgd(&init, &examples, &train)?;
    let converged = checkpoints.pop().expect("final checkpoint");
    let early = checkpoints.pop().unwrap_or_else(|| converged.clone());
    Ok(Teachers { early, converged })
}

/// One patch of a distilled image and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub source_id: usize,
    /// Crop block in the source image; `None` when the patch is a whole image.
    pub origin: Option<CropOrigin>,
    pub crop_index: usize,
    pub gradnorm: f64,
    pub loss: f64,
    pub label: SoftLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistilledImage {
    pub class: usize,
    pub index: usize,
    /// Pixels quantized to 8 bits, exactly as stored on disk.
    pub pixels: Image,
    pub patches: Vec<PatchRecord>,
}

impl DistilledImage {
    /// The `g×g` patch views of the image in row-major order.
    pub fn patch_images(&self, g: usize) -> Result<Vec<Image>> {
        let (h, w) = (self.pixels.height() / g, self.pixels.width() / g);
        let mut out = Vec::with_capacity(g * g);
        for r in 0..g {
            for c in 0..g {
                out.push(self.pixels.crop(r * h, c * w, h, w)?);
            }
        }
        Ok(out)
    }
}

/// A distilled dataset `D̃` and its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledDataset {
    pub config: DistillConfig,
    pub classes: usize,
    /// Ordered by class, then image index.
    pub images: Vec<DistilledImage>,
}

impl DistilledDataset {
    pub fn patch_count(&self) -> usize {
        self.images.iter().map(|i| i.patches.len()).sum()
    }

    /// Student training examples: one per patch, soft-labeled.
    pub fn examples(&self) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(self.patch_count());
        for img in &self.images {
            let views = img.patch_images(self.config.g)?;
            if views.len() != img.patches.len() {
                return Err(Error::DimensionMismatch {
                    what: "soft labels per image",
                    expected: views.len(),
                    got: img.patches.len(),
                });
            }
            for (view, patch) in views.into_iter().zip(&img.patches) {
                out.push(Example {
                    input: view,
                    label: Label::Soft(patch.label.probs.clone()),
                });
            }
        }
        Ok(out)
    }
}

/// Instrumentation of one distillation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DistillStats {
    pub candidates: usize,
    pub unique_candidates: usize,
    pub attributions_computed: u64,
    pub attribution_hits: u64,
}

/// 8-bit quantization used by the PPM writer, applied in memory so a
/// dataset equals its reloaded copy.
pub fn quantize(image: &Image) -> Image {
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (255.0 * *v).round().clamp(0.0, 255.0) / 255.0;
    }
    out
}

/// Tiles `g×g` equally sized crops of one class into a `height×width` image
/// (g = 2), or upsamples a single crop to it (g = 1).
pub fn reconstruct_image(
    patches: &[&CompressedSample],
    g: usize,
    height: usize,
    width: usize,
) -> Result<Image> {
    if patches.len() != g * g || g == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} patches cannot fill a {g}x{g} grid",
            patches.len()
        )));
    }
    let first = &patches[0].pixels;
    if patches.iter().any(|p| p.label != patches[0].label) {
        return Err(Error::InvalidArgument("patches of one image must share a class".into()));
    }
    if patches.iter().any(|p| {
        p.pixels.height() != first.height()
            || p.pixels.width() != first.width()
            || p.pixels.channels() != first.channels()
    }) {
        return Err(Error::InvalidArgument("patches of one image must share extents".into()));
    }
    if g == 1 {
        return first.resize_bilinear(height, width);
    }
    if first.height() * g != height || first.width() * g != width {
        return Err(Error::InvalidArgument(format!(
            "{}x{} patches do not tile a {height}x{width} image",
            first.height(),
            first.width()
        )));
    }
    let mut out = Image::filled(height, width, first.channels(), 0.0);
    for (p, patch) in patches.iter().enumerate() {
        out.paste(&patch.pixels, (p / g) * first.height(), (p % g) * first.width())?;
    }
    Ok(out)
}

/// Distilled images of one class plus candidate counts.
#[derive(Debug, Clone)]
pub struct ClassShard {
    pub class: usize,
    pub images: Vec<DistilledImage>,
    pub candidates: usize,
    pub unique_candidates: usize,
}

/// Stage 1 and Stage 2 for one class. `class_samples` must all carry label
/// `class`; attribution and scoring use the converged teacher, soft labels
/// come from the checkpoint chosen by `config`.
pub fn distill_class(
    class: usize,
    class_samples: &[ImageSample],
    teachers: &Teachers,
    config: &DistillConfig,
    cache: &AttributionCache,
) -> Result<ClassShard> {
    if let Some(s) = class_samples.iter().find(|s| s.label != class) {
        return Err(Error::InvalidArgument(format!("sample {} is not of class {class}", s.id)));
    }
    let scorer = &teachers.converged;
    let candidates = match config.cropping {
        CroppingMode::Attribution => {
            let compress = CompressConfig {
                grid_rows: IMAGE_GRID,
                grid_cols: IMAGE_GRID,
                noise: NoiseConfig {
                    alpha: config.alpha,
                    crops_per_image: config.crops_per_image,
                    seed: derived(config.seed, "crop-noise"),
                },
                game: config.game,
                attribution: config.attribution,
                attribution_seed: derived(config.seed, "kernel"),
            };
            compress_dataset(class_samples, scorer, &compress, Some(cache))?
        }
        CroppingMode::Random => random_crop_dataset(
            class_samples,
            scorer,
            IMAGE_GRID,
            IMAGE_GRID,
            config.crops_per_image,
            derived(config.seed, "random-crop"),
        )?,
    };
    let total = candidates.len();
    let mut seen = BTreeSet::new();
    let unique: Vec<CompressedSample> = candidates
        .into_iter()
        .filter(|c| seen.insert((c.source_id, c.origin)))
        .collect();
    let inputs: Vec<(&Image, usize)> = unique.iter().map(|c| (&c.pixels, c.label)).collect();
    let scores = score_samples(scorer, &inputs)?;
    let selected = select_top(class, &scores, config.ipc, config.patches_per_image(), config.scoring)?;

    let labeler = teachers.labeler(config);
    let (h, w) = (scorer.arch.height, scorer.arch.width);
    let images = selected
        .chunks(config.patches_per_image())
        .enumerate()
        .map(|(index, group)| {
            let members: Vec<&CompressedSample> = group.iter().map(|s| &unique[s.sample_id]).collect();
            let pixels = quantize(&reconstruct_image(&members, config.g, h, w)?);
            let patches = group
                .iter()
                .zip(&members)
                .map(|(score, crop)| {
                    Ok(PatchRecord {
                        source_id: crop.source_id,
                        origin: Some(crop.origin),
                        crop_index: crop.crop_index,
                        gradnorm: score.gradnorm,
                        loss: score.loss,
                        label: soft_label(labeler, &crop.pixels)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DistilledImage {
                class,
                index,
                pixels,
                patches,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassShard {
        class,
        images,
        candidates: total,
        unique_candidates: unique.len(),
    })
}

fn split_by_class(dataset: &[ImageSample], classes: usize) -> Vec<Vec<ImageSample>> {
    let mut out = vec![Vec::new(); classes];
    for s in dataset {
        out[s.label].push(s.clone());
    }
    out
}

/// Distills every class with already-trained teachers. Attributions are
/// looked up in `cache` first, so runs that share a teacher, game and seed
/// can share one cache.
pub fn distill(
    dataset: &[ImageSample],
    teachers: &Teachers,
    config: &DistillConfig,
    cache: &AttributionCache,
) -> Result<(DistilledDataset, DistillStats)> {
    config.validate()?;
    let classes = class_count(dataset)?;
    let before = (cache.computed(), cache.hits());
    let shards = split_by_class(dataset, classes)
        .par_iter()
        .enumerate()
        .map(|(class, samples)| {
            distill_class(class, samples, teachers, config, cache).map_err(|e| e.for_class(class))
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = DistillStats {
        candidates: shards.iter().map(|s| s.candidates).sum(),
        unique_candidates: shards.iter().map(|s| s.unique_candidates).sum(),
        attributions_computed: cache.computed() - before.0,
        attribution_hits: cache.hits() - before.1,
    };
    let images = shards.into_iter().flat_map(|s| s.images).collect();
    Ok((
        DistilledDataset {
            config: config.clone(),
            classes,
            images,
        },
        stats,
    ))
}

/// Trains the teachers from `config` and distills the dataset.
pub fn run_full(dataset: &[ImageSample], config: &DistillConfig) -> Result<(DistilledDataset, Teachers)> {
    let teachers = train_teachers(dataset, config)?;
    let (distilled, _) = distill(dataset, &teachers, config, &AttributionCache::new())?;
    Ok((distilled, teachers))
}

/// Baseline: `ipc` random real images per class, each split into `g×g`
/// patches soft-labeled by the same teacher checkpoint.
pub fn random_coreset(
    dataset: &[ImageSample],
    teachers: &Teachers,
    config: &DistillConfig,
) -> Result<DistilledDataset> {
    config.validate()?;
    let classes = class_count(dataset)?;
    let labeler = teachers.labeler(config);
    let g = config.g;
    let mut images = Vec::with_capacity(classes * config.ipc);
    for (class, samples) in split_by_class(dataset, classes).iter().enumerate() {
        if samples.len() < config.ipc {
            return Err(Error::InsufficientCandidates {
                class,
                available: samples.len(),
                required: config.ipc,
            }
            .for_class(class));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seed::stream(config.seed, "coreset", class as u64));
        for (index, &pick) in order[..config.ipc].iter().enumerate() {
            let source = &samples[pick];
            let pixels = quantize(&source.pixels);
            let (ph, pw) = (source.pixels.height() / g, source.pixels.width() / g);
            let mut patches = Vec::with_capacity(g * g);
            for p in 0..g * g {
                let (r, c) = (p / g, p % g);
                let view = source.pixels.crop(r * ph, c * pw, ph, pw)?;
                let x = teachers.converged.fit_input(&view)?;
                let (loss, grad) = teachers.converged.loss_and_backward(&x, &Label::Hard(class))?;
                patches.push(PatchRecord {
                    source_id: source.id,
                    origin: (g == 2).then_some(CropOrigin { row: 2 * r, col: 2 * c }),
                    crop_index: p,
                    gradnorm: grad.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    loss,
                    label: soft_label(labeler, &view)?,
                });
            }
            images.push(DistilledImage {
                class,
                index,
                pixels,
                patches,
            });
        }
    }
    Ok(DistilledDataset {
        config: config.clone(),
        classes,
        images,
    })
}

pub use store::{read_distilled, write_distilled};

#[cfg(test)]
mod tests {
    use super::*;

    fn crop(label: usize, fill: f64) -> CompressedSample {
        CompressedSample {
            pixels: Image::filled(2, 2, 1, fill),
            label,
            source_id: 0,
            origin: CropOrigin { row: 0, col: 0 },
            crop_index: 0,
            informativeness: 0.0,
        }
    }

    #[test]
    fn tiling_places_patches_by_quadrant() {
        let p: Vec<CompressedSample> = (0..4).map(|i| crop(1, i as f64 / 4.0)).collect();
        let refs: Vec<&CompressedSample> = p.iter().collect();
        let img = reconstruct_image(&refs, 2, 4, 4).unwrap();
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(0, 3, 0), 0.25);
        assert_eq!(img.get(3, 0, 0), 0.5);
        assert_eq!(img.get(3, 3, 0), 0.75);
        for (q, src) in p.iter().enumerate() {
            assert_eq!(img.crop((q / 2) * 2, (q % 2) * 2, 2, 2).unwrap(), src.pixels);
        }
    }

    #[test]
    fn single_patch_is_upscaled() {
        let p = crop(0, 0.3);
        let img = reconstruct_image(&[&p], 1, 4, 4).unwrap();
        assert_eq!((img.height(), img.width()), (4, 4));
        assert!(img.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn reconstruction_rejects_mixed_inputs() {
        let (a, b) = (crop(0, 0.0), crop(1, 0.0));
        assert!(reconstruct_image(&[&a, &a, &a, &b], 2, 4, 4).is_err());
        assert!(reconstruct_image(&[&a, &a, &a], 2, 4, 4).is_err());
        let mut big = crop(0, 0.0);
        big.pixels = Image::filled(3, 3, 1, 0.0);
        assert!(reconstruct_image(&[&a, &a, &a, &big], 2, 4, 4).is_err());
        assert!(reconstruct_image(&[&a, &a, &a, &a], 2, 6, 6).is_err());
    }

    #[test]
    fn quantize_is_idempotent() {
        let img = Image::new(1, 3, 1, vec![0.1234, 1.2, -0.1]).unwrap();
        let q = quantize(&img);
        assert_eq!(q.data(), &[31.0 / 255.0, 1.0, 0.0]);
        assert_eq!(quantize(&q), q);
    }
}
