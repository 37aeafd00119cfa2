//! Stage 1: informativeness-maximizing crops.
//!
//! Each image is split into a grid of patches; the patches are the players of
//! a [`MaskedGame`] whose value is the model output with absent patches
//! replaced by the per-channel input mean. Per-patch Shapley values are
//! average-pooled with a 2×2 stride-1 window and the argmax of the pooled
//! map (optionally perturbed with Gaussian noise) picks a 2×2 block of
//! patches to crop.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Image, ImageSample};
use crate::model::{log_softmax, ModelCheckpoint};
use crate::seed;
use crate::shapley::{
    exact_shapley_with_cap, kernel_shap_estimate, AttributionVector, BinaryMask, MaskedGame,
    DEFAULT_EXACT_CAP,
};

/// Partition of an image into `rows × cols` equal patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

/// Top-left corner of a 2×2 patch block, in pooled-grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CropOrigin {
    pub row: usize,
    pub col: usize,
}

/// Pixel window `[top, top+height) × [left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::InvalidArgument(format!(
                "patch grid {rows}x{cols} needs at least 2x2 patches"
            )));
        }
        if rows * cols > crate::shapley::MAX_PLAYERS {
            return Err(Error::InvalidArgument(format!("{rows}x{cols} grid has too many patches")));
        }
        if height % rows != 0 || width % cols != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} is not divisible by a {rows}x{cols} grid"
            )));
        }
        Ok(Self {
            rows,
            cols,
            patch_h: height / rows,
            patch_w: width / cols,
        })
    }

    /// The default 4×4 grid.
    pub fn four_by_four(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, 4, 4)
    }

    pub fn players(&self) -> usize {
        self.rows * self.cols
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_h
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_w
    }

    pub fn pooled_rows(&self) -> usize {
        self.rows - 1
    }

    pub fn pooled_cols(&self) -> usize {
        self.cols - 1
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.height() != self.height() || image.width() != self.width() {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} does not match a {}x{} grid of {}x{} patches",
                image.height(),
                image.width(),
                self.rows,
                self.cols,
                self.patch_h,
                self.patch_w
            )));
        }
        Ok(())
    }

    fn check_origin(&self, origin: CropOrigin) -> Result<()> {
        if origin.row >= self.pooled_rows() || origin.col >= self.pooled_cols() {
            return Err(Error::InvalidArgument(format!(
                "crop origin ({}, {}) outside the {}x{} pooled grid",
                origin.row,
                origin.col,
                self.pooled_rows(),
                self.pooled_cols()
            )));
        }
        Ok(())
    }

    /// Pixel window of player `i` (row-major patch index).
    pub fn patch_window(&self, i: usize) -> Window {
        Window {
            top: (i / self.cols) * self.patch_h,
            left: (i % self.cols) * self.patch_w,
            height: self.patch_h,
            width: self.patch_w,
        }
    }

    /// Pixel window of the 2×2 patch block anchored at `origin`.
    pub fn crop_window(&self, origin: CropOrigin) -> Result<Window> {
        self.check_origin(origin)?;
        Ok(Window {
            top: origin.row * self.patch_h,
            left: origin.col * self.patch_w,
            height: 2 * self.patch_h,
            width: 2 * self.patch_w,
        })
    }

    /// Mask keeping exactly the four patches of the block at `origin`.
    pub fn crop_mask(&self, origin: CropOrigin) -> Result<BinaryMask> {
        self.check_origin(origin)?;
        let (r, c) = (origin.row, origin.col);
        BinaryMask::from_members(
            self.players(),
            &[
                r * self.cols + c,
                r * self.cols + c + 1,
                (r + 1) * self.cols + c,
                (r + 1) * self.cols + c + 1,
            ],
        )
    }

    pub fn origins(&self) -> impl Iterator<Item = CropOrigin> + '_ {
        (0..self.pooled_rows())
            .flat_map(move |row| (0..self.pooled_cols()).map(move |col| CropOrigin { row, col }))
    }
}

/// Replaces every patch absent from `mask` with the per-channel `baseline`.
pub fn mask_image(image: &Image, grid: &PatchGrid, mask: BinaryMask, baseline: &[f64]) -> Result<Image> {
    grid.check_image(image)?;
    if mask.players() != grid.players() {
        return Err(Error::DimensionMismatch {
            what: "mask length",
            expected: grid.players(),
            got: mask.players(),
        });
    }
    if baseline.len() != image.channels() {
        return Err(Error::DimensionMismatch {
            what: "baseline channels",
            expected: image.channels(),
            got: baseline.len(),
        });
    }
    let mut out = image.clone();
    let c = image.channels();
    for i in (0..grid.players()).filter(|&i| !mask.contains(i)) {
        let w = grid.patch_window(i);
        for r in w.top..w.top + w.height {
            let start = out.index(r, w.left, 0);
            for px in out.data_mut()[start..start + w.width * c].chunks_exact_mut(c) {
                px.copy_from_slice(baseline);
            }
        }
    }
    Ok(out)
}

/// How the model's logit vector is reduced to the scalar game value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GameValueMode {
    /// Logit of the target class.
    TargetLogit,
    /// Log-probability of the target class.
    TargetLogProb,
    /// `−‖f(x∘s) − f(x)‖₂`, the informativeness of the coalition.
    OutputNorm,
}

impl GameValueMode {
    pub fn name(self) -> &'static str {
        match self {
            GameValueMode::TargetLogit => "target-logit",
            GameValueMode::TargetLogProb => "target-logprob",
            GameValueMode::OutputNorm => "output-norm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "target-logit" => Ok(GameValueMode::TargetLogit),
            "target-logprob" => Ok(GameValueMode::TargetLogProb),
            "output-norm" => Ok(GameValueMode::OutputNorm),
            _ => Err(Error::Config(format!("unknown game value mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GameValueSpec {
    pub mode: GameValueMode,
    pub target: usize,
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// The masked-input game of `image` under `model`, one player per patch.
pub fn build_patch_game<'a>(
    image: &'a Image,
    grid: PatchGrid,
    model: &'a ModelCheckpoint,
    spec: GameValueSpec,
) -> Result<MaskedGame<'a>> {
    grid.check_image(image)?;
    if spec.target >= model.classes() {
        return Err(Error::InvalidArgument(format!(
            "target class {} out of range for {} classes",
            spec.target,
            model.classes()
        )));
    }
    let full_logits = model.logits(image)?;
    let baseline = &model.arch.input_mean;
    MaskedGame::new(grid.players(), move |mask: BinaryMask| {
        let logits = mask_image(image, &grid, mask, baseline).and_then(|x| model.logits(&x));
        let Ok(logits) = logits else {
            return f64::NAN;
        };
        match spec.mode {
            GameValueMode::TargetLogit => logits[spec.target],
            GameValueMode::TargetLogProb => log_softmax(&logits)[spec.target],
            GameValueMode::OutputNorm => -l2_distance(&logits, &full_logits),
        }
    })
}

/// `I(x; f) = −‖f(x∘s) − f(x)‖₂` over the logit vector.
pub fn compute_informativeness(
    image: &Image,
    grid: &PatchGrid,
    mask: BinaryMask,
    model: &ModelCheckpoint,
) -> Result<f64> {
    let full = model.logits(image)?;
    informativeness_with_reference(image, grid, mask, model, &full)
}

fn informativeness_with_reference(
    image: &Image,
    grid: &PatchGrid,
    mask: BinaryMask,
    model: &ModelCheckpoint,
    full_logits: &[f64],
) -> Result<f64> {
    let masked = mask_image(image, grid, mask, &model.arch.input_mean)?;
    let logits = model.logits(&masked)?;
    Ok(-l2_distance(&logits, full_logits))
}

/// Per-patch attributions and their 2×2 stride-1 average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionHeatmap {
    pub rows: usize,
    pub cols: usize,
    /// `rows × cols`, row-major.
    pub values: Vec<f64>,
    /// `(rows−1) × (cols−1)`, row-major.
    pub pooled: Vec<f64>,
}

impl AttributionHeatmap {
    pub fn pooled_rows(&self) -> usize {
        self.rows - 1
    }

    pub fn pooled_cols(&self) -> usize {
        self.cols - 1
    }

    pub fn pooled_at(&self, origin: CropOrigin) -> f64 {
        self.pooled[origin.row * self.pooled_cols() + origin.col]
    }

    /// Plain-text grid, one row per line, tab separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let grid = |out: &mut String, vals: &[f64], cols: usize| {
            for row in vals.chunks(cols) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                out.push_str(&line.join("\t"));
                out.push('\n');
            }
        };
        out.push_str("# shapley\n");
        grid(&mut out, &self.values, self.cols);
        out.push_str("# pooled\n");
        grid(&mut out, &self.pooled, self.pooled_cols());
        out
    }

    /// Min-max scaled gray image of the per-patch values, `scale` pixels per patch.
    pub fn to_image(&self, scale: usize) -> Image {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut img = Image::filled(self.rows * scale, self.cols * scale, 1, 0.0);
        for r in 0..self.rows * scale {
            for c in 0..self.cols * scale {
                img.set(r, c, 0, (self.values[(r / scale) * self.cols + c / scale] - lo) / span);
            }
        }
        img
    }
}

pub fn pool_heatmap(phi: &AttributionVector, grid: &PatchGrid) -> Result<AttributionHeatmap> {
    pool_values(&phi.phi, grid.rows, grid.cols)
}

pub(crate) fn pool_values(values: &[f64], rows: usize, cols: usize) -> Result<AttributionHeatmap> {
    if values.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            what: "attribution length",
            expected: rows * cols,
            got: values.len(),
        });
    }
    if rows < 2 || cols < 2 {
        return Err(Error::InvalidArgument("pooling needs at least a 2x2 map".into()));
    }
    crate::error::ensure_finite(values, || "attribution heatmap".into())?;
    let at = |r: usize, c: usize| values[r * cols + c];
    let mut pooled = Vec::with_capacity((rows - 1) * (cols - 1));
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            pooled.push((at(r, c) + at(r, c + 1) + at(r + 1, c) + at(r + 1, c + 1)) / 4.0);
        }
    }
    Ok(AttributionHeatmap {
        rows,
        cols,
        values: values.to_vec(),
        pooled,
    })
}

/// Diversity noise for crop selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Noise standard deviation as a multiple of the pooled map's stddev.
    pub alpha: f64,
    pub crops_per_image: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            crops_per_image: 5,
            seed: 0,
        }
    }
}

fn argmax_row_major(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Crop origins for one image.
///
/// The first `crops_per_image − 1` crops take the argmax of the pooled map
/// plus i.i.d. `N(0, σ²)` noise with `σ = alpha · std(pooled)`; the last crop
/// takes the argmax of the clean map. Ties go to the lowest row-major index.
pub fn select_crops(heatmap: &AttributionHeatmap, noise: &NoiseConfig) -> Result<Vec<CropOrigin>> {
    if heatmap.pooled.is_empty() {
        return Err(Error::InvalidArgument("pooled heatmap is empty".into()));
    }
    if !(noise.alpha >= 0.0) || !noise.alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("noise alpha {} must be >= 0", noise.alpha)));
    }
    if noise.crops_per_image == 0 {
        return Err(Error::InvalidArgument("crops_per_image must be at least 1".into()));
    }
    let cols = heatmap.pooled_cols();
    let to_origin = |i: usize| CropOrigin {
        row: i / cols,
        col: i % cols,
    };
    let sigma = noise.alpha * population_std(&heatmap.pooled);
    let mut rng = seed::rng(noise.seed);
    let mut noisy = vec![0.0; heatmap.pooled.len()];
    let mut out = Vec::with_capacity(noise.crops_per_image);
    for _ in 1..noise.crops_per_image {
        for (n, &v) in noisy.iter_mut().zip(&heatmap.pooled) {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *n = v + sigma * eps;
        }
        out.push(to_origin(argmax_row_major(&noisy)));
    }
    out.push(to_origin(argmax_row_major(&heatmap.pooled)));
    Ok(out)
}

/// Uniformly random crop origins (the attribution-free baseline).
pub fn random_crops(grid: &PatchGrid, count: usize, seed: u64) -> Vec<CropOrigin> {
    let mut rng = seed::rng(seed);
    (0..count)
        .map(|_| CropOrigin {
            row: rng.random_range(0..grid.pooled_rows()),
            col: rng.random_range(0..grid.pooled_cols()),
        })
        .collect()
}

/// A crop `ξ` of a source image together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedSample {
    pub pixels: Image,
    pub label: usize,
    pub source_id: usize,
    pub origin: CropOrigin,
    /// Position among the crops drawn for the source image; the last one is
    /// the noise-free crop.
    pub crop_index: usize,
    pub informativeness: f64,
}

/// Copies the 2×2 patch block at `origin` and scores its informativeness.
pub fn extract_patch(
    image: &ImageSample,
    origin: CropOrigin,
    grid: &PatchGrid,
    model: &ModelCheckpoint,
) -> Result<CompressedSample> {
    grid.check_image(&image.pixels)?;
    let full = model.logits(&image.pixels)?;
    extract_with_reference(image, origin, grid, model, &full, 0)
}

fn extract_with_reference(
    image: &ImageSample,
    origin: CropOrigin,
    grid: &PatchGrid,
    model: &ModelCheckpoint,
    full_logits: &[f64],
    crop_index: usize,
) -> Result<CompressedSample> {
    let w = grid.crop_window(origin)?;
    let pixels = image.pixels.crop(w.top, w.left, w.height, w.width)?;
    let mask = grid.crop_mask(origin)?;
    let informativeness = informativeness_with_reference(&image.pixels, grid, mask, model, full_logits)?;
    Ok(CompressedSample {
        pixels,
        label: image.label,
        source_id: image.id,
        origin,
        crop_index,
        informativeness,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributionMode {
    /// Exact enumeration when the player count is within the cap, kernel
    /// estimation with the given budget otherwise.
    Exact { cap: usize, fallback_budget: usize },
    Kernel { budget: usize },
}

impl AttributionMode {
    pub fn exact() -> Self {
        AttributionMode::Exact {
            cap: DEFAULT_EXACT_CAP,
            fallback_budget: 512,
        }
    }
}

/// Shapley values of the patch game of one image. `seed` only matters for
/// sampled kernel estimation.
pub fn attribute_image(
    image: &ImageSample,
    grid: PatchGrid,
    model: &ModelCheckpoint,
    mode: GameValueMode,
    attribution: AttributionMode,
    seed: u64,
) -> Result<(AttributionVector, u64)> {
    let spec = GameValueSpec {
        mode,
        target: image.label,
    };
    let game = build_patch_game(&image.pixels, grid, model, spec)?;
    let phi = match attribution {
        AttributionMode::Exact { cap, .. } if game.players() <= cap => exact_shapley_with_cap(&game, cap)?,
        AttributionMode::Exact { fallback_budget, .. } => kernel_shap_estimate(&game, fallback_budget, seed)?,
        AttributionMode::Kernel { budget } => kernel_shap_estimate(&game, budget, seed)?,
    };
    Ok((phi, game.evaluations()))
}

/// Memoized per-image attributions with instrumentation counters.
///
/// Keys are source image ids, so one cache must only be shared between runs
/// that use the same model, grid, game mode and attribution settings.
#[derive(Debug, Default)]
pub struct AttributionCache {
    entries: Mutex<BTreeMap<usize, Arc<AttributionVector>>>,
    computed: AtomicU64,
    hits: AtomicU64,
    game_evaluations: AtomicU64,
}

impl AttributionCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Attributions computed (cache misses).
    pub fn computed(&self) -> u64 {
        self.computed.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn game_evaluations(&self) -> u64 {
        self.game_evaluations.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Seeds the cache with a precomputed attribution.
    pub fn insert(&self, id: usize, phi: AttributionVector) {
        self.entries.lock().expect("cache lock").insert(id, Arc::new(phi));
    }

    pub fn get(&self, id: usize) -> Option<Arc<AttributionVector>> {
        self.entries.lock().expect("cache lock").get(&id).cloned()
    }

    pub fn get_or_compute(
        &self,
        id: usize,
        compute: impl FnOnce() -> Result<(AttributionVector, u64)>,
    ) -> Result<Arc<AttributionVector>> {
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&id) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(hit));
        }
        let (phi, evals) = compute()?;
        self.computed.fetch_add(1, Ordering::Relaxed);
        self.game_evaluations.fetch_add(evals, Ordering::Relaxed);
        let phi = Arc::new(phi);
        self.entries
            .lock()
            .expect("cache lock")
            .insert(id, Arc::clone(&phi));
        Ok(phi)
    }
}

/// Everything stage 1 needs besides the data and the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub noise: NoiseConfig,
    pub game: GameValueMode,
    pub attribution: AttributionMode,
    /// Master seed for kernel coalition sampling.
    pub attribution_seed: u64,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            grid_rows: 4,
            grid_cols: 4,
            noise: NoiseConfig::default(),
            game: GameValueMode::TargetLogit,
            attribution: AttributionMode::Kernel { budget: 512 },
            attribution_seed: 0,
        }
    }
}

/// Stage 1 over a dataset: attribute, pool, select and extract
/// `crops_per_image` crops per image. Output is ordered by class, then
/// source id, then crop index.
pub fn compress_dataset(
    dataset: &[ImageSample],
    model: &ModelCheckpoint,
    config: &CompressConfig,
    cache: Option<&AttributionCache>,
) -> Result<Vec<CompressedSample>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let local;
    let cache = match cache {
        Some(c) => c,
        None => {
            local = AttributionCache::new();
            &local
        }
    };
    let per_image: Vec<Vec<CompressedSample>> = dataset
        .par_iter()
        .map(|image| compress_image(image, model, config, cache).map_err(|e| e.for_image(image.id)))
        .collect::<Result<_>>()?;
    let mut out: Vec<CompressedSample> = per_image.into_iter().flatten().collect();
    out.sort_by_key(|s| (s.label, s.source_id, s.crop_index));
    Ok(out)
}

fn compress_image(
    image: &ImageSample,
    model: &ModelCheckpoint,
    config: &CompressConfig,
    cache: &AttributionCache,
) -> Result<Vec<CompressedSample>> {
    let grid = PatchGrid::new(
        image.pixels.height(),
        image.pixels.width(),
        config.grid_rows,
        config.grid_cols,
    )?;
    let phi = cache.get_or_compute(image.id, || {
        attribute_image(
            image,
            grid,
            model,
            config.game,
            config.attribution,
            seed::split(config.attribution_seed, "kernel", image.id as u64),
        )
    })?;
    let heatmap = pool_heatmap(&phi, &grid)?;
    let noise = NoiseConfig {
        seed: seed::split(config.noise.seed, "crop-noise", image.id as u64),
        ..config.noise
    };
    let origins = select_crops(&heatmap, &noise)?;
    let full = model.logits(&image.pixels)?;
    origins
        .into_iter()
        .enumerate()
        .map(|(k, origin)| extract_with_reference(image, origin, &grid, model, &full, k))
        .collect()
}

/// Stage 1 baseline without attribution: uniformly random crop origins.
pub fn random_crop_dataset(
    dataset: &[ImageSample],
    model: &ModelCheckpoint,
    grid_rows: usize,
    grid_cols: usize,
    crops_per_image: usize,
    seed_value: u64,
) -> Result<Vec<CompressedSample>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let per_image: Vec<Vec<CompressedSample>> = dataset
        .par_iter()
        .map(|image| {
            let grid = PatchGrid::new(image.pixels.height(), image.pixels.width(), grid_rows, grid_cols)?;
            let full = model.logits(&image.pixels)?;
            random_crops(&grid, crops_per_image, seed::split(seed_value, "random-crop", image.id as u64))
                .into_iter()
                .enumerate()
                .map(|(k, origin)| extract_with_reference(image, origin, &grid, model, &full, k))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.for_image(image.id))
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<CompressedSample> = per_image.into_iter().flatten().collect();
    out.sort_by_key(|s| (s.label, s.source_id, s.crop_index));
    Ok(out)
}
