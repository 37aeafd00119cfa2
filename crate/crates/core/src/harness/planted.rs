//! Synthetic corpus with a known discriminative region per image.
//!
//! Every image is a noisy gray background with one class-specific glyph
//! pasted at a random position. The glyph always fits inside a single 2×2
//! block of the 4×4 patch grid, and its bounding box is recorded so that
//! attribution quality can be scored against ground truth.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{Image, ImageSample};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSignalSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub glyph_size: usize,
    /// Relative weight of each 2×2 block position (3×3 row-major on a 4×4
    /// grid) when placing the glyph; uniform when empty.
    pub block_weights: Vec<f64>,
    /// Standard deviation of the Gaussian background noise.
    pub noise: f64,
    pub background: f64,
    /// Probability that an interior glyph pixel is on; the frame is always on.
    pub fill: f64,
    /// Each image blends its glyph over the background with a contrast drawn
    /// uniformly from `[min_contrast, 1]`.
    pub min_contrast: f64,
    pub seed: u64,
}

impl Default for PlantedSignalSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 500,
            test_per_class: 100,
            height: 32,
            width: 32,
            channels: 3,
            glyph_size: 12,
            block_weights: Vec::new(),
            noise: 0.1,
            background: 0.5,
            fill: 1.0,
            min_contrast: 0.3,
            seed: 0,
        }
    }
}

/// Pixel bounding box `[top, top+height) × [left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlyphBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl GlyphBox {
    /// True when the box shares at least one pixel with the given window.
    pub fn overlaps(&self, top: usize, left: usize, height: usize, width: usize) -> bool {
        self.top < top + height
            && top < self.top + self.height
            && self.left < left + width
            && left < self.left + self.width
    }

    pub fn contained_in(&self, top: usize, left: usize, height: usize, width: usize) -> bool {
        self.top >= top
            && self.left >= left
            && self.top + self.height <= top + height
            && self.left + self.width <= left + width
    }
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub spec: PlantedSignalSpec,
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    /// Glyph box of every train image, indexed by sample id.
    pub train_boxes: Vec<GlyphBox>,
    pub test_boxes: Vec<GlyphBox>,
}

/// Class glyph: a binary stroke pattern and a color.
#[derive(Debug, Clone)]
struct Glyph {
    on: Vec<bool>,
    color: Vec<f64>,
}

fn class_glyphs(spec: &PlantedSignalSpec) -> Vec<Glyph> {
    let g = spec.glyph_size;
    let mut rng = seed::stream(spec.seed, "glyphs", 0);
    (0..spec.classes)
        .map(|k| {
            // Distinct hue per class on a color wheel, then a random binary
            // pattern with a solid frame so the glyph never vanishes.
            let hue = k as f64 / spec.classes as f64;
            let color: Vec<f64> = (0..spec.channels)
                .map(|ch| {
                    if spec.channels == 1 {
                        if k % 2 == 0 { 1.0 } else { 0.0 }
                    } else {
                        let phase = hue + ch as f64 / spec.channels as f64;
                        0.5 + 0.5 * (2.0 * std::f64::consts::PI * phase).cos()
                    }
                })
                .collect();
            let on = (0..g * g)
                .map(|i| {
                    let (r, c) = (i / g, i % g);
                    r == 0 || c == 0 || r == g - 1 || c == g - 1 || rng.random_bool(spec.fill)
                })
                .collect();
            Glyph { on, color }
        })
        .collect()
}

impl PlantedSignalSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "image extents {}x{}x{} must be positive multiples of the 4x4 grid",
                self.height, self.width, self.channels
            )));
        }
        if self.glyph_size == 0 || self.glyph_size > self.height / 2 || self.glyph_size > self.width / 2 {
            return Err(Error::InvalidArgument(format!(
                "glyph size {} does not fit the {}x{} crop window",
                self.glyph_size,
                self.height / 2,
                self.width / 2
            )));
        }
        if !self.block_weights.is_empty()
            && (self.block_weights.len() != 9 || self.block_weights.iter().any(|w| !(*w >= 0.0)))
        {
            return Err(Error::InvalidArgument("block weights must be 9 nonnegative values".into()));
        }
        if !(0.0..=1.0).contains(&self.fill) || !(0.0..=1.0).contains(&self.min_contrast) {
            return Err(Error::InvalidArgument("fill and min_contrast must lie in [0, 1]".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument("noise level must be nonnegative".into()));
        }
        Ok(())
    }

    /// Images per split; ids run from 0 within each split.
    fn render(&self, glyphs: &[Glyph], split: &str, per_class: usize) -> Result<(Vec<ImageSample>, Vec<GlyphBox>)> {
        let (ph, pw) = (self.height / 4, self.width / 4);
        let g = self.glyph_size;
        let blocks = if self.block_weights.is_empty() {
            vec![1.0; 9]
        } else {
            self.block_weights.clone()
        };
        let block_dist = rand::distr::weighted::WeightedIndex::new(&blocks)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let normal = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut samples = Vec::with_capacity(per_class * self.classes);
        let mut boxes = Vec::with_capacity(per_class * self.classes);
        for i in 0..per_class * self.classes {
            // Interleave classes so that any prefix is balanced.
            let label = i % self.classes;
            let mut rng = seed::stream(self.seed, split, i as u64);
            let mut img = Image::filled(self.height, self.width, self.channels, self.background);
            if self.noise > 0.0 {
                for v in img.data_mut() {
                    *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            let block = block_dist.sample(&mut rng);
            let (br, bc) = (block / 3, block % 3);
            let top = br * ph + rng.random_range(0..=2 * ph - g);
            let left = bc * pw + rng.random_range(0..=2 * pw - g);
            let glyph = &glyphs[label];
            let contrast = if self.min_contrast < 1.0 {
                rng.random_range(self.min_contrast..=1.0)
            } else {
                1.0
            };
            for r in 0..g {
                for c in 0..g {
                    if glyph.on[r * g + c] {
                        for (ch, &v) in glyph.color.iter().enumerate() {
                            let under = img.get(top + r, left + c, ch);
                            img.set(top + r, left + c, ch, under + contrast * (v - under));
                        }
                    }
                }
            }
            samples.push(ImageSample {
                pixels: img,
                label,
                id: i,
            });
            boxes.push(GlyphBox {
                top,
                left,
                height: g,
                width: g,
            });
        }
        Ok((samples, boxes))
    }
}

/// Generates disjoint, seeded train and test splits.
pub fn generate_planted(spec: &PlantedSignalSpec) -> Result<PlantedCorpus> {
    spec.validate()?;
    let glyphs = class_glyphs(spec);
    let (train, train_boxes) = spec.render(&glyphs, "train", spec.train_per_class)?;
    let (test, test_boxes) = spec.render(&glyphs, "test", spec.test_per_class)?;
    Ok(PlantedCorpus {
        spec: spec.clone(),
        train,
        test,
        train_boxes,
        test_boxes,
    })
}
