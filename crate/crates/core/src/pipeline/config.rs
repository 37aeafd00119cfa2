//! `key=value` configuration files.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::patch::{AttributionMode, GameValueMode};
use crate::utility::ScoringMode;

/// Parsed `key=value` lines. Blank lines and lines starting with `#` are
/// ignored; a key may appear once.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str, into: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.entries.remove(key) {
            *into = v
                .parse()
                .map_err(|e| Error::Config(format!("`{key}={v}`: {e}")))?;
        }
        Ok(())
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_keys().next() {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Which teacher checkpoint produces the soft labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherChoice {
    /// Early teacher for `ipc < 50`, converged otherwise.
    Auto,
    Early,
    Converged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CroppingMode {
    Attribution,
    Random,
}

/// Distillation settings, including how the teacher is trained.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub ipc: usize,
    /// Patches per distilled image along each axis; `k = g²`.
    pub g: usize,
    pub crops_per_image: usize,
    pub alpha: f64,
    pub game: GameValueMode,
    pub attribution: AttributionMode,
    pub scoring: ScoringMode,
    pub cropping: CroppingMode,
    pub teacher: TeacherChoice,
    pub early_epoch: usize,
    pub teacher_epochs: usize,
    pub teacher_eta: f64,
    pub teacher_batch: usize,
    pub teacher_conv: [usize; 2],
    /// Probability of random crop-and-resize augmentation per teacher
    /// training input; 0 disables it.
    pub teacher_augment: f64,
    /// Smallest crop side, as a fraction of the image side.
    pub teacher_min_side: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            ipc: 10,
            g: 2,
            crops_per_image: 5,
            alpha: 2.0,
            game: GameValueMode::TargetLogit,
            attribution: AttributionMode::Kernel { budget: 512 },
            scoring: ScoringMode::GradNorm,
            cropping: CroppingMode::Attribution,
            teacher: TeacherChoice::Auto,
            early_epoch: 10,
            teacher_epochs: 30,
            teacher_eta: 0.05,
            teacher_batch: 32,
            teacher_conv: [8, 16],
            teacher_augment: 0.0,
            teacher_min_side: 0.4,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn patches_per_image(&self) -> usize {
        self.g * self.g
    }

    /// True when soft labels come from the early checkpoint.
    pub fn uses_early_teacher(&self) -> bool {
        match self.teacher {
            TeacherChoice::Auto => self.ipc < 50,
            TeacherChoice::Early => true,
            TeacherChoice::Converged => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ipc == 0 {
            return bad("ipc must be at least 1".into());
        }
        if !matches!(self.g, 1 | 2) {
            return bad(format!("g must be 1 or 2, got {}", self.g));
        }
        if self.crops_per_image == 0 {
            return bad("crops_per_image must be at least 1".into());
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha {} must be a nonnegative number", self.alpha));
        }
        if let AttributionMode::Kernel { budget } = self.attribution {
            if budget < 2 {
                return bad(format!("kernel budget {budget} is too small"));
            }
        }
        if self.teacher_epochs == 0 || self.early_epoch == 0 || self.early_epoch > self.teacher_epochs {
            return bad(format!(
                "early epoch {} must lie in 1..={}",
                self.early_epoch, self.teacher_epochs
            ));
        }
        if !(0.0..=1.0).contains(&self.teacher_augment) || !(self.teacher_min_side > 0.0 && self.teacher_min_side <= 1.0) {
            return bad("teacher augmentation settings must lie in [0, 1]".into());
        }
        if !(self.teacher_eta > 0.0) || self.teacher_batch == 0 || self.teacher_conv.contains(&0) {
            return bad("teacher training settings must be positive".into());
        }
        Ok(())
    }

    /// Consumes the keys this config knows about.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take("ipc", &mut self.ipc)?;
        kv.take("g", &mut self.g)?;
        kv.take("crops_per_image", &mut self.crops_per_image)?;
        kv.take("alpha", &mut self.alpha)?;
        if let Some(v) = kv.take_str("game") {
            self.game = GameValueMode::parse(&v)?;
        }
        let mut budget = match self.attribution {
            AttributionMode::Kernel { budget } => budget,
            AttributionMode::Exact { fallback_budget, .. } => fallback_budget,
        };
        kv.take("kernel_budget", &mut budget)?;
        let attribution = kv.take_str("attribution");
        self.attribution = match attribution.as_deref() {
            Some("kernel") => AttributionMode::Kernel { budget },
            Some("exact") => AttributionMode::Exact {
                cap: crate::shapley::DEFAULT_EXACT_CAP,
                fallback_budget: budget,
            },
            Some(other) => return Err(Error::Config(format!("unknown attribution mode `{other}`"))),
            None => match self.attribution {
                AttributionMode::Kernel { .. } => AttributionMode::Kernel { budget },
                AttributionMode::Exact { cap, .. } => AttributionMode::Exact {
                    cap,
                    fallback_budget: budget,
                },
            },
        };
        if let Some(v) = kv.take_str("scoring") {
            self.scoring = ScoringMode::parse(&v)?;
        }
        if let Some(v) = kv.take_str("cropping") {
            self.cropping = match v.as_str() {
                "attribution" => CroppingMode::Attribution,
                "random" => CroppingMode::Random,
                _ => return Err(Error::Config(format!("unknown cropping mode `{v}`"))),
            };
        }
        if let Some(v) = kv.take_str("teacher") {
            self.teacher = match v.as_str() {
                "auto" => TeacherChoice::Auto,
                "early" => TeacherChoice::Early,
                "converged" => TeacherChoice::Converged,
                _ => return Err(Error::Config(format!("unknown teacher choice `{v}`"))),
            };
        }
        kv.take("early_epoch", &mut self.early_epoch)?;
        kv.take("teacher_epochs", &mut self.teacher_epochs)?;
        kv.take("teacher_eta", &mut self.teacher_eta)?;
        kv.take("teacher_batch", &mut self.teacher_batch)?;
        kv.take("teacher_conv1", &mut self.teacher_conv[0])?;
        kv.take("teacher_conv2", &mut self.teacher_conv[1])?;
        kv.take("teacher_augment", &mut self.teacher_augment)?;
        kv.take("teacher_min_side", &mut self.teacher_min_side)?;
        kv.take("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut config = Self::default();
        config.apply(&mut kv)?;
        kv.finish()?;
        config.validate()?;
        Ok(config)
    }

    /// `key=value` lines accepted by [`DistillConfig::from_text`].
    pub fn to_text(&self) -> String {
        let (attribution, budget) = match self.attribution {
            AttributionMode::Kernel { budget } => ("kernel", budget),
            AttributionMode::Exact { fallback_budget, .. } => ("exact", fallback_budget),
        };
        let teacher = match self.teacher {
            TeacherChoice::Auto => "auto",
            TeacherChoice::Early => "early",
            TeacherChoice::Converged => "converged",
        };
        let cropping = match self.cropping {
            CroppingMode::Attribution => "attribution",
            CroppingMode::Random => "random",
        };
        let lines = [
            format!("ipc={}", self.ipc),
            format!("g={}", self.g),
            format!("crops_per_image={}", self.crops_per_image),
            format!("alpha={}", self.alpha),
            format!("game={}", self.game.name()),
            format!("attribution={attribution}"),
            format!("kernel_budget={budget}"),
            format!("scoring={}", self.scoring.name()),
            format!("cropping={cropping}"),
            format!("teacher={teacher}"),
            format!("early_epoch={}", self.early_epoch),
            format!("teacher_epochs={}", self.teacher_epochs),
            format!("teacher_eta={}", self.teacher_eta),
            format!("teacher_batch={}", self.teacher_batch),
            format!("teacher_conv1={}", self.teacher_conv[0]),
            format!("teacher_conv2={}", self.teacher_conv[1]),
            format!("teacher_augment={}", self.teacher_augment),
            format!("teacher_min_side={}", self.teacher_min_side),
            format!("seed={}", self.seed),
        ];
        lines.iter().map(|l| format!("{l}\n")).collect()
    }
}
