//! One config file for the whole experiment, with every seed derived from a
//! single master seed.

use super::eval::StudentConfig;
use super::planted::PlantedSignalSpec;
use crate::error::Result;
use crate::pipeline::{DistillConfig, KeyValues};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub distill: DistillConfig,
    pub student: StudentConfig,
    pub planted: PlantedSignalSpec,
    pub eval_seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            distill: DistillConfig::default(),
            student: StudentConfig::default(),
            planted: PlantedSignalSpec::default(),
            eval_seeds: 5,
        }
    }
}

impl ExperimentConfig {
    /// Parses `key=value` text; unknown keys are rejected. The distill
    /// `seed` key is accepted but [`ExperimentConfig::with_master_seed`]
    /// overrides it.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut c = Self::default();
        c.distill.apply(&mut kv)?;
        c.student.apply(&mut kv)?;
        let p = &mut c.planted;
        kv.take("planted_classes", &mut p.classes)?;
        kv.take("planted_train_per_class", &mut p.train_per_class)?;
        kv.take("planted_test_per_class", &mut p.test_per_class)?;
        kv.take("planted_size", &mut p.height)?;
        p.width = p.height;
        kv.take("planted_channels", &mut p.channels)?;
        kv.take("planted_glyph", &mut p.glyph_size)?;
        kv.take("planted_noise", &mut p.noise)?;
        kv.take("planted_background", &mut p.background)?;
        kv.take("planted_fill", &mut p.fill)?;
        kv.take("planted_min_contrast", &mut p.min_contrast)?;
        kv.take("eval_seeds", &mut c.eval_seeds)?;
        kv.finish()?;
        c.distill.validate()?;
        Ok(c)
    }

    /// Derives the data, distillation and student seeds from `master`.
    pub fn with_master_seed(mut self, master: u64) -> Self {
        self.planted.seed = seed::split(master, "data", 0);
        self.distill.seed = seed::split(master, "distill", 0);
        self
    }

    pub fn student_seeds(&self, master: u64) -> Vec<u64> {
        (0..self.eval_seeds as u64)
            .map(|i| seed::split(master, "student", i))
            .collect()
    }
}
