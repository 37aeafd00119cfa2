//! The strategy matrix: scoring × cropping, a no-noise variant and a random
//! coreset, each evaluated over several student seeds.

use std::fmt::Write as _;

use super::eval::{eval_student, EvalReport, StudentConfig};
use crate::error::Result;
use crate::image::ImageSample;
use crate::patch::AttributionCache;
use crate::pipeline::{distill, random_coreset, CroppingMode, DistillConfig, DistillStats, Teachers};
use crate::utility::ScoringMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Gradient-norm scoring of attribution crops.
    InfoUtil,
    GradNormRandomCrop,
    LossAttributionCrop,
    LossRandomCrop,
    /// InfoUtil with `alpha = 0`.
    NoNoise,
    RandomCoreset,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::InfoUtil,
        Strategy::GradNormRandomCrop,
        Strategy::LossAttributionCrop,
        Strategy::LossRandomCrop,
        Strategy::NoNoise,
        Strategy::RandomCoreset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::InfoUtil => "gradnorm+attribution",
            Strategy::GradNormRandomCrop => "gradnorm+random",
            Strategy::LossAttributionCrop => "loss+attribution",
            Strategy::LossRandomCrop => "loss+random",
            Strategy::NoNoise => "gradnorm+attribution,alpha=0",
            Strategy::RandomCoreset => "random-coreset",
        }
    }

    /// The distillation config this strategy runs with.
    pub fn config(self, base: &DistillConfig) -> DistillConfig {
        let (scoring, cropping, alpha) = match self {
            Strategy::InfoUtil | Strategy::RandomCoreset => {
                (ScoringMode::GradNorm, CroppingMode::Attribution, base.alpha)
            }
            Strategy::GradNormRandomCrop => (ScoringMode::GradNorm, CroppingMode::Random, base.alpha),
            Strategy::LossAttributionCrop => (ScoringMode::Loss, CroppingMode::Attribution, base.alpha),
            Strategy::LossRandomCrop => (ScoringMode::Loss, CroppingMode::Random, base.alpha),
            Strategy::NoNoise => (ScoringMode::GradNorm, CroppingMode::Attribution, 0.0),
        };
        DistillConfig {
            scoring,
            cropping,
            alpha,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub report: EvalReport,
    pub stats: DistillStats,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, strategy: Strategy) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// Header `strategy, seed_<s>..., mean, std`; one line per strategy.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("strategy");
        if let Some(first) = self.rows.first() {
            for s in &first.report.seeds {
                let _ = write!(out, "\tseed_{s}");
            }
        }
        out.push_str("\tmean\tstd\n");
        for row in &self.rows {
            out.push_str(row.strategy.name());
            for a in &row.report.accuracies {
                let _ = write!(out, "\t{a:.4}");
            }
            let _ = writeln!(out, "\t{:.4}\t{:.4}", row.report.mean(), row.report.std());
        }
        out
    }
}

/// Distills and evaluates every strategy in [`Strategy::ALL`] with shared
/// teachers. All attribution-cropping rows draw from `cache`, so the
/// attribution of each training image is computed at most once.
pub fn run_ablation(
    train: &[ImageSample],
    test: &[ImageSample],
    teachers: &Teachers,
    base: &DistillConfig,
    student: &StudentConfig,
    seeds: &[u64],
    cache: &AttributionCache,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(Strategy::ALL.len());
    for strategy in Strategy::ALL {
        let config = strategy.config(base);
        let (distilled, stats) = match strategy {
            Strategy::RandomCoreset => (random_coreset(train, teachers, &config)?, DistillStats::default()),
            _ => distill(train, teachers, &config, cache)?,
        };
        let report = eval_student(strategy.name(), &distilled, test, student, seeds)?;
        rows.push(AblationRow {
            strategy,
            report,
            stats,
        });
    }
    Ok(AblationTable { rows })
}
