//! Stage 2: per-sample gradient norms, the gradient-flow utility oracle and
//! top-k selection.
//!
//! Removing sample `i` from a mini-batch changes the parameter velocity by
//! `η∇ℓ_i` (sum-form SGD), so the loss rate of sample `j` changes by
//! `η⟨∇ℓ_j, ∇ℓ_i⟩`. The utility of `i` is the worst case of that change over
//! a scoring set, which Cauchy–Schwarz bounds by `η·max_j‖∇ℓ_j‖·‖∇ℓ_i‖`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{BatchReduction, Label, ModelCheckpoint};

/// Default cap on the scoring set used by the exact-utility oracle.
pub const DEFAULT_SCORING_CAP: usize = 512;

/// Full flattened parameter gradient of one example's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub sample_id: usize,
    pub grad: Vec<f64>,
    pub norm: f64,
}

impl GradSample {
    pub fn new(sample_id: usize, grad: Vec<f64>) -> Self {
        let norm = l2_norm(&grad);
        Self { sample_id, grad, norm }
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-entropy gradient of a single example. The input is bilinearly
/// resized to the model extents first when needed.
pub fn per_sample_gradient(
    model: &ModelCheckpoint,
    sample_id: usize,
    input: &Image,
    label: &Label,
) -> Result<GradSample> {
    let input = model.fit_input(input)?;
    let (_, grad) = model.loss_and_backward(&input, label)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::non_finite(format!("gradient of sample {sample_id}")));
    }
    Ok(GradSample::new(sample_id, grad))
}

/// Members of the mini-batch `B` and the learning rate of the step.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatchSpec {
    pub members: Vec<usize>,
    pub eta: f64,
    /// With [`BatchReduction::Mean`] the update is `η/|B|` times the summed
    /// gradient, which scales every delta by `1/|B|`.
    pub reduction: BatchReduction,
}

impl MiniBatchSpec {
    pub fn new(members: Vec<usize>, eta: f64) -> Result<Self> {
        let spec = Self {
            members,
            eta,
            reduction: BatchReduction::Sum,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::InvalidArgument("mini-batch is empty".into()));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.eta)));
        }
        Ok(())
    }

    /// Effective step size applied to one sample's gradient.
    pub fn step(&self) -> f64 {
        match self.reduction {
            BatchReduction::Sum => self.eta,
            BatchReduction::Mean => self.eta / self.members.len() as f64,
        }
    }

    fn require_member(&self, id: usize) -> Result<()> {
        self.validate()?;
        if !self.members.contains(&id) {
            return Err(Error::InvalidArgument(format!("sample {id} is not in the mini-batch")));
        }
        Ok(())
    }
}

/// `|ℓ̇(x_j; B) − ℓ̇(x_j; B∖{i})| = η·|⟨∇ℓ_j, ∇ℓ_i⟩|`.
pub fn gradient_flow_delta(j: &GradSample, i: &GradSample, batch: &MiniBatchSpec) -> Result<f64> {
    batch.require_member(i.sample_id)?;
    if j.grad.len() != i.grad.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient length",
            expected: i.grad.len(),
            got: j.grad.len(),
        });
    }
    Ok(batch.step() * dot(&j.grad, &i.grad).abs())
}

/// Exact utility `U(x_i)` together with its gradient-norm bound.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityEstimate {
    pub sample_id: usize,
    pub exact_utility: f64,
    pub bound: f64,
    pub eta: f64,
    /// `η·max_j‖∇ℓ_j‖` over the scoring set.
    pub c: f64,
    /// Scoring-set member attaining the max.
    pub argmax: usize,
}

impl UtilityEstimate {
    pub fn slack(&self) -> f64 {
        self.bound - self.exact_utility
    }
}

pub fn exact_utility(i: &GradSample, scoring: &[GradSample], batch: &MiniBatchSpec) -> Result<UtilityEstimate> {
    if scoring.is_empty() {
        return Err(Error::InvalidArgument("scoring set is empty".into()));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    let mut max_norm = 0.0f64;
    for j in scoring {
        let delta = gradient_flow_delta(j, i, batch)?;
        if delta > best.0 {
            best = (delta, j.sample_id);
        }
        max_norm = max_norm.max(j.norm);
    }
    let c = batch.step() * max_norm;
    Ok(UtilityEstimate {
        sample_id: i.sample_id,
        exact_utility: best.0,
        bound: c * i.norm,
        eta: batch.eta,
        c,
        argmax: best.1,
    })
}

/// Utilities of every scoring-set member with `B` = the scoring set.
pub fn utilities(scoring: &[GradSample], eta: f64, reduction: BatchReduction) -> Result<Vec<UtilityEstimate>> {
    let batch = MiniBatchSpec {
        members: scoring.iter().map(|g| g.sample_id).collect(),
        eta,
        reduction,
    };
    scoring.par_iter().map(|i| exact_utility(i, scoring, &batch)).collect()
}

/// One candidate's Stage-2 statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub sample_id: usize,
    pub class: usize,
    pub gradnorm: f64,
    pub loss: f64,
}

/// Hard-label loss and gradient norm of every input. Inputs are resized to
/// the model extents; ids are positions in `inputs`.
pub fn score_samples(model: &ModelCheckpoint, inputs: &[(&Image, usize)]) -> Result<Vec<SampleScore>> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(id, &(image, class))| {
            let x = model.fit_input(image)?;
            let (loss, grad) = model.loss_and_backward(&x, &Label::Hard(class))?;
            let gradnorm = l2_norm(&grad);
            if !gradnorm.is_finite() || !loss.is_finite() {
                return Err(Error::non_finite(format!("score of sample {id}")));
            }
            Ok(SampleScore {
                sample_id: id,
                class,
                gradnorm,
                loss,
            })
        })
        .collect()
}

/// Descending gradient norm, ties by ascending id.
pub fn rank_by_gradnorm(scores: &[SampleScore]) -> Vec<SampleScore> {
    let mut out = scores.to_vec();
    out.sort_by(|a, b| b.gradnorm.total_cmp(&a.gradnorm).then(a.sample_id.cmp(&b.sample_id)));
    out
}

/// Ascending loss, ties by ascending id.
pub fn loss_score(scores: &[SampleScore]) -> Vec<SampleScore> {
    let mut out = scores.to_vec();
    out.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.sample_id.cmp(&b.sample_id)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringMode {
    GradNorm,
    Loss,
}

impl ScoringMode {
    pub fn name(self) -> &'static str {
        match self {
            ScoringMode::GradNorm => "gradnorm",
            ScoringMode::Loss => "loss",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradnorm" => Ok(ScoringMode::GradNorm),
            "loss" => Ok(ScoringMode::Loss),
            _ => Err(Error::Config(format!("unknown scoring mode `{s}`"))),
        }
    }

    pub fn rank(self, scores: &[SampleScore]) -> Vec<SampleScore> {
        match self {
            ScoringMode::GradNorm => rank_by_gradnorm(scores),
            ScoringMode::Loss => loss_score(scores),
        }
    }
}

/// The `ipc·k` best candidates of one class, in rank order.
pub fn select_top(
    class: usize,
    scores: &[SampleScore],
    ipc: usize,
    patches_per_image: usize,
    mode: ScoringMode,
) -> Result<Vec<SampleScore>> {
    let required = ipc * patches_per_image;
    if required == 0 {
        return Err(Error::InvalidArgument("ipc and patches per image must be positive".into()));
    }
    let candidates: Vec<SampleScore> = scores.iter().filter(|s| s.class == class).cloned().collect();
    if candidates.len() < required {
        return Err(Error::InsufficientCandidates {
            class,
            available: candidates.len(),
            required,
        });
    }
    let mut ranked = mode.rank(&candidates);
    ranked.truncate(required);
    Ok(ranked)
}
