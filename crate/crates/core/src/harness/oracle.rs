//! Self-contained checks behind the `oracle` subcommands.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{train_sgd, ArchSpec, BatchReduction, Example, Label, ModelCheckpoint, TrainConfig};
use crate::seed;
use crate::shapley::{exact_shapley, kernel_shap_estimate, MaskedGame};
use crate::utility::{per_sample_gradient, utilities, GradSample, UtilityEstimate};

/// A game with i.i.d. uniform `[-1, 1]` values on every coalition.
pub fn random_game(players: usize, seed_value: u64) -> Result<MaskedGame<'static>> {
    if players > 20 {
        return Err(Error::TooManyPlayers { players, cap: 20 });
    }
    let mut rng = seed::stream(seed_value, "random-game", players as u64);
    let table = (0..1usize << players).map(|_| rng.random_range(-1.0..=1.0)).collect();
    MaskedGame::from_table(players, table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyComparison {
    pub exact: Vec<f64>,
    pub kernel_full: Vec<f64>,
    /// `(budget, estimate)` for each sampled budget.
    pub sampled: Vec<(usize, Vec<f64>)>,
}

impl ShapleyComparison {
    pub fn full_error(&self) -> f64 {
        max_abs(&self.exact, &self.kernel_full)
    }

    pub fn sampled_errors(&self) -> Vec<(usize, f64)> {
        self.sampled.iter().map(|(b, v)| (*b, max_abs(&self.exact, v))).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("player\texact\tkernel_full");
        for (b, _) in &self.sampled {
            out.push_str(&format!("\tkernel_{b}"));
        }
        out.push('\n');
        for i in 0..self.exact.len() {
            out.push_str(&format!("{i}\t{:.9}\t{:.9}", self.exact[i], self.kernel_full[i]));
            for (_, v) in &self.sampled {
                out.push_str(&format!("\t{:.9}", v[i]));
            }
            out.push('\n');
        }
        out.push_str(&format!("max_abs_error\tkernel_full\t{:.3e}\n", self.full_error()));
        for (b, e) in self.sampled_errors() {
            out.push_str(&format!("max_abs_error\tkernel_{b}\t{e:.3e}\n"));
        }
        out
    }
}

/// Exact Shapley values of [`random_game`] next to full-enumeration and
/// sampled kernel estimates.
pub fn shapley_comparison(players: usize, seed_value: u64, budgets: &[usize]) -> Result<ShapleyComparison> {
    if players < 2 {
        return Err(Error::InvalidArgument("need at least 2 players".into()));
    }
    let game = random_game(players, seed_value)?;
    let exact = exact_shapley(&game)?.phi;
    let kernel_full = kernel_shap_estimate(&game, (1usize << players) - 2, 0)?.phi;
    let sampled = budgets
        .iter()
        .filter(|&&b| b > players && b < (1usize << players) - 2)
        .map(|&b| Ok((b, kernel_shap_estimate(&game, b, seed::split(seed_value, "kernel", b as u64))?.phi)))
        .collect::<Result<_>>()?;
    Ok(ShapleyComparison {
        exact,
        kernel_full,
        sampled,
    })
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Gaussian class blobs rendered as `1×2×4` single-channel images.
pub fn toy_examples(n: usize, classes: usize, seed_value: u64) -> Result<Vec<Example>> {
    if classes < 2 || n == 0 {
        return Err(Error::InvalidArgument("toy data needs samples and at least two classes".into()));
    }
    let mut rng = seed::stream(seed_value, "toy-data", 0);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (0..n)
        .map(|i| {
            let label = i % classes;
            let data = centers[label]
                .iter()
                .map(|c| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    c + 0.5 * e
                })
                .collect();
            Ok(Example {
                input: Image::new(1, 8, 1, data)?,
                label: Label::Hard(label),
            })
        })
        .collect()
}

/// A small tanh MLP trained for a few epochs on [`toy_examples`].
pub fn toy_model(examples: &[Example], classes: usize, seed_value: u64) -> Result<ModelCheckpoint> {
    let arch = ArchSpec::mlp(1, 8, 1, &[6], classes).with_activation(crate::model::Activation::Tanh);
    let init = ModelCheckpoint::init(arch, seed::split(seed_value, "toy-init", 0))?;
    let config = TrainConfig {
        epochs: 5,
        eta: 0.1,
        batch_size: 8,
        seed: seed::split(seed_value, "toy-shuffle", 0),
        checkpoint_epochs: Vec::new(),
        ..TrainConfig::default()
    };
    Ok(train_sgd(&init, examples, &config)?.pop().expect("final checkpoint"))
}

/// Per-sample gradients of a trained toy model and every sample's utility
/// with the whole toy set as both scoring set and mini-batch.
pub fn toy_utilities(n: usize, seed_value: u64, eta: f64) -> Result<(Vec<GradSample>, Vec<UtilityEstimate>)> {
    let examples = toy_examples(n, 3, seed_value)?;
    let model = toy_model(&examples, 3, seed_value)?;
    let grads = examples
        .iter()
        .enumerate()
        .map(|(i, e)| per_sample_gradient(&model, i, &e.input, &e.label))
        .collect::<Result<Vec<_>>>()?;
    let utils = utilities(&grads, eta, BatchReduction::Sum)?;
    Ok((grads, utils))
}

pub fn utility_table(estimates: &[UtilityEstimate]) -> String {
    let mut out = String::from("sample_id\texact_utility\tbound\tslack\n");
    for u in estimates {
        out.push_str(&format!(
            "{}\t{:.9e}\t{:.9e}\t{:.3e}\n",
            u.sample_id,
            u.exact_utility,
            u.bound,
            u.slack()
        ));
    }
    let violations = estimates.iter().filter(|u| u.exact_utility > u.bound + 1e-9).count();
    out.push_str(&format!("violations\t{violations}\n"));
    out
}
