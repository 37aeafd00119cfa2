use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use super::{binomial, AttributionVector, BinaryMask, MaskedGame};
use crate::error::{Error, Result};
use crate::seed;

/// Shapley kernel `q(s) = (d−1) / (C(d,|s|)·|s|·(d−|s|))`, defined for proper
/// coalitions `0 < |s| < d`.
pub fn shapley_kernel_weight(mask: BinaryMask) -> Result<f64> {
    let d = mask.players();
    let k = mask.count();
    if k == 0 || k >= d {
        return Err(Error::InvalidArgument(format!(
            "Shapley kernel is undefined for |s| = {k} with d = {d}"
        )));
    }
    Ok((d - 1) as f64 / (binomial(d, k) * k as f64 * (d - k) as f64))
}

/// Probability of drawing a coalition of size `k` for `k = 1..d−1`
/// (index 0 is size 1): the kernel mass `Σ_{|s|=k} q(s)`, normalized.
pub fn coalition_size_distribution(players: usize) -> Vec<f64> {
    if players < 2 {
        return Vec::new();
    }
    let d = players as f64;
    let mass: Vec<f64> = (1..players)
        .map(|k| (d - 1.0) / (k as f64 * (d - k as f64)))
        .collect();
    let total: f64 = mass.iter().sum();
    mass.into_iter().map(|m| m / total).collect()
}

/// Draws `budget` proper coalitions with replacement, with probability
/// proportional to the Shapley kernel: a size is drawn from
/// [`coalition_size_distribution`], then a uniform coalition of that size.
pub fn sample_coalitions(players: usize, budget: usize, seed: u64) -> Result<Vec<BinaryMask>> {
    if players < 2 {
        return Err(Error::InvalidArgument(format!(
            "proper coalitions need at least 2 players, got {players}"
        )));
    }
    if players > super::MAX_PLAYERS {
        return Err(Error::InvalidArgument(format!("{players} players is too many")));
    }
    if budget == 0 {
        return Err(Error::InvalidArgument("coalition budget must be at least 1".into()));
    }
    let sizes = WeightedIndex::new(coalition_size_distribution(players))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = seed::rng(seed);
    let masks = (0..budget)
        .map(|_| {
            let k = sizes.sample(&mut rng) + 1;
            let members = rand::seq::index::sample(&mut rng, players, k);
            members
                .iter()
                .fold(BinaryMask::empty(players), |m, i| m.with(i))
        })
        .collect();
    Ok(masks)
}

/// One row of the kernel regression.
#[derive(Debug, Clone, PartialEq)]
pub struct CoalitionSample {
    pub mask: BinaryMask,
    /// Shapley kernel weight `q(s)`.
    pub weight: f64,
    /// Weight of the row in the least-squares objective. Equal to `weight`
    /// for enumerated coalitions; for sampled ones it is the number of
    /// draws, since the draws are already distributed by the kernel.
    pub regression_weight: f64,
    pub game_value: f64,
}

/// Kernel estimate of the Shapley values of `game`.
///
/// Minimizes `Σ w(s)·(f(s) − f(0) − sᵀφ)²` subject to `1ᵀφ = f(1) − f(0)`.
/// When `budget ≥ 2^d − 2` every proper coalition is enumerated with weight
/// `q(s)` and the result equals the exact Shapley values; otherwise `budget`
/// coalitions are drawn by [`sample_coalitions`].
pub fn kernel_shap_estimate(
    game: &MaskedGame<'_>,
    budget: usize,
    seed: u64,
) -> Result<AttributionVector> {
    let d = game.players();
    let proper = if d >= 63 { u64::MAX } else { (1u64 << d) - 2 };
    if budget < d + 1 && (budget as u64) < proper {
        return Err(Error::InvalidArgument(format!(
            "kernel estimation budget {budget} is below d + 1 = {}",
            d + 1
        )));
    }
    let delta = game.full_value() - game.null_value();
    if d == 1 {
        return Ok(AttributionVector {
            phi: vec![delta],
            full_minus_null: delta,
        });
    }
    let samples = if budget as u64 >= proper {
        (1..=proper)
            .map(|bits| {
                let mask = BinaryMask::from_bits(bits, d)?;
                let q = shapley_kernel_weight(mask)?;
                Ok(CoalitionSample {
                    mask,
                    weight: q,
                    regression_weight: q,
                    game_value: game.value(mask)?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let mut draws: BTreeMap<BinaryMask, u32> = BTreeMap::new();
        for mask in sample_coalitions(d, budget, seed)? {
            *draws.entry(mask).or_default() += 1;
        }
        draws
            .into_iter()
            .map(|(mask, n)| {
                Ok(CoalitionSample {
                    mask,
                    weight: shapley_kernel_weight(mask)?,
                    regression_weight: f64::from(n),
                    game_value: game.value(mask)?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    kernel_shap_from_samples(d, game.null_value(), game.full_value(), &samples)
}

/// Solves the efficiency-constrained weighted least squares problem over
/// precomputed coalition rows.
///
/// The constraint is eliminated by substituting
/// `φ_last = Δ − Σ_{i<last} φ_i`, which leaves an unconstrained problem in
/// `d − 1` unknowns solved through its normal equations.
pub fn kernel_shap_from_samples(
    players: usize,
    null_value: f64,
    full_value: f64,
    samples: &[CoalitionSample],
) -> Result<AttributionVector> {
    let delta = full_value - null_value;
    if !delta.is_finite() {
        return Err(Error::non_finite("full or null game value"));
    }
    if players == 1 {
        return Ok(AttributionVector {
            phi: vec![delta],
            full_minus_null: delta,
        });
    }
    let n = players - 1;
    let last = n;
    let mut gram = vec![0.0; n * n];
    let mut rhs = vec![0.0; n];
    let mut x = vec![0.0; n];
    for s in samples {
        if s.mask.players() != players {
            return Err(Error::DimensionMismatch {
                what: "coalition mask length",
                expected: players,
                got: s.mask.players(),
            });
        }
        if !s.game_value.is_finite() || !s.regression_weight.is_finite() {
            return Err(Error::non_finite(format!("coalition {:?}", s.mask)));
        }
        let s_last = if s.mask.contains(last) { 1.0 } else { 0.0 };
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = if s.mask.contains(i) { 1.0 } else { 0.0 } - s_last;
        }
        let y = s.game_value - null_value - s_last * delta;
        let w = s.regression_weight;
        for i in 0..n {
            if x[i] == 0.0 {
                continue;
            }
            let wx = w * x[i];
            rhs[i] += wx * y;
            for j in 0..=i {
                gram[i * n + j] += wx * x[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            gram[j * n + i] = gram[i * n + j];
        }
    }
    let mut phi = cholesky_solve(&mut gram, &mut rhs, n).map_err(|pivot| Error::RankDeficient {
        pivot,
        coalitions: samples.iter().map(|s| s.mask.bits()).collect(),
    })?;
    let rest: f64 = phi.iter().sum();
    phi.push(delta - rest);
    Ok(AttributionVector {
        phi,
        full_minus_null: delta,
    })
}

/// In-place Cholesky factorization and solve of the SPD system `a·x = b`
/// (`a` row-major `n×n`). Returns the index of the failing pivot when `a` is
/// not numerically positive definite.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> std::result::Result<Vec<f64>, usize> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = scale * 1e-12;
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !(diag > tol) {
            return Err(j);
        }
        let l_jj = diag.sqrt();
        a[j * n + j] = l_jj;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / l_jj;
        }
    }
    // L y = b
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * n + k] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    // Lᵀ x = y
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= a[k * n + i] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    Ok(b.to_vec())
}
