use super::{binomial, AttributionVector, MaskedGame};
use crate::error::{Error, Result};

/// Largest player count [`exact_shapley`] will enumerate.
pub const DEFAULT_EXACT_CAP: usize = 20;

/// Exact Shapley values by enumerating all `2^d` coalitions.
pub fn exact_shapley(game: &MaskedGame<'_>) -> Result<AttributionVector> {
    exact_shapley_with_cap(game, DEFAULT_EXACT_CAP)
}

/// `φ_i = (1/d) Σ_{s ∌ i} C(d−1, |s|)^{-1} (f(s ∪ {i}) − f(s))`.
///
/// The marginal contribution of `i` to a coalition of size `k` is weighted by
/// the inverse binomial; this is the weighting under which efficiency
/// (`Σφ = f(1) − f(0)`) holds.
pub fn exact_shapley_with_cap(game: &MaskedGame<'_>, cap: usize) -> Result<AttributionVector> {
    let d = game.players();
    if d > cap.min(30) {
        return Err(Error::TooManyPlayers { players: d, cap });
    }
    let table = game.tabulate()?;
    let weights: Vec<f64> = (0..d)
        .map(|k| 1.0 / (d as f64 * binomial(d - 1, k)))
        .collect();

    let mut phi = vec![0.0; d];
    for (bits, &value) in table.iter().enumerate() {
        let w = weights.get(bits.count_ones() as usize);
        let Some(&w) = w else { continue }; // full coalition has no absent player
        for (i, p) in phi.iter_mut().enumerate() {
            if bits >> i & 1 == 0 {
                *p += w * (table[bits | 1 << i] - value);
            }
        }
    }
    Ok(AttributionVector {
        phi,
        full_minus_null: game.full_value() - game.null_value(),
    })
}
