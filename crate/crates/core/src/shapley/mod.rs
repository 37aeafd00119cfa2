//! Cooperative games over binary player masks and their Shapley values.
//!
//! A [`MaskedGame`] maps a coalition (a [`BinaryMask`] over `d` players) to a
//! real payoff. [`exact_shapley`] enumerates all `2^d` coalitions;
//! [`kernel_shap_estimate`] recovers the same values from a weighted least
//! squares fit under the Shapley kernel, which scales to larger `d`.

mod axioms;
mod exact;
mod kernel;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub use axioms::{verify_axioms, AxiomReport};
pub use exact::{exact_shapley, exact_shapley_with_cap, DEFAULT_EXACT_CAP};
pub use kernel::{
    coalition_size_distribution, kernel_shap_estimate, kernel_shap_from_samples,
    sample_coalitions, shapley_kernel_weight, CoalitionSample,
};

/// Upper bound on players representable by a [`BinaryMask`].
pub const MAX_PLAYERS: usize = 64;

/// A coalition of players, stored as a bitset over `d ≤ 64` players.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinaryMask {
    bits: u64,
    players: u8,
}

impl BinaryMask {
    fn all_bits(players: usize) -> u64 {
        if players == 64 {
            u64::MAX
        } else {
            (1u64 << players) - 1
        }
    }

    pub fn empty(players: usize) -> Self {
        assert!(players <= MAX_PLAYERS, "at most {MAX_PLAYERS} players");
        Self {
            bits: 0,
            players: players as u8,
        }
    }

    pub fn full(players: usize) -> Self {
        assert!(players <= MAX_PLAYERS, "at most {MAX_PLAYERS} players");
        Self {
            bits: Self::all_bits(players),
            players: players as u8,
        }
    }

    /// The single-player mask `e_i`.
    pub fn single(players: usize, i: usize) -> Self {
        assert!(i < players, "player {i} out of range for {players} players");
        Self::empty(players).with(i)
    }

    pub fn from_bits(bits: u64, players: usize) -> Result<Self> {
        if players > MAX_PLAYERS {
            return Err(Error::InvalidArgument(format!(
                "{players} players exceeds the {MAX_PLAYERS}-player mask width"
            )));
        }
        if bits & !Self::all_bits(players) != 0 {
            return Err(Error::InvalidArgument(format!(
                "mask bits {bits:#x} set beyond player {players}"
            )));
        }
        Ok(Self {
            bits,
            players: players as u8,
        })
    }

    pub fn from_members(players: usize, members: &[usize]) -> Result<Self> {
        let mut mask = Self::empty(players);
        for &i in members {
            if i >= players {
                return Err(Error::InvalidArgument(format!(
                    "player {i} out of range for {players} players"
                )));
            }
            mask = mask.with(i);
        }
        Ok(mask)
    }

    #[inline]
    pub fn bits(self) -> u64 {
        self.bits
    }

    #[inline]
    pub fn players(self) -> usize {
        self.players as usize
    }

    /// Coalition size `|s|`.
    #[inline]
    pub fn count(self) -> usize {
        self.bits.count_ones() as usize
    }

    #[inline]
    pub fn contains(self, i: usize) -> bool {
        self.bits >> i & 1 == 1
    }

    #[inline]
    pub fn with(self, i: usize) -> Self {
        debug_assert!(i < self.players());
        Self {
            bits: self.bits | 1 << i,
            ..self
        }
    }

    #[inline]
    pub fn without(self, i: usize) -> Self {
        Self {
            bits: self.bits & !(1 << i),
            ..self
        }
    }

    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..self.players()).filter(move |&i| self.contains(i))
    }
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = (0..self.players())
            .map(|i| if self.contains(i) { '1' } else { '0' })
            .collect();
        write!(f, "BinaryMask({s})")
    }
}

type Evaluate<'a> = Box<dyn Fn(BinaryMask) -> f64 + Send + Sync + 'a>;

/// A characteristic function over `d` players with cached `f(0)` and `f(1)`.
pub struct MaskedGame<'a> {
    players: usize,
    evaluate: Evaluate<'a>,
    null_value: f64,
    full_value: f64,
    evaluations: AtomicU64,
}

impl<'a> MaskedGame<'a> {
    pub fn new<F>(players: usize, evaluate: F) -> Result<Self>
    where
        F: Fn(BinaryMask) -> f64 + Send + Sync + 'a,
    {
        if players == 0 || players > MAX_PLAYERS {
            return Err(Error::InvalidArgument(format!(
                "player count must be in 1..={MAX_PLAYERS}, got {players}"
            )));
        }
        let null_value = evaluate(BinaryMask::empty(players));
        let full_value = evaluate(BinaryMask::full(players));
        if !null_value.is_finite() || !full_value.is_finite() {
            return Err(Error::non_finite("game value of the empty or full coalition"));
        }
        Ok(Self {
            players,
            evaluate: Box::new(evaluate),
            null_value,
            full_value,
            evaluations: AtomicU64::new(2),
        })
    }

    /// Game given by an explicit table indexed by mask bits.
    pub fn from_table(players: usize, table: Vec<f64>) -> Result<MaskedGame<'static>> {
        if players > 30 {
            return Err(Error::InvalidArgument(format!(
                "a tabulated game with {players} players is too large"
            )));
        }
        if table.len() != 1 << players {
            return Err(Error::DimensionMismatch {
                what: "game table length",
                expected: 1 << players,
                got: table.len(),
            });
        }
        MaskedGame::new(players, move |s: BinaryMask| table[s.bits() as usize])
    }

    #[inline]
    pub fn players(&self) -> usize {
        self.players
    }

    pub fn null_value(&self) -> f64 {
        self.null_value
    }

    pub fn full_value(&self) -> f64 {
        self.full_value
    }

    /// `f(x∘s)`; rejects masks built for a different player count.
    pub fn value(&self, mask: BinaryMask) -> Result<f64> {
        if mask.players() != self.players {
            return Err(Error::DimensionMismatch {
                what: "mask length",
                expected: self.players,
                got: mask.players(),
            });
        }
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let v = (self.evaluate)(mask);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::non_finite(format!("game value at {mask:?}")))
        }
    }

    /// Number of calls to the underlying evaluate function so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Evaluates every coalition; index = mask bits.
    pub fn tabulate(&self) -> Result<Vec<f64>> {
        if self.players > 30 {
            return Err(Error::TooManyPlayers {
                players: self.players,
                cap: 30,
            });
        }
        (0..1u64 << self.players)
            .map(|bits| self.value(BinaryMask::from_bits(bits, self.players)?))
            .collect()
    }
}

impl fmt::Debug for MaskedGame<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MaskedGame")
            .field("players", &self.players)
            .field("null_value", &self.null_value)
            .field("full_value", &self.full_value)
            .finish_non_exhaustive()
    }
}

/// Per-player attributions together with the total payoff `f(1) − f(0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionVector {
    pub phi: Vec<f64>,
    pub full_minus_null: f64,
}

impl AttributionVector {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    /// `|Σφ − (f(1) − f(0))|`.
    pub fn efficiency_residual(&self) -> f64 {
        (self.phi.iter().sum::<f64>() - self.full_minus_null).abs()
    }

    pub fn max_abs_diff(&self, other: &AttributionVector) -> f64 {
        self.phi
            .iter()
            .zip(&other.phi)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `C(n, k)` as a float, exact for the sizes used here.
pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_basics() {
        let m = BinaryMask::from_members(5, &[0, 3]).unwrap();
        assert_eq!(m.count(), 2);
        assert!(m.contains(3) && !m.contains(1));
        assert_eq!(m.with(1).count(), 3);
        assert_eq!(m.without(3), BinaryMask::single(5, 0));
        assert_eq!(m.members().collect::<Vec<_>>(), vec![0, 3]);
        assert_eq!(BinaryMask::full(64).count(), 64);
        assert!(BinaryMask::from_bits(0b100, 2).is_err());
        assert!(BinaryMask::from_members(3, &[3]).is_err());
        assert_eq!(format!("{m:?}"), "BinaryMask(10010)");
    }

    #[test]
    fn game_caches_endpoints_and_rejects_nan() {
        let g = MaskedGame::new(3, |s: BinaryMask| s.count() as f64).unwrap();
        assert_eq!(g.null_value(), 0.0);
        assert_eq!(g.full_value(), 3.0);
        assert!(g.value(BinaryMask::empty(4)).is_err());
        let bad = MaskedGame::new(2, |s: BinaryMask| if s.count() == 1 { f64::NAN } else { 0.0 })
            .unwrap();
        assert!(matches!(
            bad.value(BinaryMask::single(2, 0)),
            Err(Error::NonFinite { .. })
        ));
        assert!(MaskedGame::new(1, |_| f64::INFINITY).is_err());
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(4, 2), 6.0);
        assert_eq!(binomial(10, 0), 1.0);
        assert_eq!(binomial(16, 8), 12870.0);
        assert_eq!(binomial(3, 4), 0.0);
    }
}
