use super::{exact_shapley_with_cap, MaskedGame, DEFAULT_EXACT_CAP};
use crate::error::{Error, Result};

/// Worst-case residuals of the four Shapley axioms on a pair of games.
///
/// * linearity: `max_i |φ_{f1+f2} − φ_{f1} − φ_{f2}|`
/// * dummy: `max_i |φ_i − (g_i(e_i) − g_i(0))|` where `g_i` is `f1` with
///   player `i` replaced by an additive dummy
/// * symmetry: `max_{i<j} |φ_i − φ_j|` on `f1` symmetrized over `(i, j)`
/// * efficiency: `max |Σφ − (f(1) − f(0))|` over `f1`, `f2` and `f1 + f2`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxiomReport {
    pub players: usize,
    pub linearity: f64,
    pub dummy: f64,
    pub symmetry: f64,
    pub efficiency: f64,
    /// Largest absolute game value, used to scale tolerances.
    pub scale: f64,
}

impl AxiomReport {
    pub fn max_residual(&self) -> f64 {
        self.linearity
            .max(self.dummy)
            .max(self.symmetry)
            .max(self.efficiency)
    }

    /// All residuals below `tol · max(1, scale)`.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_residual() < tol * self.scale.max(1.0)
    }
}

pub fn verify_axioms(game1: &MaskedGame<'_>, game2: &MaskedGame<'_>) -> Result<AxiomReport> {
    let d = game1.players();
    if game2.players() != d {
        return Err(Error::DimensionMismatch {
            what: "player count of second game",
            expected: d,
            got: game2.players(),
        });
    }
    if d > DEFAULT_EXACT_CAP {
        return Err(Error::TooManyPlayers {
            players: d,
            cap: DEFAULT_EXACT_CAP,
        });
    }
    let t1 = game1.tabulate()?;
    let t2 = game2.tabulate()?;
    let shapley = |table: Vec<f64>| -> Result<super::AttributionVector> {
        exact_shapley_with_cap(&MaskedGame::from_table(d, table)?, DEFAULT_EXACT_CAP)
    };

    let phi1 = shapley(t1.clone())?;
    let phi2 = shapley(t2.clone())?;
    let merged = shapley(t1.iter().zip(&t2).map(|(a, b)| a + b).collect())?;

    let linearity = (0..d)
        .map(|i| (merged.phi[i] - phi1.phi[i] - phi2.phi[i]).abs())
        .fold(0.0, f64::max);
    let efficiency = [&phi1, &phi2, &merged]
        .iter()
        .map(|p| p.efficiency_residual())
        .fold(0.0, f64::max);

    let mut dummy = 0.0f64;
    for i in 0..d {
        let bit = 1usize << i;
        let c = t2[bit] - t2[0];
        let g: Vec<f64> = (0..t1.len())
            .map(|s| t1[s & !bit] - t1[0] + if s & bit != 0 { c } else { 0.0 })
            .collect();
        let expected = g[bit] - g[0];
        let phi = shapley(g)?;
        dummy = dummy.max((phi.phi[i] - expected).abs());
    }

    let mut symmetry = 0.0f64;
    for i in 0..d {
        for j in i + 1..d {
            let swap = |s: usize| -> usize {
                let (bi, bj) = (s >> i & 1, s >> j & 1);
                (s & !(1 << i) & !(1 << j)) | bj << i | bi << j
            };
            let g: Vec<f64> = (0..t1.len()).map(|s| 0.5 * (t1[s] + t1[swap(s)])).collect();
            let phi = shapley(g)?;
            symmetry = symmetry.max((phi.phi[i] - phi.phi[j]).abs());
        }
    }

    let scale = t1
        .iter()
        .chain(&t2)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    Ok(AxiomReport {
        players: d,
        linearity,
        dummy,
        symmetry,
        efficiency,
        scale,
    })
}
