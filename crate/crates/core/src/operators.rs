//! Transfer-operator cocycles along driving paths.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driving::{sample_path_with, SymbolChain};
use crate::error::{LabError, Result};
use crate::fibers::{PiecewiseMap, TransferMatrix};
use crate::fields::{lcm, GridFunction};
use crate::stats::{linear_fit, quantile, r_squared};

/// Values at or below this are treated as exact zeros when fitting rates.
pub const EXACT_FLOOR: f64 = 1e-13;

/// Default lower bound on densities before dividing by them.
pub const DENSITY_FLOOR: f64 = 1e-10;

/// A driving chain together with one fiber map per symbol, all lifted to a
/// common base partition and discretized at a common resolution.
#[derive(Debug, Clone)]
pub struct Cocycle {
    chain: SymbolChain,
    maps: Vec<PiecewiseMap>,
    resolution: usize,
    matrices: Vec<Arc<TransferMatrix>>,
}

impl Cocycle {
    pub fn new(chain: SymbolChain, maps: Vec<PiecewiseMap>, resolution: usize) -> Result<Self> {
        if maps.len() != chain.len() {
            return Err(LabError::ConfigInvalid(format!("{} maps for {} symbols", maps.len(), chain.len())));
        }
        let m = maps.iter().map(|t| t.base_partition()).fold(1, lcm);
        if resolution == 0 || resolution % m != 0 {
            return Err(LabError::ResolutionMismatch { resolution, required: m });
        }
        let maps: Vec<PiecewiseMap> = maps.iter().map(|t| t.refine_base(m / t.base_partition())).collect();
        let matrices = maps.iter().map(|t| t.transfer_matrix(resolution)).collect::<Result<_>>()?;
        Ok(Cocycle { chain, maps, resolution, matrices })
    }

    pub fn chain(&self) -> &SymbolChain {
        &self.chain
    }

    pub fn symbols(&self) -> usize {
        self.maps.len()
    }

    pub fn maps(&self) -> &[PiecewiseMap] {
        &self.maps
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn base_partition(&self) -> usize {
        self.maps[0].base_partition()
    }

    /// lcm of the slopes of all maps: the refinement needed for pullbacks.
    pub fn slope_lcm(&self) -> usize {
        self.maps.iter().map(|t| t.slope_lcm()).fold(1, lcm)
    }

    pub fn uniformly_expanding(&self) -> bool {
        self.maps.iter().all(|t| t.is_uniformly_expanding())
    }

    pub fn matrix(&self, s: usize) -> Result<&TransferMatrix> {
        self.matrices.get(s).map(|m| m.as_ref()).ok_or(LabError::UnknownSymbol(s))
    }

    /// Transfer matrix of symbol `s` at another resolution (a multiple of
    /// `M`).
    pub fn matrix_at(&self, s: usize, resolution: usize) -> Result<Arc<TransferMatrix>> {
        self.maps.get(s).ok_or(LabError::UnknownSymbol(s))?.transfer_matrix(resolution)
    }

    /// `𝓛_s g` at the cocycle resolution (or `g`'s own, if finer).
    pub fn apply(&self, s: usize, g: &GridFunction) -> Result<GridFunction> {
        if g.resolution() == self.resolution {
            Ok(self.matrix(s)?.apply(g))
        } else {
            let res = lcm(g.resolution(), self.resolution);
            Ok(self.matrix_at(s, res)?.apply(g))
        }
    }

    /// `g∘T_s` at resolution `res(g)·L` with `L` the common slope lcm.
    pub fn pullback(&self, s: usize, g: &GridFunction) -> Result<GridFunction> {
        let map = self.maps.get(s).ok_or(LabError::UnknownSymbol(s))?;
        Ok(map.pullback_refined(g, self.slope_lcm()))
    }

    /// `𝓛_{ω_{n−1}}···𝓛_{ω_0} g`.
    pub fn push(&self, path: &[usize], g: &GridFunction) -> Result<GridFunction> {
        let mut cur = g.clone();
        for &s in path {
            cur = self.apply(s, &cur)?;
        }
        Ok(cur)
    }

    /// Finite-past approximation of `h_ω`: `1` pushed along the past symbols
    /// `ω_{−B}, …, ω_{−1}`.
    pub fn path_density(&self, past: &[usize]) -> Result<GridFunction> {
        let h = self.push(past, &GridFunction::constant(self.resolution, 1.0))?;
        debug_assert!((h.integral() - 1.0).abs() < 1e-12);
        Ok(h)
    }

    /// `L_ω^n g = 𝓛_ω^n(g·h_ω)/h_{σⁿω}` with the densities taken along
    /// `past` and `past ++ path`.
    pub fn normalized_push(&self, path: &[usize], g: &GridFunction, past: &[usize]) -> Result<GridFunction> {
        self.normalized_push_with_floor(path, g, past, DENSITY_FLOOR)
    }

    pub fn normalized_push_with_floor(
        &self,
        path: &[usize],
        g: &GridFunction,
        past: &[usize],
        floor: f64,
    ) -> Result<GridFunction> {
        let h0 = self.path_density(past)?;
        let h_end = self.push(path, &h0)?;
        for h in [&h0, &h_end] {
            let min = h.min();
            if min < floor {
                return Err(LabError::DegenerateDensity { min, threshold: floor });
            }
        }
        let pushed = self.push(path, &g.mul(&h0))?;
        let out = pushed.zip_with(&h_end, |a, b| a / b);
        debug_assert!((out.mul(&h_end).integral() - g.mul(&h0).integral()).abs() < 1e-10);
        Ok(out)
    }

    fn sample_with_past(&self, past_len: usize, len: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
        let full = sample_path_with(&self.chain, past_len + len, rng);
        let (p, f) = full.split_at(past_len);
        (p.to_vec(), f.to_vec())
    }
}

/// Log-linear fit `value_n ≈ K·e^{−λn}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub k_est: f64,
    pub lambda_est: f64,
    pub r_squared: f64,
    /// Smallest `K` with `value_n ≤ K·e^{−λ_est n}` on every entry above
    /// the floor.
    pub k_envelope: f64,
}

/// Fits over entries above [`EXACT_FLOOR`]; `None` with fewer than 3.
pub fn fit_decay(values: &[f64]) -> Option<DecayFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > EXACT_FLOOR)
        .map(|(n, v)| (n as f64, v.ln()))
        .unzip();
    if xs.len() < 3 {
        return None;
    }
    let (a, b) = linear_fit(&xs, &ys);
    let lambda = -b;
    let k_envelope = values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > EXACT_FLOOR)
        .map(|(n, v)| v * (lambda * n as f64).exp())
        .fold(0.0, f64::max);
    Some(DecayFit { k_est: a.exp(), lambda_est: lambda, r_squared: r_squared(&xs, &ys, a, b), k_envelope })
}

/// Pathwise decay statistics indexed by `n = 0..=n_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySeries {
    pub median: Vec<f64>,
    pub q10: Vec<f64>,
    pub q90: Vec<f64>,
    /// Pointwise maximum over the sampled paths.
    pub max: Vec<f64>,
    pub fit: Option<DecayFit>,
}

impl DecaySeries {
    fn from_paths(per_path: &[Vec<f64>]) -> Self {
        let len = per_path[0].len();
        let column = |n: usize| per_path.iter().map(|p| p[n]).collect::<Vec<_>>();
        let median: Vec<f64> = (0..len).map(|n| quantile(&column(n), 0.5)).collect();
        let q10 = (0..len).map(|n| quantile(&column(n), 0.1)).collect();
        let q90 = (0..len).map(|n| quantile(&column(n), 0.9)).collect();
        let max = (0..len).map(|n| column(n).into_iter().fold(0.0, f64::max)).collect();
        let fit = fit_decay(&median);
        DecaySeries { median, q10, q90, max, fit }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,median,q10,q90,max\n");
        for n in 0..self.median.len() {
            s.push_str(&format!("{n},{:e},{:e},{:e},{:e}\n", self.median[n], self.q10[n], self.q90[n], self.max[n]));
        }
        s
    }
}

/// `‖𝓛_ω^n 1 − h_{σⁿω}‖_BV` for `n = 0..=n_max` along sampled paths, the
/// density taken with burn-in `n_max + 20`.
pub fn decay_exp1(cocycle: &Cocycle, n_max: usize, n_paths: usize, seed: u64) -> Result<DecaySeries> {
    let burn = n_max + 20;
    let per_path: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (past, path) = cocycle.sample_with_past(burn, n_max, &mut rng);
            let full: Vec<usize> = past.iter().chain(&path).copied().collect();
            let mut cur = GridFunction::constant(cocycle.resolution, 1.0);
            let mut out = Vec::with_capacity(n_max + 1);
            for n in 0..=n_max {
                if n > 0 {
                    cur = cocycle.apply(path[n - 1], &cur)?;
                }
                let h = cocycle.path_density(&full[n..burn + n])?;
                out.push(cur.sub(&h).bv_norm());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(DecaySeries::from_paths(&per_path))
}

/// `‖L_ω^n g_ω‖_BV / ‖g_ω‖_BV` with `g_ω = g − μ_ω(g)` along sampled paths.
pub fn decay_exp2(cocycle: &Cocycle, g: &GridFunction, n_max: usize, n_paths: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let burn = n_max + 20;
    (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (past, path) = cocycle.sample_with_past(burn, n_max, &mut rng);
            let h0 = cocycle.path_density(&past)?;
            let res = lcm(g.resolution(), cocycle.resolution);
            let g = g.refine_to(res);
            let centered = g.shift(-g.mul(&h0).integral());
            let norm0 = centered.bv_norm();
            let h_min = h0.min();
            if h_min < DENSITY_FLOOR {
                return Err(LabError::DegenerateDensity { min: h_min, threshold: DENSITY_FLOOR });
            }
            let mut num = centered.mul(&h0);
            let mut h = h0;
            let mut out = Vec::with_capacity(n_max + 1);
            out.push(1.0);
            for &s in &path {
                num = cocycle.apply(s, &num)?;
                h = cocycle.apply(s, &h)?;
                let min = h.min();
                if min < DENSITY_FLOOR {
                    return Err(LabError::DegenerateDensity { min, threshold: DENSITY_FLOOR });
                }
                out.push(num.zip_with(&h, |a, b| a / b).bv_norm() / norm0);
            }
            Ok(out)
        })
        .collect()
}

/// Envelope check for a family of decay series: `λ` and `K` are fitted on
/// the pointwise maximum of the first `train` series and then checked on
/// every series, including the held-out ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCheck {
    pub k: f64,
    pub lambda: f64,
    pub worst_ratio: f64,
    pub pass: bool,
}

pub fn envelope_check(series: &[Vec<f64>], train: usize) -> EnvelopeCheck {
    let len = series[0].len();
    let train = train.clamp(1, series.len());
    let max: Vec<f64> = (0..len).map(|n| series[..train].iter().map(|p| p[n]).fold(0.0, f64::max)).collect();
    let lambda = fit_decay(&max).map_or(0.0, |f| f.lambda_est.max(0.0));
    let k = (0..len).map(|n| max[n] * (lambda * n as f64).exp()).fold(0.0, f64::max);
    let bound = |n: usize| k * (-lambda * n as f64).exp();
    let worst_ratio = series
        .iter()
        .flat_map(|p| p.iter().enumerate().map(move |(n, v)| (n, *v)))
        .filter(|(_, v)| *v > EXACT_FLOOR)
        .map(|(n, v)| v / bound(n))
        .fold(0.0, f64::max);
    let pass = series.iter().all(|p| p.iter().enumerate().all(|(n, v)| *v <= bound(n) + EXACT_FLOOR));
    EnvelopeCheck { k, lambda, worst_ratio, pass }
}

/// Per-shift constants `K(σⁿω) = max(1, max_m ‖𝓛_{σⁿω}^m 1 − h_{σ^{n+m}ω}‖_BV e^{λm})`
/// along one sampled path. Raising a valid constant keeps it valid; the
/// floor at 1 stops exactly-invariant stretches (where the distance is 0)
/// from producing spurious logarithmic swings.
pub fn k_series_along_path(cocycle: &Cocycle, len: usize, m_max: usize, lambda: f64, seed: u64) -> Result<Vec<f64>> {
    let burn = m_max + 20;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (past, path) = cocycle.sample_with_past(burn, len + m_max, &mut rng);
    let full: Vec<usize> = past.iter().chain(&path).copied().collect();
    (0..len)
        .into_par_iter()
        .map(|n| {
            let mut cur = GridFunction::constant(cocycle.resolution, 1.0);
            let mut k: f64 = 0.0;
            for m in 0..=m_max {
                if m > 0 {
                    cur = cocycle.apply(path[n + m - 1], &cur)?;
                }
                let end = burn + n + m;
                let h = cocycle.path_density(&full[end - burn..end])?;
                k = k.max(cur.sub(&h).bv_norm() * (lambda * m as f64).exp());
            }
            Ok(k.max(1.0))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperednessVerdict {
    /// `max |ln K(σⁿω) − ln K(ω)|/n` over the second half of the series.
    pub statistic: f64,
    pub epsilon: f64,
    pub pass: bool,
}

/// Checks `(1/n)·ln K(σⁿω) → 0` against `ε = λ/3`.
pub fn temperedness_check(k_series: &[f64], lambda: f64) -> Result<TemperednessVerdict> {
    if k_series.len() < 50 {
        return Err(LabError::InsufficientData(format!("{} shifts, need 50", k_series.len())));
    }
    let base = k_series[0].ln();
    let statistic = (k_series.len() / 2..k_series.len())
        .map(|n| (k_series[n].ln() - base).abs() / n as f64)
        .fold(0.0, f64::max);
    let epsilon = lambda / 3.0;
    Ok(TemperednessVerdict { statistic, epsilon, pass: statistic <= epsilon })
}
