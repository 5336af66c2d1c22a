//! Finite-state stationary Markov driving chains.
//!
//! A chain is given by a row-stochastic matrix `P`; its stationary law `pi`
//! is solved at construction. Mixing coefficients between the past
//! `σ(ξ_j, j ≤ 0)` and the future `σ(ξ_j, j ≥ n)` are computed through the
//! Markov reduction: for a stationary Markov chain the suprema over the full
//! past/future σ-algebras are attained on the pair `(σ(ξ_0), σ(ξ_n))`.
//!
//! ```text
//! alpha_n = max_{A,B} | Σ_{i∈A, j∈B} pi_i (Pⁿ(i,j) − pi_j) |
//! phiR_n  = max_j TV(Qⁿ(j,·), pi),   Q(j,i) = pi_i P(i,j) / pi_j
//! psi_n   = max_{i,j} | Pⁿ(i,j) / pi_j − 1 |
//! ```

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

const ROW_SUM_TOL: f64 = 1e-9;
const IID_TOL: f64 = 1e-12;
/// Largest state space for which alpha is computed by subset enumeration.
pub const ALPHA_ENUM_CAP: usize = 20;
/// Grid of stretch exponents tried by [`fit_mixing_rate`].
pub const ETA_GRID: [f64; 8] = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];
/// Entries below this are treated as exact zeros when fitting rates.
const FIT_FLOOR: f64 = 1e-12;

pub type Matrix = Vec<Vec<f64>>;

/// A finite-state stationary Markov chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolChain {
    pub states: Vec<String>,
    pub p: Matrix,
    pub pi: Vec<f64>,
    pub iid: bool,
    #[serde(skip)]
    cumulative: Matrix,
    #[serde(skip)]
    cumulative_pi: Vec<f64>,
}

impl SymbolChain {
    /// Builds a chain with states labelled `0..m`.
    pub fn new(p: Matrix) -> Result<Self> {
        let labels = (0..p.len()).map(|i| i.to_string()).collect();
        Self::with_labels(labels, p)
    }

    pub fn with_labels(states: Vec<String>, p: Matrix) -> Result<Self> {
        let m = p.len();
        if m == 0 {
            return Err(LabError::NonStochastic("empty matrix".into()));
        }
        if states.len() != m {
            return Err(LabError::NonStochastic(format!(
                "{} labels for {} states",
                states.len(),
                m
            )));
        }
        let mut p = p;
        for (i, row) in p.iter_mut().enumerate() {
            if row.len() != m {
                return Err(LabError::NonStochastic(format!("row {i} has length {}", row.len())));
            }
            if let Some(x) = row.iter().find(|x| !x.is_finite() || **x < 0.0) {
                return Err(LabError::NonStochastic(format!("row {i} has entry {x}")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(LabError::NonStochastic(format!("row {i} sums to {s}")));
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        if !strongly_connected(&p) {
            return Err(LabError::Reducible);
        }
        let pi = stationary_vector(&p)?;
        let iid = p
            .iter()
            .all(|row| row.iter().zip(&p[0]).all(|(a, b)| (a - b).abs() <= IID_TOL));
        let cumulative = p.iter().map(|row| cumsum(row)).collect();
        let cumulative_pi = cumsum(&pi);
        Ok(SymbolChain { states, p, pi, iid, cumulative, cumulative_pi })
    }

    /// An iid chain whose every row equals `law`.
    pub fn iid(law: Vec<f64>) -> Result<Self> {
        let m = law.len();
        Self::new(vec![law; m])
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    /// Reverse-chain transitions `Q(j,i) = pi_i P(i,j) / pi_j`.
    pub fn reversed(&self) -> Matrix {
        let m = self.len();
        let mut q = vec![vec![0.0; m]; m];
        for j in 0..m {
            for i in 0..m {
                q[j][i] = self.pi[i] * self.p[i][j] / self.pi[j];
            }
        }
        q
    }

    /// `Pⁿ`, with `P⁰ = I`.
    pub fn power(&self, n: usize) -> Matrix {
        mat_pow(&self.p, n)
    }

    /// Detailed balance `pi_i P(i,j) = pi_j P(j,i)` within `tol`.
    pub fn is_reversible(&self, tol: f64) -> bool {
        let m = self.len();
        (0..m).all(|i| (0..m).all(|j| (self.pi[i] * self.p[i][j] - self.pi[j] * self.p[j][i]).abs() <= tol))
    }

    /// Second-largest eigenvalue modulus of `P`.
    pub fn spectral_gap_modulus(&self) -> f64 {
        let m = self.len();
        if m == 1 {
            return 0.0;
        }
        let mat = DMatrix::from_fn(m, m, |i, j| self.p[i][j]);
        let mut moduli: Vec<f64> = mat.complex_eigenvalues().iter().map(|z| z.norm()).collect();
        moduli.sort_by(|a, b| b.partial_cmp(a).unwrap());
        moduli[1]
    }

    pub fn draw_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        pick(&self.cumulative_pi, rng.random::<f64>())
    }

    pub fn draw_next<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> usize {
        pick(&self.cumulative[from], rng.random::<f64>())
    }
}

fn cumsum(xs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = xs
        .iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = f64::INFINITY;
    }
    out
}

fn pick(cumulative: &[f64], u: f64) -> usize {
    cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
}

fn strongly_connected(p: &Matrix) -> bool {
    let m = p.len();
    let reach = |forward: bool| {
        let mut seen = vec![false; m];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..m {
                let w = if forward { p[i][j] } else { p[j][i] };
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

fn stationary_vector(p: &Matrix) -> Result<Vec<f64>> {
    let m = p.len();
    // (Pᵀ − I) pi = 0 with the last equation replaced by Σ pi = 1.
    let mut a = DMatrix::from_fn(m, m, |i, j| p[j][i] - if i == j { 1.0 } else { 0.0 });
    let mut b = DVector::zeros(m);
    for j in 0..m {
        a[(m - 1, j)] = 1.0;
    }
    b[m - 1] = 1.0;
    let pi = a.lu().solve(&b).ok_or(LabError::Reducible)?;
    let pi: Vec<f64> = pi.iter().copied().collect();
    if pi.iter().any(|x| !(*x > 0.0)) {
        return Err(LabError::Reducible);
    }
    for j in 0..m {
        let s: f64 = (0..m).map(|i| pi[i] * p[i][j]).sum();
        if (s - pi[j]).abs() > 1e-12 {
            return Err(LabError::Reducible);
        }
    }
    Ok(pi)
}

pub fn mat_mul(a: &Matrix, b: &Matrix) -> Matrix {
    let m = a.len();
    let k = b.len();
    let n = b[0].len();
    let mut c = vec![vec![0.0; n]; m];
    for i in 0..m {
        for l in 0..k {
            let a_il = a[i][l];
            if a_il == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i][j] += a_il * b[l][j];
            }
        }
    }
    c
}

pub fn mat_pow(p: &Matrix, n: usize) -> Matrix {
    let m = p.len();
    let mut out: Matrix = (0..m).map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..n {
        out = mat_mul(&out, p);
    }
    out
}

/// ψ coefficient: `max_{i,j} |Pⁿ(i,j)/pi_j − 1|`.
pub fn mixing_psi(chain: &SymbolChain, n: usize) -> f64 {
    psi_from_power(chain, &chain.power(n))
}

fn psi_from_power(chain: &SymbolChain, pn: &Matrix) -> f64 {
    let m = chain.len();
    let mut best: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            best = best.max((pn[i][j] / chain.pi[j] - 1.0).abs());
        }
    }
    best
}

/// Reverse φ coefficient: worst total-variation distance between the
/// n-step law of the time-reversed chain and `pi`.
pub fn mixing_phi_reverse(chain: &SymbolChain, n: usize) -> f64 {
    phi_from_reversed_power(chain, &mat_pow(&chain.reversed(), n))
}

fn phi_from_reversed_power(chain: &SymbolChain, qn: &Matrix) -> f64 {
    qn.iter()
        .map(|row| 0.5 * row.iter().zip(&chain.pi).map(|(q, p)| (q - p).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// α coefficient by enumeration of subsets `A` of the state space. For each
/// `A` the optimal `B` collects the positive entries of
/// `j ↦ Σ_{i∈A} pi_i (Pⁿ(i,j) − pi_j)`, so this equals the maximum over all
/// subset pairs.
pub fn mixing_alpha(chain: &SymbolChain, n: usize) -> Result<f64> {
    alpha_from_power(chain, &chain.power(n))
}

fn alpha_from_power(chain: &SymbolChain, pn: &Matrix) -> Result<f64> {
    let m = chain.len();
    if m > ALPHA_ENUM_CAP {
        return Err(LabError::StateSpaceTooLarge(m));
    }
    let d: Matrix = (0..m)
        .map(|i| (0..m).map(|j| chain.pi[i] * (pn[i][j] - chain.pi[j])).collect())
        .collect();
    let mut best: f64 = 0.0;
    let mut col = vec![0.0; m];
    // Gray-code walk over subsets A.
    for step in 1u64..(1u64 << m) {
        let bit = step.trailing_zeros() as usize;
        let gray = step ^ (step >> 1);
        let sign = if gray & (1 << bit) != 0 { 1.0 } else { -1.0 };
        for j in 0..m {
            col[j] += sign * d[bit][j];
        }
        let pos: f64 = col.iter().filter(|x| **x > 0.0).sum();
        let neg: f64 = -col.iter().filter(|x| **x < 0.0).sum::<f64>();
        best = best.max(pos.max(neg));
    }
    Ok(best)
}

/// Which coefficient sequence to use as a decay profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingKind {
    Alpha,
    PhiReverse,
    Psi,
}

/// Result of fitting `alpha_n ≈ c1 exp(−c2 n^eta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub c1: f64,
    pub c2: f64,
    pub eta: f64,
    pub gamma: f64,
    pub residual: f64,
}

impl RateFit {
    /// Sentinel used for iid chains: `eta = ∞`, `gamma = 0`.
    pub fn iid_sentinel() -> Self {
        RateFit { c1: 0.0, c2: f64::INFINITY, eta: f64::INFINITY, gamma: 0.0, residual: 0.0 }
    }
}

/// α, φ_R and ψ coefficients for `n = 1..=n_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingProfile {
    pub alpha: Vec<f64>,
    pub phi_r: Vec<f64>,
    pub psi: Vec<f64>,
    /// Set when the state space exceeded the enumeration cap and `alpha`
    /// holds the φ_R upper bound instead.
    pub alpha_is_bound: bool,
    pub rate: RateFit,
    /// Values at `n = 0` (all three formulas extended with `P⁰ = I`).
    pub at_zero: [f64; 3],
}

impl MixingProfile {
    pub fn compute(chain: &SymbolChain, n_max: usize) -> Self {
        let q = chain.reversed();
        let mut pn = mat_pow(&chain.p, 0);
        let mut qn = mat_pow(&q, 0);
        let zero_alpha = alpha_from_power(chain, &pn).unwrap_or_else(|_| phi_from_reversed_power(chain, &qn));
        let at_zero = [zero_alpha, phi_from_reversed_power(chain, &qn), psi_from_power(chain, &pn)];
        let (mut alpha, mut phi_r, mut psi) = (Vec::new(), Vec::new(), Vec::new());
        let mut alpha_is_bound = false;
        for _ in 0..n_max {
            pn = mat_mul(&pn, &chain.p);
            qn = mat_mul(&qn, &q);
            let phi = phi_from_reversed_power(chain, &qn);
            let a = match alpha_from_power(chain, &pn) {
                Ok(a) => a,
                Err(_) => {
                    alpha_is_bound = true;
                    phi
                }
            };
            alpha.push(a);
            phi_r.push(phi);
            psi.push(psi_from_power(chain, &pn));
        }
        let rate = fit_mixing_rate(&alpha).unwrap_or_else(|_| RateFit::iid_sentinel());
        MixingProfile { alpha, phi_r, psi, alpha_is_bound, rate, at_zero }
    }

    /// Coefficient of the given kind at lag `n` (any `n ≥ 0`; lags past the
    /// computed range reuse the last value, which is an upper bound since
    /// the sequences are non-increasing).
    pub fn coefficient(&self, kind: MixingKind, n: usize) -> f64 {
        let (seq, z) = match kind {
            MixingKind::Alpha => (&self.alpha, self.at_zero[0]),
            MixingKind::PhiReverse => (&self.phi_r, self.at_zero[1]),
            MixingKind::Psi => (&self.psi, self.at_zero[2]),
        };
        if n == 0 {
            z
        } else {
            seq.get(n - 1).copied().or_else(|| seq.last().copied()).unwrap_or(z)
        }
    }
}

/// Least-squares fit of `ln alpha_n = ln c1 − c2 n^eta` over the fixed
/// [`ETA_GRID`]; `seq[0]` is the coefficient at `n = 1`.
pub fn fit_mixing_rate(seq: &[f64]) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = seq
        .iter()
        .enumerate()
        .filter(|(_, a)| **a > FIT_FLOOR)
        .map(|(i, a)| ((i + 1) as f64, a.ln()))
        .collect();
    if pts.is_empty() {
        return Err(LabError::AllZero);
    }
    if pts.len() < 8 {
        return Err(LabError::InsufficientData(format!("{} nonzero entries, need 8", pts.len())));
    }
    let mut best: Option<RateFit> = None;
    for &eta in &ETA_GRID {
        let xs: Vec<f64> = pts.iter().map(|(n, _)| n.powf(eta)).collect();
        let ys: Vec<f64> = pts.iter().map(|(_, y)| *y).collect();
        let (intercept, slope) = crate::stats::linear_fit(&xs, &ys);
        let residual: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        let fit = RateFit { c1: intercept.exp(), c2: -slope, eta, gamma: 1.0 / eta, residual };
        if best.is_none_or(|b| residual < b.residual - 1e-12 * b.residual.abs().max(1e-300)) {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

/// Samples `ω_0 ~ pi`, `ω_{t+1} ~ P(ω_t, ·)`.
pub fn sample_path(chain: &SymbolChain, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_path_with(chain, n, &mut rng)
}

pub fn sample_path_with<R: Rng + ?Sized>(chain: &SymbolChain, n: usize, rng: &mut R) -> Vec<usize> {
    let mut path = Vec::with_capacity(n);
    if n == 0 {
        return path;
    }
    let mut s = chain.draw_initial(rng);
    path.push(s);
    for _ in 1..n {
        s = chain.draw_next(s, rng);
        path.push(s);
    }
    path
}
