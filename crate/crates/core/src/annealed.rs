//! Exact annealed expectations.
//!
//! Under a stationary Markov driving chain the fiber density of `x` given
//! `(ω_j)_{j≥0}` depends only on `ω_0`; call it `ĥ(ω_0)`. With `ĥ` in hand,
//! every expectation of a finite product `Π φ∘τ^t` is a forward recursion
//! over symbol-indexed weighted densities, i.e. finite linear algebra.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::driving::{mixing_alpha, Matrix, SymbolChain};
use crate::error::{LabError, Result};
use crate::fibers::TransferMatrix;
use crate::fields::{lcm, GridFunction, PairField, SymbolField};
use crate::operators::{fit_decay, Cocycle};

pub const HHAT_TOL: f64 = 1e-12;
pub const HHAT_MAX_ITER: usize = 10_000;
/// Largest time index allowed in a product expectation.
pub const PRODUCT_HORIZON: usize = 60;
pub const MOMENT_HORIZON: usize = 500;
pub const MAX_ORDER: usize = 6;

/// A cocycle together with its conditioned densities `ĥ(s)`.
#[derive(Debug, Clone)]
pub struct Annealed {
    cocycle: Cocycle,
    hhat: SymbolField,
    iterations: usize,
    residual: f64,
}

/// Iterates `ĥ(s') ← Σ_s Q(s'→s)·𝓛_s ĥ(s)` from `ĥ ≡ 1` until the BV
/// residual drops below `1e-12`. Returns the field, iteration count and
/// final residual.
pub fn conditioned_density(cocycle: &Cocycle) -> Result<(SymbolField, usize, f64)> {
    let q = cocycle.chain().reversed();
    let m = cocycle.symbols();
    let n = cocycle.resolution();
    let mut h: Vec<GridFunction> = vec![GridFunction::constant(n, 1.0); m];
    for it in 1..=HHAT_MAX_ITER {
        let pushed: Vec<GridFunction> = (0..m).map(|s| cocycle.apply(s, &h[s])).collect::<Result<_>>()?;
        let next: Vec<GridFunction> = (0..m)
            .map(|t| {
                let mut acc = GridFunction::constant(n, 0.0);
                for s in 0..m {
                    if q[t][s] != 0.0 {
                        acc.axpy(q[t][s], &pushed[s]);
                    }
                }
                acc
            })
            .collect();
        let residual = next.iter().zip(&h).map(|(a, b)| a.sub(b).bv_norm()).fold(0.0, f64::max);
        h = next;
        if residual < HHAT_TOL {
            for g in &h {
                debug_assert!((g.integral() - 1.0).abs() < 1e-10);
            }
            return Ok((SymbolField::new(h), it, residual));
        }
    }
    Err(LabError::NoConvergence(HHAT_MAX_ITER))
}

/// Variance estimate `s² = b_0 + 2Σ_{k≤K} b_k` with a geometric tail bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub s2: f64,
    pub tail_bound: f64,
    pub b: Vec<f64>,
}

/// Scalar moments `E[S_n^q]`, `q = 0..=p`, and cumulants `Γ_k`, `k = 1..=p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentStats {
    pub n: usize,
    pub moments: Vec<f64>,
    pub cumulants: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiCorrelation {
    pub lhs: f64,
    /// `(r_j, α_{r_j})` for `j = 1..m`, with `r_1` repeated for the first
    /// block (which has no gap in front of it).
    pub terms: Vec<(usize, f64)>,
    pub min_gap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub matrix: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Unit eigenvectors with eigenvalue below the degeneracy threshold.
    pub null_directions: Vec<Vec<f64>>,
}

pub const DEGENERACY_THRESHOLD: f64 = 1e-8;

impl Annealed {
    pub fn new(cocycle: Cocycle) -> Result<Self> {
        let (hhat, iterations, residual) = conditioned_density(&cocycle)?;
        Ok(Annealed { cocycle, hhat, iterations, residual })
    }

    pub fn cocycle(&self) -> &Cocycle {
        &self.cocycle
    }

    pub fn chain(&self) -> &SymbolChain {
        self.cocycle.chain()
    }

    pub fn hhat(&self) -> &SymbolField {
        &self.hhat
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn symbols(&self) -> usize {
        self.cocycle.symbols()
    }

    fn pi(&self) -> &[f64] {
        &self.chain().pi
    }

    fn p(&self) -> &Matrix {
        &self.chain().p
    }

    /// `E_μ f = Σ_s pi_s ∫ f(s,·) ĥ(s,·) dm`.
    pub fn expectation(&self, f: &SymbolField) -> f64 {
        let res = lcm(f.resolution(), self.hhat.resolution());
        (0..self.symbols())
            .map(|s| self.pi()[s] * f.get(s).refine_to(res).dot(&self.hhat.get(s).refine_to(res)))
            .sum()
    }

    /// `Σ_{s,s'} pi_s P(s,s') ∫ f(s,s',·) ĥ(s,·) dm`.
    pub fn expectation_pair(&self, f: &PairField) -> f64 {
        let res = lcm(f.resolution(), self.hhat.resolution());
        let m = self.symbols();
        let mut total = 0.0;
        for s in 0..m {
            let h = self.hhat.get(s).refine_to(res);
            for t in 0..m {
                let w = self.pi()[s] * self.p()[s][t];
                if w != 0.0 {
                    total += w * f.get(s, t).refine_to(res).dot(&h);
                }
            }
        }
        total
    }

    pub fn center(&self, f: &SymbolField) -> SymbolField {
        f.shift(-self.expectation(f))
    }

    fn matrices(&self, res: usize) -> Result<Vec<Arc<TransferMatrix>>> {
        (0..self.symbols()).map(|s| self.cocycle.matrix_at(s, res)).collect()
    }

    fn initial_weights(&self, res: usize) -> Vec<Vec<f64>> {
        (0..self.symbols())
            .map(|s| self.hhat.get(s).refine_to(res).scale(self.pi()[s]).into_values())
            .collect()
    }

    /// `w'(s') = Σ_s P(s,s')·𝓛_s w(s)`.
    fn step(&self, mats: &[Arc<TransferMatrix>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let m = self.symbols();
        let res = w[0].len();
        let pushed: Vec<Vec<f64>> = (0..m)
            .map(|s| {
                let mut out = vec![0.0; res];
                mats[s].apply_into(&w[s], &mut out);
                out
            })
            .collect();
        (0..m)
            .map(|t| {
                let mut acc = vec![0.0; res];
                for s in 0..m {
                    let a = self.p()[s][t];
                    if a != 0.0 {
                        acc.iter_mut().zip(&pushed[s]).for_each(|(y, x)| *y += a * x);
                    }
                }
                acc
            })
            .collect()
    }

    /// `E_μ[Π_j f_j∘τ^{t_j}]` over `(t_j, f_j)` slots; repeated times
    /// multiply.
    pub fn product_expectation(&self, slots: &[(usize, &SymbolField)]) -> Result<f64> {
        let horizon = slots.iter().map(|(t, _)| *t).max().unwrap_or(0);
        if horizon > PRODUCT_HORIZON {
            return Err(LabError::HorizonTooLarge { horizon, limit: PRODUCT_HORIZON });
        }
        let res = slots.iter().map(|(_, f)| f.resolution()).fold(self.cocycle.resolution(), lcm);
        let mats = self.matrices(res)?;
        let fields: Vec<(usize, SymbolField)> = slots.iter().map(|(t, f)| (*t, f.refine_to(res))).collect();
        let mut w = self.initial_weights(res);
        for t in 0..=horizon {
            if t > 0 {
                w = self.step(&mats, &w);
            }
            for (_, f) in fields.iter().filter(|(ft, _)| *ft == t) {
                for (s, ws) in w.iter_mut().enumerate() {
                    ws.iter_mut().zip(f.get(s).values()).for_each(|(a, b)| *a *= b);
                }
            }
        }
        Ok(w.iter().flatten().sum::<f64>() / res as f64)
    }

    /// `b_k = E_μ[φ·φ∘τ^k]` for `k = 0..=k_max` in one forward sweep.
    pub fn correlations(&self, phi: &SymbolField, k_max: usize) -> Result<Vec<f64>> {
        let res = lcm(phi.resolution(), self.cocycle.resolution());
        let mats = self.matrices(res)?;
        let phi = phi.refine_to(res);
        let mut w = self.initial_weights(res);
        for (s, ws) in w.iter_mut().enumerate() {
            ws.iter_mut().zip(phi.get(s).values()).for_each(|(a, b)| *a *= b);
        }
        let pair = |w: &[Vec<f64>]| -> f64 {
            w.iter().enumerate().map(|(s, ws)| ws.iter().zip(phi.get(s).values()).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>()
                / res as f64
        };
        let mut out = Vec::with_capacity(k_max + 1);
        out.push(pair(&w));
        for _ in 0..k_max {
            w = self.step(&mats, &w);
            out.push(pair(&w));
        }
        Ok(out)
    }

    /// `s² = b_0 + 2Σ_{k=1}^{K} b_k` with `φ` centered first. The tail bound
    /// `2Σ_{k>K} C e^{−λk}` uses the geometric envelope fitted to `|b_k|`.
    pub fn asymptotic_variance(&self, phi: &SymbolField, n_tail: usize) -> Result<VarianceEstimate> {
        let phi = self.center(phi);
        let b = self.correlations(&phi, n_tail)?;
        let s2 = b[0] + 2.0 * b[1..].iter().sum::<f64>();
        let abs: Vec<f64> = b.iter().map(|v| v.abs()).collect();
        let tail_bound = match fit_decay(&abs[1..]) {
            None => 0.0,
            Some(f) if f.lambda_est <= 0.0 => f64::INFINITY,
            Some(f) => {
                // envelope indexed from k = 1
                let r = (-f.lambda_est).exp();
                2.0 * f.k_envelope * r.powi(n_tail as i32) / (1.0 - r)
            }
        };
        Ok(VarianceEstimate { s2, tail_bound, b })
    }

    /// `E[S_t^q]` for `t = 0..=n`, `q = 0..=p`, by propagating per-symbol
    /// weighted densities of `S_t^q` with a binomial update before each
    /// push.
    pub fn moment_series(&self, phi: &SymbolField, n: usize, p: usize) -> Result<Vec<Vec<f64>>> {
        let res = lcm(phi.resolution(), self.cocycle.resolution());
        let mats = self.matrices(res)?;
        let phi = phi.refine_to(res);
        let m = self.symbols();
        let binom = binomials(p);
        // powers[s][j] = φ_s^j
        let powers: Vec<Vec<Vec<f64>>> = (0..m)
            .map(|s| (0..=p).map(|j| phi.get(s).values().iter().map(|v| v.powi(j as i32)).collect()).collect())
            .collect();
        // w[q][s]
        let mut w: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; res]; m]; p + 1];
        w[0] = self.initial_weights(res);
        let totals = |w: &Vec<Vec<Vec<f64>>>| -> Vec<f64> {
            w.iter().map(|wq| wq.iter().flatten().sum::<f64>() / res as f64).collect()
        };
        let mut out = Vec::with_capacity(n + 1);
        out.push(totals(&w));
        for _ in 0..n {
            let v: Vec<Vec<Vec<f64>>> = (0..=p)
                .map(|q| {
                    (0..m)
                        .map(|s| {
                            let mut acc = vec![0.0; res];
                            for j in 0..=q {
                                let c = binom[q][j] as f64;
                                let pw = &powers[s][q - j];
                                acc.iter_mut()
                                    .zip(&w[j][s])
                                    .zip(pw)
                                    .for_each(|((a, x), y)| *a += c * x * y);
                            }
                            acc
                        })
                        .collect()
                })
                .collect();
            w = v.iter().map(|vq| self.step(&mats, vq)).collect();
            out.push(totals(&w));
        }
        Ok(out)
    }

    /// Exact `E[S_n^q]` (`q ≤ p`) and cumulants for `n ≤ 500`, `p ≤ 6`.
    pub fn moments_cumulants(&self, phi: &SymbolField, n: usize, p: usize) -> Result<MomentStats> {
        if n > MOMENT_HORIZON {
            return Err(LabError::HorizonTooLarge { horizon: n, limit: MOMENT_HORIZON });
        }
        if p > MAX_ORDER {
            return Err(LabError::OrderTooLarge { order: p, limit: MAX_ORDER });
        }
        let moments = self.moment_series(phi, n, p)?.pop().unwrap();
        let cumulants = cumulants_from_moments(&moments);
        Ok(MomentStats { n, moments, cumulants })
    }

    /// `|E Π_j G_j − Π_j E G_j|` with `G_j = Π_{i∈B_j} φ∘τ^i`.
    pub fn multi_correlation(&self, phi: &SymbolField, blocks: &[Vec<usize>]) -> Result<MultiCorrelation> {
        validate_blocks(blocks)?;
        let all: Vec<(usize, &SymbolField)> = blocks.iter().flatten().map(|t| (*t, phi)).collect();
        let joint = self.product_expectation(&all)?;
        let mut product = 1.0;
        for b in blocks {
            let start = b[0];
            let slots: Vec<(usize, &SymbolField)> = b.iter().map(|t| (t - start, phi)).collect();
            product *= self.product_expectation(&slots)?;
        }
        let gaps: Vec<usize> = blocks.windows(2).map(|w| w[1][0] - w[0][w[0].len() - 1]).collect();
        let mut terms = Vec::with_capacity(blocks.len());
        if let Some(&g) = gaps.first() {
            terms.push((g / 3, mixing_alpha(self.chain(), g / 3)?));
        }
        for &g in &gaps {
            terms.push((g / 3, mixing_alpha(self.chain(), g / 3)?));
        }
        let lhs = if blocks.len() <= 1 { 0.0 } else { (joint - product).abs() };
        Ok(MultiCorrelation { lhs, terms, min_gap: gaps.iter().copied().min().unwrap_or(0) })
    }

    /// `Σ²` by polarization of scalar asymptotic variances, with its
    /// eigen-decomposition and near-null directions.
    pub fn covariance_matrix(&self, components: &[SymbolField], n_tail: usize) -> Result<CovarianceReport> {
        let d = components.len();
        let comps: Vec<SymbolField> = components.iter().map(|c| self.center(c)).collect();
        let s2 = |f: &SymbolField| self.asymptotic_variance(f, n_tail).map(|v| v.s2);
        let diag: Vec<f64> = comps.iter().map(s2).collect::<Result<_>>()?;
        let mut mat = DMatrix::zeros(d, d);
        for i in 0..d {
            mat[(i, i)] = diag[i];
            for j in i + 1..d {
                let v = 0.5 * (s2(&comps[i].add(&comps[j]))? - diag[i] - diag[j]);
                mat[(i, j)] = v;
                mat[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(mat.clone());
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|a, b| eig.eigenvalues[*a].partial_cmp(&eig.eigenvalues[*b]).unwrap());
        let eigenvalues = order.iter().map(|i| eig.eigenvalues[*i]).collect();
        let null_directions = order
            .iter()
            .filter(|i| eig.eigenvalues[**i] < DEGENERACY_THRESHOLD)
            .map(|i| {
                let v: Vec<f64> = eig.eigenvectors.column(*i).iter().copied().collect();
                // fix the sign so the largest entry is positive
                let big = v.iter().copied().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
                v.iter().map(|x| x * big.signum()).collect()
            })
            .collect();
        let matrix = (0..d).map(|i| (0..d).map(|j| mat[(i, j)]).collect()).collect();
        Ok(CovarianceReport { matrix, eigenvalues, null_directions })
    }
}

fn validate_blocks(blocks: &[Vec<usize>]) -> Result<()> {
    for b in blocks {
        if b.is_empty() || b.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LabError::OverlappingBlocks);
        }
    }
    if blocks.windows(2).any(|w| w[1][0] <= *w[0].last().unwrap()) {
        return Err(LabError::OverlappingBlocks);
    }
    let horizon = blocks.last().and_then(|b| b.last()).copied().unwrap_or(0);
    if horizon > PRODUCT_HORIZON {
        return Err(LabError::HorizonTooLarge { horizon, limit: PRODUCT_HORIZON });
    }
    Ok(())
}

fn binomials(p: usize) -> Vec<Vec<u64>> {
    let mut c = vec![vec![0u64; p + 1]; p + 1];
    for n in 0..=p {
        c[n][0] = 1;
        for k in 1..=n {
            c[n][k] = c[n - 1][k - 1] + if k < n { c[n - 1][k] } else { 0 };
        }
    }
    c
}

/// Cumulants `Γ_1..Γ_p` from raw moments `μ_0..μ_p` via
/// `κ_n = μ_n − Σ_{k=1}^{n−1} C(n−1,k−1) κ_k μ_{n−k}`. Entry 0 of the
/// output is unused (0).
pub fn cumulants_from_moments(mu: &[f64]) -> Vec<f64> {
    let p = mu.len() - 1;
    let c = binomials(p.max(1));
    let mut k = vec![0.0; p + 1];
    for n in 1..=p {
        let mut v = mu[n];
        for j in 1..n {
            v -= c[n - 1][j - 1] as f64 * k[j] * mu[n - j];
        }
        k[n] = v;
    }
    k
}

/// One row of the variance-rate inequality
/// `|E[S_n²]/n − s²| ≤ (2/n)Σ_k k|b_k|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRateRow {
    pub n: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Evaluates the inequality for every `n` in `ns` from exact second
/// moments `e_s2[n]` and correlations `b` (long enough that the neglected
/// tail is below `tail`). The comparison allows floating roundoff relative
/// to the magnitudes involved, since both sides coincide when all `b_k`
/// share a sign.
pub fn variance_rate_check(e_s2: &[f64], var: &VarianceEstimate, ns: &[usize]) -> Vec<VarianceRateRow> {
    let weighted: f64 = var.b.iter().enumerate().skip(1).map(|(k, v)| k as f64 * v.abs()).sum();
    ns.iter()
        .map(|&n| {
            let lhs = (e_s2[n] / n as f64 - var.s2).abs();
            let rhs = 2.0 * weighted / n as f64;
            let slack = 1e-12 * (e_s2[n].abs() / n as f64 + var.s2.abs() + rhs) + 2.0 * var.tail_bound;
            VarianceRateRow { n, lhs, rhs, pass: lhs <= rhs + slack }
        })
        .collect()
}

/// Envelope `A·Σ_j (δ₀^{r_j} + α_{r_j})` for multiple correlations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProMultEnvelope {
    pub a: f64,
    pub delta0: f64,
}

impl ProMultEnvelope {
    pub fn rhs(&self, mc: &MultiCorrelation) -> f64 {
        self.a * mc.terms.iter().map(|(r, alpha)| self.delta0.powi(*r as i32) + alpha).sum::<f64>()
    }

    /// `δ₀` from the log-linear decay of the largest two-block `lhs` per
    /// `r`, then `A` as the smallest constant dominating all training
    /// configurations.
    pub fn fit(training: &[MultiCorrelation]) -> Self {
        let r_max = training.iter().map(|m| m.terms[0].0).max().unwrap_or(0);
        let per_r: Vec<f64> = (0..=r_max)
            .map(|r| training.iter().filter(|m| m.terms[0].0 == r).map(|m| m.lhs).fold(0.0, f64::max))
            .collect();
        let delta0 = fit_decay(&per_r).map_or(0.5, |f| (-f.lambda_est).exp().clamp(1e-6, 1.0 - 1e-9));
        let mut env = ProMultEnvelope { a: 1.0, delta0 };
        env.a = training.iter().map(|m| m.lhs / env.rhs(m)).fold(0.0, f64::max);
        env
    }
}

/// `φ(s,x) = r(T_s x) − r(x)`: a coboundary built from an `x`-only
/// function `r`, exact at resolution `res(r)·L`.
pub fn coboundary(cocycle: &Cocycle, r: &GridFunction) -> Result<SymbolField> {
    let fields = (0..cocycle.symbols())
        .map(|s| {
            let pb = cocycle.pullback(s, r)?;
            Ok(pb.sub(&r.refine_to(pb.resolution())))
        })
        .collect::<Result<_>>()?;
    Ok(SymbolField::new(fields))
}
