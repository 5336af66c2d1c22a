//! The transfer operator `𝒦` of the skew product with respect to the
//! one-sided σ-algebra, and the martingale–coboundary decomposition built
//! from its iterates.
//!
//! On functions of `(ω_0, x)` the operator closes:
//! `(𝒦f)(s',y) = Σ_s Q(s'→s)·𝓛_s(f(s,·)ĥ(s,·))(y) / ĥ(s',y)`,
//! with `Q` the reversed chain. It satisfies `𝒦(g∘τ) = g`, which the
//! duality certificate checks cell by cell.

use serde::{Deserialize, Serialize};

use crate::annealed::Annealed;
use crate::driving::{MixingKind, MixingProfile};
use crate::error::{LabError, Result};
use crate::fields::{lcm, GridFunction, PairField, SymbolField};
use crate::operators::{DENSITY_FLOOR, EXACT_FLOOR};
use crate::stats::{fit_envelope, Envelope};

/// Largest truncation depth tried when summing `Σ 𝒦ⁿφ`.
pub const MAX_TRUNCATION: usize = 5000;

fn check_density(a: &Annealed) -> Result<()> {
    let min = a.hhat().fields.iter().map(|h| h.min()).fold(f64::INFINITY, f64::min);
    if min < DENSITY_FLOOR {
        return Err(LabError::DegenerateDensity { min, threshold: DENSITY_FLOOR });
    }
    Ok(())
}

/// Shared core: `out(s') = Σ_s Q(s'→s)·𝓛_s(g(s, s'))/ĥ(s')` where
/// `g(s, s')` already includes the factor `ĥ(s)`.
fn k_core(a: &Annealed, res: usize, weighted: impl Fn(usize, usize) -> Vec<f64>) -> Result<SymbolField> {
    check_density(a)?;
    let m = a.symbols();
    let q = a.chain().reversed();
    let out = (0..m)
        .map(|t| {
            let mut acc = vec![0.0; res];
            for (s, qs) in q[t].iter().enumerate() {
                if *qs != 0.0 {
                    a.cocycle().matrix_at(s, res)?.apply_scaled_into(*qs, &weighted(s, t), &mut acc);
                }
            }
            let h = a.hhat().get(t).refine_to(res);
            Ok(GridFunction::new(acc).zip_with(&h, |x, y| x / y))
        })
        .collect::<Result<_>>()?;
    Ok(SymbolField::new(out))
}

/// `𝒦f` for a function of `(ω_0, x)`.
pub fn k_apply(a: &Annealed, f: &SymbolField) -> Result<SymbolField> {
    let res = lcm(f.resolution(), a.cocycle().resolution());
    let weighted: Vec<Vec<f64>> = (0..a.symbols())
        .map(|s| f.get(s).refine_to(res).mul(&a.hhat().get(s).refine_to(res)).into_values())
        .collect();
    k_core(a, res, |s, _| weighted[s].clone())
}

/// `𝒦f` for a function of `(ω_0, ω_1, x)`; the output symbol is `ω_1`.
pub fn k_apply_pair(a: &Annealed, f: &PairField) -> Result<SymbolField> {
    let res = lcm(f.resolution(), a.cocycle().resolution());
    let hs: Vec<GridFunction> = (0..a.symbols()).map(|s| a.hhat().get(s).refine_to(res)).collect();
    k_core(a, res, |s, t| f.get(s, t).refine_to(res).mul(&hs[s]).into_values())
}

/// `max |E[(𝒦f)·g] − E[f·(g∘τ)]|` over the indicator basis
/// `g = 1{ω_0 = t}·1_{cell c}` at the resolution of `𝒦f`. The right side
/// is computed through exact pullbacks, independently of `𝒦`.
pub fn duality_certificate(a: &Annealed, f: &SymbolField) -> Result<f64> {
    let kf = k_apply(a, f)?;
    let res = kf.resolution();
    let m = a.symbols();
    let pi = &a.chain().pi;
    let p = &a.chain().p;
    let mut worst: f64 = 0.0;
    for t in 0..m {
        let h_t = a.hhat().get(t).refine_to(res);
        for c in 0..res {
            let lhs = pi[t] * kf.get(t).values()[c] * h_t.values()[c] / res as f64;
            let ind = GridFunction::indicator(res, c, c + 1);
            let mut rhs = 0.0;
            for s in 0..m {
                let w = pi[s] * p[s][t];
                if w == 0.0 {
                    continue;
                }
                let pb = a.cocycle().pullback(s, &ind)?;
                let fine = pb.resolution();
                let fh = f.get(s).refine_to(fine).mul(&a.hhat().get(s).refine_to(fine));
                rhs += w * fh.dot(&pb);
            }
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}

/// Which mixing coefficient enters the decay envelope.
pub fn regime(a: &Annealed) -> MixingKind {
    let min = a.hhat().fields.iter().map(|h| h.min()).fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        MixingKind::PhiReverse
    } else {
        MixingKind::Psi
    }
}

/// `‖𝒦ⁿφ‖_∞` for `n = 0..=n_max` with a fitted envelope
/// `C(δⁿ + γ_{⌊n/2⌋})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KDecay {
    pub sup: Vec<f64>,
    pub regime: MixingKind,
    pub gamma: Vec<f64>,
    pub envelope: Envelope,
    /// Largest ratio `sup_n / envelope_n` over the whole series.
    pub worst_ratio: f64,
    pub dominated: bool,
    pub monotone: bool,
}

/// Iterates `𝒦` on (centered) `φ`. The envelope is fitted on the first
/// half of the range and checked on all of it.
pub fn k_decay(a: &Annealed, phi: &SymbolField, n_max: usize) -> Result<KDecay> {
    let mut cur = a.center(phi);
    let mut sup = vec![cur.sup()];
    for _ in 0..n_max {
        cur = k_apply(a, &cur)?;
        sup.push(cur.sup());
    }
    let regime = regime(a);
    let profile = MixingProfile::compute(a.chain(), n_max / 2 + 1);
    let gamma: Vec<f64> = (0..=n_max).map(|n| profile.coefficient(regime, n / 2)).collect();
    let envelope = envelope_with_extra(&sup, &gamma);
    let bound: Vec<f64> = (0..=n_max).map(|n| envelope.eval(n, gamma[n])).collect();
    let worst_ratio = ratio_max(&sup, &bound);
    let dominated = sup.iter().zip(&bound).all(|(v, b)| *v <= b * (1.0 + 1e-12) + EXACT_FLOOR);
    let monotone = sup.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-15);
    Ok(KDecay { sup, regime, gamma, envelope, worst_ratio, dominated, monotone })
}

fn envelope_with_extra(values: &[f64], extra: &[f64]) -> Envelope {
    let half = values.len().div_ceil(2).max(2).min(values.len());
    fit_envelope(values, |n| extra[n], 0..half, EXACT_FLOOR)
}

fn ratio_max(values: &[f64], bound: &[f64]) -> f64 {
    values
        .iter()
        .zip(bound)
        .filter(|(v, _)| **v > EXACT_FLOOR)
        .map(|(v, b)| v / b)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleDecomposition {
    /// `χ = Σ_{n=1}^{N} 𝒦ⁿφ`.
    pub chi: SymbolField,
    /// `u = φ + χ − χ∘τ` as a function of `(ω_0, ω_1, x)`.
    pub u: PairField,
    pub n_trunc: usize,
    /// Bound on `Σ_{n>N} ‖𝒦ⁿφ‖_∞`.
    pub tail_bound: f64,
    /// `‖𝒦u‖_∞`, which equals `‖𝒦^{N+1}φ‖_∞`.
    pub residual: f64,
    pub chi_sup: f64,
    /// `‖u‖_∞` for the truncated decomposition.
    pub u_sup: f64,
    pub mean_u: f64,
    /// `E_μ[u²]`.
    pub second_moment: f64,
}

impl MartingaleDecomposition {
    /// Bound on `‖u‖_∞` for the untruncated decomposition.
    pub fn u_bound(&self) -> f64 {
        self.u_sup + 2.0 * self.tail_bound
    }

    /// `a₁` with `|S_n − M_n| ≤ a₁`, where `M_n` is the reverse-martingale
    /// part: `S_n = M_n − χ + χ∘τⁿ`.
    pub fn a1(&self) -> f64 {
        2.0 * (self.chi_sup + self.tail_bound)
    }

    /// Tolerance for comparing `E_μ[u²]` against the exact `s²`: the effect
    /// of the truncated tail on `E[u²]`.
    pub fn second_moment_tolerance(&self) -> f64 {
        4.0 * self.u_sup * self.tail_bound + 4.0 * self.tail_bound * self.tail_bound
    }
}

/// Sums `χ = Σ_{n≥1} 𝒦ⁿφ` until the geometric tail estimate drops below
/// `tol`, then assembles `u`. The tail after `N` terms is bounded by
/// `‖𝒦^Nφ‖·ρ/(1−ρ)` with `ρ` the largest one-step contraction ratio seen
/// over the last five iterates.
pub fn build_decomposition(a: &Annealed, phi: &SymbolField, tol: f64) -> Result<MartingaleDecomposition> {
    let phi = a.center(phi);
    let res = lcm(phi.resolution(), a.cocycle().resolution());
    let phi = phi.refine_to(res);
    let mut chi = SymbolField::constant(a.symbols(), res, 0.0);
    let mut cur = phi.clone();
    let mut sups = vec![cur.sup()];
    let mut n_trunc = 0;
    let tail_bound;
    loop {
        if sups[n_trunc] <= f64::MIN_POSITIVE {
            tail_bound = 0.0;
            break;
        }
        if n_trunc >= 5 {
            let rho = sups[n_trunc - 5..=n_trunc]
                .windows(2)
                .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
                .fold(0.0, f64::max);
            if rho < 1.0 {
                let tail = sups[n_trunc] * rho / (1.0 - rho);
                if tail < tol {
                    tail_bound = tail;
                    break;
                }
            } else if n_trunc >= 50 {
                return Err(LabError::NotSummable(format!("contraction ratio {rho:.3} after {n_trunc} iterates")));
            }
        }
        if n_trunc >= MAX_TRUNCATION {
            return Err(LabError::NotSummable(format!("tail above {tol:e} after {n_trunc} iterates")));
        }
        cur = k_apply(a, &cur)?;
        chi = chi.add(&cur);
        n_trunc += 1;
        sups.push(cur.sup());
    }
    let u = assemble_u(a, &phi, &chi)?;
    let residual = k_apply_pair(a, &u)?.sup();
    let mean_u = a.expectation_pair(&u);
    let second_moment = a.expectation_pair(&u.map(|v| v * v));
    Ok(MartingaleDecomposition {
        chi_sup: chi.sup(),
        u_sup: u.sup(),
        chi,
        u,
        n_trunc,
        tail_bound,
        residual,
        mean_u,
        second_moment,
    })
}

/// `u(s, s', x) = φ(s,x) + χ(s,x) − χ(s', T_s x)` at resolution `res·L`.
fn assemble_u(a: &Annealed, phi: &SymbolField, chi: &SymbolField) -> Result<PairField> {
    let m = a.symbols();
    let base = phi.add(chi);
    let fields = (0..m)
        .map(|s| {
            (0..m)
                .map(|t| {
                    let pulled = a.cocycle().pullback(s, chi.get(t))?;
                    Ok(base.get(s).refine_to(pulled.resolution()).sub(&pulled))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(PairField { fields })
}

/// `‖𝒦^i(φ·𝒦^jφ) − μ(𝒦^i(φ·𝒦^jφ))‖_∞` with `φ` centered.
pub fn second_order(a: &Annealed, i: usize, j: usize, phi: &SymbolField) -> Result<f64> {
    let phi = a.center(phi);
    let mut kj = phi.clone();
    for _ in 0..j {
        kj = k_apply(a, &kj)?;
    }
    let mut f = phi.mul(&kj);
    for _ in 0..i {
        f = k_apply(a, &f)?;
    }
    Ok(a.center(&f).sup())
}

/// Table `T[i][j]` of [`second_order`] for `i, j ≤ size`, computed with
/// shared iterates, plus the envelope `C(δ^k + γ_{⌊k/2⌋})` in
/// `k = max(i,j)` fitted on `k ≤ size/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderTable {
    pub values: Vec<Vec<f64>>,
    pub envelope: Envelope,
    pub worst_ratio: f64,
    pub dominated: bool,
}

pub fn second_order_table(a: &Annealed, phi: &SymbolField, size: usize, gamma: &[f64]) -> Result<SecondOrderTable> {
    let phi = a.center(phi);
    let mut kj = vec![phi.clone()];
    for j in 1..=size {
        kj.push(k_apply(a, &kj[j - 1])?);
    }
    let mut values = vec![vec![0.0; size + 1]; size + 1];
    for j in 0..=size {
        let mut f = phi.mul(&kj[j]);
        for i in 0..=size {
            if i > 0 {
                f = k_apply(a, &f)?;
            }
            values[i][j] = a.center(&f).sup();
        }
    }
    let by_k: Vec<f64> = (0..=size)
        .map(|k| (0..=size).flat_map(|i| (0..=size).map(move |j| (i, j))).filter(|(i, j)| (*i).max(*j) == k).map(|(i, j)| values[i][j]).fold(0.0, f64::max))
        .collect();
    let envelope = envelope_with_extra(&by_k, gamma);
    let bound: Vec<f64> = (0..=size).map(|k| envelope.eval(k, gamma[k])).collect();
    let worst_ratio = ratio_max(&by_k, &bound);
    let dominated = by_k.iter().zip(&bound).all(|(v, b)| *v <= b * (1.0 + 1e-12) + EXACT_FLOOR);
    Ok(SecondOrderTable { values, envelope, worst_ratio, dominated })
}

/// `P(|S_n| ≥ tn + a₁) ≤ 2·exp(−n t²/(4c²))` with `c ≥ ‖u‖_∞`.
///
/// The reverse-martingale part `M_n = Σ_{j<n} u∘τ^j` has increments bounded
/// by `c`, so Azuma–Hoeffding gives `2·exp(−n t²/(2c²))`; the exponent used
/// here keeps the extra factor 2 of the reference proof, which only
/// weakens the bound.
pub fn azuma_bound(dec: &MartingaleDecomposition, n: usize, t: f64) -> f64 {
    azuma_from_constant(dec.u_bound(), n, t)
}

pub fn azuma_from_constant(c: f64, n: usize, t: f64) -> f64 {
    if c == 0.0 {
        return if t > 0.0 { 0.0 } else { 2.0 };
    }
    2.0 * (-(n as f64) * t * t / (4.0 * c * c)).exp()
}
