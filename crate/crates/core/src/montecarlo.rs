//! Annealed Monte Carlo for Birkhoff sums and their statistical tests.
//!
//! The sampler never iterates floating-point `x`. At resolution `R` every
//! fiber map sends a cell affinely onto `k` whole cells, so if `x` is
//! uniform on its cell then `T x` is uniform on the image and, given the
//! cell it lands in, uniform on that cell. The cell sequence is therefore a
//! Markov chain that picks one of the `k` image cells uniformly, and since
//! `ĥ(ω_0)` and `φ` are constant on cells this reproduces the annealed law
//! of `S_n` exactly. (Floating-point iteration of the doubling map collapses
//! to 0 after ~53 steps.)

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annealed::Annealed;
use crate::error::{LabError, Result};
use crate::fields::{lcm, SymbolField};
use crate::stats::{clopper_pearson, dkw_radius, ks_distance_normal, mean, normal_cdf, normal_sf, quantile, standard_error};

/// Per-sample generator: stream `i` of the ChaCha8 keyed by `seed`, so
/// results do not depend on how samples are split across workers.
pub fn sample_rng(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}

fn unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn pick(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|c| u < *c).unwrap_or(cdf.len() - 1)
}

#[derive(Debug, Clone)]
pub struct Sampler {
    res: usize,
    symbols: usize,
    pi_cdf: Vec<f64>,
    p_cdf: Vec<Vec<f64>>,
    h_cdf: Vec<Vec<f64>>,
    /// `images[s][c] = (start, k)`.
    images: Vec<Vec<(u32, u32)>>,
    /// `phi[s * res + c]`.
    phi: Vec<f64>,
}

fn cumsum(xs: &[f64]) -> Vec<f64> {
    let total: f64 = xs.iter().sum();
    let mut acc = 0.0;
    let mut out: Vec<f64> = xs
        .iter()
        .map(|x| {
            acc += x / total;
            acc
        })
        .collect();
    *out.last_mut().unwrap() = 1.0;
    out
}

/// What to record along each orbit besides `S_n`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub track_max: bool,
    /// Times `m` at which `S_m` is recorded.
    pub snapshots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub n: usize,
    pub count: usize,
    pub seed: u64,
    pub values: Vec<f64>,
    pub max_abs: Option<Vec<f64>>,
    pub snapshot_times: Vec<usize>,
    /// `snapshots[i][j]` = `S_{times[j]}` of sample `i`.
    pub snapshots: Option<Vec<Vec<f64>>>,
    pub config_hash: Option<String>,
}

impl Sampler {
    pub fn new(a: &Annealed, phi: &SymbolField) -> Result<Self> {
        let res = lcm(phi.resolution(), a.cocycle().resolution());
        let m = a.symbols();
        if phi.symbols() != m {
            return Err(LabError::UnknownSymbol(phi.symbols().min(m)));
        }
        let mut h_cdf = Vec::with_capacity(m);
        for s in 0..m {
            let h = a.hhat().get(s).refine_to(res);
            let min = h.min();
            if min < -1e-12 || h.integral() <= 0.0 {
                return Err(LabError::DegenerateDensity { min, threshold: 0.0 });
            }
            h_cdf.push(cumsum(&h.values().iter().map(|v| v.max(0.0)).collect::<Vec<_>>()));
        }
        let images = (0..m)
            .map(|s| {
                Ok(a.cocycle()
                    .matrix_at(s, res)?
                    .images()
                    .iter()
                    .map(|(st, k)| (*st as u32, *k as u32))
                    .collect())
            })
            .collect::<Result<_>>()?;
        let phi_r = phi.refine_to(res);
        let phi = (0..m).flat_map(|s| phi_r.get(s).values().to_vec()).collect();
        let chain = a.chain();
        Ok(Sampler {
            res,
            symbols: m,
            pi_cdf: cumsum(&chain.pi),
            p_cdf: chain.p.iter().map(|r| cumsum(r)).collect(),
            h_cdf,
            images,
            phi,
        })
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    #[inline]
    fn start(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let s = pick(&self.pi_cdf, unit_f64(rng));
        let c = pick(&self.h_cdf[s], unit_f64(rng));
        (s, c)
    }

    #[inline]
    fn advance(&self, s: usize, c: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let (start, k) = self.images[s][c];
        let c2 = if k == 1 { start } else { start + rng.random_range(0..k) } as usize;
        let s2 = if self.symbols == 1 { 0 } else { pick(&self.p_cdf[s], unit_f64(rng)) };
        (s2, c2)
    }

    #[inline]
    fn value(&self, s: usize, c: usize) -> f64 {
        self.phi[s * self.res + c]
    }

    /// `φ(ω_t, x_t)` for `t = 0..len` along one orbit.
    pub fn orbit_values(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let (mut s, mut c) = self.start(rng);
        out.push(self.value(s, c));
        for _ in 1..len {
            (s, c) = self.advance(s, c, rng);
            out.push(self.value(s, c));
        }
        out
    }

    fn one(&self, n: usize, rng: &mut ChaCha8Rng, opts: &SampleOptions) -> (f64, f64, Vec<f64>) {
        let mut snaps = Vec::with_capacity(opts.snapshots.len());
        let mut next_snap = 0;
        let mut sum = 0.0;
        let mut max: f64 = 0.0;
        let record = |t: usize, sum: f64, snaps: &mut Vec<f64>, next: &mut usize| {
            while *next < opts.snapshots.len() && opts.snapshots[*next] == t {
                snaps.push(sum);
                *next += 1;
            }
        };
        record(0, 0.0, &mut snaps, &mut next_snap);
        if n > 0 {
            let (mut s, mut c) = self.start(rng);
            for t in 0..n {
                if t > 0 {
                    (s, c) = self.advance(s, c, rng);
                }
                sum += self.value(s, c);
                if opts.track_max {
                    max = max.max(sum.abs());
                }
                record(t + 1, sum, &mut snaps, &mut next_snap);
            }
        }
        (sum, max, snaps)
    }

    /// `count` independent draws of `S_n` under the annealed law.
    pub fn sample_sn(&self, n: usize, count: usize, seed: u64) -> SampleBatch {
        self.sample_with(n, count, seed, &SampleOptions::default())
    }

    pub fn sample_with(&self, n: usize, count: usize, seed: u64, opts: &SampleOptions) -> SampleBatch {
        let mut opts = opts.clone();
        opts.snapshots.sort_unstable();
        opts.snapshots.retain(|t| *t <= n);
        let rows: Vec<(f64, f64, Vec<f64>)> = (0..count as u64)
            .into_par_iter()
            .map(|i| self.one(n, &mut sample_rng(seed, i), &opts))
            .collect();
        let values = rows.iter().map(|r| r.0).collect();
        let max_abs = opts.track_max.then(|| rows.iter().map(|r| r.1).collect());
        let snapshots = (!opts.snapshots.is_empty()).then(|| rows.into_iter().map(|r| r.2).collect());
        SampleBatch { n, count, seed, values, max_abs, snapshot_times: opts.snapshots, snapshots, config_hash: None }
    }
}

/// Sample moment `E[S^p]` with its standard error against an exact value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub p: usize,
    pub sample: f64,
    pub exact: f64,
    pub se: f64,
    pub pass: bool,
}

/// Compares sample moments `p = 1..` with `exact[p]` at `k_se` standard
/// errors.
pub fn moment_gate(batch: &SampleBatch, exact: &[f64], k_se: f64) -> Vec<MomentCheck> {
    (1..exact.len())
        .map(|p| {
            let pw: Vec<f64> = batch.values.iter().map(|v| v.powi(p as i32)).collect();
            let sample = mean(&pw);
            let se = standard_error(&pw);
            MomentCheck { p, sample, exact: exact[p], se, pass: (sample - exact[p]).abs() <= k_se * se + 1e-12 }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub n: usize,
    pub ks: f64,
    pub dkw: f64,
}

/// KS distance of `S_n/scale` from the standard normal, with the DKW radius
/// at level `alpha`.
pub fn ks_test(batch: &SampleBatch, scale: f64, alpha: f64) -> Result<KsResult> {
    if !(scale > 0.0) {
        return Err(LabError::ZeroVariance);
    }
    let z: Vec<f64> = batch.values.iter().map(|v| v / scale).collect();
    Ok(KsResult { n: batch.n, ks: ks_distance_normal(&z), dkw: dkw_radius(batch.count, alpha) })
}

/// Berry–Esseen exponent `1/(2+4γ)`.
pub fn berry_esseen_exponent(gamma: f64) -> f64 {
    1.0 / (2.0 + 4.0 * gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerryEsseenFit {
    pub exponent: f64,
    /// Smallest `C` with `KS(n) ≤ C n^{−exponent} + DKW` on the grid.
    pub c: f64,
    /// `KS(n_{i+1}) ≤ KS(n_i) + DKW` for consecutive grid points.
    pub decreasing: bool,
}

pub fn berry_esseen_fit(rows: &[KsResult], gamma: f64) -> BerryEsseenFit {
    let exponent = berry_esseen_exponent(gamma);
    let c = rows
        .iter()
        .map(|r| (r.ks - r.dkw).max(0.0) * (r.n as f64).powf(exponent))
        .fold(0.0, f64::max);
    let decreasing = rows.windows(2).all(|w| w[1].ks <= w[0].ks + w[1].dkw.max(w[0].dkw));
    BerryEsseenFit { exponent, c, decreasing }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub n: usize,
    pub t: f64,
    pub threshold: f64,
    pub hits: usize,
    pub count: usize,
    pub upper: f64,
    pub bound: f64,
    /// False when `bound` is below the Clopper–Pearson upper limit of zero
    /// hits, so no sample of this size could confirm it.
    pub resolved: bool,
    pub pass: bool,
}

/// Empirical `P(|S_n| ≥ t n + a₁)` with Clopper–Pearson upper limits against
/// `bound(n, t)`. Rows below the resolution of the batch pass only if they
/// have no hits.
pub fn concentration_test(batch: &SampleBatch, ts: &[f64], a1: f64, alpha: f64, bound: impl Fn(usize, f64) -> f64) -> Vec<TailRow> {
    ts.iter()
        .map(|&t| {
            let threshold = t * batch.n as f64 + a1;
            let hits = batch.values.iter().filter(|v| v.abs() >= threshold).count();
            let (_, upper) = clopper_pearson(hits, batch.count, alpha);
            let b = bound(batch.n, t);
            let floor = clopper_pearson(0, batch.count, alpha).1;
            let resolved = b >= floor;
            let pass = if resolved { upper <= b } else { hits == 0 };
            TailRow { n: batch.n, t, threshold, hits, count: batch.count, upper, bound: b, resolved, pass }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModDevRow {
    pub n: usize,
    pub a_n: f64,
    pub hits: usize,
    pub count: usize,
    pub rate: f64,
    pub rate_lo: f64,
    pub rate_hi: f64,
    /// `(1/a_n²) ln P(Z ∈ [a·a_n, b·a_n])` for standard normal `Z`.
    pub gaussian_exact: f64,
    /// The same statistic on `count` simulated standard normals.
    pub gaussian_simulated: f64,
    pub target: f64,
}

/// Moderate-deviation rate `(1/a_n²) ln P(S_n/(s√n a_n) ∈ [a,b])` for
/// `a_n = n^θ`, together with its Gaussian benchmarks. Fails early when the
/// Gaussian approximation predicts fewer than 200 hits.
pub fn moddev_test(sampler: &Sampler, s: f64, n: usize, theta: f64, interval: (f64, f64), count: usize, seed: u64, alpha: f64) -> Result<(ModDevRow, SampleBatch)> {
    if !(s > 0.0) {
        return Err(LabError::ZeroVariance);
    }
    let a_n = (n as f64).powf(theta);
    let expected = gaussian_mass(a_n, interval) * count as f64;
    if expected < 200.0 {
        return Err(LabError::TooFewHits { expected, required: 200.0 });
    }
    let batch = sampler.sample_sn(n, count, seed);
    Ok((moddev_from_batch(&batch, s, theta, interval, alpha), batch))
}

fn gaussian_mass(a_n: f64, (a, b): (f64, f64)) -> f64 {
    normal_cdf(b * a_n) - normal_cdf(a * a_n)
}

pub fn moddev_from_batch(batch: &SampleBatch, s: f64, theta: f64, interval: (f64, f64), alpha: f64) -> ModDevRow {
    let (a, b) = interval;
    let n = batch.n;
    let count = batch.count;
    let a_n = (n as f64).powf(theta);
    let scale = s * (n as f64).sqrt() * a_n;
    let inside = |w: f64| w >= a && w <= b;
    let hits = batch.values.iter().filter(|v| inside(**v / scale)).count();
    let rate_of = |p: f64| p.ln() / (a_n * a_n);
    let (lo, hi) = clopper_pearson(hits, count, alpha);
    let sim_hits = (0..count as u64)
        .into_par_iter()
        .filter(|i| {
            let z: f64 = sample_rng(batch.seed ^ 0x5eed_6a55, *i).sample(StandardNormal);
            inside(z / a_n)
        })
        .count();
    let target = -(if a <= 0.0 && b >= 0.0 { 0.0 } else { a.abs().min(b.abs()).powi(2) / 2.0 });
    ModDevRow {
        n,
        a_n,
        hits,
        count,
        rate: rate_of(hits as f64 / count as f64),
        rate_lo: rate_of(lo),
        rate_hi: rate_of(hi),
        gaussian_exact: rate_of(gaussian_mass(a_n, interval)),
        gaussian_simulated: rate_of(sim_hits as f64 / count as f64),
        target,
    }
}

/// Fitted `a₅` in `|ln(P(Z_n ≥ x)/(1 − Φ(x)))| ≤ a₅(1+x³) n^{−exponent}`
/// over `x ∈ xs`, where `Z_n = S_n/(s√n)`. Returns `(a₅, per-x log ratios)`.
pub fn tail_ratio_fit(batch: &SampleBatch, s: f64, xs: &[f64], exponent: f64) -> (f64, Vec<f64>) {
    let scale = s * (batch.n as f64).sqrt();
    let ratios: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let p = batch.values.iter().filter(|v| **v / scale >= x).count() as f64 / batch.count as f64;
            (p / normal_sf(x)).ln()
        })
        .collect();
    let a5 = xs
        .iter()
        .zip(&ratios)
        .map(|(x, r)| r.abs() / ((1.0 + x.powi(3)) * (batch.n as f64).powf(-exponent)))
        .fold(0.0, f64::max);
    (a5, ratios)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcltReport {
    pub times: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub cov_se: Vec<Vec<f64>>,
    pub expected: Vec<Vec<f64>>,
    /// Correlations of consecutive disjoint increments, with standard errors.
    pub increment_corr: Vec<(f64, f64)>,
    /// `(lhs, lhs_se, C·span²)` of the fourth-moment tightness display for
    /// consecutive increment pairs.
    pub tightness: Vec<(f64, f64, f64)>,
    pub cov_pass: bool,
    pub increments_pass: bool,
    pub tightness_pass: bool,
}

/// Covariances of `𝓢_n(t) = S_{⌊tn⌋}/√n` on `times` against `s²·min(t_i,t_j)`,
/// increment decorrelation, and the fourth-moment tightness display with
/// constant `c4 = sup_m E[S_m⁴]/m²`.
pub fn functional_clt_test(sampler: &Sampler, s2: f64, c4: f64, n: usize, times: &[f64], count: usize, seed: u64, k_se: f64) -> FcltReport {
    let steps: Vec<usize> = times.iter().map(|t| (t * n as f64).floor() as usize).collect();
    let batch = sampler.sample_with(n, count, seed, &SampleOptions { track_max: false, snapshots: steps.clone() });
    let snaps = batch.snapshots.unwrap();
    let root = (n as f64).sqrt();
    let col = |j: usize| -> Vec<f64> {
        let pos = batch.snapshot_times.iter().position(|t| *t == steps[j]).unwrap();
        snaps.iter().map(|r| r[pos] / root).collect()
    };
    let cols: Vec<Vec<f64>> = (0..times.len()).map(col).collect();
    let d = times.len();
    let mut cov = vec![vec![0.0; d]; d];
    let mut cov_se = vec![vec![0.0; d]; d];
    let mut expected = vec![vec![0.0; d]; d];
    let mut cov_pass = true;
    for i in 0..d {
        for j in 0..d {
            // the exact mean is 0, so raw second moments are the covariances
            let prods: Vec<f64> = cols[i].iter().zip(&cols[j]).map(|(x, y)| x * y).collect();
            cov[i][j] = mean(&prods);
            cov_se[i][j] = standard_error(&prods);
            expected[i][j] = s2 * (steps[i].min(steps[j]) as f64 / n as f64);
            cov_pass &= (cov[i][j] - expected[i][j]).abs() <= k_se * cov_se[i][j] + 1e-12;
        }
    }
    let mut increment_corr = Vec::new();
    let mut tightness = Vec::new();
    let mut increments_pass = true;
    let mut tightness_pass = true;
    for w in 0..d.saturating_sub(2) {
        let a: Vec<f64> = cols[w + 1].iter().zip(&cols[w]).map(|(x, y)| x - y).collect();
        let b: Vec<f64> = cols[w + 2].iter().zip(&cols[w + 1]).map(|(x, y)| x - y).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let sa = (mean(&a.iter().map(|x| x * x).collect::<Vec<_>>())).sqrt();
        let sb = (mean(&b.iter().map(|x| x * x).collect::<Vec<_>>())).sqrt();
        let corr = mean(&ab) / (sa * sb);
        let se = standard_error(&ab) / (sa * sb);
        // increments of a mixing sum are correlated only through the boundary, O(1/n)
        increments_pass &= corr.abs() <= k_se * se + 1.0 / n as f64 * 10.0;
        increment_corr.push((corr, se));
        let a2b2: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * x * y * y).collect();
        let span = (steps[w + 2] - steps[w]) as f64 / n as f64;
        let rhs = c4 * span * span;
        let lhs = mean(&a2b2);
        let lhs_se = standard_error(&a2b2);
        tightness_pass &= lhs <= rhs + k_se * lhs_se;
        tightness.push((lhs, lhs_se, rhs));
    }
    FcltReport { times: times.to_vec(), cov, cov_se, expected, increment_corr, tightness, cov_pass, increments_pass, tightness_pass }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxMomentRow {
    pub n: usize,
    pub p: usize,
    pub ratio: f64,
    pub lo: f64,
    pub hi: f64,
}

/// `‖max_{k≤n}|S_k|‖_p/√n` with a percentile bootstrap interval.
pub fn maximal_moment_test(sampler: &Sampler, n: usize, ps: &[usize], count: usize, seed: u64, alpha: f64) -> Vec<MaxMomentRow> {
    let batch = sampler.sample_with(n, count, seed, &SampleOptions { track_max: true, snapshots: vec![] });
    let maxes = batch.max_abs.unwrap();
    let root = (n as f64).sqrt();
    ps.iter()
        .map(|&p| {
            let stat = |xs: &mut dyn Iterator<Item = f64>| -> f64 {
                let (sum, cnt) = xs.fold((0.0, 0usize), |(s, c), x| (s + x.powi(p as i32), c + 1));
                (sum / cnt as f64).powf(1.0 / p as f64) / root
            };
            let ratio = stat(&mut maxes.iter().copied());
            let boots: Vec<f64> = (0..200u64)
                .into_par_iter()
                .map(|b| {
                    let mut rng = sample_rng(seed ^ 0xb007, b);
                    stat(&mut (0..count).map(|_| maxes[rng.random_range(0..count)]))
                })
                .collect();
            MaxMomentRow { n, p, ratio, lo: quantile(&boots, alpha / 2.0), hi: quantile(&boots, 1.0 - alpha / 2.0) }
        })
        .collect()
}

/// Integer polynomial `q(m) = Σ_i coeffs[i]·m^i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poly(pub Vec<i64>);

impl Poly {
    pub fn eval(&self, m: usize) -> i64 {
        self.0.iter().rev().fold(0i64, |acc, c| acc * m as i64 + c)
    }
}

pub const NONCONV_HORIZON: i64 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonconvBatch {
    pub values: Vec<f64>,
    pub standardized: Vec<f64>,
    /// KS distance of the standardized batch from `N(0,1)`; exploratory.
    pub ks: f64,
}

/// `S_n = Σ_{m=1}^{n} Π_j φ∘τ^{q_j(m)}` along sampled orbits.
pub fn nonconventional_sample(sampler: &Sampler, polys: &[Poly], n: usize, count: usize, seed: u64) -> Result<NonconvBatch> {
    let mut horizon = 0;
    for q in polys {
        for m in 1..=n {
            let v = q.eval(m);
            if v < 0 {
                return Err(LabError::ConfigInvalid(format!("q({m}) = {v} is negative")));
            }
            if m > 1 && v <= q.eval(m - 1) {
                return Err(LabError::ConfigInvalid("polynomials must be increasing".into()));
            }
            horizon = horizon.max(v);
        }
    }
    if horizon > NONCONV_HORIZON {
        return Err(LabError::HorizonTooLarge { horizon: horizon as usize, limit: NONCONV_HORIZON as usize });
    }
    let values: Vec<f64> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let orbit = sampler.orbit_values(horizon as usize + 1, &mut sample_rng(seed, i));
            (1..=n).map(|m| polys.iter().map(|q| orbit[q.eval(m) as usize]).product::<f64>()).sum()
        })
        .collect();
    let mu = mean(&values);
    let sd = crate::stats::variance(&values).sqrt();
    let standardized: Vec<f64> = if sd > 0.0 { values.iter().map(|v| (v - mu) / sd).collect() } else { vec![0.0; values.len()] };
    let ks = ks_distance_normal(&standardized);
    Ok(NonconvBatch { values, standardized, ks })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChfGap {
    pub k: usize,
    pub gap: f64,
    pub se: f64,
}

/// `|E e^{i(t_a X + t_b Y)} − E e^{i t_a X}·E e^{i t_b Y}|` where `X` sums `φ∘τ^i`
/// over the first `len_a` times and `Y` over `len_b` times starting `k`
/// after the end of the first block. The standard error comes from 20
/// batch replicates.
pub fn chf_decorrelation(sampler: &Sampler, len_a: usize, len_b: usize, k: usize, t_a: f64, t_b: f64, count: usize, seed: u64) -> ChfGap {
    let total = len_a + k + len_b;
    let pairs: Vec<(f64, f64)> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let orbit = sampler.orbit_values(total, &mut sample_rng(seed, i));
            (orbit[..len_a].iter().sum(), orbit[len_a + k..].iter().sum())
        })
        .collect();
    let gap_of = |xs: &[(f64, f64)]| -> f64 {
        let c = xs.len() as f64;
        let (mut j, mut a, mut b) = ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0));
        for (x, y) in xs {
            let (sj, cj) = (t_a * x + t_b * y).sin_cos();
            let (sa, ca) = (t_a * x).sin_cos();
            let (sb, cb) = (t_b * y).sin_cos();
            j = (j.0 + cj, j.1 + sj);
            a = (a.0 + ca, a.1 + sa);
            b = (b.0 + cb, b.1 + sb);
        }
        let (j, a, b) = ((j.0 / c, j.1 / c), (a.0 / c, a.1 / c), (b.0 / c, b.1 / c));
        let prod = (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0);
        ((j.0 - prod.0).powi(2) + (j.1 - prod.1).powi(2)).sqrt()
    };
    let gap = gap_of(&pairs);
    let chunk = count.div_ceil(20).max(1);
    let reps: Vec<f64> = pairs.chunks(chunk).map(gap_of).collect();
    let se = crate::stats::variance(&reps).sqrt() / (reps.len() as f64).sqrt();
    ChfGap { k, gap, se }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driving::SymbolChain;
    use crate::fibers::families::*;
    use crate::fields::GridFunction;
    use crate::operators::Cocycle;

    fn markov() -> Annealed {
        let chain = SymbolChain::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        Annealed::new(Cocycle::new(chain, vec![doubling(), three_cell()], 6).unwrap()).unwrap()
    }

    fn phi(a: &Annealed) -> SymbolField {
        a.center(&SymbolField::new(vec![
            GridFunction::new(vec![1.0, -0.5, 0.25, 0.0, 0.7, -1.0]),
            GridFunction::new(vec![-0.3, 0.8, -1.0, 0.4, 0.1, 0.2]),
        ]))
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let a = markov();
        let s = Sampler::new(&a, &phi(&a)).unwrap();
        let b1 = s.sample_sn(30, 500, 7);
        let b2 = s.sample_sn(30, 500, 7);
        assert_eq!(b1, b2);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b3 = pool.install(|| s.sample_sn(30, 500, 7));
        assert_eq!(b1.values, b3.values);
        assert_ne!(b1.values, s.sample_sn(30, 500, 8).values);
    }

    #[test]
    fn symbol_constant_observable_has_mean_zero() {
        let a = markov();
        let f = a.center(&SymbolField::symbol_constants(&[1.0, -1.0], 6));
        let s = Sampler::new(&a, &f).unwrap();
        let b = s.sample_sn(20, 20000, 1);
        let se = standard_error(&b.values);
        assert!(mean(&b.values).abs() <= 4.0 * se);
    }

    #[test]
    fn moments_match_exact_annealed_values() {
        let a = markov();
        let f = phi(&a);
        let s = Sampler::new(&a, &f).unwrap();
        let batch = s.sample_sn(20, 200_000, 11);
        let exact = a.moments_cumulants(&f, 20, 4).unwrap().moments;
        for m in moment_gate(&batch, &exact, 4.0) {
            assert!(m.pass, "{m:?}");
        }
    }

    #[test]
    fn expectation_matches_sampler_at_single_time() {
        // E_μ[g] at time 0 and the ĥ draw
        let a = markov();
        let g = SymbolField::new(vec![GridFunction::indicator(6, 0, 2), GridFunction::indicator(6, 3, 6).scale(2.0)]);
        let s = Sampler::new(&a, &g).unwrap();
        let b = s.sample_sn(1, 100_000, 5);
        let se = standard_error(&b.values);
        assert!((mean(&b.values) - a.expectation(&g)).abs() <= 4.0 * se);
    }

    #[test]
    fn ks_edge_cases() {
        let batch = SampleBatch { n: 1, count: 100, seed: 0, values: vec![0.0; 100], max_abs: None, snapshot_times: vec![], snapshots: None, config_hash: None };
        assert!((ks_test(&batch, 1.0, 0.01).unwrap().ks - 0.5).abs() < 1e-12);
        assert_eq!(ks_test(&batch, 0.0, 0.01).unwrap_err(), LabError::ZeroVariance);
        let values: Vec<f64> = (0..100_000u64).map(|i| sample_rng(3, i).sample(StandardNormal)).collect();
        let normal = SampleBatch { count: values.len(), values, ..batch };
        let r = ks_test(&normal, 1.0, 0.01).unwrap();
        assert!(r.ks <= r.dkw, "{r:?}");
        assert!((berry_esseen_exponent(1.0) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn concentration_trivial_rows() {
        let a = markov();
        let f = phi(&a);
        let s = Sampler::new(&a, &f).unwrap();
        let b = s.sample_sn(100, 2000, 2);
        let rows = concentration_test(&b, &[0.0, 5.0], 0.0, 0.01, |n, t| crate::martingale::azuma_from_constant(1.0, n, t));
        assert!(rows[0].bound >= 1.0 && rows[0].pass);
        assert_eq!(rows[1].hits, 0);
        assert!(!rows[1].resolved && rows[1].pass);
    }

    #[test]
    fn moddev_requires_enough_hits() {
        let a = markov();
        let f = phi(&a);
        let s = Sampler::new(&a, &f).unwrap();
        let err = moddev_test(&s, 1.0, 10_000, 0.1, (1.0, 2.0), 1000, 1, 0.01).unwrap_err();
        assert!(matches!(err, LabError::TooFewHits { .. }));
        let (row, _) = moddev_test(&s, 1.0, 100, 0.1, (-1.0, 1.0), 1000, 1, 0.01).unwrap();
        assert_eq!(row.target, 0.0);
    }

    #[test]
    fn nonconventional_regressions() {
        let a = markov();
        let f = phi(&a);
        let s = Sampler::new(&a, &f).unwrap();
        let ordinary = nonconventional_sample(&s, &[Poly(vec![-1, 1])], 25, 300, 4).unwrap();
        assert_eq!(ordinary.values, s.sample_sn(25, 300, 4).values);
        let bounded = nonconventional_sample(&s, &[Poly(vec![0, 1]), Poly(vec![0, 2])], 40, 200, 5).unwrap();
        let sup = f.sup();
        assert!(bounded.values.iter().all(|v| v.abs() <= 40.0 * sup * sup));
        assert_eq!(bounded, nonconventional_sample(&s, &[Poly(vec![0, 1]), Poly(vec![0, 2])], 40, 200, 5).unwrap());
        let err = nonconventional_sample(&s, &[Poly(vec![0, 0, 1])], 400, 1, 0).unwrap_err();
        assert!(matches!(err, LabError::HorizonTooLarge { .. }));
    }

    #[test]
    fn chf_gap_zero_at_origin() {
        let a = markov();
        let s = Sampler::new(&a, &phi(&a)).unwrap();
        assert_eq!(chf_decorrelation(&s, 3, 3, 2, 0.0, 0.0, 1000, 1).gap, 0.0);
    }

    #[test]
    fn maximal_moments_of_zero_observable() {
        let a = markov();
        let s = Sampler::new(&a, &SymbolField::constant(2, 6, 0.0)).unwrap();
        let rows = maximal_moment_test(&s, 50, &[2, 4], 100, 1, 0.05);
        assert!(rows.iter().all(|r| r.ratio == 0.0));
    }
}
