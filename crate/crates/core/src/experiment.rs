//! Orchestration of the per-command checks behind the CLI.
//!
//! Every command returns verdict blocks (statistic, bound, statistical
//! slack, pass), CSV series and free-form JSON blocks. Report assembly is
//! single-threaded; sampling inside commands is parallel.

use std::fmt::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::annealed::{coboundary, Annealed, MultiCorrelation, ProMultEnvelope, VarianceEstimate, DEGENERACY_THRESHOLD, PRODUCT_HORIZON};
use crate::config::{ExperimentConfig, ObservableSpec};
use crate::driving::MixingProfile;
use crate::error::{LabError, Result};
use crate::fields::{GridFunction, SymbolField};
use crate::martingale::{azuma_bound, build_decomposition, duality_certificate, k_decay, second_order_table};
use crate::montecarlo::{
    berry_esseen_exponent, berry_esseen_fit, chf_decorrelation, concentration_test, functional_clt_test, ks_test, maximal_moment_test, moddev_test, moment_gate,
    nonconventional_sample, tail_ratio_fit, Poly, Sampler,
};
use crate::operators::{decay_exp1, decay_exp2, envelope_check, fit_decay, k_series_along_path, temperedness_check, Cocycle, EXACT_FLOOR};
use crate::stats::mean;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Profile {
    pub name: &'static str,
    /// Standard errors allowed in moment and covariance comparisons.
    pub k_se: f64,
    /// Level of DKW radii, Clopper–Pearson and bootstrap intervals.
    pub alpha: f64,
}

impl Profile {
    pub const DEFAULT: Profile = Profile { name: "default", k_se: 4.0, alpha: 0.01 };
    pub const STRICT: Profile = Profile { name: "strict", k_se: 3.0, alpha: 0.05 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub test: String,
    pub params: Value,
    pub statistic: f64,
    pub relation: String,
    pub bound: f64,
    /// Statistical or numerical allowance added to `bound`.
    pub slack: f64,
    pub pass: bool,
}

impl Verdict {
    /// Passes iff `statistic ≤ bound + slack`.
    pub fn at_most(test: &str, params: Value, statistic: f64, bound: f64, slack: f64) -> Self {
        let pass = statistic <= bound + slack;
        Verdict { test: test.into(), params, statistic, relation: "<=".into(), bound, slack, pass }
    }

    /// Passes iff `statistic ≥ bound − slack`.
    pub fn at_least(test: &str, params: Value, statistic: f64, bound: f64, slack: f64) -> Self {
        let pass = statistic >= bound - slack;
        Verdict { test: test.into(), params, statistic, relation: ">=".into(), bound, slack, pass }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandOutput {
    pub verdicts: Vec<Verdict>,
    /// `(file name, CSV text)`.
    pub series: Vec<(String, String)>,
    pub blocks: serde_json::Map<String, Value>,
}

impl CommandOutput {
    pub fn pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    fn block(&mut self, name: &str, value: Value) {
        self.blocks.insert(name.into(), value);
    }

    fn csv(&mut self, name: &str, header: &str, rows: impl IntoIterator<Item = Vec<f64>>) {
        let mut s = format!("{header}\n");
        for row in rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        self.series.push((name.into(), s));
    }
}

pub const COMMANDS: [&str; 13] =
    ["mix-coeffs", "decay", "variance", "cumulants", "clt", "concentration", "moddev", "fclt", "martingale", "multicorr", "rosenthal", "nonconv", "chf-decor"];

/// Commands whose sampling is preceded by the moment gate.
const DISTRIBUTIONAL: [&str; 7] = ["clt", "concentration", "moddev", "fclt", "rosenthal", "nonconv", "chf-decor"];

/// Commands that standardize by `s` and are meaningless when `s² = 0`.
const NEEDS_VARIANCE: [&str; 4] = ["clt", "moddev", "fclt", "rosenthal"];

fn sub_seed(seed: u64, tag: &str) -> u64 {
    tag.bytes().fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Everything a command needs, built once from a config.
pub struct Lab {
    pub config: ExperimentConfig,
    pub annealed: Annealed,
    /// Centered observable.
    pub phi: SymbolField,
    pub components: Option<Vec<SymbolField>>,
    pub variance: VarianceEstimate,
    pub profile: Profile,
    sampler: OnceLock<Sampler>,
}

fn resolve_observable(spec: &ObservableSpec, cocycle: &Cocycle, field: &str) -> Result<SymbolField> {
    match spec {
        ObservableSpec::Coboundary { coboundary: r } => {
            if r.values.len() != r.n || r.n == 0 {
                return Err(LabError::ConfigInvalid(format!("{field}.coboundary.values: {} values for N = {}", r.values.len(), r.n)));
            }
            coboundary(cocycle, &GridFunction::new(r.values.clone()))
        }
        other => Ok(ExperimentConfig::observable_fields(other, cocycle.symbols(), field)?.expect("per-symbol observable")),
    }
}

impl Lab {
    pub fn new(config: ExperimentConfig, profile: Profile) -> Result<Self> {
        let chain = config.build_chain()?;
        let maps = config.build_maps()?;
        if maps.len() != chain.len() {
            return Err(LabError::ConfigInvalid(format!("maps: {} maps for {} chain states", maps.len(), chain.len())));
        }
        let cocycle = Cocycle::new(chain, maps, config.n).map_err(|e| match e {
            LabError::ResolutionMismatch { .. } => LabError::ConfigInvalid(format!("N: {e}")),
            other => other,
        })?;
        let phi = resolve_observable(&config.observable, &cocycle, "observable")?;
        let components = match &config.vector_observable {
            None => None,
            Some(specs) => Some(
                specs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| resolve_observable(s, &cocycle, &format!("vector_observable[{i}]")))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let annealed = Annealed::new(cocycle)?;
        let phi = annealed.center(&phi);
        let variance = annealed.asymptotic_variance(&phi, config.experiments.variance.n_tail)?;
        Ok(Lab { config, annealed, phi, components, variance, profile, sampler: OnceLock::new() })
    }

    pub fn sampler(&self) -> Result<&Sampler> {
        if let Some(s) = self.sampler.get() {
            return Ok(s);
        }
        let s = Sampler::new(&self.annealed, &self.phi)?;
        Ok(self.sampler.get_or_init(|| s))
    }

    pub fn degenerate(&self) -> bool {
        self.variance.s2 <= DEGENERACY_THRESHOLD
    }

    fn s(&self) -> Result<f64> {
        if self.degenerate() {
            Err(LabError::ZeroVariance)
        } else {
            Ok(self.variance.s2.sqrt())
        }
    }

    /// Runs one command (not `all`).
    pub fn command(&self, name: &str, seed: u64) -> Result<CommandOutput> {
        if NEEDS_VARIANCE.contains(&name) && self.degenerate() {
            return Err(LabError::ZeroVariance);
        }
        let seed = sub_seed(seed, name);
        match name {
            "gate" => self.gate(seed),
            "mix-coeffs" => self.mix_coeffs(),
            "decay" => self.decay(seed),
            "variance" => self.variance_cmd(),
            "cumulants" => self.cumulants(),
            "clt" => self.clt(seed),
            "concentration" => self.concentration(seed),
            "moddev" => self.moddev(seed),
            "fclt" => self.fclt(seed),
            "martingale" => self.martingale(seed),
            "multicorr" => self.multicorr(seed),
            "rosenthal" => self.rosenthal(seed),
            "nonconv" => self.nonconv(seed),
            "chf-decor" => self.chf(seed),
            other => Err(LabError::ConfigInvalid(format!("command: unknown command {other}"))),
        }
    }

    /// Sample moments `p ≤ 4` of `S_n` against the exact recursion.
    pub fn gate(&self, seed: u64) -> Result<CommandOutput> {
        let p = &self.config.experiments.gate;
        let exact = self.annealed.moments_cumulants(&self.phi, p.n, 4)?.moments;
        let batch = self.sampler()?.sample_sn(p.n, p.count, seed);
        let mut out = CommandOutput::default();
        for c in moment_gate(&batch, &exact, self.profile.k_se) {
            out.verdicts.push(Verdict::at_most(
                &format!("moment_gate_p{}", c.p),
                json!({"n": p.n, "count": p.count, "p": c.p, "exact": c.exact, "sample": c.sample, "se": c.se}),
                (c.sample - c.exact).abs(),
                0.0,
                self.profile.k_se * c.se + 1e-12,
            ));
        }
        Ok(out)
    }

    fn mix_coeffs(&self) -> Result<CommandOutput> {
        let n_max = self.config.experiments.mix.n_max;
        let prof = MixingProfile::compute(self.annealed.chain(), n_max);
        let mut out = CommandOutput::default();
        let violation = (0..n_max)
            .map(|i| (prof.alpha[i] - prof.phi_r[i]).max(prof.phi_r[i] - prof.psi[i]))
            .fold(0.0, f64::max);
        out.verdicts.push(Verdict::at_most("mixing_ordering", json!({"n_max": n_max}), violation, 0.0, 1e-12));
        out.csv("mix_coeffs.csv", "n,alpha,phi_r,psi", (0..n_max).map(|i| vec![(i + 1) as f64, prof.alpha[i], prof.phi_r[i], prof.psi[i]]));
        out.block("rate", serde_json::to_value(prof.rate).unwrap());
        out.block("alpha_is_bound", json!(prof.alpha_is_bound));
        Ok(out)
    }

    fn decay(&self, seed: u64) -> Result<CommandOutput> {
        let p = &self.config.experiments.decay;
        let cocycle = self.annealed.cocycle();
        let mut out = CommandOutput::default();
        let exp1 = decay_exp1(cocycle, p.n_max, p.paths, seed)?;
        out.series.push(("decay_exp1.csv".into(), exp1.to_csv()));
        let largest = exp1.max.iter().copied().fold(0.0, f64::max);
        let mut lambda = None;
        if largest <= EXACT_FLOOR {
            out.verdicts.push(Verdict::at_most("exp1_identically_zero", json!({"paths": p.paths}), largest, 0.0, EXACT_FLOOR));
        } else {
            let from = 2.min(p.n_max);
            let fit = fit_decay(&exp1.median[from..]);
            out.verdicts.push(Verdict::at_least(
                "exp1_loglinear_r2",
                json!({"n_range": [from, p.n_max], "paths": p.paths, "statistic": "median"}),
                fit.map_or(f64::NAN, |f| f.r_squared),
                0.95,
                0.0,
            ));
            if let Some(f) = fit {
                out.block("exp1_fit", json!({"lambda": f.lambda_est, "k": f.k_est, "r_squared": f.r_squared}));
                lambda = Some(f.lambda_est);
            }
        }
        let g = self.phi.get(0).clone();
        let exp2 = decay_exp2(cocycle, &g, p.n_max, p.paths, seed ^ 2)?;
        let check = envelope_check(&exp2, p.paths);
        // Exactly vanishing iterates (doubling) leave nothing to fit a rate to.
        let vanishes = exp2.iter().all(|s| s.last().is_some_and(|v| *v <= EXACT_FLOOR));
        out.verdicts.push(Verdict {
            pass: check.pass && (check.lambda > 0.0 || vanishes),
            ..Verdict::at_most("exp2_envelope", json!({"paths": p.paths, "k": check.k, "lambda": check.lambda, "vanishes": vanishes}), check.worst_ratio, 1.0, 0.0)
        });
        let holdout = envelope_check(&exp2, p.paths / 2);
        out.block("exp2_holdout", json!({"train": p.paths / 2, "worst_ratio": holdout.worst_ratio, "exploratory": true}));
        out.csv(
            "decay_exp2.csv",
            "n,max_ratio,median_ratio",
            (0..=p.n_max).map(|n| {
                let col: Vec<f64> = exp2.iter().map(|s| s[n]).collect();
                vec![n as f64, col.iter().copied().fold(0.0, f64::max), crate::stats::median(&col)]
            }),
        );
        // With nothing to fit, fall back to the smallest integer expansion rate.
        let lambda = lambda.filter(|l| *l > 0.0).or(Some(check.lambda).filter(|l| *l > 0.0)).unwrap_or(std::f64::consts::LN_2);
        let ks = k_series_along_path(cocycle, p.temper_len, p.n_max, lambda, seed ^ 3)?;
        let t = temperedness_check(&ks, lambda)?;
        out.verdicts.push(Verdict::at_most("temperedness", json!({"len": p.temper_len, "lambda": lambda}), t.statistic, t.epsilon, 0.0));
        out.csv("k_series.csv", "n,k", ks.iter().enumerate().map(|(n, k)| vec![n as f64, *k]));
        out.block("uniformly_expanding", json!(cocycle.uniformly_expanding()));
        Ok(out)
    }

    fn variance_cmd(&self) -> Result<CommandOutput> {
        let p = &self.config.experiments.variance;
        let var = &self.variance;
        let mut out = CommandOutput::default();
        let series = self.annealed.moment_series(&self.phi, p.n_max, 2)?;
        let e_s2: Vec<f64> = series.iter().map(|m| m[2]).collect();
        let ns: Vec<usize> = (p.n_min.max(1)..=p.n_max).collect();
        let rows = crate::annealed::variance_rate_check(&e_s2, var, &ns);
        let excess = rows.iter().map(|r| r.lhs - r.rhs).fold(f64::NEG_INFINITY, f64::max);
        out.verdicts.push(Verdict {
            pass: rows.iter().all(|r| r.pass),
            ..Verdict::at_most("variance_rate_inequality", json!({"n_range": [p.n_min, p.n_max]}), excess, 0.0, 2.0 * var.tail_bound)
        });
        out.csv("variance_rate.csv", "n,lhs,rhs", rows.iter().map(|r| vec![r.n as f64, r.lhs, r.rhs]));
        out.csv("correlations.csv", "k,b_k", var.b.iter().take(201).enumerate().map(|(k, b)| vec![k as f64, *b]));
        out.block("s2", json!({"s2": var.s2, "tail_bound": var.tail_bound, "n_tail": p.n_tail, "degenerate": self.degenerate()}));
        if let Some(comps) = &self.components {
            let cov = self.annealed.covariance_matrix(comps, p.n_tail)?;
            let min = cov.eigenvalues.first().copied().unwrap_or(0.0);
            out.verdicts.push(Verdict::at_least("sigma_positive_semidefinite", json!({"dim": comps.len()}), min, 0.0, 1e-10));
            out.block("covariance", serde_json::to_value(&cov).unwrap());
        }
        Ok(out)
    }

    fn cumulants(&self) -> Result<CommandOutput> {
        let p = &self.config.experiments.cumulants;
        let mut out = CommandOutput::default();
        let mut per_n = Vec::new();
        for &n in &p.ns {
            per_n.push(self.annealed.moments_cumulants(&self.phi, n, p.k_max)?.cumulants);
        }
        let gamma = self.mixing_gamma();
        let mut c0: f64 = 0.0;
        let mut rows = Vec::new();
        for k in 3..=p.k_max {
            let r: Vec<f64> = p.ns.iter().zip(&per_n).map(|(n, c)| c[k].abs() / *n as f64).collect();
            let diffs: Vec<f64> = r.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
            let growth = diffs.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
            let scale = r.iter().copied().fold(0.0, f64::max);
            out.verdicts.push(Verdict::at_most(
                &format!("cumulant_ratio_bounded_k{k}"),
                json!({"ns": p.ns, "ratios": r}),
                if diffs.len() < 2 { 0.0 } else { growth },
                0.0,
                1e-9 * scale + 1e-12,
            ));
            let fact: f64 = (1..=k).map(|i| i as f64).product();
            for (n, v) in p.ns.iter().zip(&r) {
                rows.push(vec![*n as f64, k as f64, v * *n as f64, *v]);
                c0 = c0.max((v / fact.powf(1.0 + gamma)).powf(1.0 / (k as f64 - 2.0)));
            }
        }
        out.csv("cumulants.csv", "n,k,gamma_k,ratio", rows);
        out.block("c0", json!({"value": c0, "gamma": gamma, "certified": false}));
        Ok(out)
    }

    fn mixing_gamma(&self) -> f64 {
        MixingProfile::compute(self.annealed.chain(), self.config.experiments.mix.n_max).rate.gamma
    }

    fn clt(&self, seed: u64) -> Result<CommandOutput> {
        let p = &self.config.experiments.clt;
        let s = self.s()?;
        let sampler = self.sampler()?;
        let mut out = CommandOutput::default();
        let mut rows = Vec::new();
        for &n in &p.ns {
            let batch = sampler.sample_sn(n, p.count, seed.wrapping_add(n as u64));
            rows.push(ks_test(&batch, s * (n as f64).sqrt(), self.profile.alpha)?);
        }
        let last = rows.last().ok_or_else(|| LabError::ConfigInvalid("experiments.clt.ns: empty".into()))?;
        out.verdicts.push(Verdict::at_most("ks_at_largest_n", json!({"n": last.n, "count": p.count, "dkw": last.dkw}), last.ks, p.ks_max, 0.0));
        let gamma = self.mixing_gamma();
        let fit = berry_esseen_fit(&rows, gamma);
        let worst = rows.windows(2).map(|w| w[1].ks - w[0].ks).fold(f64::NEG_INFINITY, f64::max);
        let dkw = rows.iter().map(|r| r.dkw).fold(0.0, f64::max);
        out.verdicts.push(Verdict { pass: fit.decreasing, ..Verdict::at_most("ks_decreasing", json!({"ns": p.ns}), worst, 0.0, dkw) });
        out.csv("ks.csv", "n,ks,dkw", rows.iter().map(|r| vec![r.n as f64, r.ks, r.dkw]));
        out.block("berry_esseen", json!({"exponent": fit.exponent, "c": fit.c, "gamma": gamma}));
        Ok(out)
    }

    fn concentration(&self, seed: u64) -> Result<CommandOutput> {
        let p = &self.config.experiments.concentration;
        let dec = build_decomposition(&self.annealed, &self.phi, self.config.experiments.martingale.tol)?;
        let a1 = dec.a1();
        let sampler = self.sampler()?;
        let mut out = CommandOutput::default();
        let mut all = Vec::new();
        for &n in &p.ns {
            let batch = sampler.sample_sn(n, p.count, seed.wrapping_add(n as u64));
            all.extend(concentration_test(&batch, &p.ts, a1, self.profile.alpha, |n, t| azuma_bound(&dec, n, t)));
        }
        let excess = all.iter().filter(|r| r.resolved).map(|r| r.upper - r.bound).fold(f64::NEG_INFINITY, f64::max);
        let unresolved = all.iter().filter(|r| !r.resolved).count();
        out.verdicts.push(Verdict {
            pass: all.iter().all(|r| r.pass),
            ..Verdict::at_most("azuma_tail_bound", json!({"ns": p.ns, "ts": p.ts, "count": p.count, "a1": a1, "unresolved_rows": unresolved}), excess, 0.0, 0.0)
        });
        out.csv(
            "concentration.csv",
            "n,t,threshold,hits,upper,bound,resolved",
            all.iter().map(|r| vec![r.n as f64, r.t, r.threshold, r.hits as f64, r.upper, r.bound, r.resolved as u8 as f64]),
        );
        out.block("decomposition", json!({"a1": a1, "u_bound": dec.u_bound(), "n_trunc": dec.n_trunc, "tail_bound": dec.tail_bound}));
        Ok(out)
    }

    fn moddev(&self, seed: u64) -> Result<CommandOutput> {
        let p = &self.config.experiments.moddev;
        let s = self.s()?;
        let interval = (p.interval[0], p.interval[1]);
        let (row, batch) = moddev_test(self.sampler()?, s, p.n, p.theta, interval, p.count, seed, self.profile.alpha)?;
        let mut out = CommandOutput::default();
        let params = json!({"n": p.n, "theta": p.theta, "a_n": row.a_n, "interval": p.interval, "count": p.count, "hits": row.hits});
        let calibration = (row.gaussian_exact - row.target).abs();
        out.verdicts.push(Verdict::at_most("moddev_rate", params.clone(), (row.rate - row.target).abs(), p.tolerance, calibration));
        out.verdicts.push(Verdict::at_most("moddev_vs_gaussian_benchmark", params, (row.rate - row.gaussian_exact).abs(), p.tolerance, 0.0));
        let gamma = self.mixing_gamma();
        let xs = [0.5, 1.0, 1.5, 2.0, 2.5];
        let (a5, ratios) = tail_ratio_fit(&batch, s, &xs, berry_esseen_exponent(gamma));
        out.csv("tail_ratio.csv", "x,log_ratio", xs.iter().zip(&ratios).map(|(x, r)| vec![*x, *r]));
        out.block("rate", serde_json::to_value(row).unwrap());
        out.block("a5", json!({"value": a5, "certified": false}));
        Ok(out)
    }

    fn fclt(&self, seed: u64) -> Result<CommandOutput> {
        let p = &self.config.experiments.fclt;
        let s2 = self.s()?.powi(2);
        let series = self.annealed.moment_series(&self.phi, p.n, 4)?;
        let c4 = (1..=p.n).map(|m| series[m][4] / (m * m) as f64).fold(0.0, f64::max);
        let rep = functional_clt_test(self.sampler()?, s2, c4, p.n, &p.times, p.count, seed, self.profile.k_se);
        let mut out = CommandOutput::default();
        let d = rep.times.len();
        let cov_z = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| {
                let dev = (rep.cov[i][j] - rep.expected[i][j]).abs();
                if rep.cov_se[i][j] > 0.0 { dev / rep.cov_se[i][j] } else if dev <= 1e-12 { 0.0 } else { f64::INFINITY }
            })
            .fold(0.0, f64::max);
        let params = json!({"n": p.n, "times": p.times, "count": p.count});
        out.verdicts.push(Verdict { pass: rep.cov_pass, ..Verdict::at_most("fclt_covariance", params.clone(), cov_z, self.profile.k_se, 0.0) });
        let inc_z = rep.increment_corr.iter().map(|(c, se)| if *se > 0.0 { c.abs() / se } else { 0.0 }).fold(0.0, f64::max);
        out.verdicts.push(Verdict { pass: rep.increments_pass, ..Verdict::at_most("fclt_increments", params.clone(), inc_z, self.profile.k_se, 0.0) });
        let tight = rep.tightness.iter().map(|(l, se, r)| l - r - self.profile.k_se * se).fold(f64::NEG_INFINITY, f64::max);
        out.verdicts.push(Verdict { pass: rep.tightness_pass, ..Verdict::at_most("fclt_tightness", json!({"n": p.n, "c4": c4}), tight, 0.0, 0.0) });
        let mut rows = Vec::new();
        for i in 0..d {
            for j in 0..d {
                rows.push(vec![rep.times[i], rep.times[j], rep.cov[i][j], rep.cov_se[i][j], rep.expected[i][j]]);
            }
        }
        out.csv("fclt_cov.csv", "t_i,t_j,cov,se,expected", rows);
        out.block("fclt", serde_json::to_value(&rep).unwrap());
        Ok(out)
    }

    fn martingale(&self, seed: u64) -> Result<CommandOutput> {
        let p = &self.config.experiments.martingale;
        let a = &self.annealed;
        let mut out = CommandOutput::default();
        let kd = k_decay(a, &self.phi, p.n_max.max(2 * p.table))?;
        out.verdicts.push(Verdict {
            pass: kd.dominated,
            ..Verdict::at_most("k_iterates_envelope", json!({"n_max": p.n_max, "c": kd.envelope.c, "delta": kd.envelope.delta}), kd.worst_ratio, 1.0, 1e-12)
        });
        out.csv("k_decay.csv", "n,sup,gamma", kd.sup.iter().zip(&kd.gamma).enumerate().map(|(n, (s, g))| vec![n as f64, *s, *g]));
        let table = second_order_table(a, &self.phi, p.table, &kd.gamma)?;
        out.verdicts.push(Verdict {
            pass: table.dominated,
            ..Verdict::at_most("second_order_envelope", json!({"size": p.table, "c": table.envelope.c}), table.worst_ratio, 1.0, 1e-12)
        });
        let mut cert = duality_certificate(a, &self.phi)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = self.phi.resolution();
        for _ in 0..p.random_fields {
            let f = SymbolField::new(
                (0..a.symbols()).map(|_| GridFunction::new((0..res).map(|_| rng.random_range(-1.0..1.0)).collect())).collect(),
            );
            cert = cert.max(duality_certificate(a, &f)?);
        }
        out.verdicts.push(Verdict::at_most("duality_certificate", json!({"random_fields": p.random_fields}), cert, 1e-11, 0.0));
        let dec = build_decomposition(a, &self.phi, p.tol)?;
        out.verdicts.push(Verdict::at_most("martingale_residual", json!({"n_trunc": dec.n_trunc}), dec.residual, dec.tail_bound, 1e-15));
        out.verdicts.push(Verdict::at_most(
            "martingale_second_moment",
            json!({"e_u2": dec.second_moment, "s2": self.variance.s2}),
            (dec.second_moment - self.variance.s2).abs(),
            dec.second_moment_tolerance() + 2.0 * self.variance.tail_bound,
            1e-12,
        ));
        out.block("regime", json!(format!("{:?}", kd.regime)));
        out.block("second_order", json!(table.values));
        out.block(
            "decomposition",
            json!({"n_trunc": dec.n_trunc, "tail_bound": dec.tail_bound, "chi_sup": dec.chi_sup, "u_sup": dec.u_sup, "mean_u": dec.mean_u, "a1": dec.a1()}),
        );
        Ok(out)
    }

    fn multicorr(&self, seed: u64) -> Result<CommandOutput> {
        let p = &self.config.experiments.multicorr;
        let a = &self.annealed;
        let block = |start: usize, len: usize| (start..start + len).collect::<Vec<_>>();
        let mut training: Vec<MultiCorrelation> = Vec::new();
        for b1 in 1..=p.max_block {
            for b2 in 1..=p.max_block {
                for gap in 1..=p.max_gap {
                    let blocks = vec![block(0, b1), block(b1 - 1 + gap, b2)];
                    if b1 + gap + b2 > PRODUCT_HORIZON {
                        continue;
                    }
                    training.push(a.multi_correlation(&self.phi, &blocks)?);
                }
            }
        }
        let env = ProMultEnvelope::fit(&training);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut violations = 0;
        let mut rows = Vec::new();
        while rows.len() < p.test_configs {
            let count = rng.random_range(2..=4usize);
            let mut blocks = Vec::new();
            let mut start = 0;
            for i in 0..count {
                if i > 0 {
                    start += rng.random_range(1..=p.max_gap) - 1;
                }
                let len = rng.random_range(1..=p.max_block);
                blocks.push(block(start, len));
                start += len;
            }
            if start > PRODUCT_HORIZON {
                continue;
            }
            let mc = a.multi_correlation(&self.phi, &blocks)?;
            let rhs = env.rhs(&mc);
            if mc.lhs > rhs * (1.0 + 1e-12) + EXACT_FLOOR {
                violations += 1;
            }
            if mc.lhs > EXACT_FLOOR {
                worst = worst.max(mc.lhs / rhs);
            }
            rows.push(vec![count as f64, mc.min_gap as f64, mc.lhs, rhs]);
        }
        let mut out = CommandOutput::default();
        out.verdicts.push(Verdict {
            pass: violations == 0,
            ..Verdict::at_most("multicorrelation_envelope", json!({"configs": p.test_configs, "violations": violations, "a": env.a, "delta0": env.delta0}), worst, 1.0, 1e-12)
        });
        out.csv("multicorr.csv", "blocks,min_gap,lhs,rhs", rows);
        out.block("envelope", serde_json::to_value(env).unwrap());
        out.block("training_configs", json!(training.len()));
        Ok(out)
    }

    fn rosenthal(&self, seed: u64) -> Result<CommandOutput> {
        let p = &self.config.experiments.rosenthal;
        self.s()?;
        let n_max = p.ns.iter().copied().max().unwrap_or(1);
        let p_max = p.ps.iter().copied().max().unwrap_or(2);
        let series = self.annealed.moment_series(&self.phi, n_max, p_max)?;
        let mut out = CommandOutput::default();
        let mut rows = Vec::new();
        for &q in &p.ps {
            let ratios: Vec<f64> = p.ns.iter().map(|&n| series[n][q].abs().powf(1.0 / q as f64) / (n as f64).sqrt()).collect();
            let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(l, h), r| (l.min(*r), h.max(*r)));
            out.verdicts.push(Verdict::at_most(&format!("rosenthal_variation_p{q}"), json!({"ns": p.ns, "ratios": ratios}), (hi - lo) / hi, p.max_variation, 0.0));
            rows.extend(p.ns.iter().zip(&ratios).map(|(n, r)| vec![*n as f64, q as f64, *r]));
        }
        out.csv("rosenthal.csv", "n,p,ratio", rows);
        let sampler = self.sampler()?;
        let maximal_ps: Vec<usize> = p.ps.iter().copied().filter(|q| *q <= 4).collect();
        let mut max_rows = Vec::new();
        for &n in &p.maximal_ns {
            max_rows.extend(maximal_moment_test(sampler, n, &maximal_ps, p.maximal_count, seed.wrapping_add(n as u64), self.profile.alpha));
        }
        for &q in &maximal_ps {
            let r: Vec<_> = max_rows.iter().filter(|r| r.p == q).collect();
            let hi = r.iter().map(|r| r.ratio).fold(0.0, f64::max);
            let lo = r.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
            let half = r.iter().map(|r| (r.hi - r.lo) / 2.0).fold(0.0, f64::max);
            out.verdicts.push(Verdict::at_most(
                &format!("maximal_moment_variation_p{q}"),
                json!({"ns": p.maximal_ns, "count": p.maximal_count}),
                (hi - lo) / hi,
                p.max_variation,
                2.0 * half / hi,
            ));
        }
        out.csv("maximal_moments.csv", "n,p,ratio,lo,hi", max_rows.iter().map(|r| vec![r.n as f64, r.p as f64, r.ratio, r.lo, r.hi]));
        Ok(out)
    }

    fn nonconv(&self, seed: u64) -> Result<CommandOutput> {
        let p = &self.config.experiments.nonconv;
        let polys: Vec<Poly> = p.polys.iter().cloned().map(Poly).collect();
        let batch = nonconventional_sample(self.sampler()?, &polys, p.n, p.count, seed)?;
        let sup = self.phi.sup().powi(polys.len() as i32) * p.n as f64;
        let largest = batch.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let mut out = CommandOutput::default();
        out.verdicts.push(Verdict::at_most("nonconventional_sup_bound", json!({"n": p.n, "polys": p.polys}), largest, sup, 1e-9 * sup));
        out.block("exploratory", json!({"ks_standardized": batch.ks, "mean": mean(&batch.values), "variance": crate::stats::variance(&batch.values)}));
        Ok(out)
    }

    fn chf(&self, seed: u64) -> Result<CommandOutput> {
        let p = &self.config.experiments.chf;
        let sampler = self.sampler()?;
        let gaps: Vec<_> = p.ks.iter().map(|&k| chf_decorrelation(sampler, p.len, p.len, k, p.t, p.t, p.count, seed.wrapping_add(k as u64))).collect();
        let mut out = CommandOutput::default();
        if gaps.len() >= 2 {
            let half = gaps.len() / 2;
            let avg = |g: &[crate::montecarlo::ChfGap]| mean(&g.iter().map(|x| x.gap).collect::<Vec<_>>());
            let se = |g: &[crate::montecarlo::ChfGap]| (g.iter().map(|x| x.se * x.se).sum::<f64>()).sqrt() / g.len() as f64;
            let (early, late) = (&gaps[..half], &gaps[half..]);
            out.verdicts.push(Verdict::at_most(
                "chf_gap_nonincreasing",
                json!({"ks": p.ks, "t": p.t, "len": p.len, "count": p.count}),
                avg(late) - avg(early),
                0.0,
                self.profile.k_se * (se(early).powi(2) + se(late).powi(2)).sqrt(),
            ));
        }
        out.csv("chf_gaps.csv", "k,gap,se", gaps.iter().map(|g| vec![g.k as f64, g.gap, g.se]));
        Ok(out)
    }

    /// One-screen human-readable summary.
    pub fn describe(&self) -> Result<String> {
        let a = &self.annealed;
        let chain = a.chain();
        let cocycle = a.cocycle();
        let mut s = String::new();
        let _ = writeln!(s, "config: {} (hash {})", if self.config.name.is_empty() { "-" } else { &self.config.name }, &self.config.hash()[..12]);
        let _ = writeln!(s, "chain: {} states {:?}{}", chain.len(), chain.states, if chain.iid { " (iid)" } else { "" });
        for (i, row) in chain.p.iter().enumerate() {
            let _ = writeln!(s, "  P[{i}] = {row:?}");
        }
        let _ = writeln!(s, "  stationary pi = {:?}", chain.pi);
        let prof = MixingProfile::compute(chain, self.config.experiments.mix.n_max);
        let r = prof.rate;
        if chain.iid {
            let _ = writeln!(s, "  mixing: alpha_n = 0 for n >= 1, gamma = 0");
        } else {
            let _ = writeln!(s, "  mixing fit: alpha_n ~ {:.4} exp(-{:.4} n^{:.2}), gamma = {}", r.c1, r.c2, r.eta, r.gamma);
        }
        let _ = writeln!(s, "maps (resolution N = {}, base M = {}):", cocycle.resolution(), cocycle.base_partition());
        for (i, m) in self.config.maps.iter().enumerate() {
            let br: Vec<String> = m.branches.iter().map(|b| format!("{}x{}@{}", if b.orientation < 0 { "-" } else { "+" }, b.slope, b.target_start)).collect();
            let _ = writeln!(s, "  {}: M = {}, branches [{}]", chain.states[i], m.m, br.join(", "));
        }
        let _ = writeln!(s, "  uniformly expanding: {}", cocycle.uniformly_expanding());
        let _ = writeln!(s, "conditioned density h^ ({} iterations, residual {:.2e}):", a.iterations(), a.residual());
        for sym in 0..a.symbols() {
            let h = a.hhat().get(sym);
            let constant = h.variation() < 1e-10;
            let _ = writeln!(s, "  {}: min {:.6}, max {:.6}{}", chain.states[sym], h.min(), h.sup(), if constant { " (constant)" } else { "" });
        }
        let phi = &self.phi;
        let _ = writeln!(s, "observable (centered): sup {:.6}, L1 {:.6}, BV {:.6}", phi.sup(), (0..phi.symbols()).map(|k| phi.get(k).l1()).fold(0.0, f64::max), (0..phi.symbols()).map(|k| phi.get(k).bv_norm()).fold(0.0, f64::max));
        let _ = writeln!(s, "asymptotic variance s2 = {:.6e} (tail bound {:.2e})", self.variance.s2, self.variance.tail_bound);
        if self.degenerate() {
            let _ = writeln!(s, "  DEGENERATE: s2 <= {DEGENERACY_THRESHOLD:e}; the observable is a coboundary up to numerical error");
        }
        if let Some(comps) = &self.components {
            let cov = a.covariance_matrix(comps, self.config.experiments.variance.n_tail)?;
            let _ = writeln!(s, "covariance matrix Sigma2 ({}x{}):", comps.len(), comps.len());
            for row in &cov.matrix {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:>12.6}")).collect();
                let _ = writeln!(s, "  {}", cells.join(" "));
            }
            let eig: Vec<String> = cov.eigenvalues.iter().map(|v| format!("{v:.6e}")).collect();
            let _ = writeln!(s, "  eigenvalues: {}", eig.join(", "));
            for d in &cov.null_directions {
                let _ = writeln!(s, "  null direction: {d:?}");
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub command: String,
    /// `ok`, `skipped` or `error`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub pass: bool,
    pub verdicts: Vec<Verdict>,
    pub series: Vec<String>,
    pub blocks: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub command: String,
    pub profile: String,
    pub pass: bool,
    pub sections: Vec<Section>,
    /// Wall-clock seconds per section.
    pub timings: serde_json::Map<String, Value>,
}

impl Report {
    pub fn has_error(&self) -> bool {
        self.sections.iter().any(|s| s.status == "error")
    }

    /// 0 when every verdict passes, 2 on any FAIL, 1 on a runtime error.
    pub fn exit_code(&self) -> i32 {
        if self.has_error() {
            1
        } else if self.pass {
            0
        } else {
            2
        }
    }
}

/// Runs `command` (one of [`COMMANDS`] or `all`) and writes `report.json`
/// plus CSV series into `out_dir`.
pub fn run(lab: &Lab, command: &str, seed: u64, out_dir: &std::path::Path) -> Result<Report> {
    let plan: Vec<&str> = if command == "all" {
        std::iter::once("gate").chain(COMMANDS).collect()
    } else if COMMANDS.contains(&command) {
        if DISTRIBUTIONAL.contains(&command) {
            vec!["gate", command]
        } else {
            vec![command]
        }
    } else {
        return Err(LabError::ConfigInvalid(format!("command: unknown command {command}")));
    };
    std::fs::create_dir_all(out_dir).map_err(|e| LabError::ConfigInvalid(format!("out: {e}")))?;
    let mut sections = Vec::new();
    let mut timings = serde_json::Map::new();
    for name in plan {
        let start = Instant::now();
        let result = lab.command(name, seed);
        timings.insert(name.into(), json!(start.elapsed().as_secs_f64()));
        let section = match result {
            Ok(out) => {
                let mut paths = Vec::new();
                for (file, text) in &out.series {
                    let file = format!("{name}_{file}");
                    std::fs::write(out_dir.join(&file), text).map_err(|e| LabError::ConfigInvalid(format!("out: {e}")))?;
                    paths.push(file);
                }
                Section { command: name.into(), status: "ok".into(), message: None, pass: out.pass(), verdicts: out.verdicts, series: paths, blocks: out.blocks }
            }
            Err(LabError::ZeroVariance) if command == "all" => Section {
                command: name.into(),
                status: "skipped".into(),
                message: Some(LabError::ZeroVariance.to_string()),
                pass: true,
                verdicts: vec![],
                series: vec![],
                blocks: Default::default(),
            },
            Err(e) => Section {
                command: name.into(),
                status: "error".into(),
                message: Some(e.to_string()),
                pass: false,
                verdicts: vec![],
                series: vec![],
                blocks: Default::default(),
            },
        };
        sections.push(section);
    }
    let report = Report {
        config_hash: lab.config.hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        command: command.into(),
        profile: lab.profile.name.into(),
        pass: sections.iter().all(|s| s.pass),
        sections,
        timings,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out_dir.join("report.json"), text).map_err(|e| LabError::ConfigInvalid(format!("out: {e}")))?;
    Ok(report)
}
