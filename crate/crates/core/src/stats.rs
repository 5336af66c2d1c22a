//! Small statistical helpers shared by the exact and Monte Carlo layers.

use statrs::distribution::{Beta, ContinuousCDF, Normal};

/// Ordinary least squares `y ≈ a + b x`; returns `(a, b)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - b * mx, b)
}

/// Coefficient of determination of the line `(a, b)` on the data.
pub fn r_squared(xs: &[f64], ys: &[f64], a: f64, b: f64) -> f64 {
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0).max(1.0)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Linear-interpolation quantile.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

pub fn normal_sf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().sf(x)
}

/// Kolmogorov–Smirnov distance between the empirical law of `xs` and the
/// standard normal.
pub fn ks_distance_normal(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < v.len() {
        // ties: jump over equal values at once
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        let f = normal_cdf(v[i]);
        d = d.max((f - i as f64 / n).abs()).max(((j + 1) as f64 / n - f).abs());
        i = j + 1;
    }
    d
}

/// Dvoretzky–Kiefer–Wolfowitz radius: `sup|F_emp − F| ≤ r` with
/// probability at least `1 − alpha`.
pub fn dkw_radius(count: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * count as f64)).sqrt()
}

/// Two-sided Clopper–Pearson interval at level `1 − alpha`.
pub fn clopper_pearson(hits: usize, count: usize, alpha: f64) -> (f64, f64) {
    let k = hits as f64;
    let n = count as f64;
    let lo = if hits == 0 {
        0.0
    } else {
        Beta::new(k, n - k + 1.0).unwrap().inverse_cdf(alpha / 2.0)
    };
    let hi = if hits == count {
        1.0
    } else {
        Beta::new(k + 1.0, n - k).unwrap().inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

/// Standard error of the sample mean of `xs`.
pub fn standard_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Sample covariance and its standard error (delta-free plug-in: the
/// standard error of the mean of centred cross products).
pub fn covariance_with_se(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let mx = mean(xs);
    let my = mean(ys);
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    (mean(&prods), standard_error(&prods))
}

/// Fitted upper envelope `C·(δⁿ + extra(n))`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Envelope {
    pub c: f64,
    pub delta: f64,
}

impl Envelope {
    pub fn eval(&self, n: usize, extra: f64) -> f64 {
        self.c * (self.delta.powi(n as i32) + extra)
    }
}

/// Fits `C·(δⁿ + extra(n))` to `values[n]` over the indices in `fit_range`:
/// δ comes from a log-linear fit of the nonzero values, `C` is the smallest
/// constant dominating the fitted points.
pub fn fit_envelope(values: &[f64], extra: impl Fn(usize) -> f64, fit_range: std::ops::Range<usize>, floor: f64) -> Envelope {
    let pts: Vec<(f64, f64)> = fit_range
        .clone()
        .filter(|&n| values[n] > floor)
        .map(|n| (n as f64, values[n].ln()))
        .collect();
    let delta = if pts.len() >= 2 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let (_, b) = linear_fit(&xs, &ys);
        b.exp().clamp(1e-6, 1.0 - 1e-9)
    } else {
        0.5
    };
    let c = fit_range
        .map(|n| values[n] / (delta.powi(n as i32) + extra(n)))
        .fold(0.0, f64::max);
    Envelope { c, delta }
}
