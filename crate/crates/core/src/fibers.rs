//! Piecewise-linear Markov interval maps.
//!
//! The base partition has `M` right-open cells `[i/M, (i+1)/M)`. Cell `i`
//! is mapped affinely, with integer slope `k`, onto the `k` consecutive
//! cells starting at `target_start`. Such maps send step functions at any
//! resolution `N` divisible by `M` to step functions at the same resolution,
//! so the transfer operator is an exact sparse matrix.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fields::{lcm, GridFunction};

fn default_orientation() -> i8 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub slope: usize,
    pub target_start: usize,
    #[serde(default = "default_orientation")]
    pub orientation: i8,
}

impl Branch {
    pub fn new(slope: usize, target_start: usize) -> Self {
        Branch { slope, target_start, orientation: 1 }
    }

    pub fn reversed(slope: usize, target_start: usize) -> Self {
        Branch { slope, target_start, orientation: -1 }
    }
}

/// Sparse transfer operator at a fixed resolution: source cell `c` spreads
/// `g_c / k` over the `k` cells `start..start+k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    resolution: usize,
    images: Vec<(usize, usize)>,
}

impl TransferMatrix {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// `(start, k)` image range of each source cell.
    pub fn images(&self) -> &[(usize, usize)] {
        &self.images
    }

    pub fn apply(&self, g: &GridFunction) -> GridFunction {
        let g = g.refine_to(self.resolution);
        let mut out = vec![0.0; self.resolution];
        self.apply_into(g.values(), &mut out);
        GridFunction::new(out)
    }

    /// Adds `𝓛 g` into `out`.
    pub fn apply_into(&self, g: &[f64], out: &mut [f64]) {
        for (v, &(start, k)) in g.iter().zip(&self.images) {
            if *v == 0.0 {
                continue;
            }
            let w = v / k as f64;
            out[start..start + k].iter_mut().for_each(|o| *o += w);
        }
    }

    /// Adds `a·𝓛 g` into `out`.
    pub fn apply_scaled_into(&self, a: f64, g: &[f64], out: &mut [f64]) {
        for (v, &(start, k)) in g.iter().zip(&self.images) {
            if *v == 0.0 {
                continue;
            }
            let w = a * v / k as f64;
            out[start..start + k].iter_mut().for_each(|o| *o += w);
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.resolution, self.resolution);
        for (c, &(start, k)) in self.images.iter().enumerate() {
            for t in start..start + k {
                m[(t, c)] += 1.0 / k as f64;
            }
        }
        m
    }
}

type Cache = Arc<RwLock<HashMap<usize, Arc<TransferMatrix>>>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PiecewiseMap {
    #[serde(rename = "M")]
    m: usize,
    branches: Vec<Branch>,
    #[serde(skip)]
    cache: Cache,
}

impl PartialEq for PiecewiseMap {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m && self.branches == other.branches
    }
}

impl PiecewiseMap {
    pub fn new(m: usize, branches: Vec<Branch>) -> Result<Self> {
        if m < 2 {
            return Err(LabError::OutOfRange { branch: 0, detail: format!("base partition M = {m} must be at least 2") });
        }
        if branches.len() != m {
            return Err(LabError::NotMarkov {
                branch: branches.len(),
                detail: format!("{} branches for {m} cells", branches.len()),
            });
        }
        for (i, b) in branches.iter().enumerate() {
            if b.slope == 0 {
                return Err(LabError::NotMarkov { branch: i, detail: "slope must be at least 1".into() });
            }
            if b.orientation != 1 && b.orientation != -1 {
                return Err(LabError::NotMarkov { branch: i, detail: format!("orientation {}", b.orientation) });
            }
            if b.target_start + b.slope > m {
                return Err(LabError::OutOfRange {
                    branch: i,
                    detail: format!("image cells {}..{} exceed {m}", b.target_start, b.target_start + b.slope),
                });
            }
        }
        Ok(PiecewiseMap { m, branches, cache: Cache::default() })
    }

    /// Builds a map from the image interval `[a, b)` of each cell; the
    /// endpoints must lie on the base grid.
    pub fn from_images(m: usize, images: &[(f64, f64, i8)]) -> Result<Self> {
        let mut branches = Vec::with_capacity(images.len());
        for (i, &(a, b, orientation)) in images.iter().enumerate() {
            if a < -1e-12 || b > 1.0 + 1e-12 {
                return Err(LabError::OutOfRange { branch: i, detail: format!("image [{a}, {b})") });
            }
            let (sa, sb) = (a * m as f64, b * m as f64);
            let aligned = |v: f64| (v - v.round()).abs() < 1e-9;
            if !aligned(sa) || !aligned(sb) || sb.round() <= sa.round() {
                return Err(LabError::NotMarkov { branch: i, detail: format!("image [{a}, {b}) is not a union of cells") });
            }
            let start = sa.round() as usize;
            branches.push(Branch { slope: sb.round() as usize - start, target_start: start, orientation });
        }
        Self::new(m, branches)
    }

    pub fn base_partition(&self) -> usize {
        self.m
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn max_slope(&self) -> usize {
        self.branches.iter().map(|b| b.slope).max().unwrap()
    }

    pub fn slope_lcm(&self) -> usize {
        self.branches.iter().map(|b| b.slope).fold(1, lcm)
    }

    pub fn is_uniformly_expanding(&self) -> bool {
        self.branches.iter().all(|b| b.slope >= 2)
    }

    pub fn has_lazy_branch(&self) -> bool {
        self.branches.iter().any(|b| b.slope == 1)
    }

    /// Constant `K` with `v(g∘T) ≤ K·v(g)` for every step function `g`.
    ///
    /// On each of the `M` branches `g∘T` is a rescaled copy of `g` on the
    /// branch image, contributing at most `v(g)`; each of the `M − 1`
    /// branch junctions adds a jump of at most `max g − min g ≤ v(g)`.
    /// The doubling map with `g = 1_[0,½)` attains `K = 3`.
    pub fn variation_constant(&self) -> f64 {
        (2 * self.m - 1) as f64
    }

    /// Affine branch evaluation; `None` outside `[0,1)`.
    pub fn apply(&self, x: f64) -> Option<f64> {
        if !(0.0..1.0).contains(&x) {
            return None;
        }
        let scaled = x * self.m as f64;
        let i = (scaled as usize).min(self.m - 1);
        let t = scaled - i as f64;
        let b = self.branches[i];
        let k = b.slope as f64;
        let y = if b.orientation > 0 {
            b.target_start as f64 + k * t
        } else {
            (b.target_start + b.slope) as f64 - k * t
        };
        Some(y / self.m as f64)
    }

    /// Same map described on a base partition `factor` times finer.
    pub fn refine_base(&self, factor: usize) -> Self {
        if factor == 1 {
            return self.clone();
        }
        let mut branches = Vec::with_capacity(self.m * factor);
        for b in &self.branches {
            for q in 0..factor {
                let start = if b.orientation > 0 {
                    b.target_start * factor + b.slope * q
                } else {
                    (b.target_start + b.slope) * factor - b.slope * (q + 1)
                };
                branches.push(Branch { slope: b.slope, target_start: start, orientation: b.orientation });
            }
        }
        PiecewiseMap::new(self.m * factor, branches).expect("refinement of a valid map is valid")
    }

    /// Fine-cell image range `(start, k)` of source cell `c` at resolution
    /// `n`.
    fn image_of_cell(&self, c: usize, n: usize) -> (usize, usize) {
        let r = n / self.m;
        let b = self.branches[c / r];
        let q = c % r;
        let start = if b.orientation > 0 {
            b.target_start * r + b.slope * q
        } else {
            (b.target_start + b.slope) * r - b.slope * (q + 1)
        };
        (start, b.slope)
    }

    /// Exact transfer operator on step functions at resolution `n`,
    /// memoized per resolution.
    pub fn transfer_matrix(&self, n: usize) -> Result<Arc<TransferMatrix>> {
        if n == 0 || n % self.m != 0 {
            return Err(LabError::ResolutionMismatch { resolution: n, required: self.m });
        }
        if let Some(t) = self.cache.read().unwrap().get(&n) {
            return Ok(t.clone());
        }
        let images = (0..n).map(|c| self.image_of_cell(c, n)).collect();
        let t = Arc::new(TransferMatrix { resolution: n, images });
        self.cache.write().unwrap().insert(n, t.clone());
        Ok(t)
    }

    /// `g∘T` as an exact step function at resolution `N·L`, with `L` the
    /// lcm of the slopes.
    pub fn pullback(&self, g: &GridFunction) -> GridFunction {
        self.pullback_refined(g, self.slope_lcm())
    }

    /// `g∘T` at resolution `N·factor`; `factor` must be a multiple of every
    /// slope. `g` is first refined to a multiple of `M` if needed.
    pub fn pullback_refined(&self, g: &GridFunction, factor: usize) -> GridFunction {
        assert!(self.branches.iter().all(|b| factor % b.slope == 0), "factor {factor} not divisible by all slopes");
        let g = g.refine_to(lcm(g.resolution(), self.m));
        let n = g.resolution();
        let out_res = n * factor;
        let r_out = out_res / self.m;
        let vals = g.values();
        let out = (0..out_res)
            .map(|c| {
                let b = self.branches[c / r_out];
                let q = c % r_out;
                let pos = if b.orientation > 0 {
                    b.target_start * r_out + b.slope * q
                } else {
                    (b.target_start + b.slope) * r_out - b.slope * (q + 1)
                };
                vals[pos / factor]
            })
            .collect();
        GridFunction::new(out)
    }
}

/// Built-in maps used by the shipped configurations and tests.
pub mod families {
    use super::*;

    /// `x ↦ 2x mod 1`.
    pub fn doubling() -> PiecewiseMap {
        PiecewiseMap::new(2, vec![Branch::new(2, 0), Branch::new(2, 0)]).unwrap()
    }

    /// Three cells: `[0,⅓) → [0,1)` slope 3, `[⅓,⅔) → [⅓,1)` slope 2,
    /// `[⅔,1) → [0,1)` slope 3. Lebesgue measure is not invariant.
    pub fn three_cell() -> PiecewiseMap {
        PiecewiseMap::new(3, vec![Branch::new(3, 0), Branch::new(2, 1), Branch::new(3, 0)]).unwrap()
    }

    /// A second three-cell map with a reversed branch:
    /// `[0,⅓) → [⅓,1)`, `[⅓,⅔) → [0,1)`, `[⅔,1) → [0,⅔)` reversed.
    pub fn three_cell_alt() -> PiecewiseMap {
        PiecewiseMap::new(3, vec![Branch::new(2, 1), Branch::new(3, 0), Branch::reversed(2, 0)]).unwrap()
    }

    /// Expanding only on average: `[0,½)` is translated onto `[½,1)` with
    /// slope 1, `[½,1)` is doubled onto `[0,1)`.
    pub fn lazy_shift() -> PiecewiseMap {
        PiecewiseMap::new(2, vec![Branch::new(1, 1), Branch::new(2, 0)]).unwrap()
    }
}
