//! Step functions on `[0,1]` and symbol-indexed families of them.
//!
//! A [`GridFunction`] at resolution `N` is constant on each right-open cell
//! `[i/N, (i+1)/N)`. Binary operations on functions of different resolution
//! first refine both operands to the least common multiple, which is exact.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    values: Vec<f64>,
}

/// The four functionals behind the BV norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BvNorms {
    pub l1: f64,
    pub variation: f64,
    pub sup: f64,
    pub bv: f64,
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

impl GridFunction {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "grid function needs at least one cell");
        GridFunction { values }
    }

    pub fn constant(resolution: usize, c: f64) -> Self {
        Self::new(vec![c; resolution])
    }

    /// Indicator of the cells `lo..hi`.
    pub fn indicator(resolution: usize, lo: usize, hi: usize) -> Self {
        Self::new((0..resolution).map(|i| if (lo..hi).contains(&i) { 1.0 } else { 0.0 }).collect())
    }

    /// Samples `f` at cell midpoints.
    pub fn from_fn(resolution: usize, f: impl Fn(f64) -> f64) -> Self {
        Self::new((0..resolution).map(|i| f((i as f64 + 0.5) / resolution as f64)).collect())
    }

    pub fn resolution(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Value at `x ∈ [0,1)`.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.resolution();
        self.values[((x * n as f64) as usize).min(n - 1)]
    }

    /// `∫ g dm`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.resolution() as f64
    }

    pub fn l1(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() / self.resolution() as f64
    }

    /// Total variation counting interior jumps only.
    pub fn variation(&self) -> f64 {
        self.values.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn bv_norm(&self) -> f64 {
        self.l1() + self.variation()
    }

    pub fn norms(&self) -> BvNorms {
        let l1 = self.l1();
        let variation = self.variation();
        BvNorms { l1, variation, sup: self.sup(), bv: l1 + variation }
    }

    /// Same function at resolution `N·k`.
    pub fn refine(&self, k: usize) -> Self {
        assert!(k >= 1);
        if k == 1 {
            return self.clone();
        }
        Self::new(self.values.iter().flat_map(|v| std::iter::repeat_n(*v, k)).collect())
    }

    pub fn refine_to(&self, resolution: usize) -> Self {
        assert_eq!(resolution % self.resolution(), 0, "cannot refine {} to {}", self.resolution(), resolution);
        self.refine(resolution / self.resolution())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.values.iter().map(|v| f(*v)).collect())
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = lcm(self.resolution(), other.resolution());
        let a = self.refine_to(n);
        let b = other.refine_to(n);
        Self::new(a.values.iter().zip(&b.values).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn shift(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    /// `∫ f g dm`.
    pub fn dot(&self, other: &Self) -> f64 {
        self.mul(other).integral()
    }

    pub fn axpy(&mut self, a: f64, x: &Self) {
        assert_eq!(self.resolution(), x.resolution());
        self.values.iter_mut().zip(&x.values).for_each(|(y, x)| *y += a * x);
    }
}

/// One grid function per driving symbol, all at a common resolution;
/// represents functions of `(ω_0, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolField {
    pub fields: Vec<GridFunction>,
}

impl SymbolField {
    pub fn new(fields: Vec<GridFunction>) -> Self {
        assert!(!fields.is_empty());
        let n = fields.iter().map(|f| f.resolution()).fold(1, lcm);
        SymbolField { fields: fields.into_iter().map(|f| f.refine_to(n)).collect() }
    }

    pub fn constant(symbols: usize, resolution: usize, c: f64) -> Self {
        SymbolField { fields: vec![GridFunction::constant(resolution, c); symbols] }
    }

    /// Same function of `x` for every symbol.
    pub fn uniform(symbols: usize, g: &GridFunction) -> Self {
        SymbolField { fields: vec![g.clone(); symbols] }
    }

    /// `x`-independent field `(s, x) ↦ c_s`.
    pub fn symbol_constants(values: &[f64], resolution: usize) -> Self {
        SymbolField { fields: values.iter().map(|c| GridFunction::constant(resolution, *c)).collect() }
    }

    pub fn symbols(&self) -> usize {
        self.fields.len()
    }

    pub fn resolution(&self) -> usize {
        self.fields[0].resolution()
    }

    pub fn get(&self, s: usize) -> &GridFunction {
        &self.fields[s]
    }

    pub fn refine_to(&self, resolution: usize) -> Self {
        SymbolField { fields: self.fields.iter().map(|f| f.refine_to(resolution)).collect() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> Self {
        SymbolField { fields: self.fields.iter().map(|g| g.map(f)).collect() }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64 + Copy) -> Self {
        assert_eq!(self.symbols(), other.symbols());
        SymbolField::new(self.fields.iter().zip(&other.fields).map(|(a, b)| a.zip_with(b, f)).collect())
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(move |v| v * c)
    }

    pub fn shift(&self, c: f64) -> Self {
        self.map(move |v| v + c)
    }

    pub fn powi(&self, p: i32) -> Self {
        self.map(move |v| v.powi(p))
    }

    /// Supremum of `|f|` over symbols and cells.
    pub fn sup(&self) -> f64 {
        self.fields.iter().map(|f| f.sup()).fold(0.0, f64::max)
    }

    /// Supremum of `|f|` restricted to the cells where `weight > 0`.
    pub fn sup_where_positive(&self, weight: &SymbolField) -> f64 {
        let w = weight.refine_to(lcm(weight.resolution(), self.resolution()));
        let f = self.refine_to(w.resolution());
        f.fields
            .iter()
            .zip(&w.fields)
            .flat_map(|(a, b)| a.values().iter().zip(b.values()).filter(|(_, w)| **w > 0.0).map(|(v, _)| v.abs()))
            .fold(0.0, f64::max)
    }

    /// Refines into a [`PairField`] that ignores the second symbol.
    pub fn to_pair(&self, resolution: usize) -> PairField {
        let m = self.symbols();
        PairField { fields: self.fields.iter().map(|f| vec![f.refine_to(resolution); m]).collect() }
    }

    /// Per-symbol `(sup, BV)` norms.
    pub fn norms(&self) -> Vec<BvNorms> {
        self.fields.iter().map(|f| f.norms()).collect()
    }
}

/// Functions of `(ω_0, ω_1, x)`; `fields[s][s']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairField {
    pub fields: Vec<Vec<GridFunction>>,
}

impl PairField {
    pub fn symbols(&self) -> usize {
        self.fields.len()
    }

    pub fn resolution(&self) -> usize {
        self.fields[0][0].resolution()
    }

    pub fn get(&self, s: usize, s_next: usize) -> &GridFunction {
        &self.fields[s][s_next]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> Self {
        PairField { fields: self.fields.iter().map(|row| row.iter().map(|g| g.map(f)).collect()).collect() }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64 + Copy) -> Self {
        PairField {
            fields: self
                .fields
                .iter()
                .zip(&other.fields)
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(a, b)| a.zip_with(b, f)).collect())
                .collect(),
        }
    }

    pub fn sup(&self) -> f64 {
        self.fields.iter().flatten().map(|g| g.sup()).fold(0.0, f64::max)
    }
}

/// Observable `φ_s` per symbol with its recorded norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableFamily {
    pub field: SymbolField,
    pub sup: Vec<f64>,
    pub bv: Vec<f64>,
}

impl ObservableFamily {
    pub fn new(field: SymbolField) -> Self {
        let norms = field.norms();
        ObservableFamily {
            sup: norms.iter().map(|n| n.sup).collect(),
            bv: norms.iter().map(|n| n.bv).collect(),
            field,
        }
    }

    /// `max_s K_s ‖φ_s‖_BV` for per-symbol constants `K_s`.
    pub fn scaled_norm(&self, k: &[f64]) -> f64 {
        self.bv.iter().zip(k).map(|(b, k)| b * k).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn norms_of_examples() {
        let one = GridFunction::constant(4, 1.0).norms();
        assert_eq!((one.l1, one.variation, one.sup, one.bv), (1.0, 0.0, 1.0, 1.0));
        let g = GridFunction::new(vec![0.5, 0.5, -0.5, -0.5]).norms();
        assert_eq!((g.l1, g.variation, g.sup, g.bv), (0.5, 1.0, 0.5, 1.5));
        let g = GridFunction::new(vec![0.1, -0.4, 0.3]);
        assert!((g.scale(2.0).variation() - 2.0 * g.variation()).abs() < 1e-15);
    }

    fn grid() -> impl Strategy<Value = GridFunction> {
        prop::collection::vec(-5.0f64..5.0, 1..24).prop_map(GridFunction::new)
    }

    proptest! {
        #[test]
        fn refinement_preserves_functionals(g in grid(), k in 1usize..5) {
            let r = g.refine(k);
            prop_assert!((r.l1() - g.l1()).abs() < 1e-12);
            prop_assert!((r.variation() - g.variation()).abs() < 1e-12);
            prop_assert_eq!(r.sup(), g.sup());
        }

        #[test]
        fn sup_bounded_by_bv(g in grid()) {
            prop_assert!(g.sup() <= g.bv_norm() + 1e-12);
        }

        #[test]
        fn product_variation_inequality(f in grid(), g in grid()) {
            let fg = f.mul(&g);
            prop_assert!(fg.variation() <= f.sup() * g.variation() + g.sup() * f.variation() + 1e-9);
        }
    }
}
