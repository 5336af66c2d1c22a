//! JSON experiment configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::driving::SymbolChain;
use crate::error::{LabError, Result};
use crate::fibers::{Branch, PiecewiseMap};
use crate::fields::{GridFunction, SymbolField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub states: Vec<String>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    #[serde(rename = "M")]
    pub m: usize,
    pub branches: Vec<Branch>,
}

/// Step function on `N` equal cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub values: Vec<f64>,
    #[serde(rename = "N")]
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableEntry {
    pub symbol: usize,
    pub values: Vec<f64>,
    #[serde(rename = "N")]
    pub n: usize,
}

/// Either explicit per-symbol step functions or the coboundary
/// `r∘T_s − r` of an `x`-only step function `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObservableSpec {
    PerSymbol(Vec<ObservableEntry>),
    Coboundary { coboundary: GridSpec },
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub chain: ChainSpec,
    pub maps: Vec<MapSpec>,
    pub observable: ObservableSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector_observable: Option<Vec<ObservableSpec>>,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub experiments: ExperimentParams,
}

macro_rules! params {
    ($name:ident { $($field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            $(pub $field: $ty,)*
        }
        impl Default for $name {
            fn default() -> Self {
                $name { $($field: $default,)* }
            }
        }
    };
}

params!(MixParams { n_max: usize = 30 });
params!(DecayParams { n_max: usize = 15, paths: usize = 100, temper_len: usize = 60 });
params!(VarianceParams { n_tail: usize = 2000, n_min: usize = 10, n_max: usize = 200 });
params!(CumulantParams { ns: Vec<usize> = vec![25, 50, 100, 200], k_max: usize = 6 });
params!(CltParams { ns: Vec<usize> = vec![200, 500, 2000], count: usize = 100_000, ks_max: f64 = 0.05 });
params!(ConcentrationParams {
    ns: Vec<usize> = vec![200, 500],
    ts: Vec<f64> = vec![0.05, 0.1, 0.2, 0.3, 0.4],
    count: usize = 1_000_000,
});
params!(ModDevParams {
    n: usize = 10_000,
    theta: f64 = 0.1,
    interval: [f64; 2] = [1.0, 2.0],
    count: usize = 100_000,
    tolerance: f64 = 0.15,
});
params!(FcltParams { n: usize = 2000, times: Vec<f64> = vec![0.0, 0.25, 0.5, 0.75, 1.0], count: usize = 100_000 });
params!(MartingaleParams { n_max: usize = 25, table: usize = 12, tol: f64 = 1e-10, random_fields: usize = 10 });
params!(MultiCorrParams { max_block: usize = 5, max_gap: usize = 30, test_configs: usize = 50 });
params!(RosenthalParams {
    ns: Vec<usize> = vec![50, 100, 200, 400],
    ps: Vec<usize> = vec![2, 4, 6],
    max_variation: f64 = 0.2,
    maximal_ns: Vec<usize> = vec![100, 1000, 10_000],
    maximal_count: usize = 10_000,
});
params!(NonconvParams { polys: Vec<Vec<i64>> = vec![vec![0, 1], vec![0, 2]], n: usize = 1000, count: usize = 10_000 });
params!(ChfParams { len: usize = 5, ks: Vec<usize> = (2..=20).collect(), t: f64 = 0.3, count: usize = 100_000 });
params!(GateParams { n: usize = 20, count: usize = 1_000_000 });

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentParams {
    pub mix: MixParams,
    pub decay: DecayParams,
    pub variance: VarianceParams,
    pub cumulants: CumulantParams,
    pub clt: CltParams,
    pub concentration: ConcentrationParams,
    pub moddev: ModDevParams,
    pub fclt: FcltParams,
    pub martingale: MartingaleParams,
    pub multicorr: MultiCorrParams,
    pub rosenthal: RosenthalParams,
    pub nonconv: NonconvParams,
    pub chf: ChfParams,
    pub gate: GateParams,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> LabError {
    LabError::ConfigInvalid(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid("config", e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }

    pub fn build_chain(&self) -> Result<SymbolChain> {
        let states = if self.chain.states.is_empty() {
            (0..self.chain.p.len()).map(|i| i.to_string()).collect()
        } else {
            self.chain.states.clone()
        };
        if states.len() != self.chain.p.len() {
            return Err(invalid("chain.states", format!("{} labels for {} rows of P", states.len(), self.chain.p.len())));
        }
        SymbolChain::with_labels(states, self.chain.p.clone()).map_err(|e| invalid("chain.P", e))
    }

    pub fn build_maps(&self) -> Result<Vec<PiecewiseMap>> {
        self.maps
            .iter()
            .enumerate()
            .map(|(i, m)| PiecewiseMap::new(m.m, m.branches.clone()).map_err(|e| invalid(&format!("maps[{i}]"), e)))
            .collect()
    }

    /// Resolves per-symbol entries; a coboundary needs the cocycle and is
    /// handled by the caller.
    pub fn observable_fields(spec: &ObservableSpec, symbols: usize, field: &str) -> Result<Option<SymbolField>> {
        match spec {
            ObservableSpec::Coboundary { .. } => Ok(None),
            ObservableSpec::PerSymbol(entries) => {
                let mut slots: Vec<Option<GridFunction>> = vec![None; symbols];
                for (i, e) in entries.iter().enumerate() {
                    if e.symbol >= symbols {
                        return Err(invalid(&format!("{field}[{i}].symbol"), LabError::UnknownSymbol(e.symbol)));
                    }
                    if e.values.len() != e.n || e.n == 0 {
                        return Err(invalid(&format!("{field}[{i}].values"), format!("{} values for N = {}", e.values.len(), e.n)));
                    }
                    if slots[e.symbol].is_some() {
                        return Err(invalid(&format!("{field}[{i}].symbol"), format!("symbol {} given twice", e.symbol)));
                    }
                    slots[e.symbol] = Some(GridFunction::new(e.values.clone()));
                }
                let fields = slots
                    .into_iter()
                    .enumerate()
                    .map(|(s, g)| g.ok_or_else(|| invalid(field, format!("no entry for symbol {s}"))))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Some(SymbolField::new(fields)))
            }
        }
    }
}
