//! Discretized joint search space and token <-> combination conversion.
//!
//! Tokens are emitted in a fixed order: the two cleaning thresholds, the five
//! loss parameters, then the two expansion ratios.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BaseArch, NetworkConfig};
use crate::cleaner::CleanParams;
use crate::error::{Error, Result};
use crate::marginloss::LossParams;

pub const N_PARAMS: usize = 9;
pub const PARAM_NAMES: [&str; N_PARAMS] = ["tau_intra", "tau_inter", "m1", "m2", "m3", "s_p", "s_n", "D", "W"];
pub const SPACE_SCHEMA_VERSION: u32 = 1;

/// Tolerance for matching a value to a grid entry.
pub const GRID_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub schema_version: u32,
    pub grids: Vec<Grid>,
}

/// One joint assignment of all nine searched hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Combination {
    pub tau_intra: f64,
    pub tau_inter: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub s_p: f64,
    pub s_n: f64,
    #[serde(rename = "D")]
    pub depth_ratio: f64,
    #[serde(rename = "W")]
    pub width_ratio: f64,
}

impl Combination {
    pub fn from_values(v: [f64; N_PARAMS]) -> Self {
        Self {
            tau_intra: v[0],
            tau_inter: v[1],
            m1: v[2],
            m2: v[3],
            m3: v[4],
            s_p: v[5],
            s_n: v[6],
            depth_ratio: v[7],
            width_ratio: v[8],
        }
    }

    pub fn values(&self) -> [f64; N_PARAMS] {
        [
            self.tau_intra,
            self.tau_inter,
            self.m1,
            self.m2,
            self.m3,
            self.s_p,
            self.s_n,
            self.depth_ratio,
            self.width_ratio,
        ]
    }

    pub fn clean_params(&self) -> CleanParams {
        CleanParams::new(self.tau_intra, self.tau_inter)
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams {
            m1: self.m1,
            m2: self.m2,
            m3: self.m3,
            s_p: self.s_p,
            s_n: self.s_n,
        }
    }

    pub fn network_config(&self, base: &BaseArch) -> Result<NetworkConfig> {
        NetworkConfig::from_ratios(base, self.depth_ratio, self.width_ratio)
    }

    /// Parses nine comma-separated values in token order.
    pub fn parse(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad combination '{s}': {e}")))?;
        let arr: [f64; N_PARAMS] = vals
            .try_into()
            .map_err(|v: Vec<f64>| Error::InvalidArgument(format!("expected 9 values, got {}", v.len())))?;
        Ok(Self::from_values(arr))
    }
}

fn ratio_grid(extra: [f64; 2]) -> Vec<f64> {
    let mut v: Vec<f64> = (0..=12).map(|i| (500 + 125 * i) as f64 / 1000.0).collect();
    v.extend(extra);
    v.sort_by(f64::total_cmp);
    v
}

fn stepped(start: u32, step: u32, count: u32) -> Vec<f64> {
    (0..count).map(|i| (start + step * i) as f64 / 100.0).collect()
}

/// Default grids, chosen to contain every best combination reported for the
/// method.
pub fn default_space() -> SearchSpace {
    let scales = vec![16.0, 24.0, 32.0, 40.0, 48.0, 64.0];
    let values = [
        stepped(10, 2, 21),
        stepped(50, 2, 21),
        stepped(90, 5, 9),
        stepped(0, 2, 26),
        stepped(0, 5, 9),
        scales.clone(),
        scales,
        ratio_grid([1.22, 1.47]),
        ratio_grid([0.84, 0.91]),
    ];
    SearchSpace {
        schema_version: SPACE_SCHEMA_VERSION,
        grids: PARAM_NAMES
            .iter()
            .zip(values)
            .map(|(n, values)| Grid {
                name: n.to_string(),
                values,
            })
            .collect(),
    }
}

impl SearchSpace {
    /// Builds a space from nine grids in token order.
    pub fn from_grids(values: [Vec<f64>; N_PARAMS]) -> Result<Self> {
        let s = SearchSpace {
            schema_version: SPACE_SCHEMA_VERSION,
            grids: PARAM_NAMES
                .iter()
                .zip(values)
                .map(|(n, values)| Grid {
                    name: n.to_string(),
                    values,
                })
                .collect(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SPACE_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: SPACE_SCHEMA_VERSION,
            });
        }
        if self.grids.len() != N_PARAMS {
            return Err(Error::InvalidArgument(format!("expected 9 grids, got {}", self.grids.len())));
        }
        for (g, name) in self.grids.iter().zip(PARAM_NAMES) {
            if g.name != name {
                return Err(Error::InvalidArgument(format!("grid '{}' found where '{name}' expected", g.name)));
            }
            if g.values.is_empty() {
                return Err(Error::InvalidArgument(format!("grid {name} is empty")));
            }
            if g.values.iter().any(|v| !v.is_finite()) || g.values.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!("grid {name} must be finite and strictly increasing")));
            }
        }
        Ok(())
    }

    pub fn sizes(&self) -> [usize; N_PARAMS] {
        std::array::from_fn(|i| self.grids[i].values.len())
    }

    pub fn cardinality(&self) -> u128 {
        self.sizes().iter().map(|&s| s as u128).product()
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<Combination> {
        if tokens.len() != N_PARAMS {
            return Err(Error::InvalidArgument(format!("expected 9 tokens, got {}", tokens.len())));
        }
        let mut vals = [0.0; N_PARAMS];
        for (i, (&t, g)) in tokens.iter().zip(&self.grids).enumerate() {
            vals[i] = *g.values.get(t).ok_or(Error::TokenOutOfRange {
                param: PARAM_NAMES[i],
                token: t,
                len: g.values.len(),
            })?;
        }
        Ok(Combination::from_values(vals))
    }

    pub fn encode(&self, c: &Combination) -> Result<Vec<usize>> {
        c.values()
            .iter()
            .zip(&self.grids)
            .enumerate()
            .map(|(i, (&v, g))| {
                g.values
                    .iter()
                    .position(|&x| (x - v).abs() <= GRID_TOL)
                    .ok_or(Error::OffGrid {
                        param: PARAM_NAMES[i],
                        value: v,
                    })
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: SearchSpace = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Formats tokens as `a-b-c-...` for logs.
pub fn format_tokens(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

pub fn parse_tokens(s: &str) -> Result<Vec<usize>> {
    s.split('-')
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("bad token list '{s}': {e}")))
}
