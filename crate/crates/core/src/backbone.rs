//! Fully connected embedding network scaled by depth and width expansion ratios.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

pub const NETWORK_MAGIC: &[u8; 4] = b"FSNW";
pub const NETWORK_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseArch {
    pub input_dim: usize,
    /// Number of hidden layers.
    pub base_depth: usize,
    pub base_width: usize,
    pub embed_dim: usize,
}

impl Default for BaseArch {
    fn default() -> Self {
        Self {
            input_dim: 32,
            base_depth: 2,
            base_width: 64,
            embed_dim: 16,
        }
    }
}

impl BaseArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.base_depth < 1 || self.base_width < 2 || self.embed_dim < 2 {
            return Err(Error::InvalidArgument(format!("invalid base architecture {self:?}")));
        }
        Ok(())
    }
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `[input_dim, w', .., w', embed_dim]` with depth' hidden entries.
    pub layer_dims: Vec<usize>,
    pub depth_ratio: f64,
    pub width_ratio: f64,
}

impl NetworkConfig {
    pub fn from_ratios(base: &BaseArch, depth_ratio: f64, width_ratio: f64) -> Result<Self> {
        base.validate()?;
        if !depth_ratio.is_finite() || !width_ratio.is_finite() {
            return Err(Error::InvalidArgument("expansion ratios must be finite".into()));
        }
        let depth = round_half_up(depth_ratio * base.base_depth as f64);
        let width = round_half_up(width_ratio * base.base_width as f64);
        if depth < 1 {
            return Err(Error::InvalidArgument(format!(
                "depth ratio {depth_ratio} gives {depth} hidden layers"
            )));
        }
        if width < 2 {
            return Err(Error::InvalidArgument(format!("width ratio {width_ratio} gives width {width}")));
        }
        let mut layer_dims = vec![base.input_dim];
        layer_dims.extend(std::iter::repeat_n(width as usize, depth as usize));
        layer_dims.push(base.embed_dim);
        Ok(Self {
            layer_dims,
            depth_ratio,
            width_ratio,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn hidden_layers(&self) -> usize {
        self.layer_dims.len() - 2
    }
}

/// Multiply-add count of all affine layers: Σ 2 · fan_in · fan_out.
pub fn flops(cfg: &NetworkConfig) -> u64 {
    cfg.layer_dims.windows(2).map(|w| 2 * w[0] as u64 * w[1] as u64).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    /// fan_in × fan_out per layer.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Per-layer inputs and pre-activations recorded by [`forward`].
#[derive(Clone, Debug)]
pub struct ActivationCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// Gradient with respect to the network input batch.
    pub input: Array2<f64>,
}

/// He-uniform weights, zero biases.
pub fn instantiate(base: &BaseArch, depth_ratio: f64, width_ratio: f64, seed: u64) -> Result<Network> {
    let config = NetworkConfig::from_ratios(base, depth_ratio, width_ratio)?;
    Ok(Network::with_config(config, seed))
}

pub(crate) fn he_uniform(rng: &mut util::Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit))
}

impl Network {
    pub fn with_config(config: NetworkConfig, seed: u64) -> Self {
        let mut rng = util::rng(seed);
        let (weights, biases) = config
            .layer_dims
            .windows(2)
            .map(|w| (he_uniform(&mut rng, w[0], w[1]), Array1::zeros(w[1])))
            .unzip();
        Self {
            config,
            weights,
            biases,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Array2::len).sum::<usize>() + self.biases.iter().map(Array1::len).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Embeddings only, without keeping a cache.
    pub fn embed(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        forward(self, batch).map(|(out, _)| out)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(NETWORK_MAGIC)?;
        util::write_u32(w, NETWORK_VERSION)?;
        util::write_u64(w, self.config.layer_dims.len() as u64)?;
        for &d in &self.config.layer_dims {
            util::write_u64(w, d as u64)?;
        }
        util::write_f64(w, self.config.depth_ratio)?;
        util::write_f64(w, self.config.width_ratio)?;
        for (wt, b) in self.weights.iter().zip(&self.biases) {
            util::write_f64s(w, wt.iter().copied())?;
            util::write_f64s(w, b.iter().copied())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        util::read_magic(r, NETWORK_MAGIC)?;
        let version = util::read_u32(r)?;
        if version != NETWORK_VERSION {
            return Err(Error::SchemaVersion {
                found: version,
                expected: NETWORK_VERSION,
            });
        }
        let n = util::checked_len(util::read_u64(r)?, "layer count")?;
        if n < 2 {
            return Err(Error::Format("network needs at least two layer dims".into()));
        }
        let layer_dims = (0..n)
            .map(|_| util::read_u64(r).map_err(Error::from).and_then(|v| util::checked_len(v, "layer dim")))
            .collect::<Result<Vec<_>>>()?;
        let depth_ratio = util::read_f64(r)?;
        let width_ratio = util::read_f64(r)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            let data = util::read_f64s(r, w[0] * w[1])?;
            weights.push(Array2::from_shape_vec((w[0], w[1]), data).map_err(|e| Error::Format(e.to_string()))?);
            biases.push(Array1::from(util::read_f64s(r, w[1])?));
        }
        Ok(Self {
            config: NetworkConfig {
                layer_dims,
                depth_ratio,
                width_ratio,
            },
            weights,
            biases,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Affine + ReLU stack; the output layer is linear and not normalized.
pub fn forward(net: &Network, batch: &Array2<f64>) -> Result<(Array2<f64>, ActivationCache)> {
    if batch.ncols() != net.config.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} columns, network expects {}",
            batch.ncols(),
            net.config.input_dim()
        )));
    }
    let last = net.n_layers() - 1;
    let mut inputs = Vec::with_capacity(net.n_layers());
    let mut pre = Vec::with_capacity(net.n_layers());
    let mut a = batch.clone();
    for (l, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
        let z = a.dot(w) + b;
        inputs.push(a);
        a = if l < last { z.mapv(|v| v.max(0.0)) } else { z.clone() };
        pre.push(z);
    }
    Ok((a, ActivationCache { inputs, pre }))
}

/// Gradients of all parameters given the gradient at the network output.
pub fn backward(net: &Network, cache: &ActivationCache, grad_out: &Array2<f64>) -> Result<NetworkGrads> {
    let nl = net.n_layers();
    if cache.inputs.len() != nl || cache.pre.len() != nl {
        return Err(Error::Shape("activation cache does not match the network depth".into()));
    }
    for (l, w) in net.weights.iter().enumerate() {
        if cache.inputs[l].ncols() != w.nrows() || cache.pre[l].ncols() != w.ncols() {
            return Err(Error::Shape(format!("activation cache is stale at layer {l}")));
        }
    }
    if grad_out.dim() != cache.pre[nl - 1].dim() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} vs output {:?}",
            grad_out.dim(),
            cache.pre[nl - 1].dim()
        )));
    }
    let mut gw = vec![Array2::zeros((0, 0)); nl];
    let mut gb = vec![Array1::zeros(0); nl];
    let mut delta = grad_out.clone();
    for l in (0..nl).rev() {
        if l < nl - 1 {
            delta.zip_mut_with(&cache.pre[l], |d, &z| {
                if z <= 0.0 {
                    *d = 0.0
                }
            });
        }
        gw[l] = cache.inputs[l].t().dot(&delta);
        gb[l] = delta.sum_axis(Axis(0));
        delta = delta.dot(&net.weights[l].t());
    }
    Ok(NetworkGrads {
        weights: gw,
        biases: gb,
        input: delta,
    })
}
