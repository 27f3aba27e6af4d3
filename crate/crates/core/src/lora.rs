//! Low-rank adapters: configuration, per-layer pairs, stacks, and the
//! geometry used by aggregation, attacks, and detectors.
//!
//! An adapter for a layer mapping `d_in → d_out` holds `A` (`d_out × r`) and
//! `B` (`r × d_in`); its effective weight update is `(lora_scale / r) · A·B`.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::rng::{self, Role};

/// Norms below this are treated as zero when forming cosines.
pub const DEGENERATE_NORM: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub layers: Vec<LayerDims>,
    pub rank: usize,
    pub lora_scale: f64,
    pub init_std: f64,
}

impl LoraConfig {
    /// Chain configuration: layer `l` maps `dims[l] → dims[l + 1]`.
    pub fn chain(dims: &[usize], rank: usize, lora_scale: f64, init_std: f64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "need at least two dims for one layer, got {}",
                dims.len()
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| LayerDims {
                d_in: w[0],
                d_out: w[1],
            })
            .collect();
        let cfg = Self {
            layers,
            rank,
            lora_scale,
            init_std,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("no layers".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        for (l, d) in self.layers.iter().enumerate() {
            if d.d_in == 0 || d.d_out == 0 {
                return Err(Error::Config(format!("layer {l} has a zero dimension")));
            }
            if self.rank > d.d_in.min(d.d_out) {
                return Err(Error::Config(format!(
                    "rank {} exceeds min(d_in, d_out) = {} at layer {l}",
                    self.rank,
                    d.d_in.min(d.d_out)
                )));
            }
        }
        if !(self.lora_scale.is_finite() && self.lora_scale > 0.0) {
            return Err(Error::Config(format!(
                "lora_scale must be positive, got {}",
                self.lora_scale
            )));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config(format!(
                "init_std must be non-negative, got {}",
                self.init_std
            )));
        }
        Ok(())
    }

    /// Checks that consecutive layers compose (`d_in` of layer `l` equals
    /// `d_out` of layer `l − 1`).
    pub fn validate_chain(&self) -> Result<()> {
        for (l, w) in self.layers.windows(2).enumerate() {
            if w[1].d_in != w[0].d_out {
                return Err(Error::Config(format!(
                    "layer {} d_in {} does not match layer {l} d_out {}",
                    l + 1,
                    w[1].d_in,
                    w[0].d_out
                )));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// The factor `lora_scale / r` applied to `A·B`.
    pub fn scaling(&self) -> f64 {
        self.lora_scale / self.rank as f64
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        let d = self.layers[layer];
        d.d_out * self.rank + self.rank * d.d_in
    }

    pub fn flat_len(&self) -> usize {
        (0..self.num_layers()).map(|l| self.layer_len(l)).sum()
    }

    /// Range of layer `layer` inside [`flatten`]'s output.
    pub fn layer_span(&self, layer: usize) -> Range<usize> {
        let start: usize = (0..layer).map(|l| self.layer_len(l)).sum();
        start..start + self.layer_len(layer)
    }
}

/// Which factor of an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Factor {
    A,
    B,
}

impl Factor {
    pub const BOTH: [Factor; 2] = [Factor::A, Factor::B];

    pub fn name(self) -> &'static str {
        match self {
            Factor::A => "A",
            Factor::B => "B",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub layer_id: usize,
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraAdapter {
    pub fn zeros(config: &LoraConfig, layer_id: usize) -> Self {
        let d = config.layers[layer_id];
        Self {
            layer_id,
            a: Matrix::zeros(d.d_out, config.rank),
            b: Matrix::zeros(config.rank, d.d_in),
        }
    }

    pub fn factor(&self, f: Factor) -> &Matrix {
        match f {
            Factor::A => &self.a,
            Factor::B => &self.b,
        }
    }

    pub fn factor_mut(&mut self, f: Factor) -> &mut Matrix {
        match f {
            Factor::A => &mut self.a,
            Factor::B => &mut self.b,
        }
    }

    pub fn check_dims(&self, config: &LoraConfig) -> Result<()> {
        let Some(d) = config.layers.get(self.layer_id) else {
            return Err(Error::Shape(format!(
                "layer id {} outside config with {} layers",
                self.layer_id,
                config.num_layers()
            )));
        };
        if self.a.shape() != (d.d_out, config.rank) || self.b.shape() != (config.rank, d.d_in) {
            return Err(Error::Shape(format!(
                "layer {}: A {:?}, B {:?}, expected A ({}, {r}) and B ({r}, {})",
                self.layer_id,
                self.a.shape(),
                self.b.shape(),
                d.d_out,
                d.d_in,
                r = config.rank
            )));
        }
        Ok(())
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.a.as_slice());
        out.extend_from_slice(self.b.as_slice());
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.a.len() + self.b.len());
        self.flatten_into(&mut v);
        v
    }
}

/// One adapter per layer, ordered by `layer_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraStack {
    adapters: Vec<LoraAdapter>,
}

impl LoraStack {
    pub fn new(adapters: Vec<LoraAdapter>) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::Shape("a stack needs at least one adapter".into()));
        }
        for (i, a) in adapters.iter().enumerate() {
            if a.layer_id != i {
                return Err(Error::Shape(format!(
                    "adapter at position {i} has layer id {}",
                    a.layer_id
                )));
            }
            if a.a.cols() != a.b.rows() {
                return Err(Error::Shape(format!(
                    "layer {i}: A has {} columns but B has {} rows",
                    a.a.cols(),
                    a.b.rows()
                )));
            }
        }
        Ok(Self { adapters })
    }

    pub fn zeros(config: &LoraConfig) -> Self {
        Self {
            adapters: (0..config.num_layers())
                .map(|l| LoraAdapter::zeros(config, l))
                .collect(),
        }
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn layer(&self, l: usize) -> &LoraAdapter {
        &self.adapters[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LoraAdapter {
        &mut self.adapters[l]
    }

    pub fn num_layers(&self) -> usize {
        self.adapters.len()
    }

    pub fn check_dims(&self, config: &LoraConfig) -> Result<()> {
        if self.num_layers() != config.num_layers() {
            return Err(Error::Shape(format!(
                "stack has {} layers, config has {}",
                self.num_layers(),
                config.num_layers()
            )));
        }
        self.adapters.iter().try_for_each(|a| a.check_dims(config))
    }

    pub fn is_finite(&self) -> bool {
        self.adapters
            .iter()
            .all(|a| a.a.is_finite() && a.b.is_finite())
    }

    /// Every layer composed with `config`'s scaling.
    pub fn composites(&self, config: &LoraConfig) -> Result<Vec<Matrix>> {
        self.adapters.iter().map(|a| compose(a, config)).collect()
    }
}

/// Draws a fresh adapter: `A` entries i.i.d. `N(0, init_std²)`, `B = 0`.
pub fn init_adapter<R: Rng + ?Sized>(
    config: &LoraConfig,
    layer_id: usize,
    rng: &mut R,
) -> Result<LoraAdapter> {
    config.validate()?;
    if layer_id >= config.num_layers() {
        return Err(Error::Config(format!(
            "layer id {layer_id} outside config with {} layers",
            config.num_layers()
        )));
    }
    let mut adapter = LoraAdapter::zeros(config, layer_id);
    let std = config.init_std;
    for v in adapter.a.as_mut_slice() {
        let z: f64 = rng.sample(StandardNormal);
        *v = std * z;
    }
    Ok(adapter)
}

/// Initial stack for `owner`, layer `l` drawn from stream
/// `(seed, AdapterInit, owner, l)`.
pub fn init_stack(config: &LoraConfig, seed: u64, owner: u64) -> Result<LoraStack> {
    let adapters = (0..config.num_layers())
        .map(|l| {
            let mut r = rng::stream(seed, Role::AdapterInit, owner, l as u64);
            init_adapter(config, l, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    LoraStack::new(adapters)
}

/// Effective update `ΔW = (lora_scale / r) · A·B`.
pub fn compose(adapter: &LoraAdapter, config: &LoraConfig) -> Result<Matrix> {
    if adapter.a.cols() != adapter.b.rows() {
        return Err(Error::Shape(format!(
            "compose: A {:?} and B {:?} disagree on rank",
            adapter.a.shape(),
            adapter.b.shape()
        )));
    }
    Ok(adapter.a.matmul(&adapter.b)?.scale(config.scaling()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorNorms {
    pub norm_a: f64,
    pub norm_b: f64,
}

impl FactorNorms {
    pub fn get(&self, f: Factor) -> f64 {
        match f {
            Factor::A => self.norm_a,
            Factor::B => self.norm_b,
        }
    }
}

/// Per-layer `‖A − A_ref‖_F` and `‖B − B_ref‖_F`.
pub fn deviation_norms(stack: &LoraStack, reference: &LoraStack) -> Result<Vec<FactorNorms>> {
    if stack.num_layers() != reference.num_layers() {
        return Err(Error::Shape(format!(
            "deviation_norms: {} layers vs {}",
            stack.num_layers(),
            reference.num_layers()
        )));
    }
    stack
        .adapters
        .iter()
        .zip(&reference.adapters)
        .map(|(s, r)| {
            Ok(FactorNorms {
                norm_a: s.a.distance(&r.a)?,
                norm_b: s.b.distance(&r.b)?,
            })
        })
        .collect()
}

/// Concatenates layers in order, `A` before `B`, each row-major.
pub fn flatten(stack: &LoraStack) -> Vec<f64> {
    let mut out = Vec::new();
    for a in &stack.adapters {
        a.flatten_into(&mut out);
    }
    out
}

pub fn unflatten(flat: &[f64], config: &LoraConfig) -> Result<LoraStack> {
    if flat.len() != config.flat_len() {
        return Err(Error::Shape(format!(
            "unflatten: {} values for a layout of {}",
            flat.len(),
            config.flat_len()
        )));
    }
    let mut pos = 0;
    let mut take = |rows: usize, cols: usize| {
        let m = Matrix::new(rows, cols, flat[pos..pos + rows * cols].to_vec());
        pos += rows * cols;
        m
    };
    let adapters = config
        .layers
        .iter()
        .enumerate()
        .map(|(l, d)| {
            Ok(LoraAdapter {
                layer_id: l,
                a: take(d.d_out, config.rank)?,
                b: take(config.rank, d.d_in)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LoraStack::new(adapters)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distances {
    pub euclidean: f64,
    pub cosine: f64,
}

/// Cosine similarity, or `None` when either vector is degenerate.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Option<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu < DEGENERATE_NORM || nv < DEGENERATE_NORM {
        None
    } else {
        Some((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
    }
}

/// Euclidean and cosine distance. A degenerate (near-zero) vector is
/// maximally dissimilar: cosine distance 1.
pub fn vector_distances(u: &[f64], v: &[f64]) -> Result<Distances> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "vector_distances: lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let euclidean = u
        .iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let cosine = cosine_similarity(u, v).map_or(1.0, |c| 1.0 - c);
    Ok(Distances { euclidean, cosine })
}
