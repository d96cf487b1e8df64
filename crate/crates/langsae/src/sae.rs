//! Top-k sparse autoencoder over pooled embeddings.
//!
//! Forward pass: z = ReLU(W_enc e + b_enc), keep the k largest activations,
//! decode with W_dec z + b_dec. Training minimizes mean squared
//! reconstruction error plus a usage loss that penalizes units whose
//! estimated activation frequency falls below a target, so the dictionary
//! does not accumulate dead features.

pub mod checkpoint;
pub mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, top_k_indices, DenseMatrix, DenseVector, NumericsError, SeededRng};

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch has zero variance; FVU is undefined")]
    ZeroVariance,
    #[error("loss became non-finite at step {step}; aborting with the last good model")]
    NonFiniteLoss { step: usize, last_good: Box<train::TrainOutcome> },
    #[error("bad magic bytes (not a checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Encoder/decoder weights. Weight accessors hand out mutable slices for
/// optimizer updates and finite-difference probes; callers must keep values
/// finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    d: usize,
    m: usize,
    k: usize,
    w_enc: DenseMatrix,
    b_enc: Vec<f64>,
    w_dec: DenseMatrix,
    b_dec: Vec<f64>,
}

impl SaeModel {
    pub fn new(
        d: usize,
        m: usize,
        k: usize,
        w_enc: DenseMatrix,
        b_enc: Vec<f64>,
        w_dec: DenseMatrix,
        b_dec: Vec<f64>,
    ) -> Result<Self, SaeError> {
        if m < d {
            return Err(SaeError::InvalidModel(format!("m = {m} must be >= d = {d}")));
        }
        if k == 0 || k > m {
            return Err(SaeError::InvalidModel(format!("k = {k} must be in 1..={m}")));
        }
        let shape_ok = w_enc.rows() == m
            && w_enc.cols() == d
            && b_enc.len() == m
            && w_dec.rows() == d
            && w_dec.cols() == m
            && b_dec.len() == d;
        if !shape_ok {
            return Err(SaeError::InvalidModel("weight shapes do not match d/m".into()));
        }
        if !b_enc.iter().chain(&b_dec).all(|v| v.is_finite()) {
            return Err(SaeError::InvalidModel("non-finite bias".into()));
        }
        Ok(Self { d, m, k, w_enc, b_enc, w_dec, b_dec })
    }

    /// Fresh model: encoder rows are unit-norm Gaussian directions scaled by
    /// 1/sqrt(d), the decoder starts as the encoder transpose, biases zero.
    pub fn init(d: usize, m: usize, k: usize, rng: &mut SeededRng) -> Result<Self, SaeError> {
        let scale = 1.0 / (d as f64).sqrt();
        let mut w_enc = DenseMatrix::zeros(m, d);
        for i in 0..m {
            let mut row = rng.normal_vec(d);
            let n = crate::numerics::l2_norm(&row);
            if n < 1e-12 {
                return Err(SaeError::InvalidModel("degenerate init draw".into()));
            }
            row.iter_mut().for_each(|v| *v *= scale / n);
            w_enc.row_mut(i).copy_from_slice(&row);
        }
        let w_dec = w_enc.transpose();
        Self::new(d, m, k, w_enc, vec![0.0; m], w_dec, vec![0.0; d])
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn w_enc(&self) -> &DenseMatrix {
        &self.w_enc
    }

    pub fn b_enc(&self) -> &[f64] {
        &self.b_enc
    }

    pub fn w_dec(&self) -> &DenseMatrix {
        &self.w_dec
    }

    pub fn b_dec(&self) -> &[f64] {
        &self.b_dec
    }

    pub fn w_enc_mut(&mut self) -> &mut DenseMatrix {
        &mut self.w_enc
    }

    pub fn b_enc_mut(&mut self) -> &mut [f64] {
        &mut self.b_enc
    }

    pub fn w_dec_mut(&mut self) -> &mut DenseMatrix {
        &mut self.w_dec
    }

    pub fn b_dec_mut(&mut self) -> &mut [f64] {
        &mut self.b_dec
    }

    /// Raw encoder pre-activations W_enc e + b_enc, length m.
    pub fn pre_activations(&self, e: &[f64]) -> Vec<f64> {
        let mut pre = Vec::with_capacity(self.m);
        for i in 0..self.m {
            pre.push(dot(self.w_enc.row(i), e) + self.b_enc[i]);
        }
        pre
    }

    /// Sparse code: top-k of the rectified pre-activations, zeros dropped.
    pub fn encode(&self, e: &DenseVector) -> Result<SparseCode, SaeError> {
        if e.dim() != self.d {
            return Err(SaeError::DimensionMismatch {
                what: "encode input",
                expected: self.d,
                got: e.dim(),
            });
        }
        Ok(self.encode_row(e.data()))
    }

    fn encode_row(&self, e: &[f64]) -> SparseCode {
        let pre = self.pre_activations(e);
        let z: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let mut picked = top_k_indices(&z, self.k);
        picked.retain(|&i| z[i] > 0.0);
        picked.sort_unstable();
        let entries = picked.into_iter().map(|i| (i, z[i])).collect();
        SparseCode { entries, dim: self.m }
    }

    /// Row-wise encode; output order matches input order.
    pub fn encode_batch(&self, batch: &DenseMatrix) -> Result<Vec<SparseCode>, SaeError> {
        if batch.cols() != self.d {
            return Err(SaeError::DimensionMismatch {
                what: "encode batch",
                expected: self.d,
                got: batch.cols(),
            });
        }
        Ok((0..batch.rows())
            .into_par_iter()
            .map(|r| self.encode_row(batch.row(r)))
            .collect())
    }

    /// W_dec z + b_dec using only the stored nonzero entries.
    pub fn decode(&self, code: &SparseCode) -> Result<DenseVector, SaeError> {
        if code.dim != self.m {
            return Err(SaeError::DimensionMismatch {
                what: "decode input",
                expected: self.m,
                got: code.dim,
            });
        }
        let mut out = self.b_dec.clone();
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.w_dec.row(r);
            for &(i, v) in &code.entries {
                *o += row[i] * v;
            }
        }
        DenseVector::new(out).map_err(SaeError::from)
    }
}

/// Nonzero latent activations of one example: (index, value) pairs with
/// strictly increasing indices and strictly positive values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    entries: Vec<(usize, f64)>,
    dim: usize,
}

impl SparseCode {
    pub fn new(entries: Vec<(usize, f64)>, dim: usize) -> Result<Self, SaeError> {
        for w in entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(SaeError::InvalidModel("code indices must strictly increase".into()));
            }
        }
        for &(i, v) in &entries {
            if i >= dim {
                return Err(SaeError::InvalidModel(format!("code index {i} out of range {dim}")));
            }
            if !(v > 0.0) || !v.is_finite() {
                return Err(SaeError::InvalidModel("code values must be positive finite".into()));
            }
        }
        Ok(Self { entries, dim })
    }

    pub fn empty(dim: usize) -> Self {
        Self { entries: Vec::new(), dim }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    /// New code keeping only entries whose index passes the filter.
    pub fn filter_indices(&self, mut keep: impl FnMut(usize) -> bool) -> SparseCode {
        SparseCode {
            entries: self.entries.iter().copied().filter(|&(i, _)| keep(i)).collect(),
            dim: self.dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub aux_coefficient: f64,
    pub usage_target: f64,
    pub sigmoid_temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            aux_coefficient: 0.1,
            usage_target: 0.02,
            sigmoid_temperature: 0.05,
            batch_size: 1024,
            epochs: 1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SaeError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("sigmoid_temperature", self.sigmoid_temperature),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SaeError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.aux_coefficient < 0.0 || !self.aux_coefficient.is_finite() {
            return Err(SaeError::InvalidConfig("aux_coefficient must be >= 0".into()));
        }
        if !(self.usage_target > 0.0 && self.usage_target < 1.0) {
            return Err(SaeError::InvalidConfig("usage_target must be in (0,1)".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(SaeError::InvalidConfig(format!("{name} must be in (0,1)")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(SaeError::InvalidConfig("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub mse_loss: f64,
    pub aux_loss: f64,
    pub fvu: f64,
    pub dead_feature_fraction: f64,
    pub mean_l0: f64,
}

/// Mean reconstruction error: per example the squared L2 distance summed
/// over coordinates, averaged over the batch.
pub fn reconstruction_loss(model: &SaeModel, batch: &DenseMatrix) -> Result<f64, SaeError> {
    if batch.rows() == 0 {
        return Err(SaeError::EmptyBatch);
    }
    let codes = model.encode_batch(batch)?;
    let mut total = 0.0;
    for (r, code) in codes.iter().enumerate() {
        let recon = model.decode(code)?;
        let e = batch.row(r);
        total += e
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / batch.rows() as f64)
}

/// Mean squared usage deficit: mean_i max(0, target - f_i)^2.
pub fn aux_usage_loss(freq_estimate: &[f64], target: f64) -> f64 {
    debug_assert!(freq_estimate.iter().all(|f| (0.0..=1.0).contains(f)));
    if freq_estimate.is_empty() {
        return 0.0;
    }
    let sum: f64 = freq_estimate
        .iter()
        .map(|f| {
            let deficit = (target - f).max(0.0);
            deficit * deficit
        })
        .sum();
    sum / freq_estimate.len() as f64
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Differentiable per-unit usage estimate: batch mean of a wide sigmoid over
/// the raw encoder pre-activations. The raw value (not the rectified one) is
/// used so a unit that never fires sits below the target and receives a
/// revival gradient; the rectified value saturates the sigmoid at 0.5 for
/// dead units, where no deficit can ever register.
pub fn usage_estimate(
    model: &SaeModel,
    batch: &DenseMatrix,
    temperature: f64,
) -> Result<Vec<f64>, SaeError> {
    if batch.rows() == 0 {
        return Err(SaeError::EmptyBatch);
    }
    if batch.cols() != model.d {
        return Err(SaeError::DimensionMismatch {
            what: "usage batch",
            expected: model.d,
            got: batch.cols(),
        });
    }
    let mut acc = vec![0.0; model.m];
    for r in 0..batch.rows() {
        let pre = model.pre_activations(batch.row(r));
        for (a, p) in acc.iter_mut().zip(&pre) {
            *a += sigmoid(p / temperature);
        }
    }
    let inv = 1.0 / batch.rows() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

/// Reconstruction and sparsity summary of a model on a batch.
pub fn eval_stats(
    model: &SaeModel,
    batch: &DenseMatrix,
    cfg: &TrainConfig,
) -> Result<TrainStats, SaeError> {
    if batch.rows() == 0 {
        return Err(SaeError::EmptyBatch);
    }
    let mean = batch.column_mean()?;
    let mut den = 0.0;
    for r in 0..batch.rows() {
        den += batch
            .row(r)
            .iter()
            .zip(mean.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    if den < 1e-30 {
        return Err(SaeError::ZeroVariance);
    }
    let codes = model.encode_batch(batch)?;
    let mut num = 0.0;
    let mut l0_sum = 0usize;
    let mut active = vec![false; model.m];
    for (r, code) in codes.iter().enumerate() {
        let recon = model.decode(code)?;
        num += batch
            .row(r)
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        l0_sum += code.len();
        for i in code.indices() {
            active[i] = true;
        }
    }
    let n = batch.rows() as f64;
    let freq = usage_estimate(model, batch, cfg.sigmoid_temperature)?;
    Ok(TrainStats {
        mse_loss: num / n,
        aux_loss: aux_usage_loss(&freq, cfg.usage_target),
        fvu: num / den,
        dead_feature_fraction: active.iter().filter(|a| !**a).count() as f64 / model.m as f64,
        mean_l0: l0_sum as f64 / n,
    })
}
