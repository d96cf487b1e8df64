//! Training loop: Adam on mean-squared reconstruction plus the weighted
//! usage loss. Top-k selection is straight-through: the support chosen in
//! the forward pass is held constant for the step and gradients flow only
//! through the selected units.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aux_usage_loss, SaeError, SaeModel, TrainConfig, TrainStats};
use crate::numerics::{dot, matmul, top_k_indices, DenseMatrix, SeededRng};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: TrainStats,
    pub validation: Option<TrainStats>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SaeModel,
    pub history: Vec<EpochStats>,
}

/// Gradients for each weight group, in the same layouts as the model.
pub struct Gradients {
    pub w_enc: DenseMatrix,
    pub b_enc: Vec<f64>,
    pub w_dec: DenseMatrix,
    pub b_dec: Vec<f64>,
}

/// Per-example top-k supports (sorted ascending, strictly positive units).
pub fn compute_supports(model: &SaeModel, batch: &DenseMatrix) -> Result<Vec<Vec<usize>>, SaeError> {
    let fwd = forward(model, batch, None, &TrainConfig { aux_coefficient: 0.0, ..TrainConfig::default() })?;
    Ok(fwd.supports)
}

struct Forward {
    /// B x m pre-activations.
    p: DenseMatrix,
    supports: Vec<Vec<usize>>,
    /// B x d residual (reconstruction minus input).
    residual: DenseMatrix,
    /// m x d decoder transpose, reused by the backward pass.
    w_dec_t: DenseMatrix,
    mse: f64,
    /// sigma(P/T) when the usage loss is active.
    soft: Option<DenseMatrix>,
    deficits: Vec<f64>,
    aux: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn forward(
    model: &SaeModel,
    batch: &DenseMatrix,
    given_supports: Option<&[Vec<usize>]>,
    cfg: &TrainConfig,
) -> Result<Forward, SaeError> {
    let b = batch.rows();
    let (d, m) = (model.d(), model.m());
    if batch.cols() != d {
        return Err(SaeError::DimensionMismatch { what: "train batch", expected: d, got: batch.cols() });
    }
    if b == 0 {
        return Err(SaeError::EmptyBatch);
    }
    let w_enc_t = model.w_enc().transpose();
    let mut p = matmul(batch, &w_enc_t)?;
    for r in 0..b {
        let row = p.row_mut(r);
        for (v, bias) in row.iter_mut().zip(model.b_enc()) {
            *v += bias;
        }
    }
    let supports: Vec<Vec<usize>> = match given_supports {
        Some(s) => {
            if s.len() != b {
                return Err(SaeError::DimensionMismatch { what: "supports", expected: b, got: s.len() });
            }
            s.to_vec()
        }
        None => (0..b)
            .into_par_iter()
            .map(|r| {
                let z: Vec<f64> = p.row(r).iter().map(|v| v.max(0.0)).collect();
                let mut picked = top_k_indices(&z, model.k());
                picked.retain(|&i| z[i] > 0.0);
                picked.sort_unstable();
                picked
            })
            .collect(),
    };

    let w_dec_t = model.w_dec().transpose();
    let mut residual = DenseMatrix::zeros(b, d);
    let mut mse = 0.0;
    for r in 0..b {
        let out = residual.row_mut(r);
        out.copy_from_slice(model.b_dec());
        for &i in &supports[r] {
            let z = p.get(r, i).max(0.0);
            if z == 0.0 {
                continue;
            }
            let col = w_dec_t.row(i);
            for (o, w) in out.iter_mut().zip(col) {
                *o += z * w;
            }
        }
        let e = batch.row(r);
        for (o, x) in out.iter_mut().zip(e) {
            *o -= x;
            mse += *o * *o;
        }
    }
    mse /= b as f64;

    let (soft, deficits, aux) = if cfg.aux_coefficient > 0.0 {
        let mut soft = DenseMatrix::zeros(b, m);
        let inv_t = 1.0 / cfg.sigmoid_temperature;
        for r in 0..b {
            let src = p.row(r);
            let dst = soft.row_mut(r);
            for (s, v) in dst.iter_mut().zip(src) {
                *s = sigmoid(v * inv_t);
            }
        }
        let mut freq = vec![0.0; m];
        for r in 0..b {
            for (f, s) in freq.iter_mut().zip(soft.row(r)) {
                *f += s;
            }
        }
        let inv_b = 1.0 / b as f64;
        freq.iter_mut().for_each(|f| *f *= inv_b);
        let aux = aux_usage_loss(&freq, cfg.usage_target);
        let deficits = freq.iter().map(|f| (cfg.usage_target - f).max(0.0)).collect();
        (Some(soft), deficits, aux)
    } else {
        (None, Vec::new(), 0.0)
    };

    Ok(Forward { p, supports, residual, w_dec_t, mse, soft, deficits, aux })
}

fn backward(model: &SaeModel, batch: &DenseMatrix, fwd: &Forward, cfg: &TrainConfig) -> Result<Gradients, SaeError> {
    let b = batch.rows();
    let (d, m) = (model.d(), model.m());
    let c = 2.0 / b as f64;

    let mut b_dec = vec![0.0; d];
    for r in 0..b {
        for (g, v) in b_dec.iter_mut().zip(fwd.residual.row(r)) {
            *g += c * v;
        }
    }

    // Decoder gradient accumulated transposed (m x d) so writes are
    // row-contiguous, then flipped to the model layout.
    let mut w_dec_t_grad = DenseMatrix::zeros(m, d);
    // Selected-unit gradients (straight-through): nonzero only on supports.
    let mut g = DenseMatrix::zeros(b, m);
    for r in 0..b {
        let res = fwd.residual.row(r);
        for &i in &fwd.supports[r] {
            let z = fwd.p.get(r, i).max(0.0);
            if z > 0.0 {
                let dst = w_dec_t_grad.row_mut(i);
                for (gv, rv) in dst.iter_mut().zip(res) {
                    *gv += c * z * rv;
                }
            }
            if fwd.p.get(r, i) > 0.0 {
                g.set(r, i, c * dot(res, fwd.w_dec_t.row(i)));
            }
        }
    }

    if let Some(soft) = &fwd.soft {
        let any_deficit = fwd.deficits.iter().any(|&v| v > 0.0);
        if any_deficit {
            let coef = -2.0 * cfg.aux_coefficient
                / (m as f64 * b as f64 * cfg.sigmoid_temperature);
            for r in 0..b {
                let srow = soft.row(r);
                let grow = g.row_mut(r);
                for i in 0..m {
                    let deficit = fwd.deficits[i];
                    if deficit > 0.0 {
                        let s = srow[i];
                        grow[i] += coef * deficit * s * (1.0 - s);
                    }
                }
            }
        }
    }

    let mut b_enc = vec![0.0; m];
    for r in 0..b {
        for (acc, v) in b_enc.iter_mut().zip(g.row(r)) {
            *acc += v;
        }
    }
    let w_enc = matmul(&g.transpose(), batch)?;
    Ok(Gradients { w_enc, b_enc, w_dec: w_dec_t_grad.transpose(), b_dec })
}

/// Loss (reconstruction + weighted usage) under a caller-supplied fixed
/// support per example. Used to verify analytic gradients with finite
/// differences; valid for perturbations smaller than the margin to the
/// nearest ReLU kink.
pub fn objective_with_support(
    model: &SaeModel,
    batch: &DenseMatrix,
    supports: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<f64, SaeError> {
    let fwd = forward(model, batch, Some(supports), cfg)?;
    Ok(fwd.mse + cfg.aux_coefficient * fwd.aux)
}

/// Analytic gradients under a fixed support; returns the loss as well.
pub fn gradients_with_support(
    model: &SaeModel,
    batch: &DenseMatrix,
    supports: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<(f64, Gradients), SaeError> {
    let fwd = forward(model, batch, Some(supports), cfg)?;
    let grads = backward(model, batch, &fwd, cfg)?;
    Ok((fwd.mse + cfg.aux_coefficient * fwd.aux, grads))
}

/// Worst relative disagreement between analytic gradients and central
/// finite differences (step `h`) over every parameter, with the top-k
/// support frozen to its value at the unperturbed weights.
pub fn gradient_check(
    model: &SaeModel,
    batch: &DenseMatrix,
    cfg: &TrainConfig,
    h: f64,
) -> Result<f64, SaeError> {
    let supports = compute_supports(model, batch)?;
    let (_, grads) = gradients_with_support(model, batch, &supports, cfg)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;

    // Perturb one flat parameter of one group at a time.
    for group in 0..4 {
        let len = match group {
            0 => probe.w_enc().data().len(),
            1 => probe.b_enc().len(),
            2 => probe.w_dec().data().len(),
            _ => probe.b_dec().len(),
        };
        for j in 0..len {
            let analytic = match group {
                0 => grads.w_enc.data()[j],
                1 => grads.b_enc[j],
                2 => grads.w_dec.data()[j],
                _ => grads.b_dec[j],
            };
            let mut eval_at = |delta: f64| -> Result<f64, SaeError> {
                let slot = match group {
                    0 => &mut probe.w_enc_mut().data_mut()[j],
                    1 => &mut probe.b_enc_mut()[j],
                    2 => &mut probe.w_dec_mut().data_mut()[j],
                    _ => &mut probe.b_dec_mut()[j],
                };
                let orig = *slot;
                *slot = orig + delta;
                let loss = objective_with_support(&probe, batch, &supports, cfg);
                let slot = match group {
                    0 => &mut probe.w_enc_mut().data_mut()[j],
                    1 => &mut probe.b_enc_mut()[j],
                    2 => &mut probe.w_dec_mut().data_mut()[j],
                    _ => &mut probe.b_dec_mut()[j],
                };
                *slot = orig;
                loss
            };
            let plus = eval_at(h)?;
            let minus = eval_at(-h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

struct AdamGroup {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamGroup {
    fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }

    fn apply(&mut self, param: &mut [f64], grad: &[f64], t: usize, cfg: &TrainConfig) {
        let bc1 = 1.0 - cfg.adam_beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.adam_beta2.powi(t as i32);
        for j in 0..param.len() {
            let g = grad[j];
            self.m[j] = cfg.adam_beta1 * self.m[j] + (1.0 - cfg.adam_beta1) * g;
            self.v[j] = cfg.adam_beta2 * self.v[j] + (1.0 - cfg.adam_beta2) * g * g;
            let m_hat = self.m[j] / bc1;
            let v_hat = self.v[j] / bc2;
            param[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

struct Adam {
    w_enc: AdamGroup,
    b_enc: AdamGroup,
    w_dec: AdamGroup,
    b_dec: AdamGroup,
}

impl Adam {
    fn new(model: &SaeModel) -> Self {
        Self {
            w_enc: AdamGroup::new(model.w_enc().data().len()),
            b_enc: AdamGroup::new(model.b_enc().len()),
            w_dec: AdamGroup::new(model.w_dec().data().len()),
            b_dec: AdamGroup::new(model.b_dec().len()),
        }
    }

    fn step(&mut self, model: &mut SaeModel, grads: &Gradients, t: usize, cfg: &TrainConfig) {
        self.w_enc.apply(model.w_enc_mut().data_mut(), grads.w_enc.data(), t, cfg);
        self.b_enc.apply(model.b_enc_mut(), &grads.b_enc, t, cfg);
        self.w_dec.apply(model.w_dec_mut().data_mut(), grads.w_dec.data(), t, cfg);
        self.b_dec.apply(model.b_dec_mut(), &grads.b_dec, t, cfg);
    }
}

pub fn train(
    dataset: &DenseMatrix,
    arch: (usize, usize),
    cfg: &TrainConfig,
) -> Result<TrainOutcome, SaeError> {
    train_with_validation(dataset, None, arch, cfg)
}

/// Seeded epochs over shuffled batches. Per-epoch stats are running means
/// over that epoch's steps; validation stats, when a split is supplied, are
/// a full pass with the end-of-epoch model.
pub fn train_with_validation(
    dataset: &DenseMatrix,
    validation: Option<&DenseMatrix>,
    (m, k): (usize, usize),
    cfg: &TrainConfig,
) -> Result<TrainOutcome, SaeError> {
    cfg.validate()?;
    let n = dataset.rows();
    if n == 0 {
        return Err(SaeError::EmptyBatch);
    }
    let d = dataset.cols();
    let mut rng = SeededRng::new(cfg.seed);
    let mut model = SaeModel::init(d, m, k, &mut rng)?;
    let mut adam = Adam::new(&model);

    // Total variance around the dataset mean, denominator for running FVU.
    let mean = dataset.column_mean()?;
    let mut den_total = 0.0;
    for r in 0..n {
        den_total += dataset
            .row(r)
            .iter()
            .zip(mean.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut history: Vec<EpochStats> = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut err_sum = 0.0;
        let mut aux_sum = 0.0;
        let mut l0_sum = 0usize;
        let mut active = vec![false; m];
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                data.extend_from_slice(dataset.row(i));
            }
            let batch = DenseMatrix::new(chunk.len(), d, data)
                .map_err(SaeError::from)?;
            let fwd = forward(&model, &batch, None, cfg)?;
            let loss = fwd.mse + cfg.aux_coefficient * fwd.aux;
            if !loss.is_finite() {
                return Err(SaeError::NonFiniteLoss {
                    step,
                    last_good: Box::new(TrainOutcome { model, history }),
                });
            }
            let grads = backward(&model, &batch, &fwd, cfg)?;
            step += 1;
            adam.step(&mut model, &grads, step, cfg);

            err_sum += fwd.mse * chunk.len() as f64;
            aux_sum += fwd.aux * chunk.len() as f64;
            for s in &fwd.supports {
                l0_sum += s.len();
                for &i in s {
                    active[i] = true;
                }
            }
        }
        let nf = n as f64;
        let train_stats = TrainStats {
            mse_loss: err_sum / nf,
            aux_loss: aux_sum / nf,
            fvu: if den_total > 0.0 { err_sum / den_total } else { f64::NAN },
            dead_feature_fraction: active.iter().filter(|a| !**a).count() as f64 / m as f64,
            mean_l0: l0_sum as f64 / nf,
        };
        let validation_stats = match validation {
            Some(val) => Some(super::eval_stats(&model, val, cfg)?),
            None => None,
        };
        history.push(EpochStats { epoch, train: train_stats, validation: validation_stats });
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DenseVector;
    use crate::sae::eval_stats;

    fn random_batch(d: usize, n: usize, seed: u64) -> DenseMatrix {
        let mut rng = SeededRng::new(seed);
        DenseMatrix::new(n, d, rng.normal_vec(n * d)).unwrap()
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(21);
        let model = SaeModel::init(4, 8, 2, &mut rng).unwrap();
        let batch = random_batch(4, 3, 22);
        // usage_target far above the estimates so the usage branch carries
        // real gradients during the check.
        let cfg = TrainConfig {
            aux_coefficient: 0.5,
            usage_target: 0.9,
            sigmoid_temperature: 0.25,
            ..TrainConfig::default()
        };
        let worst = gradient_check(&model, &batch, &cfg, 1e-5).unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gradients_without_usage_term_also_match() {
        let mut rng = SeededRng::new(23);
        let model = SaeModel::init(5, 10, 3, &mut rng).unwrap();
        let batch = random_batch(5, 4, 24);
        let cfg = TrainConfig { aux_coefficient: 0.0, ..TrainConfig::default() };
        let worst = gradient_check(&model, &batch, &cfg, 1e-5).unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn objective_equals_gradient_path_loss() {
        let mut rng = SeededRng::new(25);
        let model = SaeModel::init(4, 8, 2, &mut rng).unwrap();
        let batch = random_batch(4, 3, 26);
        let cfg = TrainConfig { usage_target: 0.8, ..TrainConfig::default() };
        let supports = compute_supports(&model, &batch).unwrap();
        let obj = objective_with_support(&model, &batch, &supports, &cfg).unwrap();
        let (loss, _) = gradients_with_support(&model, &batch, &supports, &cfg).unwrap();
        assert_eq!(obj, loss);
    }

    #[test]
    fn memorizes_single_repeated_vector() {
        let v = vec![0.8, -0.3, 0.5, 0.1];
        let data: Vec<f64> = v.iter().copied().cycle().take(8 * 4).collect();
        let dataset = DenseMatrix::new(8, 4, data).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 1500,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train(&dataset, (16, 1), &cfg).unwrap();
        let last = out.history.last().unwrap().train;
        assert!(last.mse_loss < 1e-4, "mse {}", last.mse_loss);
        // Total loss settles monotonically once past the first epochs.
        let totals: Vec<f64> = out
            .history
            .iter()
            .map(|e| e.train.mse_loss + cfg.aux_coefficient * e.train.aux_loss)
            .collect();
        for w in totals[2..].windows(2) {
            assert!(w[1] <= w[0] + 1e-8, "loss rose: {} -> {}", w[0], w[1]);
        }
        // Reconstruction of the memorized vector is close to the input.
        let e = DenseVector::new(v).unwrap();
        let recon = out.model.decode(&out.model.encode(&e).unwrap()).unwrap();
        let err: f64 = e
            .data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(err < 1e-4, "recon err {err}");
    }

    #[test]
    fn memorizable_set_reaches_low_fvu_with_k_equal_m() {
        let mut rng = SeededRng::new(31);
        let points: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(4)).collect();
        let mut data = Vec::new();
        for rep in 0..4 {
            for p in &points {
                let _ = rep;
                data.extend_from_slice(p);
            }
        }
        let dataset = DenseMatrix::new(16, 4, data).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            epochs: 600,
            seed: 2,
            ..TrainConfig::default()
        };
        let out = train(&dataset, (16, 16), &cfg).unwrap();
        let stats = eval_stats(&out.model, &dataset, &cfg).unwrap();
        assert!(stats.fvu < 0.01, "fvu {}", stats.fvu);
    }

    #[test]
    fn training_is_deterministic() {
        let dataset = random_batch(6, 32, 40);
        let cfg = TrainConfig { batch_size: 8, epochs: 5, seed: 9, ..TrainConfig::default() };
        let a = train(&dataset, (12, 3), &cfg).unwrap();
        let b = train(&dataset, (12, 3), &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.train, y.train);
        }
    }

    #[test]
    fn exploding_run_returns_last_good_model() {
        let dataset = random_batch(4, 16, 50);
        let cfg = TrainConfig {
            learning_rate: 1e200,
            batch_size: 16,
            epochs: 10,
            seed: 3,
            ..TrainConfig::default()
        };
        match train(&dataset, (8, 2), &cfg) {
            Err(SaeError::NonFiniteLoss { last_good, .. }) => {
                assert!(last_good.model.w_enc().data().iter().all(|v| v.is_finite()));
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn validation_history_present_when_split_given() {
        let dataset = random_batch(4, 16, 60);
        let val = random_batch(4, 8, 61);
        let cfg = TrainConfig { batch_size: 8, epochs: 3, seed: 4, ..TrainConfig::default() };
        let out = train_with_validation(&dataset, Some(&val), (8, 2), &cfg).unwrap();
        assert!(out.history.iter().all(|e| e.validation.is_some()));
    }
}
