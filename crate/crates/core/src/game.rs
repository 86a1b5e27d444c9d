//! Proxy-Lagrangian two-player game for confidence-constrained training.
//!
//! The model player takes gradient steps on
//! `mse + sum_m r_lambda * lambda_m * psi_m` (smoothed constraints), while
//! the multiplier player keeps an `(M+1) x (M+1)` column-stochastic matrix,
//! reads its multipliers off the stationary distribution of that matrix, and
//! performs exponentiated-gradient ascent on the original constraint values.
//! Coordinate 0 of the multiplier vector belongs to the objective.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::attribution::Explainer;
use crate::confidence::{mutate_features, report_from_predictions, sla_subset, surrogate_constraint, SlaBand, SurrogateMode};
use crate::datagen::SliceDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{forward_batch, mse_gradient, ModelParams};
use crate::rng::{substream, Purpose};

const STOCHASTIC_TOL: f64 = 1e-9;
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 1000;
/// Floor on matrix entries so positivity survives exp underflow.
const MIN_ENTRY: f64 = 1e-300;

/// Multiplier-player state of one closed-loop for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct GameState {
    pub a_matrix: Matrix,
    pub lambda: Vec<f64>,
    pub r_lambda: f64,
    pub eta_lambda: f64,
    pub iterates: Vec<ModelParams>,
}

impl GameState {
    /// Uniform `(M+1) x (M+1)` matrix for `n_constraints = M`.
    pub fn new(n_constraints: usize, r_lambda: f64, eta_lambda: f64) -> Result<Self> {
        if !(r_lambda.is_finite() && r_lambda >= 0.0) {
            return Err(Error::invalid(format!("r_lambda must be >= 0, got {r_lambda}")));
        }
        if !(eta_lambda.is_finite() && eta_lambda > 0.0) {
            return Err(Error::invalid(format!("eta_lambda must be > 0, got {eta_lambda}")));
        }
        let n = n_constraints + 1;
        let a_matrix = Matrix::from_vec(n, n, vec![1.0 / n as f64; n * n])?;
        let lambda = top_eigenvector(&a_matrix)?;
        Ok(Self {
            a_matrix,
            lambda,
            r_lambda,
            eta_lambda,
            iterates: Vec::new(),
        })
    }

    /// Effective penalty weight of each constraint inside the model
    /// player's Lagrangian.
    pub fn penalty_weights(&self) -> Vec<f64> {
        penalty_weights(&self.lambda, self.r_lambda)
    }

    /// Ascent step on the original constraint values, then refreshes
    /// `lambda`.
    pub fn ascend(&mut self, phi: &[f64]) -> Result<()> {
        let delta = lambda_gradient(phi);
        self.a_matrix = exponentiated_update(&self.a_matrix, self.eta_lambda, &delta)?;
        self.lambda = top_eigenvector(&self.a_matrix)?;
        Ok(())
    }
}

fn penalty_weights(lambda: &[f64], r_lambda: f64) -> Vec<f64> {
    let total: f64 = lambda.iter().sum();
    lambda[1..].iter().map(|l| r_lambda * l / total).collect()
}

fn check_column_stochastic(a: &Matrix) -> Result<()> {
    let (r, c) = a.shape();
    if r != c || r == 0 {
        return Err(Error::invalid(format!("expected a non-empty square matrix, got {r}x{c}")));
    }
    if a.as_slice().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid("matrix entries must be strictly positive"));
    }
    for j in 0..c {
        let s: f64 = (0..r).map(|i| a.get(i, j)).sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::invalid(format!("column {j} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Stationary distribution of a positive column-stochastic matrix, by power
/// iteration from the uniform vector.
pub fn top_eigenvector(a: &Matrix) -> Result<Vec<f64>> {
    check_column_stochastic(a)?;
    let n = a.rows();
    let mut v = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..POWER_MAX_ITERS {
        for (i, slot) in next.iter_mut().enumerate() {
            *slot = a.row(i).iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= s);
        let gap: f64 = next.iter().zip(&v).map(|(x, y)| (x - y).abs()).sum();
        std::mem::swap(&mut v, &mut next);
        if gap <= POWER_TOL {
            break;
        }
    }
    Ok(v)
}

/// Gradient of the multiplier player's Lagrangian: zero for the objective
/// coordinate, `phi_m = nu_m - C_m` for each constraint.
pub fn lambda_gradient(phi: &[f64]) -> Vec<f64> {
    std::iter::once(0.0).chain(phi.iter().copied()).collect()
}

/// Scales row `m` by `exp(eta * delta_m)` and renormalizes every column.
pub fn exponentiated_update(a: &Matrix, eta_lambda: f64, delta: &[f64]) -> Result<Matrix> {
    let (r, c) = a.shape();
    if delta.len() != r {
        return Err(Error::shape(format!("delta has {} entries for {r} rows", delta.len())));
    }
    let max = delta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let factors: Vec<f64> = delta.iter().map(|d| (eta_lambda * (d - max)).exp()).collect();
    let mut out = a.clone();
    for (i, f) in factors.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v = (*v * f).max(MIN_ENTRY));
    }
    for j in 0..c {
        let s: f64 = (0..r).map(|i| out.get(i, j)).sum();
        for i in 0..r {
            out.set(i, j, out.get(i, j) / s);
        }
    }
    Ok(out)
}

/// Coordinate-wise mean of the iterates.
pub fn average_iterates(iterates: &[ModelParams]) -> Result<ModelParams> {
    let first = iterates
        .first()
        .ok_or_else(|| Error::invalid("average_iterates of an empty list"))?;
    if iterates.len() == 1 {
        return Ok(first.clone());
    }
    let mut acc = first.zeros_like();
    for it in iterates {
        acc.add_scaled(1.0, it)?;
    }
    acc.scale(1.0 / iterates.len() as f64);
    Ok(acc)
}

/// Mutated rows and band of one smoothed constraint.
#[derive(Clone, Copy, Debug)]
pub struct SurrogateContext<'a> {
    pub rows: &'a Matrix,
    pub band: &'a SlaBand,
    pub mode: SurrogateMode,
}

/// Gradient-descent settings of the model player.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleConfig {
    pub steps: usize,
    pub lr: f64,
    /// Mini-batch size; `0` means the full local dataset.
    pub batch_size: usize,
}

/// `steps` gradient-descent updates on `mse + sum_m w_m * psi_m`, where
/// `w = r_lambda * lambda[1..] / sum(lambda)`. Returns the new parameters and
/// the mean mini-batch loss seen before each update.
pub fn oracle_step<R: Rng + ?Sized>(
    params: &ModelParams,
    features: &Matrix,
    targets: &[f64],
    surrogates: &[SurrogateContext<'_>],
    lambda: &[f64],
    r_lambda: f64,
    oracle: &OracleConfig,
    rng: &mut R,
) -> Result<(ModelParams, f64)> {
    if oracle.steps == 0 {
        return Err(Error::invalid("oracle steps must be >= 1"));
    }
    if lambda.len() != surrogates.len() + 1 {
        return Err(Error::shape(format!(
            "{} multipliers for {} constraints",
            lambda.len(),
            surrogates.len()
        )));
    }
    let weights = penalty_weights(lambda, r_lambda);
    let n = features.rows();
    let mut w = params.clone();
    let mut loss_sum = 0.0;
    for _ in 0..oracle.steps {
        let (loss, mut grad) = if oracle.batch_size == 0 || oracle.batch_size >= n {
            mse_gradient(&w, features, targets)?
        } else {
            let mut idx = sample_indices(rng, n, oracle.batch_size).into_vec();
            idx.sort_unstable();
            let batch = features.select_rows(&idx);
            let t: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
            mse_gradient(&w, &batch, &t)?
        };
        loss_sum += loss;
        for (ctx, &weight) in surrogates.iter().zip(&weights) {
            if weight == 0.0 {
                continue;
            }
            let (_, g) = surrogate_constraint(&w, ctx.rows, ctx.band, ctx.mode)?;
            grad.add_scaled(weight, &g)?;
        }
        if !grad.all_finite() {
            return Err(Error::Numeric {
                layer: 0,
                detail: "non-finite Lagrangian gradient in oracle step".into(),
            });
        }
        w.add_scaled(-oracle.lr, &grad)?;
    }
    Ok((w, loss_sum / oracle.steps as f64))
}

/// Local training settings shared by every closed-loop of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub oracle: OracleConfig,
    pub eta_lambda: f64,
    pub r_lambda: f64,
    pub surrogate_mode: SurrogateMode,
    pub explainer: Explainer,
    /// In-band rows explained per epoch; `0` explains every in-band row.
    pub explain_batch: usize,
    pub mutation: bool,
    /// `false` trains on the MSE alone with no per-epoch explanation.
    pub constrained: bool,
}

/// Tester pool size as a multiple of `explain_batch`.
const TESTER_POOL_FACTOR: usize = 8;

/// Identifies the random streams of one closed-loop in one round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub slice: usize,
    pub cl: usize,
    pub round: usize,
}

impl StreamKey {
    fn coords(&self) -> [u64; 3] {
        [self.slice as u64, self.cl as u64, self.round as u64]
    }

    fn epoch_coords(&self, epoch: usize) -> [u64; 4] {
        [self.slice as u64, self.cl as u64, self.round as u64, epoch as u64]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub loss: f64,
    /// Confidence on the tester batch before the oracle step.
    pub confidence: Option<f64>,
    pub psi: Option<f64>,
    pub u_size: usize,
    pub lambda: Option<Vec<f64>>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutcome {
    pub params: ModelParams,
    pub trace: Vec<EpochTrace>,
}

/// Runs the local epochs of one closed-loop starting from `global`.
///
/// Each constrained epoch tests the current model on a tester batch, keeps
/// the SLA-fulfilling rows, attributes and mutates them, measures the
/// confidence, takes an oracle step on the proxy Lagrangian, evaluates the
/// original constraint at the new iterate and updates the multiplier
/// matrix. The returned model is the mean of all iterates.
pub fn local_train(
    global: &ModelParams,
    data: &SliceDataset,
    band: &SlaBand,
    cfg: &LocalTrainConfig,
    key: StreamKey,
) -> Result<LocalOutcome> {
    if data.is_empty() {
        return Err(Error::invalid("local dataset is empty"));
    }
    if cfg.epochs == 0 {
        return Err(Error::invalid("local_epochs must be >= 1"));
    }
    let mut game = GameState::new(1, cfg.r_lambda, cfg.eta_lambda)?;
    let mut train_rng = substream(key.seed, Purpose::Train, &key.coords());
    let mut w = global.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let n = data.len();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        if !cfg.constrained {
            let (next, loss) = oracle_step(
                &w,
                &data.features,
                &data.targets,
                &[],
                &[1.0],
                0.0,
                &cfg.oracle,
                &mut train_rng,
            )?;
            game.iterates.push(next.clone());
            w = next;
            trace.push(EpochTrace {
                epoch,
                loss,
                confidence: None,
                psi: None,
                u_size: 0,
                lambda: None,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            continue;
        }

        let ec = key.epoch_coords(epoch);
        let fulfilling = if cfg.explain_batch == 0 || cfg.explain_batch >= n {
            let preds = forward_batch(&w, &data.features)?;
            data.features.select_rows(&sla_subset(&preds, band))
        } else {
            // Draw a tester pool, keep its in-band rows, explain at most
            // `explain_batch` of them.
            let mut rng = substream(key.seed, Purpose::Tester, &ec);
            let pool_size = (TESTER_POOL_FACTOR * cfg.explain_batch).min(n);
            let pool = data.features.select_rows(&sample_indices(&mut rng, n, pool_size).into_vec());
            let mut keep = sla_subset(&forward_batch(&w, &pool)?, band);
            keep.truncate(cfg.explain_batch);
            pool.select_rows(&keep)
        };
        let mutated = if cfg.mutation && !fulfilling.is_empty() {
            let mut shap_rng = substream(key.seed, Purpose::Shap, &ec);
            let attrs = cfg.explainer.explain(&w, &fulfilling, &data.features, &mut shap_rng)?;
            let mut mut_rng = substream(key.seed, Purpose::Mutation, &ec);
            mutate_features(&fulfilling, &attrs.soft, &mut mut_rng)?
        } else {
            fulfilling
        };
        let before = report_from_predictions(&forward_batch(&w, &mutated)?, band, cfg.surrogate_mode);

        let lambda = game.lambda.clone();
        let ctx = SurrogateContext {
            rows: &mutated,
            band,
            mode: cfg.surrogate_mode,
        };
        let (next, loss) = oracle_step(
            &w,
            &data.features,
            &data.targets,
            std::slice::from_ref(&ctx),
            &lambda,
            cfg.r_lambda,
            &cfg.oracle,
            &mut train_rng,
        )?;

        let after = report_from_predictions(&forward_batch(&next, &mutated)?, band, cfg.surrogate_mode);
        game.ascend(&[band.nu - after.c_value])?;
        game.iterates.push(next.clone());
        w = next;
        trace.push(EpochTrace {
            epoch,
            loss,
            confidence: Some(before.c_value),
            psi: Some(before.surrogate_value),
            u_size: before.u_size,
            lambda: Some(lambda),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }

    Ok(LocalOutcome {
        params: average_iterates(&game.iterates)?,
        trace,
    })
}
