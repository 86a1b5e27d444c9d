//! Attribution-guided mutation and the SLA confidence constraint.
//!
//! A sample is SLA-fulfilling when its predicted CPU load lies in the band
//! `[lower, upper]`. Mutation zeroes each feature of a fulfilling sample with
//! its soft-attribution probability; the confidence value is the fraction of
//! mutated samples whose prediction stays inside the band. The constraint
//! `confidence >= nu` is exposed both as that exact value and as a smooth
//! surrogate `psi <= 0` with a parameter gradient.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{forward_batch, output_gradient_with, ModelParams};

pub const DEFAULT_MU: f64 = 50.0;

/// SLA band and confidence threshold of one slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlaBand {
    /// Lower CPU bound, percent.
    pub lower: f64,
    /// Upper CPU bound, percent.
    pub upper: f64,
    /// Confidence threshold in (0, 1).
    pub nu: f64,
    /// Logistic steepness of the surrogate.
    #[serde(default = "default_mu")]
    pub mu: f64,
}

fn default_mu() -> f64 {
    DEFAULT_MU
}

impl SlaBand {
    pub fn new(lower: f64, upper: f64, nu: f64, mu: f64) -> Result<Self> {
        let band = Self { lower, upper, nu, mu };
        band.validate()?;
        Ok(band)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(Error::invalid(format!(
                "SLA band needs lower < upper, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return Err(Error::invalid(format!("nu must lie in (0, 1), got {}", self.nu)));
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::invalid(format!("mu must be > 0, got {}", self.mu)));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateMode {
    /// `S(z - lower) * S(upper - z)`.
    #[default]
    SmoothAnd,
    /// `log(exp(S(z - lower)) + exp(S(upper - z)))`.
    LogSumExp,
}

impl SurrogateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SurrogateMode::SmoothAnd => "smooth_and",
            SurrogateMode::LogSumExp => "log_sum_exp",
        }
    }
}

impl fmt::Display for SurrogateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SurrogateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth_and" => Ok(SurrogateMode::SmoothAnd),
            "log_sum_exp" => Ok(SurrogateMode::LogSumExp),
            other => Err(Error::invalid(format!("unknown surrogate mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceReport {
    pub c_value: f64,
    pub u_size: usize,
    pub surrogate_value: f64,
    /// Mutated samples that left the band.
    pub mutated_flip_count: usize,
    /// `true` when the fulfilling set was empty.
    pub vacuous: bool,
}

/// Indices of predictions inside the band.
pub fn sla_subset(preds: &[f64], band: &SlaBand) -> Vec<usize> {
    preds
        .iter()
        .enumerate()
        .filter(|(_, &p)| band.contains(p))
        .map(|(i, _)| i)
        .collect()
}

/// Zeroes entry `(i, j)` with probability `soft[i][j]`, independently.
pub fn mutate_features<R: Rng + ?Sized>(rows: &Matrix, soft: &Matrix, rng: &mut R) -> Result<Matrix> {
    if rows.shape() != soft.shape() {
        return Err(Error::shape(format!(
            "rows {:?} vs probabilities {:?}",
            rows.shape(),
            soft.shape()
        )));
    }
    let mut out = rows.clone();
    for (v, &p) in out.as_mut_slice().iter_mut().zip(soft.as_slice()) {
        if rng.gen::<f64>() < p {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Logistic `1 / (1 + exp(-mu * theta))`, evaluated without overflow.
#[inline]
pub fn logistic(theta: f64, mu: f64) -> f64 {
    let t = mu * theta;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Fraction of mutated rows whose prediction stays inside the band.
///
/// `mutated` must hold only rows that were inside the band before mutation.
/// An empty set yields `c_value = 1` with `vacuous = true`.
pub fn confidence_metric(params: &ModelParams, mutated: &Matrix, band: &SlaBand) -> Result<ConfidenceReport> {
    if mutated.is_empty() {
        return Ok(ConfidenceReport {
            c_value: 1.0,
            u_size: 0,
            surrogate_value: band.nu - 1.0,
            mutated_flip_count: 0,
            vacuous: true,
        });
    }
    let z = forward_batch(params, mutated)?;
    Ok(report_from_predictions(&z, band, SurrogateMode::SmoothAnd))
}

/// Confidence report for already-computed mutated predictions.
pub fn report_from_predictions(z: &[f64], band: &SlaBand, mode: SurrogateMode) -> ConfidenceReport {
    if z.is_empty() {
        return ConfidenceReport {
            c_value: 1.0,
            u_size: 0,
            surrogate_value: band.nu - 1.0,
            mutated_flip_count: 0,
            vacuous: true,
        };
    }
    let inside = z.iter().filter(|&&v| band.contains(v)).count();
    let u = z.len();
    let mean_term = z.iter().map(|&v| surrogate_term(v, band, mode).0).sum::<f64>() / u as f64;
    ConfidenceReport {
        c_value: inside as f64 / u as f64,
        u_size: u,
        surrogate_value: band.nu - mean_term,
        mutated_flip_count: u - inside,
        vacuous: false,
    }
}

/// Per-sample surrogate term and its derivative with respect to `z`.
#[inline]
fn surrogate_term(z: f64, band: &SlaBand, mode: SurrogateMode) -> (f64, f64) {
    let mu = band.mu;
    let sa = logistic(z - band.lower, mu);
    let sb = logistic(band.upper - z, mu);
    let da = mu * sa * (1.0 - sa);
    let db = -mu * sb * (1.0 - sb);
    match mode {
        SurrogateMode::SmoothAnd => (sa * sb, da * sb + sa * db),
        SurrogateMode::LogSumExp => {
            let m = sa.max(sb);
            let ea = (sa - m).exp();
            let eb = (sb - m).exp();
            let s = ea + eb;
            (m + s.ln(), (ea * da + eb * db) / s)
        }
    }
}

/// Surrogate constraint `psi = nu - mean_i term(z_i)` over the mutated rows,
/// with its gradient with respect to the parameters.
pub fn surrogate_constraint(
    params: &ModelParams,
    mutated: &Matrix,
    band: &SlaBand,
    mode: SurrogateMode,
) -> Result<(f64, ModelParams)> {
    if mutated.is_empty() {
        return Ok((band.nu - 1.0, params.zeros_like()));
    }
    let u = mutated.rows() as f64;
    let mut mean = 0.0;
    let (_, grad) = output_gradient_with(params, mutated, |z| {
        let (t, dt) = surrogate_term(z, band, mode);
        mean += t;
        -dt / u
    })?;
    Ok((band.nu - mean / u, grad))
}
