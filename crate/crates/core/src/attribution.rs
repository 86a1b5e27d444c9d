//! Feature attributions and their mapping to mutation probabilities.
//!
//! Three attribution methods are available: Integrated Gradients along the
//! straight path from a baseline, Input x Gradient, and a kernel-weighted
//! least-squares Shapley estimate over sampled coalitions. Raw attributions
//! are divided by the feature value (weighted attributions) and passed
//! through a rowwise softmax of their magnitudes (soft attributions).

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{forward, forward_batch, input_gradient, Activation, ModelParams};

pub const DEFAULT_IG_STEPS: usize = 64;
pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_SHAP_COALITIONS: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum XaiMethod {
    #[default]
    #[serde(rename = "ig")]
    IntegratedGradients,
    #[serde(rename = "ixg")]
    InputXGradient,
    #[serde(rename = "shap")]
    ShapSampling,
}

impl XaiMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            XaiMethod::IntegratedGradients => "ig",
            XaiMethod::InputXGradient => "ixg",
            XaiMethod::ShapSampling => "shap",
        }
    }
}

impl fmt::Display for XaiMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for XaiMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ig" => Ok(XaiMethod::IntegratedGradients),
            "ixg" => Ok(XaiMethod::InputXGradient),
            "shap" => Ok(XaiMethod::ShapSampling),
            other => Err(Error::invalid(format!(
                "unknown xai method '{other}' (expected ig, ixg or shap)"
            ))),
        }
    }
}

/// Raw, weighted and soft attributions for a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMatrix {
    pub raw: Matrix,
    pub weighted: Matrix,
    pub soft: Matrix,
    pub method: XaiMethod,
}

/// Integrated Gradients with a midpoint Riemann sum over `steps` equal
/// cells. For relu networks each cell is further split where a hidden unit
/// changes state along the path, so the sum is exact on piecewise-linear
/// models.
pub fn integrated_gradients(
    params: &ModelParams,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::invalid(format!("ig steps must be >= 2, got {steps}")));
    }
    if baseline.len() != x.len() {
        return Err(Error::shape(format!(
            "baseline width {} vs input width {}",
            baseline.len(),
            x.len()
        )));
    }
    let diff: Vec<f64> = x.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let mut grid: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    if params.activation == Activation::Relu {
        grid.extend(relu_kinks(params, baseline, &diff));
        grid.sort_by(|a, b| a.total_cmp(b));
        grid.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
    }
    let mut acc = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for cell in grid.windows(2) {
        let (t0, t1) = (cell[0], cell[1]);
        let t = 0.5 * (t0 + t1);
        for ((p, b), d) in point.iter_mut().zip(baseline).zip(&diff) {
            *p = b + t * d;
        }
        let (_, g) = input_gradient(params, &point)?;
        for (a, gj) in acc.iter_mut().zip(&g) {
            *a += (t1 - t0) * gj;
        }
    }
    Ok(acc.iter().zip(&diff).map(|(a, d)| a * d).collect())
}

/// Path positions in (0, 1) where some hidden pre-activation of a relu
/// network crosses zero along `baseline + t * diff`.
fn relu_kinks(params: &ModelParams, baseline: &[f64], diff: &[f64]) -> Vec<f64> {
    const MAX_SEGMENTS: usize = 100_000;
    let hidden = params.layers.len() - 1;
    let mut kinks = Vec::new();
    let mut t = 0.0;
    while kinks.len() < MAX_SEGMENTS {
        // Value and slope in t of every unit, with the activation pattern
        // that holds just after t.
        let mut val: Vec<f64> = baseline.iter().zip(diff).map(|(b, d)| b + t * d).collect();
        let mut slope = diff.to_vec();
        let mut next = 1.0f64;
        for layer in &params.layers[..hidden] {
            let mut v2 = Vec::with_capacity(layer.fan_out());
            let mut s2 = Vec::with_capacity(layer.fan_out());
            for (o, &b) in layer.bias.iter().enumerate() {
                let w = layer.weights.row(o);
                let z = b + w.iter().zip(&val).map(|(a, c)| a * c).sum::<f64>();
                let dz: f64 = w.iter().zip(&slope).map(|(a, c)| a * c).sum();
                if dz != 0.0 {
                    let tc = t - z / dz;
                    if tc > t + 1e-13 && tc < next {
                        next = tc;
                    }
                }
                let active = z > 1e-12 || (z.abs() <= 1e-12 && dz > 0.0);
                if active {
                    v2.push(z);
                    s2.push(dz);
                } else {
                    v2.push(0.0);
                    s2.push(0.0);
                }
            }
            val = v2;
            slope = s2;
        }
        if next >= 1.0 {
            break;
        }
        kinks.push(next);
        t = next;
    }
    kinks
}

/// `x_j * d f / d x_j` at `x`.
pub fn input_x_gradient(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    let (_, g) = input_gradient(params, x)?;
    Ok(g.iter().zip(x).map(|(gj, xj)| gj * xj).collect())
}

/// Kernel-SHAP estimate for one row.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapEstimate {
    pub values: Vec<f64>,
    /// `f(x) - f(background mean) - sum(values)`.
    pub local_accuracy_residual: f64,
    /// Set when the normal equations were singular and ridge-regularized.
    pub regularized: bool,
}

/// Kernel-weighted least-squares Shapley values with masked features set
/// to the background column means.
///
/// Coalition sizes are drawn with probability proportional to the total
/// Shapley-kernel mass of each size, members uniformly within a size, so
/// the regression is unweighted. The efficiency constraint
/// `sum(phi) = f(x) - f(background mean)` is enforced by eliminating the
/// last feature.
pub fn shap_sampling<R: Rng + ?Sized>(
    params: &ModelParams,
    x: &[f64],
    background: &Matrix,
    n_coalitions: usize,
    rng: &mut R,
) -> Result<ShapEstimate> {
    let q = x.len();
    if background.is_empty() {
        return Err(Error::invalid("shap_sampling needs a non-empty background"));
    }
    if background.cols() != q {
        return Err(Error::shape(format!(
            "background width {} vs input width {q}",
            background.cols()
        )));
    }
    if n_coalitions < q + 2 {
        return Err(Error::invalid(format!(
            "n_coalitions must be >= {} for {q} features, got {n_coalitions}",
            q + 2
        )));
    }
    let base = background.column_means();
    let f_base = forward(params, &base)?;
    let f_x = forward(params, x)?;
    let total = f_x - f_base;
    if q == 1 {
        return Ok(ShapEstimate {
            values: vec![total],
            local_accuracy_residual: 0.0,
            regularized: false,
        });
    }

    // Kernel mass of all coalitions of size s: (q - 1) / (s (q - s)).
    let size_mass: Vec<f64> = (1..q).map(|s| (q - 1) as f64 / (s * (q - s)) as f64).collect();
    let mass_total: f64 = size_mass.iter().sum();

    let mut masks = Matrix::zeros(n_coalitions, q);
    let mut points = Matrix::zeros(n_coalitions, q);
    for c in 0..n_coalitions {
        let mut u = rng.gen::<f64>() * mass_total;
        let mut size = q - 1;
        for (k, m) in size_mass.iter().enumerate() {
            if u < *m {
                size = k + 1;
                break;
            }
            u -= m;
        }
        points.row_mut(c).copy_from_slice(&base);
        for j in sample_indices(rng, q, size) {
            masks.set(c, j, 1.0);
            points.set(c, j, x[j]);
        }
    }
    let values = forward_batch(params, &points)?;

    // y - z_q * total = sum_{j<q} (z_j - z_q) phi_j
    let m = q - 1;
    let mut ata = vec![0.0; m * m];
    let mut atb = vec![0.0; m];
    let mut row = vec![0.0; m];
    for c in 0..n_coalitions {
        let z = masks.row(c);
        let zq = z[q - 1];
        for j in 0..m {
            row[j] = z[j] - zq;
        }
        let target = values[c] - f_base - zq * total;
        for a in 0..m {
            atb[a] += row[a] * target;
            for b in 0..m {
                ata[a * m + b] += row[a] * row[b];
            }
        }
    }
    let (mut phi, regularized) = solve_spd(&ata, &atb, m);
    let last = total - phi.iter().sum::<f64>();
    phi.push(last);
    let residual = total - phi.iter().sum::<f64>();
    Ok(ShapEstimate {
        values: phi,
        local_accuracy_residual: residual,
        regularized,
    })
}

/// Solves `A x = b` for symmetric positive semi-definite `A` by Cholesky,
/// adding a ridge term when `A` is (numerically) singular.
fn solve_spd(a: &[f64], b: &[f64], n: usize) -> (Vec<f64>, bool) {
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
    let scale = if trace > 0.0 { trace / n as f64 } else { 1.0 };
    if let Some(x) = cholesky_solve(a, b, n, 0.0, scale) {
        return (x, false);
    }
    let ridge = 1e-8 * scale;
    let x = cholesky_solve(a, b, n, ridge, scale).unwrap_or_else(|| vec![0.0; n]);
    log::warn!("singular coalition system; solved with ridge {ridge:e}");
    (x, true)
}

fn cholesky_solve(a: &[f64], b: &[f64], n: usize, ridge: f64, scale: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j] + if i == j { ridge } else { 0.0 };
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 1e-12 * scale {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    Some(x)
}

/// `raw / (sign(x) * max(|x|, eps))`, with `sign(0) = +1`.
pub fn weighted_attributions(raw: &Matrix, features: &Matrix, eps: f64) -> Result<Matrix> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be > 0, got {eps}")));
    }
    if raw.shape() != features.shape() {
        return Err(Error::shape(format!(
            "attributions {:?} vs features {:?}",
            raw.shape(),
            features.shape()
        )));
    }
    let data = raw
        .as_slice()
        .iter()
        .zip(features.as_slice())
        .map(|(&a, &x)| {
            let denom = x.abs().max(eps);
            if x < 0.0 {
                -a / denom
            } else {
                a / denom
            }
        })
        .collect();
    Matrix::from_vec(raw.rows(), raw.cols(), data)
}

/// Rowwise softmax over `|weighted|`, shifted by the row maximum.
pub fn soft_attributions(weighted: &Matrix) -> Matrix {
    let mut out = weighted.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.abs()));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (v.abs() - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Attribution settings for a batch explainer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Explainer {
    pub method: XaiMethod,
    pub ig_steps: usize,
    pub shap_coalitions: usize,
    pub eps: f64,
}

impl Default for Explainer {
    fn default() -> Self {
        Self {
            method: XaiMethod::IntegratedGradients,
            ig_steps: DEFAULT_IG_STEPS,
            shap_coalitions: DEFAULT_SHAP_COALITIONS,
            eps: DEFAULT_EPS,
        }
    }
}

impl Explainer {
    pub fn with_method(method: XaiMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// Raw attributions for every row. IG uses a zero baseline; SHAP uses
    /// `background` column means for absent features.
    pub fn raw<R: Rng + ?Sized>(
        &self,
        params: &ModelParams,
        rows: &Matrix,
        background: &Matrix,
        rng: &mut R,
    ) -> Result<Matrix> {
        let zero = vec![0.0; rows.cols()];
        let mut raw = Matrix::zeros(rows.rows(), rows.cols());
        for (i, x) in rows.iter_rows().enumerate() {
            let a = match self.method {
                XaiMethod::IntegratedGradients => integrated_gradients(params, x, &zero, self.ig_steps)?,
                XaiMethod::InputXGradient => input_x_gradient(params, x)?,
                XaiMethod::ShapSampling => {
                    shap_sampling(params, x, background, self.shap_coalitions, rng)?.values
                }
            };
            raw.row_mut(i).copy_from_slice(&a);
        }
        Ok(raw)
    }

    pub fn explain<R: Rng + ?Sized>(
        &self,
        params: &ModelParams,
        rows: &Matrix,
        background: &Matrix,
        rng: &mut R,
    ) -> Result<AttributionMatrix> {
        let raw = self.raw(params, rows, background, rng)?;
        let weighted = weighted_attributions(&raw, rows, self.eps)?;
        let soft = soft_attributions(&weighted);
        Ok(AttributionMatrix {
            raw,
            weighted,
            soft,
            method: self.method,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignHistogram {
    pub neg: usize,
    pub zero: usize,
    pub pos: usize,
}

/// Distribution of one feature's attributions across samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub feature: usize,
    pub mean: f64,
    /// Values at [`SUMMARY_QUANTILES`].
    pub quantiles: Vec<f64>,
    pub sign: SignHistogram,
}

pub const SUMMARY_QUANTILES: [f64; 7] = [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0];

/// Linear-interpolation quantile of an ascending slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-feature mean, quantiles and sign counts of `attrs`.
pub fn attribution_distribution(attrs: &Matrix) -> Result<Vec<FeatureSummary>> {
    if attrs.rows() == 0 || attrs.cols() == 0 {
        return Err(Error::invalid("attribution_distribution of an empty matrix"));
    }
    Ok((0..attrs.cols())
        .map(|j| {
            let mut col = attrs.column(j);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let mut sign = SignHistogram::default();
            for &v in &col {
                match v.partial_cmp(&0.0) {
                    Some(std::cmp::Ordering::Less) => sign.neg += 1,
                    Some(std::cmp::Ordering::Greater) => sign.pos += 1,
                    _ => sign.zero += 1,
                }
            }
            col.sort_by(f64::total_cmp);
            FeatureSummary {
                feature: j,
                mean,
                quantiles: SUMMARY_QUANTILES
                    .iter()
                    .map(|&p| quantile_sorted(&col, p))
                    .collect(),
                sign,
            }
        })
        .collect())
}
