//! Per-slice federations of closed-loops.
//!
//! Every slice runs its own federation: the server broadcasts the slice's
//! global model, each closed-loop trains locally (constrained in-hoc loop or
//! the unconstrained post-hoc baseline), and the server replaces the global
//! model with the dataset-size-weighted mean of the local models. After each
//! round the new global model is evaluated on every closed-loop's training
//! split with the run's attribution method, giving the round trace.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{Explainer, XaiMethod, DEFAULT_EPS, DEFAULT_IG_STEPS, DEFAULT_SHAP_COALITIONS};
use crate::confidence::{
    mutate_features, report_from_predictions, sla_subset, SlaBand, SurrogateMode, DEFAULT_MU,
};
use crate::datagen::{generate_cl_dataset, GeneratorConfig, SliceDataset, SliceId, SliceSpec, N_FEATURES};
use crate::error::{Error, Result};
use crate::game::{local_train, EpochTrace, LocalTrainConfig, OracleConfig, StreamKey};
use crate::model::{forward, forward_batch, init_params, Activation, ModelParams};
use crate::rng::{substream, Purpose};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "in_hoc")]
    InHoc,
    #[serde(rename = "post_hoc", alias = "post_hoc_baseline")]
    PostHoc,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::InHoc => "in_hoc",
            Mode::PostHoc => "post_hoc",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_hoc" => Ok(Mode::InHoc),
            "post_hoc" | "post_hoc_baseline" => Ok(Mode::PostHoc),
            other => Err(Error::invalid(format!(
                "unknown mode '{other}' (expected in_hoc or post_hoc)"
            ))),
        }
    }
}

/// SLA band of one slice as written in a config file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandConfig {
    pub lower: f64,
    pub upper: f64,
    pub nu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub mode: Mode,
    pub xai_method: XaiMethod,
    pub surrogate_mode: SurrogateMode,
    pub seed: u64,
    /// Slices run, in eMBB, social media, browsing order.
    pub n_slices: usize,
    pub n_cls: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub samples_per_cl: usize,
    pub test_fraction: f64,
    pub noniid_shift: f64,
    pub generator: GeneratorConfig,
    /// Overrides the built-in slice profiles when non-empty.
    pub slice_specs: Vec<SliceSpec>,
    pub bands: Vec<BandConfig>,
    pub mu: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub oracle_steps: usize,
    pub eta_lambda: f64,
    pub r_lambda: f64,
    pub ig_steps: usize,
    pub shap_coalitions: usize,
    pub attribution_eps: f64,
    pub explain_batch: usize,
    /// Rows per closed-loop used for the end-of-round confidence evaluation.
    pub eval_samples: usize,
    pub mutation: bool,
    pub parallel: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            mode: Mode::InHoc,
            xai_method: XaiMethod::IntegratedGradients,
            surrogate_mode: SurrogateMode::SmoothAnd,
            seed: 1,
            n_slices: 3,
            n_cls: 100,
            rounds: 30,
            local_epochs: 100,
            samples_per_cl: 1000,
            test_fraction: 0.2,
            noniid_shift: 0.5,
            generator: GeneratorConfig::default(),
            slice_specs: Vec::new(),
            bands: [0.82, 0.83, 0.85]
                .iter()
                .map(|&nu| BandConfig {
                    lower: 0.0,
                    upper: 3.0,
                    nu,
                })
                .collect(),
            mu: DEFAULT_MU,
            hidden: vec![16, 16],
            activation: Activation::Relu,
            lr: 0.003,
            batch_size: 64,
            oracle_steps: 1,
            eta_lambda: 0.02,
            r_lambda: 1e-5,
            ig_steps: DEFAULT_IG_STEPS,
            shap_coalitions: DEFAULT_SHAP_COALITIONS,
            attribution_eps: DEFAULT_EPS,
            explain_batch: 32,
            eval_samples: 100,
            mutation: true,
            parallel: true,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_slices", self.n_slices),
            ("n_cls", self.n_cls),
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("samples_per_cl", self.samples_per_cl),
            ("oracle_steps", self.oracle_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.n_slices > SliceId::ALL.len() && self.slice_specs.is_empty() {
            return Err(Error::invalid(format!(
                "n_slices = {} exceeds the {} built-in slices",
                self.n_slices,
                SliceId::ALL.len()
            )));
        }
        if !self.slice_specs.is_empty() && self.slice_specs.len() != self.n_slices {
            return Err(Error::invalid(format!(
                "slice_specs has {} entries for n_slices = {}",
                self.slice_specs.len(),
                self.n_slices
            )));
        }
        if self.bands.len() != self.n_slices {
            return Err(Error::invalid(format!(
                "bands has {} entries for n_slices = {}",
                self.bands.len(),
                self.n_slices
            )));
        }
        for b in self.bands()? {
            b.validate()?;
        }
        for s in self.slice_specs() {
            s.validate()?;
        }
        self.generator.validate()?;
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid("test_fraction must lie in [0, 1)"));
        }
        if self.train_size() == 0 {
            return Err(Error::invalid("samples_per_cl leaves no training rows"));
        }
        if !(self.noniid_shift.is_finite() && self.noniid_shift >= 0.0) {
            return Err(Error::invalid("noniid_shift must be >= 0"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("lr must be > 0"));
        }
        if !(self.eta_lambda.is_finite() && self.eta_lambda > 0.0) {
            return Err(Error::invalid("eta_lambda must be > 0"));
        }
        if !(self.r_lambda.is_finite() && self.r_lambda >= 0.0) {
            return Err(Error::invalid("r_lambda must be >= 0"));
        }
        if self.ig_steps < 2 {
            return Err(Error::invalid("ig_steps must be >= 2"));
        }
        if self.shap_coalitions < N_FEATURES + 2 {
            return Err(Error::invalid(format!(
                "shap_coalitions must be >= {}",
                N_FEATURES + 2
            )));
        }
        if !(self.attribution_eps > 0.0) {
            return Err(Error::invalid("attribution_eps must be > 0"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer sizes must be >= 1"));
        }
        Ok(())
    }

    pub fn slice_specs(&self) -> Vec<SliceSpec> {
        if self.slice_specs.is_empty() {
            SliceId::ALL[..self.n_slices.min(SliceId::ALL.len())]
                .iter()
                .map(|&s| SliceSpec::default_for(s))
                .collect()
        } else {
            self.slice_specs.clone()
        }
    }

    pub fn bands(&self) -> Result<Vec<SlaBand>> {
        self.bands
            .iter()
            .map(|b| SlaBand::new(b.lower, b.upper, b.nu, self.mu))
            .collect()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![N_FEATURES];
        sizes.extend(&self.hidden);
        sizes.push(1);
        sizes
    }

    pub fn test_size(&self) -> usize {
        (self.samples_per_cl as f64 * self.test_fraction).round() as usize
    }

    pub fn train_size(&self) -> usize {
        self.samples_per_cl.saturating_sub(self.test_size())
    }

    pub fn explainer(&self) -> Explainer {
        Explainer {
            method: self.xai_method,
            ig_steps: self.ig_steps,
            shap_coalitions: self.shap_coalitions,
            eps: self.attribution_eps,
        }
    }

    pub fn local_train_config(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.local_epochs,
            oracle: OracleConfig {
                steps: self.oracle_steps,
                lr: self.lr,
                batch_size: self.batch_size,
            },
            eta_lambda: self.eta_lambda,
            r_lambda: self.r_lambda,
            surrogate_mode: self.surrogate_mode,
            explainer: self.explainer(),
            explain_batch: self.explain_batch,
            mutation: self.mutation,
            constrained: self.mode == Mode::InHoc,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            explainer: self.explainer(),
            surrogate_mode: self.surrogate_mode,
            eval_samples: self.eval_samples,
            mutation: self.mutation,
            seed: self.seed,
        }
    }
}

/// Training and held-out split of one closed-loop.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub cl_id: usize,
    pub train: SliceDataset,
    pub test: SliceDataset,
}

/// Generates and splits every closed-loop dataset, indexed `[slice][cl]`.
pub fn build_population(cfg: &FederationConfig) -> Result<Vec<Vec<ClientData>>> {
    cfg.validate()?;
    let n_test = cfg.test_size();
    cfg.slice_specs()
        .iter()
        .map(|spec| {
            (1..=cfg.n_cls)
                .map(|cl_id| {
                    let full = generate_cl_dataset(
                        spec,
                        cl_id,
                        cfg.samples_per_cl,
                        cfg.noniid_shift,
                        cfg.seed,
                        &cfg.generator,
                    )?;
                    let mut order: Vec<usize> = (0..full.len()).collect();
                    let mut rng = substream(
                        cfg.seed,
                        Purpose::Split,
                        &[spec.slice_id.index() as u64, cl_id as u64],
                    );
                    order.shuffle(&mut rng);
                    let (test_idx, train_idx) = order.split_at(n_test);
                    Ok(ClientData {
                        cl_id,
                        train: full.subset(train_idx),
                        test: full.subset(test_idx),
                    })
                })
                .collect()
        })
        .collect()
}

/// `sum_k (D_k / sum D) * W_k`.
pub fn fedavg(local: &[ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    let first = local
        .first()
        .ok_or_else(|| Error::invalid("fedavg of an empty model list"))?;
    if sizes.len() != local.len() {
        return Err(Error::shape(format!(
            "{} sizes for {} models",
            sizes.len(),
            local.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("dataset sizes must be > 0"));
    }
    if local.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::shape("local models have different shapes"));
    }
    if local.len() == 1 {
        return Ok(first.clone());
    }
    let total: usize = sizes.iter().sum();
    let mut acc = first.zeros_like();
    for (m, &d) in local.iter().zip(sizes) {
        acc.add_scaled(d as f64 / total as f64, m)?;
    }
    Ok(acc)
}

/// Anything that maps a feature row to a CPU prediction.
pub trait Predictor {
    fn predict(&self, x: &[f64]) -> Result<f64>;
}

impl Predictor for ModelParams {
    fn predict(&self, x: &[f64]) -> Result<f64> {
        forward(self, x)
    }
}

impl Predictor for crate::datagen::GroundTruth {
    fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.cpu(x))
    }
}

/// Pooled MSE of `predictor` over every row of `datasets`.
pub fn pooled_mse<P: Predictor + ?Sized>(predictor: &P, datasets: &[&SliceDataset]) -> Result<f64> {
    let mut sq = 0.0;
    let mut n = 0usize;
    for ds in datasets {
        for (x, y) in ds.features.iter_rows().zip(&ds.targets) {
            let r = predictor.predict(x)? - y;
            sq += r * r;
        }
        n += ds.len();
    }
    if n == 0 {
        return Err(Error::invalid("evaluation split is empty"));
    }
    Ok(sq / n as f64)
}

/// Settings of the attribution-based confidence evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub explainer: Explainer,
    pub surrogate_mode: SurrogateMode,
    /// Leading rows per dataset to mutate; `0` uses all of them.
    pub eval_samples: usize,
    pub mutation: bool,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub confidence: f64,
    pub psi: f64,
    pub u_size: usize,
}

/// Mutated predictions of the SLA-fulfilling evaluation rows of one dataset.
fn mutated_predictions(
    model: &ModelParams,
    ds: &SliceDataset,
    band: &SlaBand,
    settings: &EvalSettings,
    coords: &[u64],
) -> Result<Vec<f64>> {
    let take = if settings.eval_samples == 0 {
        ds.len()
    } else {
        settings.eval_samples.min(ds.len())
    };
    let rows = ds.features.select_rows(&(0..take).collect::<Vec<_>>());
    let preds = forward_batch(model, &rows)?;
    let fulfilling = rows.select_rows(&sla_subset(&preds, band));
    if fulfilling.is_empty() {
        return Ok(Vec::new());
    }
    let mutated = if settings.mutation {
        let mut shap_rng = substream(settings.seed, Purpose::Shap, coords);
        let attrs = settings
            .explainer
            .explain(model, &fulfilling, &ds.features, &mut shap_rng)?;
        let mut rng = substream(settings.seed, Purpose::Eval, coords);
        mutate_features(&fulfilling, &attrs.soft, &mut rng)?
    } else {
        fulfilling
    };
    forward_batch(model, &mutated)
}

/// Loss and attribution-guided confidence of `model` on `datasets`.
///
/// `round` only selects the mutation streams, so repeated evaluations of
/// the same round are identical.
pub fn evaluate_global(
    model: &ModelParams,
    datasets: &[&SliceDataset],
    band: &SlaBand,
    settings: &EvalSettings,
    round: usize,
) -> Result<Evaluation> {
    if datasets.is_empty() || datasets.iter().any(|d| d.is_empty()) {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let loss = pooled_mse(model, datasets)?;
    let z = datasets
        .iter()
        .map(|ds| {
            mutated_predictions(
                model,
                ds,
                band,
                settings,
                &[ds.slice_id.index() as u64, ds.cl_id as u64, round as u64],
            )
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    let report = report_from_predictions(&z, band, settings.surrogate_mode);
    Ok(Evaluation {
        loss,
        confidence: report.c_value,
        psi: report.surrogate_value,
        u_size: report.u_size,
    })
}

/// Metrics of one slice after one aggregation round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundTrace {
    /// 1-based round index.
    pub round: usize,
    pub slice: SliceId,
    pub loss: f64,
    pub confidence: f64,
    /// `max(0, nu - confidence)`.
    pub violation: f64,
    pub psi: f64,
    pub u_size: usize,
    pub wall_time_s: f64,
    pub participating_cls: usize,
}

/// Per-epoch trace of one closed-loop in one round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientTrace {
    pub round: usize,
    pub slice: SliceId,
    pub cl_id: usize,
    pub epochs: Vec<EpochTrace>,
}

#[derive(Clone, Debug)]
pub struct FederationOutcome {
    pub rounds: Vec<RoundTrace>,
    /// Final global model per slice.
    pub models: Vec<ModelParams>,
    pub clients: Vec<ClientTrace>,
    pub population: Vec<Vec<ClientData>>,
}

/// Runs every slice's federation for `cfg.rounds` rounds.
pub fn run_federation(cfg: &FederationConfig) -> Result<FederationOutcome> {
    let population = build_population(cfg)?;
    run_federation_on(cfg, population)
}

/// Like [`run_federation`] on an already generated population.
pub fn run_federation_on(cfg: &FederationConfig, population: Vec<Vec<ClientData>>) -> Result<FederationOutcome> {
    cfg.validate()?;
    let specs = cfg.slice_specs();
    let bands = cfg.bands()?;
    let local_cfg = cfg.local_train_config();
    let eval = cfg.eval_settings();
    let layer_sizes = cfg.layer_sizes();

    let mut models = specs
        .iter()
        .map(|s| {
            init_params(
                &layer_sizes,
                cfg.activation,
                crate::rng::stream_id(Purpose::Init, &[cfg.seed, s.slice_id.index() as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rounds = Vec::with_capacity(cfg.rounds * specs.len());
    let mut clients = Vec::new();
    for round in 1..=cfg.rounds {
        for (s, spec) in specs.iter().enumerate() {
            let start = Instant::now();
            let band = &bands[s];
            let global = &models[s];
            let train_one = |c: &ClientData| {
                let key = StreamKey {
                    seed: cfg.seed,
                    slice: spec.slice_id.index(),
                    cl: c.cl_id,
                    round,
                };
                local_train(global, &c.train, band, &local_cfg, key)
            };
            let results: Vec<Result<_>> = if cfg.parallel {
                population[s].par_iter().map(train_one).collect()
            } else {
                population[s].iter().map(train_one).collect()
            };

            let mut local = Vec::with_capacity(results.len());
            let mut sizes = Vec::with_capacity(results.len());
            for (c, res) in population[s].iter().zip(results) {
                match res {
                    Ok(out) => {
                        local.push(out.params);
                        sizes.push(c.train.len());
                        clients.push(ClientTrace {
                            round,
                            slice: spec.slice_id,
                            cl_id: c.cl_id,
                            epochs: out.trace,
                        });
                    }
                    Err(e) => {
                        log::warn!(
                            "round {round}, slice {}, cl {}: local training failed: {e}",
                            spec.slice_id,
                            c.cl_id
                        );
                    }
                }
            }
            if local.is_empty() {
                return Err(Error::AllClientsFailed {
                    round,
                    slice: spec.slice_id.to_string(),
                });
            }
            let participating = local.len();
            models[s] = fedavg(&local, &sizes)?;

            let train_sets: Vec<&SliceDataset> = population[s].iter().map(|c| &c.train).collect();
            let ev = evaluate_global(&models[s], &train_sets, band, &eval, round)?;
            rounds.push(RoundTrace {
                round,
                slice: spec.slice_id,
                loss: ev.loss,
                confidence: ev.confidence,
                violation: (band.nu - ev.confidence).max(0.0),
                psi: ev.psi,
                u_size: ev.u_size,
                wall_time_s: start.elapsed().as_secs_f64(),
                participating_cls: participating,
            });
            log::info!(
                "round {round} {}: loss {:.5} confidence {:.3}",
                spec.slice_id,
                ev.loss,
                ev.confidence
            );
        }
    }
    Ok(FederationOutcome {
        rounds,
        models,
        clients,
        population,
    })
}

/// Final-model metrics on every closed-loop's held-out split, per slice.
pub fn evaluate_held_out(cfg: &FederationConfig, outcome: &FederationOutcome) -> Result<Vec<Evaluation>> {
    let bands = cfg.bands()?;
    let settings = cfg.eval_settings();
    outcome
        .models
        .iter()
        .zip(&outcome.population)
        .zip(&bands)
        .map(|((model, clients), band)| {
            let tests: Vec<&SliceDataset> = clients.iter().map(|c| &c.test).collect();
            evaluate_global(model, &tests, band, &settings, 0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fedavg_cases() {
        let p = init_params(&[2, 3, 1], Activation::Relu, 5).unwrap();
        let mut neg = p.clone();
        neg.scale(-1.0);
        let avg = fedavg(&[p.clone(), neg], &[10, 10]).unwrap();
        assert!(avg.values().all(|v| v == 0.0));
        assert_eq!(fedavg(std::slice::from_ref(&p), &[7]).unwrap(), p);
        assert!(fedavg(&[], &[]).is_err());
        let other = init_params(&[2, 4, 1], Activation::Relu, 5).unwrap();
        assert!(matches!(fedavg(&[p.clone(), other], &[1, 1]), Err(Error::Shape(_))));
    }

    #[test]
    fn fedavg_weighted_scalar() {
        let scalar = |v: f64| {
            ModelParams::new(
                Activation::Relu,
                vec![crate::model::Layer {
                    weights: crate::matrix::Matrix::from_vec(1, 1, vec![v]).unwrap(),
                    bias: vec![0.0],
                }],
            )
            .unwrap()
        };
        let avg = fedavg(&[scalar(0.0), scalar(4.0)], &[1, 3]).unwrap();
        assert_eq!(avg.layers[0].weights.get(0, 0), 3.0);
    }

    #[test]
    fn config_rejects_zero_counts() {
        let mut cfg = FederationConfig {
            rounds: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.rounds = 1;
        cfg.bands.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("post_hoc_baseline".parse::<Mode>().unwrap(), Mode::PostHoc);
        assert!("sideways".parse::<Mode>().is_err());
    }
}
