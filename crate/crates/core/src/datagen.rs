//! Synthetic per-closed-loop slice datasets.
//!
//! Each sample has five columns: three OTT traffic volumes (Mbps per TRP),
//! the channel quality indicator in `[1, 15]` and the MIMO full-rank usage
//! fraction in `[0, 1]`. The target is the CU CPU load in percent:
//!
//! ```text
//! cpu = c0 + c1 * (ott1 + ott2 + ott3) * q(cqi) * (1 + c2 * mimo) + noise
//! q(cqi) = cqi / 15           (increasing convention, default)
//! q(cqi) = (16 - cqi) / 15    (decreasing convention)
//! ```
//!
//! clamped to `[0, 100]`. Traffic units and ranges are invented; nothing
//! here models real packet traces.
//!
//! Non-IID structure comes from per-closed-loop distribution parameters:
//! the three OTT means are scaled by `1 + shift * (3 w_j - 1)` with `w`
//! drawn from a symmetric Dirichlet, and the CQI mean is offset by
//! `shift * CQI_OFFSET_SCALE * z` with `z` standard normal. At `shift = 0`
//! every closed-loop shares the slice's parameters exactly.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Dirichlet, Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{substream, Purpose};

/// Number of input columns.
pub const N_FEATURES: usize = 5;
pub const FEATURE_NAMES: [&str; N_FEATURES] = ["ott1", "ott2", "ott3", "cqi", "mimo"];
pub const CSV_HEADER: [&str; N_FEATURES + 1] = ["ott1", "ott2", "ott3", "cqi", "mimo", "cpu"];

pub const CQI_MIN: f64 = 1.0;
pub const CQI_MAX: f64 = 15.0;

const CQI_OFFSET_SCALE: f64 = 2.0;
const DIRICHLET_CONCENTRATION: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceId {
    #[serde(rename = "embb")]
    Embb,
    SocialMedia,
    Browsing,
}

impl SliceId {
    pub const ALL: [SliceId; 3] = [SliceId::Embb, SliceId::SocialMedia, SliceId::Browsing];

    pub fn index(self) -> usize {
        match self {
            SliceId::Embb => 0,
            SliceId::SocialMedia => 1,
            SliceId::Browsing => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<SliceId> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SliceId::Embb => "embb",
            SliceId::SocialMedia => "social_media",
            SliceId::Browsing => "browsing",
        }
    }

    /// The three OTT applications multiplexed on the slice.
    pub fn ott_names(self) -> [&'static str; 3] {
        match self {
            SliceId::Embb => ["Netflix", "Youtube", "Facebook Video"],
            SliceId::SocialMedia => ["Facebook", "Whatsapp", "Instagram"],
            SliceId::Browsing => ["Apple", "HTTP", "QUIC"],
        }
    }
}

impl fmt::Display for SliceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SliceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embb" => Ok(SliceId::Embb),
            "social_media" => Ok(SliceId::SocialMedia),
            "browsing" => Ok(SliceId::Browsing),
            other => Err(Error::invalid(format!("unknown slice '{other}'"))),
        }
    }
}

/// Traffic and radio profile of one slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub slice_id: SliceId,
    pub ott_names: [String; 3],
    /// Mean Mbps per OTT before the per-closed-loop multiplier.
    pub traffic_scale: f64,
    pub cqi_mean: f64,
    pub mimo_fullrank_mean: f64,
}

impl SliceSpec {
    pub fn default_for(slice_id: SliceId) -> Self {
        let (traffic_scale, cqi_mean, mimo_fullrank_mean) = match slice_id {
            SliceId::Embb => (12.0, 9.0, 0.35),
            SliceId::SocialMedia => (9.0, 10.0, 0.25),
            SliceId::Browsing => (7.0, 11.0, 0.2),
        };
        Self {
            slice_id,
            ott_names: slice_id.ott_names().map(String::from),
            traffic_scale,
            cqi_mean,
            mimo_fullrank_mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.traffic_scale.is_finite() && self.traffic_scale > 0.0) {
            return Err(Error::invalid(format!(
                "traffic_scale must be positive, got {}",
                self.traffic_scale
            )));
        }
        if !(CQI_MIN..=CQI_MAX).contains(&self.cqi_mean) {
            return Err(Error::invalid(format!(
                "cqi_mean must lie in [1, 15], got {}",
                self.cqi_mean
            )));
        }
        if !(0.0..=1.0).contains(&self.mimo_fullrank_mean) {
            return Err(Error::invalid(format!(
                "mimo_fullrank_mean must lie in [0, 1], got {}",
                self.mimo_fullrank_mean
            )));
        }
        if self.ott_names.iter().any(|n| n.trim().is_empty()) {
            return Err(Error::invalid("OTT labels must be non-empty"));
        }
        Ok(())
    }
}

/// Feature-to-CPU mapping used to label samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundTruth {
    /// Idle load in percent, reached with zero traffic.
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// `true`: better channel quality raises the load.
    pub cqi_increasing: bool,
}

impl Default for GroundTruth {
    fn default() -> Self {
        Self {
            c0: 0.2,
            c1: 0.2,
            c2: 0.2,
            cqi_increasing: true,
        }
    }
}

impl GroundTruth {
    fn cqi_factor(&self, cqi: f64) -> f64 {
        if self.cqi_increasing {
            cqi / CQI_MAX
        } else {
            (CQI_MAX + 1.0 - cqi) / CQI_MAX
        }
    }

    /// Noise-free CPU load for one row, clamped to `[0, 100]`.
    pub fn cpu(&self, row: &[f64]) -> f64 {
        let traffic: f64 = row[..3].iter().sum();
        let load = self.c0 + self.c1 * traffic * self.cqi_factor(row[3]) * (1.0 + self.c2 * row[4]);
        load.clamp(0.0, 100.0)
    }
}

/// Generator knobs shared by every closed-loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub truth: GroundTruth,
    /// Standard deviation of the additive target noise, in percent.
    pub noise_std: f64,
    /// Log-space standard deviation of each OTT traffic column.
    pub traffic_sigma: f64,
    pub cqi_std: f64,
    /// Beta concentration (a + b) of the MIMO column.
    pub mimo_concentration: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            truth: GroundTruth::default(),
            noise_std: 0.1,
            traffic_sigma: 0.5,
            cqi_std: 2.0,
            mimo_concentration: 8.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.truth;
        for (name, v) in [("c0", t.c0), ("c1", t.c1), ("c2", t.c2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::invalid("noise_std must be finite and >= 0"));
        }
        for (name, v) in [
            ("traffic_sigma", self.traffic_sigma),
            ("cqi_std", self.cqi_std),
            ("mimo_concentration", self.mimo_concentration),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Distribution parameters of one closed-loop, after the non-IID shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClDistribution {
    pub traffic_means: [f64; 3],
    pub cqi_mean: f64,
    pub mimo_mean: f64,
}

/// Samples and CPU targets of one closed-loop of one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceDataset {
    pub features: Matrix,
    pub targets: Vec<f64>,
    pub cl_id: usize,
    pub slice_id: SliceId,
    pub seed: u64,
}

impl SliceDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Checks the column ranges every generated or loaded dataset must obey.
    pub fn validate(&self) -> Result<()> {
        if self.features.cols() != N_FEATURES {
            return Err(Error::shape(format!(
                "expected {N_FEATURES} feature columns, got {}",
                self.features.cols()
            )));
        }
        if self.features.rows() != self.targets.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} targets",
                self.features.rows(),
                self.targets.len()
            )));
        }
        for (i, (row, &y)) in self.features.iter_rows().zip(&self.targets).enumerate() {
            check_row(row, y).map_err(|m| Error::invalid(format!("sample {i}: {m}")))?;
        }
        Ok(())
    }

    /// Rows at `indices` as a new dataset with the same identity.
    pub fn subset(&self, indices: &[usize]) -> SliceDataset {
        SliceDataset {
            features: self.features.select_rows(indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            cl_id: self.cl_id,
            slice_id: self.slice_id,
            seed: self.seed,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for (row, y) in self.features.iter_rows().zip(&self.targets) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }

    /// Parses a `ott1,ott2,ott3,cqi,mimo,cpu` dump. Every row is range-checked.
    pub fn read_csv<R: Read>(reader: R, cl_id: usize, slice_id: SliceId) -> Result<SliceDataset> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = r.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
        if headers.iter().ne(CSV_HEADER.iter().copied()) {
            return Err(Error::Schema(format!(
                "dataset header must be '{}', got '{}'",
                CSV_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut data = Vec::new();
        let mut targets = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let mut vals = [0.0; N_FEATURES + 1];
            for (j, field) in rec.iter().enumerate() {
                vals[j] = field.trim().parse::<f64>().map_err(|e| {
                    Error::Parse(format!("line {}: column {}: {e}", line + 2, CSV_HEADER[j]))
                })?;
            }
            check_row(&vals[..N_FEATURES], vals[N_FEATURES])
                .map_err(|m| Error::invalid(format!("line {}: {m}", line + 2)))?;
            data.extend_from_slice(&vals[..N_FEATURES]);
            targets.push(vals[N_FEATURES]);
        }
        let features = Matrix::from_vec(targets.len(), N_FEATURES, data)?;
        Ok(SliceDataset {
            features,
            targets,
            cl_id,
            slice_id,
            seed: 0,
        })
    }
}

fn check_row(row: &[f64], y: f64) -> std::result::Result<(), String> {
    if row.iter().any(|v| !v.is_finite()) || !y.is_finite() {
        return Err("non-finite value".into());
    }
    if row[..3].iter().any(|&t| t < 0.0) {
        return Err("negative traffic".into());
    }
    if !(CQI_MIN..=CQI_MAX).contains(&row[3]) {
        return Err(format!("cqi {} outside [1, 15]", row[3]));
    }
    if !(0.0..=1.0).contains(&row[4]) {
        return Err(format!("mimo {} outside [0, 1]", row[4]));
    }
    if !(0.0..=100.0).contains(&y) {
        return Err(format!("cpu {y} outside [0, 100]"));
    }
    Ok(())
}

/// Per-closed-loop distribution parameters for `spec` under `noniid_shift`.
pub fn cl_distribution(
    spec: &SliceSpec,
    cl_id: usize,
    noniid_shift: f64,
    seed: u64,
) -> Result<ClDistribution> {
    spec.validate()?;
    if !(noniid_shift.is_finite() && noniid_shift >= 0.0) {
        return Err(Error::invalid(format!(
            "noniid_shift must be >= 0, got {noniid_shift}"
        )));
    }
    let mut rng = substream(
        seed,
        Purpose::DataParams,
        &[spec.slice_id.index() as u64, cl_id as u64],
    );
    let dirichlet = Dirichlet::new(&[DIRICHLET_CONCENTRATION; 3])
        .map_err(|e| Error::invalid(e.to_string()))?;
    let w = dirichlet.sample(&mut rng);
    let z: f64 = rng.sample(StandardNormal);

    let mut traffic_means = [0.0; 3];
    for (m, wj) in traffic_means.iter_mut().zip(&w) {
        // The multiplier stays positive for shift < 1; clamp keeps it so beyond.
        let mult = (1.0 + noniid_shift * (3.0 * wj - 1.0)).max(0.05);
        *m = spec.traffic_scale * mult;
    }
    let cqi_mean = (spec.cqi_mean + noniid_shift * CQI_OFFSET_SCALE * z).clamp(CQI_MIN, CQI_MAX);
    Ok(ClDistribution {
        traffic_means,
        cqi_mean,
        mimo_mean: spec.mimo_fullrank_mean.clamp(0.01, 0.99),
    })
}

fn truncated_normal<R: Rng>(rng: &mut R, dist: &Normal<f64>, lo: f64, hi: f64) -> f64 {
    for _ in 0..128 {
        let v = dist.sample(rng);
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
    dist.sample(rng).clamp(lo, hi)
}

/// Synthesizes the dataset of closed-loop `cl_id`.
pub fn generate_cl_dataset(
    spec: &SliceSpec,
    cl_id: usize,
    size: usize,
    noniid_shift: f64,
    seed: u64,
    gen: &GeneratorConfig,
) -> Result<SliceDataset> {
    if size == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    gen.validate()?;
    let dist = cl_distribution(spec, cl_id, noniid_shift, seed)?;
    let mut rng = substream(
        seed,
        Purpose::DataSamples,
        &[spec.slice_id.index() as u64, cl_id as u64],
    );

    let sigma = gen.traffic_sigma;
    let traffic: Vec<LogNormal<f64>> = dist
        .traffic_means
        .iter()
        .map(|m| LogNormal::new(m.ln() - 0.5 * sigma * sigma, sigma))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let cqi = Normal::new(dist.cqi_mean, gen.cqi_std).map_err(|e| Error::invalid(e.to_string()))?;
    let k = gen.mimo_concentration;
    let mimo = Beta::new(k * dist.mimo_mean, k * (1.0 - dist.mimo_mean))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let noise = Normal::new(0.0, gen.noise_std).map_err(|e| Error::invalid(e.to_string()))?;

    let mut data = Vec::with_capacity(size * N_FEATURES);
    let mut targets = Vec::with_capacity(size);
    for _ in 0..size {
        let mut row = [0.0; N_FEATURES];
        for (slot, d) in row.iter_mut().zip(&traffic) {
            *slot = d.sample(&mut rng);
        }
        row[3] = truncated_normal(&mut rng, &cqi, CQI_MIN, CQI_MAX);
        row[4] = mimo.sample(&mut rng);
        let eps = if gen.noise_std > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        let y = (gen.truth.cpu(&row) + eps).clamp(0.0, 100.0);
        data.extend_from_slice(&row);
        targets.push(y);
    }
    Ok(SliceDataset {
        features: Matrix::from_vec(size, N_FEATURES, data)?,
        targets,
        cl_id,
        slice_id: spec.slice_id,
        seed,
    })
}

/// Jensen-Shannon divergence (natural log) between two empirical histograms
/// over shared bin edges. Used to quantify how far apart two closed-loops are.
pub fn js_divergence(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() || bins == 0 {
        return Err(Error::invalid("js_divergence needs non-empty samples and bins"));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let hist = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in xs {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            h[k] += 1.0;
        }
        let n = xs.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let (p, q) = (hist(a), hist(b));
    let kl = |p: &[f64], m: &[f64]| -> f64 {
        p.iter()
            .zip(m)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, mi)| pi * (pi / mi).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(&q).map(|(x, y)| 0.5 * (x + y)).collect();
    Ok(0.5 * kl(&p, &m) + 0.5 * kl(&q, &m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embb() -> SliceSpec {
        SliceSpec::default_for(SliceId::Embb)
    }

    #[test]
    fn table_sized_dataset_respects_ranges() {
        let ds = generate_cl_dataset(&embb(), 1, 1000, 0.5, 7, &GeneratorConfig::default()).unwrap();
        assert_eq!(ds.features.shape(), (1000, 5));
        assert!(ds.targets.iter().all(|y| (0.0..=100.0).contains(y)));
        ds.validate().unwrap();
    }

    #[test]
    fn zero_shift_gives_identical_parameters() {
        let a = cl_distribution(&embb(), 1, 0.0, 11).unwrap();
        let b = cl_distribution(&embb(), 2, 0.0, 11).unwrap();
        assert_eq!(a, b);
        let c = cl_distribution(&embb(), 2, 0.5, 11).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_targets_equal_ground_truth() {
        let gen = GeneratorConfig {
            noise_std: 0.0,
            ..Default::default()
        };
        let ds = generate_cl_dataset(&embb(), 3, 200, 0.3, 5, &gen).unwrap();
        let t = gen.truth;
        for (row, &y) in ds.features.iter_rows().zip(&ds.targets) {
            let q = row[3] / 15.0;
            let expect = (t.c0 + t.c1 * (row[0] + row[1] + row[2]) * q * (1.0 + t.c2 * row[4]))
                .clamp(0.0, 100.0);
            assert_eq!(y, expect);
        }
    }

    #[test]
    fn idle_row_is_c0() {
        let t = GroundTruth::default();
        assert_eq!(t.cpu(&[0.0, 0.0, 0.0, 9.0, 0.4]), t.c0);
    }

    #[test]
    fn doubling_traffic_raises_load() {
        let t = GroundTruth::default();
        let row = [1.0, 2.0, 0.5, 8.0, 0.3];
        let doubled = [2.0, 4.0, 1.0, 8.0, 0.3];
        assert!(t.cpu(&doubled) > t.cpu(&row));
    }

    #[test]
    fn cqi_sign_flag_flips_direction() {
        let inc = GroundTruth::default();
        let dec = GroundTruth {
            cqi_increasing: false,
            ..inc
        };
        let lo = [1.0, 1.0, 1.0, 3.0, 0.3];
        let hi = [1.0, 1.0, 1.0, 12.0, 0.3];
        assert!(inc.cpu(&hi) > inc.cpu(&lo));
        assert!(dec.cpu(&hi) < dec.cpu(&lo));
    }

    #[test]
    fn rejects_bad_arguments() {
        let gen = GeneratorConfig::default();
        assert!(matches!(
            generate_cl_dataset(&embb(), 1, 0, 0.0, 1, &gen),
            Err(Error::InvalidArgument(_))
        ));
        let mut spec = embb();
        spec.cqi_mean = 16.0;
        assert!(generate_cl_dataset(&spec, 1, 10, 0.0, 1, &gen).is_err());
        let mut spec = embb();
        spec.mimo_fullrank_mean = -0.1;
        assert!(generate_cl_dataset(&spec, 1, 10, 0.0, 1, &gen).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate_cl_dataset(&embb(), 2, 25, 0.2, 3, &GeneratorConfig::default()).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("ott1,ott2,ott3,cqi,mimo,cpu\n"));
        let back = SliceDataset::read_csv(&buf[..], 2, SliceId::Embb).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.targets, ds.targets);
    }

    #[test]
    fn csv_rejects_out_of_range_rows() {
        let bad = "ott1,ott2,ott3,cqi,mimo,cpu\n1,1,1,20,0.5,3\n";
        assert!(SliceDataset::read_csv(bad.as_bytes(), 1, SliceId::Embb).is_err());
        let bad_header = "a,b,c,d,e,f\n";
        assert!(matches!(
            SliceDataset::read_csv(bad_header.as_bytes(), 1, SliceId::Embb),
            Err(Error::Schema(_))
        ));
    }
}
