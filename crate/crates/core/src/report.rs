//! Run artifacts: CSV traces, timing, attribution dumps, manifest, and
//! cross-run comparison.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `rounds.csv` | `round,slice,mode,xai_method,loss,confidence,psi,wall_time_s` |
//! | `attributions.csv` | `slice,sample_id,feature,raw,weighted,soft` for the final models |
//! | `attribution_summary.csv` | per-feature mean, quantiles and sign counts |
//! | `timing.csv` | cumulative wall time up to the convergence round |
//! | `evaluation.csv` | final-model loss and confidence on the held-out splits |
//! | `manifest.json` | the full resolved config, enough to rerun |
//!
//! Files are written to a temporary name and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{attribution_distribution, XaiMethod, SUMMARY_QUANTILES};
use crate::config::ExperimentConfig;
use crate::datagen::{SliceDataset, SliceId, FEATURE_NAMES};
use crate::error::{Error, Result};
use crate::federation::{build_population, evaluate_held_out, run_federation_on, FederationOutcome, Mode};
use crate::matrix::Matrix;
use crate::rng::{substream, Purpose};

pub const ROUNDS_HEADER: [&str; 8] = [
    "round",
    "slice",
    "mode",
    "xai_method",
    "loss",
    "confidence",
    "psi",
    "wall_time_s",
];
pub const MANIFEST_FORMAT: &str = "inhoc-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub slice: SliceId,
    pub mode: Mode,
    pub xai_method: XaiMethod,
    pub loss: f64,
    pub confidence: f64,
    pub psi: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub slice: SliceId,
    pub sample_id: usize,
    pub feature: String,
    pub raw: f64,
    pub weighted: f64,
    pub soft: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub slice: SliceId,
    pub mode: Mode,
    pub xai_method: XaiMethod,
    pub convergence_round: usize,
    pub time_to_convergence_s: f64,
    pub total_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub slice: SliceId,
    pub test_loss: f64,
    pub test_confidence: f64,
    pub test_psi: f64,
    pub u_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SummaryRow {
    slice: SliceId,
    feature: String,
    mean: f64,
    min: f64,
    q05: f64,
    q25: f64,
    median: f64,
    q75: f64,
    q95: f64,
    max: f64,
    neg: usize,
    zero: usize,
    pos: usize,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    /// SHA-256 of the config's canonical JSON.
    pub config_digest: String,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        let canonical = serde_json::to_vec(config).expect("config serializes");
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_digest: format!("{:x}", Sha256::digest(&canonical)),
            config: config.clone(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Schema(format!("unknown manifest format '{}'", m.format)));
        }
        if m.version != MANIFEST_VERSION {
            return Err(Error::Schema(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

/// `rounds.csv` bytes; the header is written even when `rows` is empty.
pub fn rounds_to_csv(rows: &[RoundRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(ROUNDS_HEADER).map_err(|e| Error::Parse(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &to_csv(rows)?)
}

/// Parses a `rounds.csv` document, rejecting anything that does not match
/// the schema exactly.
pub fn parse_rounds_csv<R: Read>(reader: R) -> Result<Vec<RoundRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = r
        .headers()
        .map_err(|e| Error::Schema(format!("rounds.csv header: {e}")))?
        .clone();
    for (i, expected) in ROUNDS_HEADER.iter().enumerate() {
        match headers.get(i) {
            Some(h) if h == *expected => {}
            Some(h) => {
                return Err(Error::Schema(format!(
                    "rounds.csv column {i} is '{h}', expected '{expected}'"
                )))
            }
            None => return Err(Error::Schema(format!("rounds.csv is missing column '{expected}'"))),
        }
    }
    if headers.len() != ROUNDS_HEADER.len() {
        return Err(Error::Schema(format!(
            "rounds.csv has unexpected column '{}'",
            &headers[ROUNDS_HEADER.len()]
        )));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize::<RoundRow>() {
        let row = rec.map_err(|e| {
            let field = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.field(),
                _ => None,
            };
            let column = field
                .and_then(|f| ROUNDS_HEADER.get(f as usize))
                .map_or(String::new(), |c| format!(" in column '{c}'"));
            Error::Schema(format!("rounds.csv{column}: {e}"))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_rounds_csv(file)
}

/// First 1-based round whose loss is below 1.05x the final loss, unless
/// `fixed` pins it.
pub fn convergence_round(losses: &[f64], fixed: Option<usize>) -> usize {
    if losses.is_empty() {
        return 0;
    }
    if let Some(r) = fixed {
        return r.clamp(1, losses.len());
    }
    let target = 1.05 * losses[losses.len() - 1];
    losses
        .iter()
        .position(|&l| l < target)
        .map_or(losses.len(), |i| i + 1)
}

/// Per-slice convergence round and cumulative wall time.
pub fn timing_rows(cfg: &ExperimentConfig, outcome: &FederationOutcome) -> Vec<TimingRow> {
    let mut per_slice: BTreeMap<usize, (SliceId, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &outcome.rounds {
        let e = per_slice
            .entry(r.slice.index())
            .or_insert_with(|| (r.slice, Vec::new(), Vec::new()));
        e.1.push(r.loss);
        e.2.push(r.wall_time_s);
    }
    per_slice
        .into_values()
        .map(|(slice, losses, times)| {
            let conv = convergence_round(&losses, cfg.convergence_round);
            TimingRow {
                slice,
                mode: cfg.federation.mode,
                xai_method: cfg.federation.xai_method,
                convergence_round: conv,
                time_to_convergence_s: times[..conv].iter().sum(),
                total_time_s: times.iter().sum(),
            }
        })
        .collect()
}

pub fn round_rows(cfg: &ExperimentConfig, outcome: &FederationOutcome) -> Vec<RoundRow> {
    outcome
        .rounds
        .iter()
        .map(|r| RoundRow {
            round: r.round,
            slice: r.slice,
            mode: cfg.federation.mode,
            xai_method: cfg.federation.xai_method,
            loss: r.loss,
            confidence: r.confidence,
            psi: r.psi,
            wall_time_s: if cfg.record_wall_time { r.wall_time_s } else { 0.0 },
        })
        .collect()
}

/// Rows of the held-out splits of one slice, capped at `limit` (0 = all).
fn report_rows(tests: &[&SliceDataset], limit: usize) -> Result<Matrix> {
    let rows: Vec<&[f64]> = tests
        .iter()
        .flat_map(|d| d.features.iter_rows())
        .take(if limit == 0 { usize::MAX } else { limit })
        .collect();
    Matrix::from_rows(&rows)
}

fn attribution_artifacts(
    cfg: &ExperimentConfig,
    outcome: &FederationOutcome,
) -> Result<(Vec<AttributionRow>, Vec<SummaryRow>)> {
    let explainer = cfg.federation.explainer();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (model, clients) in outcome.models.iter().zip(&outcome.population) {
        let slice = clients[0].train.slice_id;
        let tests: Vec<&SliceDataset> = clients.iter().map(|c| &c.test).collect();
        let x = report_rows(&tests, cfg.report_samples)?;
        if x.is_empty() {
            continue;
        }
        let background = report_rows(&clients.iter().map(|c| &c.train).collect::<Vec<_>>(), 0)?;
        let mut rng = substream(cfg.federation.seed, Purpose::Eval, &[slice.index() as u64, u64::MAX]);
        let attrs = explainer.explain(model, &x, &background, &mut rng)?;
        for i in 0..x.rows() {
            for (j, name) in FEATURE_NAMES.iter().enumerate() {
                rows.push(AttributionRow {
                    slice,
                    sample_id: i,
                    feature: (*name).into(),
                    raw: attrs.raw.get(i, j),
                    weighted: attrs.weighted.get(i, j),
                    soft: attrs.soft.get(i, j),
                });
            }
        }
        for s in attribution_distribution(&attrs.raw)? {
            let q = &s.quantiles;
            debug_assert_eq!(q.len(), SUMMARY_QUANTILES.len());
            summary.push(SummaryRow {
                slice,
                feature: FEATURE_NAMES[s.feature].into(),
                mean: s.mean,
                min: q[0],
                q05: q[1],
                q25: q[2],
                median: q[3],
                q75: q[4],
                q95: q[5],
                max: q[6],
                neg: s.sign.neg,
                zero: s.sign.zero,
                pos: s.sign.pos,
            });
        }
    }
    Ok((rows, summary))
}

/// Files produced by [`run_experiment`].
#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub rounds: Vec<RoundRow>,
    pub timing: Vec<TimingRow>,
    pub evaluation: Vec<EvaluationRow>,
    pub outcome: FederationOutcome,
}

/// Runs the configured federation and writes every artifact into
/// `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let population = build_population(&cfg.federation)?;
    let outcome = run_federation_on(&cfg.federation, population)?;

    let rounds = round_rows(cfg, &outcome);
    write_atomic(&dir.join("rounds.csv"), &rounds_to_csv(&rounds)?)?;

    let (attr_rows, summary) = attribution_artifacts(cfg, &outcome)?;
    write_csv(&dir.join("attributions.csv"), &attr_rows)?;
    write_csv(&dir.join("attribution_summary.csv"), &summary)?;

    let timing = timing_rows(cfg, &outcome);
    write_csv(&dir.join("timing.csv"), &timing)?;

    let evaluation: Vec<EvaluationRow> = evaluate_held_out(&cfg.federation, &outcome)?
        .into_iter()
        .zip(&outcome.models)
        .zip(&outcome.population)
        .map(|((ev, _), clients)| EvaluationRow {
            slice: clients[0].train.slice_id,
            test_loss: ev.loss,
            test_confidence: ev.confidence,
            test_psi: ev.psi,
            u_size: ev.u_size,
        })
        .collect();
    write_csv(&dir.join("evaluation.csv"), &evaluation)?;

    let manifest = serde_json::to_string_pretty(&Manifest::new(cfg)).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), manifest.as_bytes())?;

    Ok(RunArtifacts {
        dir,
        rounds,
        timing,
        evaluation,
        outcome,
    })
}

/// Writes every closed-loop dataset as `<out>/<slice>/cl<k>.csv` (pre-split).
pub fn generate_datasets(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let fed = &cfg.federation;
    let mut written = Vec::new();
    for spec in fed.slice_specs() {
        let dir = out.join(spec.slice_id.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for cl in 1..=fed.n_cls {
            let ds = crate::datagen::generate_cl_dataset(
                &spec,
                cl,
                fed.samples_per_cl,
                fed.noniid_shift,
                fed.seed,
                &fed.generator,
            )?;
            let path = dir.join(format!("cl{cl}.csv"));
            let mut buf = Vec::new();
            ds.write_csv(&mut buf)?;
            write_atomic(&path, &buf)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// One aligned (round, slice, run) entry with deltas against the first run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub kind: String,
    pub round: usize,
    pub slice: SliceId,
    pub run: String,
    pub loss: f64,
    pub confidence: f64,
    pub loss_delta: f64,
    pub confidence_delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub runs: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    /// Final-round rows, one per (slice, run).
    pub summary: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> Result<String> {
        let all: Vec<&ComparisonRow> = self.rows.iter().chain(&self.summary).collect();
        let bytes = to_csv(&all)?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Aligns the `rounds.csv` of several runs on (round, slice). Every file is
/// parsed before any row is produced.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::invalid("compare needs at least two run directories"));
    }
    let mut tables = Vec::with_capacity(dirs.len());
    for d in dirs {
        let rows = read_rounds_csv(&d.join("rounds.csv"))
            .map_err(|e| Error::Schema(format!("{}: {e}", d.display())))?;
        let map: BTreeMap<(usize, usize), RoundRow> =
            rows.into_iter().map(|r| ((r.round, r.slice.index()), r)).collect();
        tables.push(map);
    }
    let keys: Vec<(usize, usize)> = tables[0].keys().copied().collect();
    for (d, t) in dirs.iter().zip(&tables).skip(1) {
        if t.keys().ne(tables[0].keys()) {
            return Err(Error::Schema(format!(
                "{} covers different (round, slice) pairs than {}",
                d.display(),
                dirs[0].display()
            )));
        }
    }
    let names: Vec<String> = dirs.iter().map(|d| d.display().to_string()).collect();
    let final_round = keys.iter().map(|k| k.0).max().unwrap_or(0);

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for key in &keys {
        let base = &tables[0][key];
        for (t, name) in tables.iter().zip(&names) {
            let r = &t[key];
            let mut row = ComparisonRow {
                kind: "round".into(),
                round: key.0,
                slice: r.slice,
                run: name.clone(),
                loss: r.loss,
                confidence: r.confidence,
                loss_delta: r.loss - base.loss,
                confidence_delta: r.confidence - base.confidence,
            };
            if key.0 == final_round {
                let mut s = row.clone();
                s.kind = "final".into();
                summary.push(s);
            }
            row.kind = "round".into();
            rows.push(row);
        }
    }
    Ok(Comparison {
        runs: names,
        rows,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convergence_rule() {
        assert_eq!(convergence_round(&[10.0, 5.0, 1.04, 1.0], None), 3);
        assert_eq!(convergence_round(&[10.0, 5.0, 1.06, 1.0], None), 4);
        assert_eq!(convergence_round(&[10.0, 5.0, 1.0], Some(2)), 2);
        assert_eq!(convergence_round(&[10.0, 5.0, 1.0], Some(9)), 3);
    }

    #[test]
    fn rounds_csv_rejects_bad_header() {
        let text = "round,slice,mode,xai_method,loss,confidence,psi\n";
        let err = parse_rounds_csv(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("wall_time_s"), "{err}");
        let text = "round,slice,mode,xai,loss,confidence,psi,wall_time_s\n";
        let err = parse_rounds_csv(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("xai_method"), "{err}");
    }

    #[test]
    fn rounds_csv_names_bad_column() {
        let text = "round,slice,mode,xai_method,loss,confidence,psi,wall_time_s\n1,embb,in_hoc,ig,abc,0.9,0.1,0.5\n";
        let err = parse_rounds_csv(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("loss"), "{err}");
    }

    #[test]
    fn manifest_rejects_foreign_format() {
        let mut m = Manifest::new(&ExperimentConfig::default());
        m.format = "other".into();
        let text = serde_json::to_string(&m).unwrap();
        assert!(matches!(Manifest::parse(&text), Err(Error::Schema(_))));
    }
}
