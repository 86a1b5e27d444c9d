use std::fs;
use std::path::{Path, PathBuf};

use inhoc::config::{parse_config_str, ExperimentConfig};
use inhoc::datagen::{SliceDataset, SliceId};
use inhoc::federation::{FederationConfig, Mode};
use inhoc::model::{forward, ModelParams};
use inhoc::report::*;
use inhoc::Error;
use proptest::prelude::*;

fn smoke_config(dir: &Path, mode: Mode) -> ExperimentConfig {
    ExperimentConfig {
        label: "smoke".into(),
        output_dir: dir.to_path_buf(),
        report_samples: 10,
        record_wall_time: false,
        federation: FederationConfig {
            mode,
            n_cls: 2,
            rounds: 2,
            local_epochs: 2,
            samples_per_cl: 50,
            hidden: vec![6],
            ig_steps: 8,
            explain_batch: 4,
            eval_samples: 10,
            ..FederationConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn smoke_run_writes_parseable_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(&tmp.path().join("run"), Mode::InHoc);
    let art = run_experiment(&cfg).unwrap();
    for f in [
        "rounds.csv",
        "attributions.csv",
        "attribution_summary.csv",
        "timing.csv",
        "evaluation.csv",
        "manifest.json",
    ] {
        assert!(art.dir.join(f).is_file(), "missing {f}");
    }
    let rounds = read_rounds_csv(&art.dir.join("rounds.csv")).unwrap();
    assert_eq!(rounds.len(), 2 * 3);
    assert_eq!(rounds, art.rounds);
    assert!(rounds.iter().all(|r| (0.0..=1.0).contains(&r.confidence) && r.wall_time_s == 0.0));

    let attrs: Vec<AttributionRow> = csv::Reader::from_path(art.dir.join("attributions.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(attrs.len(), 3 * 10 * 5);
    for chunk in attrs.chunks(5) {
        let s: f64 = chunk.iter().map(|r| r.soft).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    let timing: Vec<TimingRow> = csv::Reader::from_path(art.dir.join("timing.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(timing.len(), 3);
    assert!(timing.iter().all(|t| t.time_to_convergence_s <= t.total_time_s + 1e-12));

    let manifest = Manifest::parse(&fs::read_to_string(art.dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config, cfg);
}

#[test]
fn comparing_a_run_with_itself_gives_zero_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_experiment(&smoke_config(&a, Mode::PostHoc)).unwrap();
    fs::create_dir_all(&b).unwrap();
    fs::copy(a.join("rounds.csv"), b.join("rounds.csv")).unwrap();
    let cmp = compare_runs(&[a.clone(), b]).unwrap();
    assert!(!cmp.rows.is_empty());
    assert!(cmp.rows.iter().all(|r| r.loss_delta == 0.0 && r.confidence_delta == 0.0));
    assert_eq!(cmp.summary.len(), 3 * 2);
    assert!(compare_runs(&[a]).is_err());
}

#[test]
fn truncated_rounds_file_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_experiment(&smoke_config(&a, Mode::PostHoc)).unwrap();
    fs::create_dir_all(&b).unwrap();
    let text = fs::read_to_string(a.join("rounds.csv")).unwrap();
    let cut = &text[..text.len() - 20];
    fs::write(b.join("rounds.csv"), cut).unwrap();
    match compare_runs(&[a, b]) {
        Err(Error::Schema(msg)) => assert!(msg.contains("rounds") || msg.contains("column") || msg.contains("field"), "{msg}"),
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn mismatched_round_sets_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_experiment(&smoke_config(&a, Mode::PostHoc)).unwrap();
    fs::create_dir_all(&b).unwrap();
    let rows = read_rounds_csv(&a.join("rounds.csv")).unwrap();
    fs::write(b.join("rounds.csv"), rounds_to_csv(&rows[..3]).unwrap()).unwrap();
    assert!(matches!(compare_runs(&[a, b]), Err(Error::Schema(_))));
}

#[test]
fn missing_config_is_an_io_error() {
    let err = ExperimentConfig::load(Path::new("/nonexistent/inhoc.toml")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
    assert!(err.to_string().contains("/nonexistent/inhoc.toml"));
}

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus {target}");
    out
}

#[test]
fn fuzz_corpus_replays_cleanly() {
    let mut accepted = 0;
    for (_, bytes) in corpus("config_parse") {
        if let Ok(cfg) = parse_config_str(std::str::from_utf8(&bytes).unwrap()) {
            let _ = cfg.validate();
            assert_eq!(parse_config_str(&cfg.to_toml()).unwrap(), cfg);
            accepted += 1;
        }
    }
    assert!(accepted >= 3);
    for (p, bytes) in corpus("dataset_csv") {
        if let Ok(ds) = SliceDataset::read_csv(bytes.as_slice(), 1, SliceId::Embb) {
            let mut out = Vec::new();
            ds.write_csv(&mut out).unwrap();
            let back = SliceDataset::read_csv(out.as_slice(), 1, SliceId::Embb).unwrap();
            assert_eq!(back.features, ds.features, "{}", p.display());
        }
    }
    for (_, bytes) in corpus("checkpoint_json") {
        let params = ModelParams::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap();
        forward(&params, &vec![1.0; params.input_dim()]).unwrap();
        assert_eq!(ModelParams::from_json(&params.to_json()).unwrap(), params);
    }
    for (p, bytes) in corpus("rounds_csv") {
        let name = p.file_name().unwrap().to_str().unwrap().to_string();
        match parse_rounds_csv(bytes.as_slice()) {
            Ok(rows) => {
                assert!(name.starts_with("valid"), "{name} unexpectedly parsed");
                let again = parse_rounds_csv(rounds_to_csv(&rows).unwrap().as_slice()).unwrap();
                assert_eq!(again, rows);
            }
            Err(_) => assert!(!name.starts_with("valid"), "{name} rejected"),
        }
    }
    for (_, bytes) in corpus("manifest_json") {
        let m = Manifest::parse(std::str::from_utf8(&bytes).unwrap()).unwrap();
        m.config.validate().unwrap();
    }
}

fn arb_row() -> impl Strategy<Value = RoundRow> {
    (
        1usize..100,
        0usize..3,
        any::<bool>(),
        0usize..3,
        prop::num::f64::NORMAL,
        0.0f64..=1.0,
        -1.0f64..1.0,
        0.0f64..1e4,
    )
        .prop_map(|(round, s, ih, m, loss, confidence, psi, wall)| RoundRow {
            round,
            slice: SliceId::from_index(s).unwrap(),
            mode: if ih { Mode::InHoc } else { Mode::PostHoc },
            xai_method: ["ig", "ixg", "shap"][m].parse().unwrap(),
            loss,
            confidence,
            psi,
            wall_time_s: wall,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rounds_csv_round_trips(rows in prop::collection::vec(arb_row(), 0..20)) {
        let bytes = rounds_to_csv(&rows).unwrap();
        let back = parse_rounds_csv(bytes.as_slice()).unwrap();
        prop_assert_eq!(back, rows);
    }

    #[test]
    fn convergence_round_is_first_within_five_percent(
        losses in prop::collection::vec(0.01f64..10.0, 1..40),
    ) {
        let r = convergence_round(&losses, None);
        let last = *losses.last().unwrap();
        prop_assert!(r >= 1 && r <= losses.len());
        prop_assert!(losses[r - 1] < 1.05 * last || r == losses.len());
        prop_assert!(losses[..r - 1].iter().all(|&l| l >= 1.05 * last));
    }
}
