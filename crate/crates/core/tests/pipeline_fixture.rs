use std::path::PathBuf;

use complab::pipeline::fixture::{two_level_fixture, SHIPPED_COUNTS};
use complab::pipeline::{read_records, run_pipeline, PipelineConfig, MANIFEST_FILE, PROMPTS_FILE};
use complab::Error;

fn shipped() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/pipeline_fixture.jsonl")
}

fn config() -> PipelineConfig {
    PipelineConfig {
        tau: 0.7,
        min_pair_size: 20,
        floor: 20,
        sample_m: None,
        ..PipelineConfig::default()
    }
}

#[test]
fn shipped_dataset_matches_generator() {
    let records = read_records(std::fs::File::open(shipped()).unwrap()).unwrap();
    assert_eq!(records, two_level_fixture(SHIPPED_COUNTS));
}

#[test]
fn shipped_dataset_frozen_counts() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_pipeline(&shipped(), &config(), dir.path()).unwrap();
    assert_eq!(m.records, 82);
    assert_eq!(m.alignment_iterations, 1);
    assert_eq!(m.common_images, 55);
    let l1 = &m.levels[0];
    assert_eq!((l1.captions, l1.paired, l1.aligned, l1.sampled), (82, 82, 55, 55));
    let l2 = &m.levels[1];
    assert_eq!((l2.captions, l2.paired, l2.aligned, l2.sampled), (82, 55, 55, 55));
    assert_eq!(m.n_gen, 25);

    let prompts = std::fs::read_to_string(dir.path().join(PROMPTS_FILE)).unwrap();
    assert_eq!(prompts.lines().count(), 110);
    assert!(prompts.lines().all(|l| l.contains("cat") && l.contains("\"n_gen\":25")));
}

#[test]
fn rerun_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&shipped(), &config(), a.path()).unwrap();
    run_pipeline(&shipped(), &config(), b.path()).unwrap();
    for f in ["manifest.json", "paired.json", "prompts.jsonl"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(a.path().join(MANIFEST_FILE).exists());
}

#[test]
fn empty_dataset_fails_at_pairing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.jsonl");
    std::fs::write(&data, "").unwrap();
    let err = run_pipeline(&data, &config(), &dir.path().join("out")).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "pair", .. }), "{err}");
}

#[test]
fn missing_dataset_fails_at_loading() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_pipeline(&dir.path().join("nope.jsonl"), &config(), dir.path()).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "load", .. }), "{err}");
}

#[test]
fn strict_floor_collapses_with_level_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig { floor: 31, ..config() };
    let err = run_pipeline(&shipped(), &cfg, dir.path()).unwrap_err();
    match err {
        Error::Stage { stage: "align", source } => {
            assert!(matches!(*source, Error::AlignmentCollapsed(2)), "{source}")
        }
        other => panic!("unexpected error {other}"),
    }
}
