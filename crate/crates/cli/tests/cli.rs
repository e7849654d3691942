mod common;

use std::collections::BTreeMap;

use common::{cohort_dir, ok, run, stderr, stdout};
use occ_core::store::{read_study_dir, write_study_dir};
use occ_core::synth::cohort_spec;
use occ_core::{Decision, MetricsReport, Verdict};

#[test]
fn phantom_detect_filter_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, serde_json::to_vec(&cohort_spec(0, 11)).unwrap()).unwrap();
    let study = tmp.path().join("s0");
    let s = study.to_str().unwrap();

    ok(&["phantom", "--spec", spec.to_str().unwrap(), "--out", s]);
    let detected = ok(&["detect", s]);
    assert!(detected.contains("candidates"), "{detected}");
    let filtered = ok(&["filter", s, "--backend", "mock", "--seed", "7"]);
    assert!(filtered.contains("keep"), "{filtered}");
    ok(&["evaluate", s]);

    let m: MetricsReport = serde_json::from_slice(&std::fs::read(study.join("metrics.json")).unwrap()).unwrap();
    let b = read_study_dir(&study).unwrap();
    assert_eq!(m.counts.n_sample as usize, b.candidates.len());
    assert_eq!(m.counts.n_reject, 0);
    // The default mock answers from ground truth.
    assert_eq!((m.counts.fp, m.counts.fn_), (0, 0));
    assert!(m.counts.tp > 0 && m.counts.tn > 0);
}

#[test]
fn filter_json_lists_every_candidate() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, b) = cohort_dir(tmp.path(), 1);
    let out = ok(&["filter", dir.to_str().unwrap(), "--json", "--seed", "3"]);
    let parsed: BTreeMap<String, Vec<Verdict>> = serde_json::from_str(&out).unwrap();
    let vs = &parsed[&b.study_id];
    assert_eq!(vs.len(), b.candidates.len());
    assert!(vs.iter().all(|v| v.decision != Decision::Reject));
}

#[test]
fn filter_without_description_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, mut b) = cohort_dir(tmp.path(), 0);
    b.description = None;
    write_study_dir(&b, &dir).unwrap();
    let o = run(&["filter", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("description"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_1() {
    let o = run(&["filter", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["filter", ".", "--strategy", "110011"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn replay_miss_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, _) = cohort_dir(tmp.path(), 0);
    let (b, _) = cohort_dir(tmp.path(), 1);
    let cas = tmp.path().join("a.cassette");
    ok(&["filter", a.to_str().unwrap(), "--record", cas.to_str().unwrap()]);
    ok(&["filter", a.to_str().unwrap(), "--backend", "replay", "--cassette", cas.to_str().unwrap()]);
    let o = run(&["filter", b.to_str().unwrap(), "--backend", "replay", "--cassette", cas.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn recorded_ablation_replays_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("cohort");
    for i in 0..2 {
        cohort_dir(&root, i);
    }
    let r = root.to_str().unwrap();
    let cas = tmp.path().join("ablate.cassette");
    let c = cas.to_str().unwrap();
    let recorded = ok(&["ablate", r, "--seed", "5", "--record", c]);
    let first = ok(&["ablate", r, "--seed", "5", "--backend", "replay", "--cassette", c]);
    let second = ok(&["ablate", r, "--seed", "5", "--backend", "replay", "--cassette", c]);
    assert_eq!(first, second);
    assert_eq!(recorded, first);
    assert_eq!(first.lines().count(), 8, "{first}");
    assert!(first.starts_with("config,"), "{first}");
}

#[test]
fn losses_selftest_passes() {
    let o = run(&["losses", "selftest", "--points", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn ingest_loose_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, b) = cohort_dir(tmp.path(), 0);
    let f = |n: &str| dir.join(n).to_str().unwrap().to_string();
    let out = tmp.path().join("ingested");
    ok(&[
        "ingest",
        "--id",
        "loose",
        "--header",
        &f("volume.json"),
        "--volume",
        &f("volume.raw"),
        "--lobes",
        &f("lobes.raw"),
        "--candidates",
        &f("candidates.json"),
        "--truth",
        &f("truth.json"),
        "--description",
        b.description.as_deref().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let back = read_study_dir(&out).unwrap();
    assert_eq!(back.study_id, "loose");
    assert_eq!(back.candidates, b.candidates);
    assert_eq!(back.truth, b.truth);
}
