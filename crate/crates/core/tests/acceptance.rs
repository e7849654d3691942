//! Runs every primary acceptance criterion and prints one line per criterion.
//! Built with `harness = false`; exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::published::{derive, ROWS};
use occ_core::eval::{
    confusion, filter_study, parse_report_csv, report_csv, run_ablation, study_counts, CsvRow, FilterOptions,
    ReportRow,
};
use occ_core::gateway::{Backoff, Cassette, RecordingBackend, ReplayBackend};
use occ_core::loss::{cross_entropy, focal_loss, selftest};
use occ_core::store::encode_study;
use occ_core::synth::cohort_study;
use occ_core::text::{check_corpus, read_corpus};
use occ_core::{
    load_study, metrics, ConfusionCounts, Decision, Gateway, LvmRequest, MatchPolicy, MockBackend,
    MockOracleParams, NoduleCandidate, PromptBuilder, PromptBundle, StrategyConfig, StudyBundle, Toggle,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn cohort() -> Vec<StudyBundle> {
    (0..10).map(|i| cohort_study(i, 11).unwrap()).collect()
}

fn mock_gateway(params: MockOracleParams, studies: &[StudyBundle]) -> Gateway {
    Gateway::new(Arc::new(
        MockBackend::from_studies(params, studies, &MatchPolicy::default()).unwrap(),
    ))
    .with_backoff(Backoff::none())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn published_rates() -> Outcome {
    let mut notes = Vec::new();
    for row in &ROWS {
        let m = metrics(derive(row)).map_err(|e| e.to_string())?;
        ensure!(close(m.fdr, row.fdr, 0.001), "{} FDR {:.4}", row.name, m.fdr);
        ensure!(close(m.fp_per_scan, row.fp_scan, 0.001), "{} FP/scan {:.4}", row.name, m.fp_per_scan);
        if let (Some(s), Some(t)) = (row.sen, row.spe) {
            ensure!(close(m.sensitivity, s, 0.001), "{} Sen {:.4}", row.name, m.sensitivity);
            ensure!(close(m.specificity, t, 0.001), "{} Spe {:.4}", row.name, m.specificity);
        }
        match (row.name, row.f1) {
            ("UNet-3D", Some(printed)) => {
                ensure!(close(m.f1, 0.451, 0.0005), "UNet-3D computed F1 {:.4}", m.f1);
                ensure!(!close(m.f1, printed, 0.001), "UNet-3D F1 unexpectedly matches");
                notes.push(format!("UNet-3D F1 {:.3} vs printed {printed}", m.f1));
            }
            (_, Some(f)) => ensure!(close(m.f1, f, 0.001), "{} F1 {:.4}", row.name, m.f1),
            _ => {}
        }
    }
    let g = metrics(derive(&ROWS[4])).unwrap();
    Ok(format!(
        "GPT-4V {:.3}/{:.3}/{:.3}/{:.3}/{:.3}; {}",
        g.fdr,
        g.fp_per_scan,
        g.sensitivity,
        g.specificity,
        g.f1,
        notes.join("; ")
    ))
}

fn reject_rate() -> Outcome {
    // Cells are arbitrary; only their sum (221 - 127) is fixed.
    let c = ConfusionCounts::new(30, 35, 4, 25, 28).with_rejects(127);
    ensure!(c.n_sample == 221, "n_sample {}", c.n_sample);
    let m = metrics(c).map_err(|e| e.to_string())?;
    ensure!(close(m.reject_rate, 0.575, 0.001), "reject rate {:.4}", m.reject_rate);
    Ok(format!("127/221 = {:.4}", m.reject_rate))
}

fn losses() -> Outcome {
    let rows = selftest(200, 2024);
    for r in &rows {
        ensure!(r.checked + r.skipped == 200, "{}: {} points", r.loss, r.checked + r.skipped);
        ensure!(r.passed, "{}: max rel error {:.2e}", r.loss, r.max_rel_error);
    }
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let p = (k as f64 + 0.5) / 1000.0;
        for y in [0u8, 1] {
            let yf = y as f64;
            let ce = cross_entropy(&[p, 1.0 - p], &[yf, 1.0 - yf]).map_err(|e| e.to_string())?;
            let fl = focal_loss(p, y, 0.5, 0.0).map_err(|e| e.to_string())?;
            worst = worst.max((fl - 0.5 * ce).abs());
        }
    }
    ensure!(worst <= 1e-12, "focal vs 0.5 CE differs by {worst:e}");
    let summary: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {:.1e} ({} skipped)", r.loss, r.max_rel_error, r.skipped))
        .collect();
    Ok(format!("{}; focal/CE max diff {worst:.1e}", summary.join(", ")))
}

fn synthetic_bundle(i: usize) -> PromptBundle {
    PromptBundle {
        study_id: "sim".into(),
        candidate_id: format!("sim-{i:05}"),
        slice: 0,
        images: vec![vec![0x89, b'P', b'N', b'G']],
        text: format!("candidate {i}"),
        config: StrategyConfig::all_on(0),
        trace: Vec::new(),
    }
}

fn simulation() -> Outcome {
    let studies = cohort();
    let g = mock_gateway(MockOracleParams::perfect(7), &studies);
    let opts = FilterOptions::default();
    let mut total = ConfusionCounts::default();
    for s in &studies {
        let out = filter_study(s, &g, &opts).map_err(|e| e.to_string())?;
        total = total + study_counts(s, &out.verdicts, &MatchPolicy::default()).map_err(|e| e.to_string())?;
    }
    let m = metrics(total).map_err(|e| e.to_string())?;
    let n = total.n_sample;
    ensure!((50..=120).contains(&n), "{n} candidates over 10 phantoms");
    ensure!(m.fdr == 0.0 && m.sensitivity == 1.0 && total.fn_ == 0, "perfect oracle gave {total:?}");

    // Rates keyed to the GPT-4V row, a 5000-candidate draw through the gateway.
    let (s, t) = (0.979, 0.724);
    let n_sim = 5000;
    let mut backend = MockBackend::new(MockOracleParams {
        keep_rate: s,
        discard_rate: t,
        refusal_rate: 0.0,
        conceal_off_refusal_multiplier: 1.0,
        rng_seed: 42,
    })
    .unwrap();
    let bundles: Vec<PromptBundle> = (0..n_sim).map(synthetic_bundle).collect();
    // Same positive share as the cohort of 221.
    let is_true: Vec<bool> = (0..n_sim).map(|i| (i * 221) % 1000 < 212).collect();
    for (b, &f) in bundles.iter().zip(&is_true) {
        backend.insert(&b.study_id, &b.candidate_id, f);
    }
    let g = Gateway::new(Arc::new(backend)).with_backoff(Backoff::none());
    let candidates: Vec<NoduleCandidate> = bundles
        .iter()
        .map(|b| NoduleCandidate {
            id: b.candidate_id.clone(),
            centroid: [0.0; 3],
            bbox: occ_core::BoundingBox { min: [0; 3], max: [0; 3] },
            confidence: 1.0,
            mask: None,
        })
        .collect();
    let verdicts: Vec<_> = bundles
        .iter()
        .map(|b| {
            let r = g.send(&LvmRequest::new(b.clone(), "mock")).expect("mock answers");
            occ_core::parse_verdict(&r, &b.candidate_id)
        })
        .collect();
    let c = confusion(&candidates, &is_true, &verdicts, 1).map_err(|e| e.to_string())?;
    let sim = metrics(c).map_err(|e| e.to_string())?;
    ensure!(c.tp + c.fn_ >= 1000, "only {} positives", c.tp + c.fn_);
    ensure!(close(sim.sensitivity, s, 0.02), "empirical Sen {:.4}", sim.sensitivity);
    ensure!(close(sim.specificity, t, 0.02), "empirical Spe {:.4}", sim.specificity);
    Ok(format!(
        "perfect oracle on {n} candidates: FDR 0, Sen 1, FN 0; {n_sim} simulated: Sen {:.3}, Spe {:.3}",
        sim.sensitivity, sim.specificity
    ))
}

fn ablation() -> Outcome {
    let studies = cohort();
    let params = MockOracleParams {
        keep_rate: 0.95,
        discard_rate: 0.75,
        refusal_rate: 0.05,
        conceal_off_refusal_multiplier: 11.5,
        rng_seed: 3,
    };
    let run = || -> Result<(Vec<ReportRow>, String), String> {
        let g = mock_gateway(params, &studies);
        let rows = run_ablation(&studies, &g, 3, &MatchPolicy::default(), &PromptBuilder::default())
            .map_err(|e| e.to_string())?;
        let rows: Vec<ReportRow> = rows.iter().map(ReportRow::from).collect();
        let csv = report_csv(&rows).map_err(|e| e.to_string())?;
        Ok((rows, csv))
    };
    let (rows, csv_a) = run()?;
    let (_, csv_b) = run()?;
    ensure!(rows.len() == 7, "{} rows", rows.len());
    let want = [
        Toggle::HighlightRoi,
        Toggle::VisionInstructions,
        Toggle::GuidingQuestions,
        Toggle::ConcealMedicalIntent,
        Toggle::LeaveTimeToThink,
        Toggle::SingleVisionInput,
    ];
    for (k, t) in want.iter().enumerate() {
        let label = format!("no-{}", t.name());
        ensure!(rows[k].label == label, "row {k} is {} not {label}", rows[k].label);
    }
    ensure!(rows[6].label == "all", "last row {}", rows[6].label);
    let conceal = rows[3].metrics.reject_rate;
    for (k, r) in rows.iter().enumerate() {
        ensure!(k == 3 || r.metrics.reject_rate < conceal, "row {k} reject {} >= {conceal}", r.metrics.reject_rate);
    }
    ensure!(csv_a == csv_b, "CSV differs between runs");
    Ok(format!("7 rows, conceal-off reject rate {conceal:.3}, CSV byte-identical"))
}

fn oracles() -> Outcome {
    common::oracles::detector_equals_flood_fill_on_cohort();
    common::oracles::detector_equals_flood_fill_on_random_volumes();
    common::oracles::matching_equals_brute_force_assignment();
    common::oracles::locate_equals_voxel_scan();
    Ok("detector, matching and lobe lookup equal their oracles".into())
}

fn round_trips() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let studies: Vec<StudyBundle> = (0..3).map(|i| cohort_study(i, 5).unwrap()).collect();

    let mut s = studies[0].clone();
    s.override_verdict(&s.candidates[0].id.clone(), Decision::Discard, "check")
        .map_err(|e| e.to_string())?;
    let dir = occ_core::save_study(&s, tmp.path()).map_err(|e| e.to_string())?;
    let back = load_study(&dir).map_err(|e| e.to_string())?;
    ensure!(back == s, "study changed across save/load");
    ensure!(
        encode_study(&back).unwrap() == encode_study(&s).unwrap(),
        "re-encoded study bytes differ"
    );

    let c = &studies[1].candidates[0];
    let cfg = StrategyConfig::all_on(9).without(Toggle::SingleVisionInput);
    let a = PromptBuilder::default().build(&studies[1], c, &cfg).map_err(|e| e.to_string())?;
    let b = PromptBuilder::default().build(&studies[1], c, &cfg).map_err(|e| e.to_string())?;
    ensure!(a == b, "prompt bundles differ");

    let cassette = tmp.path().join("c.bin");
    let params = MockOracleParams {
        keep_rate: 0.8,
        discard_rate: 0.6,
        refusal_rate: 0.1,
        conceal_off_refusal_multiplier: 1.0,
        rng_seed: 1,
    };
    let inner = Arc::new(MockBackend::from_studies(params, &studies, &MatchPolicy::default()).unwrap());
    let rec = Gateway::new(Arc::new(RecordingBackend::new(inner, &cassette).map_err(|e| e.to_string())?));
    let opts = FilterOptions::default();
    let recorded: Vec<_> = studies
        .iter()
        .map(|s| filter_study(s, &rec, &opts).map(|o| o.verdicts))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let replay = Gateway::new(Arc::new(ReplayBackend::open(&cassette).map_err(|e| e.to_string())?));
    let replayed: Vec<_> = studies
        .iter()
        .map(|s| filter_study(s, &replay, &opts).map(|o| o.verdicts))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure!(recorded == replayed, "replayed verdicts differ");
    let bytes = std::fs::read(&cassette).unwrap();
    ensure!(Cassette::decode(&bytes).unwrap().encode() == bytes, "cassette not canonical");

    let rows: Vec<ReportRow> = ROWS
        .iter()
        .map(|r| ReportRow {
            label: r.name.into(),
            metrics: metrics(derive(r)).unwrap(),
        })
        .collect();
    let csv = report_csv(&rows).map_err(|e| e.to_string())?;
    let parsed = parse_report_csv(&csv).map_err(|e| e.to_string())?;
    ensure!(parsed == rows.iter().map(CsvRow::from).collect::<Vec<_>>(), "CSV rows changed");
    let n: usize = recorded.iter().map(Vec::len).sum();
    Ok(format!("study, prompt, cassette ({n} verdicts) and CSV round-trips hold"))
}

fn corpus() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/clinical_corpus.jsonl");
    let entries = read_corpus(&path).map_err(|e| e.to_string())?;
    ensure!(entries.len() >= 30, "{} entries", entries.len());
    let texts: Vec<String> = entries.iter().map(|e| e.text.to_lowercase()).collect();
    for needle in ["lul", "lll", "rul", "rml", "rll", "left upper lobe", " cm", " mm", "no "] {
        ensure!(texts.iter().any(|t| t.contains(needle)), "corpus lacks {needle:?}");
    }
    let failures = check_corpus(&entries);
    ensure!(
        failures.is_empty(),
        "{} of {} disagree, first: {:?}",
        failures.len(),
        entries.len(),
        failures[0].text
    );
    Ok(format!("{}/{} entries agree", entries.len(), entries.len()))
}

fn main() {
    let criteria: [(u8, &str, Duration, fn() -> Outcome); 8] = [
        (1, "published metric reproduction", Duration::from_secs(1), published_rates),
        (2, "reject-rate reproduction", Duration::from_secs(1), reject_rate),
        (3, "loss gradient verification", Duration::from_secs(10), losses),
        (4, "end-to-end simulation", Duration::from_secs(120), simulation),
        (5, "ablation harness", Duration::from_secs(120), ablation),
        (6, "oracle equivalence", Duration::MAX, oracles),
        (7, "determinism and round-trips", Duration::MAX, round_trips),
        (8, "parser corpus", Duration::MAX, corpus),
    ];
    // Keep assertion noise from the oracle helpers on one line each.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let dt = t0.elapsed();
        let result = match result {
            Ok(_) if dt > limit => Err(format!("took {dt:.2?}, limit {limit:.0?}")),
            r => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => {
                failed += 1;
                ("FAIL", e.clone())
            }
        };
        println!("[{tag}] criterion {id}: {name} ({dt:.2?}) {detail}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}
