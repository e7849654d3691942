use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use occ_core::eval::{
    emit_report, evaluate_study, is_backend_error, metrics, FilterOutcome, OnBackendError, ReportRow,
};
use occ_core::gateway::GatewayError;
use occ_core::loss::selftest;
use occ_core::store::{read_study_dir, write_study_dir};
use occ_core::synth::{cohort_study, Connectivity};
use occ_core::{
    assemble_study, baseline_detect, filter_study, generate_phantom, run_ablation, DetectorParams, FilterOptions,
    MatchPolicy, PhantomSpec, PromptBuilder, StrategyConfig, StudyBundle,
};

use crate::backend::BackendChoice;
use crate::config::{parse_strategy, AppConfig};
use crate::{BackendArgs, Cli, Command, LossAction, StrategyArgs};

/// 2 for backend failures, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<occ_core::Error>() {
            return if is_backend_error(err) { 2 } else { 1 };
        }
        if cause.downcast_ref::<GatewayError>().is_some() {
            return 2;
        }
    }
    1
}

/// `path` itself when it holds a study, else its study subdirectories.
pub fn study_dirs(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.join("study.json").is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path)
        .map_err(|e| occ_core::Error::Input(format!("{}: {e}", path.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("study.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(occ_core::Error::Input(format!("no study found under {}", path.display())).into());
    }
    Ok(dirs)
}

fn load_all(path: &Path) -> anyhow::Result<Vec<(PathBuf, StudyBundle)>> {
    study_dirs(path)?
        .into_iter()
        .map(|d| {
            let b = read_study_dir(&d)?;
            Ok((d, b))
        })
        .collect()
}

fn backend_choice(cfg: &AppConfig, args: &BackendArgs) -> BackendChoice {
    BackendChoice::new(
        cfg.backend.clone(),
        args.backend,
        args.cassette.clone(),
        args.record.clone(),
        args.seed.unwrap_or(cfg.strategy.seed),
    )
}

fn strategy(cfg: &AppConfig, args: &StrategyArgs, seed: u64) -> occ_core::Result<StrategyConfig> {
    parse_strategy(args.strategy.as_deref().unwrap_or(&cfg.strategy.config), seed)
}

/// The one filtering path shared by the CLI and the REST service: run the
/// pipeline on `study` and record the fresh verdicts into it.
pub fn filter_and_record(
    study: &mut StudyBundle,
    choice: &BackendChoice,
    config: StrategyConfig,
    builder: &PromptBuilder,
    policy: &MatchPolicy,
) -> occ_core::Result<FilterOutcome> {
    let gateway = choice.gateway(std::slice::from_ref(study), policy)?;
    let (temperature, max_retries, timeout_s) = choice.filter_options();
    let opts = FilterOptions {
        config,
        builder: builder.clone(),
        temperature,
        max_retries,
        timeout_s,
        on_error: OnBackendError::Abort,
    };
    let out = filter_study(study, &gateway, &opts)?;
    study.record_verdicts(out.verdicts.clone());
    study.metrics = None;
    Ok(out)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = AppConfig::load(cli.config.as_deref()).map_err(|e| occ_core::Error::Input(format!("{e:#}")))?;
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Ingest {
            id,
            header,
            volume,
            lobes,
            candidates,
            truth,
            description,
            description_file,
            out: dest,
        } => {
            let mut files = BTreeMap::new();
            for (name, path) in [
                ("volume.json", Some(header)),
                ("volume.raw", Some(volume)),
                ("lobes.raw", Some(lobes)),
                ("candidates.json", Some(candidates)),
                ("truth.json", truth),
            ] {
                if let Some(p) = path {
                    let bytes = std::fs::read(&p)
                        .map_err(|e| occ_core::Error::Input(format!("{}: {e}", p.display())))?;
                    files.insert(name.to_string(), bytes);
                }
            }
            let description = match description_file {
                Some(p) => Some(
                    std::fs::read_to_string(&p)
                        .map_err(|e| occ_core::Error::Input(format!("{}: {e}", p.display())))?,
                ),
                None => description,
            };
            let b = assemble_study(&id, &files, description)?;
            write_study_dir(&b, &dest)?;
            writeln!(out, "{}: {} candidates -> {}", b.study_id, b.candidates.len(), dest.display())?;
        }
        Command::Phantom { spec, cohort, seed, out: dest } => {
            if let Some(n) = cohort {
                for i in 0..n {
                    let b = cohort_study(i, seed)?;
                    let dir = dest.join(&b.study_id);
                    write_study_dir(&b, &dir)?;
                    writeln!(out, "{}: {} candidates", b.study_id, b.candidates.len())?;
                }
            } else {
                let path = spec.expect("clap requires --spec without --cohort");
                let bytes = std::fs::read(&path)
                    .map_err(|e| occ_core::Error::Input(format!("{}: {e}", path.display())))?;
                let b = generate_phantom(&PhantomSpec::from_json(&bytes)?)?;
                write_study_dir(&b, &dest)?;
                writeln!(
                    out,
                    "{}: {} planted nodules -> {}",
                    b.study_id,
                    b.truth.as_ref().map_or(0, Vec::len),
                    dest.display()
                )?;
            }
        }
        Command::Detect {
            path,
            hu_threshold,
            min_volume,
            max_volume,
            connectivity,
        } => {
            let mut p = DetectorParams::default();
            if let Some(v) = hu_threshold {
                p.hu_threshold = v;
            }
            if let Some(v) = min_volume {
                p.min_volume_mm3 = v;
            }
            if let Some(v) = max_volume {
                p.max_volume_mm3 = v;
            }
            if let Some(n) = connectivity {
                p.connectivity = Connectivity::from_count(n)?;
            }
            p.validate()?;
            for (dir, mut b) in load_all(&path)? {
                let cands = baseline_detect(&b.volume, &b.lobes, &p)?;
                b.set_candidates(cands);
                write_study_dir(&b, &dir)?;
                writeln!(out, "{}: {} candidates", b.study_id, b.candidates.len())?;
            }
        }
        Command::Render {
            path,
            candidate,
            strategy: s,
            seed,
            out: dest,
        } => {
            let config = strategy(&cfg, &s, seed)?;
            let builder = cfg.prompt_builder()?;
            std::fs::create_dir_all(&dest).with_context(|| format!("creating {}", dest.display()))?;
            for (_, b) in load_all(&path)? {
                let chosen: Vec<_> = match &candidate {
                    Some(id) => vec![b
                        .candidate(id)
                        .ok_or_else(|| occ_core::Error::NotFound(format!("{}/candidates/{id}", b.study_id)))?],
                    None => b.candidates.iter().collect(),
                };
                for c in chosen {
                    let bundle = builder.build(&b, c, &config)?;
                    let stem = format!("{}_{}", b.study_id, c.id);
                    for (k, png) in bundle.images.iter().enumerate() {
                        std::fs::write(dest.join(format!("{stem}_{k}.png")), png)?;
                    }
                    std::fs::write(dest.join(format!("{stem}.txt")), &bundle.text)?;
                    writeln!(out, "{}", bundle.summary())?;
                }
            }
        }
        Command::Filter {
            path,
            backend,
            strategy: s,
            json,
        } => {
            let choice = backend_choice(&cfg, &backend);
            let config = strategy(&cfg, &s, choice.seed)?;
            let builder = cfg.prompt_builder()?;
            let mut all = BTreeMap::new();
            for (dir, mut b) in load_all(&path)? {
                let o = filter_and_record(&mut b, &choice, config, &builder, &cfg.matching)
                    .with_context(|| format!("filtering {}", b.study_id))?;
                write_study_dir(&b, &dir)?;
                let count = |d| o.verdicts.iter().filter(|v| v.decision == d).count();
                if !json {
                    writeln!(
                        out,
                        "{}: keep {}, discard {}, reject {} (refusals {}, transport errors {})",
                        b.study_id,
                        count(occ_core::Decision::Keep),
                        count(occ_core::Decision::Discard),
                        count(occ_core::Decision::Reject),
                        o.n_refusal,
                        o.n_transport_error
                    )?;
                }
                all.insert(b.study_id.clone(), o.verdicts);
            }
            if json {
                serde_json::to_writer_pretty(&mut out, &all)?;
                writeln!(out)?;
            }
        }
        Command::Evaluate { path, out: dest } => {
            let mut rows = Vec::new();
            let mut total = Vec::new();
            for (dir, mut b) in load_all(&path)? {
                let m = evaluate_study(&b, &cfg.matching).with_context(|| format!("evaluating {}", b.study_id))?;
                total.push(m.counts);
                rows.push(ReportRow {
                    label: b.study_id.clone(),
                    metrics: m.clone(),
                });
                b.metrics = Some(m);
                write_study_dir(&b, &dir)?;
            }
            let sum: occ_core::ConfusionCounts = total.into_iter().sum();
            let aggregate = metrics(sum)?;
            if rows.len() > 1 {
                rows.push(ReportRow {
                    label: "total".into(),
                    metrics: aggregate.clone(),
                });
            }
            let report = emit_report(&rows)?;
            write!(out, "{}", report.text)?;
            if let Some(p) = dest {
                let mut bytes = serde_json::to_vec_pretty(&aggregate)?;
                bytes.push(b'\n');
                std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Ablate { path, backend, out: dest } => {
            let choice = backend_choice(&cfg, &backend);
            let studies: Vec<StudyBundle> = load_all(&path)?.into_iter().map(|(_, b)| b).collect();
            let gateway = choice.gateway(&studies, &cfg.matching)?;
            let rows = run_ablation(&studies, &gateway, choice.seed, &cfg.matching, &cfg.prompt_builder()?)?;
            let rows: Vec<ReportRow> = rows.iter().map(ReportRow::from).collect();
            let report = emit_report(&rows)?;
            match dest {
                Some(p) => {
                    std::fs::write(&p, &report.csv).with_context(|| format!("writing {}", p.display()))?;
                    write!(out, "{}", report.text)?;
                }
                None => write!(out, "{}", report.csv)?,
            }
        }
        Command::Losses {
            action: LossAction::Selftest { points, seed },
        } => {
            let rows = selftest(points, seed);
            writeln!(out, "{:<14} {:>8} {:>8} {:>14}  result", "loss", "checked", "skipped", "max rel err")?;
            for r in &rows {
                writeln!(
                    out,
                    "{:<14} {:>8} {:>8} {:>14.3e}  {}",
                    r.loss,
                    r.checked,
                    r.skipped,
                    r.max_rel_error,
                    if r.passed { "pass" } else { "FAIL" }
                )?;
            }
            if rows.iter().any(|r| !r.passed) {
                bail!(occ_core::Error::Input("gradient self-test failed".into()));
            }
        }
        Command::Serve {
            store,
            bind,
            port,
            backend,
        } => {
            let mut cfg = cfg;
            if let Some(s) = store {
                cfg.store_root = s;
            }
            if let Some(b) = bind {
                cfg.bind = b;
            }
            if let Some(p) = port {
                cfg.port = p;
            }
            cfg.validate().map_err(|e| occ_core::Error::Input(format!("{e:#}")))?;
            let choice = backend_choice(&cfg, &backend);
            drop(out);
            crate::server::serve(cfg, choice)?;
        }
    }
    Ok(())
}
