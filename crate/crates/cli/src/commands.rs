use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;
use std::time::Instant;

use refinery_core::dataset::{load_dataset, validate, write_dataset, DatasetError, Severity};
use refinery_core::eval::evaluate;
use refinery_core::ledger::{self, replay, LedgerError};
use refinery_core::sim::{self, generate_corpus, run_closed_loop, LoopConfig, SimError};
use refinery_core::triage::{ingest_predictions, run_triage, triage_stats, StatsSeries, TriageConfig, TriageError};
use refinery_core::{DatasetVersion, EventPayload, Ledger, SuccessCriteria};
use refinery_service::{load_state, read_queue, serve, system_clock, ServiceError, ServiceFiles};
use serde::Serialize;

use crate::config::RunConfig;
use crate::workdir::Workdir;
use crate::{Command, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StatsFormat {
    Csv,
    Json,
}

fn dataset_err(e: DatasetError) -> Failure {
    match e {
        DatasetError::Io { .. } => Failure::io(e),
        other => Failure::validation(other),
    }
}

fn ledger_err(e: LedgerError) -> Failure {
    match e {
        LedgerError::Io { .. } => Failure::io(e),
        other => Failure::validation(other),
    }
}

fn triage_err(e: TriageError) -> Failure {
    match e {
        TriageError::Io(_) => Failure::io(e),
        other => Failure::validation(other),
    }
}

fn sim_err(e: SimError) -> Failure {
    match e {
        SimError::Ledger(l) => ledger_err(l),
        other => Failure::validation(other),
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::validation(anyhow::anyhow!(msg.into()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::io(anyhow::anyhow!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::io(anyhow::anyhow!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Failure::validation)?;
    write_file(path, text + "\n")
}

fn save_version(wd: &Workdir, v: &DatasetVersion) -> Result<String, Failure> {
    let n = v.version_id();
    fs::create_dir_all(wd.version_dir(n)).map_err(Failure::io)?;
    v.save_json(&wd.version_file(n)).map_err(dataset_err)?;
    let manifest = v.manifest();
    write_file(
        &wd.version_dir(n).join("manifest.json"),
        manifest.to_json_pretty() + "\n",
    )?;
    Ok(manifest.digest)
}

fn load_version(wd: &Workdir, n: u32) -> Result<DatasetVersion, Failure> {
    DatasetVersion::load_json(&wd.version_file(n)).map_err(dataset_err)
}

fn latest_version(wd: &Workdir) -> Result<u32, Failure> {
    wd.latest_version().ok_or_else(|| {
        invalid(format!(
            "no dataset version in {}; run import first",
            wd.root().display()
        ))
    })
}

/// Ledger contents without creating the file.
fn read_ledger(wd: &Workdir) -> Result<Ledger, Failure> {
    match fs::read_to_string(wd.ledger_file()) {
        Ok(text) => Ledger::parse(&text).map_err(ledger_err),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Ledger::new()),
        Err(e) => Err(Failure::io(e)),
    }
}

fn decided_items(ledger: &Ledger, iteration: u32) -> BTreeSet<u64> {
    ledger
        .events()
        .iter()
        .filter_map(|e| e.payload.decision())
        .filter(|d| d.iteration == iteration)
        .map(|d| d.item_id)
        .collect()
}

pub fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<(), Failure> {
    let wd = Workdir::new(&cfg.workdir);
    match cmd {
        Command::Import => import(&wd, cfg),
        Command::Triage { predictions, model_tag } => triage(&wd, cfg, predictions, model_tag),
        Command::Serve { host } => serve_queue(&wd, cfg, host),
        Command::Apply => apply(&wd),
        Command::Export { out, version } => export(&wd, cfg, out, *version),
        Command::Stats { format } => stats(&wd, *format),
        Command::Simulate {
            scenes,
            drop,
            corrupt,
            iterations,
            noise,
            loop_seed,
        } => {
            let seed = cfg
                .seed
                .ok_or_else(|| Failure::usage("simulate requires --seed (or REFINERY_SEED)".into()))?;
            let params = SimParams {
                scenes: *scenes,
                drop: *drop,
                corrupt: *corrupt,
                iterations: *iterations,
                noise: *noise,
                corpus_seed: seed,
                loop_seed: loop_seed.unwrap_or(seed),
            };
            simulate(&wd, cfg, &params)
        }
        Command::Evaluate { predictions, version } => evaluate_cmd(&wd, cfg, predictions, *version),
    }
}

fn import(wd: &Workdir, cfg: &RunConfig) -> Result<(), Failure> {
    let root = cfg.dataset_root()?;
    let root = fs::canonicalize(root).map_err(|e| Failure::io(anyhow::anyhow!("{}: {e}", root.display())))?;
    if wd.latest_version().is_some() {
        return Err(invalid(format!(
            "{} already holds an imported dataset",
            wd.root().display()
        )));
    }
    let out = load_dataset(&root).map_err(dataset_err)?;
    let mut diagnostics = out.diagnostics;
    diagnostics.extend(validate(&out.version));
    let digest = save_version(wd, &out.version)?;
    write_json(&wd.version_dir(0).join("diagnostics.json"), &diagnostics)?;

    let errors = diagnostics.iter().filter(|d| d.severity == Severity::Error).count();
    for d in &diagnostics {
        eprintln!("{d}");
    }
    println!("version: 0");
    println!("images: {}", out.version.len());
    println!("grasps: {}", out.version.annotation_count());
    println!("diagnostics: {}", diagnostics.len());
    println!("digest: {digest}");
    if errors > 0 {
        return Err(invalid(format!("{errors} diagnostics with error severity")));
    }
    Ok(())
}

fn triage(wd: &Workdir, cfg: &RunConfig, predictions: &Path, model_tag: &str) -> Result<(), Failure> {
    let base = latest_version(wd)?;
    let iteration = base + 1;
    if wd.queue_file(iteration).is_file() && !decided_items(&read_ledger(wd)?, iteration).is_empty() {
        return Err(invalid(format!("iteration {iteration} already has decisions")));
    }
    let version = load_version(wd, base)?;
    let file = File::open(predictions).map_err(|e| Failure::io(anyhow::anyhow!("{}: {e}", predictions.display())))?;
    let ingested = ingest_predictions(BufReader::new(file), model_tag, iteration).map_err(triage_err)?;
    let tcfg = TriageConfig {
        threshold: cfg.threshold,
        top_k: 1,
    };
    let (report, queue) = run_triage(&version, &ingested.set, &tcfg).map_err(triage_err)?;
    let earlier: Vec<_> = wd
        .reports()
        .map_err(Failure::validation)?
        .into_iter()
        .filter(|r| r.iteration < iteration)
        .collect();
    let report = report.with_history(&earlier);

    write_json(&wd.queue_file(iteration), &queue)?;
    write_json(&wd.report_file(iteration), &report)?;
    write_json(&wd.iteration_dir(iteration).join("rejects.json"), &ingested.rejects)?;
    println!("iteration: {iteration}");
    println!("evaluated: {}", report.evaluated);
    println!("flagged: {}", report.flagged);
    println!("unflagged: {}", report.unflagged);
    println!("prediction_missing: {}", report.prediction_missing);
    println!("rejected_lines: {}", ingested.rejects.len());
    Ok(())
}

fn serve_queue(wd: &Workdir, cfg: &RunConfig, host: &str) -> Result<(), Failure> {
    let n = wd
        .latest_iteration()
        .ok_or_else(|| invalid("no triaged iteration to review; run triage first"))?;
    let files = ServiceFiles {
        version: wd.version_file(n - 1),
        queue: wd.queue_file(n),
        ledger: wd.ledger_file(),
        reports: wd.report_files(),
        image_root: cfg.dataset_root.clone(),
    };
    let state = load_state(&files, system_clock()).map_err(Failure::validation)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(Failure::io)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, cfg.port)).await?;
        println!("iteration: {n}");
        println!("listening: http://{}", listener.local_addr()?);
        serve(listener, state).await
    })
    .map_err(Failure::io)
}

fn apply(wd: &Workdir) -> Result<(), Failure> {
    let n = wd
        .latest_iteration()
        .ok_or_else(|| invalid("no triaged iteration to apply"))?;
    if wd.version_file(n).is_file() {
        return Err(invalid(format!("iteration {n} was already applied")));
    }
    let queue = read_queue(&wd.queue_file(n)).map_err(|e| match e {
        ServiceError::Queue { .. } => Failure::io(e),
        other => Failure::validation(other),
    })?;
    let mut ledger = Ledger::open(&wd.ledger_file()).map_err(ledger_err)?;
    let decided = decided_items(&ledger, n);
    let pending = queue.iter().filter(|i| !decided.contains(&i.item_id)).count();
    if pending > 0 {
        return Err(invalid(format!("iteration {n} still has {pending} undecided items")));
    }
    if ledger.last_boundary().is_none_or(|b| b < n) {
        ledger
            .append(EventPayload::IterationBoundary { iteration: n })
            .map_err(ledger_err)?;
    }
    let base = load_version(wd, n - 1)?;
    let next = replay(&base, ledger.events(), n).map_err(ledger_err)?;
    let digest = save_version(wd, &next)?;
    let t = ledger::iteration_summary(ledger.events(), n).map_err(ledger_err)?;
    println!("version: {}", next.version_id());
    println!("parent: {}", n - 1);
    println!("images: {}", next.len());
    println!("grasps: {}", next.annotation_count());
    println!("labels_added: {}", t.labels_added);
    println!("images_removed: {}", t.images_removed);
    println!("tn_count: {}", t.tn_count);
    println!("digest: {digest}");
    Ok(())
}

fn export(wd: &Workdir, cfg: &RunConfig, out: &Path, version: Option<u32>) -> Result<(), Failure> {
    let n = match version {
        Some(n) => n,
        None => latest_version(wd)?,
    };
    if let Some(root) = &cfg.dataset_root {
        let (a, b) = (
            std::path::absolute(out).map_err(Failure::io)?,
            std::path::absolute(root).map_err(Failure::io)?,
        );
        if a.starts_with(&b) {
            return Err(invalid("export target must not lie inside the dataset root"));
        }
    }
    let v = load_version(wd, n)?;
    let manifest = write_dataset(&v, out).map_err(dataset_err)?;
    println!("version: {n}");
    println!("images: {}", manifest.totals.images);
    println!("grasps_original: {}", manifest.totals.grasps_original);
    println!("grasps_pseudo: {}", manifest.totals.grasps_pseudo);
    println!("digest: {}", manifest.digest);
    Ok(())
}

fn workdir_stats(wd: &Workdir) -> Result<StatsSeries, Failure> {
    let reports = wd.reports().map_err(Failure::validation)?;
    let ledger = read_ledger(wd)?;
    let mut tallies = ledger::all_summaries(ledger.events());
    if let Some(open) = reports.iter().map(|r| r.iteration).max() {
        if !tallies.iter().any(|t| t.iteration == open) {
            tallies.push(ledger::open_iteration_tally(ledger.events(), open));
        }
    }
    Ok(triage_stats(&reports, &tallies))
}

fn stats(wd: &Workdir, format: StatsFormat) -> Result<(), Failure> {
    let series = workdir_stats(wd)?;
    let csv = series.to_csv();
    write_file(&wd.root().join("stats.csv"), &csv)?;
    write_json(&wd.root().join("stats.json"), &series)?;
    match format {
        StatsFormat::Csv => print!("{csv}"),
        StatsFormat::Json => println!(
            "{}",
            serde_json::to_string_pretty(&series).map_err(Failure::validation)?
        ),
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimParams {
    pub scenes: usize,
    pub drop: f64,
    pub corrupt: f64,
    pub iterations: u32,
    pub noise: f64,
    pub corpus_seed: u64,
    pub loop_seed: u64,
}

#[derive(Debug, Serialize)]
struct Seeds {
    corpus: u64,
    r#loop: u64,
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    seeds: Seeds,
    config: &'a SimParams,
    threshold: f64,
    per_iteration: &'a StatsSeries,
    flagged_by_kind: Vec<KindCounts>,
    recovery: sim::Recovery,
    final_digest: String,
}

#[derive(Debug, Default, Serialize)]
struct KindCounts {
    iteration: u32,
    labels_dropped: usize,
    labels_corrupted: usize,
    clean: usize,
}

fn simulate(wd: &Workdir, cfg: &RunConfig, p: &SimParams) -> Result<(), Failure> {
    if p.noise.is_nan() || p.noise < 0.0 {
        return Err(invalid(format!("noise must be non-negative, got {}", p.noise)));
    }
    let started = Instant::now();
    let corpus = generate_corpus(p.scenes, p.drop, p.corrupt, p.corpus_seed).map_err(sim_err)?;
    let mut lcfg = LoopConfig::new(p.iterations, p.noise, p.loop_seed);
    lcfg.threshold = cfg.threshold;
    let out = run_closed_loop(&corpus, &lcfg).map_err(sim_err)?;
    let recovery = sim::recovery(&corpus, &out.final_version, sim::OPERATOR_VALID_IOU);
    let elapsed = started.elapsed();

    let dir = wd.root().join("simulation");
    let manifest = out.final_version.manifest();
    let flagged_by_kind = out
        .flagged_kinds
        .iter()
        .enumerate()
        .map(|(i, kinds)| {
            let mut k = KindCounts {
                iteration: i as u32 + 1,
                ..Default::default()
            };
            for c in kinds {
                match c {
                    sim::Corruption::LabelsDropped => k.labels_dropped += 1,
                    sim::Corruption::LabelsCorrupted => k.labels_corrupted += 1,
                    sim::Corruption::None => k.clean += 1,
                }
            }
            k
        })
        .collect();
    let report = RunReport {
        seeds: Seeds {
            corpus: p.corpus_seed,
            r#loop: p.loop_seed,
        },
        config: p,
        threshold: cfg.threshold,
        per_iteration: &out.stats,
        flagged_by_kind,
        recovery: recovery.clone(),
        final_digest: manifest.digest.clone(),
    };
    write_file(&dir.join("ledger.ndjson"), out.ledger.to_ndjson())?;
    write_file(&dir.join("stats.csv"), out.stats.to_csv())?;
    write_json(&dir.join("stats.json"), &out.stats)?;
    write_json(&dir.join("run_report.json"), &report)?;
    write_file(&dir.join("manifest.json"), manifest.to_json_pretty() + "\n")?;

    for r in &out.stats.rows {
        let prop = r.fn_proportion.map_or("null".to_string(), |v| format!("{v:.4}"));
        println!(
            "iteration: {} false_count: {} fn_count: {} tn_count: {} fn_proportion: {prop} labels_added: {} images_removed: {}",
            r.iteration, r.false_count, r.fn_count, r.tn_count, r.labels_added, r.images_removed
        );
    }
    println!("false_count_non_increasing: {}", out.stats.false_count_non_increasing);
    println!(
        "corrupted_removed: {}/{}",
        recovery.corrupted_removed, recovery.corrupted_scenes
    );
    println!(
        "dropped_label_coverage: {:.4} ({}/{})",
        recovery.coverage, recovery.recovered_labels, recovery.dropped_labels
    );
    println!("final_digest: {}", manifest.digest);
    println!("runtime_ms: {}", elapsed.as_millis());
    Ok(())
}

fn evaluate_cmd(wd: &Workdir, cfg: &RunConfig, predictions: &Path, version: Option<u32>) -> Result<(), Failure> {
    let n = match version {
        Some(n) => n,
        None => latest_version(wd)?,
    };
    let v = load_version(wd, n)?;
    let file = File::open(predictions).map_err(|e| Failure::io(anyhow::anyhow!("{}: {e}", predictions.display())))?;
    let ingested = ingest_predictions(BufReader::new(file), "evaluation", n).map_err(triage_err)?;
    let criteria = SuccessCriteria {
        iou_min: cfg.iou_min,
        angle_max: cfg.angle_max.to_radians(),
    };
    let e = evaluate(&v, &ingested.set, criteria).map_err(Failure::validation)?;
    println!("version: {n}");
    println!("evaluated: {}", e.evaluated);
    println!("successes: {}", e.successes);
    println!("accuracy: {:.4}", e.accuracy);
    Ok(())
}
