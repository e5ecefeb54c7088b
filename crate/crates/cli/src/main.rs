//! `retopo` command-line tool.
//!
//! Exit codes: 0 success, 1 check failure (gradient check, audit
//! violation, non-finite training loss), 2 I/O error, 3 invalid input.
//! Machine-readable results go to stdout; logs go to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use retopo::gradsuite;
use retopo::model::{Checkpoint, Model};
use retopo::synth::{
    derive_seed, generate_dataset, load_dataset, load_scan, save_dataset, LabelPolicy, LabeledScan,
    SceneConfig,
};
use retopo::tensor::{GradCheck, Tensor};
use retopo::topology::{audit, AuditReport, TopologySchema, Violation};
use retopo::train::{
    ablation_csv, evaluate, run_ablation_suite, series_csv, train, Arm, ExperimentConfig, ExperimentData,
};
use retopo::Error;

#[derive(Parser, Debug)]
#[command(name = "retopo", version, about = "Layer/lesion topology toolkit for synthetic OCT B-scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic labeled scans.
    Gen {
        /// Scene configuration JSON (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Topology schema JSON (retina default when omitted).
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value = "full", value_parser = ["full", "partial", "unlabeled"])]
        policy: String,
    },
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation dataset; generated from the config when omitted.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Training seed (first config seed when omitted).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for metrics files and post-engine predictions.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate loss ablation arms on shared data and seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated arms out of full,-lp,-to,-bc,-rec,+triplet.
        #[arg(long, default_value = "full,-lp,-to,-bc,-rec,+triplet", allow_hyphen_values = true)]
        arms: String,
        /// Comma-separated seeds (config seeds when omitted).
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Only run checks whose name contains this string.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check boundary ordering and lesion confinement of saved scans.
    Audit {
        /// A scan directory or a dataset of scan directories.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Draw boundaries and lesion tints over a scan.
    Render {
        #[arg(long)]
        scan: PathBuf,
        /// Output image, .png (color) or .pgm (gray).
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Check(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        Error::NonFiniteLoss(_) => 1,
        Error::Tensor(_) | Error::Json(_) | Error::Validation(_) => 3,
    }
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json` (or `<file>.manifest.json`) describing the run.
fn manifest(path: &Path, command: &str, details: serde_json::Value) -> Result<(), Error> {
    let doc = json!({
        "tool": "retopo",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "details": details,
    });
    write(path, &serde_json::to_string_pretty(&doc)?)
}

fn load_schema(path: Option<&Path>) -> Result<TopologySchema, Error> {
    match path {
        Some(p) => TopologySchema::from_json(&read(p)?),
        None => Ok(TopologySchema::retina_default()),
    }
}

fn cmd_gen(
    config: Option<&Path>,
    out: &Path,
    count: usize,
    seed: u64,
    schema: Option<&Path>,
    policy: &str,
) -> Outcome {
    let scene: SceneConfig = match config {
        Some(p) => serde_json::from_str(&read(p)?).map_err(Error::from)?,
        None => SceneConfig::default(),
    };
    let schema = load_schema(schema)?;
    let policy = match policy {
        "partial" => LabelPolicy::Partial,
        "unlabeled" => LabelPolicy::Unlabeled,
        _ => LabelPolicy::Full,
    };
    let scans = generate_dataset(seed, count, &scene, &schema, policy, None)?;
    save_dataset(out, &scans, &schema)?;
    manifest(
        &out.join("manifest.json"),
        "gen",
        json!({ "scene": scene, "seed": seed, "count": count, "policy": policy, "schema": schema.to_document() }),
    )?;
    log::info!("wrote {count} scans to {}", out.display());
    println!("{}", out.display());
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out: &Path, val: Option<&Path>, seed: Option<u64>) -> Outcome {
    let cfg = ExperimentConfig::from_json(&read(config)?)?;
    let (schema, scans) = load_dataset(data)?;
    let val_scans = match val {
        Some(v) => load_dataset(v)?.1,
        None => generate_dataset(derive_seed(cfg.data_seed, 2), cfg.val_count, &cfg.scene, &schema, LabelPolicy::Full, None)?,
    };
    let seed = seed.or(cfg.seeds.first().copied()).unwrap_or(0);
    let outcome = train(&cfg, &schema, &scans, &[], &val_scans, seed)?;
    mkdir(out)?;
    outcome.model.checkpoint(seed, outcome.best_step as u64).save(out.join("checkpoint.bin"))?;
    write(&out.join("series.csv"), &series_csv(&outcome.series))?;
    let mut v = String::from("step,mad_total_um,dice_total,dice_smoothed_total,violations,score\n");
    for (step, m, score) in &outcome.validation {
        v.push_str(&format!("{step},{},{},{},{},{score}\n", m.mad_total_um, m.dice_total, m.dice_smoothed_total, m.violations()));
    }
    write(&out.join("validation.csv"), &v)?;
    schema.save(out.join("schema.json"))?;
    manifest(
        &out.join("manifest.json"),
        "train",
        json!({ "config": cfg, "seed": seed, "steps": outcome.steps, "best_step": outcome.best_step, "data": data }),
    )?;
    print!("{v}");
    Ok(())
}

fn prediction_scan(p: &retopo::train::Prediction, truth: &LabeledScan, k: usize) -> Result<LabeledScan, Error> {
    let (h, w) = (truth.height(), truth.width());
    let lesions = Tensor::new(vec![k, h, w], p.lesions.data()[..k * h * w].to_vec())?;
    Ok(LabeledScan { boundaries: p.boundaries.clone(), lesions, flags: vec!["prediction".into()], ..truth.clone() })
}

fn cmd_eval(ckpt: &Path, data: &Path, out: Option<&Path>) -> Outcome {
    let ck = Checkpoint::load(ckpt)?;
    let model = Model::from_checkpoint(&ck)?;
    let (schema, scans) = load_dataset(data)?;
    if schema.surfaces() != model.config.surfaces || schema.lesions() != model.config.lesions {
        return Err(Error::validation("dataset schema does not match the checkpoint").into());
    }
    let axial = SceneConfig::default().axial_um;
    let (report, preds) = evaluate(&model, &scans, &schema, axial)?;
    if let Some(out) = out {
        mkdir(out)?;
        write(&out.join("metrics.csv"), &report.to_csv())?;
        write(&out.join("metrics.json"), &serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
        let pred_dir = out.join("predictions");
        let pred_scans = preds
            .iter()
            .zip(&scans)
            .map(|(p, s)| prediction_scan(p, s, schema.lesions()))
            .collect::<Result<Vec<_>, _>>()?;
        save_dataset(&pred_dir, &pred_scans, &schema)?;
        manifest(&out.join("manifest.json"), "eval", json!({ "ckpt": ckpt, "data": data, "axial_um": axial }))?;
    }
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_ablate(config: &Path, out: &Path, arms: &str, seeds: Option<&str>) -> Outcome {
    let cfg = ExperimentConfig::from_json(&read(config)?)?;
    let schema = TopologySchema::retina_default();
    let arms: Vec<Arm> = arms.split(',').map(|a| Arm::parse(a.trim())).collect::<Result<_, _>>()?;
    let seeds: Vec<u64> = match seeds {
        Some(s) => s
            .split(',')
            .map(|x| x.trim().parse::<u64>().map_err(|e| Error::validation(format!("bad seed {x:?}: {e}"))))
            .collect::<Result<_, _>>()?,
        None => cfg.seeds.clone(),
    };
    let data = ExperimentData::generate(&cfg, &schema)?;
    let results = run_ablation_suite(&cfg, &schema, &data, &arms, &seeds)?;
    let table = ablation_csv(&results);
    mkdir(out)?;
    write(&out.join("ablation.csv"), &table)?;
    manifest(
        &out.join("manifest.json"),
        "ablate",
        json!({ "config": cfg, "arms": arms, "seeds": seeds, "schema": schema.to_document() }),
    )?;
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(op: Option<&str>, seed: u64, report: Option<&Path>) -> Outcome {
    let outcomes = gradsuite::run(op, seed, &GradCheck::default());
    if outcomes.is_empty() {
        return Err(Error::validation(format!("no gradient check matches {:?}", op.unwrap_or(""))).into());
    }
    let mut table = String::from("name,kind,max_rel_error,status\n");
    for o in &outcomes {
        let status = if o.passed() { "PASS" } else { "FAIL" };
        table.push_str(&format!("{},{},{:e},{status}\n", o.name, o.kind, o.worst()));
        if let Err(e) = &o.report {
            log::error!("{}: {e}", o.name);
        }
    }
    let ste = op.is_none_or(|f| "round_ste".contains(f));
    let ste_ok = !ste || gradsuite::round_ste_is_identity(seed);
    if ste {
        table.push_str(&format!("round_ste,op,0,{}\n", if ste_ok { "PASS" } else { "FAIL" }));
    }
    print!("{table}");
    if let Some(dir) = report {
        mkdir(dir)?;
        write(&dir.join("gradcheck.csv"), &table)?;
        manifest(&dir.join("manifest.json"), "gradcheck", json!({ "op": op, "seed": seed }))?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count() + usize::from(!ste_ok);
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} gradient check(s) above tolerance")));
    }
    Ok(())
}

fn scan_dirs(root: &Path) -> Result<Vec<PathBuf>, Error> {
    if root.join("meta.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "no scan directories")));
    }
    Ok(dirs)
}

fn describe(v: &Violation) -> String {
    match v {
        Violation::Ordering { surface, column } => {
            format!("ordering: surface {surface} below surface {} at column {column}", surface + 1)
        }
        Violation::Confinement { lesion, row, column } => {
            format!("confinement: {lesion} pixel at row {row}, column {column}")
        }
    }
}

fn cmd_audit(pred: &Path, schema: &Path, report_dir: Option<&Path>) -> Outcome {
    let schema = TopologySchema::from_json(&read(schema)?)?;
    let mut total = AuditReport::default();
    let mut rows = String::from("scan,ordering_violations,confinement_violations,first_violation\n");
    let mut first: Option<(PathBuf, Violation)> = None;
    for dir in scan_dirs(pred)? {
        let (scan, _) = load_scan(&dir)?;
        if scan.lesions.shape()[0] != schema.lesions() || scan.boundaries.shape()[0] != schema.surfaces() {
            return Err(Error::validation(format!("{}: does not match the schema", dir.display())).into());
        }
        let r = audit(&scan.boundaries, &scan.lesions, &schema);
        let fv = r.first_violation.as_ref().map(describe).unwrap_or_default();
        rows.push_str(&format!("{},{},{},{fv}\n", dir.display(), r.ordering_violations, r.confinement_violations));
        if first.is_none() {
            if let Some(v) = &r.first_violation {
                first = Some((dir.clone(), v.clone()));
            }
        }
        total.merge(r);
    }
    print!("{rows}");
    if let Some(dir) = report_dir {
        mkdir(dir)?;
        write(&dir.join("audit.csv"), &rows)?;
        manifest(&dir.join("manifest.json"), "audit", json!({ "pred": pred, "schema": schema.to_document() }))?;
    }
    match first {
        Some((dir, v)) => Err(Failure::Check(format!(
            "{} violation(s); first in {}: {}",
            total.total(),
            dir.display(),
            describe(&v)
        ))),
        None => Ok(()),
    }
}

fn cmd_render(scan: &Path, out: &Path) -> Outcome {
    let (s, meta) = load_scan(scan)?;
    retopo::render::save_overlay(out, &s, &meta.lesions)?;
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    manifest(Path::new(&name), "render", json!({ "scan": scan, "out": out }))?;
    println!("{}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Gen { config, out, count, seed, schema, policy } => {
            cmd_gen(config.as_deref(), out, *count, *seed, schema.as_deref(), policy)
        }
        Command::Train { config, data, out, val, seed } => cmd_train(config, data, out, val.as_deref(), *seed),
        Command::Eval { ckpt, data, out } => cmd_eval(ckpt, data, out.as_deref()),
        Command::Ablate { config, out, arms, seeds } => cmd_ablate(config, out, arms, seeds.as_deref()),
        Command::Gradcheck { op, seed, report } => cmd_gradcheck(op.as_deref(), *seed, report.as_deref()),
        Command::Audit { pred, schema, report } => cmd_audit(pred, schema, report.as_deref()),
        Command::Render { scan, out } => cmd_render(scan, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            log::error!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
