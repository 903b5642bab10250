mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rescorr::baseline::quantile_baseline;
use rescorr::config::{Resolved, RunConfig};
use rescorr::dataset::{
    generate_toy, read_events, write_events, EventFormat, EventTable, FeatureSchema, Provenance,
};
use rescorr::evaluation::{evaluate, EvalInputs, REPORT_SCHEMA};
use rescorr::models::{load_model, save_model, ModelBundle};
use rescorr::training::{train_global, train_twostep, CheckpointPolicy, Outcome};
use rescorr::{Error, Result};
use serde_json::json;

use manifest::io;

#[derive(Parser)]
#[command(
    name = "rescorr",
    version,
    about = "Bounded residual corrections of simulated event samples"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Global seed; overrides the seeds in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory receiving all outputs and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scalar override `key.path=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Global,
    Twostep,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a source/target toy pair.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a residual model of the source onto the target.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Pause (with a checkpoint) once this many epochs are complete.
        #[arg(long)]
        stop_after_epochs: Option<usize>,
    },
    /// Apply a trained model to an event file.
    Transform {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare transformed events with the target.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        transformed: Option<PathBuf>,
        /// Adds source panels and the classifier transfer test.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Per-feature quantile mapping of the source onto the target.
    QuantileBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Comma-separated feature names; defaults to the config list.
        #[arg(long, value_delimiter = ',')]
        features: Option<Vec<String>>,
        /// Map padded features on their non-sentinel entries.
        #[arg(long)]
        exclude_sentinels: bool,
    },
}

enum Status {
    Done,
    AuditFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::AuditFailed) => {
            eprintln!("error: invariant audit failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Schema(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("RC_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!("RC_THREADS must be a positive integer, got `{v}`"))
    })?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    resolved: Resolved,
    json: String,
    out: PathBuf,
}

fn load(common: &Common, extra: &[String]) -> Result<Loaded> {
    let mut overrides = common.set.clone();
    overrides.extend_from_slice(extra);
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::load(&common.config, &overrides)?;
    let resolved = cfg.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.paths.out.clone())
        .ok_or_else(|| Error::Config("no run directory: pass --out or set paths.out".into()))?;
    let json = serde_json::to_string_pretty(&cfg)?;
    Ok(Loaded {
        cfg,
        resolved,
        json,
        out,
    })
}

fn pick(flag: &Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| Error::Config(format!("no {what} file: pass --{what} or set paths.{what}")))
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn read(path: &Path, schema: &FeatureSchema) -> Result<EventTable> {
    if !path.exists() {
        return Err(io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "event file not found"),
        ));
    }
    read_events(path, EventFormat::from_path(path), Some(schema))
}

fn run(command: Command) -> Result<Status> {
    match command {
        Command::Generate { common } => generate(&common),
        Command::Train {
            common,
            mode,
            source,
            target,
            resume,
            stop_after_epochs,
        } => {
            let mode = mode.map(|m| match m {
                Mode::Global => "train.mode=global".to_string(),
                Mode::Twostep => "train.mode=twostep".to_string(),
            });
            let l = load(&common, mode.as_slice())?;
            train(&l, &source, &target, resume, stop_after_epochs)
        }
        Command::Transform { model, events, out } => transform(&model, &events, &out),
        Command::Evaluate {
            common,
            target,
            transformed,
            source,
        } => {
            let l = load(&common, &[])?;
            eval(&l, &target, &transformed, &source)
        }
        Command::QuantileBaseline {
            common,
            source,
            target,
            features,
            exclude_sentinels,
        } => {
            let mut extra = Vec::new();
            if exclude_sentinels {
                extra.push("quantile_exclude_sentinels=true".to_string());
            }
            let mut l = load(&common, &extra)?;
            if let Some(f) = features {
                l.cfg.quantile_features = Some(f);
                l.resolved = l.cfg.validate()?;
            }
            quantile(&l, &source, &target)
        }
    }
}

fn generate(common: &Common) -> Result<Status> {
    let l = load(common, &[])?;
    let toy = l
        .cfg
        .toy
        .as_ref()
        .ok_or_else(|| Error::Config("generate needs a `toy` section".into()))?;
    let source = generate_toy(&l.cfg.schema, &toy.source, toy.n, Provenance::Source)?;
    let target = generate_toy(&l.cfg.schema, &toy.target, toy.n, Provenance::Target)?;
    make_dir(&l.out)?;
    let mut outputs = Vec::new();
    for (name, t) in [("source.bin", &source), ("target.bin", &target)] {
        let p = l.out.join(name);
        write_events(t, &p, EventFormat::Binary)?;
        outputs.push(rescorr::dataset::sidecar_path(&p));
        outputs.push(p);
    }
    let cfg_path = l.out.join("config.json");
    write_text(&cfg_path, &l.json)?;
    outputs.push(cfg_path);
    manifest::record(
        &l.out,
        "generate",
        "completed",
        &l.json,
        &outputs,
        json!({ "n": toy.n }),
    )?;
    println!(
        "wrote {} source and {} target events to {}",
        source.n_events(),
        target.n_events(),
        l.out.display()
    );
    Ok(Status::Done)
}

fn train(
    l: &Loaded,
    source: &Option<PathBuf>,
    target: &Option<PathBuf>,
    resume: bool,
    stop_after_epochs: Option<usize>,
) -> Result<Status> {
    let source = read(&pick(source, &l.cfg.paths.source, "source")?, &l.cfg.schema)?;
    let target = read(&pick(target, &l.cfg.paths.target, "target")?, &l.cfg.schema)?;
    let setup = l.cfg.train_setup(&l.resolved);
    make_dir(&l.out)?;
    let policy = CheckpointPolicy {
        path: l.out.join("checkpoint.json"),
        resume,
        stop_after_epochs,
    };
    let done = match l.cfg.train.mode {
        rescorr::training::TrainMode::Global => {
            match train_global(&source, &target, &setup, &l.cfg.train, Some(&policy))? {
                Outcome::Finished((bundle, log)) => Some((bundle, log.json_lines())),
                Outcome::Interrupted { epoch } => {
                    println!("paused after epoch {epoch}");
                    None
                }
            }
        }
        rescorr::training::TrainMode::Twostep => {
            match train_twostep(&source, &target, &setup, &l.cfg.train, Some(&policy))? {
                Outcome::Finished((bundle, log)) => Some((bundle, log.json_lines())),
                Outcome::Interrupted { epoch } => {
                    println!("paused after epoch {epoch}");
                    None
                }
            }
        }
    };
    let mut outputs = vec![policy.path.clone()];
    let status = match done {
        Some((bundle, log)) => {
            let model = l.out.join("model.json");
            save_model(&bundle, &model)?;
            let log_path = l.out.join("train_log.jsonl");
            write_text(&log_path, &log)?;
            outputs.push(model);
            outputs.push(log_path);
            println!("wrote {}", l.out.join("model.json").display());
            "completed"
        }
        None => "paused",
    };
    manifest::record(&l.out, "train", status, &l.json, &outputs, json!({}))?;
    Ok(Status::Done)
}

#[derive(serde::Serialize)]
struct FeatureAudit {
    name: String,
    budget: f64,
    max_abs_delta: f64,
    max_ratio: f64,
    sentinels_changed: usize,
    passed: bool,
}

fn audit(
    bundle: &ModelBundle,
    x: &EventTable,
    y: &rescorr::autodiff::Tensor,
) -> Result<Vec<FeatureAudit>> {
    let z = bundle.standardizer.apply(x.values())?;
    let zt = bundle.model.transform(&z)?;
    let budgets = bundle.model.budgets();
    let schema = &bundle.schema;
    let protect = schema.zero_protect();
    let d = schema.len();
    Ok((0..d)
        .map(|j| {
            let mut max_delta = 0.0f64;
            let mut within = true;
            let mut sentinels_changed = 0;
            for i in 0..z.rows() {
                let (a, b) = (z.get(i, j), zt.get(i, j));
                let delta = (b - a).abs();
                max_delta = max_delta.max(delta);
                if delta > budgets[j] + 4.0 * f64::EPSILON * a.abs().max(1.0) {
                    within = false;
                }
                if protect[j] && x.get(i, j) == 0.0 && y.get(i, j) != 0.0 {
                    sentinels_changed += 1;
                }
            }
            let max_ratio = if budgets[j] > 0.0 {
                max_delta / budgets[j]
            } else if max_delta == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            FeatureAudit {
                name: schema.feature(j).name.clone(),
                budget: budgets[j],
                max_abs_delta: max_delta,
                max_ratio,
                sentinels_changed,
                passed: within && sentinels_changed == 0,
            }
        })
        .collect())
}

fn transform(model: &Path, events: &Path, out: &Path) -> Result<Status> {
    let bundle = load_model(model, None, None)?;
    let x = read(events, &bundle.schema)?;
    let y = bundle.transform_physical(x.values())?;
    let audits = audit(&bundle, &x, &y)?;
    let table = x.with_values(y, Provenance::Transformed)?;
    make_dir(out)?;
    let path = out.join("transformed.bin");
    write_events(&table, &path, EventFormat::Binary)?;
    let audit_path = out.join("transform_audit.json");
    let audit_json = serde_json::to_value(&audits)?;
    write_text(&audit_path, &serde_json::to_string_pretty(&audit_json)?)?;
    let ok = audits.iter().all(|a| a.passed);
    for a in &audits {
        println!(
            "{:<16} max|Δ|/α = {:.6}{}",
            a.name,
            a.max_ratio,
            if a.passed { "" } else { "  FAILED" }
        );
    }
    let input = json!({ "model": model, "events": events }).to_string();
    let outputs = [rescorr::dataset::sidecar_path(&path), path, audit_path];
    manifest::record(
        out,
        "transform",
        if ok { "completed" } else { "audit_failed" },
        &input,
        &outputs,
        audit_json,
    )?;
    Ok(if ok {
        Status::Done
    } else {
        Status::AuditFailed
    })
}

fn eval(
    l: &Loaded,
    target: &Option<PathBuf>,
    transformed: &Option<PathBuf>,
    source: &Option<PathBuf>,
) -> Result<Status> {
    let schema = &l.cfg.schema;
    let target = read(&pick(target, &l.cfg.paths.target, "target")?, schema)?;
    let transformed = read(
        &pick(transformed, &l.cfg.paths.transformed, "transformed")?,
        schema,
    )?;
    let source = match source.clone().or_else(|| l.cfg.paths.source.clone()) {
        Some(p) => Some(read(&p, schema)?),
        None => None,
    };
    let report = evaluate(&EvalInputs {
        target: &target,
        transformed: &transformed,
        source: source.as_ref(),
        observables: &l.resolved.observables,
        feature_histograms: &l.resolved.feature_histograms,
        histogram_defaults: l.cfg.histogram_defaults,
        classifier: source.as_ref().map(|_| &l.cfg.classifier),
        config: serde_json::to_value(&l.cfg)?,
    })?;
    make_dir(&l.out)?;
    let report_path = l.out.join("eval_report.json");
    write_text(&report_path, &serde_json::to_string_pretty(&report)?)?;
    let schema_path = l.out.join("eval_report.schema.json");
    write_text(&schema_path, REPORT_SCHEMA)?;
    let mut outputs = vec![report_path, schema_path];
    outputs.extend(report.write_panels(&l.out.join("panels"))?);
    for p in report.features.iter().chain(&report.observables) {
        println!(
            "{:<16} chi2 = {:.6e}  ks = {:.6}",
            p.name, p.transformed_vs_target.chi2, p.transformed_vs_target.ks
        );
    }
    println!(
        "max |Δρ| off-diagonal = {:.6}",
        report.correlation.max_abs_offdiag
    );
    if let Some(t) = &report.transfer {
        println!(
            "AUC target = {:.6}  AUC transformed = {:.6}  ΔAUC = {:.6}",
            t.auc_target, t.auc_transformed, t.delta_auc
        );
    }
    manifest::record(
        &l.out,
        "evaluate",
        "completed",
        &l.json,
        &outputs,
        json!({}),
    )?;
    Ok(Status::Done)
}

fn quantile(l: &Loaded, source: &Option<PathBuf>, target: &Option<PathBuf>) -> Result<Status> {
    let source = read(&pick(source, &l.cfg.paths.source, "source")?, &l.cfg.schema)?;
    let target = read(&pick(target, &l.cfg.paths.target, "target")?, &l.cfg.schema)?;
    let mapped = quantile_baseline(
        &source,
        &target,
        &l.resolved.quantile_features,
        l.cfg.quantile_exclude_sentinels,
    )?;
    make_dir(&l.out)?;
    let path = l.out.join("quantile.bin");
    write_events(&mapped, &path, EventFormat::Binary)?;
    let outputs = [rescorr::dataset::sidecar_path(&path), path];
    manifest::record(
        &l.out,
        "quantile-baseline",
        "completed",
        &l.json,
        &outputs,
        json!({}),
    )?;
    println!("wrote {}", outputs[1].display());
    Ok(Status::Done)
}
