//! `zoomground` command line: ground one screenshot, evaluate a dataset, or
//! sweep configurations. Every command prints exactly one JSON document on
//! stdout; progress and diagnostics go to stderr.
//!
//! Exit codes: 0 success, 1 instance failure, 2 usage or config error,
//! 3 backend unreachable.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use zoomground::eval::{self, Dataset, EvalOptions, EvalReport, Grid};
use zoomground::geometry::{ImageDims, PixelBox};
use zoomground::imaging::{annotate, LayerKind, Screenshot};
use zoomground::pipeline::{ground, Branch, GroundingResult};

use config::{BackendFlags, CliConfig, PipelineFlags};

const EXIT_OK: u8 = 0;
const EXIT_INSTANCE_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_BACKEND_UNREACHABLE: u8 = 3;

#[derive(Parser)]
#[command(name = "zoomground", version, about = "Uncertainty-gated zoom-in GUI grounding")]
struct Cli {
    /// TOML config file; flags and environment override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ground one instruction on one screenshot.
    Ground(GroundArgs),
    /// Evaluate a JSONL dataset.
    Eval(EvalArgs),
    /// Evaluate a dataset over a grid of configurations.
    Sweep(SweepArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[command(flatten)]
    backend: BackendFlags,
    /// Instances in flight at once.
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(Args)]
struct GroundArgs {
    image: PathBuf,
    instruction: String,
    /// Write an overlay of candidates, crop window and final click.
    #[arg(long)]
    annotate: Option<PathBuf>,
    /// Ground-truth box x1,y1,x2,y2, drawn on the overlay and scored.
    #[arg(long)]
    gt: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    dataset: PathBuf,
    /// Output directory for results JSONL and summary JSON.
    #[arg(long, default_value = "zoomground-out")]
    out: PathBuf,
    /// Evaluate at each threshold, reusing one set of samples.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    tau_grid: Option<Vec<String>>,
    /// Keep per-stage timings in results JSONL.
    #[arg(long)]
    include_timings: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    dataset: PathBuf,
    /// Grid axis as key=v1,v2,...; repeat or list several.
    #[arg(long, num_args = 1.., required = true)]
    grid: Vec<String>,
    /// Output directory for sweep.csv and sweep.json.
    #[arg(long, default_value = "zoomground-out")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

struct Failure {
    exit: u8,
    code: String,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_USAGE,
            code: "config.invalid".into(),
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            exit: EXIT_USAGE,
            code: "io.write".into(),
            message: format!("{}: {e}", path.display()),
        }
    }
}

fn emit(v: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(v).expect("json"));
}

fn error_doc(code: &str, message: &str) -> Value {
    json!({ "error": { "code": code, "message": message } })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            emit(&error_doc("usage", &e.kind().to_string()));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("ZOOMGROUND_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    let outcome = rt.block_on(async {
        match cli.command {
            Command::Ground(a) => cmd_ground(cli.config.as_ref(), a).await,
            Command::Eval(a) => cmd_eval(cli.config.as_ref(), a).await,
            Command::Sweep(a) => cmd_sweep(cli.config.as_ref(), a).await,
        }
    });
    match outcome {
        Ok((doc, code)) => {
            emit(&doc);
            ExitCode::from(code)
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            emit(&error_doc(&f.code, &f.message));
            ExitCode::from(f.exit)
        }
    }
}

fn resolve_config(file: Option<&PathBuf>, common: &Common) -> Result<CliConfig, Failure> {
    CliConfig::resolve(
        file,
        |k| std::env::var(k).ok(),
        &common.pipeline,
        &common.backend,
        common.concurrency,
    )
    .map_err(Failure::usage)
}

fn unreachable_code(code: &str) -> bool {
    code == "backend.transport" || code == "backend.capacity"
}

fn exit_for(result: &GroundingResult) -> u8 {
    match (&result.branch, &result.error) {
        (Branch::Failure, Some(e)) if unreachable_code(&e.code) => EXIT_BACKEND_UNREACHABLE,
        (Branch::Failure, _) => EXIT_INSTANCE_FAILURE,
        _ => EXIT_OK,
    }
}

fn parse_box(s: &str) -> Result<PixelBox, Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::usage(format!("--gt: not a list of numbers: {s}")))?;
    match v[..] {
        [x1, y1, x2, y2] => PixelBox::new(x1, y1, x2, y2).map_err(|e| Failure::usage(format!("--gt: {e}"))),
        _ => Err(Failure::usage("--gt: expected x1,y1,x2,y2")),
    }
}

async fn cmd_ground(file: Option<&PathBuf>, a: GroundArgs) -> Result<(Value, u8), Failure> {
    let cfg = resolve_config(file, &a.common)?;
    let gt = a.gt.as_deref().map(parse_box).transpose()?;
    let image = match Screenshot::load(&a.image) {
        Ok(img) => Arc::new(img),
        Err(e) => {
            let mut doc = serde_json::to_value(GroundingResult::failed((&e).into())).expect("json");
            doc["config"] = cfg.snapshot();
            return Ok((doc, EXIT_INSTANCE_FAILURE));
        }
    };
    let backend = cfg.single_backend(image.dims).map_err(|e| Failure {
        exit: EXIT_USAGE,
        code: e.code().into(),
        message: e.to_string(),
    })?;
    let result = ground(backend.as_ref(), &image, &a.instruction, &cfg.pipeline).await;
    if let Some(out) = &a.annotate {
        let overlay = annotate(&image, &overlay_layers(&result, gt, image.dims));
        overlay.save_png(out).map_err(|e| Failure {
            exit: EXIT_USAGE,
            code: e.code().into(),
            message: e.to_string(),
        })?;
    }
    let code = exit_for(&result);
    let mut doc = serde_json::to_value(&result).expect("json");
    if let (Some(gt), Some(p)) = (gt, result.point) {
        doc["correct"] = json!(eval::score(p, &gt, image.dims));
    }
    doc["config"] = cfg.snapshot();
    Ok((doc, code))
}

fn overlay_layers(r: &GroundingResult, gt: Option<PixelBox>, dims: ImageDims) -> Vec<(PixelBox, LayerKind)> {
    let mut layers: Vec<(PixelBox, LayerKind)> = r.candidates.iter().map(|c| (c.bbox, LayerKind::Candidate)).collect();
    if let Some(w) = r.refine.as_ref().and_then(|t| t.pixel_window) {
        layers.push((w, LayerKind::CropRegion));
    } else if let Some(p) = &r.plan {
        layers.push((p.window.clamp_to(dims), LayerKind::CropRegion));
    }
    if let Some(g) = gt {
        layers.push((g, LayerKind::GroundTruth));
    }
    if let Some(p) = r.point_px {
        layers.push((PixelBox::point(p.x, p.y).expect("finite point"), LayerKind::FinalPoint));
    }
    layers
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(|e| Failure {
        exit: EXIT_USAGE,
        code: e.code().into(),
        message: e.to_string(),
    })
}

fn make_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

/// Exit 3 when nothing reached the model because the backend was down.
fn eval_exit(reports: &[&EvalReport]) -> u8 {
    let all_unreachable = reports.iter().all(|r| {
        !r.rows.is_empty()
            && r.rows
                .iter()
                .all(|row| row.result.error.as_ref().is_some_and(|e| unreachable_code(&e.code)))
    });
    if !reports.is_empty() && all_unreachable {
        EXIT_BACKEND_UNREACHABLE
    } else {
        EXIT_OK
    }
}

fn factory(cfg: &CliConfig) -> Result<Box<dyn eval::BackendFactory>, Failure> {
    cfg.factory().map_err(|e| Failure {
        exit: EXIT_USAGE,
        code: e.code().into(),
        message: e.to_string(),
    })
}

fn with_cli_config(mut report: EvalReport, cfg: &CliConfig) -> EvalReport {
    report.config["cli"] = cfg.snapshot();
    report
}

async fn cmd_eval(file: Option<&PathBuf>, a: EvalArgs) -> Result<(Value, u8), Failure> {
    let mut cfg = resolve_config(file, &a.common)?;
    if a.include_timings {
        cfg.run.include_timings = true;
    }
    let tau_grid = match &a.tau_grid {
        Some(v) if v.is_empty() => return Err(Failure::usage("--tau-grid needs at least one value")),
        Some(v) => Some(Grid::parse(&[format!("tau={}", v.join(","))]).map_err(|e| Failure::usage(e.to_string()))?),
        None => None,
    };
    let ds = load_dataset(&a.dataset)?;
    let factory = factory(&cfg)?;
    let opts = EvalOptions {
        concurrency: cfg.run.concurrency,
    };
    eprintln!(
        "evaluating {} instances from {}",
        ds.instances.len(),
        a.dataset.display()
    );

    let reports: Vec<(Option<String>, EvalReport)> = match tau_grid {
        None => {
            let r = eval::run_eval(&ds, &cfg.pipeline, factory.as_ref(), opts)
                .await
                .map_err(|e| Failure::usage(e.to_string()))?;
            vec![(None, r)]
        }
        Some(grid) => eval::sweep(&ds, &cfg.pipeline, &grid, factory.as_ref(), opts)
            .await
            .map_err(|e| Failure::usage(e.to_string()))?
            .into_iter()
            .map(|c| (c.params.get("tau").cloned(), c.report))
            .collect(),
    };

    make_dir(&a.out)?;
    let mut summaries = Vec::new();
    for (tau, report) in reports.iter() {
        let report = with_cli_config(report.clone(), &cfg);
        let suffix = tau.as_ref().map(|t| format!("_tau{t}")).unwrap_or_default();
        let results_path = a.out.join(format!("results{suffix}.jsonl"));
        let summary_path = a.out.join(format!("summary{suffix}.json"));
        eval::write_results_jsonl(&results_path, &report, cfg.run.include_timings)
            .map_err(|e| Failure::io(&results_path, e))?;
        eval::write_summary(&summary_path, &report).map_err(|e| Failure::io(&summary_path, e))?;
        eprintln!(
            "{}accuracy {:.4}, crop rate {:.4}",
            tau.as_ref().map(|t| format!("tau {t}: ")).unwrap_or_default(),
            report.accuracy,
            report.crop_rate
        );
        summaries.push(json!({
            "results": results_path,
            "summary_path": summary_path,
            "summary": report,
        }));
    }
    let exit = eval_exit(&reports.iter().map(|(_, r)| r).collect::<Vec<_>>());
    Ok((json!({ "command": "eval", "runs": summaries }), exit))
}

async fn cmd_sweep(file: Option<&PathBuf>, a: SweepArgs) -> Result<(Value, u8), Failure> {
    let cfg = resolve_config(file, &a.common)?;
    let grid = Grid::parse(&a.grid).map_err(|e| Failure::usage(e.to_string()))?;
    let ds = load_dataset(&a.dataset)?;
    let factory = factory(&cfg)?;
    let opts = EvalOptions {
        concurrency: cfg.run.concurrency,
    };
    eprintln!(
        "sweeping {} grid points over {} instances",
        grid.points().len(),
        ds.instances.len()
    );
    let cells = eval::sweep(&ds, &cfg.pipeline, &grid, factory.as_ref(), opts)
        .await
        .map_err(|e| Failure::usage(e.to_string()))?;

    make_dir(&a.out)?;
    let csv_path = a.out.join("sweep.csv");
    std::fs::write(&csv_path, eval::sweep_csv(&cells)).map_err(|e| Failure::io(&csv_path, e))?;
    let table: Vec<Value> = cells
        .iter()
        .map(|c| json!({ "params": c.params, "summary": with_cli_config(c.report.clone(), &cfg) }))
        .collect();
    let json_path = a.out.join("sweep.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&table).expect("json"))
        .map_err(|e| Failure::io(&json_path, e))?;
    let exit = eval_exit(&cells.iter().map(|c| &c.report).collect::<Vec<_>>());
    Ok((
        json!({ "command": "sweep", "csv": csv_path, "json": json_path, "cells": table }),
        exit,
    ))
}
