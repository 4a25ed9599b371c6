//! Benchmark harness: datasets, scoring, aggregate reports and sweeps.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{oracle::splitmix64, Backend, BackendError, OracleBackend, OracleConfig};
use crate::crop::{BoundaryStrategy, VarianceMode};
use crate::gating::GatingMode;
use crate::geometry::{ImageDims, NormPoint, PixelBox};
use crate::imaging::Screenshot;
use crate::pipeline::{resolve, sample_stage, Branch, ErrorInfo, GroundingResult, ImageSource, PipelineConfig, Stage1};
use crate::serde_util::parse_extended;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid sweep grid: {0}")]
    Grid(String),
    #[error("invalid config: {0}")]
    Config(String),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::Io { .. } => "io.dataset_read",
            EvalError::Parse { .. } => "eval.dataset_parse",
            EvalError::Grid(_) => "config.grid",
            EvalError::Config(_) => "config.invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub id: String,
    pub image_path: PathBuf,
    pub instruction: String,
    pub gt_box: PixelBox,
    pub group: String,
    pub ui_type: String,
}

#[derive(Deserialize)]
struct DatasetRow {
    id: serde_json::Value,
    image: String,
    instruction: String,
    bbox: [f64; 4],
    #[serde(default)]
    group: Option<String>,
    #[serde(default)]
    ui_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub path: Option<PathBuf>,
    pub instances: Vec<EvalInstance>,
}

/// Label used when a row has no group or element kind.
pub const UNLABELED: &str = "unlabeled";

impl Dataset {
    pub fn new(instances: Vec<EvalInstance>) -> Self {
        Self { path: None, instances }
    }

    /// Reads a JSONL dataset. Image paths are relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut ds = Self::parse(&text, base)?;
        ds.path = Some(path.to_path_buf());
        Ok(ds)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, EvalError> {
        let mut instances = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let row: DatasetRow = serde_json::from_str(line).map_err(|e| EvalError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let id = match row.id {
                serde_json::Value::String(s) => s,
                serde_json::Value::Number(n) => n.to_string(),
                other => {
                    return Err(EvalError::Parse {
                        line: line_no,
                        message: format!("id must be a string or number, got {other}"),
                    })
                }
            };
            let [x1, y1, x2, y2] = row.bbox;
            let gt_box = PixelBox::new(x1, y1, x2, y2).map_err(|e| EvalError::Parse {
                line: line_no,
                message: format!("bbox: {e}"),
            })?;
            let image = PathBuf::from(&row.image);
            instances.push(EvalInstance {
                id,
                image_path: if image.is_absolute() {
                    image
                } else {
                    base_dir.join(image)
                },
                instruction: row.instruction,
                gt_box,
                group: row.group.unwrap_or_else(|| UNLABELED.into()),
                ui_type: row.ui_type.unwrap_or_else(|| UNLABELED.into()),
            });
        }
        Ok(Self::new(instances))
    }
}

/// True iff the click lands inside the ground-truth box, edges included.
pub fn score(point: NormPoint, gt: &PixelBox, dims: ImageDims) -> bool {
    gt.contains(&point.to_pixel(dims))
}

/// Supplies the backend used for each instance.
pub trait BackendFactory: Send + Sync {
    fn backend_for(&self, inst: &EvalInstance) -> Result<Arc<dyn Backend>, BackendError>;

    /// Recorded in report config snapshots.
    fn describe(&self) -> serde_json::Value;
}

/// One backend for every instance, e.g. a live endpoint.
pub struct SharedBackend {
    pub backend: Arc<dyn Backend>,
    pub description: serde_json::Value,
}

impl BackendFactory for SharedBackend {
    fn backend_for(&self, _: &EvalInstance) -> Result<Arc<dyn Backend>, BackendError> {
        Ok(Arc::clone(&self.backend))
    }

    fn describe(&self) -> serde_json::Value {
        self.description.clone()
    }
}

/// Oracle aimed at each instance's ground truth, seeded per instance id.
pub struct OracleFactory {
    pub base: OracleConfig,
}

pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl OracleFactory {
    pub fn config_for(&self, inst: &EvalInstance) -> OracleConfig {
        OracleConfig {
            hidden_target: inst.gt_box,
            rng_seed: splitmix64(self.base.rng_seed ^ fnv1a(&inst.id)),
            ..self.base.clone()
        }
    }
}

impl BackendFactory for OracleFactory {
    fn backend_for(&self, inst: &EvalInstance) -> Result<Arc<dyn Backend>, BackendError> {
        Ok(Arc::new(OracleBackend::new(self.config_for(inst))?))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "oracle", "config": self.base })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub id: String,
    pub group: String,
    pub ui_type: String,
    pub gt_box: PixelBox,
    pub correct: bool,
    pub result: GroundingResult,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl CellStat {
    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }

    fn finish(&mut self) {
        self.accuracy = ratio(self.correct, self.total);
    }
}

/// Trigger rate over all instances and accuracy among the instances routed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchStat {
    pub count: usize,
    pub correct: usize,
    pub trigger_rate: f64,
    pub accuracy: Option<f64>,
}

/// Pass-versus-zoom routing summary at one threshold. The zoom side counts
/// every instance that failed the gate, including refinement fallbacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    #[serde(with = "crate::serde_util::extended_f64")]
    pub tau: f64,
    pub pass: BranchStat,
    pub zoom: BranchStat,
    pub overall_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub by_group: BTreeMap<String, CellStat>,
    pub by_ui_type: BTreeMap<String, CellStat>,
    /// Keyed by branch name; all four branches are always present.
    pub branches: BTreeMap<String, BranchStat>,
    /// Fraction of all instances routed to the zoom-in stage.
    pub crop_rate: f64,
    /// Same, over instances with at least one parsed candidate.
    pub crop_rate_parsed: f64,
    pub routing: RoutingTable,
    pub valid_sample_rate: f64,
    pub latency: LatencyStats,
    pub config: serde_json::Value,
    #[serde(skip)]
    pub rows: Vec<ResultRow>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ResultRow>, tau: f64, config: serde_json::Value) -> Self {
        let total = rows.len();
        let mut correct = 0;
        let mut by_group: BTreeMap<String, CellStat> = BTreeMap::new();
        let mut by_ui_type: BTreeMap<String, CellStat> = BTreeMap::new();
        let mut branches: BTreeMap<String, BranchStat> = Branch::ALL
            .iter()
            .map(|b| (b.as_str().to_string(), BranchStat::default()))
            .collect();
        let (mut pass, mut zoom) = (BranchStat::default(), BranchStat::default());
        let (mut parsed, mut valid, mut requested) = (0, 0, 0);
        let mut latencies = Vec::new();

        for row in &rows {
            correct += usize::from(row.correct);
            by_group.entry(row.group.clone()).or_default().add(row.correct);
            by_ui_type.entry(row.ui_type.clone()).or_default().add(row.correct);
            let b = branches
                .get_mut(row.result.branch.as_str())
                .expect("all branches present");
            b.count += 1;
            b.correct += usize::from(row.correct);
            let side = match row.result.branch {
                Branch::Pass => Some(&mut pass),
                Branch::Crop | Branch::FallbackGlobal => Some(&mut zoom),
                Branch::Failure => None,
            };
            if let Some(s) = side {
                s.count += 1;
                s.correct += usize::from(row.correct);
            }
            if row.result.sample_count_valid > 0 {
                parsed += 1;
            }
            valid += row.result.sample_count_valid;
            requested += row.result.sample_count_requested;
            if let Some(t) = &row.result.timings {
                latencies.push(t.total_ms);
            }
        }
        for s in by_group.values_mut().chain(by_ui_type.values_mut()) {
            s.finish();
        }
        let finish = |s: &mut BranchStat| {
            s.trigger_rate = ratio(s.count, total);
            s.accuracy = (s.count > 0).then(|| ratio(s.correct, s.count));
        };
        branches.values_mut().for_each(finish);
        finish(&mut pass);
        finish(&mut zoom);

        latencies.sort_by(f64::total_cmp);
        let latency = LatencyStats {
            mean_ms: if latencies.is_empty() {
                0.0
            } else {
                latencies.iter().sum::<f64>() / latencies.len() as f64
            },
            p50_ms: percentile(&latencies, 0.5),
            p90_ms: percentile(&latencies, 0.9),
            p99_ms: percentile(&latencies, 0.99),
        };
        let accuracy = ratio(correct, total);
        Self {
            total,
            correct,
            accuracy,
            by_group,
            by_ui_type,
            crop_rate: zoom.trigger_rate,
            crop_rate_parsed: ratio(zoom.count, parsed),
            routing: RoutingTable {
                tau,
                pass,
                zoom,
                overall_accuracy: accuracy,
            },
            branches,
            valid_sample_rate: ratio(valid, requested),
            latency,
            config,
            rows,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Instances in flight at once.
    pub concurrency: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { concurrency: 8 }
    }
}

fn snapshot(ds: &Dataset, cfg: &PipelineConfig, factory: &dyn BackendFactory) -> serde_json::Value {
    serde_json::json!({
        "dataset": ds.path.as_ref().map(|p| p.display().to_string()),
        "instances": ds.instances.len(),
        "pipeline": cfg,
        "backend": factory.describe(),
    })
}

/// Stage-1 samples cached per instance, keyed by the settings that shape them.
type StageCache = HashMap<(usize, u64), Vec<Option<Stage1>>>;

fn stage_key(cfg: &PipelineConfig) -> (usize, u64) {
    (cfg.n, cfg.temperature.to_bits())
}

async fn eval_instance(
    inst: &EvalInstance,
    factory: &dyn BackendFactory,
    cfg: &PipelineConfig,
    cached: Option<Stage1>,
) -> (ResultRow, Option<Stage1>) {
    let row = |result: GroundingResult, correct| ResultRow {
        id: inst.id.clone(),
        group: inst.group.clone(),
        ui_type: inst.ui_type.clone(),
        gt_box: inst.gt_box,
        correct,
        result,
    };
    let image: Arc<Screenshot> = match ImageSource::Path(inst.image_path.clone()).load().await {
        Ok(img) => img,
        Err(e) => return (row(GroundingResult::failed(ErrorInfo::from(&e)), false), None),
    };
    if !image.dims.full_box().contains_box(&inst.gt_box) {
        let mut r = GroundingResult::failed(ErrorInfo::new(
            "eval.gt_out_of_bounds",
            format!(
                "ground-truth box {:?} exceeds image {:?}",
                inst.gt_box.as_array(),
                image.dims
            ),
        ));
        r.image_dims = Some(image.dims);
        return (row(r, false), None);
    }
    let backend = match factory.backend_for(inst) {
        Ok(b) => b,
        Err(e) => return (row(GroundingResult::failed(ErrorInfo::from(&e)), false), None),
    };
    let stage = match cached {
        Some(s) => s,
        None => sample_stage(backend.as_ref(), &image, &inst.instruction, cfg).await,
    };
    let result = resolve(backend.as_ref(), &image, &inst.instruction, &stage, cfg).await;
    let correct = result.point.is_some_and(|p| score(p, &inst.gt_box, image.dims));
    (row(result, correct), Some(stage))
}

async fn evaluate(
    ds: &Dataset,
    cfg: &PipelineConfig,
    factory: &dyn BackendFactory,
    opts: EvalOptions,
    cache: Option<&mut StageCache>,
) -> EvalReport {
    let key = stage_key(cfg);
    let mut cached: Vec<Option<Stage1>> = cache
        .as_ref()
        .and_then(|c| c.get(&key).cloned())
        .unwrap_or_else(|| vec![None; ds.instances.len()]);
    let outputs: Vec<(ResultRow, Option<Stage1>)> = futures::stream::iter(ds.instances.iter().zip(cached.drain(..)))
        .map(|(inst, c)| eval_instance(inst, factory, cfg, c))
        .buffered(opts.concurrency.max(1))
        .collect()
        .await;
    let (rows, stages): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
    if let Some(c) = cache {
        c.insert(key, stages);
    }
    EvalReport::from_rows(rows, cfg.tau, snapshot(ds, cfg, factory))
}

/// Evaluates one configuration over the whole dataset.
pub async fn run_eval(
    ds: &Dataset,
    cfg: &PipelineConfig,
    factory: &dyn BackendFactory,
    opts: EvalOptions,
) -> Result<EvalReport, EvalError> {
    cfg.validate().map_err(|e| EvalError::Config(e.to_string()))?;
    Ok(evaluate(ds, cfg, factory, opts, None).await)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKey {
    Tau,
    Gamma,
    N,
    Temperature,
    Strategy,
    KeepFraction,
    Square,
    VarianceMode,
    GatingMode,
    FixedRatio,
    MinCrop,
}

impl GridKey {
    pub const ALL: [GridKey; 11] = [
        GridKey::Tau,
        GridKey::Gamma,
        GridKey::N,
        GridKey::Temperature,
        GridKey::Strategy,
        GridKey::KeepFraction,
        GridKey::Square,
        GridKey::VarianceMode,
        GridKey::GatingMode,
        GridKey::FixedRatio,
        GridKey::MinCrop,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            GridKey::Tau => "tau",
            GridKey::Gamma => "gamma",
            GridKey::N => "n",
            GridKey::Temperature => "temperature",
            GridKey::Strategy => "strategy",
            GridKey::KeepFraction => "keep_fraction",
            GridKey::Square => "square",
            GridKey::VarianceMode => "variance_mode",
            GridKey::GatingMode => "gating_mode",
            GridKey::FixedRatio => "fixed_ratio",
            GridKey::MinCrop => "min_crop",
        }
    }

    /// Sets this key on `cfg` from its text value.
    pub fn apply(&self, cfg: &mut PipelineConfig, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("not a number: {v}"))
        }
        let v = value.trim();
        match self {
            GridKey::Tau => cfg.tau = parse_extended(v)?,
            GridKey::Gamma => cfg.crop.gamma = num(v)?,
            GridKey::N => cfg.n = num(v)?,
            GridKey::Temperature => cfg.temperature = num(v)?,
            GridKey::Strategy => cfg.crop.boundary = BoundaryStrategy::from_str(v).map_err(|e| e.to_string())?,
            GridKey::KeepFraction => cfg.crop.keep_fraction = num(v)?,
            GridKey::Square => {
                cfg.crop.square = match v {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(format!("not a boolean: {v}")),
                }
            }
            GridKey::VarianceMode => cfg.crop.variance_mode = VarianceMode::from_str(v).map_err(|e| e.to_string())?,
            GridKey::GatingMode => cfg.gating_mode = GatingMode::from_str(v).map_err(|e| e.to_string())?,
            GridKey::FixedRatio => {
                cfg.crop.fixed_ratio = if v == "none" { None } else { Some(num(v)?) };
            }
            GridKey::MinCrop => cfg.crop.min_side = num(v)?,
        }
        Ok(())
    }
}

impl FromStr for GridKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let alias = match s {
            "τ" => "tau",
            "γ" => "gamma",
            "boundary" => "strategy",
            "min_side" => "min_crop",
            other => other,
        };
        GridKey::ALL
            .into_iter()
            .find(|k| k.as_str() == alias)
            .ok_or_else(|| format!("unknown grid key: {s}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: GridKey,
    pub values: Vec<String>,
}

/// Cartesian grid of configuration overrides; earlier axes vary slowest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grid {
    pub axes: Vec<GridAxis>,
}

impl Grid {
    /// Parses `key=v1,v2,...` specs. Every value is checked against a default
    /// config so bad cells fail before any model call.
    pub fn parse<S: AsRef<str>>(specs: &[S]) -> Result<Self, EvalError> {
        let mut axes: Vec<GridAxis> = Vec::new();
        for spec in specs {
            let spec = spec.as_ref();
            let (k, vs) = spec
                .split_once('=')
                .ok_or_else(|| EvalError::Grid(format!("expected key=v1,v2,..., got {spec:?}")))?;
            let key: GridKey = k.parse().map_err(EvalError::Grid)?;
            if axes.iter().any(|a| a.key == key) {
                return Err(EvalError::Grid(format!("duplicate grid key {}", key.as_str())));
            }
            let values: Vec<String> = vs
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(String::from)
                .collect();
            if values.is_empty() {
                return Err(EvalError::Grid(format!("no values for {}", key.as_str())));
            }
            for v in &values {
                let mut probe = PipelineConfig::default();
                key.apply(&mut probe, v)
                    .map_err(|e| EvalError::Grid(format!("{}: {e}", key.as_str())))?;
                probe
                    .validate()
                    .map_err(|e| EvalError::Grid(format!("{}={v}: {e}", key.as_str())))?;
            }
            axes.push(GridAxis { key, values });
        }
        if axes.is_empty() {
            return Err(EvalError::Grid("grid is empty".into()));
        }
        Ok(Self { axes })
    }

    pub fn points(&self) -> Vec<Vec<(GridKey, String)>> {
        let mut out: Vec<Vec<(GridKey, String)>> = vec![Vec::new()];
        for axis in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.values.iter().map(move |v| {
                        let mut p = prefix.clone();
                        p.push((axis.key, v.clone()));
                        p
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub params: BTreeMap<String, String>,
    pub report: EvalReport,
}

/// One report per grid point. Stage-1 candidates are drawn once per
/// (n, temperature) and reused by every cell sharing them.
pub async fn sweep(
    ds: &Dataset,
    base: &PipelineConfig,
    grid: &Grid,
    factory: &dyn BackendFactory,
    opts: EvalOptions,
) -> Result<Vec<SweepCell>, EvalError> {
    let mut cfgs = Vec::new();
    for point in grid.points() {
        let mut cfg = base.clone();
        for (k, v) in &point {
            k.apply(&mut cfg, v).map_err(EvalError::Grid)?;
        }
        cfg.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        let params = point.into_iter().map(|(k, v)| (k.as_str().to_string(), v)).collect();
        cfgs.push((params, cfg));
    }
    let mut cache = StageCache::new();
    let mut cells = Vec::with_capacity(cfgs.len());
    for (params, cfg) in cfgs {
        let report = evaluate(ds, &cfg, factory, opts, Some(&mut cache)).await;
        cells.push(SweepCell { params, report });
    }
    Ok(cells)
}

/// One JSON line per instance. Timings are dropped unless asked for so that
/// identical runs produce identical bytes.
pub fn write_results_jsonl(path: impl AsRef<Path>, report: &EvalReport, include_timings: bool) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for line in results_jsonl_lines(report, include_timings) {
        writeln!(w, "{line}")?;
    }
    w.flush()
}

pub fn results_jsonl_lines(report: &EvalReport, include_timings: bool) -> Vec<String> {
    report
        .rows
        .iter()
        .map(|row| {
            let mut row = row.clone();
            if !include_timings {
                row.result.timings = None;
            }
            let mut v = serde_json::to_value(&row).expect("row serializes");
            v["config"] = report.config.clone();
            serde_json::to_string(&v).expect("row serializes")
        })
        .collect()
}

pub fn write_summary(path: impl AsRef<Path>, report: &EvalReport) -> std::io::Result<()> {
    fs::write(
        path,
        serde_json::to_string_pretty(report).expect("report serializes") + "\n",
    )
}

const SWEEP_METRICS: [&str; 9] = [
    "total",
    "accuracy",
    "crop_rate",
    "pass_rate",
    "pass_accuracy",
    "zoom_accuracy",
    "fallback_rate",
    "failure_rate",
    "mean_latency_ms",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Sweep table as CSV, one row per cell, grid keys first.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let keys: Vec<&String> = cells.first().map(|c| c.params.keys().collect()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = keys.iter().map(|k| k.as_str()).chain(SWEEP_METRICS).collect();
    w.write_record(&header).expect("in-memory csv");
    for c in cells {
        let r = &c.report;
        let mut fields: Vec<String> = keys.iter().map(|k| c.params[*k].clone()).collect();
        fields.extend([
            r.total.to_string(),
            r.accuracy.to_string(),
            r.crop_rate.to_string(),
            r.routing.pass.trigger_rate.to_string(),
            opt(r.routing.pass.accuracy),
            opt(r.routing.zoom.accuracy),
            r.branches["fallback_global"].trigger_rate.to_string(),
            r.branches["failure"].trigger_rate.to_string(),
            format!("{:.3}", r.latency.mean_ms),
        ]);
        w.write_record(&fields).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}
