//! End-to-end grounding of one (screenshot, instruction) instance.
//!
//! 1. Sample `n` candidates on the full screenshot and drop unparseable ones.
//! 2. Gate on spatial consensus plus mean confidence. If the score clears
//!    `tau`, answer with the consensus-vote winner.
//! 3. Otherwise plan a crop from the candidate spread, re-infer once
//!    deterministically on the crop and map the answer back. An unusable
//!    refinement falls back to the most confident global candidate.
//!
//! Sampling is split from resolution ([`sample_stage`] / [`resolve`]) so that
//! sweeps can reuse one set of draws across many post-sampling settings.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{Backend, BackendError, SampleRequest, ViewTransform};
use crate::crop::{self, Axes, CropConfig, CropPlan};
use crate::gating::{self, GatingMode, GatingReport, VoteOutcome, DEFAULT_VOTE_IOU};
use crate::geometry::{center, to_norm_point, ImageDims, NormPoint, PixelBox, PixelPoint};
use crate::imaging::{self, ImagingError, PixelRegion, ResizePolicy, Screenshot};
use crate::parsing::{parse_candidate, Candidate, FrameHint, ParseFailure};
use crate::serde_util::extended_f64;

pub const INSTRUCTION_PLACEHOLDER: &str = "{instruction}";

pub const DEFAULT_PROMPT_TEMPLATE: &str = "You are a GUI grounding assistant. Locate the single UI element in the \
screenshot that the instruction refers to.\nInstruction: {instruction}\nAnswer with only its bounding box in \
pixel coordinates of this image, formatted as JSON: {\"bbox\": [x1, y1, x2, y2]}";

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid pipeline config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Candidates drawn per instance.
    pub n: usize,
    pub temperature: f64,
    /// Gate threshold; `inf` and `-inf` are allowed.
    #[serde(with = "extended_f64")]
    pub tau: f64,
    pub crop: CropConfig,
    pub gating_mode: GatingMode,
    pub vote_iou_threshold: f64,
    pub resize: ResizePolicy,
    pub frame_hint: FrameHint,
    /// Must contain `{instruction}`.
    pub prompt_template: String,
    pub seed: Option<u64>,
    pub want_logprobs: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n: 8,
            temperature: 0.9,
            tau: 1.0,
            crop: CropConfig::default(),
            gating_mode: GatingMode::Both,
            vote_iou_threshold: DEFAULT_VOTE_IOU,
            resize: ResizePolicy::default(),
            frame_hint: FrameHint::Auto,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            seed: Some(0),
            want_logprobs: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 {
            return Err(ConfigError("n must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ConfigError("temperature must be a non-negative number".into()));
        }
        if self.tau.is_nan() {
            return Err(ConfigError("tau must not be NaN".into()));
        }
        if !(0.0..=1.0).contains(&self.vote_iou_threshold) {
            return Err(ConfigError("vote IoU threshold must lie in [0, 1]".into()));
        }
        if !self.prompt_template.contains(INSTRUCTION_PLACEHOLDER) {
            return Err(ConfigError(format!(
                "prompt template must contain {INSTRUCTION_PLACEHOLDER}"
            )));
        }
        self.crop.validate().map_err(|e| ConfigError(e.to_string()))
    }

    pub fn prompt(&self, instruction: &str) -> String {
        self.prompt_template.replace(INSTRUCTION_PLACEHOLDER, instruction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Pass,
    Crop,
    FallbackGlobal,
    Failure,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Pass, Branch::Crop, Branch::FallbackGlobal, Branch::Failure];

    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Pass => "pass",
            Branch::Crop => "crop",
            Branch::FallbackGlobal => "fallback_global",
            Branch::Failure => "failure",
        }
    }
}

/// Machine-readable error attached to results.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub code: String,
    pub message: String,
}

impl ErrorInfo {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
        }
    }
}

impl From<&BackendError> for ErrorInfo {
    fn from(e: &BackendError) -> Self {
        ErrorInfo::new(e.code(), e.to_string())
    }
}

impl From<&ImagingError> for ErrorInfo {
    fn from(e: &ImagingError) -> Self {
        ErrorInfo::new(e.code(), e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseFailureRecord {
    pub index: usize,
    pub failure: ParseFailure,
    pub raw_text: String,
}

/// Stage-1 output: the candidate set every later stage works from.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1 {
    pub candidates: Vec<Candidate>,
    pub parse_failures: Vec<ParseFailureRecord>,
    pub completion_errors: Vec<ErrorInfo>,
    pub requested: usize,
    pub sent_dims: ImageDims,
    pub scale: Axes,
    /// The sampling call itself failed.
    pub error: Option<ErrorInfo>,
    pub elapsed: Duration,
}

impl Stage1 {
    pub fn digest(&self) -> String {
        candidates_digest(&self.candidates)
    }
}

/// SHA-256 over the JSON form of a candidate list.
pub fn candidates_digest(cands: &[Candidate]) -> String {
    let bytes = serde_json::to_vec(cands).expect("candidates serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Zoom-pass details.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineTrace {
    /// Integer pixel window actually cropped.
    pub pixel_window: Option<PixelBox>,
    pub sent_dims: Option<ImageDims>,
    pub scale: Option<Axes>,
    pub raw_text: Option<String>,
    /// Refined box in the crop's pixel frame.
    pub refined_box: Option<PixelBox>,
    /// The refined box reached past the crop and was clamped into it.
    pub clamped: bool,
    pub failure: Option<ErrorInfo>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub sample_ms: f64,
    pub gate_ms: f64,
    pub refine_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    /// Final click, absent on the failure branch.
    pub point: Option<NormPoint>,
    pub point_px: Option<PixelPoint>,
    pub branch: Branch,
    pub image_dims: Option<ImageDims>,
    pub gating: Option<GatingReport>,
    pub vote: Option<VoteOutcome>,
    pub plan: Option<CropPlan>,
    pub refine: Option<RefineTrace>,
    pub candidates: Vec<Candidate>,
    pub candidates_digest: String,
    pub sample_count_requested: usize,
    pub sample_count_valid: usize,
    pub parse_failures: Vec<ParseFailureRecord>,
    pub backend_calls: u32,
    pub error: Option<ErrorInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl GroundingResult {
    /// A failure before any sampling happened.
    pub fn failed(error: ErrorInfo) -> Self {
        Self {
            point: None,
            point_px: None,
            branch: Branch::Failure,
            image_dims: None,
            gating: None,
            vote: None,
            plan: None,
            refine: None,
            candidates: Vec::new(),
            candidates_digest: candidates_digest(&[]),
            sample_count_requested: 0,
            sample_count_valid: 0,
            parse_failures: Vec::new(),
            backend_calls: 0,
            error: Some(error),
            timings: None,
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Draws and parses the global candidates.
pub async fn sample_stage(
    backend: &dyn Backend,
    image: &Arc<Screenshot>,
    instruction: &str,
    cfg: &PipelineConfig,
) -> Stage1 {
    let start = Instant::now();
    let dims = image.dims;
    let (sent, scale) = if imaging::resized_dims(dims, cfg.resize) == dims {
        (Arc::clone(image), Axes::new(1.0, 1.0))
    } else {
        let (s, scale) = imaging::resize(image, cfg.resize);
        (Arc::new(s), scale)
    };
    let view = ViewTransform {
        origin: PixelPoint::new(0.0, 0.0),
        scale,
        global_dims: dims,
    };
    let sent_dims = sent.dims;
    let req = SampleRequest {
        image: sent,
        prompt: cfg.prompt(instruction),
        temperature: cfg.temperature,
        n: cfg.n,
        want_logprobs: cfg.want_logprobs,
        seed: cfg.seed,
        view,
    };

    let mut stage = Stage1 {
        candidates: Vec::new(),
        parse_failures: Vec::new(),
        completion_errors: Vec::new(),
        requested: cfg.n,
        sent_dims,
        scale,
        error: None,
        elapsed: Duration::ZERO,
    };
    match backend.sample(&req).await {
        Ok(batch) => {
            stage.completion_errors = batch.failures.iter().map(ErrorInfo::from).collect();
            for (index, rec) in batch.completions.iter().enumerate() {
                match parse_candidate(rec, sent_dims, cfg.frame_hint) {
                    Ok(mut c) => {
                        c.bbox = view.to_global(&c.bbox).clamp_to(dims);
                        stage.candidates.push(c);
                    }
                    Err(failure) => stage.parse_failures.push(ParseFailureRecord {
                        index,
                        failure,
                        raw_text: rec.text.clone(),
                    }),
                }
            }
        }
        Err(e) => stage.error = Some(ErrorInfo::from(&e)),
    }
    stage.elapsed = start.elapsed();
    stage
}

/// Gate, then vote or zoom, from an existing candidate set.
pub async fn resolve(
    backend: &dyn Backend,
    image: &Arc<Screenshot>,
    instruction: &str,
    stage: &Stage1,
    cfg: &PipelineConfig,
) -> GroundingResult {
    let start = Instant::now();
    let dims = image.dims;
    let mut result = GroundingResult {
        point: None,
        point_px: None,
        branch: Branch::Failure,
        image_dims: Some(dims),
        gating: None,
        vote: None,
        plan: None,
        refine: None,
        candidates: stage.candidates.clone(),
        candidates_digest: stage.digest(),
        sample_count_requested: stage.requested,
        sample_count_valid: stage.candidates.len(),
        parse_failures: stage.parse_failures.clone(),
        backend_calls: 1,
        error: stage.error.clone(),
        timings: None,
    };
    let mut timings = Timings {
        sample_ms: ms(stage.elapsed),
        ..Default::default()
    };
    let finish = |mut r: GroundingResult, mut t: Timings, point: Option<PixelPoint>| {
        if let Some(p) = point {
            let norm = to_norm_point(p, dims);
            r.point = Some(norm);
            r.point_px = Some(norm.to_pixel(dims));
        }
        t.total_ms = t.sample_ms + ms(start.elapsed());
        r.timings = Some(t);
        r
    };

    if result.error.is_some() {
        return finish(result, timings, None);
    }
    let cands = &stage.candidates;
    let report = match gating::gate(cands, cfg.tau, cfg.gating_mode) {
        Ok(r) => r,
        Err(e) => {
            result.error = Some(ErrorInfo::new("pipeline.no_valid_candidates", e.to_string()));
            return finish(result, timings, None);
        }
    };
    let passed = report.passed;
    result.gating = Some(report);

    if passed {
        let vote = gating::consensus_vote(cands, cfg.vote_iou_threshold).expect("non-empty candidates");
        let p = center(&cands[vote.winner_index].bbox);
        result.vote = Some(vote);
        result.branch = Branch::Pass;
        timings.gate_ms = ms(start.elapsed());
        return finish(result, timings, Some(p));
    }
    timings.gate_ms = ms(start.elapsed());

    let refine_start = Instant::now();
    let outcome = refine(backend, image, instruction, cands, cfg).await;
    timings.refine_ms = ms(refine_start.elapsed());
    result.plan = outcome.plan;
    result.backend_calls += outcome.calls;
    let point = match outcome.point {
        Some(p) => {
            result.branch = Branch::Crop;
            p
        }
        None => {
            result.branch = Branch::FallbackGlobal;
            center(&cands[most_confident(cands)].bbox)
        }
    };
    result.refine = Some(outcome.trace);
    finish(result, timings, Some(point))
}

/// Index of the highest-confidence candidate, lowest index on ties.
pub fn most_confident(cands: &[Candidate]) -> usize {
    let mut best = 0;
    for (i, c) in cands.iter().enumerate().skip(1) {
        if c.confidence > cands[best].confidence {
            best = i;
        }
    }
    best
}

struct RefineOutcome {
    plan: Option<CropPlan>,
    trace: RefineTrace,
    point: Option<PixelPoint>,
    calls: u32,
}

async fn refine(
    backend: &dyn Backend,
    image: &Arc<Screenshot>,
    instruction: &str,
    cands: &[Candidate],
    cfg: &PipelineConfig,
) -> RefineOutcome {
    let dims = image.dims;
    let mut out = RefineOutcome {
        plan: None,
        trace: RefineTrace {
            pixel_window: None,
            sent_dims: None,
            scale: None,
            raw_text: None,
            refined_box: None,
            clamped: false,
            failure: None,
        },
        point: None,
        calls: 0,
    };
    let plan = match crop::plan(cands, dims, &cfg.crop) {
        Ok(p) => p,
        Err(e) => {
            out.trace.failure = Some(ErrorInfo::new("crop.plan", e.to_string()));
            return out;
        }
    };
    let window = plan.window;
    out.plan = Some(plan);

    let (cropped, region): (Screenshot, PixelRegion) = match imaging::crop(image, &window) {
        Ok(v) => v,
        Err(e) => {
            out.trace.failure = Some(ErrorInfo::from(&e));
            return out;
        }
    };
    let pixel_window = region.as_box();
    let (sent, scale) = imaging::resize(&cropped, cfg.resize);
    let sent_dims = sent.dims;
    out.trace.pixel_window = Some(pixel_window);
    out.trace.sent_dims = Some(sent_dims);
    out.trace.scale = Some(scale);

    let view = ViewTransform {
        origin: PixelPoint::new(pixel_window.x1, pixel_window.y1),
        scale,
        global_dims: dims,
    };
    let req = SampleRequest::deterministic(Arc::new(sent), cfg.prompt(instruction), cfg.seed, view);
    out.calls = 1;
    let rec = match backend.infer_deterministic(&req).await {
        Ok(r) => r,
        Err(e) => {
            out.trace.failure = Some(ErrorInfo::from(&e));
            return out;
        }
    };
    out.trace.raw_text = Some(rec.text.clone());
    let cand = match parse_candidate(&rec, sent_dims, cfg.frame_hint) {
        Ok(c) => c,
        Err(e) => {
            out.trace.failure = Some(ErrorInfo::new("pipeline.refine_parse", e.to_string()));
            return out;
        }
    };
    let refined = cand.bbox.scale(1.0 / scale.x, 1.0 / scale.y);
    out.trace.refined_box = Some(refined);
    out.trace.clamped = cand.clamped;
    match crop::map_back(&refined, &pixel_window, dims) {
        Ok(p) => out.point = Some(p.to_pixel(dims)),
        Err(e) => out.trace.failure = Some(ErrorInfo::new("crop.map_back", e.to_string())),
    }
    out
}

/// Runs the whole method on one instance.
pub async fn ground(
    backend: &dyn Backend,
    image: &Arc<Screenshot>,
    instruction: &str,
    cfg: &PipelineConfig,
) -> GroundingResult {
    let stage = sample_stage(backend, image, instruction, cfg).await;
    resolve(backend, image, instruction, &stage, cfg).await
}

pub enum ImageSource {
    Path(PathBuf),
    Loaded(Arc<Screenshot>),
}

impl ImageSource {
    pub async fn load(&self) -> Result<Arc<Screenshot>, ImagingError> {
        match self {
            ImageSource::Loaded(s) => Ok(Arc::clone(s)),
            ImageSource::Path(p) => {
                let p = p.clone();
                tokio::task::spawn_blocking(move || Screenshot::load(p))
                    .await
                    .map_err(|e| ImagingError::Decode {
                        path: String::new(),
                        message: e.to_string(),
                    })?
                    .map(Arc::new)
            }
        }
    }
}

pub struct GroundingJob {
    pub image: ImageSource,
    pub instruction: String,
    pub backend: Arc<dyn Backend>,
}

/// Grounds many instances with at most `concurrency` in flight. Results come
/// back in input order; a failing instance never affects the others.
pub async fn ground_batch(jobs: Vec<GroundingJob>, cfg: &PipelineConfig, concurrency: usize) -> Vec<GroundingResult> {
    futures::stream::iter(jobs)
        .map(|job| async move {
            match job.image.load().await {
                Ok(img) => ground(job.backend.as_ref(), &img, &job.instruction, cfg).await,
                Err(e) => GroundingResult::failed(ErrorInfo::from(&e)),
            }
        })
        .buffered(concurrency.max(1))
        .collect()
        .await
}
