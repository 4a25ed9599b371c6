//! Settings merged from (highest first) flags, environment and a TOML file.
//!
//! File schema, all tables and keys optional:
//!
//! ```toml
//! [pipeline]            # n, temperature, tau, gating_mode, resize, seed, ...
//! tau = 1.0
//! [pipeline.crop]       # gamma, min_side, keep_fraction, boundary, square, ...
//! gamma = 2.5
//! [backend]
//! kind = "http"         # or "oracle"
//! [backend.http]        # endpoint, model, api_key_env, timeout_secs, ...
//! endpoint = "http://localhost:8000/v1"
//! [backend.oracle]      # seed, target, center_noise, size_noise, rates, ...
//! seed = 1
//! [run]
//! concurrency = 8
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use zoomground::backends::{
    Backend, BackendError, ChatCompletionsBackend, ConfidenceModel, HttpBackendConfig, OracleBackend, OracleConfig,
};
use zoomground::crop::Axes;
use zoomground::eval::{BackendFactory, GridKey, OracleFactory, SharedBackend};
use zoomground::geometry::{ImageDims, PixelBox};
use zoomground::imaging::ResizePolicy;
use zoomground::parsing::FrameHint;
use zoomground::pipeline::PipelineConfig;

pub const ENV_ENDPOINT: &str = "ZOOMGROUND_ENDPOINT";
pub const ENV_MODEL: &str = "ZOOMGROUND_MODEL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Http,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub seed: u64,
    /// Hidden target for `ground`; defaults to a 64x32 box at the image center.
    /// `eval` always aims at each instance's ground truth.
    pub target: Option<PixelBox>,
    pub center_noise: Axes,
    pub size_noise: f64,
    pub parse_failure_rate: f64,
    pub outlier_rate: f64,
    pub refine_failure_rate: f64,
    pub confidence: ConfidenceModel,
    pub emit_logprobs: bool,
}

impl Default for OracleSection {
    fn default() -> Self {
        let base = OracleConfig::default();
        Self {
            seed: base.rng_seed,
            target: None,
            center_noise: base.center_noise,
            size_noise: base.size_noise,
            parse_failure_rate: base.parse_failure_rate,
            outlier_rate: base.outlier_rate,
            refine_failure_rate: base.refine_failure_rate,
            confidence: base.confidence,
            emit_logprobs: base.emit_logprobs,
        }
    }
}

impl OracleSection {
    pub fn oracle_config(&self, target: PixelBox) -> OracleConfig {
        OracleConfig {
            hidden_target: target,
            center_noise: self.center_noise,
            size_noise: self.size_noise,
            parse_failure_rate: self.parse_failure_rate,
            outlier_rate: self.outlier_rate,
            refine_failure_rate: self.refine_failure_rate,
            confidence: self.confidence,
            emit_logprobs: self.emit_logprobs,
            rng_seed: self.seed,
            ..OracleConfig::default()
        }
    }

    pub fn default_target(dims: ImageDims) -> PixelBox {
        PixelBox::centered(dims.w() / 2.0, dims.h() / 2.0, 64f64.min(dims.w()), 32f64.min(dims.h()))
            .expect("finite box")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub http: HttpBackendConfig,
    pub oracle: OracleSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Instances evaluated concurrently.
    pub concurrency: usize,
    /// Keep per-stage timings in results JSONL (breaks byte-for-byte reproducibility).
    pub include_timings: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            concurrency: 8,
            include_timings: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub pipeline: PipelineConfig,
    pub backend: BackendSection,
    pub run: RunSection,
}

fn parse_list<const N: usize>(s: &str, what: &str) -> Result<[f64; N], String> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| format!("{what}: not a number: {v}"))
        })
        .collect::<Result<_, _>>()?;
    vals.try_into()
        .map_err(|v: Vec<f64>| format!("{what}: expected {N} comma-separated numbers, got {}", v.len()))
}

/// Pipeline overrides. Values go through the same parser as sweep grids.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineFlags {
    /// Candidates sampled per instance.
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub temperature: Option<String>,
    /// Gate threshold; accepts inf and -inf.
    #[arg(long, allow_hyphen_values = true)]
    pub tau: Option<String>,
    #[arg(long)]
    pub gamma: Option<String>,
    /// Minimum crop side in pixels.
    #[arg(long)]
    pub min_crop: Option<String>,
    #[arg(long)]
    pub keep_fraction: Option<String>,
    /// shift, clip or shrink.
    #[arg(long)]
    pub strategy: Option<String>,
    /// true for square windows, false for per-axis extents.
    #[arg(long)]
    pub square: Option<String>,
    /// total, inter_only or intra_only.
    #[arg(long)]
    pub variance_mode: Option<String>,
    /// both, spatial_only or conf_only.
    #[arg(long)]
    pub gating_mode: Option<String>,
    /// Fixed crop side as a fraction of the longer image side, or none.
    #[arg(long)]
    pub fixed_ratio: Option<String>,
    /// none, max_pixels:N or max_side:N.
    #[arg(long)]
    pub resize: Option<ResizePolicy>,
    /// pixel, normalized or auto.
    #[arg(long)]
    pub frame_hint: Option<FrameHint>,
    /// Prompt text containing {instruction}.
    #[arg(long)]
    pub prompt_template: Option<String>,
    /// Sampling seed forwarded to the backend.
    #[arg(long)]
    pub seed: Option<u64>,
    /// IoU above which two candidates support each other in the vote.
    #[arg(long)]
    pub vote_iou: Option<f64>,
}

impl PipelineFlags {
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<(), String> {
        let keyed = [
            (GridKey::N, &self.n),
            (GridKey::Temperature, &self.temperature),
            (GridKey::Tau, &self.tau),
            (GridKey::Gamma, &self.gamma),
            (GridKey::MinCrop, &self.min_crop),
            (GridKey::KeepFraction, &self.keep_fraction),
            (GridKey::Strategy, &self.strategy),
            (GridKey::Square, &self.square),
            (GridKey::VarianceMode, &self.variance_mode),
            (GridKey::GatingMode, &self.gating_mode),
            (GridKey::FixedRatio, &self.fixed_ratio),
        ];
        for (key, value) in keyed {
            if let Some(v) = value {
                key.apply(cfg, v)
                    .map_err(|e| format!("--{}: {e}", key.as_str().replace('_', "-")))?;
            }
        }
        if let Some(r) = self.resize {
            cfg.resize = r;
        }
        if let Some(h) = self.frame_hint {
            cfg.frame_hint = h;
        }
        if let Some(t) = &self.prompt_template {
            cfg.prompt_template = t.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(v) = self.vote_iou {
            cfg.vote_iou_threshold = v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct BackendFlags {
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Chat-completions base URL (env ZOOMGROUND_ENDPOINT).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Served model name (env ZOOMGROUND_MODEL).
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    /// Cap on concurrent HTTP requests.
    #[arg(long)]
    pub max_requests: Option<usize>,
    #[arg(long)]
    pub retries: Option<u32>,
    /// Send n single-completion requests instead of one n-choice request.
    #[arg(long)]
    pub fanout: Option<bool>,
    #[arg(long)]
    pub max_tokens: Option<u32>,

    #[arg(long)]
    pub oracle_seed: Option<u64>,
    /// Hidden target x1,y1,x2,y2 in pixels.
    #[arg(long)]
    pub oracle_target: Option<String>,
    /// Center noise std in pixels: one value or sx,sy.
    #[arg(long)]
    pub oracle_center_noise: Option<String>,
    #[arg(long)]
    pub oracle_size_noise: Option<f64>,
    #[arg(long)]
    pub oracle_parse_failure_rate: Option<f64>,
    #[arg(long)]
    pub oracle_outlier_rate: Option<f64>,
    #[arg(long)]
    pub oracle_refine_failure_rate: Option<f64>,
    /// Constant token confidence instead of the distance-based model.
    #[arg(long)]
    pub oracle_confidence: Option<f64>,
}

impl BackendFlags {
    pub fn apply(&self, b: &mut BackendSection) -> Result<(), String> {
        if let Some(k) = self.backend {
            b.kind = k;
        }
        let h = &mut b.http;
        if let Some(v) = &self.endpoint {
            h.endpoint = v.clone();
        }
        if let Some(v) = &self.model {
            h.model = v.clone();
        }
        if let Some(v) = &self.api_key_env {
            h.api_key_env = v.clone();
        }
        if let Some(v) = self.timeout_secs {
            h.timeout_secs = v;
        }
        if let Some(v) = self.max_requests {
            h.max_concurrency = v;
        }
        if let Some(v) = self.retries {
            h.retry_budget = v;
        }
        if let Some(v) = self.fanout {
            h.fanout = v;
        }
        if let Some(v) = self.max_tokens {
            h.max_tokens = v;
        }

        let o = &mut b.oracle;
        if let Some(v) = self.oracle_seed {
            o.seed = v;
        }
        if let Some(v) = &self.oracle_target {
            let [x1, y1, x2, y2] = parse_list::<4>(v, "--oracle-target")?;
            o.target = Some(PixelBox::new(x1, y1, x2, y2).map_err(|e| format!("--oracle-target: {e}"))?);
        }
        if let Some(v) = &self.oracle_center_noise {
            o.center_noise = match parse_list::<1>(v, "--oracle-center-noise") {
                Ok([s]) => Axes::new(s, s),
                Err(_) => {
                    let [sx, sy] = parse_list::<2>(v, "--oracle-center-noise")?;
                    Axes::new(sx, sy)
                }
            };
        }
        if let Some(v) = self.oracle_size_noise {
            o.size_noise = v;
        }
        if let Some(v) = self.oracle_parse_failure_rate {
            o.parse_failure_rate = v;
        }
        if let Some(v) = self.oracle_outlier_rate {
            o.outlier_rate = v;
        }
        if let Some(v) = self.oracle_refine_failure_rate {
            o.refine_failure_rate = v;
        }
        if let Some(v) = self.oracle_confidence {
            o.confidence = ConfidenceModel::constant(v);
        }
        Ok(())
    }
}

impl CliConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// File, then environment, then flags.
    pub fn resolve(
        file: Option<&PathBuf>,
        env: impl Fn(&str) -> Option<String>,
        pipeline: &PipelineFlags,
        backend: &BackendFlags,
        concurrency: Option<usize>,
    ) -> Result<Self, String> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(v) = env(ENV_ENDPOINT) {
            cfg.backend.http.endpoint = v;
        }
        if let Some(v) = env(ENV_MODEL) {
            cfg.backend.http.model = v;
        }
        pipeline.apply(&mut cfg.pipeline)?;
        backend.apply(&mut cfg.backend)?;
        if let Some(c) = concurrency {
            cfg.run.concurrency = c;
        }
        cfg.pipeline.validate().map_err(|e| e.to_string())?;
        if cfg.run.concurrency == 0 {
            return Err("concurrency must be at least 1".into());
        }
        Ok(cfg)
    }

    /// Backend for a single image of the given size.
    pub fn single_backend(&self, dims: ImageDims) -> Result<Arc<dyn Backend>, BackendError> {
        Ok(match self.backend.kind {
            BackendKind::Http => Arc::new(ChatCompletionsBackend::new(self.backend.http.clone())?),
            BackendKind::Oracle => {
                let o = &self.backend.oracle;
                let target = o.target.unwrap_or_else(|| OracleSection::default_target(dims));
                Arc::new(OracleBackend::new(o.oracle_config(target))?)
            }
        })
    }

    pub fn factory(&self) -> Result<Box<dyn BackendFactory>, BackendError> {
        Ok(match self.backend.kind {
            BackendKind::Http => Box::new(SharedBackend {
                backend: Arc::new(ChatCompletionsBackend::new(self.backend.http.clone())?),
                description: serde_json::json!({ "kind": "http", "config": self.backend.http }),
            }),
            BackendKind::Oracle => {
                let base = self.backend.oracle.oracle_config(OracleConfig::default().hidden_target);
                base.validate()?;
                Box::new(OracleFactory { base })
            }
        })
    }

    /// Everything that shaped a run, minus secrets.
    pub fn snapshot(&self) -> serde_json::Value {
        let backend = match self.backend.kind {
            BackendKind::Http => serde_json::json!({ "kind": "http", "config": self.backend.http }),
            BackendKind::Oracle => serde_json::json!({ "kind": "oracle", "config": self.backend.oracle }),
        };
        serde_json::json!({ "pipeline": self.pipeline, "backend": backend, "run": self.run })
    }
}
