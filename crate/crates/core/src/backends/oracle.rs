//! Seeded simulated model around a known target box.
//!
//! Stochastic draws perturb the target center with per-axis Gaussian noise
//! (plus optional uniform outliers and unparseable replies); the
//! deterministic pass returns the target whenever it is visible in the image
//! it was shown, and a distractor otherwise. Replies are real text in the
//! candidate grammar with synthetic logprobs, so parsing is exercised too.
//! The oracle ignores the sampling temperature.

use std::sync::atomic::{AtomicUsize, Ordering};

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, SampleBatch, SampleRequest};
use crate::crop::Axes;
use crate::geometry::{center, PixelBox};
use crate::parsing::CompletionRecord;

const UNPARSEABLE_REPLY: &str = "I cannot determine where that element is.";
const SAMPLE_STREAM: u64 = 0x5a3d_1c0f_0000_0001;
const REFINE_STREAM: u64 = 0x5a3d_1c0f_0000_0002;

/// Maps the distance between a draw and the target center to a confidence:
/// `floor + (peak - floor) * exp(-(d / scale_px)^2 / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceModel {
    pub peak: f64,
    pub floor: f64,
    pub scale_px: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        Self {
            peak: 0.95,
            floor: 0.3,
            scale_px: 40.0,
        }
    }
}

impl ConfidenceModel {
    pub fn constant(c: f64) -> Self {
        Self {
            peak: c,
            floor: c,
            scale_px: 1.0,
        }
    }

    pub fn confidence(&self, distance_px: f64) -> f64 {
        let c = if self.scale_px > 0.0 {
            let z = distance_px / self.scale_px;
            self.floor + (self.peak - self.floor) * (-0.5 * z * z).exp()
        } else {
            self.peak
        };
        c.clamp(1e-6, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Target element in original-image pixels.
    pub hidden_target: PixelBox,
    /// Per-axis standard deviation of draw centers, in pixels.
    pub center_noise: Axes,
    /// Fractional standard deviation of draw width and height.
    pub size_noise: f64,
    pub parse_failure_rate: f64,
    /// Probability a draw lands uniformly anywhere in the image.
    pub outlier_rate: f64,
    /// Probability the deterministic zoom pass replies unparseably.
    pub refine_failure_rate: f64,
    pub confidence: ConfidenceModel,
    /// When false the oracle behaves like a server without logprob support.
    pub emit_logprobs: bool,
    pub tokens_per_completion: usize,
    pub rng_seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            hidden_target: PixelBox {
                x1: 0.0,
                y1: 0.0,
                x2: 64.0,
                y2: 32.0,
            },
            center_noise: Axes::default(),
            size_noise: 0.0,
            parse_failure_rate: 0.0,
            outlier_rate: 0.0,
            refine_failure_rate: 0.0,
            confidence: ConfidenceModel::default(),
            emit_logprobs: true,
            tokens_per_completion: 16,
            rng_seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let rates = [self.parse_failure_rate, self.outlier_rate, self.refine_failure_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(BackendError::Config("oracle rates must lie in [0, 1]".into()));
        }
        if self.center_noise.x < 0.0 || self.center_noise.y < 0.0 || self.size_noise < 0.0 {
            return Err(BackendError::Config("oracle noise must be non-negative".into()));
        }
        if self.tokens_per_completion == 0 {
            return Err(BackendError::Config("tokens_per_completion must be positive".into()));
        }
        Ok(())
    }
}

pub struct OracleBackend {
    cfg: OracleConfig,
    sample_calls: AtomicUsize,
    deterministic_calls: AtomicUsize,
}

impl OracleBackend {
    pub fn new(cfg: OracleConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            sample_calls: AtomicUsize::new(0),
            deterministic_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    /// `(sample calls, deterministic calls)` served so far.
    pub fn call_counts(&self) -> (usize, usize) {
        (
            self.sample_calls.load(Ordering::Relaxed),
            self.deterministic_calls.load(Ordering::Relaxed),
        )
    }

    fn record(&self, text: String, confidence: f64, want_logprobs: bool) -> CompletionRecord {
        let token_logprobs = if self.cfg.emit_logprobs && want_logprobs {
            vec![confidence.ln(); self.cfg.tokens_per_completion]
        } else {
            Vec::new()
        };
        CompletionRecord { text, token_logprobs }
    }

    /// One stochastic draw in the global frame, or `None` for an unparseable reply.
    fn draw(&self, rng: &mut ChaCha8Rng, req: &SampleRequest) -> Option<PixelBox> {
        // fixed number of variates per draw keeps streams aligned across configs
        let u_fail: f64 = rng.random();
        let u_out: f64 = rng.random();
        let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let (ux, uy): (f64, f64) = (rng.random(), rng.random());

        if u_fail < self.cfg.parse_failure_rate {
            return None;
        }
        let t = &self.cfg.hidden_target;
        let tc = center(t);
        let dims = req.view.global_dims;
        let (cx, cy) = if u_out < self.cfg.outlier_rate {
            (ux * dims.w(), uy * dims.h())
        } else {
            (
                tc.x + z[0] * self.cfg.center_noise.x,
                tc.y + z[1] * self.cfg.center_noise.y,
            )
        };
        let w = t.width() * (1.0 + z[2] * self.cfg.size_noise).max(0.0);
        let h = t.height() * (1.0 + z[3] * self.cfg.size_noise).max(0.0);
        PixelBox::centered(cx, cy, w, h).ok()
    }
}

fn stream_seed(base: u64, request_seed: Option<u64>, stream: u64) -> u64 {
    splitmix64(splitmix64(base ^ stream) ^ request_seed.unwrap_or(0))
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn bbox_text(b: &PixelBox) -> String {
    format!("{{\"bbox\": [{:.1}, {:.1}, {:.1}, {:.1}]}}", b.x1, b.y1, b.x2, b.y2)
}

#[async_trait]
impl Backend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    async fn sample(&self, req: &SampleRequest) -> Result<SampleBatch, BackendError> {
        self.sample_calls.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.rng_seed, req.seed, SAMPLE_STREAM));
        let target_center = center(&self.cfg.hidden_target);
        let completions = (0..req.n)
            .map(|_| match self.draw(&mut rng, req) {
                Some(global) => {
                    let c = self.cfg.confidence.confidence(center(&global).distance(&target_center));
                    self.record(bbox_text(&req.view.to_sent(&global)), c, req.want_logprobs)
                }
                None => self.record(UNPARSEABLE_REPLY.into(), self.cfg.confidence.floor, req.want_logprobs),
            })
            .collect();
        Ok(SampleBatch {
            completions,
            failures: Vec::new(),
        })
    }

    async fn infer_deterministic(&self, req: &SampleRequest) -> Result<CompletionRecord, BackendError> {
        self.deterministic_calls.fetch_add(1, Ordering::Relaxed);
        let view_key = req.view.origin.x.to_bits() ^ req.view.origin.y.to_bits().rotate_left(32);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.rng_seed ^ view_key, req.seed, REFINE_STREAM));
        let u_fail: f64 = rng.random();
        let (ux, uy): (f64, f64) = (rng.random(), rng.random());
        let peak = self.cfg.confidence.peak;
        if u_fail < self.cfg.refine_failure_rate {
            return Ok(self.record(UNPARSEABLE_REPLY.into(), self.cfg.confidence.floor, req.want_logprobs));
        }

        let shown = req.image.dims.full_box();
        let target = req.view.to_sent(&self.cfg.hidden_target);
        if shown.intersection(&target).is_some() {
            return Ok(self.record(bbox_text(&target), peak, req.want_logprobs));
        }
        // target not visible: answer with some other element inside the crop
        let w = target.width().min(shown.width());
        let h = target.height().min(shown.height());
        let cx = w / 2.0 + ux * (shown.width() - w);
        let cy = h / 2.0 + uy * (shown.height() - h);
        let distractor =
            PixelBox::centered(cx, cy, w, h).unwrap_or_else(|_| PixelBox::point(cx, cy).expect("finite point"));
        Ok(self.record(bbox_text(&distractor), peak, req.want_logprobs))
    }
}
