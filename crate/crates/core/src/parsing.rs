//! Turning raw model completions into candidate boxes.
//!
//! Accepted output grammar, first match wins:
//!
//! ```text
//! NUMBER := decimal literal, optional sign and exponent
//! TUPLE4 := ('(' | '[') NUMBER (',' NUMBER){3} (')' | ']')
//! TUPLE2 := ('(' | '[') NUMBER ',' NUMBER (')' | ']')
//!
//! 1. a JSON object whose `$.bbox` is a 4-array of numbers
//! 2. the first TUPLE4 anywhere in the text, read as [x1, y1, x2, y2]
//! 3. the first TUPLE2 anywhere in the text, read as a point
//! ```
//!
//! Coordinates are interpreted in the frame of the image that was sent to the
//! model, either as pixels or as fractions of its width and height.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ImageDims, PixelBox};

/// Confidence assigned to every candidate when the backend returns no logprobs.
pub const FALLBACK_CONFIDENCE: f64 = 0.5;

/// Values at or below this in every field mark a tuple as normalized under
/// [`FrameHint::Auto`].
pub const AUTO_NORMALIZED_LIMIT: f64 = 1.5;

const NUM: &str = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?";

static BBOX_KEY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r#""bbox"\s*:\s*\[\s*({NUM})\s*,\s*({NUM})\s*,\s*({NUM})\s*,\s*({NUM})\s*\]"#
    ))
    .unwrap()
});
static TUPLE4: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"[\(\[]\s*({NUM})\s*,\s*({NUM})\s*,\s*({NUM})\s*,\s*({NUM})\s*[\)\]]"
    ))
    .unwrap()
});
static TUPLE2: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"[\(\[]\s*({NUM})\s*,\s*({NUM})\s*[\)\]]")).unwrap());
static ANY_GROUP: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[\(\[]([^\(\)\[\]]*)[\)\]]").unwrap());
static WHOLE_NUM: LazyLock<Regex> = LazyLock::new(|| Regex::new(&format!("^{NUM}$")).unwrap());

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseFailure {
    #[error("no coordinate tuple found")]
    NoTuple,
    #[error("coordinate tuple has {arity} fields, expected 2 or 4")]
    WrongArity { arity: usize },
    #[error("coordinate tuple contains a non-numeric field")]
    NonNumeric,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ConfidenceError {
    #[error("completion carries no token logprobs")]
    EmptyLogprobs,
}

/// One generated completion as returned by a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub text: String,
    /// Natural-log probability of each generated token, in order.
    #[serde(default)]
    pub token_logprobs: Vec<f64>,
}

impl CompletionRecord {
    pub fn new(text: impl Into<String>, token_logprobs: Vec<f64>) -> Self {
        Self {
            text: text.into(),
            token_logprobs,
        }
    }
}

/// How the numbers in a completion relate to the image that was sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameHint {
    Pixel,
    Normalized,
    #[default]
    Auto,
}

impl std::str::FromStr for FrameHint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pixel" => Ok(Self::Pixel),
            "normalized" => Ok(Self::Normalized),
            "auto" => Ok(Self::Auto),
            other => Err(format!("unknown frame hint `{other}` (pixel|normalized|auto)")),
        }
    }
}

/// A parsed localization hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub confidence: f64,
    pub raw_text: String,
    pub token_count: usize,
    /// The backend supplied no logprobs and the fallback confidence was used.
    #[serde(default)]
    pub logprob_fallback: bool,
    /// Some coordinate fell outside the image and was clamped.
    #[serde(default)]
    pub clamped: bool,
}

/// Geometric mean of the token probabilities, computed in log space.
pub fn token_confidence(token_logprobs: &[f64]) -> Result<f64, ConfidenceError> {
    if token_logprobs.is_empty() {
        return Err(ConfidenceError::EmptyLogprobs);
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok(mean.exp())
}

/// Parses a completion into a candidate box in the pixel frame of `dims`.
pub fn parse_candidate(
    rec: &CompletionRecord,
    dims: ImageDims,
    frame_hint: FrameHint,
) -> Result<Candidate, ParseFailure> {
    let values = extract_tuple(&rec.text)?;
    let normalized = match frame_hint {
        FrameHint::Pixel => false,
        FrameHint::Normalized => true,
        FrameHint::Auto => values.iter().all(|v| *v <= AUTO_NORMALIZED_LIMIT),
    };
    let (sx, sy) = if normalized { (dims.w(), dims.h()) } else { (1.0, 1.0) };
    let raw = match values.as_slice() {
        [x1, y1, x2, y2] => PixelBox::from_corners(x1 * sx, y1 * sy, x2 * sx, y2 * sy),
        [x, y] => PixelBox::point(x * sx, y * sy),
        _ => unreachable!("extract_tuple only yields 2 or 4 values"),
    }
    .map_err(|_| ParseFailure::NonNumeric)?;
    let bbox = raw.clamp_to(dims);

    let (confidence, logprob_fallback) = match token_confidence(&rec.token_logprobs) {
        Ok(c) => (c.clamp(f64::MIN_POSITIVE, 1.0), false),
        Err(ConfidenceError::EmptyLogprobs) => (FALLBACK_CONFIDENCE, true),
    };
    let token_count = if rec.token_logprobs.is_empty() {
        rec.text.split_whitespace().count().max(1)
    } else {
        rec.token_logprobs.len()
    };

    Ok(Candidate {
        bbox,
        confidence,
        raw_text: rec.text.clone(),
        token_count,
        logprob_fallback,
        clamped: bbox != raw,
    })
}

/// Canonical textual form of a box; [`parse_candidate`] with
/// [`FrameHint::Pixel`] reproduces it exactly.
pub fn format_candidate(b: &PixelBox) -> String {
    format!("{{\"bbox\": [{}, {}, {}, {}]}}", b.x1, b.y1, b.x2, b.y2)
}

fn extract_tuple(text: &str) -> Result<Vec<f64>, ParseFailure> {
    if let Some(v) = json_bbox(text) {
        return Ok(v);
    }
    for re in [&*BBOX_KEY, &*TUPLE4, &*TUPLE2] {
        if let Some(caps) = re.captures(text) {
            let parsed: Option<Vec<f64>> = caps
                .iter()
                .skip(1)
                .map(|m| m.and_then(|m| m.as_str().parse::<f64>().ok()))
                .collect();
            match parsed {
                Some(v) if v.iter().all(|x| x.is_finite()) => return Ok(v),
                _ => return Err(ParseFailure::NonNumeric),
            }
        }
    }
    Err(classify_failure(text))
}

fn json_bbox(text: &str) -> Option<Vec<f64>> {
    let trimmed = text
        .trim()
        .trim_start_matches("```json")
        .trim_start_matches("```")
        .trim_end_matches("```")
        .trim();
    let value: serde_json::Value = serde_json::from_str(trimmed).ok()?;
    let arr = value.get("bbox")?.as_array()?;
    if arr.len() != 4 {
        return None;
    }
    arr.iter().map(|v| v.as_f64()).collect()
}

fn classify_failure(text: &str) -> ParseFailure {
    for caps in ANY_GROUP.captures_iter(text) {
        let inner = caps[1].trim();
        if !inner.contains(',') {
            continue;
        }
        let fields: Vec<&str> = inner.split(',').map(str::trim).collect();
        if fields.iter().all(|f| WHOLE_NUM.is_match(f)) {
            return ParseFailure::WrongArity { arity: fields.len() };
        }
        return ParseFailure::NonNumeric;
    }
    ParseFailure::NoTuple
}
