//! Reliability gate and consensus voting over sampled candidates.
//!
//! The gate fuses spatial agreement (mean pairwise IoU) with the mean token
//! confidence. Confident instances are answered by peer-support voting;
//! the rest are routed to the zoom-in branch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::iou;
use crate::parsing::Candidate;
use crate::serde_util::extended_f64;

pub const DEFAULT_VOTE_IOU: f64 = 0.5;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum GatingError {
    #[error("no valid candidates to gate")]
    NoCandidates,
}

/// Which reliability signals enter the gate score.
///
/// Single-signal modes double their component so that all modes share the
/// `[0, 2]` score range and one threshold grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    #[default]
    Both,
    SpatialOnly,
    ConfOnly,
}

impl std::str::FromStr for GatingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Self::Both),
            "spatial_only" | "spatial" => Ok(Self::SpatialOnly),
            "conf_only" | "conf" => Ok(Self::ConfOnly),
            other => Err(format!("unknown gating mode `{other}` (both|spatial_only|conf_only)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingReport {
    pub c_spatial: f64,
    pub avg_conf: f64,
    pub score: f64,
    #[serde(with = "extended_f64")]
    pub threshold: f64,
    pub passed: bool,
    pub n_valid: usize,
    pub logprob_fallback: bool,
    pub mode: GatingMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub winner_index: usize,
    /// Number of peers overlapping each candidate above the vote threshold.
    pub support: Vec<usize>,
    pub tie_broken_by_confidence: bool,
}

/// Mean IoU over all ordered pairs `i != j`.
///
/// A single candidate has no disagreement evidence and scores 1.
pub fn spatial_consensus(cands: &[Candidate]) -> Result<f64, GatingError> {
    let n = cands.len();
    match n {
        0 => return Err(GatingError::NoCandidates),
        1 => return Ok(1.0),
        _ => {}
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += 2.0 * iou(&cands[i].bbox, &cands[j].bbox);
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

pub fn gate(cands: &[Candidate], threshold: f64, mode: GatingMode) -> Result<GatingReport, GatingError> {
    let c_spatial = spatial_consensus(cands)?;
    let avg_conf = cands.iter().map(|c| c.confidence).sum::<f64>() / cands.len() as f64;
    let score = match mode {
        GatingMode::Both => c_spatial + avg_conf,
        GatingMode::SpatialOnly => 2.0 * c_spatial,
        GatingMode::ConfOnly => 2.0 * avg_conf,
    };
    Ok(GatingReport {
        c_spatial,
        avg_conf,
        score,
        threshold,
        passed: score > threshold,
        n_valid: cands.len(),
        logprob_fallback: cands.iter().any(|c| c.logprob_fallback),
        mode,
    })
}

/// Picks the candidate with the most peer support, then the highest
/// confidence, then the lowest index.
pub fn consensus_vote(cands: &[Candidate], vote_iou_threshold: f64) -> Result<VoteOutcome, GatingError> {
    if cands.is_empty() {
        return Err(GatingError::NoCandidates);
    }
    let support: Vec<usize> = cands
        .iter()
        .enumerate()
        .map(|(i, a)| {
            cands
                .iter()
                .enumerate()
                .filter(|(j, b)| *j != i && iou(&a.bbox, &b.bbox) > vote_iou_threshold)
                .count()
        })
        .collect();

    let mut winner = 0;
    for i in 1..cands.len() {
        let better = support[i] > support[winner]
            || (support[i] == support[winner] && cands[i].confidence > cands[winner].confidence);
        if better {
            winner = i;
        }
    }
    let top = support[winner];
    let tie_broken_by_confidence = support
        .iter()
        .enumerate()
        .any(|(i, s)| i != winner && *s == top && cands[i].confidence < cands[winner].confidence);

    Ok(VoteOutcome {
        winner_index: winner,
        support,
        tie_broken_by_confidence,
    })
}
