//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use zoomground::backends::{oracle::splitmix64, Backend, BackendError, ConfidenceModel, OracleBackend, OracleConfig};
use zoomground::crop::{Axes, CropConfig};
use zoomground::eval::{BackendFactory, Dataset, EvalInstance};
use zoomground::geometry::PixelBox;
use zoomground::imaging::Screenshot;
use zoomground::parsing::Candidate;
use zoomground::pipeline::PipelineConfig;

pub fn candidate(bbox: PixelBox, confidence: f64) -> Candidate {
    Candidate {
        bbox,
        confidence,
        raw_text: String::new(),
        token_count: 1,
        logprob_fallback: false,
        clamped: false,
    }
}

pub fn smoke_dataset_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/smoke/smoke.jsonl")
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub const MIXED_W: u32 = 1920;
pub const MIXED_H: u32 = 1080;
pub const MIXED_SIZE: usize = 200;

/// Expected accuracy of the mixed-noise suite, from an independent 4000-run
/// Monte Carlo simulation of the same instance design (sd of one 200-instance
/// run is about 0.012).
pub const MIXED_EXPECTED_ACCURACY: f64 = 0.9667;

/// Ground truth of mixed-suite instance `i`.
pub fn mixed_target(i: usize) -> PixelBox {
    let w = 40 + (i * 37) % 81;
    let h = 20 + (i * 13) % 21;
    let x1 = 100 + (i * 211) % 1600;
    let y1 = 80 + (i * 97) % 900;
    PixelBox::new(x1 as f64, y1 as f64, (x1 + w) as f64, (y1 + h) as f64).unwrap()
}

/// Instance kinds, by `i % 10`: 0-4 near-exact and confident, 5-7 scattered
/// with outliers and flat low confidence, 8-9 moderately scattered with flat
/// low confidence and a refinement pass that never parses.
pub fn mixed_oracle(i: usize, target: PixelBox, seed: u64) -> OracleConfig {
    let base = OracleConfig {
        hidden_target: target,
        rng_seed: splitmix64(seed ^ i as u64),
        ..Default::default()
    };
    match i % 10 {
        0..=4 => OracleConfig {
            center_noise: Axes::new(3., 3.),
            size_noise: 0.05,
            ..base
        },
        5..=7 => OracleConfig {
            center_noise: Axes::new(160., 100.),
            size_noise: 0.15,
            outlier_rate: 0.25,
            confidence: ConfidenceModel::constant(0.3),
            ..base
        },
        _ => OracleConfig {
            center_noise: Axes::new(20., 8.),
            size_noise: 0.1,
            confidence: ConfidenceModel::constant(0.35),
            refine_failure_rate: 1.0,
            ..base
        },
    }
}

pub fn mixed_config() -> PipelineConfig {
    PipelineConfig {
        crop: CropConfig {
            gamma: 1.5,
            min_side: 192.0,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub struct MixedFactory {
    pub seed: u64,
}

impl BackendFactory for MixedFactory {
    fn backend_for(&self, inst: &EvalInstance) -> Result<Arc<dyn Backend>, BackendError> {
        let i: usize = inst.id.trim_start_matches('m').parse().expect("mixed id");
        Ok(Arc::new(OracleBackend::new(mixed_oracle(i, inst.gt_box, self.seed))?))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "mixed-oracle", "seed": self.seed })
    }
}

/// Writes one blank screenshot plus the 200-row JSONL under `dir`.
pub fn write_mixed_dataset(dir: &Path) -> Dataset {
    Screenshot::from_rgb(RgbImage::new(MIXED_W, MIXED_H))
        .save_png(dir.join("blank.png"))
        .unwrap();
    let mut text = String::new();
    for i in 0..MIXED_SIZE {
        let group = match i % 10 {
            0..=4 => "easy",
            5..=7 => "scattered",
            _ => "fallback",
        };
        let row = serde_json::json!({
            "id": format!("m{i}"),
            "image": "blank.png",
            "instruction": format!("element {i}"),
            "bbox": mixed_target(i).as_array(),
            "group": group,
            "ui_type": if i % 2 == 0 { "text" } else { "icon" },
        });
        text.push_str(&row.to_string());
        text.push('\n');
    }
    let path = dir.join("mixed.jsonl");
    std::fs::write(&path, text).unwrap();
    Dataset::load(path).unwrap()
}

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap()
}
