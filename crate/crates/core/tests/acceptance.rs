//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any gating criterion fails.

mod common;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use base64::Engine;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use common::*;
use zoomground::backends::{
    Backend, ChatCompletionsBackend, HttpBackendConfig, OracleBackend, OracleConfig, SampleRequest, ViewTransform,
};
use zoomground::crop::{self, Axes, CropConfig};
use zoomground::eval::{self, EvalOptions, Grid};
use zoomground::gating::{self, GatingMode};
use zoomground::geometry::{self, ImageDims, PixelBox, PixelPoint};
use zoomground::imaging::{self, ResizePolicy, Screenshot};
use zoomground::parsing::{self, Candidate, FrameHint};
use zoomground::pipeline::{self, Branch, GroundingJob, ImageSource, PipelineConfig};

type Check = Result<String, String>;
type Criterion<'a> = (&'a str, bool, Box<dyn Fn() -> Check + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-300) || a == b
}

fn int_box(rng: &mut ChaCha8Rng, w: i64, h: i64) -> PixelBox {
    let x1 = rng.random_range(0..w - 1);
    let y1 = rng.random_range(0..h - 1);
    let x2 = rng.random_range(x1 + 1..=w);
    let y2 = rng.random_range(y1 + 1..=h);
    PixelBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap()
}

fn int_candidates(rng: &mut ChaCha8Rng, n: usize) -> Vec<Candidate> {
    (0..n)
        .map(|_| {
            let b = int_box(rng, 60, 40);
            // confidences on a coarse grid so ties happen
            candidate(b, f64::from(rng.random_range(1..=4u8)) / 4.0)
        })
        .collect()
}

/// Exact IoU of integer boxes via integer areas.
fn brute_iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.as_array().map(|v| v as i64);
    let [bx1, by1, bx2, by2] = b.as_array().map(|v| v as i64);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn brute_center(b: &PixelBox) -> (f64, f64) {
    ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0)
}

/// Kept set by rank counting against the coordinate-wise median center.
fn brute_filter(cands: &[Candidate], keep: f64) -> Vec<usize> {
    let n = cands.len();
    let k = ((keep * n as f64 + 1e-9).floor() as usize).clamp(1, n);
    let centers: Vec<(f64, f64)> = cands.iter().map(|c| brute_center(&c.bbox)).collect();
    let med = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    };
    let mx = med(centers.iter().map(|c| c.0).collect());
    let my = med(centers.iter().map(|c| c.1).collect());
    let d2: Vec<f64> = centers
        .iter()
        .map(|c| (c.0 - mx).powi(2) + (c.1 - my).powi(2))
        .collect();
    (0..n)
        .filter(|&i| {
            let rank = (0..n).filter(|&j| d2[j] < d2[i] || (d2[j] == d2[i] && j < i)).count();
            rank < k
        })
        .collect()
}

fn formula_suite() -> Check {
    const CASES: usize = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();

    for _ in 0..CASES {
        // box center
        let b = int_box(&mut rng, 4000, 3000);
        let c = geometry::center(&b);
        ensure((c.x, c.y) == brute_center(&b), || format!("center mismatch for {b:?}"))?;
        *counts.entry("center").or_default() += 1;

        // token confidence vs product root
        let len = rng.random_range(1..=20);
        let probs: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..=1.0)).collect();
        let lps: Vec<f64> = probs.iter().map(|p: &f64| p.ln()).collect();
        let got = parsing::token_confidence(&lps).unwrap();
        let want = probs.iter().product::<f64>().powf(1.0 / len as f64);
        ensure(rel_close(got, want, 1e-9), || format!("confidence {got} vs {want}"))?;
        *counts.entry("confidence").or_default() += 1;

        let n = rng.random_range(2..=9);
        let cands = int_candidates(&mut rng, n);

        // pairwise IoU is exact on integer boxes
        let (a, bb) = (&cands[0].bbox, &cands[1].bbox);
        ensure(geometry::iou(a, bb) == brute_iou(a, bb), || {
            format!("iou mismatch {a:?} {bb:?}")
        })?;
        *counts.entry("iou").or_default() += 1;

        // spatial consensus, double loop
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += brute_iou(&cands[i].bbox, &cands[j].bbox);
                }
            }
        }
        let want_cs = s / (n * (n - 1)) as f64;
        let got_cs = gating::spatial_consensus(&cands).unwrap();
        ensure((got_cs - want_cs).abs() <= 1e-9 * want_cs.max(1e-12), || {
            format!("consensus {got_cs} vs {want_cs}")
        })?;
        *counts.entry("consensus").or_default() += 1;

        // gate score and decision
        let tau = rng.random_range(0.0..2.0);
        let mean_c = cands.iter().map(|c| c.confidence).sum::<f64>() / n as f64;
        let rep = gating::gate(&cands, tau, GatingMode::Both).unwrap();
        ensure(rel_close(rep.score, want_cs + mean_c, 1e-9), || {
            format!("score {}", rep.score)
        })?;
        ensure(rep.passed == (rep.score > tau), || "gate decision".into())?;
        *counts.entry("gate").or_default() += 1;

        // consensus vote: lexicographic (support, confidence), lowest index
        let support: Vec<usize> = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && brute_iou(&cands[i].bbox, &cands[j].bbox) > 0.5)
                    .count()
            })
            .collect();
        let mut best = 0;
        for i in 1..n {
            if (support[i], cands[i].confidence) > (support[best], cands[best].confidence) {
                best = i;
            }
        }
        let vote = gating::consensus_vote(&cands, 0.5).unwrap();
        ensure(vote.winner_index == best && vote.support == support, || {
            format!("vote {} vs {best}", vote.winner_index)
        })?;
        *counts.entry("vote").or_default() += 1;

        // outlier filter
        let keep = [0.5, 0.75, 1.0][rng.random_range(0..3)];
        ensure(
            crop::filter_outliers(&cands, keep) == brute_filter(&cands, keep),
            || "outlier filter mismatch".into(),
        )?;
        *counts.entry("filter").or_default() += 1;

        // variance terms over the kept set, two-pass
        let kept: Vec<&Candidate> = cands.iter().collect();
        let stats = crop::variance_decompose(kept.iter().copied()).unwrap();
        let k = kept.len() as f64;
        let cs: Vec<(f64, f64)> = kept.iter().map(|c| brute_center(&c.bbox)).collect();
        let mu = (
            cs.iter().map(|c| c.0).sum::<f64>() / k,
            cs.iter().map(|c| c.1).sum::<f64>() / k,
        );
        let vin = (
            cs.iter().map(|c| (c.0 - mu.0).powi(2)).sum::<f64>() / k,
            cs.iter().map(|c| (c.1 - mu.1).powi(2)).sum::<f64>() / k,
        );
        let vintra = (
            kept.iter().map(|c| (c.bbox.width() / 4.0).powi(2)).sum::<f64>() / k,
            kept.iter().map(|c| (c.bbox.height() / 4.0).powi(2)).sum::<f64>() / k,
        );
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs() + 1e-9;
        ensure(close(stats.mu.x, mu.0) && close(stats.mu.y, mu.1), || "mean".into())?;
        ensure(close(stats.v_inter.x, vin.0) && close(stats.v_inter.y, vin.1), || {
            format!("inter {:?} vs {vin:?}", stats.v_inter)
        })?;
        *counts.entry("inter").or_default() += 1;
        ensure(
            close(stats.v_intra.x, vintra.0) && close(stats.v_intra.y, vintra.1),
            || "intra".into(),
        )?;
        *counts.entry("intra").or_default() += 1;

        // square window away from the borders
        let dims = ImageDims::new(100_000, 100_000).unwrap();
        let cfg = CropConfig {
            gamma: rng.random_range(0.5..4.0),
            min_side: rng.random_range(0.0..800.0),
            ..Default::default()
        };
        let muw = Axes::new(
            rng.random_range(40_000.0..60_000.0),
            rng.random_range(40_000.0..60_000.0),
        );
        let sigma = Axes::new(rng.random_range(0.0..300.0), rng.random_range(0.0..300.0));
        let w = crop::plan_crop(muw, sigma, dims, &cfg);
        let side = (2.0 * cfg.gamma * sigma.x)
            .max(2.0 * cfg.gamma * sigma.y)
            .max(cfg.min_side);
        let want_w = [
            muw.x - side / 2.0,
            muw.y - side / 2.0,
            muw.x + side / 2.0,
            muw.y + side / 2.0,
        ];
        ensure(
            w.window
                .as_array()
                .iter()
                .zip(want_w)
                .all(|(a, b)| rel_close(*a, b, 1e-12))
                && rel_close(w.side, side, 1e-12),
            || format!("window {:?} vs {want_w:?}", w.window),
        )?;
        *counts.entry("window").or_default() += 1;

        // map-back from a normalized in-crop position
        let gd = ImageDims::new(rng.random_range(200..4000), rng.random_range(200..4000)).unwrap();
        let win = int_box(&mut rng, i64::from(gd.width), i64::from(gd.height));
        let (fx, fy): (f64, f64) = (rng.random(), rng.random());
        let refined = PixelBox::point(fx * win.width(), fy * win.height()).unwrap();
        let p = crop::map_back(&refined, &win, gd).unwrap();
        let want_x = (win.x1 + fx * win.width()) / gd.w();
        let want_y = (win.y1 + fy * win.height()) / gd.h();
        ensure(rel_close(p.x, want_x, 1e-9) && rel_close(p.y, want_y, 1e-9), || {
            "map-back".into()
        })?;
        *counts.entry("map_back").or_default() += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    ensure(counts.values().all(|&c| c >= 1000), || "too few cases".into())?;
    Ok(format!("{} formulas x {CASES} cases in {secs:.2}s", counts.len()))
}

fn variance_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    const CASES: usize = 5000;
    for _ in 0..CASES {
        let n = rng.random_range(1..=16);
        let cands: Vec<Candidate> = (0..n)
            .map(|_| {
                let cx = rng.random_range(0.0..3000.0);
                let cy = rng.random_range(0.0..2000.0);
                let b = PixelBox::centered(cx, cy, rng.random_range(0.0..400.0), rng.random_range(0.0..200.0)).unwrap();
                candidate(b, 0.5)
            })
            .collect();
        let s = crop::variance_decompose(&cands).unwrap();
        let total = s.variance(crop::VarianceMode::Total);
        ensure(
            total.x == s.v_inter.x + s.v_intra.x && total.y == s.v_inter.y + s.v_intra.y,
            || format!("{s:?}"),
        )?;
        let dims = ImageDims::new(3000, 2000).unwrap();
        let plan = crop::plan(&cands, dims, &CropConfig::default()).unwrap();
        ensure(
            plan.variance.x == plan.v_inter.x + plan.v_intra.x && plan.variance.y == plan.v_inter.y + plan.v_intra.y,
            || "plan variance".into(),
        )?;
    }
    Ok(format!("exact on {CASES} random candidate sets"))
}

fn outlier_filter() -> Check {
    ensure(crop::kept_count(8, 0.75) == 6, || {
        format!("K = {}", crop::kept_count(8, 0.75))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    const SETS: usize = 1000;
    for _ in 0..SETS {
        let cands: Vec<Candidate> = (0..8)
            .map(|_| {
                // integer centers give exact distance ties
                let cx = f64::from(rng.random_range(0..20u32)) * 5.0;
                let cy = f64::from(rng.random_range(0..20u32)) * 5.0;
                candidate(PixelBox::centered(cx + 100.0, cy + 100.0, 10.0, 10.0).unwrap(), 0.5)
            })
            .collect();
        let got = crop::filter_outliers(&cands, 0.75);
        let want = brute_filter(&cands, 0.75);
        ensure(got.len() == 6 && got == want, || format!("{got:?} vs {want:?}"))?;
    }
    Ok(format!("K = 6 for N = 8; matches rank counting on {SETS} sets"))
}

fn crop_coverage() -> Check {
    const EXPECTED: f64 = 0.9931;
    const TRIALS: usize = 1000;
    let start = Instant::now();
    let img = Arc::new(Screenshot::from_rgb(RgbImage::new(4000, 2000)));
    let target = PixelBox::centered(2000., 1000., 24., 16.).unwrap();
    let cfg = CropConfig {
        gamma: 2.5,
        min_side: 0.0,
        keep_fraction: 0.75,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let rt = runtime();
    let mut hits = 0;
    for t in 0..TRIALS {
        let spread = Axes::new(rng.random_range(5.0..50.0), rng.random_range(5.0..50.0));
        let oracle = OracleBackend::new(OracleConfig {
            hidden_target: target,
            center_noise: spread,
            rng_seed: t as u64,
            ..Default::default()
        })
        .unwrap();
        let req = SampleRequest {
            image: Arc::clone(&img),
            prompt: "q".into(),
            temperature: 0.9,
            n: 8,
            want_logprobs: true,
            seed: Some(t as u64),
            view: ViewTransform::identity(img.dims),
        };
        let batch = rt.block_on(oracle.sample(&req)).map_err(|e| e.to_string())?;
        let cands: Vec<Candidate> = batch
            .completions
            .iter()
            .filter_map(|r| parsing::parse_candidate(r, img.dims, FrameHint::Pixel).ok())
            .collect();
        let plan = crop::plan(&cands, img.dims, &cfg).map_err(|e| e.to_string())?;
        if plan.window.contains(&target.center()) {
            hits += 1;
        }
    }
    let rate = hits as f64 / TRIALS as f64;
    let secs = start.elapsed().as_secs_f64();
    ensure((rate - EXPECTED).abs() <= 0.03 && rate >= 0.9, || {
        format!("coverage {rate:.4} vs expected {EXPECTED}")
    })?;
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "coverage {rate:.4} vs expected {EXPECTED} (+/-0.03), {TRIALS} trials in {secs:.2}s"
    ))
}

fn routing_monotonicity(ds: &eval::Dataset) -> Check {
    let grid = Grid::parse(&["tau=-inf,0.6,0.8,0.9,0.95,1.0,1.05,inf"]).map_err(|e| e.to_string())?;
    let cells = runtime()
        .block_on(eval::sweep(
            ds,
            &mixed_config(),
            &grid,
            &MixedFactory { seed: 7 },
            EvalOptions::default(),
        ))
        .map_err(|e| e.to_string())?;
    let rates: Vec<f64> = cells.iter().map(|c| c.report.crop_rate).collect();
    ensure(rates.windows(2).all(|w| w[0] <= w[1]), || {
        format!("CROP% not monotone: {rates:?}")
    })?;
    ensure(rates[0] == 0.0, || format!("CROP% at -inf = {}", rates[0]))?;
    let last = &cells.last().unwrap().report;
    ensure(last.crop_rate_parsed == 1.0, || {
        format!("CROP% at +inf = {}", last.crop_rate_parsed)
    })?;
    // per instance: once zoomed, stays zoomed as tau rises
    for i in 0..ds.instances.len() {
        let zoomed: Vec<bool> = cells
            .iter()
            .map(|c| matches!(c.report.rows[i].result.branch, Branch::Crop | Branch::FallbackGlobal))
            .collect();
        ensure(zoomed.windows(2).all(|w| !w[0] || w[1]), || {
            format!("instance {i} returned to pass")
        })?;
    }
    let shown: Vec<String> = rates[1..rates.len() - 1]
        .iter()
        .map(|r| format!("{:.1}%", r * 100.0))
        .collect();
    Ok(format!(
        "CROP% 0 at -inf, [{}] over 0.6..1.05, 100% at +inf",
        shown.join(", ")
    ))
}

fn call_budget() -> Check {
    let img = Arc::new(Screenshot::from_rgb(RgbImage::new(MIXED_W, MIXED_H)));
    let oracles: Vec<Arc<OracleBackend>> = (0..MIXED_SIZE)
        .map(|i| Arc::new(OracleBackend::new(mixed_oracle(i, mixed_target(i), 11)).unwrap()))
        .collect();
    let jobs = oracles
        .iter()
        .map(|o| GroundingJob {
            image: ImageSource::Loaded(Arc::clone(&img)),
            instruction: "q".into(),
            backend: Arc::clone(o) as Arc<dyn Backend>,
        })
        .collect();
    let results = runtime().block_on(pipeline::ground_batch(jobs, &mixed_config(), 16));
    let mut by_branch: BTreeMap<&str, usize> = BTreeMap::new();
    for (r, o) in results.iter().zip(&oracles) {
        let (s, d) = o.call_counts();
        let want = match r.branch {
            Branch::Pass => (1, 1, 0),
            Branch::Crop | Branch::FallbackGlobal => (2, 1, 1),
            Branch::Failure => (1, 1, 0),
        };
        ensure((r.backend_calls, s, d) == want, || {
            format!(
                "{:?}: trace {} calls, backend saw ({s}, {d})",
                r.branch, r.backend_calls
            )
        })?;
        *by_branch.entry(r.branch.as_str()).or_default() += 1;
    }
    ensure(
        by_branch.get("pass").copied().unwrap_or(0) > 0 && by_branch.get("crop").copied().unwrap_or(0) > 0,
        || format!("batch did not exercise both branches: {by_branch:?}"),
    )?;
    Ok(format!(
        "{MIXED_SIZE} instances {by_branch:?}: pass = 1 call, zoom = 2 calls"
    ))
}

fn map_back_round_trip() -> Check {
    const CASES: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_cont: f64 = 0.0;
    for _ in 0..CASES {
        let dims = ImageDims::new(rng.random_range(100..5000), rng.random_range(100..5000)).unwrap();
        let x1 = rng.random_range(0.0..dims.w() - 1.0);
        let y1 = rng.random_range(0.0..dims.h() - 1.0);
        let win = PixelBox::new(
            x1,
            y1,
            rng.random_range(x1 + 0.5..=dims.w()),
            rng.random_range(y1 + 0.5..=dims.h()),
        )
        .unwrap();
        let p = PixelPoint::new(rng.random_range(win.x1..=win.x2), rng.random_range(win.y1..=win.y2));
        let local = crop::to_crop_frame(p, &win);
        let back = crop::map_back(&PixelBox::point(local.x, local.y).unwrap(), &win, dims)
            .unwrap()
            .to_pixel(dims);
        worst_cont = worst_cont.max(back.distance(&p));
    }
    ensure(worst_cont <= 1e-9, || format!("continuous error {worst_cont:e}"))?;

    // raster path: paint a marker, crop the rounded window, downscale, find
    // the marker in the model's view and map it back
    const RASTER_CASES: usize = 2000;
    let dims = ImageDims::new(400, 300).unwrap();
    let mut base = RgbImage::new(dims.width, dims.height);
    let policy = ResizePolicy::MaxSide { side: 160 };
    let mut worst_raster: f64 = 0.0;
    for _ in 0..RASTER_CASES {
        let side_x = rng.random_range(40.0..300.0);
        let side_y = rng.random_range(40.0..280.0);
        let wx = rng.random_range(0.0..dims.w() - side_x);
        let wy = rng.random_range(0.0..dims.h() - side_y);
        let window = PixelBox::new(wx, wy, wx + side_x, wy + side_y).unwrap();
        let region = imaging::pixel_region(&window, dims).unwrap();
        let (mx, my) = (
            rng.random_range(region.x + 3..region.x + region.width - 3),
            rng.random_range(region.y + 3..region.y + region.height - 3),
        );
        let truth = PixelPoint::new(f64::from(mx) + 0.5, f64::from(my) + 0.5);
        let marker: Vec<(u32, u32)> = (mx - 1..=mx + 1)
            .flat_map(|x| (my - 1..=my + 1).map(move |y| (x, y)))
            .collect();
        for &(x, y) in &marker {
            base.put_pixel(x, y, Rgb([255, 255, 255]));
        }
        let shot = Screenshot::from_rgb(base.clone());
        for &(x, y) in &marker {
            base.put_pixel(x, y, Rgb([0, 0, 0]));
        }
        let (cropped, region) = imaging::crop(&shot, &window).map_err(|e| e.to_string())?;
        let (sent, scale) = imaging::resize(&cropped, policy);
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for (x, y, px) in sent.raster.enumerate_pixels() {
            let v = f64::from(px[0]);
            sx += v * (f64::from(x) + 0.5);
            sy += v * (f64::from(y) + 0.5);
            sw += v;
        }
        ensure(sw > 0.0, || "marker vanished".into())?;
        let seen = PixelBox::point(sx / sw / scale.x, sy / sw / scale.y).unwrap();
        let back = crop::map_back(&seen, &region.as_box(), dims).unwrap().to_pixel(dims);
        worst_raster = worst_raster.max(back.distance(&truth));
    }
    ensure(worst_raster <= 1.0, || format!("raster error {worst_raster:.3} px"))?;
    Ok(format!(
        "{CASES} continuous pairs max error {worst_cont:.1e} px; {RASTER_CASES} raster pairs max error {worst_raster:.3} px"
    ))
}

fn determinism() -> Check {
    let ds = eval::Dataset::load(smoke_dataset_path()).map_err(|e| e.to_string())?;
    ensure(ds.instances.len() == 20, || {
        format!("smoke dataset has {} rows", ds.instances.len())
    })?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rt = runtime();
    let mut summary = Vec::new();
    for (name, base) in [
        ("exact", OracleConfig::default()),
        (
            "noisy",
            OracleConfig {
                center_noise: Axes::new(60., 30.),
                size_noise: 0.2,
                outlier_rate: 0.15,
                parse_failure_rate: 0.1,
                refine_failure_rate: 0.2,
                confidence: zoomground::backends::ConfidenceModel::constant(0.4),
                rng_seed: 31,
                ..Default::default()
            },
        ),
    ] {
        let mut files = Vec::new();
        for run in 0..2 {
            let factory = eval::OracleFactory { base: base.clone() };
            let report = rt
                .block_on(eval::run_eval(
                    &ds,
                    &PipelineConfig::default(),
                    &factory,
                    EvalOptions { concurrency: 4 + run },
                ))
                .map_err(|e| e.to_string())?;
            if name == "exact" {
                ensure(report.accuracy == 1.0, || {
                    format!("exact oracle accuracy {}", report.accuracy)
                })?;
            }
            let path = dir.path().join(format!("{name}{run}.jsonl"));
            eval::write_results_jsonl(&path, &report, false).map_err(|e| e.to_string())?;
            files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        }
        ensure(files[0] == files[1], || format!("{name} runs differ"))?;
        summary.push(format!("{name} {} bytes", files[0].len()));
    }
    Ok(format!("byte-identical results JSONL ({})", summary.join(", ")))
}

#[derive(Clone)]
struct MockState {
    requests: Arc<Mutex<Vec<Value>>>,
    fail_next: Arc<Mutex<u32>>,
}

fn choice(i: usize, text: &str, logprobs: &[f64]) -> Value {
    json!({
        "index": i,
        "message": { "role": "assistant", "content": text },
        "logprobs": { "content": logprobs.iter().map(|lp| json!({ "token": "t", "logprob": lp })).collect::<Vec<_>>() },
        "finish_reason": "stop",
    })
}

async fn mock_chat(State(st): State<MockState>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    st.requests.lock().unwrap().push(body.clone());
    {
        let mut f = st.fail_next.lock().unwrap();
        if *f > 0 {
            *f -= 1;
            return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "error": "busy" })));
        }
    }
    let n = body["n"].as_u64().unwrap_or(1) as usize;
    let choices: Vec<Value> = if body["temperature"].as_f64() == Some(0.0) {
        // zoom pass: the target sits at the center of the 512x512 crop
        vec![choice(0, "{\"bbox\": [246, 246, 266, 266]}", &[-0.01, -0.02])]
    } else {
        // scattered, unconfident global draws around (1000, 500)
        let offsets = [
            (-60., -40.),
            (60., 40.),
            (-60., 40.),
            (60., -40.),
            (-20., 0.),
            (20., 0.),
            (0., -20.),
            (0., 20.),
        ];
        (0..n)
            .map(|i| {
                let (dx, dy) = offsets[i % offsets.len()];
                let (cx, cy) = (1000. + dx, 500. + dy);
                let text = format!(
                    "```json\n{{\"bbox\": [{}, {}, {}, {}]}}\n```",
                    cx - 15.,
                    cy - 10.,
                    cx + 15.,
                    cy + 10.
                );
                choice(i, &text, &[-1.2, -0.9, -1.5])
            })
            .collect()
    };
    (
        StatusCode::OK,
        Json(json!({ "id": "x", "object": "chat.completion", "choices": choices })),
    )
}

fn mock_server() -> Check {
    let rt = runtime();
    rt.block_on(async {
        let st = MockState {
            requests: Arc::new(Mutex::new(Vec::new())),
            fail_next: Arc::new(Mutex::new(1)),
        };
        let app = Router::new()
            .route("/v1/chat/completions", post(mock_chat))
            .with_state(st.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .map_err(|e| e.to_string())?;
        let addr: SocketAddr = listener.local_addr().map_err(|e| e.to_string())?;
        tokio::spawn(async move { axum::serve(listener, app).await });

        let backend = ChatCompletionsBackend::new(HttpBackendConfig {
            endpoint: format!("http://{addr}/v1"),
            model: "scripted-vlm".into(),
            api_key: Some("secret-token".into()),
            backoff_base_ms: 10,
            backoff_max_ms: 20,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let img = Arc::new(Screenshot::from_rgb(RgbImage::new(2000, 1000)));
        let r = pipeline::ground(&backend, &img, "click the save button", &PipelineConfig::default()).await;

        ensure(r.branch == Branch::Crop, || {
            format!("branch {:?}, error {:?}", r.branch, r.error)
        })?;
        let p = r.point.ok_or("no point")?;
        ensure(p.x == 0.5 && p.y == 0.5, || format!("point {p:?}"))?;
        ensure(
            r.refine.as_ref().and_then(|t| t.pixel_window) == Some(PixelBox::new(744., 244., 1256., 756.).unwrap()),
            || format!("crop window {:?}", r.refine.as_ref().and_then(|t| t.pixel_window)),
        )?;
        let want_conf = ((-1.2f64 - 0.9 - 1.5) / 3.0).exp();
        ensure(
            r.candidates.len() == 8 && r.candidates.iter().all(|c| (c.confidence - want_conf).abs() < 1e-12),
            || "logprob-derived confidence".into(),
        )?;

        let reqs = st.requests.lock().unwrap().clone();
        ensure(reqs.len() == 3, || {
            format!("{} requests (want 503 + retry + zoom)", reqs.len())
        })?;
        ensure(reqs[0] == reqs[1], || "retry changed the request".into())?;
        let g = &reqs[1];
        ensure(
            g["model"] == "scripted-vlm" && g["n"] == 8 && g["temperature"] == 0.9 && g["logprobs"] == true,
            || format!("sampling request fields: {g}"),
        )?;
        let content = g["messages"][0]["content"].as_array().ok_or("content parts")?;
        let url = content
            .iter()
            .find_map(|c| c["image_url"]["url"].as_str())
            .ok_or("no image part")?;
        let b64 = url.strip_prefix("data:image/png;base64,").ok_or("not a PNG data URI")?;
        let png = base64::engine::general_purpose::STANDARD
            .decode(b64)
            .map_err(|e| e.to_string())?;
        let sent = Screenshot::decode(&png).map_err(|e| e.to_string())?;
        ensure(sent.dims == img.dims, || "global image dims".into())?;
        ensure(
            content
                .iter()
                .any(|c| c["text"].as_str().is_some_and(|t| t.contains("click the save button"))),
            || "instruction missing from prompt".into(),
        )?;
        let z = &reqs[2];
        ensure(z["n"] == 1 && z["temperature"] == 0.0, || {
            format!("zoom request: n={} T={}", z["n"], z["temperature"])
        })?;
        let zurl = z["messages"][0]["content"]
            .as_array()
            .and_then(|a| a.iter().find_map(|c| c["image_url"]["url"].as_str()))
            .ok_or("zoom image")?;
        let zpng = base64::engine::general_purpose::STANDARD
            .decode(zurl.trim_start_matches("data:image/png;base64,"))
            .map_err(|e| e.to_string())?;
        let zdims = Screenshot::decode(&zpng).map_err(|e| e.to_string())?.dims;
        ensure((zdims.width, zdims.height) == (512, 512), || {
            format!("zoom image {zdims:?}")
        })?;
        Ok(format!(
            "503 retried, request shape ok, confidence from logprobs, final point {:?} exact",
            (p.x, p.y)
        ))
    })
}

fn live_mode_documentation(ds: &eval::Dataset) -> Check {
    let readme = std::fs::read_to_string(repo_root().join("README.md")).map_err(|e| e.to_string())?;
    ensure(readme.contains("61.80%") && readme.contains("UI-Venus-7B"), || {
        "README lacks the live reference operating point".into()
    })?;
    let grid = Grid::parse(&["tau=0.6,0.8,0.9,0.95,1.0,1.05"]).map_err(|e| e.to_string())?;
    let cells = runtime()
        .block_on(eval::sweep(
            ds,
            &mixed_config(),
            &grid,
            &MixedFactory { seed: 3 },
            EvalOptions::default(),
        ))
        .map_err(|e| e.to_string())?;
    for c in &cells {
        let v = serde_json::to_value(&c.report).map_err(|e| e.to_string())?;
        for side in ["pass", "zoom"] {
            ensure(v["routing"][side]["trigger_rate"].is_number(), || {
                format!("routing.{side} missing")
            })?;
        }
    }
    Ok("threshold-table report emitted for 6 tau values; tau=1.0, gamma=2.5 -> 61.80% documented, not asserted".into())
}

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mixed = write_mixed_dataset(dir.path());
    let checks: Vec<Criterion> = vec![
        ("formula oracle suite", true, Box::new(formula_suite)),
        ("variance identity", true, Box::new(variance_identity)),
        ("outlier filter", true, Box::new(outlier_filter)),
        ("crop coverage monte carlo", true, Box::new(crop_coverage)),
        (
            "routing monotonicity and endpoints",
            true,
            Box::new(|| routing_monotonicity(&mixed)),
        ),
        ("call budget", true, Box::new(call_budget)),
        ("map-back round trip", true, Box::new(map_back_round_trip)),
        ("end-to-end determinism", true, Box::new(determinism)),
        ("mock-server integration", true, Box::new(mock_server)),
        (
            "live-mode documentation (non-gating)",
            false,
            Box::new(|| live_mode_documentation(&mixed)),
        ),
    ];
    let mut failed = 0;
    println!();
    for (name, gating, check) in checks {
        let started = Instant::now();
        let outcome =
            std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.2}s]"),
            Err(detail) => {
                println!("FAIL  {name}: {detail} [{secs:.2}s]");
                if gating {
                    failed += 1;
                }
            }
        }
    }
    println!();
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
