//! Attack evaluation metrics: fooling rate, queries, MAP, sparsity, time.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::video::{Mask, VideoTensor};

/// Mean per-pixel perturbation magnitude on the 0-255 scale. Each pixel's
/// magnitude is the Euclidean norm of its channel vector.
pub fn map_score(perturbation: &VideoTensor) -> f64 {
    let d = perturbation.dims();
    let total: f64 = perturbation
        .as_slice()
        .chunks_exact(d.c)
        .map(|px| px.iter().map(|v| (v * 255.0).powi(2)).sum::<f64>().sqrt())
        .sum();
    total / d.pixels() as f64
}

/// Retained frames of `mask` with their unmasked fraction.
pub fn frame_ratios(mask: &Mask) -> Vec<(usize, f64)> {
    let d = mask.dims();
    (0..d.t)
        .filter(|&f| !mask.is_frame_zero(f))
        .map(|f| (f, mask.frame_ones(f) as f64 / d.frame_len() as f64))
        .collect()
}

/// `S = 1 - (1/T) sum phi_i` over the retained frames.
pub fn sparsity_score(frames: usize, ratios: &[(usize, f64)]) -> Result<f64> {
    if frames == 0 {
        return Err(invalid("video has no frames"));
    }
    let mut sum = 0.0;
    for &(f, phi) in ratios {
        if f >= frames {
            return Err(invalid(format!("frame {f} out of range for {frames} frames")));
        }
        if !(phi > 0.0 && phi <= 1.0) {
            return Err(invalid(format!("frame ratio {phi} outside (0, 1]")));
        }
        sum += phi;
    }
    Ok(1.0 - sum / frames as f64)
}

pub fn mask_sparsity(mask: &Mask) -> f64 {
    sparsity_score(mask.dims().t, &frame_ratios(mask)).expect("ratios measured from a mask are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub fooled: bool,
    pub queries: u64,
    pub map: f64,
    pub sparsity: f64,
    pub wall_seconds: f64,
}

/// One row of the results table. `sparsity_pct` and `fooling_rate` are percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub attacks: usize,
    pub fooling_rate: f64,
    pub mean_queries: f64,
    pub mean_map: f64,
    pub sparsity_pct: f64,
    pub mean_seconds: f64,
}

pub fn aggregate(records: &[MetricsRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(invalid("no records to aggregate"));
    }
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(Summary {
        attacks: records.len(),
        fooling_rate: 100.0 * records.iter().filter(|r| r.fooled).count() as f64 / n,
        mean_queries: mean(&|r| r.queries as f64),
        mean_map: mean(&|r| r.map),
        sparsity_pct: 100.0 * mean(&|r| r.sparsity),
        mean_seconds: mean(&|r| r.wall_seconds),
    })
}
