//! Center-surround saliency and the spatial sparsity mask.
//!
//! Saliency of a pixel at radius `r` is `|p - boxmean_r(p)|` over the
//! `(2r+1) x (2r+1)` window with edge-clamped coordinates. It is evaluated as
//! `|sum(p_j - p)| / n` so that flat regions score exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::video::{Dims, Mask, VideoTensor};

/// Default surround radii.
pub const DEFAULT_SCALES: [usize; 3] = [1, 2, 4];
/// Default salient-area ratio.
pub const DEFAULT_PHI: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub phi: f64,
    pub scales: Vec<usize>,
}

impl Default for SpatialParams {
    fn default() -> Self {
        Self { phi: DEFAULT_PHI, scales: DEFAULT_SCALES.to_vec() }
    }
}

impl SpatialParams {
    pub fn with_phi(phi: f64) -> Self {
        Self { phi, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        validate_phi(self.phi)?;
        if self.scales.is_empty() {
            return Err(invalid("saliency needs at least one scale"));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) || self.scales[0] == 0 {
            return Err(invalid("scales must be positive and strictly increasing"));
        }
        Ok(())
    }
}

fn validate_phi(phi: f64) -> Result<()> {
    if !(phi > 0.0 && phi <= 1.0) {
        return Err(invalid(format!("phi must lie in (0, 1], got {phi}")));
    }
    Ok(())
}

/// Per-frame saliency scores, laid out `(t, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    t: usize,
    w: usize,
    h: usize,
    scores: Vec<f64>,
}

impl SaliencyMap {
    pub fn frames(&self) -> usize {
        self.t
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.w * self.h;
        &self.scores[t * n..(t + 1) * n]
    }

    pub fn get(&self, t: usize, h: usize, w: usize) -> f64 {
        self.scores[(t * self.h + h) * self.w + w]
    }
}

/// Number of salient pixels kept per frame: `ceil(phi * W * H)`.
pub fn salient_count(phi: f64, frame_pixels: usize) -> usize {
    // The 1e-9 slack keeps exact products such as 0.7 * 1000 from rounding up.
    let k = (phi * frame_pixels as f64 - 1e-9).ceil() as usize;
    k.clamp(1, frame_pixels)
}

pub fn fine_grained_saliency(v: &VideoTensor, p: &SpatialParams) -> Result<SaliencyMap> {
    p.validate()?;
    let d = v.dims();
    let max_scale = *p.scales.last().expect("validated nonempty");
    if max_scale >= d.w.min(d.h) {
        return Err(invalid(format!(
            "scale radius {max_scale} must be below min(W, H) = {}",
            d.w.min(d.h)
        )));
    }
    let n = d.frame_pixels();
    let mut scores = vec![0.0; d.t * n];
    let mut gray = vec![0.0; n];
    for t in 0..d.t {
        let frame = v.frame(t);
        for (i, g) in gray.iter_mut().enumerate() {
            *g = frame[i * d.c..(i + 1) * d.c].iter().sum::<f64>() / d.c as f64;
        }
        let out = &mut scores[t * n..(t + 1) * n];
        for &r in &p.scales {
            accumulate_center_surround(&gray, d, r, out);
        }
    }
    Ok(SaliencyMap { t: d.t, w: d.w, h: d.h, scores })
}

fn accumulate_center_surround(gray: &[f64], d: Dims, r: usize, out: &mut [f64]) {
    let r = r as isize;
    let count = ((2 * r + 1) * (2 * r + 1)) as f64;
    let (hh, ww) = (d.h as isize, d.w as isize);
    for y in 0..hh {
        for x in 0..ww {
            let center = gray[(y * ww + x) as usize];
            let mut acc = 0.0;
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, hh - 1);
                let row = &gray[(yy * ww) as usize..((yy + 1) * ww) as usize];
                for dx in -r..=r {
                    acc += row[(x + dx).clamp(0, ww - 1) as usize] - center;
                }
            }
            out[(y * ww + x) as usize] += (acc / count).abs();
        }
    }
}

/// Binary `(h, w)` mask of the `ceil(phi * W * H)` most salient pixels in one frame.
/// Ties go to the earlier pixel in scan order.
pub fn frame_mask(map: &SaliencyMap, frame: usize, phi: f64) -> Result<Vec<u8>> {
    validate_phi(phi)?;
    if frame >= map.t {
        return Err(invalid(format!("frame {frame} out of range")));
    }
    let scores = map.frame(frame);
    let k = salient_count(phi, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps scan order among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut bits = vec![0u8; scores.len()];
    for &i in &order[..k] {
        bits[i] = 1;
    }
    Ok(bits)
}

/// `S(v, phi)`: per-frame salient regions broadcast over channels.
pub fn saliency_mask(v: &VideoTensor, p: &SpatialParams) -> Result<Mask> {
    let map = fine_grained_saliency(v, p)?;
    let d = v.dims();
    let mut bits = Vec::with_capacity(d.len());
    for t in 0..d.t {
        for b in frame_mask(&map, t, p.phi)? {
            bits.extend(std::iter::repeat_n(b, d.c));
        }
    }
    Mask::from_bits(d, bits)
}

/// Initial spatial mask: `S(x)` untargeted, `S(x) | S(x_hat)` targeted.
pub fn init_spatial_mask(x: &VideoTensor, x_hat: Option<&VideoTensor>, p: &SpatialParams) -> Result<Mask> {
    let base = saliency_mask(x, p)?;
    match x_hat {
        None => Ok(base),
        Some(xh) => {
            x.dims().ensure_same(&xh.dims())?;
            base.union(&saliency_mask(xh, p)?)
        }
    }
}
