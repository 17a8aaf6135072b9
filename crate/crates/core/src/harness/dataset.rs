//! Synthetic moving-shape videos.
//!
//! Class `k` draws one shape and moves it in one direction: square right,
//! circle left, triangle down, cross up. Position, size, speed, colors and
//! pixel noise are randomized per sample.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::video::{Dims, Label, VideoTensor};

pub const MANIFEST: &str = "manifest.csv";
pub const MAX_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Side length range of the shape's bounding box, in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Speed range in pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Intensity ranges of shape and background colors.
    pub foreground: [f64; 2],
    pub background: [f64; 2],
    pub noise: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 250,
            frames: 16,
            width: 32,
            height: 32,
            channels: 3,
            min_size: 7,
            max_size: 11,
            min_speed: 0.5,
            max_speed: 1.0,
            foreground: [0.55, 0.95],
            background: [0.05, 0.35],
            noise: 0.03,
            train_fraction: 0.7,
            seed: 2024,
        }
    }
}

impl DatasetSpec {
    pub fn dims(&self) -> Result<Dims> {
        Dims::new(self.frames, self.width, self.height, self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        if !(1..=MAX_CLASSES).contains(&self.classes) {
            return Err(invalid(format!("classes must lie in 1..={MAX_CLASSES}")));
        }
        if self.frames < 2 || self.per_class == 0 {
            return Err(invalid("need at least two frames and one sample per class"));
        }
        if self.min_size < 3 || self.min_size > self.max_size {
            return Err(invalid("shape size range is invalid"));
        }
        let travel = self.max_speed * (self.frames - 1) as f64;
        if self.max_size as f64 + travel + 1.0 > self.width.min(self.height) as f64 {
            return Err(invalid("shapes cannot travel that far inside the frame"));
        }
        if !(self.min_speed > 0.0 && self.min_speed <= self.max_speed) || !(self.noise >= 0.0) {
            return Err(invalid("speed range or noise level is invalid"));
        }
        for [lo, hi] in [self.foreground, self.background] {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(invalid("color ranges must be ordered subranges of [0, 1]"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(invalid("train fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Number of training samples per class; the rest go to the test split.
    pub fn train_per_class(&self) -> usize {
        ((self.per_class as f64 * self.train_fraction).round() as usize).clamp(1, self.per_class)
    }
}

/// Whether pixel `(px, py)` lies inside the class shape with top-left corner
/// `(x0, y0)` and side `s`.
pub fn inside(class: usize, px: f64, py: f64, x0: f64, y0: f64, s: f64) -> bool {
    let (u, v) = (px - x0, py - y0);
    if u < 0.0 || v < 0.0 || u >= s || v >= s {
        return false;
    }
    let c = (s - 1.0) / 2.0;
    match class {
        0 => true,
        1 => (u - c).powi(2) + (v - c).powi(2) <= (s / 2.0).powi(2),
        // Apex at the top, base along the bottom row.
        2 => (u - c).abs() <= v / 2.0 + 0.5,
        _ => (u - c).abs() <= s / 6.0 || (v - c).abs() <= s / 6.0,
    }
}

/// Unit motion vector `(dx, dy)` of a class.
pub fn motion(class: usize) -> (f64, f64) {
    match class {
        0 => (1.0, 0.0),
        1 => (-1.0, 0.0),
        2 => (0.0, 1.0),
        _ => (0.0, -1.0),
    }
}

/// Noise-free parameters of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub class: usize,
    pub size: usize,
    pub x0: f64,
    pub y0: f64,
    pub speed: f64,
    pub fg: [f64; 3],
    pub bg: [f64; 3],
}

impl Scene {
    fn sample(spec: &DatasetSpec, class: usize, rng: &mut ChaCha8Rng) -> Scene {
        let size = rng.gen_range(spec.min_size..=spec.max_size);
        let speed = rng.gen_range(spec.min_speed..=spec.max_speed);
        let travel = speed * (spec.frames - 1) as f64;
        let (dx, dy) = motion(class);
        let span = |extent: usize, d: f64| -> (f64, f64) {
            let room = extent as f64 - size as f64 - travel * d.abs();
            let lo = if d < 0.0 { travel } else { 0.0 };
            (lo, lo + room.max(0.0))
        };
        let (xl, xh) = span(spec.width, dx);
        let (yl, yh) = span(spec.height, dy);
        let x0 = rng.gen_range(xl..=xh).floor();
        let y0 = rng.gen_range(yl..=yh).floor();
        let mut fg = [0.0; 3];
        let mut bg = [0.0; 3];
        for c in 0..3 {
            fg[c] = rng.gen_range(spec.foreground[0]..spec.foreground[1]);
            bg[c] = rng.gen_range(spec.background[0]..spec.background[1]);
        }
        Scene { class, size, x0, y0, speed, fg, bg }
    }

    /// Top-left corner of the shape in frame `t`.
    pub fn corner(&self, t: usize) -> (f64, f64) {
        let (dx, dy) = motion(self.class);
        let step = (self.speed * t as f64).round();
        (self.x0 + dx * step, self.y0 + dy * step)
    }

    /// Noise-free render.
    pub fn render(&self, dims: Dims) -> VideoTensor {
        let mut v = VideoTensor::zeros(dims);
        for t in 0..dims.t {
            let (cx, cy) = self.corner(t);
            for h in 0..dims.h {
                for w in 0..dims.w {
                    let on = inside(self.class, w as f64, h as f64, cx, cy, self.size as f64);
                    for c in 0..dims.c {
                        v.set(t, h, w, c, if on { self.fg[c % 3] } else { self.bg[c % 3] });
                    }
                }
            }
        }
        v
    }
}

/// One generated sample with its noise-free scene.
#[derive(Debug, Clone)]
pub struct Sample {
    pub video: VideoTensor,
    pub label: Label,
    pub scene: Scene,
}

/// Generates `per_class` samples for every class, class-major, deterministic in `spec.seed`.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let dims = spec.dims()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).map_err(|e| invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        for _ in 0..spec.per_class {
            let scene = Scene::sample(spec, class, &mut rng);
            let mut video = scene.render(dims);
            if spec.noise > 0.0 {
                for v in video.as_mut_slice() {
                    *v = (*v + rng.sample(noise)).clamp(0.0, 1.0);
                }
            }
            video.round_to_f32();
            out.push(Sample { video, label: Label(class), scene });
        }
    }
    Ok(out)
}

/// A row of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub split: String,
    pub file: String,
    pub label: Label,
}

/// Writes `train/` and `test/` `.vid` files and a manifest; returns the manifest rows.
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<Entry>> {
    let samples = generate(spec)?;
    let n_train = spec.train_per_class();
    fs::create_dir_all(dir.join("train"))?;
    fs::create_dir_all(dir.join("test"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let within = i % spec.per_class;
        let split = if within < n_train { "train" } else { "test" };
        let file = format!("{split}/c{}_{within:04}.vid", s.label.0);
        s.video.write_vid(dir.join(&file))?;
        entries.push(Entry { split: split.to_string(), file, label: s.label });
    }
    let mut manifest = String::from("split,file,label\n");
    for e in &entries {
        manifest.push_str(&format!("{},{},{}\n", e.split, e.file, e.label.0));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<Entry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let [split, file, label] = parts[..] else {
            return Err(Error::Format(format!("manifest line {} has {} fields", n + 1, parts.len())));
        };
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("manifest line {}: bad label {label:?}", n + 1)))?;
        out.push(Entry { split: split.to_string(), file: file.to_string(), label: Label(label) });
    }
    Ok(out)
}

/// A loaded video with its label and manifest path.
#[derive(Debug, Clone)]
pub struct Item {
    pub name: String,
    pub video: VideoTensor,
    pub label: Label,
}

/// Loads every video of `split` in manifest order.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Item>> {
    read_manifest(dir)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let path: PathBuf = dir.join(&e.file);
            Ok(Item { name: e.file, video: VideoTensor::read_vid(&path)?, label: e.label })
        })
        .collect()
}

pub fn pairs(items: &[Item]) -> Vec<(VideoTensor, Label)> {
    items.iter().map(|i| (i.video.clone(), i.label)).collect()
}
