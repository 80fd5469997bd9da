//! Procedural base images, deterministic annotation/degradation transforms,
//! and the manifest-backed on-disk corpus.
//!
//! Every annotation is a closed-form function of the image, so ground truth
//! for any sampled task is exact. Base images and annotations are quantized
//! onto the 8-bit grid, making PNG persistence lossless; degradations are
//! re-rendered online from the record seed and never persisted.

use crate::error::{ClozeError, Result};
use crate::image::{RasterImage, CHANNELS};
use crate::rng::{rng_from_seed, rng_substream, sample_normal};
use crate::taskgraph::{TaskSpec, IMAGE_NODE};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Annotation transform ids with a registered forward function.
pub const ANNOTATION_KINDS: [&str; 12] = [
    "edge",
    "grayscale",
    "invert",
    "posterize",
    "blur",
    "channel_swap",
    "vflip",
    "brighten",
    "downscale",
    "binary_mask",
    "stripes",
    "quantize2",
];

/// Online degradation ids.
pub const DEGRADATION_KINDS: [&str; 8] = [
    "noise",
    "salt_pepper",
    "box_blur",
    "masking",
    "darken",
    "gray",
    "rotate90",
    "elastic",
];

/// Sub-stream index reserved for degradation rendering.
const DEGRADE_STREAM: u64 = 0xD16;

pub fn is_annotation_kind(id: &str) -> bool {
    ANNOTATION_KINDS.contains(&id)
}

pub fn is_degradation_kind(id: &str) -> bool {
    DEGRADATION_KINDS.contains(&id)
}

// ---------------------------------------------------------------------------
// procedural scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Shape {
    Rect { x0: usize, y0: usize, w: usize, h: usize, color: [f32; 3] },
    Disc { cx: f32, cy: f32, r: f32, color: [f32; 3] },
    Stripes { x0: usize, y0: usize, w: usize, h: usize, period: usize, color: [f32; 3] },
}

/// Parameters behind a generated base image; also the source of the toy
/// content captions.
#[derive(Debug, Clone)]
pub struct SceneParams {
    pub background: [f32; 3],
    pub shapes: Vec<Shape>,
}

const COLOR_NAMES: [(&str, [f32; 3]); 10] = [
    ("black", [0.0, 0.0, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("gray", [0.5, 0.5, 0.5]),
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("orange", [1.0, 0.5, 0.0]),
];

fn nearest_color_name(rgb: [f32; 3]) -> &'static str {
    let mut best = COLOR_NAMES[0].0;
    let mut best_d = f32::INFINITY;
    for (name, c) in COLOR_NAMES {
        let d = (0..3).map(|i| (rgb[i] - c[i]) * (rgb[i] - c[i])).sum::<f32>();
        if d < best_d {
            best_d = d;
            best = name;
        }
    }
    best
}

impl SceneParams {
    /// Deterministic scene for (seed, size): 3-8 primitives on a solid
    /// background.
    pub fn generate(seed: u64, size: usize) -> SceneParams {
        let mut rng = rng_from_seed(seed);
        let background = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        let n_shapes = rng.gen_range(3..=8);
        let s = size as f32;
        let mut shapes = Vec::with_capacity(n_shapes);
        for _ in 0..n_shapes {
            let color = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
            match rng.gen_range(0..5) {
                0 | 1 => {
                    let w = rng.gen_range(size / 8..=size / 2).max(1);
                    let h = rng.gen_range(size / 8..=size / 2).max(1);
                    let x0 = rng.gen_range(0..(size - w).max(1));
                    let y0 = rng.gen_range(0..(size - h).max(1));
                    shapes.push(Shape::Rect { x0, y0, w, h, color });
                }
                2 | 3 => {
                    let r = rng.gen_range(s / 10.0..=s / 3.0);
                    let cx = rng.gen_range(0.0..s);
                    let cy = rng.gen_range(0.0..s);
                    shapes.push(Shape::Disc { cx, cy, r, color });
                }
                _ => {
                    let w = rng.gen_range(size / 4..size).max(2);
                    let h = rng.gen_range(size / 4..size).max(2);
                    let x0 = rng.gen_range(0..(size - w).max(1));
                    let y0 = rng.gen_range(0..(size - h).max(1));
                    let period = rng.gen_range(2..=(size / 4).max(2));
                    shapes.push(Shape::Stripes { x0, y0, w, h, period, color });
                }
            }
        }
        SceneParams { background, shapes }
    }

    /// Toy content caption, e.g. "3 rectangles, 1 disc, blue background".
    pub fn caption(&self) -> String {
        let (mut rects, mut discs, mut stripes) = (0usize, 0usize, 0usize);
        for s in &self.shapes {
            match s {
                Shape::Rect { .. } => rects += 1,
                Shape::Disc { .. } => discs += 1,
                Shape::Stripes { .. } => stripes += 1,
            }
        }
        let plural = |n: usize, s: &str, p: &str| if n == 1 { format!("1 {s}") } else { format!("{n} {p}") };
        let mut parts = Vec::new();
        if rects > 0 {
            parts.push(plural(rects, "rectangle", "rectangles"));
        }
        if discs > 0 {
            parts.push(plural(discs, "disc", "discs"));
        }
        if stripes > 0 {
            parts.push(plural(stripes, "stripe band", "stripe bands"));
        }
        parts.push(format!("{} background", nearest_color_name(self.background)));
        parts.join(", ")
    }

    fn render(&self, size: usize) -> RasterImage {
        let mut img = RasterImage::filled(size, size, self.background);
        for shape in &self.shapes {
            match *shape {
                Shape::Rect { x0, y0, w, h, color } => {
                    for y in y0..(y0 + h).min(size) {
                        for x in x0..(x0 + w).min(size) {
                            img.set_pixel(x, y, color);
                        }
                    }
                }
                Shape::Disc { cx, cy, r, color } => {
                    let r2 = r * r;
                    for y in 0..size {
                        for x in 0..size {
                            let dx = x as f32 + 0.5 - cx;
                            let dy = y as f32 + 0.5 - cy;
                            if dx * dx + dy * dy <= r2 {
                                img.set_pixel(x, y, color);
                            }
                        }
                    }
                }
                Shape::Stripes { x0, y0, w, h, period, color } => {
                    for y in y0..(y0 + h).min(size) {
                        if ((y - y0) / period) % 2 == 0 {
                            for x in x0..(x0 + w).min(size) {
                                img.set_pixel(x, y, color);
                            }
                        }
                    }
                }
            }
        }
        img.quantized()
    }
}

/// Deterministic procedural base image, quantized onto the 8-bit grid.
pub fn gen_base_image(seed: u64, size: usize) -> RasterImage {
    assert!(size >= 8, "image size must be >= 8");
    SceneParams::generate(seed, size).render(size)
}

/// Caption for the base image of `seed` at `size`.
pub fn content_caption(seed: u64, size: usize) -> String {
    SceneParams::generate(seed, size).caption()
}

// ---------------------------------------------------------------------------
// annotations (pure forward transforms)
// ---------------------------------------------------------------------------

fn sobel_edge(img: &RasterImage, tau: f32) -> RasterImage {
    let (w, h) = (img.width, img.height);
    let lum: Vec<f32> = (0..w * h).map(|i| img.luma_at(i % w, i / w)).collect();
    let at = |x: isize, y: isize| -> f32 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        lum[yc * w + xc]
    };
    let norm = 1.0 / (4.0 * std::f32::consts::SQRT_2);
    let mut out = RasterImage::new(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) - at(x - 1, y - 1))
                + 2.0 * (at(x + 1, y) - at(x - 1, y))
                + (at(x + 1, y + 1) - at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) - at(x - 1, y - 1))
                + 2.0 * (at(x, y + 1) - at(x, y - 1))
                + (at(x + 1, y + 1) - at(x + 1, y - 1));
            let mag = (gx * gx + gy * gy).sqrt() * norm;
            let v = if mag > tau { 1.0 } else { 0.0 };
            out.set_pixel(x as usize, y as usize, [v, v, v]);
        }
    }
    out
}

fn box_blur5(img: &RasterImage) -> RasterImage {
    let (w, h) = (img.width, img.height);
    let mut out = RasterImage::new(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = [0.0f32; 3];
            for dy in -2..=2 {
                for dx in -2..=2 {
                    let xc = (x + dx).clamp(0, w as isize - 1) as usize;
                    let yc = (y + dy).clamp(0, h as isize - 1) as usize;
                    let px = img.pixel(xc, yc);
                    for c in 0..3 {
                        acc[c] += px[c];
                    }
                }
            }
            out.set_pixel(x as usize, y as usize, [acc[0] / 25.0, acc[1] / 25.0, acc[2] / 25.0]);
        }
    }
    out
}

fn to_gray(img: &RasterImage) -> RasterImage {
    let mut out = RasterImage::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let l = img.luma_at(x, y);
            out.set_pixel(x, y, [l, l, l]);
        }
    }
    out
}

/// Applies a registered forward transform. Output has the source dimensions,
/// values on the 8-bit grid.
pub fn annotate(img: &RasterImage, kind: &str) -> Result<RasterImage> {
    let out = match kind {
        "edge" => sobel_edge(img, 0.25),
        "grayscale" => to_gray(img),
        "invert" => img.map(|v| 1.0 - v),
        "posterize" => img.map(|v| ((v * 4.0).floor().min(3.0)) / 3.0),
        "blur" => box_blur5(img),
        "channel_swap" => {
            let mut out = RasterImage::new(img.width, img.height);
            for y in 0..img.height {
                for x in 0..img.width {
                    let [r, g, b] = img.pixel(x, y);
                    out.set_pixel(x, y, [g, b, r]);
                }
            }
            out
        }
        "vflip" => {
            let mut out = RasterImage::new(img.width, img.height);
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set_pixel(x, y, img.pixel(x, img.height - 1 - y));
                }
            }
            out
        }
        "brighten" => img.map(|v| (v + 0.25).min(1.0)),
        "downscale" => {
            let mut out = RasterImage::new(img.width, img.height);
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set_pixel(x, y, img.pixel((x / 2) * 2, (y / 2) * 2));
                }
            }
            out
        }
        "binary_mask" => {
            let mut out = RasterImage::new(img.width, img.height);
            for y in 0..img.height {
                for x in 0..img.width {
                    let v = if img.luma_at(x, y) > 0.5 { 1.0 } else { 0.0 };
                    out.set_pixel(x, y, [v, v, v]);
                }
            }
            out
        }
        "stripes" => {
            let mut out = img.clone();
            for y in 0..img.height {
                if (y / 4) % 2 == 0 {
                    for x in 0..img.width {
                        let [r, g, b] = img.pixel(x, y);
                        out.set_pixel(x, y, [r * 0.5, g * 0.5, b * 0.5]);
                    }
                }
            }
            out
        }
        "quantize2" => img.map(|v| (v * 3.0).round() / 3.0),
        other => return Err(ClozeError::UnknownKind(other.to_string())),
    };
    Ok(out.quantized())
}

// ---------------------------------------------------------------------------
// degradations (seeded, re-rendered online)
// ---------------------------------------------------------------------------

/// Applies a degradation; deterministic given (kind, seed), output in [0,1].
pub fn degrade(img: &RasterImage, kind: &str, seed: u64) -> Result<RasterImage> {
    let mut rng = rng_substream(seed, DEGRADE_STREAM);
    let out = match kind {
        "noise" => {
            let mut out = img.clone();
            for v in out.data.iter_mut() {
                *v = (*v + 0.1 * sample_normal(&mut rng) as f32).clamp(0.0, 1.0);
            }
            out
        }
        "salt_pepper" => {
            let mut out = img.clone();
            for i in 0..img.width * img.height {
                if rng.gen::<f64>() < 0.05 {
                    let v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                    out.data[i * CHANNELS..(i + 1) * CHANNELS].fill(v);
                }
            }
            out
        }
        "box_blur" => box_blur5(img),
        "masking" => {
            let side_w = (img.width / 2).max(1);
            let side_h = (img.height / 2).max(1);
            let x0 = rng.gen_range(0..=img.width - side_w);
            let y0 = rng.gen_range(0..=img.height - side_h);
            let mut out = img.clone();
            for y in y0..y0 + side_h {
                for x in x0..x0 + side_w {
                    out.set_pixel(x, y, [0.0, 0.0, 0.0]);
                }
            }
            out
        }
        "darken" => img.map(|v| v * 0.5),
        "gray" => to_gray(img),
        "rotate90" => {
            if img.width != img.height {
                return Err(ClozeError::Image("rotate90 requires a square image".into()));
            }
            let n = img.width;
            let mut out = RasterImage::new(n, n);
            for y in 0..n {
                for x in 0..n {
                    out.set_pixel(x, y, img.pixel(y, n - 1 - x));
                }
            }
            out
        }
        "elastic" => {
            let amp = 2.0f32;
            let phase_x = rng.gen::<f32>() * std::f32::consts::TAU;
            let phase_y = rng.gen::<f32>() * std::f32::consts::TAU;
            let (w, h) = (img.width, img.height);
            let mut out = RasterImage::new(w, h);
            for y in 0..h {
                let dx = (amp * ((std::f32::consts::TAU * y as f32 / h as f32) + phase_x).sin())
                    .round() as isize;
                for x in 0..w {
                    let dy = (amp * ((std::f32::consts::TAU * x as f32 / w as f32) + phase_y).sin())
                        .round() as isize;
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    out.set_pixel(x, y, img.pixel(sx, sy));
                }
            }
            out
        }
        other => return Err(ClozeError::UnknownKind(other.to_string())),
    };
    Ok(out)
}

// ---------------------------------------------------------------------------
// corpus persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub annotations: Vec<String>,
    pub out_dir: PathBuf,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(ClozeError::Config("corpus count must be >= 1".into()));
        }
        if self.size < 8 {
            return Err(ClozeError::Config(format!("image size {} below minimum 8", self.size)));
        }
        for k in &self.annotations {
            if !is_annotation_kind(k) {
                return Err(ClozeError::Config(format!("no registered transform for kind `{k}`")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusRecord {
    pub seed: u64,
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusManifest {
    pub version: u32,
    pub image_size: usize,
    pub annotations: Vec<String>,
    pub records: Vec<CorpusRecord>,
}

impl CorpusManifest {
    pub fn base_seeds(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.seed).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CorpusManifest> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A loaded (conditions, target) pair for one corpus record and task.
#[derive(Debug, Clone)]
pub struct Sample {
    pub condition_images: Vec<RasterImage>,
    pub target_image: RasterImage,
}

/// Generates `count` records with their annotation files plus manifest.json.
/// Rebuilding with the same config reproduces identical bytes.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<CorpusManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let records: Vec<CorpusRecord> = (0..cfg.count)
        .into_par_iter()
        .map(|i| -> Result<CorpusRecord> {
            let seed = cfg.seed + i as u64;
            let base = gen_base_image(seed, cfg.size);
            let mut files = BTreeMap::new();
            let base_name = format!("{seed}_{IMAGE_NODE}.png");
            base.save_png(&cfg.out_dir.join(&base_name))?;
            files.insert(IMAGE_NODE.to_string(), base_name);
            for kind in &cfg.annotations {
                let ann = annotate(&base, kind)?;
                let name = format!("{seed}_{kind}.png");
                ann.save_png(&cfg.out_dir.join(&name))?;
                files.insert(kind.clone(), name);
            }
            Ok(CorpusRecord { seed, files })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest {
        version: 1,
        image_size: cfg.size,
        annotations: cfg.annotations.clone(),
        records,
    };
    manifest.save(&cfg.out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Resolves a node id to its ground-truth image for one record.
pub fn resolve_node(
    manifest: &CorpusManifest,
    dir: &Path,
    index: usize,
    node_id: &str,
) -> Result<RasterImage> {
    let record = manifest
        .records
        .get(index)
        .ok_or_else(|| ClozeError::Corpus(format!("record index {index} out of range")))?;
    if let Some(file) = record.files.get(node_id) {
        return RasterImage::load_png(&dir.join(file));
    }
    if is_degradation_kind(node_id) {
        let base_file = record
            .files
            .get(IMAGE_NODE)
            .ok_or_else(|| ClozeError::Corpus(format!("record {index} missing base image")))?;
        let base = RasterImage::load_png(&dir.join(base_file))?;
        return degrade(&base, node_id, record.seed);
    }
    Err(ClozeError::Corpus(format!(
        "record {index}: no stored annotation or degradation for node `{node_id}`"
    )))
}

/// Loads the condition images (in spec order) and the ground-truth target
/// for a record.
pub fn load_sample(
    manifest: &CorpusManifest,
    dir: &Path,
    index: usize,
    spec: &TaskSpec,
) -> Result<Sample> {
    let condition_images = spec
        .conditions
        .iter()
        .map(|c| resolve_node(manifest, dir, index, c))
        .collect::<Result<Vec<_>>>()?;
    let target_image = resolve_node(manifest, dir, index, &spec.target)?;
    Ok(Sample { condition_images, target_image })
}
