//! Procedural road-marking glyph corpus: deterministic rendering of the
//! ten classes, the blur/warp/noise corruption model, the stratified
//! 60/40 split, and ingestion of externally provided crops.
//!
//! Images on disk are always the clean renders; the corruption recorded in
//! the manifest (parameters plus per-sample seed) is reapplied on load, so
//! `(counts, corruption, seed)` determine every byte of a corpus and a
//! written corpus round-trips losslessly through [`ingest_external`].

use crate::pgm::{self, PgmError};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Patch side length used throughout the corpus.
pub const PATCH: usize = 32;

/// Class order is fixed; NULL is always last.
pub const CLASS_NAMES: [&str; 10] =
    ["35", "40", "FORWARD", "LEFT", "PED", "RAIL", "RIGHT", "STOP", "XING", "NULL"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();
pub const NULL_CLASS: usize = 9;

/// Default per-class instance counts (original benchmark sizes).
pub const DEFAULT_COUNTS: [usize; NUM_CLASSES] = [112, 69, 86, 705, 54, 90, 101, 49, 64, 2700];

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == name)
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("class {0} requires at least one sample")]
    EmptyClass(usize),
    #[error("corruption parameter {name} = {value} outside {range}")]
    BadCorruption { name: &'static str, value: f64, range: &'static str },
    #[error("{file} line {line}: {reason}")]
    MalformedRow { file: String, line: usize, reason: String },
    #[error("{file} line {line}: unknown label {label:?}")]
    BadLabel { file: String, line: usize, label: String },
    #[error("{file} line {line}: image file {image} does not exist")]
    MissingImage { file: String, line: usize, image: String },
    #[error("manifest {0} has no header row")]
    MissingHeader(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

// ── glyph geometry ───────────────────────────────────────────────────

type Polyline = Vec<(f64, f64)>;

/// Stroke skeletons in a unit box, x right, y down.
fn letter_strokes(ch: char) -> Vec<Polyline> {
    let pl = |pts: &[(f64, f64)]| pts.to_vec();
    match ch {
        'S' | '5' => vec![pl(&[(0.9, 0.05), (0.1, 0.05), (0.1, 0.5), (0.9, 0.5), (0.9, 0.95), (0.1, 0.95)])],
        'T' => vec![pl(&[(0.1, 0.05), (0.9, 0.05)]), pl(&[(0.5, 0.05), (0.5, 0.95)])],
        'O' | '0' => vec![pl(&[(0.1, 0.05), (0.9, 0.05), (0.9, 0.95), (0.1, 0.95), (0.1, 0.05)])],
        'P' => vec![pl(&[(0.1, 0.95), (0.1, 0.05), (0.9, 0.05), (0.9, 0.5), (0.1, 0.5)])],
        'E' => vec![
            pl(&[(0.9, 0.05), (0.1, 0.05), (0.1, 0.95), (0.9, 0.95)]),
            pl(&[(0.1, 0.5), (0.7, 0.5)]),
        ],
        'D' => vec![
            pl(&[(0.1, 0.05), (0.1, 0.95)]),
            pl(&[(0.1, 0.05), (0.6, 0.05), (0.9, 0.3), (0.9, 0.7), (0.6, 0.95), (0.1, 0.95)]),
        ],
        'X' => vec![pl(&[(0.1, 0.05), (0.9, 0.95)]), pl(&[(0.9, 0.05), (0.1, 0.95)])],
        'I' => vec![
            pl(&[(0.3, 0.05), (0.7, 0.05)]),
            pl(&[(0.5, 0.05), (0.5, 0.95)]),
            pl(&[(0.3, 0.95), (0.7, 0.95)]),
        ],
        'N' => vec![pl(&[(0.1, 0.95), (0.1, 0.05), (0.9, 0.95), (0.9, 0.05)])],
        'G' => vec![pl(&[
            (0.9, 0.15),
            (0.5, 0.05),
            (0.1, 0.2),
            (0.1, 0.8),
            (0.5, 0.95),
            (0.9, 0.85),
            (0.9, 0.55),
            (0.55, 0.55),
        ])],
        'R' => vec![
            pl(&[(0.1, 0.95), (0.1, 0.05), (0.9, 0.05), (0.9, 0.5), (0.1, 0.5)]),
            pl(&[(0.4, 0.5), (0.9, 0.95)]),
        ],
        'A' => vec![
            pl(&[(0.1, 0.95), (0.5, 0.05), (0.9, 0.95)]),
            pl(&[(0.25, 0.62), (0.75, 0.62)]),
        ],
        'L' => vec![pl(&[(0.1, 0.05), (0.1, 0.95), (0.9, 0.95)])],
        '3' => vec![
            pl(&[(0.1, 0.05), (0.9, 0.05), (0.9, 0.95), (0.1, 0.95)]),
            pl(&[(0.25, 0.5), (0.9, 0.5)]),
        ],
        '4' => vec![pl(&[(0.7, 0.95), (0.7, 0.05), (0.1, 0.6), (0.9, 0.6)])],
        _ => panic!("letter {ch:?} not in the corpus font"),
    }
}

/// Strokes for a full glyph class in the unit box.
fn class_strokes(class: usize) -> Vec<Polyline> {
    let word = |text: &str, y0: f64, y1: f64| -> Vec<Polyline> {
        let n = text.chars().count() as f64;
        let mut out = Vec::new();
        for (i, ch) in text.chars().enumerate() {
            let x0 = i as f64 / n + 0.015;
            let x1 = (i as f64 + 1.0) / n - 0.015;
            for line in letter_strokes(ch) {
                out.push(
                    line.into_iter()
                        .map(|(x, y)| (x0 + x * (x1 - x0), y0 + y * (y1 - y0)))
                        .collect(),
                );
            }
        }
        out
    };
    match CLASS_NAMES[class] {
        "35" => word("35", 0.12, 0.88),
        "40" => word("40", 0.12, 0.88),
        "FORWARD" => vec![
            vec![(0.5, 0.92), (0.5, 0.08)],
            vec![(0.22, 0.4), (0.5, 0.08), (0.78, 0.4)],
        ],
        "RIGHT" => vec![
            vec![(0.08, 0.5), (0.92, 0.5)],
            vec![(0.6, 0.18), (0.92, 0.5), (0.6, 0.82)],
        ],
        "LEFT" => unreachable!("LEFT renders as a mirrored RIGHT"),
        "PED" => word("PED", 0.28, 0.72),
        "RAIL" => word("RAIL", 0.3, 0.7),
        "STOP" => word("STOP", 0.3, 0.7),
        "XING" => word("XING", 0.3, 0.7),
        "NULL" => Vec::new(),
        other => unreachable!("unknown class {other}"),
    }
}

// ── rendering ────────────────────────────────────────────────────────

/// Per-sample style jitter, derived deterministically from the seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphStyle {
    /// Stroke width in pixels.
    pub stroke_width: f64,
    /// Glyph extent relative to the patch.
    pub scale: f64,
    /// Rotation in radians, within ±10 degrees.
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphSpec {
    pub class: usize,
    pub seed: u64,
    pub style: GlyphStyle,
}

impl GlyphSpec {
    /// Canonical spec: style drawn from the seed so a `(class, seed)` pair
    /// pins the rendering completely.
    pub fn from_seed(class: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let style = GlyphStyle {
            stroke_width: rng.gen_range(2.0..2.8),
            scale: rng.gen_range(0.78..0.95),
            rotation: rng.gen_range(-10.0f64.to_radians()..10.0f64.to_radians()),
        };
        GlyphSpec { class, seed, style }
    }
}

fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Renders one deterministic 32×32 grayscale patch: bright painted strokes
/// over textured dark background; NULL patches are texture only (with a
/// few faint smudge streaks). LEFT is the pixel-exact horizontal mirror of
/// RIGHT under the same seed.
pub fn render_glyph(spec: &GlyphSpec) -> Tensor {
    if CLASS_NAMES[spec.class] == "LEFT" {
        let mirrored = GlyphSpec {
            class: class_index("RIGHT").expect("RIGHT exists"),
            ..spec.clone()
        };
        let img = render_glyph(&mirrored);
        let mut data = img.into_data();
        for row in data.chunks_mut(PATCH) {
            row.reverse();
        }
        return Tensor::new(vec![1, PATCH, PATCH], data).expect("sized");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = PATCH as f64;

    // Smooth asphalt-like background: base level plus a gentle gradient.
    // Kept noise-free so a restorer can in principle reproduce the clean
    // patch exactly; stochastic grain enters through the corruption model.
    let base: f64 = rng.gen_range(0.13..0.27);
    let grad_x: f64 = rng.gen_range(-0.06..0.06);
    let grad_y: f64 = rng.gen_range(-0.06..0.06);
    let mut img: Vec<f64> = (0..PATCH * PATCH)
        .map(|i| {
            let x = (i % PATCH) as f64 / (PATCH as f64 - 1.0) - 0.5;
            let y = (i / PATCH) as f64 / (PATCH as f64 - 1.0) - 0.5;
            (base + grad_x * x + grad_y * y).clamp(0.0, 1.0)
        })
        .collect();

    let mut paint_segment = |img: &mut [f64], a: (f64, f64), b: (f64, f64), width: f64, delta: f64| {
        for y in 0..PATCH {
            for x in 0..PATCH {
                let d = dist_to_segment(x as f64 + 0.5, y as f64 + 0.5, a, b);
                let cov = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                img[y * PATCH + x] = (img[y * PATCH + x] + delta * cov).clamp(0.0, 1.0);
            }
        }
    };

    let is_null = CLASS_NAMES[spec.class] == "NULL";
    if is_null {
        // Bare road-surface clutter: dark seams, shadow blobs and short
        // bright paint fragments. Varied and high-contrast, so NULL
        // patches are genuinely hard to reproduce for a restorer trained
        // on road markings, while staying dimmer than any glyph patch.
        let seams = rng.gen_range(2..=4);
        for _ in 0..seams {
            let a = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
            let b = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
            let width = rng.gen_range(1.0..3.0);
            let delta = -rng.gen_range(0.16..0.38);
            paint_segment(&mut img, a, b, width, delta);
        }
        let blobs = rng.gen_range(0..=2);
        for _ in 0..blobs {
            let cx = rng.gen_range(0.0..side);
            let cy = rng.gen_range(0.0..side);
            let radius: f64 = rng.gen_range(2.0..5.0);
            let delta = -rng.gen_range(0.12..0.30);
            for y in 0..PATCH {
                for x in 0..PATCH {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let d = (dx * dx + dy * dy).sqrt();
                    let cov = (radius + 0.5 - d).clamp(0.0, 1.0);
                    img[y * PATCH + x] = (img[y * PATCH + x] + delta * cov).clamp(0.0, 1.0);
                }
            }
        }
        let fragments = rng.gen_range(0..=2);
        for _ in 0..fragments {
            let a = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let len: f64 = rng.gen_range(3.0..8.0);
            let b = (a.0 + angle.cos() * len, a.1 + angle.sin() * len);
            let width = rng.gen_range(1.0..2.2);
            let delta = rng.gen_range(0.22..0.42);
            paint_segment(&mut img, a, b, width, delta);
        }
        // Hard negatives: crops that clip a neighboring marking show a
        // worn partial glyph at the border, the classic false-positive
        // candidate a proposal stage produces.
        if rng.gen_range(0..10) < 6 {
            let frag_class = rng.gen_range(0..NUM_CLASSES - 1);
            let strokes = if CLASS_NAMES[frag_class] == "LEFT" {
                // Mirror RIGHT for the fragment, same as full renders.
                class_strokes(class_index("RIGHT").expect("RIGHT exists"))
                    .into_iter()
                    .map(|line| line.into_iter().map(|(x, y)| (1.0 - x, y)).collect())
                    .collect()
            } else {
                class_strokes(frag_class)
            };
            let paint_delta: f64 = rng.gen_range(0.25..0.34);
            let scale: f64 = rng.gen_range(0.8..0.95);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let shift: f64 = rng.gen_range(14.0..17.0);
            let (cx, cy) = (
                side / 2.0 + theta.cos() * shift,
                side / 2.0 + theta.sin() * shift,
            );
            let width: f64 = rng.gen_range(1.6..2.4);
            for line in strokes {
                for pair in line.windows(2) {
                    let to_px = |(x, y): (f64, f64)| {
                        (cx + (x - 0.5) * scale * side, cy + (y - 0.5) * scale * side)
                    };
                    paint_segment(&mut img, to_px(pair[0]), to_px(pair[1]), width, paint_delta);
                }
            }
        }
    } else {
        // Positives carry only faint wear marks.
        let smudges = rng.gen_range(0..=3);
        for _ in 0..smudges {
            let a = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
            let b = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
            let width = rng.gen_range(0.8..2.0);
            let delta = rng.gen_range(-0.10..0.10);
            paint_segment(&mut img, a, b, width, delta);
        }
    }

    if CLASS_NAMES[spec.class] != "NULL" {
        let paint: f64 = rng.gen_range(0.82..0.95);
        let (jx, jy) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
        let (sin, cos) = spec.style.rotation.sin_cos();
        let to_px = |(x, y): (f64, f64)| -> (f64, f64) {
            // Center, scale, rotate, then place on the patch.
            let (cx, cy) = (x - 0.5, y - 0.5);
            let (sx, sy) = (cx * spec.style.scale, cy * spec.style.scale);
            let (rx, ry) = (sx * cos - sy * sin, sx * sin + sy * cos);
            ((0.5 + jx + rx) * side, (0.5 + jy + ry) * side)
        };
        let mut segments = Vec::new();
        for line in class_strokes(spec.class) {
            for pair in line.windows(2) {
                segments.push((to_px(pair[0]), to_px(pair[1])));
            }
        }
        let w = spec.style.stroke_width;
        for y in 0..PATCH {
            for x in 0..PATCH {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut cov: f64 = 0.0;
                for &(a, b) in &segments {
                    let d = dist_to_segment(px, py, a, b);
                    cov = cov.max((w / 2.0 + 0.5 - d).clamp(0.0, 1.0));
                    if cov == 1.0 {
                        break;
                    }
                }
                let v = &mut img[y * PATCH + x];
                *v += (paint - *v) * cov;
            }
        }
    }

    Tensor::new(vec![1, PATCH, PATCH], img).expect("sized")
}

// ── corruption ───────────────────────────────────────────────────────

/// Blur, perspective and additive-noise strengths for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionParams {
    /// Gaussian blur standard deviation in pixels.
    pub blur_sigma: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Perspective warp strength in [0, 0.3].
    pub perspective_strength: f64,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        CorruptionParams { blur_sigma: 1.6, noise_sigma: 0.18, perspective_strength: 0.05 }
    }
}

impl CorruptionParams {
    pub const NONE: CorruptionParams =
        CorruptionParams { blur_sigma: 0.0, noise_sigma: 0.0, perspective_strength: 0.0 };

    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.blur_sigma >= 0.0) || !self.blur_sigma.is_finite() {
            return Err(CorpusError::BadCorruption {
                name: "blur_sigma",
                value: self.blur_sigma,
                range: ">= 0",
            });
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(CorpusError::BadCorruption {
                name: "noise_sigma",
                value: self.noise_sigma,
                range: ">= 0",
            });
        }
        if !(0.0..=0.3).contains(&self.perspective_strength) {
            return Err(CorpusError::BadCorruption {
                name: "perspective_strength",
                value: self.perspective_strength,
                range: "[0, 0.3]",
            });
        }
        Ok(())
    }
}

fn gaussian_blur(img: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64) * (i as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    kernel.iter_mut().for_each(|v| *v /= sum);

    // Horizontal then vertical pass, zero padding.
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let xi = x as isize + ki as isize - radius;
                if xi >= 0 && (xi as usize) < w {
                    acc += img[y * w + xi as usize] * kv;
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let yi = y as isize + ki as isize - radius;
                if yi >= 0 && (yi as usize) < h {
                    acc += tmp[yi as usize * w + x] * kv;
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn bilinear_at(img: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    // Clamp-to-edge sampling at pixel centers.
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bot = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn perspective_warp(img: &[f64], w: usize, h: usize, strength: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Mild random homography: small affine jitter plus projective terms,
    // applied by inverse mapping with bilinear resampling.
    let s = strength;
    let a: f64 = rng.gen_range(-0.12 * s..0.12 * s);
    let b: f64 = rng.gen_range(-0.12 * s..0.12 * s);
    let c: f64 = rng.gen_range(-0.12 * s..0.12 * s);
    let d: f64 = rng.gen_range(-0.12 * s..0.12 * s);
    let tx: f64 = rng.gen_range(-1.5 * s..1.5 * s);
    let ty: f64 = rng.gen_range(-1.5 * s..1.5 * s);
    let e: f64 = rng.gen_range(-0.01 * s..0.01 * s) / w as f64;
    let f: f64 = rng.gen_range(-0.01 * s..0.01 * s) / h as f64;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (ux, uy) = (x as f64 - cx, y as f64 - cy);
            let denom = 1.0 + e * ux + f * uy;
            let sx = ((1.0 + a) * ux + b * uy + tx) / denom + cx;
            let sy = (c * ux + (1.0 + d) * uy + ty) / denom + cy;
            out[y * w + x] = bilinear_at(img, w, h, sx, sy);
        }
    }
    out
}

/// Applies blur, then perspective warp, then additive Gaussian noise, and
/// clips to [0,1]. All-zero parameters return the input unchanged.
pub fn corrupt(clean: &Tensor, params: &CorruptionParams, seed: u64) -> Tensor {
    let shape = clean.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc2b2_ae3d_27d4_eb4f);
    let mut img = clean.data().to_vec();
    if params.blur_sigma > 0.0 {
        img = gaussian_blur(&img, w, h, params.blur_sigma);
    }
    if params.perspective_strength > 0.0 {
        img = perspective_warp(&img, w, h, params.perspective_strength, &mut rng);
    }
    if params.noise_sigma > 0.0 {
        for v in img.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v + params.noise_sigma * n).clamp(0.0, 1.0);
        }
    }
    Tensor::new(shape, img).expect("same size")
}

// ── samples, manifest, corpus ────────────────────────────────────────

/// One training/test sample: the clean reference, its corrupted view, the
/// class label and whether it is a (non-NULL) positive.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub clean: Tensor,
    pub corrupted: Tensor,
    pub label: usize,
    pub is_positive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub id: String,
    pub rel_path: String,
    pub label: usize,
    pub split: Split,
    pub corruption: CorruptionParams,
    pub seed: u64,
}

/// Manifest of one corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tpath\tlabel\tsplit\tblur_sigma\tnoise_sigma\tperspective_strength\tseed";

impl CorpusIndex {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn class_counts(&self, split: Option<Split>) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for row in &self.rows {
            if split.map_or(true, |s| s == row.split) {
                counts[row.label] += 1;
            }
        }
        counts
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_NAME)
    }

    pub fn write_manifest(&self) -> Result<(), CorpusError> {
        let path = self.manifest_path();
        let mut out = String::new();
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                row.id,
                row.rel_path,
                CLASS_NAMES[row.label],
                row.split,
                row.corruption.blur_sigma,
                row.corruption.noise_sigma,
                row.corruption.perspective_strength,
                row.seed,
            ));
        }
        let mut file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| io_err(&path, e))
    }

    /// Loads samples, optionally restricted to one split. Clean images come
    /// from disk (resized to the patch size if needed); the corrupted view
    /// is regenerated from the recorded parameters and per-sample seed.
    pub fn load_samples(&self, split: Option<Split>) -> Result<Vec<LabeledSample>, CorpusError> {
        let mut out = Vec::new();
        for row in &self.rows {
            if let Some(s) = split {
                if s != row.split {
                    continue;
                }
            }
            let path = self.root.join(&row.rel_path);
            let (w, h, mut pixels) = pgm::read_pgm(&path)?;
            if (w, h) != (PATCH, PATCH) {
                pixels = resize_bilinear(&pixels, w, h, PATCH, PATCH);
            }
            let clean = Tensor::new(vec![1, PATCH, PATCH], pixels).expect("sized");
            let corrupted = corrupt(&clean, &row.corruption, row.seed);
            out.push(LabeledSample {
                clean,
                corrupted,
                label: row.label,
                is_positive: row.label != NULL_CLASS,
            });
        }
        Ok(out)
    }
}

/// Bilinear resize with edge clamping.
pub fn resize_bilinear(src: &[f64], w: usize, h: usize, dw: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; dw * dh];
    for y in 0..dh {
        for x in 0..dw {
            let sx = (x as f64 + 0.5) * w as f64 / dw as f64 - 0.5;
            let sy = (y as f64 + 0.5) * h as f64 / dh as f64 - 0.5;
            out[y * dw + x] = bilinear_at(src, w, h, sx, sy);
        }
    }
    out
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Renders, corrupts and writes a full synthetic corpus with a stratified
/// 60/40 train/test split per class.
pub fn make_corpus(
    counts: &[usize; NUM_CLASSES],
    corruption: &CorruptionParams,
    seed: u64,
    out_dir: &Path,
) -> Result<CorpusIndex, CorpusError> {
    corruption.validate()?;
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(CorpusError::EmptyClass(class));
        }
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;

    let mut rows = Vec::new();
    let mut global = 0u64;
    for (class, &count) in counts.iter().enumerate() {
        // Stratified split: shuffle in-class indices, first 60% to train.
        let mut order: Vec<usize> = (0..count).collect();
        let mut split_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (class as u64 + 1)));
        for i in (1..order.len()).rev() {
            let j = split_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let train_count = ((count as f64) * 0.6).round() as usize;
        let mut split_of = vec![Split::Test; count];
        for &idx in order.iter().take(train_count) {
            split_of[idx] = Split::Train;
        }

        for i in 0..count {
            let sample_seed = splitmix64(seed ^ (global + 1).wrapping_mul(0x2545_f491_4f6c_dd1d));
            global += 1;
            let id = format!("{}_{:05}", CLASS_NAMES[class].to_lowercase(), i);
            let rel_path = format!("images/{id}.pgm");
            let spec = GlyphSpec::from_seed(class, sample_seed);
            let clean = render_glyph(&spec);
            pgm::write_pgm(&out_dir.join(&rel_path), PATCH, PATCH, clean.data())?;
            rows.push(ManifestRow {
                id,
                rel_path,
                label: class,
                split: split_of[i],
                corruption: *corruption,
                seed: sample_seed,
            });
        }
    }
    let index = CorpusIndex { root: out_dir.to_path_buf(), rows };
    index.write_manifest()?;
    Ok(index)
}

/// Reads a manifest produced by this tool or by an external labeling step;
/// rows must reference existing image files. Images of any size are
/// accepted and resized on load.
pub fn ingest_external(dir: &Path, manifest_file: &Path) -> Result<CorpusIndex, CorpusError> {
    let filename = manifest_file.display().to_string();
    let text = fs::read_to_string(manifest_file).map_err(|e| io_err(manifest_file, e))?;
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| CorpusError::MissingHeader(filename.clone()))?;
    if header.1.trim() != MANIFEST_HEADER {
        return Err(CorpusError::MissingHeader(filename));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        let line_num = lineno + 1; // 1-based, counting the header as line 1
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(CorpusError::MalformedRow {
                file: filename.clone(),
                line: line_num,
                reason: format!("expected 8 tab-separated fields, got {}", fields.len()),
            });
        }
        let label = class_index(fields[2]).ok_or_else(|| CorpusError::BadLabel {
            file: filename.clone(),
            line: line_num,
            label: fields[2].to_string(),
        })?;
        let split = match fields[3] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(CorpusError::MalformedRow {
                    file: filename.clone(),
                    line: line_num,
                    reason: format!("unknown split {other:?}"),
                })
            }
        };
        let parse_f64 = |idx: usize, name: &str| -> Result<f64, CorpusError> {
            fields[idx].parse().map_err(|_| CorpusError::MalformedRow {
                file: filename.clone(),
                line: line_num,
                reason: format!("bad {name} value {:?}", fields[idx]),
            })
        };
        let corruption = CorruptionParams {
            blur_sigma: parse_f64(4, "blur_sigma")?,
            noise_sigma: parse_f64(5, "noise_sigma")?,
            perspective_strength: parse_f64(6, "perspective_strength")?,
        };
        corruption.validate()?;
        let seed: u64 = fields[7].parse().map_err(|_| CorpusError::MalformedRow {
            file: filename.clone(),
            line: line_num,
            reason: format!("bad seed value {:?}", fields[7]),
        })?;
        let rel_path = fields[1].to_string();
        if !dir.join(&rel_path).exists() {
            return Err(CorpusError::MissingImage {
                file: filename.clone(),
                line: line_num,
                image: rel_path,
            });
        }
        rows.push(ManifestRow {
            id: fields[0].to_string(),
            rel_path,
            label,
            split,
            corruption,
            seed,
        });
    }
    Ok(CorpusIndex { root: dir.to_path_buf(), rows })
}
