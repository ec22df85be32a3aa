//! Digit corpora: a procedural stroke renderer, an IDX importer and the
//! source/unseen domain split.
//!
//! The unseen domain applies a fixed law to each held-out image `x ∈ [0,1]`:
//!
//! ```text
//! x' = clip(0.5 + κ·((1 − x) − 0.5) + b, 0, 1),  κ ~ U[0.6, 1.0],  b ~ U[−0.15, 0.15]
//! ```
//!
//! snapped back onto the 8-bit grid. `κ` and `b` are drawn per image from the
//! `Jitter` stream of the split seed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Dataset, InputMeta};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const CORPUS_SIDE: usize = 28;
pub const DIGIT_SIDE: usize = 14;
pub const DIGIT_CLASSES: usize = 10;
const LEVELS: f64 = 255.0;

pub fn pixel_meta() -> InputMeta {
    InputMeta::quantized(0.0, 1.0, 1.0 / LEVELS)
}

fn snap(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * LEVELS).round() / LEVELS
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<(f64, f64)> {
    (0..=24)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / 24.0;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Polyline strokes of each glyph in unit coordinates, y pointing down.
fn glyph(digit: usize) -> Vec<Vec<(f64, f64)>> {
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.26, 0.38)],
        1 => vec![vec![(0.36, 0.26), (0.52, 0.12), (0.52, 0.88)]],
        2 => vec![vec![
            (0.28, 0.3),
            (0.35, 0.15),
            (0.5, 0.1),
            (0.66, 0.15),
            (0.72, 0.3),
            (0.65, 0.46),
            (0.28, 0.88),
            (0.76, 0.88),
        ]],
        3 => vec![vec![
            (0.28, 0.16),
            (0.5, 0.1),
            (0.7, 0.18),
            (0.7, 0.35),
            (0.48, 0.48),
            (0.72, 0.6),
            (0.72, 0.8),
            (0.5, 0.9),
            (0.28, 0.84),
        ]],
        4 => vec![vec![(0.62, 0.88), (0.62, 0.12), (0.24, 0.64), (0.8, 0.64)]],
        5 => vec![vec![
            (0.72, 0.12),
            (0.33, 0.12),
            (0.3, 0.45),
            (0.55, 0.41),
            (0.72, 0.55),
            (0.72, 0.77),
            (0.52, 0.9),
            (0.28, 0.84),
        ]],
        6 => vec![vec![
            (0.68, 0.12),
            (0.46, 0.24),
            (0.32, 0.48),
            (0.3, 0.72),
            (0.42, 0.88),
            (0.6, 0.88),
            (0.7, 0.72),
            (0.62, 0.55),
            (0.45, 0.52),
            (0.32, 0.62),
        ]],
        7 => vec![vec![(0.25, 0.12), (0.76, 0.12), (0.42, 0.88)]],
        8 => vec![ellipse(0.5, 0.3, 0.18, 0.18), ellipse(0.5, 0.69, 0.22, 0.2)],
        9 => vec![ellipse(0.5, 0.33, 0.2, 0.2), vec![(0.7, 0.33), (0.6, 0.88)]],
        _ => unreachable!("digit out of range"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Renders one 28×28 digit with a random affine pose, control-point wobble
/// and stroke width. Values are on the 8-bit grid in `[0, 1]`.
pub fn render_digit<R: Rng + ?Sized>(digit: usize, rng: &mut R) -> Vec<f64> {
    let angle = rng.gen_range(-15f64..15.0).to_radians();
    let (sx, sy) = (rng.gen_range(0.8..1.05), rng.gen_range(0.8..1.05));
    let shear = rng.gen_range(-0.2..0.2);
    let (tx, ty) = (rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06));
    let half_width = rng.gen_range(1.0..1.6);
    let (s, c) = angle.sin_cos();
    let side = CORPUS_SIDE as f64;
    let strokes: Vec<Vec<(f64, f64)>> = glyph(digit)
        .into_iter()
        .map(|stroke| {
            stroke
                .into_iter()
                .map(|(x, y)| {
                    let x = x + rng.gen_range(-0.03..0.03) - 0.5;
                    let y = y + rng.gen_range(-0.03..0.03) - 0.5;
                    let (x, y) = (sx * (x + shear * y), sy * y);
                    let (x, y) = (c * x - s * y, s * x + c * y);
                    ((x + 0.5 + tx) * side, (y + 0.5 + ty) * side)
                })
                .collect()
        })
        .collect();
    let mut img = vec![0.0; CORPUS_SIDE * CORPUS_SIDE];
    for r in 0..CORPUS_SIDE {
        for col in 0..CORPUS_SIDE {
            let p = (col as f64 + 0.5, r as f64 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|st| st.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            img[r * CORPUS_SIDE + col] = snap(half_width + 0.5 - d);
        }
    }
    img
}

/// A label-balanced procedural corpus of `count` 28×28 digits.
pub fn generate_digit_corpus(count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("digit corpus needs at least one sample"));
    }
    let mut rng = stream(seed, Stream::Data, 0);
    let mut inputs = Vec::with_capacity(count * CORPUS_SIDE * CORPUS_SIDE);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let digit = i % DIGIT_CLASSES;
        inputs.extend(render_digit(digit, &mut rng));
        labels.push(digit);
    }
    Dataset::new(
        vec![CORPUS_SIDE, CORPUS_SIDE],
        inputs,
        labels,
        DIGIT_CLASSES,
        "digits",
        pixel_meta(),
    )
}

/// 2×2 average pooling of a square image, re-snapped to the 8-bit grid.
pub fn downsample2(img: &[f64], side: usize) -> Vec<f64> {
    let half = side / 2;
    let mut out = Vec::with_capacity(half * half);
    for r in 0..half {
        for c in 0..half {
            let at = |rr: usize, cc: usize| img[rr * side + cc];
            let m = (at(2 * r, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c) + at(2 * r + 1, 2 * c + 1)) / 4.0;
            out.push(snap(m));
        }
    }
    out
}

/// `1 − x` per pixel, snapped to the 8-bit grid so it is an exact involution.
pub fn invert_intensity(img: &[f64]) -> Vec<f64> {
    img.iter().map(|v| snap(1.0 - v)).collect()
}

/// Inversion followed by the seeded contrast/brightness jitter documented
/// at module level.
pub fn jitter_inverted<R: Rng + ?Sized>(img: &[f64], rng: &mut R) -> Vec<f64> {
    let kappa = rng.gen_range(0.6..1.0);
    let bias = rng.gen_range(-0.15..0.15);
    invert_intensity(img)
        .into_iter()
        .map(|v| snap(0.5 + kappa * (v - 0.5) + bias))
        .collect()
}

fn balanced_pick(labels: &[usize], classes: usize, take: usize, skip: &[bool], rng: &mut crate::rng::Rng) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        if !skip[i] {
            by_class[c].push(i);
        }
    }
    for v in &mut by_class {
        v.shuffle(rng);
    }
    let mut picked = Vec::with_capacity(take);
    let mut round = 0;
    while picked.len() < take {
        let before = picked.len();
        for v in &by_class {
            if picked.len() < take && round < v.len() {
                picked.push(v[round]);
            }
        }
        if picked.len() == before {
            break;
        }
        round += 1;
    }
    picked.sort_unstable();
    picked
}

/// Splits a corpus into a 14×14 source domain of `subset_size` images and an
/// unseen domain built from a disjoint held-out set of the same size.
pub fn split_digit_domains(corpus: &Dataset, subset_size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let side = match corpus.sample_shape.as_slice() {
        [h, w] if h == w && (*h == CORPUS_SIDE || *h == DIGIT_SIDE) => *h,
        other => {
            return Err(Error::invalid(format!(
                "digit corpus must hold 28x28 or 14x14 images, found {other:?}"
            )))
        }
    };
    if subset_size == 0 || 2 * subset_size > corpus.len() {
        return Err(Error::invalid(format!(
            "corpus of {} images cannot supply two disjoint subsets of {subset_size}",
            corpus.len()
        )));
    }
    let small = |i: usize| -> Vec<f64> {
        let img = corpus.input(i);
        if side == CORPUS_SIDE {
            downsample2(img, side)
        } else {
            img.to_vec()
        }
    };
    let mut rng = stream(seed, Stream::Select, 0);
    let mut used = vec![false; corpus.len()];
    let source_idx = balanced_pick(&corpus.labels, corpus.classes, subset_size, &used, &mut rng);
    source_idx.iter().for_each(|&i| used[i] = true);
    let unseen_idx = balanced_pick(&corpus.labels, corpus.classes, subset_size, &used, &mut rng);

    let mut jitter = stream(seed, Stream::Jitter, 0);
    let source_inputs: Vec<f64> = source_idx.iter().flat_map(|&i| small(i)).collect();
    let unseen_inputs: Vec<f64> = unseen_idx
        .iter()
        .flat_map(|&i| jitter_inverted(&small(i), &mut jitter))
        .collect();
    let shape = vec![DIGIT_SIDE, DIGIT_SIDE];
    Ok((
        Dataset::new(
            shape.clone(),
            source_inputs,
            corpus.labels_of(&source_idx),
            corpus.classes,
            "digits-source",
            pixel_meta(),
        )?,
        Dataset::new(
            shape,
            unseen_inputs,
            corpus.labels_of(&unseen_idx),
            corpus.classes,
            "digits-unseen",
            pixel_meta(),
        )?,
    ))
}

/// Loads the corpus container at `corpus_path` and splits it.
pub fn make_digit_domains(corpus_path: &Path, subset_size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let corpus = Dataset::load(corpus_path)?;
    split_digit_domains(&corpus, subset_size, seed)
}

fn idx_header(bytes: &[u8], magic: u32, what: &'static str) -> Result<Vec<usize>> {
    let bad = |detail: String| Error::Format { what, detail };
    if bytes.len() < 4 {
        return Err(bad("file too short".into()));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(bad(format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    if bytes.len() < 4 + 4 * ndim {
        return Err(bad("truncated header".into()));
    }
    Ok((0..ndim)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize)
        .collect())
}

/// Builds a corpus from IDX image and label files (the MNIST distribution
/// format): `u8` images scaled to `[0, 1]`, `u8` labels.
pub fn import_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    for p in [images, labels] {
        if !p.exists() {
            return Err(Error::NotFound(p.to_path_buf()));
        }
    }
    let img = std::fs::read(images)?;
    let lab = std::fs::read(labels)?;
    let dims = idx_header(&img, 0x0000_0803, "idx images")?;
    let ldims = idx_header(&lab, 0x0000_0801, "idx labels")?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(Error::shape("import_idx", &[n], &[ldims[0]]));
    }
    let body = &img[16..];
    let lbody = &lab[8..];
    if body.len() != n * h * w || lbody.len() != n {
        return Err(Error::Format {
            what: "idx images",
            detail: "payload length does not match header".into(),
        });
    }
    let classes = lbody.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(DIGIT_CLASSES);
    Dataset::new(
        vec![h, w],
        body.iter().map(|&b| b as f64 / LEVELS).collect(),
        lbody.iter().map(|&l| l as usize).collect(),
        classes,
        "idx",
        pixel_meta(),
    )
}
