//! Deterministic synthetic data: latent scene descriptions rendered to images,
//! with triplet similarity judgments and caption pairs derived from the same
//! latent space.
//!
//! Every record is generated from an independently forked RNG stream keyed by
//! `(stream label, record index)`, so output is byte-identical regardless of
//! worker count or generation order.

mod augment;
mod probes;
mod render;
mod storage;
mod tokenizer;

pub use augment::{augment, normalize, AugmentPolicy, NORM_MEAN, NORM_STD};
pub use probes::{classification_probes, retrieval_probe, ClassProbe};
pub use render::render_image;
pub use storage::{
    blob_path, manifest_path, read_pair_set, read_triplet_set, write_pair_set, write_triplet_set,
    DatasetManifest, ManifestEntry, PayloadKind, MANIFEST_HEADER,
};
pub use tokenizer::{Tokenizer, BOT_ID, EOT_ID, PAD_ID};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Shape classes, index = class id.
pub const CLASS_NAMES: [&str; 8] = [
    "circle", "square", "triangle", "cross", "ring", "diamond", "stripes", "grid",
];

pub const NUM_CLASSES: usize = CLASS_NAMES.len();

/// Base palette. Entries are separated by > 0.30 in RGB L2, so the ±0.08
/// per-channel jitter applied at sampling time can never flip the nearest
/// neighbour and color names stay stable.
pub const COLOR_NAMES: [&str; 8] = [
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white",
];

pub const COLOR_PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.15],
    [0.15, 0.20, 0.90],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.80],
    [0.10, 0.80, 0.85],
    [0.95, 0.55, 0.10],
    [0.95, 0.95, 0.95],
];

pub const COLOR_JITTER: f64 = 0.08;

pub const SCALE_MIN: f64 = 0.08;
pub const SCALE_MAX: f64 = 0.30;
pub const POS_MIN: f64 = 0.30;
pub const POS_MAX: f64 = 0.70;
pub const BG_MAX: f64 = 0.65;

/// Hard renderability cap on scale; evaluation probes may exceed the
/// training range `[SCALE_MIN, SCALE_MAX]` up to this bound.
pub const RENDER_SCALE_MAX: f64 = 0.45;

// Latent distance weights: class identity dominates, color is next, layout
// attributes matter least. Mirrors how strongly each attribute moves pixels.
const W_CLASS: f64 = 4.0;
const W_COLOR: f64 = 2.0;
const W_POS: f64 = 1.0;
const W_SCALE: f64 = 1.0;
const W_BG: f64 = 0.5;

// Per-attribute perturbation step sizes at unit magnitude.
const STEP_COLOR: f64 = 0.35;
const STEP_POS: f64 = 0.20;
const STEP_SCALE: f64 = 0.11;
const STEP_BG: f64 = 0.30;

// Stream labels for RNG forks; split adds a high-bit offset.
const LBL_TRIPLET: u64 = 0x5452_4950;
const LBL_PAIR: u64 = 0x5041_4952;
pub(crate) const LBL_PROBE: u64 = 0x5052_4f42;

/// Dataset split. Train and val streams are fully independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn label_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 32,
        }
    }
}

/// Latent description of one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSpec {
    /// Shape class id, `< NUM_CLASSES`.
    pub class: usize,
    /// Foreground RGB in [0,1].
    pub color: [f64; 3],
    /// Shape center in normalized image coordinates (y, x).
    pub position: [f64; 2],
    /// Shape radius as a fraction of image side.
    pub scale: f64,
    /// Background gray level.
    pub background: f64,
}

impl LatentSpec {
    /// Draws a latent uniformly over the supported ranges. Consumes a fixed
    /// number of draws so callers can rely on stream alignment.
    pub fn sample(rng: &mut RngState) -> LatentSpec {
        let class = rng.next_below(NUM_CLASSES as u64) as usize;
        let base = COLOR_PALETTE[rng.next_below(COLOR_PALETTE.len() as u64) as usize];
        let mut color = [0.0; 3];
        for (c, b) in color.iter_mut().zip(base) {
            *c = (b + rng.uniform(-COLOR_JITTER, COLOR_JITTER)).clamp(0.0, 1.0);
        }
        let position = [rng.uniform(POS_MIN, POS_MAX), rng.uniform(POS_MIN, POS_MAX)];
        let scale = rng.uniform(SCALE_MIN, SCALE_MAX);
        let background = rng.uniform(0.0, BG_MAX);
        LatentSpec { class, color, position, scale, background }
    }

    /// Checks renderability. Deliberately looser than the sampler's ranges:
    /// evaluation probes push scale past the training distribution.
    pub fn validate(&self) -> Result<()> {
        if self.class >= NUM_CLASSES {
            return Err(Error::Input(format!(
                "latent class {} out of range (have {NUM_CLASSES} classes)",
                self.class
            )));
        }
        let in_unit = self.color.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c));
        if !in_unit {
            return Err(Error::Input(format!("latent color {:?} outside [0,1]", self.color)));
        }
        let pos_ok = self
            .position
            .iter()
            .all(|p| p.is_finite() && (0.0..=1.0).contains(p));
        if !pos_ok {
            return Err(Error::Input(format!(
                "latent position {:?} outside [0,1]",
                self.position
            )));
        }
        if !self.scale.is_finite() || !(self.scale > 0.0) || self.scale > RENDER_SCALE_MAX {
            return Err(Error::Input(format!(
                "latent scale {} outside (0,{RENDER_SCALE_MAX}]",
                self.scale
            )));
        }
        if !self.background.is_finite() || !(0.0..=1.0).contains(&self.background) {
            return Err(Error::Input(format!(
                "latent background {} outside [0,1]",
                self.background
            )));
        }
        Ok(())
    }
}

/// Weighted Euclidean distance between two latents. This is the ground-truth
/// notion of perceptual similarity that triplet judgments are derived from.
pub fn latent_distance(a: &LatentSpec, b: &LatentSpec) -> f64 {
    let class = if a.class == b.class { 0.0 } else { 1.0 };
    let color: f64 = a
        .color
        .iter()
        .zip(b.color)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let pos: f64 = a
        .position
        .iter()
        .zip(b.position)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = (a.scale - b.scale).abs();
    let bg = (a.background - b.background).abs();
    ((W_CLASS * class).powi(2)
        + (W_COLOR * color).powi(2)
        + (W_POS * pos).powi(2)
        + (W_SCALE * scale).powi(2)
        + (W_BG * bg).powi(2))
    .sqrt()
}

/// Human-readable nearest-palette color name.
pub fn color_name(color: &[f64; 3]) -> &'static str {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in COLOR_PALETTE.iter().enumerate() {
        let d: f64 = color.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    COLOR_NAMES[best]
}

pub fn size_name(scale: f64) -> &'static str {
    let third = (SCALE_MAX - SCALE_MIN) / 3.0;
    if scale < SCALE_MIN + third {
        "small"
    } else if scale < SCALE_MIN + 2.0 * third {
        "medium"
    } else {
        "large"
    }
}

pub fn background_name(background: f64) -> &'static str {
    if background < 0.22 {
        "dark"
    } else if background < 0.44 {
        "gray"
    } else {
        "light"
    }
}

/// Renders one caption for a latent using one of five fixed templates.
pub fn caption_for(latent: &LatentSpec, template: usize) -> String {
    let shape = CLASS_NAMES[latent.class];
    let color = color_name(&latent.color);
    let size = size_name(latent.scale);
    let bg = background_name(latent.background);
    match template % 5 {
        0 => format!("a {color} {shape} on a {bg} background"),
        1 => format!("a {size} {color} {shape}"),
        2 => format!("the {shape} is {color}"),
        3 => format!("a {size} {shape} on a {bg} background"),
        _ => format!("a photo of a {color} {shape}"),
    }
}

pub const NUM_CAPTION_TEMPLATES: usize = 5;

/// One similarity triplet: rendered reference, two variants, and a judgment.
/// `y == 0` marks variant 0 as the closer one, `y == 1` variant 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletRecord {
    pub x: Tensor<f32>,
    pub v0: Tensor<f32>,
    pub v1: Tensor<f32>,
    pub y: u8,
}

/// Latent-side provenance for a triplet, kept for audits and oracle tests.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletLatents {
    pub reference: LatentSpec,
    pub v0: LatentSpec,
    pub v1: LatentSpec,
    /// Judgment implied by latent distance, before label noise.
    pub y_oracle: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet {
    pub records: Vec<TripletRecord>,
    pub latents: Vec<TripletLatents>,
}

/// One image–caption pair, caption already tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub image: Tensor<f32>,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub records: Vec<CaptionRecord>,
    pub latents: Vec<LatentSpec>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Attr {
    Class,
    Color,
    Position,
    Scale,
    Background,
}

const ALL_ATTRS: [Attr; 5] = [Attr::Class, Attr::Color, Attr::Position, Attr::Scale, Attr::Background];

/// Nudges `value` by `±step` inside `[lo, hi]`, flipping direction when the
/// clamp would swallow most of the step. Guarantees a visible change.
fn nudge(value: f64, step: f64, lo: f64, hi: f64, rng: &mut RngState) -> f64 {
    let signed = if rng.bernoulli(0.5) { step } else { -step };
    let forward = (value + signed).clamp(lo, hi);
    if (forward - value).abs() >= 0.25 * step {
        forward
    } else {
        (value - signed).clamp(lo, hi)
    }
}

/// Applies one attribute perturbation of the given magnitude in [0,1].
fn perturb_attr(latent: &mut LatentSpec, attr: Attr, magnitude: f64, rng: &mut RngState) {
    match attr {
        Attr::Class => {
            let shift = 1 + rng.next_below(NUM_CLASSES as u64 - 1) as usize;
            latent.class = (latent.class + shift) % NUM_CLASSES;
        }
        Attr::Color => {
            let mut dir = [rng.normal(), rng.normal(), rng.normal()];
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            if norm < 1e-12 {
                dir = [1.0, 0.0, 0.0];
            } else {
                for d in &mut dir {
                    *d /= norm;
                }
            }
            for (c, d) in latent.color.iter_mut().zip(dir) {
                *c = (*c + d * STEP_COLOR * magnitude).clamp(0.0, 1.0);
            }
        }
        Attr::Position => {
            let angle = rng.uniform(0.0, std::f64::consts::TAU);
            let step = STEP_POS * magnitude;
            latent.position[0] = (latent.position[0] + step * angle.sin()).clamp(POS_MIN, POS_MAX);
            latent.position[1] = (latent.position[1] + step * angle.cos()).clamp(POS_MIN, POS_MAX);
        }
        Attr::Scale => {
            latent.scale = nudge(latent.scale, STEP_SCALE * magnitude, SCALE_MIN, SCALE_MAX, rng);
        }
        Attr::Background => {
            latent.background = nudge(latent.background, STEP_BG * magnitude, 0.0, BG_MAX, rng);
        }
    }
}

/// Generates one triplet from its dedicated RNG stream. The two variants
/// perturb disjoint attribute subsets of the shared reference, so their latent
/// distances to the reference are controlled by independent attribute groups.
fn make_triplet(
    index: usize,
    noise_rate: f64,
    size: usize,
    split: Split,
    master: &RngState,
) -> Result<(TripletRecord, TripletLatents)> {
    let mut rng = master.fork(LBL_TRIPLET + split.label_offset(), index as u64);
    let reference = LatentSpec::sample(&mut rng);

    let mut order: Vec<usize> = (0..ALL_ATTRS.len()).collect();
    rng.shuffle(&mut order);
    let k0 = 1 + rng.next_below(2) as usize;
    let k1 = 1 + rng.next_below(2) as usize;
    let m0 = rng.uniform(0.25, 1.0);
    let m1 = rng.uniform(0.25, 1.0);

    let mut v0 = reference.clone();
    for &a in &order[..k0] {
        perturb_attr(&mut v0, ALL_ATTRS[a], m0, &mut rng);
    }
    let mut v1 = reference.clone();
    for &a in &order[k0..k0 + k1] {
        perturb_attr(&mut v1, ALL_ATTRS[a], m1, &mut rng);
    }

    let d0 = latent_distance(&reference, &v0);
    let d1 = latent_distance(&reference, &v1);
    let y_oracle: u8 = if d0 < d1 { 0 } else { 1 };
    let flip = rng.bernoulli(noise_rate);
    let y = if flip { 1 - y_oracle } else { y_oracle };

    let record = TripletRecord {
        x: render_image(&reference, size, &mut rng)?,
        v0: render_image(&v0, size, &mut rng)?,
        v1: render_image(&v1, size, &mut rng)?,
        y,
    };
    let latents = TripletLatents { reference, v0, v1, y_oracle };
    Ok((record, latents))
}

fn make_pair(
    index: usize,
    size: usize,
    tokenizer: &Tokenizer,
    split: Split,
    master: &RngState,
) -> Result<(CaptionRecord, LatentSpec)> {
    let mut rng = master.fork(LBL_PAIR + split.label_offset(), index as u64);
    let latent = LatentSpec::sample(&mut rng);
    let template = rng.next_below(NUM_CAPTION_TEMPLATES as u64) as usize;
    let caption = caption_for(&latent, template);
    let tokens = tokenizer.tokenize(&caption)?;
    let image = render_image(&latent, size, &mut rng)?;
    Ok((CaptionRecord { image, tokens }, latent))
}

/// Maps `make` over `0..n` across `workers` threads, preserving index order.
/// Because every record draws from its own forked stream, the result is
/// independent of the worker count.
fn sharded<T: Send>(
    n: usize,
    workers: usize,
    make: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 {
        return (0..n).map(&make).collect();
    }
    let chunk = n.div_ceil(workers);
    let make = &make;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let start = w * chunk;
                let end = ((w + 1) * chunk).min(n);
                scope.spawn(move || (start..end).map(make).collect::<Result<Vec<T>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            let part = h.join().map_err(|_| {
                Error::Contract("data generation worker panicked".to_string())
            })??;
            out.extend(part);
        }
        Ok(out)
    })
}

/// Generates `n` triplets. `noise_rate` is the probability that a stored
/// judgment disagrees with the latent-distance oracle.
pub fn gen_triplet_set(
    n: usize,
    noise_rate: f64,
    size: usize,
    split: Split,
    rng: &RngState,
    workers: usize,
) -> Result<TripletSet> {
    // Past 0.5 the "noise" would invert the oracle rather than corrupt it.
    if !(0.0..0.5).contains(&noise_rate) {
        return Err(Error::Input(format!(
            "noise rate {noise_rate} outside [0, 0.5)"
        )));
    }
    let rows = sharded(n, workers, |i| make_triplet(i, noise_rate, size, split, rng))?;
    let mut records = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for (r, l) in rows {
        records.push(r);
        latents.push(l);
    }
    Ok(TripletSet { records, latents })
}

/// Generates `n` image–caption pairs tokenized to `context_length`.
pub fn gen_pair_set(
    n: usize,
    size: usize,
    context_length: usize,
    split: Split,
    rng: &RngState,
    workers: usize,
) -> Result<PairSet> {
    let tokenizer = Tokenizer::closed(context_length)?;
    let rows = sharded(n, workers, |i| make_pair(i, size, &tokenizer, split, rng))?;
    let mut records = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for (r, l) in rows {
        records.push(r);
        latents.push(l);
    }
    Ok(PairSet { records, latents })
}
