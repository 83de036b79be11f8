//! Image augmentation for training: random resized crop, color jitter,
//! grayscale, Gaussian blur, horizontal flip, then per-channel normalization.
//!
//! Transforms run in that fixed order. Each enabled transform consumes a
//! fixed number of RNG draws whether or not it fires, so the stream stays
//! aligned regardless of which transforms trigger. A disabled transform
//! (probability zero, strength zero, full-frame crop) consumes no draws and
//! leaves pixel bits untouched rather than applying a neutral-factor
//! arithmetic pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Channel statistics applied by `normalize`.
pub const NORM_MEAN: [f32; 3] = [0.48145466, 0.4578275, 0.40821073];
pub const NORM_STD: [f32; 3] = [0.26862954, 0.26130258, 0.27577711];

const GRAY_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Lower bound of the crop area fraction; `>= 1` disables cropping.
    pub crop_min_area: f64,
    /// Color jitter strength; brightness/contrast/saturation factors are
    /// drawn from `[1 - 0.4s, 1 + 0.4s]`. Zero disables jitter.
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_max: f64,
    pub hflip_prob: f64,
}

impl AugmentPolicy {
    /// Default training policy.
    pub fn train_default() -> AugmentPolicy {
        AugmentPolicy {
            crop_min_area: 0.6,
            jitter_strength: 0.4,
            grayscale_prob: 0.1,
            blur_prob: 0.2,
            blur_sigma_max: 1.2,
            hflip_prob: 0.5,
        }
    }

    /// Policy that leaves pixels untouched; `augment` then reduces to
    /// `normalize`.
    pub fn identity() -> AugmentPolicy {
        AugmentPolicy {
            crop_min_area: 1.0,
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma_max: 0.0,
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("hflip_prob", self.hflip_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0,1]")));
            }
        }
        if !(self.crop_min_area > 0.0) {
            return Err(Error::Config(format!(
                "crop_min_area {} must be positive",
                self.crop_min_area
            )));
        }
        if self.jitter_strength < 0.0 || self.blur_sigma_max < 0.0 {
            return Err(Error::Config("jitter and blur strengths must be non-negative".to_string()));
        }
        Ok(())
    }
}

struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>, // (3, h, w)
}

impl Image {
    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

fn check_image(image: &Tensor<f32>) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("augment", s, "expected a (3, h, w) image"));
    }
    if s[1] == 0 || s[2] == 0 {
        return Err(Error::shape("augment", s, "image has an empty dimension"));
    }
    Ok((s[1], s[2]))
}

/// Random resized crop: picks an area fraction and aspect ratio, crops, and
/// resizes back to the original size with bilinear interpolation.
fn random_resized_crop(img: &mut Image, min_area: f64, rng: &mut RngState) {
    let area = rng.uniform(min_area.min(1.0), 1.0);
    let log_ratio = rng.uniform((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let target = area * (img.h * img.w) as f64;
    let cw = ((target * ratio).sqrt().round() as usize).clamp(1, img.w);
    let ch = ((target / ratio).sqrt().round() as usize).clamp(1, img.h);
    let top = rng.next_below((img.h - ch + 1) as u64) as usize;
    let left = rng.next_below((img.w - cw + 1) as u64) as usize;
    if ch == img.h && cw == img.w {
        return; // full frame: nothing to resample
    }
    let mut out = vec![0.0f32; 3 * img.h * img.w];
    let sy = ch as f64 / img.h as f64;
    let sx = cw as f64 / img.w as f64;
    for y in 0..img.h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let wy = (fy - y0 as f64) as f32;
        for x in 0..img.w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let wx = (fx - x0 as f64) as f32;
            for c in 0..3 {
                let p00 = img.at(c, top + y0, left + x0);
                let p01 = img.at(c, top + y0, left + x1);
                let p10 = img.at(c, top + y1, left + x0);
                let p11 = img.at(c, top + y1, left + x1);
                let top_row = p00 + (p01 - p00) * wx;
                let bot_row = p10 + (p11 - p10) * wx;
                out[(c * img.h + y) * img.w + x] = top_row + (bot_row - top_row) * wy;
            }
        }
    }
    img.data = out;
}

fn grayscale_value(img: &Image, y: usize, x: usize) -> f32 {
    GRAY_WEIGHTS
        .iter()
        .enumerate()
        .map(|(c, w)| w * img.at(c, y, x))
        .sum()
}

fn color_jitter(img: &mut Image, strength: f64, rng: &mut RngState) {
    let lo = (1.0 - 0.4 * strength).max(0.0);
    let hi = 1.0 + 0.4 * strength;
    let b = rng.uniform(lo, hi) as f32;
    let c = rng.uniform(lo, hi) as f32;
    let s = rng.uniform(lo, hi) as f32;
    if b != 1.0 {
        for v in &mut img.data {
            *v = (*v * b).clamp(0.0, 1.0);
        }
    }
    if c != 1.0 {
        let mut mean = 0.0f64;
        for y in 0..img.h {
            for x in 0..img.w {
                mean += grayscale_value(img, y, x) as f64;
            }
        }
        let mean = (mean / (img.h * img.w) as f64) as f32;
        for v in &mut img.data {
            *v = (mean + (*v - mean) * c).clamp(0.0, 1.0);
        }
    }
    if s != 1.0 {
        let hw = img.h * img.w;
        for y in 0..img.h {
            for x in 0..img.w {
                let g = grayscale_value(img, y, x);
                let px = y * img.w + x;
                for ch in 0..3 {
                    let v = &mut img.data[ch * hw + px];
                    *v = (g + (*v - g) * s).clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn to_grayscale(img: &mut Image) {
    let hw = img.h * img.w;
    for y in 0..img.h {
        for x in 0..img.w {
            let g = grayscale_value(img, y, x);
            let px = y * img.w + x;
            for c in 0..3 {
                img.data[c * hw + px] = g;
            }
        }
    }
}

fn gaussian_blur(img: &mut Image, sigma: f64) {
    let radius = (2.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.into_iter().map(|k| (k / sum) as f32).collect();

    let hw = img.h * img.w;
    let mut tmp = vec![0.0f32; 3 * hw];
    // horizontal pass, clamp to edge
    for c in 0..3 {
        for y in 0..img.h {
            for x in 0..img.w {
                let mut acc = 0.0f32;
                for (k, &kw) in kernel.iter().enumerate() {
                    let xs = (x as i64 + k as i64 - radius).clamp(0, img.w as i64 - 1) as usize;
                    acc += kw * img.at(c, y, xs);
                }
                tmp[(c * img.h + y) * img.w + x] = acc;
            }
        }
    }
    // vertical pass
    for c in 0..3 {
        for y in 0..img.h {
            for x in 0..img.w {
                let mut acc = 0.0f32;
                for (k, &kw) in kernel.iter().enumerate() {
                    let ys = (y as i64 + k as i64 - radius).clamp(0, img.h as i64 - 1) as usize;
                    acc += kw * tmp[(c * img.h + ys) * img.w + x];
                }
                img.data[(c * img.h + y) * img.w + x] = acc.clamp(0.0, 1.0);
            }
        }
    }
}

fn hflip(img: &mut Image) {
    for c in 0..3 {
        for y in 0..img.h {
            let row = (c * img.h + y) * img.w;
            img.data[row..row + img.w].reverse();
        }
    }
}

/// Applies `(x - mean) / std` per channel. Used by both the augmentation
/// pipeline and the evaluation path, which feeds images to the encoder
/// without any stochastic transforms.
pub fn normalize(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = check_image(image)?;
    let hw = h * w;
    let mut data = image.data().to_vec();
    for c in 0..3 {
        let mean = NORM_MEAN[c];
        let inv = 1.0 / NORM_STD[c];
        for v in &mut data[c * hw..(c + 1) * hw] {
            *v = (*v - mean) * inv;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Runs the augmentation pipeline on a [0,1] image and returns the normalized
/// result. Transform order is fixed: crop, jitter, grayscale, blur, flip,
/// normalize.
pub fn augment(
    image: &Tensor<f32>,
    policy: &AugmentPolicy,
    rng: &mut RngState,
) -> Result<Tensor<f32>> {
    policy.validate()?;
    let (h, w) = check_image(image)?;
    let mut img = Image { h, w, data: image.data().to_vec() };

    if policy.crop_min_area < 1.0 {
        random_resized_crop(&mut img, policy.crop_min_area, rng);
    }
    if policy.jitter_strength > 0.0 {
        color_jitter(&mut img, policy.jitter_strength, rng);
    }
    if policy.grayscale_prob > 0.0 && rng.bernoulli(policy.grayscale_prob) {
        to_grayscale(&mut img);
    }
    if policy.blur_prob > 0.0 {
        let fire = rng.bernoulli(policy.blur_prob);
        let sigma = rng.uniform(0.1, policy.blur_sigma_max.max(0.1));
        if fire {
            gaussian_blur(&mut img, sigma);
        }
    }
    if policy.hflip_prob > 0.0 && rng.bernoulli(policy.hflip_prob) {
        hflip(&mut img);
    }

    normalize(&Tensor::from_vec(vec![3, h, w], img.data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_image, LatentSpec};

    fn sample_image(seed: u64, size: usize) -> Tensor<f32> {
        let mut rng = RngState::new(seed);
        let latent = LatentSpec::sample(&mut rng);
        render_image(&latent, size, &mut rng).unwrap()
    }

    #[test]
    fn identity_policy_reduces_to_normalization() {
        let img = sample_image(11, 16);
        let mut rng = RngState::new(5);
        let out = augment(&img, &AugmentPolicy::identity(), &mut rng).unwrap();
        let plain = normalize(&img).unwrap();
        assert_eq!(out.data(), plain.data());
    }

    #[test]
    fn normalization_matches_hand_computation() {
        let img = Tensor::from_vec(vec![3, 1, 1], vec![0.5f32, 0.25, 1.0]).unwrap();
        let out = normalize(&img).unwrap();
        for c in 0..3 {
            let expect = (img.data()[c] - NORM_MEAN[c]) / NORM_STD[c];
            assert_eq!(out.data()[c], expect);
        }
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = sample_image(3, 12);
        let mut a = Image { h: 12, w: 12, data: img.data().to_vec() };
        hflip(&mut a);
        assert_ne!(a.data, img.data());
        hflip(&mut a);
        assert_eq!(a.data, img.data());
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let img = sample_image(4, 10);
        let mut a = Image { h: 10, w: 10, data: img.data().to_vec() };
        to_grayscale(&mut a);
        let hw = 100;
        for px in 0..hw {
            assert_eq!(a.data[px], a.data[hw + px]);
            assert_eq!(a.data[px], a.data[2 * hw + px]);
        }
    }

    #[test]
    fn blur_preserves_range_and_flattens_edges() {
        let img = sample_image(9, 16);
        let mut a = Image { h: 16, w: 16, data: img.data().to_vec() };
        gaussian_blur(&mut a, 1.0);
        for &v in &a.data {
            assert!((0.0..=1.0).contains(&v));
        }
        let variance = |d: &[f32]| {
            let m = d.iter().sum::<f32>() / d.len() as f32;
            d.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / d.len() as f32
        };
        assert!(variance(&a.data) < variance(img.data()));
    }

    #[test]
    fn blur_leaves_constant_images_unchanged() {
        let flat = Tensor::full(vec![3, 8, 8], 0.37f32);
        let mut a = Image { h: 8, w: 8, data: flat.data().to_vec() };
        gaussian_blur(&mut a, 0.8);
        for &v in &a.data {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_output_keeps_dimensions_and_range() {
        let img = sample_image(21, 20);
        for seed in 0..30 {
            let mut rng = RngState::new(seed);
            let mut a = Image { h: 20, w: 20, data: img.data().to_vec() };
            random_resized_crop(&mut a, 0.4, &mut rng);
            assert_eq!(a.data.len(), 3 * 400);
            for &v in &a.data {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn jitter_zero_strength_draws_but_does_not_change_pixels() {
        let img = sample_image(2, 8);
        let mut a = Image { h: 8, w: 8, data: img.data().to_vec() };
        let mut rng = RngState::new(1);
        color_jitter(&mut a, 0.0, &mut rng);
        assert_eq!(a.data, img.data());
    }

    #[test]
    fn augmentation_is_deterministic_per_seed() {
        let img = sample_image(8, 16);
        let policy = AugmentPolicy::train_default();
        let a = augment(&img, &policy, &mut RngState::new(42)).unwrap();
        let b = augment(&img, &policy, &mut RngState::new(42)).unwrap();
        let c = augment(&img, &policy, &mut RngState::new(43)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn augmented_outputs_stay_finite() {
        let img = sample_image(14, 16);
        let policy = AugmentPolicy::train_default();
        for seed in 0..50 {
            let out = augment(&img, &policy, &mut RngState::new(seed)).unwrap();
            assert!(out.all_finite());
            // normalized range for [0,1] inputs is bounded by (1 - min mean)/min std
            for &v in out.data() {
                assert!(v.abs() < 4.0, "normalized value {v} out of expected range");
            }
        }
    }

    #[test]
    fn invalid_policies_are_rejected() {
        let img = sample_image(1, 8);
        let mut p = AugmentPolicy::identity();
        p.hflip_prob = 1.5;
        assert!(augment(&img, &p, &mut RngState::new(0)).is_err());
        let mut q = AugmentPolicy::identity();
        q.crop_min_area = 0.0;
        assert!(augment(&img, &q, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn non_image_shapes_are_rejected() {
        let bad = Tensor::full(vec![1, 8, 8], 0.5f32);
        assert!(normalize(&bad).is_err());
        assert!(augment(&bad, &AugmentPolicy::identity(), &mut RngState::new(0)).is_err());
    }
}
