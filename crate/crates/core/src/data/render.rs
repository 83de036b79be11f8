//! Rasterizes latent scenes into (3, size, size) tensors.
//!
//! Rendering is a pure function of the latent: pixels are sampled at their
//! centers against hard-edged analytic masks, so a pixel is either exactly the
//! foreground color or exactly the background gray. The `rng` parameter is
//! part of the generator plumbing but intentionally unused — stochastic pixel
//! noise would break the exact-background property that the storage and
//! augmentation tests rely on.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::LatentSpec;

/// True when the pixel offset (dy, dx) from the shape center lies inside the
/// class mask at radius `s`. Offsets are in normalized image coordinates.
fn shape_mask(class: usize, dy: f64, dx: f64, s: f64) -> bool {
    match class {
        // circle
        0 => dy * dy + dx * dx <= s * s,
        // square
        1 => dy.abs().max(dx.abs()) <= 0.9 * s,
        // triangle, apex up
        2 => (-s..=s).contains(&dy) && dx.abs() <= (dy + s) / 2.0,
        // cross
        3 => {
            (dy.abs() <= 0.35 * s && dx.abs() <= s) || (dx.abs() <= 0.35 * s && dy.abs() <= s)
        }
        // ring
        4 => {
            let r2 = dy * dy + dx * dx;
            r2 >= (0.55 * s) * (0.55 * s) && r2 <= s * s
        }
        // diamond
        5 => dy.abs() + dx.abs() <= s,
        // horizontal stripes
        6 => {
            dy.abs().max(dx.abs()) <= 0.95 * s
                && ((dy + s) / (0.5 * s)).floor() as i64 % 2 == 0
        }
        // dot grid
        7 => {
            if dy.abs().max(dx.abs()) > 0.95 * s {
                return false;
            }
            let pitch = 0.66 * s;
            let gy = (dy / pitch).round() * pitch;
            let gx = (dx / pitch).round() * pitch;
            let d2 = (dy - gy) * (dy - gy) + (dx - gx) * (dx - gx);
            d2 <= (0.22 * s) * (0.22 * s)
        }
        _ => false,
    }
}

/// Renders `latent` to a (3, size, size) image with values in [0,1].
pub fn render_image(latent: &LatentSpec, size: usize, _rng: &mut RngState) -> Result<Tensor<f32>> {
    latent.validate()?;
    if size == 0 {
        return Err(Error::Input("image size must be positive".to_string()));
    }
    let bg = latent.background as f32;
    let fg = [
        latent.color[0] as f32,
        latent.color[1] as f32,
        latent.color[2] as f32,
    ];
    let hw = size * size;
    let mut data = vec![0.0f32; 3 * hw];
    let inv = 1.0 / size as f64;
    for row in 0..size {
        let dy = (row as f64 + 0.5) * inv - latent.position[0];
        for col in 0..size {
            let dx = (col as f64 + 0.5) * inv - latent.position[1];
            let inside = shape_mask(latent.class, dy, dx, latent.scale);
            let px = row * size + col;
            for (c, &f) in fg.iter().enumerate() {
                data[c * hw + px] = if inside { f } else { bg };
            }
        }
    }
    Tensor::from_vec(vec![3, size, size], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{NUM_CLASSES, POS_MAX, POS_MIN, SCALE_MAX};

    fn centered(class: usize) -> LatentSpec {
        LatentSpec {
            class,
            color: [0.9, 0.1, 0.1],
            position: [0.5, 0.5],
            scale: 0.25,
            background: 0.3,
        }
    }

    #[test]
    fn every_class_draws_some_foreground() {
        let mut rng = RngState::new(0);
        for class in 0..NUM_CLASSES {
            let img = render_image(&centered(class), 32, &mut rng).unwrap();
            let hw = 32 * 32;
            let fg = img.data()[..hw].iter().filter(|&&v| v != 0.3).count();
            assert!(fg > 8, "class {class} rendered only {fg} foreground pixels");
            assert!(fg < hw, "class {class} filled the whole frame");
        }
    }

    #[test]
    fn pixels_are_exactly_foreground_or_background() {
        let mut rng = RngState::new(1);
        for seed in 0..1000u64 {
            let mut r = RngState::new(seed);
            let latent = LatentSpec::sample(&mut r);
            let img = render_image(&latent, 12, &mut rng).unwrap();
            let hw = 12 * 12;
            let d = img.data();
            for px in 0..hw {
                let v = [d[px], d[hw + px], d[2 * hw + px]];
                let is_bg = v.iter().all(|&x| (x - latent.background as f32).abs() <= 1e-6);
                let is_fg = v[0] == latent.color[0] as f32
                    && v[1] == latent.color[1] as f32
                    && v[2] == latent.color[2] as f32;
                assert!(is_bg || is_fg, "pixel {px} is neither color nor background");
                for &x in &v {
                    assert!((0.0..=1.0).contains(&x));
                }
            }
        }
    }

    #[test]
    fn rendering_is_a_pure_function_of_the_latent() {
        let latent = centered(4);
        let a = render_image(&latent, 24, &mut RngState::new(1)).unwrap();
        let b = render_image(&latent, 24, &mut RngState::new(999)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn far_corner_is_background_when_shape_is_small() {
        let latent = LatentSpec {
            class: 0,
            color: [0.9, 0.9, 0.1],
            position: [POS_MIN, POS_MIN],
            scale: 0.1,
            background: 0.55,
        };
        let img = render_image(&latent, 32, &mut RngState::new(0)).unwrap();
        let hw = 32 * 32;
        // bottom-right pixel is far outside the mask
        let px = hw - 1;
        for c in 0..3 {
            assert!((img.data()[c * hw + px] - 0.55).abs() <= 1e-6);
        }
    }

    #[test]
    fn ring_has_a_hole_and_circle_does_not() {
        let mut rng = RngState::new(0);
        let circle = render_image(&centered(0), 33, &mut rng).unwrap();
        let ring = render_image(&centered(4), 33, &mut rng).unwrap();
        let center = (33 / 2) * 33 + 33 / 2;
        assert_eq!(circle.data()[center], 0.9);
        assert_eq!(ring.data()[center], 0.3);
        // but the ring's band is foreground
        let band_col = ((0.5 + 0.25 * 0.78) * 33.0) as usize; // inside [0.55s, s]
        assert_eq!(ring.data()[(33 / 2) * 33 + band_col], 0.9);
    }

    #[test]
    fn larger_scale_covers_more_pixels() {
        let mut rng = RngState::new(0);
        let mut small = centered(1);
        small.scale = 0.1;
        let mut large = centered(1);
        large.scale = SCALE_MAX;
        let count = |img: &Tensor<f32>| {
            img.data()[..32 * 32].iter().filter(|&&v| v != 0.3).count()
        };
        let a = count(&render_image(&small, 32, &mut rng).unwrap());
        let b = count(&render_image(&large, 32, &mut rng).unwrap());
        assert!(b > 2 * a, "scale 0.3 area {b} vs scale 0.1 area {a}");
    }

    #[test]
    fn position_moves_the_mass() {
        let mut rng = RngState::new(0);
        let mut top = centered(0);
        top.position = [POS_MIN, 0.5];
        let mut bottom = centered(0);
        bottom.position = [POS_MAX, 0.5];
        let img_t = render_image(&top, 32, &mut rng).unwrap();
        let img_b = render_image(&bottom, 32, &mut rng).unwrap();
        let row_mass = |img: &Tensor<f32>, rows: std::ops::Range<usize>| -> usize {
            let d = img.data();
            rows.flat_map(|r| (0..32).map(move |c| r * 32 + c))
                .filter(|&px| d[px] != 0.3)
                .count()
        };
        assert!(row_mass(&img_t, 0..16) > row_mass(&img_t, 16..32));
        assert!(row_mass(&img_b, 16..32) > row_mass(&img_b, 0..16));
    }

    #[test]
    fn invalid_latent_is_rejected() {
        let mut bad = centered(0);
        bad.scale = 0.9;
        assert!(render_image(&bad, 16, &mut RngState::new(0)).is_err());
        assert!(render_image(&centered(0), 0, &mut RngState::new(0)).is_err());
    }
}
