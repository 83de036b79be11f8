//! Held-out evaluation probes: labeled image sets for zero-shot
//! classification across five attribute families, plus a paired
//! image–caption set for retrieval.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::{
    gen_pair_set, render_image, LatentSpec, PairSet, Split, BG_MAX, CLASS_NAMES, COLOR_JITTER,
    COLOR_NAMES, COLOR_PALETTE, LBL_PROBE, SCALE_MAX, SCALE_MIN,
};

/// A labeled image set for zero-shot classification.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbe {
    pub dataset: String,
    /// Semantic grouping used when aggregating results.
    pub family: String,
    pub class_names: Vec<String>,
    /// Prompt templates with a `{}` placeholder for the class name.
    pub prompt_templates: Vec<String>,
    /// Raw [0,1] images; normalization happens at evaluation time.
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

const PROMPT_TEMPLATES: [&str; 2] = ["a photo of a {}", "a {}"];

// Sub-stream indices per family.
const FAM_SHAPES: u64 = 0;
const FAM_SHAPES_OOD: u64 = 1;
const FAM_COLORS: u64 = 2;
const FAM_SIZES: u64 = 3;
const FAM_BACKGROUNDS: u64 = 4;

fn probe_shell(dataset: &str, family: &str, class_names: Vec<String>) -> ClassProbe {
    ClassProbe {
        dataset: dataset.to_string(),
        family: family.to_string(),
        class_names,
        prompt_templates: PROMPT_TEMPLATES.iter().map(|t| t.to_string()).collect(),
        images: Vec::new(),
        labels: Vec::new(),
    }
}

fn fill_probe(
    probe: &mut ClassProbe,
    per_class: usize,
    size: usize,
    family_stream: u64,
    rng: &RngState,
    adjust: impl Fn(&mut LatentSpec, usize, &mut RngState),
) -> Result<()> {
    let classes = probe.class_names.len();
    for label in 0..classes {
        for i in 0..per_class {
            let mut r = rng
                .fork(LBL_PROBE, family_stream)
                .fork(label as u64, i as u64);
            let mut latent = LatentSpec::sample(&mut r);
            adjust(&mut latent, label, &mut r);
            probe.images.push(render_image(&latent, size, &mut r)?);
            probe.labels.push(label);
        }
    }
    Ok(())
}

/// Builds the five classification probes: shape identity (the headline
/// family), shapes at out-of-distribution sizes, colors, sizes, and
/// backgrounds. Each probe is balanced with `per_class` images per class.
pub fn classification_probes(
    per_class: usize,
    size: usize,
    rng: &RngState,
) -> Result<Vec<ClassProbe>> {
    if per_class == 0 {
        return Err(Error::Input("per_class must be positive".to_string()));
    }
    let shape_names: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let color_names: Vec<String> = COLOR_NAMES.iter().map(|s| s.to_string()).collect();
    let size_names = vec!["small".to_string(), "medium".to_string(), "large".to_string()];
    let bg_names = vec!["dark".to_string(), "gray".to_string(), "light".to_string()];

    let mut shapes = probe_shell("synth-shapes", "shapes", shape_names.clone());
    fill_probe(&mut shapes, per_class, size, FAM_SHAPES, rng, |l, label, _| {
        l.class = label;
    })?;

    // Same labels, but every shape is rendered larger than anything the
    // training distribution contains.
    let mut shapes_ood = probe_shell("synth-shapes-ood", "shapes-ood", shape_names);
    fill_probe(&mut shapes_ood, per_class, size, FAM_SHAPES_OOD, rng, |l, label, r| {
        l.class = label;
        l.scale = r.uniform(SCALE_MAX, SCALE_MAX + 0.08);
    })?;

    let mut colors = probe_shell("synth-colors", "colors", color_names);
    fill_probe(&mut colors, per_class, size, FAM_COLORS, rng, |l, label, r| {
        for (c, base) in l.color.iter_mut().zip(COLOR_PALETTE[label]) {
            *c = (base + r.uniform(-COLOR_JITTER, COLOR_JITTER)).clamp(0.0, 1.0);
        }
    })?;

    // Sample sizes strictly inside each band so names are unambiguous.
    let third = (SCALE_MAX - SCALE_MIN) / 3.0;
    let mut sizes = probe_shell("synth-sizes", "sizes", size_names);
    fill_probe(&mut sizes, per_class, size, FAM_SIZES, rng, move |l, label, r| {
        let lo = SCALE_MIN + label as f64 * third;
        l.scale = r.uniform(lo + 0.05 * third, lo + 0.95 * third);
    })?;

    let mut backgrounds = probe_shell("synth-backgrounds", "backgrounds", bg_names);
    let bands = [(0.0, 0.22), (0.22, 0.44), (0.44, BG_MAX)];
    fill_probe(&mut backgrounds, per_class, size, FAM_BACKGROUNDS, rng, move |l, label, r| {
        let (lo, hi) = bands[label];
        let margin = 0.05 * (hi - lo);
        l.background = r.uniform(lo + margin, hi - margin);
    })?;

    Ok(vec![shapes, shapes_ood, colors, sizes, backgrounds])
}

/// Held-out image–caption pairs for retrieval evaluation.
pub fn retrieval_probe(
    n: usize,
    size: usize,
    context_length: usize,
    rng: &RngState,
) -> Result<PairSet> {
    gen_pair_set(n, size, context_length, Split::Val, rng, 1)
}

// The OOD probe must exceed the sampler's range yet stay renderable.
const _: () = assert!(SCALE_MAX + 0.08 <= super::RENDER_SCALE_MAX);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{background_name, size_name};

    #[test]
    fn probes_are_balanced_and_well_formed() {
        let probes = classification_probes(3, 8, &RngState::new(11)).unwrap();
        assert_eq!(probes.len(), 5);
        let families: Vec<&str> = probes.iter().map(|p| p.family.as_str()).collect();
        assert_eq!(families, ["shapes", "shapes-ood", "colors", "sizes", "backgrounds"]);
        for p in &probes {
            let c = p.class_names.len();
            assert_eq!(p.images.len(), 3 * c);
            assert_eq!(p.labels.len(), 3 * c);
            for label in 0..c {
                assert_eq!(p.labels.iter().filter(|&&l| l == label).count(), 3);
            }
            assert!(!p.prompt_templates.is_empty());
            for t in &p.prompt_templates {
                assert!(t.contains("{}"));
            }
            for img in &p.images {
                assert_eq!(img.shape(), &[3, 8, 8]);
            }
        }
        assert_eq!(probes[0].class_names.len(), crate::data::NUM_CLASSES);
        assert_eq!(probes[3].class_names.len(), 3);
    }

    #[test]
    fn probe_generation_is_deterministic() {
        let a = classification_probes(2, 8, &RngState::new(4)).unwrap();
        let b = classification_probes(2, 8, &RngState::new(4)).unwrap();
        assert_eq!(a, b);
        let c = classification_probes(2, 8, &RngState::new(5)).unwrap();
        assert_ne!(a, c);
    }

    /// Background fills most of every frame, so the median pixel of the red
    /// channel recovers the exact background gray.
    fn background_of(img: &Tensor<f32>) -> f64 {
        let hw = img.shape()[1] * img.shape()[2];
        let mut chan: Vec<f32> = img.data()[..hw].to_vec();
        chan.sort_by(f32::total_cmp);
        chan[hw / 2] as f64
    }

    #[test]
    fn background_probe_pixels_match_their_labels() {
        let probes = classification_probes(4, 8, &RngState::new(7)).unwrap();
        let bgs = &probes[4];
        assert_eq!(bgs.class_names, ["dark", "gray", "light"]);
        assert_eq!(probes[3].class_names, ["small", "medium", "large"]);
        for (img, &label) in bgs.images.iter().zip(&bgs.labels) {
            let bg = background_of(img);
            assert_eq!(background_name(bg), bgs.class_names[label]);
        }
        // size probe images carry scales strictly inside the named band
        assert_eq!(size_name(SCALE_MIN + 0.01), "small");
    }

    #[test]
    fn ood_shapes_are_larger_than_training_range() {
        let probes = classification_probes(2, 16, &RngState::new(3)).unwrap();
        let id = &probes[0];
        let ood = &probes[1];
        let fg_area = |img: &Tensor<f32>| {
            let bg = background_of(img) as f32;
            img.data()[..256].iter().filter(|&&v| v != bg).count()
        };
        let mean = |p: &ClassProbe| {
            p.images.iter().map(fg_area).sum::<usize>() as f64 / p.images.len() as f64
        };
        assert!(mean(ood) > mean(id));
    }

    #[test]
    fn retrieval_probe_differs_from_training_pairs() {
        let rng = RngState::new(13);
        let probe = retrieval_probe(20, 8, 12, &rng).unwrap();
        let train = gen_pair_set(20, 8, 12, Split::Train, &rng, 1).unwrap();
        assert_eq!(probe.records.len(), 20);
        assert_ne!(probe.records, train.records);
    }

    #[test]
    fn zero_per_class_is_rejected() {
        assert!(classification_probes(0, 8, &RngState::new(1)).is_err());
    }
}
