//! Paired image and text encoders.
//!
//! The image tower is a small pre-LN ViT (patchify-as-matmul, class-token
//! pooling); the text tower is a causal transformer pooled at the
//! end-of-text position. Both project into a shared embedding dimension.
//! Parameters live in a flat named map so subsets (e.g. the Q/K/V
//! projections) can be frozen or updated by path.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Name of the learnable logit-scale parameter (τ = 1 / exp(logit_scale)).
pub const LOGIT_SCALE: &str = "logit_scale";

/// Initial logit-scale value.
pub fn logit_scale_init() -> f64 {
    100f64.ln()
}

/// Inverse-temperature clamp bounds applied after each optimizer step.
pub const INV_TAU_MIN: f64 = 1.0;
pub const INV_TAU_MAX: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub proj_dim: usize,
}

impl VisionEncoderConfig {
    /// Reference desk-scale configuration.
    pub fn desk() -> Self {
        VisionEncoderConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            width: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            proj_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "vision width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("width", self.width),
            ("depth", self.depth),
            ("mlp_ratio", self.mlp_ratio),
            ("proj_dim", self.proj_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("vision {name} must be nonzero")));
            }
        }
        Ok(())
    }

    /// Patches per side of the grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count (sequence length is this plus the class token).
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch vector length.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub proj_dim: usize,
}

impl TextEncoderConfig {
    /// Reference desk-scale configuration.
    pub fn desk() -> Self {
        TextEncoderConfig {
            vocab_size: 200,
            context_length: 16,
            width: 64,
            depth: 2,
            heads: 4,
            proj_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "text width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("context_length", self.context_length),
            ("width", self.width),
            ("depth", self.depth),
            ("proj_dim", self.proj_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("text {name} must be nonzero")));
            }
        }
        Ok(())
    }
}

const TEXT_MLP_RATIO: usize = 4;

enum ParamKind {
    Weight,
    Bias,
    Gain,
    LogitScale,
}

fn block_specs(prefix: &str, width: usize, mlp_ratio: usize) -> Vec<(String, Vec<usize>, ParamKind)> {
    use ParamKind::*;
    let mlp = width * mlp_ratio;
    let mut specs = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, kind: ParamKind| {
        specs.push((format!("{prefix}.{name}"), shape, kind));
    };
    push("ln1.gain", vec![width], Gain);
    push("ln1.bias", vec![width], Bias);
    for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
        push(&format!("attn.{proj}.weight"), vec![width, width], Weight);
        push(&format!("attn.{proj}.bias"), vec![width], Bias);
    }
    push("ln2.gain", vec![width], Gain);
    push("ln2.bias", vec![width], Bias);
    push("mlp.fc1.weight", vec![width, mlp], Weight);
    push("mlp.fc1.bias", vec![mlp], Bias);
    push("mlp.fc2.weight", vec![mlp, width], Weight);
    push("mlp.fc2.bias", vec![width], Bias);
    specs
}

fn param_specs(
    vcfg: &VisionEncoderConfig,
    tcfg: &TextEncoderConfig,
) -> Vec<(String, Vec<usize>, ParamKind)> {
    use ParamKind::*;
    let mut specs = Vec::new();
    let w = vcfg.width;
    specs.push(("vision.patch_embed.weight".into(), vec![vcfg.patch_dim(), w], Weight));
    specs.push(("vision.patch_embed.bias".into(), vec![w], Bias));
    specs.push(("vision.cls_token".into(), vec![w], Weight));
    specs.push(("vision.pos_embed".into(), vec![vcfg.num_patches() + 1, w], Weight));
    for i in 0..vcfg.depth {
        specs.extend(block_specs(&format!("vision.block{i}"), w, vcfg.mlp_ratio));
    }
    specs.push(("vision.ln_post.gain".into(), vec![w], Gain));
    specs.push(("vision.ln_post.bias".into(), vec![w], Bias));
    specs.push(("vision.proj.weight".into(), vec![w, vcfg.proj_dim], Weight));

    let tw = tcfg.width;
    specs.push(("text.token_embed.weight".into(), vec![tcfg.vocab_size, tw], Weight));
    specs.push(("text.pos_embed".into(), vec![tcfg.context_length, tw], Weight));
    for i in 0..tcfg.depth {
        specs.extend(block_specs(&format!("text.block{i}"), tw, TEXT_MLP_RATIO));
    }
    specs.push(("text.ln_final.gain".into(), vec![tw], Gain));
    specs.push(("text.ln_final.bias".into(), vec![tw], Bias));
    specs.push(("text.proj.weight".into(), vec![tw, tcfg.proj_dim], Weight));

    specs.push((LOGIT_SCALE.into(), vec![], LogitScale));
    specs
}

/// Flat named parameter map for a paired image/text model.
#[derive(Clone, Debug)]
pub struct EncoderParams<S: Scalar> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn from_map(map: BTreeMap<String, Tensor<S>>) -> Self {
        EncoderParams { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: String, value: Tensor<S>) {
        self.map.insert(name, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Bit-level equality (distinguishes -0.0 from 0.0; params are finite).
    pub fn identical_bits(&self, other: &Self) -> bool {
        if self.map.len() != other.map.len() {
            return false;
        }
        self.map.iter().zip(other.map.iter()).all(|((an, at), (bn, bt))| {
            an == bn
                && at.shape() == bt.shape()
                && at
                    .data()
                    .iter()
                    .zip(bt.data().iter())
                    .all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
        })
    }

    /// Register every parameter as a tape leaf; `trainable` selects which
    /// paths receive gradients.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.map {
            let var = tape.leaf(tensor.clone(), trainable(name));
            vars.insert(name.clone(), var);
        }
        BoundParams { vars }
    }
}

/// Tape handles for a parameter map, keyed by parameter path.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, &v)| (n, v))
    }
}

/// Initialize a fresh parameter map: projection/embedding weights from a
/// truncated normal (std 0.02), biases zero, norm gains one, logit scale
/// ln(100). Deterministic given the seed.
pub fn init_params<S: Scalar>(
    vcfg: &VisionEncoderConfig,
    tcfg: &TextEncoderConfig,
    rng: &mut RngState,
) -> Result<EncoderParams<S>> {
    vcfg.validate()?;
    tcfg.validate()?;
    if vcfg.proj_dim != tcfg.proj_dim {
        return Err(Error::Config(format!(
            "vision proj_dim {} != text proj_dim {}",
            vcfg.proj_dim, tcfg.proj_dim
        )));
    }
    let mut map = BTreeMap::new();
    for (name, shape, kind) in param_specs(vcfg, tcfg) {
        let tensor = match kind {
            ParamKind::Weight => Tensor::trunc_normal(shape, 0.02, rng),
            ParamKind::Bias => Tensor::zeros(shape),
            ParamKind::Gain => Tensor::full(shape, S::ONE),
            ParamKind::LogitScale => Tensor::scalar(S::from_f64(logit_scale_init())),
        };
        map.insert(name, tensor);
    }
    Ok(EncoderParams { map })
}

/// The vision-tower Q/K/V projection parameter paths (weights and biases),
/// and nothing else.
pub fn qkv_param_names<S: Scalar>(params: &EncoderParams<S>) -> BTreeSet<String> {
    params
        .names()
        .filter(|n| {
            n.starts_with("vision.")
                && [".attn.q_proj.", ".attn.k_proj.", ".attn.v_proj."]
                    .iter()
                    .any(|frag| n.contains(frag))
        })
        .cloned()
        .collect()
}

/// x (b, t, d) @ w (d, o) + bias (o) -> (b, t, o)
fn linear_3d<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let (bs, t, d) = (shape[0], shape[1], shape[2]);
    let o = tape.value(w).shape()[1];
    let flat = tape.reshape(x, vec![bs * t, d])?;
    let proj = tape.matmul(flat, w)?;
    let biased = tape.add(proj, b)?;
    tape.reshape(biased, vec![bs, t, o])
}

const LN_EPS: f64 = 1e-5;

/// One pre-LN transformer block: attention then MLP, each with a residual.
fn block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let p = |name: &str| format!("{prefix}.{name}");
    let shape = tape.value(x).shape().to_vec();
    let d = shape[2];
    let head_dim = d / heads;

    let ln1g = params.var(&p("ln1.gain"))?;
    let ln1b = params.var(&p("ln1.bias"))?;
    let h = tape.layer_norm(x, ln1g, ln1b, LN_EPS)?;

    let proj = |tape: &mut Tape<S>, name: &str| -> Result<Var> {
        let w = params.var(&p(&format!("attn.{name}.weight")))?;
        let b = params.var(&p(&format!("attn.{name}.bias")))?;
        linear_3d(tape, h, w, b)
    };
    let q = proj(tape, "q_proj")?;
    let k = proj(tape, "k_proj")?;
    let v = proj(tape, "v_proj")?;

    let q = tape.split_heads(q, heads)?;
    let k = tape.split_heads(k, heads)?;
    let v = tape.split_heads(v, heads)?;
    let kt = tape.transpose_last(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let attended = match mask {
        Some(m) => tape.add(scaled, m)?,
        None => scaled,
    };
    let attn = tape.softmax_last(attended)?;
    let ctx = tape.matmul(attn, v)?;
    let merged = tape.merge_heads(ctx, heads)?;
    let ow = params.var(&p("attn.out_proj.weight"))?;
    let ob = params.var(&p("attn.out_proj.bias"))?;
    let attn_out = linear_3d(tape, merged, ow, ob)?;
    let x = tape.add(x, attn_out)?;

    let ln2g = params.var(&p("ln2.gain"))?;
    let ln2b = params.var(&p("ln2.bias"))?;
    let h2 = tape.layer_norm(x, ln2g, ln2b, LN_EPS)?;
    let f1w = params.var(&p("mlp.fc1.weight"))?;
    let f1b = params.var(&p("mlp.fc1.bias"))?;
    let f2w = params.var(&p("mlp.fc2.weight"))?;
    let f2b = params.var(&p("mlp.fc2.bias"))?;
    let f1 = linear_3d(tape, h2, f1w, f1b)?;
    let g = tape.gelu(f1);
    let f2 = linear_3d(tape, g, f2w, f2b)?;
    tape.add(x, f2)
}

/// Rearrange (b, c, h, w) images into flattened patch rows (b, p, patch_dim).
/// Patch vectors are channel-major, then row, then column within the patch.
fn patchify<S: Scalar>(images: &Tensor<S>, cfg: &VisionEncoderConfig) -> Result<Tensor<S>> {
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if images.rank() != 4 || images.shape()[1..] != want {
        return Err(Error::shape(
            "patchify",
            images.shape(),
            format!("expected (b, {}, {}, {})", want[0], want[1], want[2]),
        ));
    }
    let b = images.shape()[0];
    let (ps, grid, c, hw) = (cfg.patch_size, cfg.grid(), cfg.channels, cfg.image_size);
    let pd = cfg.patch_dim();
    let np = cfg.num_patches();
    let src = images.data();
    let mut out = vec![S::ZERO; b * np * pd];
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                let patch = gy * grid + gx;
                let dst_base = (bi * np + patch) * pd;
                let mut k = 0;
                for ch in 0..c {
                    for py in 0..ps {
                        let row = gy * ps + py;
                        let src_base = ((bi * c + ch) * hw + row) * hw + gx * ps;
                        for px in 0..ps {
                            out[dst_base + k] = src[src_base + px];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![b, np, pd], out)
}

/// Encode a batch of images to unnormalized (b, proj_dim) embeddings.
///
/// `_train_mode` is reserved; the architecture has no train-only layers.
pub fn encode_image<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams,
    cfg: &VisionEncoderConfig,
    images: &Tensor<S>,
    _train_mode: bool,
) -> Result<Var> {
    let patches = patchify(images, cfg)?;
    let b = patches.shape()[0];
    let (np, pd, w) = (cfg.num_patches(), cfg.patch_dim(), cfg.width);
    let patches = tape.constant(patches);
    let flat = tape.reshape(patches, vec![b * np, pd])?;
    let pw = params.var("vision.patch_embed.weight")?;
    let pb = params.var("vision.patch_embed.bias")?;
    let proj = tape.matmul(flat, pw)?;
    let proj = tape.add(proj, pb)?;
    let tokens = tape.reshape(proj, vec![b, np, w])?;
    let cls = params.var("vision.cls_token")?;
    let seq = tape.prepend_token(cls, tokens)?;
    let pos = params.var("vision.pos_embed")?;
    let mut x = tape.add(seq, pos)?;
    for i in 0..cfg.depth {
        x = block_forward(tape, params, &format!("vision.block{i}"), x, cfg.heads, None)?;
    }
    let lg = params.var("vision.ln_post.gain")?;
    let lb = params.var("vision.ln_post.bias")?;
    let x = tape.layer_norm(x, lg, lb, LN_EPS)?;
    let pooled = tape.gather_rows(x, &vec![0; b])?;
    let proj_w = params.var("vision.proj.weight")?;
    tape.matmul(pooled, proj_w)
}

const MASK_NEG: f64 = -1e9;

fn causal_mask<S: Scalar>(t: usize) -> Tensor<S> {
    let mut data = vec![S::ZERO; t * t];
    let neg = S::from_f64(MASK_NEG);
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = neg;
        }
    }
    Tensor::from_vec(vec![t, t], data).expect("causal mask shape")
}

/// Locate the single end-of-text token in each row of a (b, context) batch.
fn eot_positions(tokens: &[usize], batch: usize, context: usize, eot_id: usize) -> Result<Vec<usize>> {
    let mut positions = Vec::with_capacity(batch);
    for (row_idx, row) in tokens.chunks(context).enumerate() {
        let hits: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == eot_id)
            .map(|(i, _)| i)
            .collect();
        match hits.as_slice() {
            [one] => positions.push(*one),
            [] => {
                return Err(Error::Input(format!(
                    "sequence {row_idx} has no end-of-text token"
                )))
            }
            _ => {
                return Err(Error::Input(format!(
                    "sequence {row_idx} has {} end-of-text tokens",
                    hits.len()
                )))
            }
        }
    }
    Ok(positions)
}

/// Encode token sequences to unnormalized (b, proj_dim) embeddings, pooling
/// at each sequence's end-of-text position under a causal mask.
pub fn encode_text<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundParams,
    cfg: &TextEncoderConfig,
    tokens: &[usize],
    eot_id: usize,
) -> Result<Var> {
    let l = cfg.context_length;
    if tokens.is_empty() || tokens.len() % l != 0 {
        return Err(Error::Input(format!(
            "token buffer of {} ids is not a whole number of length-{l} sequences",
            tokens.len()
        )));
    }
    let b = tokens.len() / l;
    if let Some(&bad) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    let eots = eot_positions(tokens, b, l, eot_id)?;
    let table = params.var("text.token_embed.weight")?;
    let emb = tape.embed(table, tokens, &[b, l])?;
    let pos = params.var("text.pos_embed")?;
    let mut x = tape.add(emb, pos)?;
    let mask = tape.constant(causal_mask(l));
    for i in 0..cfg.depth {
        x = block_forward(
            tape,
            params,
            &format!("text.block{i}"),
            x,
            cfg.heads,
            Some(mask),
        )?;
    }
    let lg = params.var("text.ln_final.gain")?;
    let lb = params.var("text.ln_final.bias")?;
    let x = tape.layer_norm(x, lg, lb, LN_EPS)?;
    let pooled = tape.gather_rows(x, &eots)?;
    let proj_w = params.var("text.proj.weight")?;
    tape.matmul(pooled, proj_w)
}

/// Forward-only image encoding on a throwaway tape.
pub fn encode_image_eval<S: Scalar>(
    params: &EncoderParams<S>,
    cfg: &VisionEncoderConfig,
    images: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let out = encode_image(&mut tape, &bound, cfg, images, false)?;
    Ok(tape.value(out).clone())
}

/// Forward-only text encoding on a throwaway tape.
pub fn encode_text_eval<S: Scalar>(
    params: &EncoderParams<S>,
    cfg: &TextEncoderConfig,
    tokens: &[usize],
    eot_id: usize,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let out = encode_text(&mut tape, &bound, cfg, tokens, eot_id)?;
    Ok(tape.value(out).clone())
}
