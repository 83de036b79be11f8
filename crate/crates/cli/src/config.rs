//! Config files: TOML documents where every key is optional and defaults to
//! the documented desk-scale setup. Unknown keys are rejected; parsing then
//! serializing yields a fully resolved document that round-trips byte-for-byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use pi_core::data::AugmentPolicy;
use pi_core::encoders::{TextEncoderConfig, VisionEncoderConfig};
use pi_core::train::{Stage, TrainConfig};
use pi_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding (or receiving) the generated datasets.
    pub dir: String,
    /// Seed for every data stream (training sets and eval probes).
    pub seed: u64,
    pub triplets: usize,
    pub val_triplets: usize,
    pub pairs: usize,
    /// Fraction of triplet judgments flipped against the latent oracle.
    pub noise_rate: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: "data".to_string(),
            seed: 0,
            triplets: 2000,
            val_triplets: 256,
            pairs: 20_000,
            noise_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Images per class in each classification probe.
    pub per_class: usize,
    /// Held-out image–caption pairs for retrieval.
    pub retrieval_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { per_class: 16, retrieval_pairs: 256 }
    }
}

/// Per-arm optimizer and schedule settings (the run-level fields of
/// `TrainConfig` — seed, ids, paths — are supplied at invocation time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_frac: f64,
    pub eval_every_samples: u64,
    pub margin: f64,
    pub qkv_weights_only: bool,
    pub augment: AugmentPolicy,
}

impl StageParams {
    pub fn stage_default(stage: Stage) -> StageParams {
        let d = TrainConfig::defaults(stage, 0);
        StageParams {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            weight_decay: d.weight_decay,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            warmup_frac: d.warmup_frac,
            eval_every_samples: d.eval_every_samples,
            margin: d.margin,
            qkv_weights_only: d.qkv_weights_only,
            augment: d.augment,
        }
    }

    pub fn to_train_config(
        &self,
        stage: Stage,
        run_id: &str,
        seed: u64,
        fixed_clock: bool,
        data_dir: &str,
    ) -> TrainConfig {
        TrainConfig {
            stage,
            run_id: run_id.to_string(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            warmup_frac: self.warmup_frac,
            seed,
            eval_every_samples: self.eval_every_samples,
            margin: self.margin,
            qkv_weights_only: self.qkv_weights_only,
            augment: self.augment.clone(),
            fixed_clock,
            data_dir: data_dir.to_string(),
            train_split: "train".to_string(),
            val_split: "val".to_string(),
        }
    }
}

/// Fully resolved configuration: what you get after defaults are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    /// Training seed: initialization, batch order, augmentation.
    pub seed: u64,
    /// Data-generation worker threads; 0 means use what the host offers.
    pub workers: usize,
    pub vision: VisionEncoderConfig,
    pub text: TextEncoderConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub stage1: StageParams,
    /// Shared by the PI chain's contrastive stage and the baseline arm.
    pub stage2: StageParams,
    pub posthoc: StageParams,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 0,
            workers: 0,
            vision: VisionEncoderConfig::desk(),
            text: TextEncoderConfig::desk(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            stage1: StageParams::stage_default(Stage::Stage1),
            stage2: StageParams::stage_default(Stage::Stage2),
            posthoc: StageParams::stage_default(Stage::Posthoc),
        }
    }
}

// ---------------------------------------------------------------------------
// Raw (partial) mirror: every key optional so sparse files inherit defaults.

macro_rules! resolve {
    ($raw:expr, $def:expr; $($field:ident),+ $(,)?) => {{
        let raw = $raw;
        let mut out = $def;
        $( if let Some(v) = raw.$field { out.$field = v; } )+
        out
    }};
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVision {
    image_size: Option<usize>,
    patch_size: Option<usize>,
    channels: Option<usize>,
    width: Option<usize>,
    depth: Option<usize>,
    heads: Option<usize>,
    mlp_ratio: Option<usize>,
    proj_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawText {
    vocab_size: Option<usize>,
    context_length: Option<usize>,
    width: Option<usize>,
    depth: Option<usize>,
    heads: Option<usize>,
    proj_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    dir: Option<String>,
    seed: Option<u64>,
    triplets: Option<usize>,
    val_triplets: Option<usize>,
    pairs: Option<usize>,
    noise_rate: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    per_class: Option<usize>,
    retrieval_pairs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAugment {
    crop_min_area: Option<f64>,
    jitter_strength: Option<f64>,
    grayscale_prob: Option<f64>,
    blur_prob: Option<f64>,
    blur_sigma_max: Option<f64>,
    hflip_prob: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStage {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    warmup_frac: Option<f64>,
    eval_every_samples: Option<u64>,
    margin: Option<f64>,
    qkv_weights_only: Option<bool>,
    #[serde(default)]
    augment: RawAugment,
}

impl RawStage {
    fn resolve(mut self, mut def: StageParams) -> StageParams {
        let raw_augment = std::mem::take(&mut self.augment);
        def.augment = resolve!(raw_augment, def.augment;
            crop_min_area, jitter_strength, grayscale_prob, blur_prob,
            blur_sigma_max, hflip_prob);
        resolve!(self, def;
            epochs, batch_size, lr, weight_decay, beta1, beta2, eps,
            warmup_frac, eval_every_samples, margin, qkv_weights_only)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAppConfig {
    seed: Option<u64>,
    workers: Option<usize>,
    #[serde(default)]
    vision: RawVision,
    #[serde(default)]
    text: RawText,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    eval: RawEval,
    #[serde(default)]
    stage1: RawStage,
    #[serde(default)]
    stage2: RawStage,
    #[serde(default)]
    posthoc: RawStage,
}

/// Parses a TOML document, applying defaults for every absent key.
pub fn parse_config(text: &str) -> Result<AppConfig> {
    let raw: RawAppConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    let def = AppConfig::default();
    let cfg = AppConfig {
        seed: raw.seed.unwrap_or(def.seed),
        workers: raw.workers.unwrap_or(def.workers),
        vision: resolve!(raw.vision, def.vision;
            image_size, patch_size, channels, width, depth, heads, mlp_ratio, proj_dim),
        text: resolve!(raw.text, def.text;
            vocab_size, context_length, width, depth, heads, proj_dim),
        data: resolve!(raw.data, def.data;
            dir, seed, triplets, val_triplets, pairs, noise_rate),
        eval: resolve!(raw.eval, def.eval; per_class, retrieval_pairs),
        stage1: raw.stage1.resolve(def.stage1),
        stage2: raw.stage2.resolve(def.stage2),
        posthoc: raw.posthoc.resolve(def.posthoc),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<AppConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Serializes a resolved config; `parse_config(serialize_config(c))` is the
/// identity and repeated round trips are byte-identical.
pub fn serialize_config(cfg: &AppConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("config serialize error: {e}")))
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision
            .validate()
            .map_err(|e| Error::Config(format!("[vision]: {e}")))?;
        self.text
            .validate()
            .map_err(|e| Error::Config(format!("[text]: {e}")))?;
        if self.vision.proj_dim != self.text.proj_dim {
            return Err(Error::Config(format!(
                "[vision].proj_dim {} must match [text].proj_dim {}",
                self.vision.proj_dim, self.text.proj_dim
            )));
        }
        if self.data.dir.is_empty() {
            return Err(Error::Config("[data].dir must not be empty".to_string()));
        }
        if !(0.0..0.5).contains(&self.data.noise_rate) {
            return Err(Error::Config(format!(
                "[data].noise_rate {} outside [0, 0.5)",
                self.data.noise_rate
            )));
        }
        for (name, n) in [
            ("[data].triplets", self.data.triplets),
            ("[data].val_triplets", self.data.val_triplets),
            ("[data].pairs", self.data.pairs),
            ("[eval].per_class", self.eval.per_class),
            ("[eval].retrieval_pairs", self.eval.retrieval_pairs),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (section, params, stage) in [
            ("[stage1]", &self.stage1, Stage::Stage1),
            ("[stage2]", &self.stage2, Stage::Stage2),
            ("[posthoc]", &self.posthoc, Stage::Posthoc),
        ] {
            params
                .to_train_config(stage, "validate", 0, true, "")
                .validate()
                .map_err(|e| Error::Config(format!("{section}: {e}")))?;
        }
        if self.data.triplets < self.stage1.batch_size {
            return Err(Error::Config(format!(
                "[data].triplets {} smaller than [stage1].batch_size {}",
                self.data.triplets, self.stage1.batch_size
            )));
        }
        if self.data.pairs < self.stage2.batch_size {
            return Err(Error::Config(format!(
                "[data].pairs {} smaller than [stage2].batch_size {}",
                self.data.pairs, self.stage2.batch_size
            )));
        }
        Ok(())
    }
}

/// Data-generation worker count: config value (0 = host parallelism),
/// capped by the `PI_NUM_WORKERS` environment variable when set.
pub fn worker_count(configured: usize) -> usize {
    let base = if configured > 0 {
        configured
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    };
    let capped = match std::env::var("PI_NUM_WORKERS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(cap) if cap > 0 => base.min(cap),
            _ => {
                log::warn!("ignoring unparsable PI_NUM_WORKERS={v:?}");
                base
            }
        },
        Err(_) => base,
    };
    capped.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_documented_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, AppConfig::default());
        assert_eq!(cfg.vision, VisionEncoderConfig::desk());
        assert_eq!(cfg.stage1.epochs, 32);
        assert_eq!(cfg.stage2.epochs, 32);
        assert_eq!(cfg.posthoc.epochs, 8);
        assert_eq!(cfg.stage1.lr, 3e-4);
        assert_eq!(cfg.stage2.lr, 1e-3);
        assert_eq!(cfg.data.triplets, 2000);
        assert_eq!(cfg.data.pairs, 20_000);
    }

    #[test]
    fn sparse_sections_override_only_named_keys() {
        let cfg = parse_config(
            "seed = 7\n[stage2]\nepochs = 3\n[stage2.augment]\nhflip_prob = 0.0\n[vision]\nwidth = 32\nheads = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.stage2.epochs, 3);
        assert_eq!(cfg.stage2.augment.hflip_prob, 0.0);
        assert_eq!(cfg.stage2.augment.grayscale_prob, AppConfig::default().stage2.augment.grayscale_prob);
        assert_eq!(cfg.stage2.batch_size, 64);
        assert_eq!(cfg.vision.width, 32);
        assert_eq!(cfg.vision.image_size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = parse_config("[stage1]\nlearning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn type_and_constraint_errors_name_the_key() {
        let err = parse_config("[stage1]\nepochs = -1\n").unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");

        let err = parse_config("[stage1]\nepochs = 0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[stage1]") && msg.contains("epochs"), "{msg}");

        let err = parse_config("[data]\nnoise_rate = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("noise_rate"), "{err}");

        let err = parse_config("[stage2]\nbatch_size = 1\n").unwrap_err();
        assert!(err.to_string().contains("batch size"), "{err}");
    }

    #[test]
    fn serialize_then_parse_is_identity_and_idempotent() {
        let cfg = parse_config("[stage1]\nepochs = 5\n[data]\nnoise_rate = 0.25\n").unwrap();
        let once = serialize_config(&cfg).unwrap();
        let reparsed = parse_config(&once).unwrap();
        assert_eq!(reparsed, cfg);
        let twice = serialize_config(&reparsed).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn mismatched_projection_dims_are_caught() {
        let err = parse_config("[vision]\nproj_dim = 32\n").unwrap_err();
        assert!(err.to_string().contains("proj_dim"), "{err}");
    }

    #[test]
    fn worker_count_respects_environment_cap() {
        // no env manipulation (tests run in parallel); exercise config paths
        assert!(worker_count(0) >= 1);
        assert_eq!(worker_count(3).min(3), worker_count(3));
    }
}
