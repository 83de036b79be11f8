//! Training pipeline: the four experimental arms (perceptual initialization,
//! contrastive pretraining, random-init baseline, post-hoc QKV fine-tuning),
//! plus metric logging and learning-rate scheduling.

mod adamw;
mod checkpoint;

pub use adamw::{weight_decay_exempt, AdamWHyper, AdamWState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, OptSnapshot, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{augment, normalize, AugmentPolicy, CaptionRecord, TripletRecord, EOT_ID};
use crate::encoders::{
    encode_image, encode_image_eval, encode_text, init_params, qkv_param_names, BoundParams,
    EncoderParams, TextEncoderConfig, VisionEncoderConfig, INV_TAU_MAX, INV_TAU_MIN, LOGIT_SCALE,
};
use crate::error::{Error, Result};
use crate::objectives::{
    infonce_from_embeddings, perceptual_triplet_loss, two_afc_accuracy, DEFAULT_MARGIN,
};
use crate::rng::RngState;
use crate::tensor::{Gradients, Scalar as _, Tape, Tensor};

// Stream labels for the run-level RNG forks.
const LBL_INIT: u64 = 0x494e_4954;
const LBL_ORDER: u64 = 0x4f52_4452;
const LBL_AUG: u64 = 0x4155_474d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
    Baseline,
    Posthoc,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Baseline => "baseline",
            Stage::Posthoc => "posthoc",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "baseline" => Ok(Stage::Baseline),
            "posthoc" => Ok(Stage::Posthoc),
            other => Err(Error::Input(format!(
                "unknown stage {other:?}; expected stage1|stage2|baseline|posthoc"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub run_id: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of total steps spent in linear warmup before cosine decay.
    pub warmup_frac: f64,
    pub seed: u64,
    /// First evaluation milestone; later ones double until training ends.
    pub eval_every_samples: u64,
    /// Triplet margin for the perceptual stages.
    pub margin: f64,
    /// Restrict post-hoc fine-tuning to QKV weights, excluding biases.
    pub qkv_weights_only: bool,
    /// Image augmentation for the contrastive stage. Perceptual stages feed
    /// the encoder normalized frames only, since crops and flips would
    /// corrupt the similarity ground truth.
    pub augment: AugmentPolicy,
    /// Report all wall times as zero so logs are byte-reproducible.
    pub fixed_clock: bool,
    /// Dataset location, recorded for provenance; loading happens upstream.
    pub data_dir: String,
    pub train_split: String,
    pub val_split: String,
}

impl TrainConfig {
    pub fn defaults(stage: Stage, seed: u64) -> TrainConfig {
        let (epochs, lr) = match stage {
            Stage::Stage1 => (32, 3e-4),
            Stage::Stage2 | Stage::Baseline => (32, 1e-3),
            Stage::Posthoc => (8, 1e-4),
        };
        TrainConfig {
            stage,
            run_id: format!("{}-s{seed}", stage.as_str()),
            epochs,
            batch_size: 64,
            lr,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup_frac: 0.1,
            seed,
            eval_every_samples: 2048,
            margin: DEFAULT_MARGIN,
            qkv_weights_only: false,
            augment: AugmentPolicy {
                crop_min_area: 0.85,
                jitter_strength: 0.2,
                grayscale_prob: 0.05,
                blur_prob: 0.1,
                blur_sigma_max: 0.8,
                hflip_prob: 0.5,
            },
            fixed_clock: false,
            data_dir: "data".to_string(),
            train_split: "train".to_string(),
            val_split: "val".to_string(),
        }
    }

    pub fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(',') || self.run_id.contains('\n') {
            return Err(Error::Config(format!(
                "run id {:?} must be non-empty and free of commas/newlines",
                self.run_id
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".to_string()));
        }
        let min_batch = match self.stage {
            Stage::Stage2 | Stage::Baseline => 2,
            _ => 1,
        };
        if self.batch_size < min_batch {
            return Err(Error::Config(format!(
                "batch size {} too small for {} (need at least {min_batch})",
                self.batch_size,
                self.stage.as_str()
            )));
        }
        self.hyper().validate()?;
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside [0,1]",
                self.warmup_frac
            )));
        }
        if self.eval_every_samples == 0 {
            return Err(Error::Config("eval_every_samples must be positive".to_string()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin {} must be positive", self.margin)));
        }
        self.augment.validate()?;
        Ok(())
    }
}

/// Learning rate at a 0-based step: linear warmup over the first
/// `warmup_frac` of `total` steps, then cosine decay.
pub fn lr_at(base: f64, step: u64, total: u64, warmup_frac: f64) -> f64 {
    let total = total.max(1);
    let warmup = ((total as f64) * warmup_frac).floor() as u64;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if total == warmup {
        return base;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Geometrically spaced evaluation milestones: 0, first, 2·first, … plus the
/// final sample count, so log-scale plots get evenly spaced points.
pub fn eval_milestones(first: u64, total: u64) -> Result<Vec<u64>> {
    if first == 0 {
        return Err(Error::Config("first milestone must be positive".to_string()));
    }
    let mut points = vec![0];
    let mut m = first;
    while m < total {
        points.push(m);
        m = m.saturating_mul(2);
    }
    if total > 0 {
        points.push(total);
    }
    points.dedup();
    Ok(points)
}

struct Milestones {
    points: Vec<u64>,
    next: usize,
}

impl Milestones {
    fn new(first: u64, total: u64) -> Result<Milestones> {
        Ok(Milestones { points: eval_milestones(first, total)?, next: 0 })
    }

    /// True when at least one milestone is at or below `samples_seen`;
    /// consumes all such milestones so each eval happens once.
    fn due(&mut self, samples_seen: u64) -> bool {
        let mut hit = false;
        while self.next < self.points.len() && self.points[self.next] <= samples_seen {
            self.next += 1;
            hit = true;
        }
        hit
    }
}

struct Clock {
    start: Instant,
    fixed: bool,
}

impl Clock {
    fn new(fixed: bool) -> Clock {
        Clock { start: Instant::now(), fixed }
    }

    fn now(&self) -> f64 {
        if self.fixed {
            0.0
        } else {
            self.start.elapsed().as_secs_f64()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub run_id: String,
    pub stage: String,
    pub samples_seen: u64,
    pub metric: String,
    pub value: f64,
    pub wall_time: f64,
}

pub const METRICS_HEADER: &str = "run_id,stage,samples_seen,metric,value,wall_time";

impl MetricRecord {
    pub fn to_csv_row(&self) -> Result<String> {
        for field in [&self.run_id, &self.stage, &self.metric] {
            if field.contains(',') || field.contains('\n') {
                return Err(Error::Input(format!(
                    "metric field {field:?} contains a delimiter"
                )));
            }
        }
        Ok(format!(
            "{},{},{},{},{},{}",
            self.run_id, self.stage, self.samples_seen, self.metric, self.value, self.wall_time
        ))
    }

    pub fn from_csv_row(line: &str) -> Result<MetricRecord> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Format(format!(
                "metric row has {} fields, expected 6: {line:?}",
                parts.len()
            )));
        }
        Ok(MetricRecord {
            run_id: parts[0].to_string(),
            stage: parts[1].to_string(),
            samples_seen: parts[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad samples_seen in {line:?}")))?,
            metric: parts[3].to_string(),
            value: parts[4]
                .parse()
                .map_err(|_| Error::Format(format!("bad value in {line:?}")))?,
            wall_time: parts[5]
                .parse()
                .map_err(|_| Error::Format(format!("bad wall_time in {line:?}")))?,
        })
    }
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row()?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Appends records, creating the file (with header) first if needed.
pub fn append_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    if !path.exists() {
        return write_metrics_csv(path, records);
    }
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_csv_row()?);
        out.push('\n');
    }
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "bad metrics header {other:?}; expected {METRICS_HEADER:?}"
            )))
        }
    }
    lines.map(MetricRecord::from_csv_row).collect()
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
}

/// Callback invoked at evaluation milestones with (samples_seen, params);
/// returns (metric name, value) pairs to log.
pub type EvalHook<'a> = dyn FnMut(u64, &EncoderParams<f32>) -> Result<Vec<(String, f64)>> + 'a;

/// Initialization used by every arm for a given seed. The baseline arm
/// starts from exactly the bits Stage 1 started from, so arm comparisons are
/// seed-matched.
pub fn init_for_run(
    seed: u64,
    vision: &VisionEncoderConfig,
    text: &TextEncoderConfig,
) -> Result<EncoderParams<f32>> {
    let mut rng = RngState::new(seed).fork(LBL_INIT, 0);
    init_params(vision, text, &mut rng)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = RngState::new(seed).fork(LBL_ORDER, epoch as u64);
    rng.shuffle(&mut idx);
    idx
}

fn collect_grads(
    grads: &Gradients<f32>,
    bound: &BoundParams,
    trainable: &BTreeSet<String>,
) -> BTreeMap<String, Tensor<f32>> {
    bound
        .iter()
        .filter(|(name, _)| trainable.contains(*name))
        .filter_map(|(name, var)| grads.get(var).map(|g| (name.clone(), g.clone())))
        .collect()
}

/// 2AFC accuracy of a parameter set over a triplet list, evaluated in
/// forward-only chunks.
pub fn triplet_two_afc(
    params: &EncoderParams<f32>,
    vision: &VisionEncoderConfig,
    triplets: &[TripletRecord],
    chunk: usize,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Input("2afc evaluation needs at least one triplet".to_string()));
    }
    let chunk = chunk.max(1);
    let proj = vision.proj_dim;
    let mut ex = Vec::with_capacity(triplets.len() * proj);
    let mut e0 = Vec::with_capacity(triplets.len() * proj);
    let mut e1 = Vec::with_capacity(triplets.len() * proj);
    for part in triplets.chunks(chunk) {
        for (pick, out) in [
            (0usize, &mut ex),
            (1usize, &mut e0),
            (2usize, &mut e1),
        ] {
            let imgs: Vec<Tensor<f32>> = part
                .iter()
                .map(|r| {
                    normalize(match pick {
                        0 => &r.x,
                        1 => &r.v0,
                        _ => &r.v1,
                    })
                })
                .collect::<Result<_>>()?;
            let emb = encode_image_eval(params, vision, &Tensor::stack(&imgs)?)?;
            out.extend_from_slice(emb.data());
        }
    }
    let n = triplets.len();
    let ys: Vec<u8> = triplets.iter().map(|r| r.y).collect();
    two_afc_accuracy(
        &Tensor::from_vec(vec![n, proj], ex)?,
        &Tensor::from_vec(vec![n, proj], e0)?,
        &Tensor::from_vec(vec![n, proj], e1)?,
        &ys,
    )
}

fn push_record(
    records: &mut Vec<MetricRecord>,
    cfg: &TrainConfig,
    clock: &Clock,
    samples_seen: u64,
    metric: &str,
    value: f64,
) {
    records.push(MetricRecord {
        run_id: cfg.run_id.clone(),
        stage: cfg.stage.as_str().to_string(),
        samples_seen,
        metric: metric.to_string(),
        value,
        wall_time: clock.now(),
    });
}

/// Shared state for the triplet-loss stages (stage 1 and post-hoc).
fn run_triplet_stage(
    cfg: &TrainConfig,
    vision: &VisionEncoderConfig,
    text: &TextEncoderConfig,
    mut params: EncoderParams<f32>,
    trainable: BTreeSet<String>,
    provenance: Vec<String>,
    train: &[TripletRecord],
    val: &[TripletRecord],
) -> Result<TrainOutput> {
    let b = cfg.batch_size;
    let per_epoch = train.len() / b;
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {b} exceeds the {}-record training set",
            train.len()
        )));
    }
    let total_steps = (cfg.epochs * per_epoch) as u64;
    let total_samples = total_steps * b as u64;
    let mut milestones = Milestones::new(cfg.eval_every_samples, total_samples)?;
    let clock = Clock::new(cfg.fixed_clock);
    let mut opt = AdamWState::new(cfg.hyper())?;
    let mut records = Vec::new();
    let mut samples_seen = 0u64;
    let mut step = 0u64;

    if milestones.due(0) {
        let acc = triplet_two_afc(&params, vision, val, b)?;
        push_record(&mut records, cfg, &clock, 0, "2afc-val", acc);
    }

    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(b).take(per_epoch) {
            let pick = |f: fn(&TripletRecord) -> &Tensor<f32>| -> Result<Tensor<f32>> {
                let imgs: Vec<Tensor<f32>> = batch
                    .iter()
                    .map(|&i| normalize(f(&train[i])))
                    .collect::<Result<_>>()?;
                Tensor::stack(&imgs)
            };
            let xs = pick(|r| &r.x)?;
            let v0s = pick(|r| &r.v0)?;
            let v1s = pick(|r| &r.v1)?;
            let ys: Vec<u8> = batch.iter().map(|&i| train[i].y).collect();

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |name| trainable.contains(name));
            let ex = encode_image(&mut tape, &bound, vision, &xs, true)?;
            let e0 = encode_image(&mut tape, &bound, vision, &v0s, true)?;
            let e1 = encode_image(&mut tape, &bound, vision, &v1s, true)?;
            let loss = perceptual_triplet_loss(&mut tape, ex, e0, e1, &ys, cfg.margin)?;
            let loss_val = tape.value(loss).scalar_value()?.to_f64();
            if !loss_val.is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite training loss at step {step}"
                )));
            }
            let grads = tape.backward(loss)?;
            let grad_map = collect_grads(&grads, &bound, &trainable);
            let lr_now = lr_at(cfg.lr, step, total_steps, cfg.warmup_frac);
            opt.step(&mut params, &trainable, &grad_map, lr_now)?;

            loss_sum += loss_val;
            step += 1;
            samples_seen += b as u64;
            if milestones.due(samples_seen) {
                let acc = triplet_two_afc(&params, vision, val, b)?;
                push_record(&mut records, cfg, &clock, samples_seen, "2afc-val", acc);
            }
        }
        push_record(
            &mut records,
            cfg,
            &clock,
            samples_seen,
            "train-loss",
            loss_sum / per_epoch as f64,
        );
        log::info!(
            "{} epoch {epoch}: mean loss {:.4}",
            cfg.run_id,
            loss_sum / per_epoch as f64
        );
    }

    let checkpoint = Checkpoint {
        vision: vision.clone(),
        text: text.clone(),
        params,
        opt: Some(OptSnapshot::from_state(&opt)),
        rng_seed: cfg.seed,
        samples_seen,
        provenance,
    };
    Ok(TrainOutput { checkpoint, metrics: records })
}

/// Stage 1: perceptual initialization. Trains only the vision tower on
/// triplet judgments; the text tower and logit scale keep their initial bits.
pub fn train_stage1(
    cfg: &TrainConfig,
    vision: &VisionEncoderConfig,
    text: &TextEncoderConfig,
    train: &[TripletRecord],
    val: &[TripletRecord],
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.stage != Stage::Stage1 {
        return Err(Error::Config(format!(
            "train_stage1 called with stage {:?}",
            cfg.stage.as_str()
        )));
    }
    let params = init_for_run(cfg.seed, vision, text)?;
    let trainable: BTreeSet<String> = params
        .names()
        .filter(|n| n.starts_with("vision."))
        .cloned()
        .collect();
    run_triplet_stage(
        cfg,
        vision,
        text,
        params,
        trainable,
        vec![Stage::Stage1.as_str().to_string()],
        train,
        val,
    )
}

/// Initialization source for the contrastive stage.
pub enum Stage2Init<'a> {
    /// Fresh parameters from the run seed (the baseline arm).
    Random,
    /// Continue from a previous stage's checkpoint.
    FromCheckpoint(&'a Checkpoint),
}

/// Stage 2: contrastive pretraining over image–caption pairs. Trains both
/// towers and the logit scale jointly.
pub fn train_stage2(
    cfg: &TrainConfig,
    vision: &VisionEncoderConfig,
    text: &TextEncoderConfig,
    pairs: &[CaptionRecord],
    init: Stage2Init,
    mut eval_hook: Option<&mut EvalHook>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if !matches!(cfg.stage, Stage::Stage2 | Stage::Baseline) {
        return Err(Error::Config(format!(
            "train_stage2 called with stage {:?}",
            cfg.stage.as_str()
        )));
    }
    let (mut params, mut provenance) = match init {
        Stage2Init::Random => (init_for_run(cfg.seed, vision, text)?, Vec::new()),
        Stage2Init::FromCheckpoint(c) => {
            if &c.vision != vision || &c.text != text {
                return Err(Error::Config(
                    "checkpoint encoder configs do not match this run".to_string(),
                ));
            }
            (c.params.clone(), c.provenance.clone())
        }
    };
    provenance.push(cfg.stage.as_str().to_string());

    for (i, rec) in pairs.iter().enumerate() {
        if rec.tokens.len() != text.context_length {
            return Err(Error::Input(format!(
                "pair {i} has {} tokens; text context length is {}",
                rec.tokens.len(),
                text.context_length
            )));
        }
    }

    let b = cfg.batch_size;
    let per_epoch = pairs.len() / b;
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {b} exceeds the {}-record pair set",
            pairs.len()
        )));
    }
    let total_steps = (cfg.epochs * per_epoch) as u64;
    let total_samples = total_steps * b as u64;
    let mut milestones = Milestones::new(cfg.eval_every_samples, total_samples)?;
    let clock = Clock::new(cfg.fixed_clock);
    let trainable: BTreeSet<String> = params.names().cloned().collect();
    let mut opt = AdamWState::new(cfg.hyper())?;
    let mut records = Vec::new();
    let base_rng = RngState::new(cfg.seed);
    let mut samples_seen = 0u64;
    let mut step = 0u64;

    let run_hook = |records: &mut Vec<MetricRecord>,
                        hook: &mut Option<&mut EvalHook>,
                        clock: &Clock,
                        samples: u64,
                        params: &EncoderParams<f32>|
     -> Result<()> {
        if let Some(h) = hook.as_mut() {
            for (metric, value) in h(samples, params)? {
                records.push(MetricRecord {
                    run_id: cfg.run_id.clone(),
                    stage: cfg.stage.as_str().to_string(),
                    samples_seen: samples,
                    metric,
                    value,
                    wall_time: clock.now(),
                });
            }
        }
        Ok(())
    };

    if milestones.due(0) {
        run_hook(&mut records, &mut eval_hook, &clock, 0, &params)?;
    }

    for epoch in 0..cfg.epochs {
        let order = epoch_order(pairs.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(b).take(per_epoch) {
            let mut imgs = Vec::with_capacity(b);
            let mut tokens = Vec::with_capacity(b * text.context_length);
            for &i in batch {
                let mut aug_rng = base_rng.fork(LBL_AUG + epoch as u64, i as u64);
                imgs.push(augment(&pairs[i].image, &cfg.augment, &mut aug_rng)?);
                tokens.extend_from_slice(&pairs[i].tokens);
            }
            let images = Tensor::stack(&imgs)?;

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |name| trainable.contains(name));
            let img_emb = encode_image(&mut tape, &bound, vision, &images, true)?;
            let txt_emb = encode_text(&mut tape, &bound, text, &tokens, EOT_ID)?;
            let ls = bound.var(LOGIT_SCALE)?;
            let exp_ls = tape.exp(ls);
            let inv_tau = tape.clamp(exp_ls, INV_TAU_MIN, INV_TAU_MAX);
            let loss = infonce_from_embeddings(&mut tape, img_emb, txt_emb, inv_tau)?;
            let loss_val = tape.value(loss).scalar_value()?.to_f64();
            if !loss_val.is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite training loss at step {step}"
                )));
            }
            if step == 0 {
                push_record(&mut records, cfg, &clock, 0, "init-loss", loss_val);
            }
            let grads = tape.backward(loss)?;
            let grad_map = collect_grads(&grads, &bound, &trainable);
            let lr_now = lr_at(cfg.lr, step, total_steps, cfg.warmup_frac);
            opt.step(&mut params, &trainable, &grad_map, lr_now)?;

            loss_sum += loss_val;
            step += 1;
            samples_seen += b as u64;
            if milestones.due(samples_seen) {
                run_hook(&mut records, &mut eval_hook, &clock, samples_seen, &params)?;
            }
        }
        push_record(
            &mut records,
            cfg,
            &clock,
            samples_seen,
            "train-loss",
            loss_sum / per_epoch as f64,
        );
        log::info!(
            "{} epoch {epoch}: mean loss {:.4}",
            cfg.run_id,
            loss_sum / per_epoch as f64
        );
    }

    let checkpoint = Checkpoint {
        vision: vision.clone(),
        text: text.clone(),
        params,
        opt: Some(OptSnapshot::from_state(&opt)),
        rng_seed: cfg.seed,
        samples_seen,
        provenance,
    };
    Ok(TrainOutput { checkpoint, metrics: records })
}

/// Post-hoc control: fine-tune only the vision QKV projections on triplet
/// judgments, starting from a contrastively trained checkpoint. Everything
/// else keeps its bits.
pub fn finetune_posthoc(
    cfg: &TrainConfig,
    train: &[TripletRecord],
    val: &[TripletRecord],
    init: &Checkpoint,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.stage != Stage::Posthoc {
        return Err(Error::Config(format!(
            "finetune_posthoc called with stage {:?}",
            cfg.stage.as_str()
        )));
    }
    let contrastive = init
        .provenance
        .iter()
        .any(|s| s == Stage::Stage2.as_str() || s == Stage::Baseline.as_str());
    if !contrastive {
        return Err(Error::Config(format!(
            "post-hoc fine-tuning requires a contrastively trained checkpoint; provenance is {:?}",
            init.provenance
        )));
    }
    let params = init.params.clone();
    let mut trainable = qkv_param_names(&params);
    if cfg.qkv_weights_only {
        trainable.retain(|n| n.ends_with(".weight"));
    }
    let mut provenance = init.provenance.clone();
    provenance.push(Stage::Posthoc.as_str().to_string());
    run_triplet_stage(
        cfg,
        &init.vision,
        &init.text,
        params,
        trainable,
        provenance,
        train,
        val,
    )
}
