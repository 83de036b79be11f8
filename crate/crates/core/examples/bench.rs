//! Rough throughput probe: seconds per training batch at the desk-scale
//! encoder sizes, for sizing experiment budgets.

use std::time::Instant;

use pi_core::data::{gen_pair_set, gen_triplet_set, Split};
use pi_core::encoders::{TextEncoderConfig, VisionEncoderConfig};
use pi_core::rng::RngState;
use pi_core::train::{train_stage1, train_stage2, Stage, Stage2Init, TrainConfig};

fn main() {
    let vision = VisionEncoderConfig::desk();
    let text = TextEncoderConfig::desk();
    let rng = RngState::new(0);

    let n = 256;
    let t0 = Instant::now();
    let triplets = gen_triplet_set(n, 0.1, vision.image_size, Split::Train, &rng, 1).unwrap();
    let val = gen_triplet_set(64, 0.1, vision.image_size, Split::Val, &rng, 1).unwrap();
    println!("triplet gen: {:.1} ms/record", t0.elapsed().as_secs_f64() * 1000.0 / (n + 64) as f64);

    let mut cfg = TrainConfig::defaults(Stage::Stage1, 0);
    cfg.epochs = 1;
    cfg.eval_every_samples = 1 << 40; // skip mid-run evals
    let t0 = Instant::now();
    let out = train_stage1(&cfg, &vision, &text, &triplets.records, &val.records).unwrap();
    let batches = n / cfg.batch_size;
    println!(
        "stage1: {:.3} s/batch (B={}), {} batches in {:.1}s",
        t0.elapsed().as_secs_f64() / batches as f64,
        cfg.batch_size,
        batches,
        t0.elapsed().as_secs_f64()
    );
    drop(out);

    let t0 = Instant::now();
    let pairs = gen_pair_set(n, vision.image_size, text.context_length, Split::Train, &rng, 1)
        .unwrap();
    println!("pair gen: {:.1} ms/record", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let mut cfg = TrainConfig::defaults(Stage::Baseline, 0);
    cfg.epochs = 1;
    cfg.eval_every_samples = 1 << 40;
    let t0 = Instant::now();
    let out = train_stage2(&cfg, &vision, &text, &pairs.records, Stage2Init::Random, None)
        .unwrap();
    println!(
        "stage2: {:.3} s/batch (B={}), {} batches in {:.1}s",
        t0.elapsed().as_secs_f64() / batches as f64,
        cfg.batch_size,
        batches,
        t0.elapsed().as_secs_f64()
    );
    drop(out);
}
