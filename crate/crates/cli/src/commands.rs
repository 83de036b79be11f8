//! Command implementations. Each public `cmd_*` function performs one CLI
//! invocation's work and writes exactly one run manifest listing every file
//! it created (datasets included when this run generated them).

use std::fs;
use std::path::{Path, PathBuf};

use pi_core::data::{classification_probes, retrieval_probe, ClassProbe, PairSet};
use pi_core::encoders::{EncoderParams, TextEncoderConfig, VisionEncoderConfig};
use pi_core::eval::{
    classification_records, family_means, headline_top1, read_eval_csv, retrieval_records,
    write_eval_csv, EvalRecord,
};
use pi_core::rng::RngState;
use pi_core::scaling::{
    curve_from_metrics, export_plot_data, read_fits_csv, write_fits_csv, PowerLawFit,
};
use pi_core::train::{
    finetune_posthoc, load_checkpoint, read_metrics_csv, save_checkpoint, train_stage1,
    train_stage2, write_metrics_csv, MetricRecord, Stage, Stage2Init,
};
use pi_core::{Error, Result};

use crate::config::{serialize_config, worker_count, AppConfig, StageParams};
use crate::data::{checksum_datasets, ensure_datasets, generate_datasets, load_train_pairs,
    load_train_triplets, load_val_triplets};
use crate::manifest::RunManifest;
use crate::report::{render_report, ReportInputs};

/// Metric whose curve the scaling fits and the report's β summary use.
pub const HEADLINE_METRIC: &str = "zs-top1-headline";

/// Resolved invocation context shared by every command.
pub struct Ctx {
    pub config: AppConfig,
    /// Run seed (initialization, batch order, augmentation).
    pub seed: u64,
    pub out: PathBuf,
    pub fixed_clock: bool,
}

impl Ctx {
    fn config_text(&self) -> Result<String> {
        serialize_config(&self.config)
    }

    fn workers(&self) -> usize {
        worker_count(self.config.workers)
    }

    fn data_dir(&self) -> PathBuf {
        PathBuf::from(&self.config.data.dir)
    }
}

/// Run identifier for one training arm under one seed.
pub fn run_id_for(stage: Stage, seed: u64) -> String {
    match stage {
        Stage::Stage1 => format!("stage1-s{seed}"),
        Stage::Stage2 => format!("pi-s{seed}"),
        Stage::Baseline => format!("base-s{seed}"),
        Stage::Posthoc => format!("posthoc-s{seed}"),
    }
}

// ---------------------------------------------------------------------------
// Evaluation probes

/// Held-out evaluation sets, regenerated deterministically from the data seed
/// rather than stored on disk.
pub struct ProbeSuite {
    pub class_probes: Vec<ClassProbe>,
    pub retrieval: PairSet,
}

pub fn build_probes(cfg: &AppConfig) -> Result<ProbeSuite> {
    let rng = RngState::new(cfg.data.seed);
    Ok(ProbeSuite {
        class_probes: classification_probes(cfg.eval.per_class, cfg.vision.image_size, &rng)?,
        retrieval: retrieval_probe(
            cfg.eval.retrieval_pairs,
            cfg.vision.image_size,
            cfg.text.context_length,
            &rng,
        )?,
    })
}

/// Full per-dataset evaluation records for one set of parameters.
fn eval_records_for(
    params: &EncoderParams<f32>,
    vision: &VisionEncoderConfig,
    text: &TextEncoderConfig,
    suite: &ProbeSuite,
    run_id: &str,
) -> Result<Vec<EvalRecord>> {
    let mut records =
        classification_records(params, vision, text, &suite.class_probes, run_id)?;
    records.extend(retrieval_records(params, vision, text, &suite.retrieval, run_id)?);
    Ok(records)
}

/// Milestone metrics logged during contrastive training: per-family zero-shot
/// top-1, the headline aggregate, and retrieval recalls.
fn hook_metrics(
    params: &EncoderParams<f32>,
    vision: &VisionEncoderConfig,
    text: &TextEncoderConfig,
    suite: &ProbeSuite,
) -> Result<Vec<(String, f64)>> {
    let records = classification_records(params, vision, text, &suite.class_probes, "hook")?;
    let mut out: Vec<(String, f64)> = Vec::new();
    for (family, mean) in family_means(&records, "zs-top1")? {
        out.push((format!("zs-top1-{family}"), mean));
    }
    out.push((HEADLINE_METRIC.to_string(), headline_top1(&records)?));
    for r in retrieval_records(params, vision, text, &suite.retrieval, "hook")? {
        out.push((r.metric, r.value));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// gen-data

pub fn cmd_gen_data(ctx: &Ctx) -> Result<()> {
    let dir = &ctx.out;
    let mut manifest = RunManifest::new("gen-data", ctx.config_text()?, ctx.fixed_clock);
    let written = generate_datasets(&ctx.config, dir, ctx.workers())?;
    for f in &written {
        manifest.add_output(dir, f);
    }
    manifest.dataset_checksums = checksum_datasets(dir)?;
    let path = manifest.finish(dir, ctx.fixed_clock)?;
    log::info!("wrote {} dataset files; manifest {}", written.len(), path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

struct ArmArtifacts {
    checkpoint: PathBuf,
    metrics: PathBuf,
}

/// Trains one arm and writes its checkpoint + metric CSV under `ctx.out`.
/// Datasets must already exist; manifests are the caller's responsibility.
fn run_training_arm(
    ctx: &Ctx,
    stage: Stage,
    init: Option<&Path>,
    run_id: &str,
) -> Result<ArmArtifacts> {
    let params_for: &StageParams = match stage {
        Stage::Stage1 => &ctx.config.stage1,
        Stage::Stage2 | Stage::Baseline => &ctx.config.stage2,
        Stage::Posthoc => &ctx.config.posthoc,
    };
    let cfg = params_for.to_train_config(
        stage,
        run_id,
        ctx.seed,
        ctx.fixed_clock,
        &ctx.config.data.dir,
    );
    let vision = &ctx.config.vision;
    let text = &ctx.config.text;
    let data_dir = ctx.data_dir();
    log::info!("training {run_id} ({} epochs)", cfg.epochs);

    let output = match stage {
        Stage::Stage1 => {
            let train = load_train_triplets(&data_dir)?;
            let val = load_val_triplets(&data_dir)?;
            train_stage1(&cfg, vision, text, &train, &val)?
        }
        Stage::Stage2 | Stage::Baseline => {
            let pairs = load_train_pairs(&data_dir)?;
            let loaded = init.map(load_checkpoint).transpose()?;
            let suite = build_probes(&ctx.config)?;
            let mut hook = |_samples: u64, params: &EncoderParams<f32>| {
                hook_metrics(params, vision, text, &suite)
            };
            let init = match &loaded {
                Some(ckpt) => Stage2Init::FromCheckpoint(ckpt),
                None => Stage2Init::Random,
            };
            train_stage2(&cfg, vision, text, &pairs, init, Some(&mut hook))?
        }
        Stage::Posthoc => {
            let path = init.ok_or_else(|| {
                Error::Input("posthoc fine-tuning requires an initial checkpoint".to_string())
            })?;
            let ckpt = load_checkpoint(path)?;
            let train = load_train_triplets(&data_dir)?;
            let val = load_val_triplets(&data_dir)?;
            finetune_posthoc(&cfg, &train, &val, &ckpt)?
        }
    };

    let checkpoint = ctx.out.join("checkpoints").join(format!("{run_id}.ckpt"));
    save_checkpoint(&output.checkpoint, &checkpoint)?;
    let metrics = ctx.out.join("metrics").join(format!("{run_id}.csv"));
    write_metrics_csv(&metrics, &output.metrics)?;
    Ok(ArmArtifacts { checkpoint, metrics })
}

pub fn cmd_train(ctx: &Ctx, stage: Stage, init: Option<&Path>) -> Result<()> {
    let run_id = run_id_for(stage, ctx.seed);
    let mut manifest = RunManifest::new(&run_id, ctx.config_text()?, ctx.fixed_clock);
    let data_dir = ctx.data_dir();
    for f in ensure_datasets(&ctx.config, &data_dir, ctx.workers())? {
        manifest.add_output(&ctx.out, &f);
    }
    manifest.dataset_checksums = checksum_datasets(&data_dir)?;

    let arm = run_training_arm(ctx, stage, init, &run_id)?;
    manifest.add_output(&ctx.out, &arm.checkpoint);
    manifest.add_output(&ctx.out, &arm.metrics);
    let path = manifest.finish(&ctx.out, ctx.fixed_clock)?;
    log::info!("trained {run_id}; manifest {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

pub fn cmd_eval(ctx: &Ctx, init: &Path, run_id: Option<&str>) -> Result<()> {
    let ckpt = load_checkpoint(init)?;
    if ckpt.vision != ctx.config.vision || ckpt.text != ctx.config.text {
        return Err(Error::Input(format!(
            "checkpoint {} was trained with a different encoder configuration",
            init.display()
        )));
    }
    let run_id = match run_id {
        Some(id) => id.to_string(),
        None => init
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Input(format!("cannot derive a run id from {init:?}")))?,
    };

    let mut manifest =
        RunManifest::new(&format!("eval-{run_id}"), ctx.config_text()?, ctx.fixed_clock);
    let suite = build_probes(&ctx.config)?;
    let records =
        eval_records_for(&ckpt.params, &ckpt.vision, &ckpt.text, &suite, &run_id)?;
    let path = ctx.out.join(format!("eval-{run_id}.csv"));
    write_eval_csv(&path, &records)?;
    manifest.add_output(&ctx.out, &path);
    manifest.finish(&ctx.out, ctx.fixed_clock)?;
    log::info!("evaluated {run_id}: {} records -> {}", records.len(), path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// fit-scaling

/// Fits power laws for every run id found in the metric CSVs, over each of
/// the requested metric names.
fn fit_runs(
    records: &[MetricRecord],
    metrics: &[String],
) -> Result<Vec<(String, String, PowerLawFit)>> {
    let mut fits = Vec::new();
    for metric in metrics {
        let mut runs: Vec<&str> = Vec::new();
        for r in records.iter().filter(|r| &r.metric == metric) {
            if !runs.contains(&r.run_id.as_str()) {
                runs.push(&r.run_id);
            }
        }
        if runs.is_empty() {
            return Err(Error::Input(format!("no rows for metric {metric:?}")));
        }
        for run in runs {
            let fit = curve_from_metrics(records, run, metric)?.fit()?;
            fits.push((metric.clone(), run.to_string(), fit));
        }
    }
    Ok(fits)
}

pub fn cmd_fit_scaling(ctx: &Ctx, metric_files: &[PathBuf], metrics: &[String]) -> Result<()> {
    let mut records = Vec::new();
    for path in metric_files {
        records.extend(read_metrics_csv(path)?);
    }
    let fits = fit_runs(&records, metrics)?;

    let mut manifest = RunManifest::new("fit-scaling", ctx.config_text()?, ctx.fixed_clock);
    let metric_refs: Vec<&str> = metrics.iter().map(String::as_str).collect();
    let plots = ctx.out.join("plots.csv");
    export_plot_data(&plots, &records, &metric_refs)?;
    let fits_path = ctx.out.join("fits.csv");
    write_fits_csv(&fits_path, &fits)?;
    manifest.add_output(&ctx.out, &plots);
    manifest.add_output(&ctx.out, &fits_path);
    manifest.finish(&ctx.out, ctx.fixed_clock)?;
    log::info!("fitted {} (metric, run) curves", fits.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

pub fn cmd_report(
    ctx: &Ctx,
    eval_files: &[PathBuf],
    fit_files: &[PathBuf],
    ours: &str,
    base: &str,
) -> Result<()> {
    let mut eval = Vec::new();
    for path in eval_files {
        eval.extend(read_eval_csv(path)?);
    }
    let mut fits = Vec::new();
    for path in fit_files {
        fits.extend(read_fits_csv(path)?);
    }
    let markdown = render_report(&ReportInputs { eval: &eval, fits: &fits, ours, base })?;

    let mut manifest = RunManifest::new("report", ctx.config_text()?, ctx.fixed_clock);
    fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join("report.md");
    fs::write(&path, &markdown)?;
    manifest.add_output(&ctx.out, &path);
    manifest.finish(&ctx.out, ctx.fixed_clock)?;
    log::info!("rendered report {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// compare

/// The full experimental contrast for one seed: perceptual-initialization
/// chain vs random-init baseline, the post-hoc control, final evaluation,
/// scaling fits, and a rendered report — one manifest for everything.
pub fn cmd_compare(ctx: &Ctx) -> Result<()> {
    let seed = ctx.seed;
    let mut manifest =
        RunManifest::new(&format!("compare-s{seed}"), ctx.config_text()?, ctx.fixed_clock);
    let data_dir = ctx.data_dir();
    for f in ensure_datasets(&ctx.config, &data_dir, ctx.workers())? {
        manifest.add_output(&ctx.out, &f);
    }
    manifest.dataset_checksums = checksum_datasets(&data_dir)?;

    // Arm 1+2: perceptual init, then contrastive training on top of it.
    let stage1_id = run_id_for(Stage::Stage1, seed);
    let stage1 = run_training_arm(ctx, Stage::Stage1, None, &stage1_id)?;
    let pi_id = run_id_for(Stage::Stage2, seed);
    let pi = run_training_arm(ctx, Stage::Stage2, Some(&stage1.checkpoint), &pi_id)?;

    // Arm 3: seed-matched baseline from random init.
    let base_id = run_id_for(Stage::Baseline, seed);
    let base = run_training_arm(ctx, Stage::Baseline, None, &base_id)?;

    // Arm 4: post-hoc QKV-only perceptual fine-tune of the baseline.
    let posthoc_id = run_id_for(Stage::Posthoc, seed);
    let posthoc = run_training_arm(ctx, Stage::Posthoc, Some(&base.checkpoint), &posthoc_id)?;

    for arm in [&stage1, &pi, &base, &posthoc] {
        manifest.add_output(&ctx.out, &arm.checkpoint);
        manifest.add_output(&ctx.out, &arm.metrics);
    }

    // Final evaluation of all three end states into one CSV.
    let suite = build_probes(&ctx.config)?;
    let mut eval_records = Vec::new();
    for (run_id, arm) in [(&pi_id, &pi), (&base_id, &base), (&posthoc_id, &posthoc)] {
        let ckpt = load_checkpoint(&arm.checkpoint)?;
        eval_records.extend(eval_records_for(
            &ckpt.params,
            &ckpt.vision,
            &ckpt.text,
            &suite,
            run_id,
        )?);
    }
    let eval_path = ctx.out.join(format!("eval-s{seed}.csv"));
    write_eval_csv(&eval_path, &eval_records)?;
    manifest.add_output(&ctx.out, &eval_path);

    // Scaling fits over the two contrastive arms' headline curves.
    let mut curve_records = read_metrics_csv(&pi.metrics)?;
    curve_records.extend(read_metrics_csv(&base.metrics)?);
    let fits = fit_runs(&curve_records, &[HEADLINE_METRIC.to_string()])?;
    let plots_path = ctx.out.join(format!("plots-s{seed}.csv"));
    export_plot_data(&plots_path, &curve_records, &[HEADLINE_METRIC])?;
    let fits_path = ctx.out.join(format!("fits-s{seed}.csv"));
    write_fits_csv(&fits_path, &fits)?;
    manifest.add_output(&ctx.out, &plots_path);
    manifest.add_output(&ctx.out, &fits_path);

    // Markdown report: PI arm as "ours" against the baseline.
    let markdown = render_report(&ReportInputs {
        eval: &eval_records,
        fits: &fits,
        ours: &pi_id,
        base: &base_id,
    })?;
    let report_path = ctx.out.join(format!("report-s{seed}.md"));
    fs::write(&report_path, &markdown)?;
    manifest.add_output(&ctx.out, &report_path);

    let manifest_path = manifest.finish(&ctx.out, ctx.fixed_clock)?;
    log::info!("compare finished; manifest {}", manifest_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn tiny_ctx(tag: &str) -> Ctx {
        let dir = std::env::temp_dir().join(format!("pi-cmd-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let data_dir = dir.join("data");
        let config = parse_config(&format!(
            "[vision]\nimage_size = 8\npatch_size = 4\nwidth = 16\nheads = 2\nproj_dim = 8\n\
             [text]\nwidth = 16\nheads = 2\nproj_dim = 8\ncontext_length = 12\n\
             [data]\ndir = \"{}\"\ntriplets = 8\nval_triplets = 4\npairs = 8\n\
             [eval]\nper_class = 1\nretrieval_pairs = 4\n\
             [stage1]\nepochs = 1\nbatch_size = 4\neval_every_samples = 8\n\
             [stage2]\nepochs = 3\nbatch_size = 4\neval_every_samples = 4\n\
             [posthoc]\nepochs = 1\nbatch_size = 4\neval_every_samples = 8\n",
            data_dir.display()
        ))
        .unwrap();
        Ctx { config, seed: 0, out: dir.join("out"), fixed_clock: true }
    }

    #[test]
    fn compare_produces_the_contracted_artifacts() {
        let ctx = tiny_ctx("compare");
        cmd_compare(&ctx).unwrap();
        for name in [
            "checkpoints/stage1-s0.ckpt",
            "checkpoints/pi-s0.ckpt",
            "checkpoints/base-s0.ckpt",
            "checkpoints/posthoc-s0.ckpt",
            "metrics/pi-s0.csv",
            "metrics/base-s0.csv",
            "metrics/posthoc-s0.csv",
            "eval-s0.csv",
            "plots-s0.csv",
            "fits-s0.csv",
            "report-s0.md",
        ] {
            assert!(ctx.out.join(name).is_file(), "missing {name}");
        }
        // one manifest listing every artifact exactly once
        let manifest =
            crate::manifest::read_manifest(&ctx.out.join("manifest-compare-s0.json")).unwrap();
        assert_eq!(manifest.run_id, "compare-s0");
        for name in ["checkpoints/pi-s0.ckpt", "report-s0.md", "fits-s0.csv"] {
            assert_eq!(
                manifest.outputs.iter().filter(|o| o.as_str() == name).count(),
                1,
                "{name} not listed exactly once"
            );
        }
        assert!(!manifest.dataset_checksums.is_empty());
        // report body mentions both arms
        let report = std::fs::read_to_string(ctx.out.join("report-s0.md")).unwrap();
        assert!(report.contains("pi-s0") && report.contains("base-s0"));
        std::fs::remove_dir_all(ctx.out.parent().unwrap()).ok();
    }

    #[test]
    fn eval_rejects_mismatched_encoder_config() {
        let ctx = tiny_ctx("evalmismatch");
        generate_datasets(&ctx.config, &ctx.data_dir(), 1).unwrap();
        let arm = run_training_arm(&ctx, Stage::Stage1, None, "stage1-s0").unwrap();
        let mut other = tiny_ctx("evalmismatch2");
        other.config.vision.width = 32;
        other.config.text.width = 32;
        let err = cmd_eval(&other, &arm.checkpoint, None).unwrap_err();
        assert!(matches!(err, Error::Input(_)), "{err}");
        std::fs::remove_dir_all(ctx.out.parent().unwrap()).ok();
    }
}
