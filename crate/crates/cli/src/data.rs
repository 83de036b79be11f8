//! Dataset plumbing: deterministic generation into a fixed directory layout,
//! loading for training/eval, and checksumming for run manifests.
//!
//! Layout under the configured data directory:
//!   triplets/train.{manifest,blob}   perceptual triplets for stage 1 / posthoc
//!   triplets/val.{manifest,blob}     held-out triplets for 2AFC validation
//!   pairs/train.{manifest,blob}      image–caption pairs for contrastive stages

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pi_core::data::{
    blob_path, gen_pair_set, gen_triplet_set, manifest_path, read_pair_set, read_triplet_set,
    write_pair_set, write_triplet_set, CaptionRecord, Split, TripletRecord,
};
use pi_core::rng::RngState;
use pi_core::Result;

use crate::config::AppConfig;
use crate::manifest::sha256_file;

pub fn triplet_dir(base: &Path) -> PathBuf {
    base.join("triplets")
}

pub fn pair_dir(base: &Path) -> PathBuf {
    base.join("pairs")
}

/// Every file a complete dataset consists of, in a fixed order.
pub fn dataset_files(base: &Path) -> Vec<PathBuf> {
    let t = triplet_dir(base);
    let p = pair_dir(base);
    vec![
        manifest_path(&t, "train"),
        blob_path(&t, "train"),
        manifest_path(&t, "val"),
        blob_path(&t, "val"),
        manifest_path(&p, "train"),
        blob_path(&p, "train"),
    ]
}

pub fn datasets_present(base: &Path) -> bool {
    dataset_files(base).iter().all(|f| f.is_file())
}

/// Generates all splits from the data seed and writes them under `base`.
/// Returns the files written.
pub fn generate_datasets(cfg: &AppConfig, base: &Path, workers: usize) -> Result<Vec<PathBuf>> {
    let rng = RngState::new(cfg.data.seed);
    let size = cfg.vision.image_size;

    let train = gen_triplet_set(
        cfg.data.triplets,
        cfg.data.noise_rate,
        size,
        Split::Train,
        &rng,
        workers,
    )?;
    let val = gen_triplet_set(
        cfg.data.val_triplets,
        cfg.data.noise_rate,
        size,
        Split::Val,
        &rng,
        workers,
    )?;
    let pairs = gen_pair_set(
        cfg.data.pairs,
        size,
        cfg.text.context_length,
        Split::Train,
        &rng,
        workers,
    )?;

    let t = triplet_dir(base);
    let p = pair_dir(base);
    write_triplet_set(&t, "train", &train.records)?;
    write_triplet_set(&t, "val", &val.records)?;
    write_pair_set(&p, "train", &pairs.records)?;
    Ok(dataset_files(base))
}

/// Loads existing datasets, or generates them first when absent. Returns the
/// files written (empty when everything was already on disk).
pub fn ensure_datasets(cfg: &AppConfig, base: &Path, workers: usize) -> Result<Vec<PathBuf>> {
    if datasets_present(base) {
        Ok(Vec::new())
    } else {
        generate_datasets(cfg, base, workers)
    }
}

pub fn load_train_triplets(base: &Path) -> Result<Vec<TripletRecord>> {
    read_triplet_set(&triplet_dir(base), "train")
}

pub fn load_val_triplets(base: &Path) -> Result<Vec<TripletRecord>> {
    read_triplet_set(&triplet_dir(base), "val")
}

pub fn load_train_pairs(base: &Path) -> Result<Vec<CaptionRecord>> {
    read_pair_set(&pair_dir(base), "train")
}

/// SHA-256 of every dataset file, keyed by its path relative to `base`.
pub fn checksum_datasets(base: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for file in dataset_files(base) {
        let key = file
            .strip_prefix(base)
            .unwrap_or(&file)
            .to_string_lossy()
            .into_owned();
        out.insert(key, sha256_file(&file)?);
    }
    Ok(out)
}
