//! Zero-shot evaluation: prompt-ensemble classification, paired
//! image–caption retrieval, and family-level aggregation of per-dataset
//! scores.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{normalize, ClassProbe, PairSet, Tokenizer, EOT_ID};
use crate::encoders::{
    encode_image_eval, encode_text_eval, EncoderParams, TextEncoderConfig, VisionEncoderConfig,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Family whose zero-shot top-1 mean is reported as the headline number.
pub const HEADLINE_FAMILY: &str = "shapes";

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

/// Averages each class's prompt embeddings into one unit-norm row.
///
/// Every template must contain a `{}` placeholder for the class name. Rows
/// come back in class order, shape `(classes, proj_dim)`.
pub fn build_class_embeddings(
    params: &EncoderParams<f32>,
    cfg: &TextEncoderConfig,
    class_names: &[String],
    templates: &[String],
) -> Result<Tensor<f32>> {
    if class_names.is_empty() {
        return Err(Error::Input("class list is empty".to_string()));
    }
    if templates.is_empty() {
        return Err(Error::Input("prompt template list is empty".to_string()));
    }
    for t in templates {
        if !t.contains("{}") {
            return Err(Error::Input(format!(
                "prompt template {t:?} has no {{}} placeholder"
            )));
        }
    }
    let tokenizer = Tokenizer::closed(cfg.context_length)?;
    let proj = cfg.proj_dim;
    let mut rows = Vec::with_capacity(class_names.len() * proj);
    for name in class_names {
        let mut tokens = Vec::with_capacity(templates.len() * cfg.context_length);
        for t in templates {
            tokens.extend_from_slice(&tokenizer.tokenize(&t.replace("{}", name))?);
        }
        let emb = encode_text_eval(params, cfg, &tokens, EOT_ID)?;
        let data = emb.data();
        let mut mean = vec![0.0f32; proj];
        for row in data.chunks_exact(proj) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let inv = 1.0 / templates.len() as f32;
        for m in &mut mean {
            *m *= inv;
        }
        let norm = mean.iter().map(|v| v * v).sum::<f32>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Contract(format!(
                "prompt ensemble for class {name:?} collapsed to the zero vector"
            )));
        }
        rows.extend(mean.iter().map(|v| v / norm));
    }
    Tensor::from_vec(vec![class_names.len(), proj], rows)
}

/// Encodes raw `[0,1]` images through normalization in fixed-size chunks.
pub fn embed_images(
    params: &EncoderParams<f32>,
    cfg: &VisionEncoderConfig,
    images: &[Tensor<f32>],
) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(Error::Input("image list is empty".to_string()));
    }
    let mut rows = Vec::with_capacity(images.len() * cfg.proj_dim);
    for chunk in images.chunks(EVAL_CHUNK) {
        let normed: Vec<Tensor<f32>> = chunk.iter().map(normalize).collect::<Result<_>>()?;
        let emb = encode_image_eval(params, cfg, &Tensor::stack(&normed)?)?;
        rows.extend_from_slice(emb.data());
    }
    Tensor::from_vec(vec![images.len(), cfg.proj_dim], rows)
}

/// Encodes tokenized captions in fixed-size chunks.
pub fn embed_texts(
    params: &EncoderParams<f32>,
    cfg: &TextEncoderConfig,
    token_rows: &[Vec<usize>],
) -> Result<Tensor<f32>> {
    if token_rows.is_empty() {
        return Err(Error::Input("caption list is empty".to_string()));
    }
    let mut rows = Vec::with_capacity(token_rows.len() * cfg.proj_dim);
    for chunk in token_rows.chunks(EVAL_CHUNK) {
        let mut tokens = Vec::with_capacity(chunk.len() * cfg.context_length);
        for r in chunk {
            tokens.extend_from_slice(r);
        }
        let emb = encode_text_eval(params, cfg, &tokens, EOT_ID)?;
        rows.extend_from_slice(emb.data());
    }
    Tensor::from_vec(vec![token_rows.len(), cfg.proj_dim], rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationScores {
    pub top1: f64,
    /// Present only when there are at least five classes.
    pub top5: Option<f64>,
}

/// Zero-shot accuracy of image embeddings against class prompt embeddings.
///
/// A prediction is the highest-similarity class; ties resolve to the lower
/// class index, so a tied true class loses to any tied class before it.
pub fn zero_shot_classify(
    image_emb: &Tensor<f32>,
    class_emb: &Tensor<f32>,
    labels: &[usize],
) -> Result<ClassificationScores> {
    let (n, d) = rank2(image_emb, "zero_shot_classify images")?;
    let (c, dc) = rank2(class_emb, "zero_shot_classify classes")?;
    if d != dc {
        return Err(Error::dim("zero_shot_classify", image_emb.shape(), class_emb.shape()));
    }
    if labels.len() != n {
        return Err(Error::Input(format!(
            "{} labels for {n} images",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    let img = image_emb.data();
    let cls = class_emb.data();
    let mut top1_hits = 0usize;
    let mut top5_hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let q = &img[i * d..(i + 1) * d];
        let sim = |j: usize| -> f32 {
            let g = &cls[j * d..(j + 1) * d];
            q.iter().zip(g).map(|(a, b)| a * b).sum()
        };
        let s_label = sim(label);
        let mut better = 0usize;
        for j in 0..c {
            if j == label {
                continue;
            }
            let s = sim(j);
            if s > s_label || (s == s_label && j < label) {
                better += 1;
            }
        }
        if better == 0 {
            top1_hits += 1;
        }
        if better < 5 {
            top5_hits += 1;
        }
    }
    Ok(ClassificationScores {
        top1: top1_hits as f64 / n as f64,
        top5: (c >= 5).then(|| top5_hits as f64 / n as f64),
    })
}

/// Rank of each paired gallery item for its query.
///
/// Entry `i` is the 1-based position of gallery row `i` when gallery rows
/// are sorted by similarity to query row `i` (descending, ties broken by
/// lower row index).
pub fn retrieval_ranks(query: &Tensor<f32>, gallery: &Tensor<f32>) -> Result<Vec<usize>> {
    let (n, d) = rank2(query, "retrieval_ranks query")?;
    let (m, dg) = rank2(gallery, "retrieval_ranks gallery")?;
    if n != m || d != dg {
        return Err(Error::dim("retrieval_ranks", query.shape(), gallery.shape()));
    }
    let q = query.data();
    let g = gallery.data();
    let mut ranks = Vec::with_capacity(n);
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let sim = |j: usize| -> f32 {
            let gj = &g[j * d..(j + 1) * d];
            qi.iter().zip(gj).map(|(a, b)| a * b).sum()
        };
        let s_true = sim(i);
        let mut ahead = 0usize;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = sim(j);
            if s > s_true || (s == s_true && j < i) {
                ahead += 1;
            }
        }
        ranks.push(1 + ahead);
    }
    Ok(ranks)
}

/// Fraction of ranks at or below `k`.
pub fn recall_at(ranks: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Input("recall cutoff must be positive".to_string()));
    }
    if ranks.is_empty() {
        return Err(Error::Input("rank list is empty".to_string()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub dataset: String,
    pub family: String,
    pub metric: String,
    pub run_id: String,
    pub value: f64,
}

pub const EVAL_HEADER: &str = "dataset,family,metric,run_id,value";

impl EvalRecord {
    pub fn to_csv_row(&self) -> Result<String> {
        for field in [&self.dataset, &self.family, &self.metric, &self.run_id] {
            if field.contains(',') || field.contains('\n') {
                return Err(Error::Input(format!("eval field {field:?} contains a delimiter")));
            }
        }
        Ok(format!(
            "{},{},{},{},{}",
            self.dataset, self.family, self.metric, self.run_id, self.value
        ))
    }

    pub fn from_csv_row(line: &str) -> Result<EvalRecord> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Format(format!(
                "eval row has {} fields, expected 5: {line:?}",
                parts.len()
            )));
        }
        Ok(EvalRecord {
            dataset: parts[0].to_string(),
            family: parts[1].to_string(),
            metric: parts[2].to_string(),
            run_id: parts[3].to_string(),
            value: parts[4]
                .parse()
                .map_err(|_| Error::Format(format!("bad value in {line:?}")))?,
        })
    }
}

pub fn write_eval_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row()?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == EVAL_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "bad eval header {other:?}; expected {EVAL_HEADER:?}"
            )))
        }
    }
    lines.map(EvalRecord::from_csv_row).collect()
}

/// Unweighted per-family means of one metric: every dataset in a family
/// counts once, regardless of its size.
pub fn family_means(records: &[EvalRecord], metric: &str) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut seen: Vec<(&str, &str)> = Vec::new();
    for r in records.iter().filter(|r| r.metric == metric) {
        if seen.contains(&(r.dataset.as_str(), r.run_id.as_str())) {
            return Err(Error::Input(format!(
                "duplicate {metric} entry for dataset {:?} run {:?}",
                r.dataset, r.run_id
            )));
        }
        seen.push((&r.dataset, &r.run_id));
        let e = sums.entry(r.family.clone()).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(fam, (sum, n))| (fam, sum / n as f64))
        .collect())
}

/// Headline number: mean zero-shot top-1 over the headline family.
pub fn headline_top1(records: &[EvalRecord]) -> Result<f64> {
    family_means(records, "zs-top1")?
        .get(HEADLINE_FAMILY)
        .copied()
        .ok_or_else(|| {
            Error::Input(format!("no zs-top1 entries for family {HEADLINE_FAMILY:?}"))
        })
}

/// Runs zero-shot classification over each probe with its prompt ensemble.
pub fn classification_records(
    params: &EncoderParams<f32>,
    vision: &VisionEncoderConfig,
    text: &TextEncoderConfig,
    probes: &[ClassProbe],
    run_id: &str,
) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::new();
    for probe in probes {
        let image_emb = embed_images(params, vision, &probe.images)?;
        let class_emb =
            build_class_embeddings(params, text, &probe.class_names, &probe.prompt_templates)?;
        let scores = zero_shot_classify(&image_emb, &class_emb, &probe.labels)?;
        let mut push = |metric: &str, value: f64| {
            records.push(EvalRecord {
                dataset: probe.dataset.clone(),
                family: probe.family.clone(),
                metric: metric.to_string(),
                run_id: run_id.to_string(),
                value,
            });
        };
        push("zs-top1", scores.top1);
        if let Some(t5) = scores.top5 {
            push("zs-top5", t5);
        }
    }
    Ok(records)
}

/// Runs paired image–caption retrieval in both directions.
pub fn retrieval_records(
    params: &EncoderParams<f32>,
    vision: &VisionEncoderConfig,
    text: &TextEncoderConfig,
    pairs: &PairSet,
    run_id: &str,
) -> Result<Vec<EvalRecord>> {
    let images: Vec<Tensor<f32>> = pairs.records.iter().map(|r| r.image.clone()).collect();
    let token_rows: Vec<Vec<usize>> = pairs.records.iter().map(|r| r.tokens.clone()).collect();
    let image_emb = embed_images(params, vision, &images)?;
    let text_emb = embed_texts(params, text, &token_rows)?;
    let i2t = retrieval_ranks(&image_emb, &text_emb)?;
    let t2i = retrieval_ranks(&text_emb, &image_emb)?;
    let mut records = Vec::new();
    for (metric, value) in [
        ("i2t-r1", recall_at(&i2t, 1)?),
        ("i2t-r5", recall_at(&i2t, 5)?),
        ("t2i-r1", recall_at(&t2i, 1)?),
        ("t2i-r5", recall_at(&t2i, 5)?),
    ] {
        records.push(EvalRecord {
            dataset: "synth-captions".to_string(),
            family: "retrieval".to_string(),
            metric: metric.to_string(),
            run_id: run_id.to_string(),
            value,
        });
    }
    Ok(records)
}

fn rank2(t: &Tensor<f32>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::shape(op, s, "expected a rank-2 tensor")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn unit_rows(n: usize, d: usize, rng: &mut RngState) -> Tensor<f32> {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let mut row: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            for v in &mut row {
                *v /= norm;
            }
            data.extend_from_slice(&row);
        }
        Tensor::from_vec(vec![n, d], data).unwrap()
    }

    #[test]
    fn classification_scores_a_hand_built_case() {
        // classes at the axes; images slightly off-axis
        let cls = Tensor::from_vec(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let img = Tensor::from_vec(
            vec![3, 3],
            vec![0.9, 0.1, 0.0, 0.1, 0.9, 0.0, 0.9, 0.0, 0.1],
        )
        .unwrap();
        let s = zero_shot_classify(&img, &cls, &[0, 1, 2]).unwrap();
        assert_eq!(s.top1, 2.0 / 3.0); // third image lands on class 0
        assert_eq!(s.top5, None); // only three classes
    }

    #[test]
    fn classification_ties_go_to_the_lower_index() {
        let cls = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let img = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        // label 1 ties class 0 exactly; the tie resolves to class 0
        assert_eq!(zero_shot_classify(&img, &cls, &[1]).unwrap().top1, 0.0);
        assert_eq!(zero_shot_classify(&img, &cls, &[0]).unwrap().top1, 1.0);
    }

    #[test]
    fn single_class_probe_is_always_right() {
        let cls = Tensor::from_vec(vec![1, 2], vec![0.6, 0.8]).unwrap();
        let img = unit_rows(4, 2, &mut RngState::new(0));
        let s = zero_shot_classify(&img, &cls, &[0, 0, 0, 0]).unwrap();
        assert_eq!(s.top1, 1.0);
        assert_eq!(s.top5, None);
    }

    #[test]
    fn top5_appears_at_five_classes() {
        let mut rng = RngState::new(1);
        let cls = unit_rows(5, 8, &mut rng);
        let img = unit_rows(3, 8, &mut rng);
        let s = zero_shot_classify(&img, &cls, &[0, 1, 2]).unwrap();
        assert_eq!(s.top5, Some(1.0)); // five classes: top-5 covers all
    }

    #[test]
    fn random_hundred_way_classification_sits_at_chance() {
        let mut rng = RngState::new(7);
        let c = 100;
        let n = 4000;
        let cls = unit_rows(c, 16, &mut rng);
        let img = unit_rows(n, 16, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.next_below(c as u64) as usize).collect();
        let s = zero_shot_classify(&img, &cls, &labels).unwrap();
        // binomial p=1/100: mean 0.01, sd ~0.0016 at n=4000
        assert!(
            (s.top1 - 0.01).abs() < 0.008,
            "top1 {} far from chance",
            s.top1
        );
        let t5 = s.top5.unwrap();
        assert!((t5 - 0.05).abs() < 0.015, "top5 {t5} far from chance");
    }

    #[test]
    fn retrieval_ranks_match_a_sort_oracle() {
        let mut rng = RngState::new(3);
        let q = unit_rows(40, 8, &mut rng);
        let g = unit_rows(40, 8, &mut rng);
        let ranks = retrieval_ranks(&q, &g).unwrap();
        // oracle: full sort by (similarity desc, index asc)
        for i in 0..40 {
            let qi = &q.data()[i * 8..(i + 1) * 8];
            let mut sims: Vec<(usize, f32)> = (0..40)
                .map(|j| {
                    let gj = &g.data()[j * 8..(j + 1) * 8];
                    (j, qi.iter().zip(gj).map(|(a, b)| a * b).sum())
                })
                .collect();
            sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let pos = sims.iter().position(|&(j, _)| j == i).unwrap() + 1;
            assert_eq!(ranks[i], pos, "rank mismatch at {i}");
        }
    }

    #[test]
    fn recall_fixture_with_known_ranks() {
        let ranks = [1usize, 2, 6];
        assert_eq!(recall_at(&ranks, 1).unwrap(), 1.0 / 3.0);
        assert_eq!(recall_at(&ranks, 5).unwrap(), 2.0 / 3.0);
        assert_eq!(recall_at(&ranks, 6).unwrap(), 1.0);
        assert!(recall_at(&ranks, 0).is_err());
        assert!(recall_at(&[], 1).is_err());
    }

    #[test]
    fn identical_embeddings_retrieve_themselves() {
        let mut rng = RngState::new(4);
        let e = unit_rows(10, 4, &mut rng);
        let ranks = retrieval_ranks(&e, &e).unwrap();
        assert!(ranks.iter().all(|&r| r == 1));
    }

    #[test]
    fn eval_csv_round_trips() {
        let r = EvalRecord {
            dataset: "synth-shapes".to_string(),
            family: "shapes".to_string(),
            metric: "zs-top1".to_string(),
            run_id: "pi-s0".to_string(),
            value: 0.53125,
        };
        let row = r.to_csv_row().unwrap();
        assert_eq!(row, "synth-shapes,shapes,zs-top1,pi-s0,0.53125");
        assert_eq!(EvalRecord::from_csv_row(&row).unwrap(), r);

        let path = std::env::temp_dir().join(format!("pi-eval-{}.csv", std::process::id()));
        write_eval_csv(&path, &[r.clone()]).unwrap();
        assert_eq!(read_eval_csv(&path).unwrap(), vec![r]);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn family_means_average_datasets_not_images() {
        let rec = |dataset: &str, family: &str, value: f64| EvalRecord {
            dataset: dataset.to_string(),
            family: family.to_string(),
            metric: "zs-top1".to_string(),
            run_id: "r".to_string(),
            value,
        };
        let records = vec![
            rec("synth-shapes", "shapes", 0.6),
            rec("synth-shapes-ood", "shapes", 0.4),
            rec("synth-colors", "colors", 0.9),
        ];
        let means = family_means(&records, "zs-top1").unwrap();
        assert_eq!(means["shapes"], 0.5);
        assert_eq!(means["colors"], 0.9);
        assert_eq!(headline_top1(&records).unwrap(), 0.5);

        let mut dup = records.clone();
        dup.push(rec("synth-shapes", "shapes", 0.7));
        assert!(family_means(&dup, "zs-top1").is_err());
    }

    #[test]
    fn prompt_ensembles_are_idempotent_under_duplicate_templates() {
        use crate::encoders::init_params;
        let (vision, text) = tiny_configs();
        let params = init_params::<f32>(&vision, &text, &mut RngState::new(2)).unwrap();
        let names = vec!["circle".to_string(), "square".to_string()];
        let one = build_class_embeddings(&params, &text, &names, &["a {}".to_string()]).unwrap();
        let twice = build_class_embeddings(
            &params,
            &text,
            &names,
            &["a {}".to_string(), "a {}".to_string()],
        )
        .unwrap();
        for (a, b) in one.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        // rows are unit norm
        for row in one.data().chunks_exact(text.proj_dim) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn templates_without_placeholders_are_rejected() {
        use crate::encoders::init_params;
        let (vision, text) = tiny_configs();
        let params = init_params::<f32>(&vision, &text, &mut RngState::new(2)).unwrap();
        let names = vec!["circle".to_string()];
        assert!(build_class_embeddings(&params, &text, &names, &["a shape".to_string()]).is_err());
        assert!(build_class_embeddings(&params, &text, &names, &[]).is_err());
    }

    #[test]
    fn probe_evaluation_produces_one_row_per_dataset_metric() {
        use crate::data::{classification_probes, retrieval_probe};
        use crate::encoders::init_params;
        let (vision, text) = tiny_configs();
        let params = init_params::<f32>(&vision, &text, &mut RngState::new(5)).unwrap();
        let probes = classification_probes(2, vision.image_size, &RngState::new(5)).unwrap();
        let records =
            classification_records(&params, &vision, &text, &probes, "test-run").unwrap();
        // 5 datasets with zs-top1; the three 8-class ones also get zs-top5
        assert_eq!(records.iter().filter(|r| r.metric == "zs-top1").count(), 5);
        assert_eq!(records.iter().filter(|r| r.metric == "zs-top5").count(), 3);
        assert!(records.iter().all(|r| (0.0..=1.0).contains(&r.value)));
        let means = family_means(&records, "zs-top1").unwrap();
        assert_eq!(means.len(), 5); // shapes, shapes-ood, colors, sizes, backgrounds
        assert!(means.contains_key(HEADLINE_FAMILY));

        let pairs =
            retrieval_probe(8, vision.image_size, text.context_length, &RngState::new(5))
                .unwrap();
        let ret = retrieval_records(&params, &vision, &text, &pairs, "test-run").unwrap();
        assert_eq!(ret.len(), 4);
        assert!(ret.iter().all(|r| r.family == "retrieval"));
    }

    fn tiny_configs() -> (VisionEncoderConfig, TextEncoderConfig) {
        (
            VisionEncoderConfig {
                image_size: 8,
                patch_size: 4,
                channels: 3,
                width: 16,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                proj_dim: 8,
            },
            TextEncoderConfig {
                vocab_size: 32,
                context_length: 12,
                width: 16,
                depth: 1,
                heads: 2,
                proj_dim: 8,
            },
        )
    }
}
