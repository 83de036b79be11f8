//! Markdown results report: per-family classification tables with
//! Ours/Base/Δ columns, a retrieval table per benchmark, scaling-fit
//! summaries, and a win/tie/loss line. Every number is a formatted copy of a
//! CSV cell or a mean/delta of such cells.

use std::collections::BTreeMap;

use pi_core::eval::EvalRecord;
use pi_core::scaling::PowerLawFit;
use pi_core::{Error, Result};

pub struct ReportInputs<'a> {
    pub eval: &'a [EvalRecord],
    /// `(metric, run_id, fit)` rows; empty when no fits were computed.
    pub fits: &'a [(String, String, PowerLawFit)],
    pub ours: &'a str,
    pub base: &'a str,
}

const RETRIEVAL_METRICS: [(&str, &str); 4] = [
    ("i2t-r1", "I→T R@1"),
    ("i2t-r5", "I→T R@5"),
    ("t2i-r1", "T→I R@1"),
    ("t2i-r5", "T→I R@5"),
];

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn pp(delta: f64) -> String {
    format!("{:+.1}", 100.0 * delta)
}

/// Formats a pair with the winner in bold; ties bold both.
fn bold_pair(ours: f64, base: f64) -> (String, String) {
    let (o, b) = (pct(ours), pct(base));
    (
        if ours >= base { format!("**{o}**") } else { o },
        if base >= ours { format!("**{b}**") } else { b },
    )
}

#[derive(Debug)]
struct DatasetRow {
    dataset: String,
    family: String,
    ours1: f64,
    base1: f64,
    ours5: Option<f64>,
    base5: Option<f64>,
}

fn value_of(
    eval: &[EvalRecord],
    run: &str,
    dataset: &str,
    metric: &str,
) -> Option<f64> {
    eval.iter()
        .find(|r| r.run_id == run && r.dataset == dataset && r.metric == metric)
        .map(|r| r.value)
}

pub fn render_report(inputs: &ReportInputs) -> Result<String> {
    let ReportInputs { eval, fits, ours, base } = *inputs;
    for (role, run) in [("ours", ours), ("baseline", base)] {
        if !eval.iter().any(|r| r.run_id == run) {
            return Err(Error::Input(format!(
                "{role} run {run:?} has no rows in the evaluation data"
            )));
        }
    }

    // classification datasets in first-appearance order
    let mut datasets: Vec<(String, String)> = Vec::new();
    for r in eval.iter().filter(|r| r.metric == "zs-top1") {
        if !datasets.iter().any(|(d, _)| d == &r.dataset) {
            datasets.push((r.dataset.clone(), r.family.clone()));
        }
    }
    let mut rows = Vec::new();
    for (dataset, family) in &datasets {
        let ours1 = value_of(eval, ours, dataset, "zs-top1");
        let base1 = value_of(eval, base, dataset, "zs-top1");
        let (ours1, base1) = match (ours1, base1) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Input(format!(
                    "dataset {dataset:?} is missing from one run; runs must score the same datasets"
                )))
            }
        };
        rows.push(DatasetRow {
            dataset: dataset.clone(),
            family: family.clone(),
            ours1,
            base1,
            ours5: value_of(eval, ours, dataset, "zs-top5"),
            base5: value_of(eval, base, dataset, "zs-top5"),
        });
    }

    let mut out = String::new();
    out.push_str(&format!("# Results: `{ours}` vs `{base}`\n"));

    if !rows.is_empty() {
        render_classification(&mut out, &rows);
    }
    render_retrieval(&mut out, eval, ours, base)?;
    if !fits.is_empty() {
        render_fits(&mut out, fits, ours, base);
    }
    Ok(out)
}

fn render_classification(out: &mut String, rows: &[DatasetRow]) {
    // family means, in first-appearance order
    let mut families: Vec<String> = Vec::new();
    for r in rows {
        if !families.contains(&r.family) {
            families.push(r.family.clone());
        }
    }
    out.push_str("\n## Zero-shot classification\n\n");
    out.push_str("Family means over datasets (top-1):\n\n");
    out.push_str("| Family | Ours@1 | Base@1 | Δ@1 (pp) |\n|---|---|---|---|\n");
    for family in &families {
        let in_family: Vec<&DatasetRow> = rows.iter().filter(|r| &r.family == family).collect();
        let n = in_family.len() as f64;
        let mo = in_family.iter().map(|r| r.ours1).sum::<f64>() / n;
        let mb = in_family.iter().map(|r| r.base1).sum::<f64>() / n;
        let (fo, fb) = bold_pair(mo, mb);
        out.push_str(&format!("| {family} | {fo} | {fb} | {} |\n", pp(mo - mb)));
    }

    let wins = rows.iter().filter(|r| r.ours1 > r.base1).count();
    let ties = rows.iter().filter(|r| r.ours1 == r.base1).count();
    let losses = rows.len() - wins - ties;
    out.push_str(&format!(
        "\nOurs beats the baseline on {wins} of {} classification benchmarks ({ties} tie{}, {losses} loss{}).\n",
        rows.len(),
        if ties == 1 { "" } else { "s" },
        if losses == 1 { "" } else { "es" },
    ));

    for family in &families {
        out.push_str(&format!("\n### {family}\n\n"));
        out.push_str(
            "| Dataset | Ours@1 | Base@1 | Δ@1 (pp) | Ours@5 | Base@5 | Δ@5 (pp) |\n\
             |---|---|---|---|---|---|---|\n",
        );
        for r in rows.iter().filter(|r| &r.family == family) {
            let (o1, b1) = bold_pair(r.ours1, r.base1);
            let (o5, b5, d5) = match (r.ours5, r.base5) {
                (Some(a), Some(b)) => {
                    let (fa, fb) = bold_pair(a, b);
                    (fa, fb, pp(a - b))
                }
                _ => ("—".to_string(), "—".to_string(), "—".to_string()),
            };
            out.push_str(&format!(
                "| {} | {o1} | {b1} | {} | {o5} | {b5} | {d5} |\n",
                r.dataset,
                pp(r.ours1 - r.base1)
            ));
        }
    }
}

fn render_retrieval(
    out: &mut String,
    eval: &[EvalRecord],
    ours: &str,
    base: &str,
) -> Result<()> {
    let mut datasets: Vec<String> = Vec::new();
    for r in eval {
        if RETRIEVAL_METRICS.iter().any(|(m, _)| *m == r.metric)
            && !datasets.contains(&r.dataset)
        {
            datasets.push(r.dataset.clone());
        }
    }
    if datasets.is_empty() {
        return Ok(());
    }
    out.push_str("\n## Zero-shot retrieval\n");
    for dataset in &datasets {
        let fetch = |run: &str| -> Result<Vec<f64>> {
            RETRIEVAL_METRICS
                .iter()
                .map(|(m, _)| {
                    value_of(eval, run, dataset, m).ok_or_else(|| {
                        Error::Input(format!("run {run:?} lacks {m} on {dataset:?}"))
                    })
                })
                .collect()
        };
        let vo = fetch(ours)?;
        let vb = fetch(base)?;
        out.push_str(&format!("\n### {dataset}\n\n"));
        out.push_str("| Model |");
        for (_, label) in RETRIEVAL_METRICS {
            out.push_str(&format!(" {label} |"));
        }
        out.push_str("\n|---|---|---|---|---|\n");
        let mut base_row = String::from("| Baseline |");
        let mut ours_row = String::from("| Ours |");
        let mut delta_row = String::from("| Δ (pp) |");
        for (o, b) in vo.iter().zip(&vb) {
            let (fo, fb) = bold_pair(*o, *b);
            base_row.push_str(&format!(" {fb} |"));
            ours_row.push_str(&format!(" {fo} |"));
            delta_row.push_str(&format!(" {} |", pp(o - b)));
        }
        out.push_str(&base_row);
        out.push('\n');
        out.push_str(&ours_row);
        out.push('\n');
        out.push_str(&delta_row);
        out.push('\n');
    }
    Ok(())
}

fn render_fits(
    out: &mut String,
    fits: &[(String, String, PowerLawFit)],
    ours: &str,
    base: &str,
) {
    out.push_str("\n## Scaling fits\n\n");
    out.push_str("| Metric | Run | a | β | r² |\n|---|---|---|---|---|\n");
    let mut by_metric: BTreeMap<&str, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for (metric, run, fit) in fits {
        out.push_str(&format!(
            "| {metric} | {run} | {:.4} | {:.3} | {:.3} |\n",
            fit.a, fit.beta, fit.r2
        ));
        let entry = by_metric.entry(metric).or_default();
        if run == ours {
            entry.0 = Some(fit.beta);
        } else if run == base {
            entry.1 = Some(fit.beta);
        }
    }
    out.push('\n');
    for (metric, (o, b)) in by_metric {
        if let (Some(o), Some(b)) = (o, b) {
            out.push_str(&format!("Δβ (ours − base) for {metric}: {:+.3}\n", o - b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(dataset: &str, family: &str, metric: &str, run: &str, value: f64) -> EvalRecord {
        EvalRecord {
            dataset: dataset.to_string(),
            family: family.to_string(),
            metric: metric.to_string(),
            run_id: run.to_string(),
            value,
        }
    }

    fn sample_records() -> Vec<EvalRecord> {
        vec![
            rec("alpha", "famA", "zs-top1", "ours", 0.189),
            rec("alpha", "famA", "zs-top1", "base", 0.151),
            rec("alpha", "famA", "zs-top5", "ours", 0.390),
            rec("alpha", "famA", "zs-top5", "base", 0.333),
            rec("beta", "famA", "zs-top1", "ours", 0.211),
            rec("beta", "famA", "zs-top1", "base", 0.249),
            rec("tiny", "famB", "zs-top1", "ours", 0.499),
            rec("tiny", "famB", "zs-top1", "base", 0.499),
        ]
    }

    #[test]
    fn renders_deltas_bold_winners_and_dashes() {
        let records = sample_records();
        let report = render_report(&ReportInputs {
            eval: &records,
            fits: &[],
            ours: "ours",
            base: "base",
        })
        .unwrap();
        assert!(report.contains("| alpha | **18.9** | 15.1 | +3.8 | **39.0** | 33.3 | +5.7 |"), "{report}");
        // loss row: baseline bold
        assert!(report.contains("| beta | 21.1 | **24.9** | -3.8 | — | — | — |"), "{report}");
        // exact tie: both bold, delta +0.0
        assert!(report.contains("| tiny | **49.9** | **49.9** | +0.0 |"), "{report}");
        assert!(report.contains("Ours beats the baseline on 1 of 3 classification benchmarks (1 tie, 1 loss)."), "{report}");
        // family means tie exactly: (0.189+0.211)/2 == (0.151+0.249)/2 == 0.2
        assert!(report.contains("| famA | **20.0** | **20.0** | +0.0 |"), "{report}");
    }

    #[test]
    fn retrieval_table_has_model_rows_and_delta_row() {
        let mut records = sample_records();
        for (metric, o, b) in [
            ("i2t-r1", 0.213, 0.142),
            ("i2t-r5", 0.453, 0.329),
            ("t2i-r1", 0.316, 0.243),
            ("t2i-r5", 0.607, 0.510),
        ] {
            records.push(rec("flickr-like", "retrieval", metric, "ours", o));
            records.push(rec("flickr-like", "retrieval", metric, "base", b));
        }
        let report = render_report(&ReportInputs {
            eval: &records,
            fits: &[],
            ours: "ours",
            base: "base",
        })
        .unwrap();
        assert!(report.contains("### flickr-like"), "{report}");
        assert!(report.contains("| Baseline | 14.2 | 32.9 | 24.3 | 51.0 |"), "{report}");
        assert!(report.contains("| Ours | **21.3** | **45.3** | **31.6** | **60.7** |"), "{report}");
        assert!(report.contains("| Δ (pp) | +7.1 | +12.4 | +7.3 | +9.7 |"), "{report}");
    }

    #[test]
    fn identical_runs_render_all_zero_deltas_and_ties() {
        let mut records = Vec::new();
        for (d, f, v) in [("a", "f1", 0.4), ("b", "f1", 0.25), ("c", "f2", 0.7)] {
            records.push(rec(d, f, "zs-top1", "ours", v));
            records.push(rec(d, f, "zs-top1", "base", v));
        }
        let report = render_report(&ReportInputs {
            eval: &records,
            fits: &[],
            ours: "ours",
            base: "base",
        })
        .unwrap();
        assert!(!report.contains("| -0.0 |"), "{report}");
        assert!(report.contains("0 of 3 classification benchmarks (3 ties, 0 losses)"), "{report}");
        for line in report.lines().filter(|l| l.contains("| +")) {
            assert!(line.contains("+0.0"), "{line}");
        }
    }

    #[test]
    fn missing_baseline_run_is_an_input_error() {
        let records = vec![rec("a", "f", "zs-top1", "ours", 0.5)];
        let err = render_report(&ReportInputs {
            eval: &records,
            fits: &[],
            ours: "ours",
            base: "base",
        })
        .unwrap_err();
        assert!(err.to_string().contains("baseline"), "{err}");
    }

    #[test]
    fn unmatched_dataset_sets_are_an_input_error() {
        let mut records = sample_records();
        records.push(rec("extra", "famA", "zs-top1", "ours", 0.5));
        let err = render_report(&ReportInputs {
            eval: &records,
            fits: &[],
            ours: "ours",
            base: "base",
        })
        .unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn fits_section_reports_beta_deltas() {
        let records = sample_records();
        let fits = vec![
            (
                "zs-top1-headline".to_string(),
                "ours".to_string(),
                PowerLawFit { a: 0.02, beta: 0.412, r2: 0.99, points: 8 },
            ),
            (
                "zs-top1-headline".to_string(),
                "base".to_string(),
                PowerLawFit { a: 0.05, beta: 0.3, r2: 0.97, points: 8 },
            ),
        ];
        let report = render_report(&ReportInputs {
            eval: &records,
            fits: &fits,
            ours: "ours",
            base: "base",
        })
        .unwrap();
        assert!(report.contains("| zs-top1-headline | ours | 0.0200 | 0.412 | 0.990 |"), "{report}");
        assert!(report.contains("Δβ (ours − base) for zs-top1-headline: +0.112"), "{report}");
    }
}
