//! Power-law fits over metric-vs-samples curves, run comparison, and plot
//! data export.
//!
//! A curve `y = a·x^β` becomes a line in log–log space; the fit is ordinary
//! least squares on `(ln x, ln y)`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::MetricRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    /// Multiplier: predicted value at `x = 1`.
    pub a: f64,
    /// Exponent (slope in log–log space).
    pub beta: f64,
    /// Coefficient of determination in log space; 1 for an exact fit,
    /// including the degenerate all-equal-`y` case.
    pub r2: f64,
    /// Points actually used after dropping non-positive coordinates.
    pub points: usize,
}

impl PowerLawFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.a * x.powf(self.beta)
    }
}

/// Fits `y = a·x^β` by least squares in log–log space.
///
/// Points with a non-positive coordinate cannot be log-transformed; they are
/// dropped with a warning. At least two usable points with distinct `x` are
/// required.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|&&(x, y)| {
            let ok = x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite();
            if !ok {
                log::warn!("dropping non-positive point ({x}, {y}) from power-law fit");
            }
            ok
        })
        .map(|&(x, y)| (x.ln(), y.ln()))
        .collect();
    if usable.len() < 2 {
        return Err(Error::Input(format!(
            "power-law fit needs at least 2 usable points, got {}",
            usable.len()
        )));
    }
    let n = usable.len() as f64;
    let mean_x = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in &usable {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(Error::Input(
            "power-law fit needs at least two distinct sample counts".to_string(),
        ));
    }
    let beta = sxy / sxx;
    let ln_a = mean_y - beta * mean_x;
    let ss_res = usable
        .iter()
        .map(|&(x, y)| {
            let e = y - (ln_a + beta * x);
            e * e
        })
        .sum::<f64>();
    // a perfectly flat curve is a perfect fit, not a divide-by-zero
    let r2 = if syy <= f64::EPSILON * n * mean_y.abs().max(1.0) {
        1.0
    } else {
        1.0 - ss_res / syy
    };
    Ok(PowerLawFit {
        a: ln_a.exp(),
        beta,
        r2,
        points: usable.len(),
    })
}

/// One run's values of one metric over training, sorted by sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct RunCurve {
    pub run_id: String,
    pub metric: String,
    pub points: Vec<(u64, f64)>,
}

impl RunCurve {
    pub fn fit(&self) -> Result<PowerLawFit> {
        let pts: Vec<(f64, f64)> =
            self.points.iter().map(|&(x, y)| (x as f64, y)).collect();
        fit_power_law(&pts)
    }
}

/// Extracts one metric's curve for one run from training records.
pub fn curve_from_metrics(
    records: &[MetricRecord],
    run_id: &str,
    metric: &str,
) -> Result<RunCurve> {
    let mut points: Vec<(u64, f64)> = records
        .iter()
        .filter(|r| r.run_id == run_id && r.metric == metric)
        .map(|r| (r.samples_seen, r.value))
        .collect();
    if points.is_empty() {
        return Err(Error::Input(format!(
            "no {metric:?} records for run {run_id:?}"
        )));
    }
    points.sort_by_key(|p| p.0);
    for w in points.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::Input(format!(
                "run {run_id:?} logs {metric:?} twice at {} samples",
                w[0].0
            )));
        }
    }
    Ok(RunCurve {
        run_id: run_id.to_string(),
        metric: metric.to_string(),
        points,
    })
}

/// Head-to-head comparison of two runs on the same metric.
#[derive(Debug, Clone, PartialEq)]
pub struct RunComparison {
    pub metric: String,
    pub run_a: String,
    pub run_b: String,
    pub beta_a: f64,
    pub beta_b: f64,
    /// `beta_a - beta_b`: positive means run A improves faster with scale.
    pub delta_beta: f64,
    /// `A - B` at the first shared milestone: A's head start.
    pub head_start: f64,
    /// `A - B` at the last shared milestone.
    pub final_delta: f64,
    pub shared_milestones: usize,
}

pub fn compare_runs(a: &RunCurve, b: &RunCurve) -> Result<RunComparison> {
    if a.metric != b.metric {
        return Err(Error::Input(format!(
            "cannot compare {:?} against {:?}",
            a.metric, b.metric
        )));
    }
    let xs_a: BTreeSet<u64> = a.points.iter().map(|p| p.0).collect();
    let xs_b: BTreeSet<u64> = b.points.iter().map(|p| p.0).collect();
    let shared: Vec<u64> = xs_a.intersection(&xs_b).copied().collect();
    if shared.is_empty() {
        return Err(Error::Input(format!(
            "runs {:?} and {:?} share no milestones on {:?}",
            a.run_id, b.run_id, a.metric
        )));
    }
    let at = |curve: &RunCurve, x: u64| -> f64 {
        curve.points.iter().find(|p| p.0 == x).expect("shared milestone").1
    };
    let first = *shared.first().expect("nonempty");
    let last = *shared.last().expect("nonempty");
    let fit_a = a.fit()?;
    let fit_b = b.fit()?;
    Ok(RunComparison {
        metric: a.metric.clone(),
        run_a: a.run_id.clone(),
        run_b: b.run_id.clone(),
        beta_a: fit_a.beta,
        beta_b: fit_b.beta,
        delta_beta: fit_a.beta - fit_b.beta,
        head_start: at(a, first) - at(b, first),
        final_delta: at(a, last) - at(b, last),
        shared_milestones: shared.len(),
    })
}

pub const PLOT_HEADER: &str = "metric,run_id,samples_seen,value";
pub const FITS_HEADER: &str = "metric,run_id,a,beta,r2";

/// Writes the selected metrics as long-format plot data.
pub fn export_plot_data(
    path: &Path,
    records: &[MetricRecord],
    metrics: &[&str],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut out = String::from(PLOT_HEADER);
    out.push('\n');
    for r in records {
        if !metrics.contains(&r.metric.as_str()) {
            continue;
        }
        if r.metric.contains(',') || r.run_id.contains(',') {
            return Err(Error::Input(format!(
                "plot field {:?}/{:?} contains a delimiter",
                r.metric, r.run_id
            )));
        }
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.metric, r.run_id, r.samples_seen, r.value
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads plot data back as `(metric, run_id, samples_seen, value)` rows.
pub fn read_plot_data(path: &Path) -> Result<Vec<(String, String, u64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == PLOT_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "bad plot header {other:?}; expected {PLOT_HEADER:?}"
            )))
        }
    }
    lines
        .map(|line| {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Format(format!("bad plot row {line:?}")));
            }
            Ok((
                parts[0].to_string(),
                parts[1].to_string(),
                parts[2]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad samples_seen in {line:?}")))?,
                parts[3]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad value in {line:?}")))?,
            ))
        })
        .collect()
}

/// Writes per-run power-law fits.
pub fn write_fits_csv(path: &Path, fits: &[(String, String, PowerLawFit)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut out = String::from(FITS_HEADER);
    out.push('\n');
    for (metric, run_id, fit) in fits {
        if metric.contains(',') || run_id.contains(',') {
            return Err(Error::Input(format!(
                "fit field {metric:?}/{run_id:?} contains a delimiter"
            )));
        }
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            metric, run_id, fit.a, fit.beta, fit.r2
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a fits CSV back as `(metric, run_id, fit)` rows. The schema does
/// not carry point counts, so `points` comes back 0.
pub fn read_fits_csv(path: &Path) -> Result<Vec<(String, String, PowerLawFit)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == FITS_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "bad fits header {other:?}; expected {FITS_HEADER:?}"
            )))
        }
    }
    lines
        .map(|line| {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::Format(format!("bad fits row {line:?}")));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad number {s:?} in {line:?}")))
            };
            Ok((
                parts[0].to_string(),
                parts[1].to_string(),
                PowerLawFit {
                    a: num(parts[2])?,
                    beta: num(parts[3])?,
                    r2: num(parts[4])?,
                    points: 0,
                },
            ))
        })
        .collect()
}
