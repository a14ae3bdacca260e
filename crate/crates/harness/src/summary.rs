//! Aggregation of `results.csv` per (method, tau2, source fraction).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use reward_transfer::diagnostics::MetricReport;
use reward_transfer::estimators::Method;

use crate::error::{HarnessError, Result};
use crate::grid::{read_results, ResultRow};

const N_METRICS: usize = MetricReport::CSV_FIELDS.len();

/// Metrics drawn as panels in the plot-data file.
pub const PLOT_METRICS: [&str; 5] = [
    "q2_mse_rho2",
    "v2_mse_unif",
    "regret",
    "r_mse_rho1",
    "q1_mse_rho1",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub tau2: f64,
    pub d1_fraction: f64,
    /// Successful cells.
    pub n: usize,
    pub failed: usize,
    pub mean: [f64; N_METRICS],
    /// Sample standard deviation; zero for a single cell.
    pub std: [f64; N_METRICS],
    /// `(Modular - method) / Modular * 100`; absent when the Modular mean is 0.
    pub improvement_pct: [Option<f64>; N_METRICS],
}

impl SummaryRow {
    pub fn index(metric: &str) -> Option<usize> {
        MetricReport::CSV_FIELDS.iter().position(|f| *f == metric)
    }

    pub fn mean_of(&self, metric: &str) -> Option<f64> {
        Self::index(metric).map(|i| self.mean[i])
    }

    pub fn improvement_of(&self, metric: &str) -> Option<f64> {
        Self::index(metric).and_then(|i| self.improvement_pct[i])
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn improvement_pct(modular: f64, method: f64) -> Option<f64> {
    (modular != 0.0).then(|| (modular - method) / modular * 100.0)
}

type GroupKey = (u64, u64, Method);

fn key_order(a: &GroupKey, b: &GroupKey) -> std::cmp::Ordering {
    f64::from_bits(a.0)
        .total_cmp(&f64::from_bits(b.0))
        .then(f64::from_bits(a.1).total_cmp(&f64::from_bits(b.1)))
        .then(a.2.cmp(&b.2))
}

pub fn summarize(rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(HarnessError::Summary("no result rows".into()));
    }
    let mut groups: BTreeMap<GroupKey, (Vec<[f64; N_METRICS]>, usize)> = BTreeMap::new();
    for r in rows {
        let g = groups
            .entry((r.tau2.to_bits(), r.d1_fraction.to_bits(), r.method))
            .or_default();
        match r.metrics {
            Some(m) => g.0.push(m),
            None => g.1 += 1,
        }
    }
    let means: BTreeMap<GroupKey, Option<[f64; N_METRICS]>> = groups
        .iter()
        .map(|(k, (vals, _))| {
            let mean = (!vals.is_empty()).then(|| {
                let mut m = [0.0; N_METRICS];
                for (i, slot) in m.iter_mut().enumerate() {
                    *slot = mean_std(&vals.iter().map(|v| v[i]).collect::<Vec<_>>()).0;
                }
                m
            });
            (*k, mean)
        })
        .collect();
    let mut keys: Vec<GroupKey> = groups.keys().copied().collect();
    keys.sort_by(key_order);
    let mut out = Vec::with_capacity(keys.len());
    for k in keys {
        let (vals, failed) = &groups[&k];
        let (tau2, d1_fraction) = (f64::from_bits(k.0), f64::from_bits(k.1));
        let baseline = means
            .get(&(k.0, k.1, Method::Modular))
            .copied()
            .flatten()
            .ok_or_else(|| {
                HarnessError::Summary(format!(
                    "no successful modular baseline at tau2 = {tau2}, fraction = {d1_fraction}"
                ))
            })?;
        let mut mean = [f64::NAN; N_METRICS];
        let mut std = [f64::NAN; N_METRICS];
        let mut improvement = [None; N_METRICS];
        if !vals.is_empty() {
            for i in 0..N_METRICS {
                let (m, s) = mean_std(&vals.iter().map(|v| v[i]).collect::<Vec<_>>());
                mean[i] = m;
                std[i] = s;
                improvement[i] = improvement_pct(baseline[i], m);
            }
        }
        out.push(SummaryRow {
            method: k.2,
            tau2,
            d1_fraction,
            n: vals.len(),
            failed: *failed,
            mean,
            std,
            improvement_pct: improvement,
        });
    }
    Ok(out)
}

fn cell(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "method".to_string(),
        "tau2".into(),
        "d1_fraction".into(),
        "n".into(),
        "failed".into(),
    ];
    for f in MetricReport::CSV_FIELDS {
        header.extend([
            format!("{f}_mean"),
            format!("{f}_std"),
            format!("{f}_improvement_pct"),
        ]);
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.method.name().to_string(),
            r.tau2.to_string(),
            r.d1_fraction.to_string(),
            r.n.to_string(),
            r.failed.to_string(),
        ];
        for i in 0..N_METRICS {
            rec.extend([
                cell(r.mean[i]),
                cell(r.std[i]),
                r.improvement_pct[i].map_or(String::new(), cell),
            ]);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Long format: one line per (tau2, metric, method, fraction).
pub fn write_plot_data(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "tau2",
        "metric",
        "method",
        "d1_fraction",
        "mean",
        "std",
        "improvement_pct",
    ])?;
    let mut lines: Vec<(&SummaryRow, &str)> = rows
        .iter()
        .flat_map(|r| PLOT_METRICS.iter().map(move |m| (r, *m)))
        .collect();
    lines.sort_by(|a, b| {
        a.0.tau2
            .total_cmp(&b.0.tau2)
            .then(a.1.cmp(b.1))
            .then(a.0.method.cmp(&b.0.method))
            .then(a.0.d1_fraction.total_cmp(&b.0.d1_fraction))
    });
    for (r, m) in lines {
        let i = SummaryRow::index(m).expect("plot metric is a result field");
        w.write_record([
            r.tau2.to_string(),
            m.to_string(),
            r.method.name().to_string(),
            r.d1_fraction.to_string(),
            cell(r.mean[i]),
            cell(r.std[i]),
            r.improvement_pct[i].map_or(String::new(), cell),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Path of the plot-data file written next to a summary.
pub fn plot_data_path(summary: &Path) -> PathBuf {
    let stem = summary
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("summary");
    summary.with_file_name(format!("{stem}_plot.csv"))
}

/// Reads a results file, writes the summary and its plot-data companion.
pub fn summarize_file(input: &Path, output: &Path) -> Result<Vec<SummaryRow>> {
    let rows = summarize(&read_results(input)?)?;
    write_summary(&rows, output)?;
    write_plot_data(&rows, &plot_data_path(output))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: Method, frac: f64, q2: f64) -> ResultRow {
        let mut m = [1.0; N_METRICS];
        m[1] = q2;
        ResultRow {
            method,
            tau2: 0.05,
            d1_fraction: frac,
            dataset_draw: 0,
            opt_seed: 0,
            beta: 100.0,
            status: "ok".into(),
            metrics: Some(m),
        }
    }

    #[test]
    fn improvement_arithmetic() {
        assert_eq!(improvement_pct(4.0, 3.0), Some(25.0));
        assert_eq!(improvement_pct(4.0, 4.0), Some(0.0));
        assert_eq!(improvement_pct(0.0, 1.0), None);
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn groups_and_improvements() {
        let rows = vec![
            row(Method::Coupled, 0.2, 3.0),
            row(Method::Modular, 0.2, 4.0),
            row(Method::Modular, 0.2, 4.0),
            row(Method::Coupled, 1.0, 1.0),
            row(Method::Modular, 1.0, 2.0),
        ];
        let s = summarize(&rows).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(
            (s[0].method, s[0].d1_fraction, s[0].n),
            (Method::Modular, 0.2, 2)
        );
        assert_eq!(s[0].improvement_of("q2_mse_rho2"), Some(0.0));
        assert_eq!(s[1].improvement_of("q2_mse_rho2"), Some(25.0));
        assert_eq!(s[3].improvement_of("q2_mse_rho2"), Some(50.0));
        assert_eq!(s[1].mean_of("q2_mse_rho2"), Some(3.0));
    }

    #[test]
    fn missing_baseline_is_an_error() {
        assert!(summarize(&[row(Method::Coupled, 0.2, 3.0)]).is_err());
        let mut failed = row(Method::Modular, 0.2, 4.0);
        failed.metrics = None;
        failed.status = "error: diverged".into();
        assert!(summarize(&[failed, row(Method::Coupled, 0.2, 3.0)]).is_err());
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn failed_rows_are_counted() {
        let mut failed = row(Method::Coupled, 0.2, 4.0);
        failed.metrics = None;
        let s = summarize(&[row(Method::Modular, 0.2, 4.0), failed]).unwrap();
        assert_eq!((s[1].n, s[1].failed), (0, 1));
        assert!(s[1].mean[0].is_nan());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_summary(&s, &path).unwrap();
        write_plot_data(&s, &plot_data_path(&path)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.to_lowercase().contains("nan"));
        assert!(plot_data_path(&path).ends_with("s_plot.csv"));
    }
}
