//! Aggregation across seeds and Welch's unequal-variance t-test.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::results::{read_rows, ResultRow};
use crate::error::{Error, Result};

/// Sample mean and sample standard deviation (`n − 1`).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// Two-tailed.
    pub p: f64,
}

/// Welch's t-test of `a` against `b`. Needs two samples per side.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Option<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let se = (va + vb).sqrt();
    if se == 0.0 {
        let t = if ma == mb {
            0.0
        } else {
            (ma - mb).signum() * f64::INFINITY
        };
        let p = if ma == mb { 1.0 } else { 0.0 };
        return Some(WelchTest { t, df: f64::NAN, p });
    }
    let t = (ma - mb) / se;
    let df = (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Some(WelchTest { t, df, p })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub experiment_id: String,
    pub model: String,
    pub perturb_kind: String,
    pub magnitude: f64,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// Per-tap means, when present.
    pub layer_means: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub experiment_id: String,
    pub perturb_kind: String,
    pub magnitude: f64,
    pub model_a: String,
    pub model_b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub groups: Vec<GroupSummary>,
    pub comparisons: Vec<Comparison>,
}

type GroupKey = (String, String, String, u64);

fn magnitude_key(m: f64) -> u64 {
    m.to_bits()
}

/// Aggregates rows across seeds. Rows of one group must share their
/// configuration hash.
pub fn summarize(rows: &[ResultRow]) -> Result<Report> {
    let mut groups: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((
                r.experiment_id.clone(),
                r.model(),
                r.perturb_kind.to_string(),
                magnitude_key(r.magnitude),
            ))
            .or_default()
            .push(r);
    }
    let mut report = Report::default();
    for ((exp, model, kind, mag), members) in &groups {
        let hash = &members[0].config_hash;
        if let Some(other) = members.iter().find(|r| &r.config_hash != hash) {
            return Err(Error::Inconsistent(format!(
                "{exp} {model} {kind}: configuration hashes {hash} and {} are mixed",
                other.config_hash
            )));
        }
        let accs: Vec<f64> = members.iter().map(|r| r.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        let layers: Vec<Vec<f64>> = members.iter().map(|r| r.layers()).collect();
        let depth = layers.iter().map(Vec::len).min().unwrap_or(0);
        let layer_means = (0..depth)
            .map(|l| mean_std(&layers.iter().map(|v| v[l]).collect::<Vec<_>>()).0)
            .collect::<Vec<_>>();
        report.groups.push(GroupSummary {
            experiment_id: exp.clone(),
            model: model.clone(),
            perturb_kind: kind.clone(),
            magnitude: f64::from_bits(*mag),
            n: accs.len(),
            mean,
            std,
            layer_means: ResultRow::join_layers(&layer_means),
            config_hash: hash.clone(),
        });
    }
    type Point = (String, String, u64);
    let mut by_point: BTreeMap<Point, Vec<(&String, Vec<f64>)>> = BTreeMap::new();
    for ((exp, model, kind, mag), members) in &groups {
        by_point
            .entry((exp.clone(), kind.clone(), *mag))
            .or_default()
            .push((model, members.iter().map(|r| r.accuracy).collect()));
    }
    for ((exp, kind, mag), models) in by_point {
        for i in 0..models.len() {
            for j in i + 1..models.len() {
                let (a, xa) = &models[i];
                let (b, xb) = &models[j];
                if let Some(w) = welch_t_test(xa, xb) {
                    report.comparisons.push(Comparison {
                        experiment_id: exp.clone(),
                        perturb_kind: kind.clone(),
                        magnitude: f64::from_bits(mag),
                        model_a: (*a).clone(),
                        model_b: (*b).clone(),
                        mean_a: mean_std(xa).0,
                        mean_b: mean_std(xb).0,
                        t: w.t,
                        df: w.df,
                        p: w.p,
                    });
                }
            }
        }
    }
    Ok(report)
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Plot data: one file per experiment and perturbation kind, one column
/// pair (mean, std) per model.
fn write_series(dir: &Path, report: &Report) -> Result<()> {
    let mut files: BTreeMap<(String, String), Vec<&GroupSummary>> = BTreeMap::new();
    for g in &report.groups {
        files
            .entry((g.experiment_id.clone(), g.perturb_kind.clone()))
            .or_default()
            .push(g);
    }
    for ((exp, kind), groups) in files {
        let models: Vec<String> = {
            let mut m: Vec<String> = groups.iter().map(|g| g.model.clone()).collect();
            m.dedup();
            m.sort();
            m.dedup();
            m
        };
        let mut mags: Vec<f64> = groups.iter().map(|g| g.magnitude).collect();
        mags.sort_by(f64::total_cmp);
        mags.dedup();
        let mut w = csv::Writer::from_path(dir.join(format!("series_{exp}_{kind}.csv")))?;
        let mut header = vec!["magnitude".to_string()];
        for m in &models {
            header.push(format!("{m} mean"));
            header.push(format!("{m} std"));
        }
        w.write_record(&header)?;
        for mag in mags {
            let mut rec = vec![mag.to_string()];
            for m in &models {
                match groups.iter().find(|g| &g.model == m && g.magnitude == mag) {
                    Some(g) => {
                        rec.push(g.mean.to_string());
                        rec.push(g.std.to_string());
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn render_table(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<40} {:<10} {:>9} {:>3} {:>17}",
        "experiment", "model", "kind", "magnitude", "n", "accuracy"
    );
    for g in &report.groups {
        let _ = writeln!(
            out,
            "{:<12} {:<40} {:<10} {:>9} {:>3} {:>8.4} ± {:<6.4}",
            g.experiment_id, g.model, g.perturb_kind, g.magnitude, g.n, g.mean, g.std
        );
    }
    if !report.comparisons.is_empty() {
        let _ = writeln!(out, "\nWelch t-tests (two-tailed)");
        for c in &report.comparisons {
            let _ = writeln!(
                out,
                "{} {} {}: {} vs {}: t = {:.3}, df = {:.1}, p = {:.3e}",
                c.experiment_id, c.perturb_kind, c.magnitude, c.model_a, c.model_b, c.t, c.df, c.p
            );
        }
    }
    out
}

/// Reads every result CSV in `dir` and writes `summary.csv`,
/// `summary.txt`, `welch.csv`, and `series_*.csv` next to them.
pub fn report(dir: &Path) -> Result<Report> {
    let mut rows = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let derived = name.starts_with("summary") || name.starts_with("welch") || name.starts_with("series_");
        if name.ends_with(".csv") && !name.ends_with(".attack.csv") && !derived {
            rows.extend(read_rows::<ResultRow>(&path)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("no result files in {}", dir.display())));
    }
    let report = summarize(&rows)?;
    write_csv(&dir.join("summary.csv"), &report.groups)?;
    write_csv(&dir.join("welch.csv"), &report.comparisons)?;
    fs::write(dir.join("summary.txt"), render_table(&report))?;
    write_series(dir, &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PerturbationKind;

    fn row(model: &str, seed: u64, acc: f64, hash: &str) -> ResultRow {
        ResultRow {
            experiment_id: "e".into(),
            arch: "cnn_small".into(),
            head: model.into(),
            ablation: "-".into(),
            seed,
            perturb_kind: PerturbationKind::None,
            magnitude: 0.0,
            accuracy: acc,
            layer_accuracies: String::new(),
            epochs: 1,
            config_hash: hash.into(),
        }
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[0.8, 0.9]);
        assert!((m - 0.85).abs() < 1e-12);
        assert!((s - 0.070_710_678_118_654_76).abs() < 1e-12);
    }

    #[test]
    fn identical_series_have_zero_t() {
        let w = welch_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(w.t, 0.0);
        assert!((w.p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn welch_matches_hand_evaluation() {
        // a: mean 2, var 1, n 3. b: mean 5, var 10/3, n 4.
        // se² = 1/3 + 10/12 = 7/6, t = −3/√(7/6).
        // df = (7/6)² / ((1/3)²/2 + (5/6)²/3) = 147/31.
        let w = welch_t_test(&[1.0, 2.0, 3.0], &[3.0, 4.0, 6.0, 7.0]).unwrap();
        assert!((w.t + 3.0 / (7.0f64 / 6.0).sqrt()).abs() < 1e-12);
        assert!((w.df - 147.0 / 31.0).abs() < 1e-12);
        // scipy.stats.ttest_ind(equal_var=False) gives p = 0.04134736635451822.
        assert!((w.p - 0.041_347_366_354_518_22).abs() < 1e-9, "{}", w.p);
    }

    #[test]
    fn mixed_hashes_are_an_error() {
        let rows = vec![row("consensus", 0, 0.9, "a"), row("consensus", 1, 0.8, "b")];
        assert!(matches!(summarize(&rows), Err(Error::Inconsistent(_))));
    }

    #[test]
    fn groups_and_comparisons() {
        let rows = vec![
            row("consensus", 0, 0.9, "a"),
            row("consensus", 1, 0.8, "a"),
            row("fully_connected", 0, 0.5, "b"),
            row("fully_connected", 1, 0.6, "b"),
        ];
        let rep = summarize(&rows).unwrap();
        assert_eq!(rep.groups.len(), 2);
        assert!((rep.groups[0].mean - 0.85).abs() < 1e-12);
        assert_eq!(rep.comparisons.len(), 1);
        assert!(rep.comparisons[0].t > 0.0);
    }

    #[test]
    fn report_writes_summaries() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = super::super::ResultWriter::open(&dir.path().join("e.csv")).unwrap();
        for (i, r) in [row("consensus", 0, 0.9, "a"), row("consensus", 1, 0.8, "a")]
            .into_iter()
            .enumerate()
        {
            w.submit(i, r).unwrap();
        }
        let rep = report(dir.path()).unwrap();
        assert_eq!(rep.groups.len(), 1);
        assert!(dir.path().join("summary.csv").exists());
        assert!(dir.path().join("series_e_none.csv").exists());
        assert!(report(dir.path()).is_ok());
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(report(dir.path()).is_err());
    }
}
