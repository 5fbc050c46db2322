//! Metric aggregation over held-out segments, paired significance testing,
//! linear trend fits, and report rendering.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::path::Path;

use crate::correlation::{correlate_all, CorrelationRecord};
use crate::dataset::SegmentSet;
use crate::decoder::{forward, DecoderConfig, DecoderParams};
use crate::error::{Error, Result};

/// Aggregate metrics for one (params, window) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub window_seconds: f64,
    pub accuracy: f64,
    pub mean_rho_a: f64,
    /// Mean over all (segment, unattended stream) pairs.
    pub mean_rho_u: f64,
    pub mean_delta: f64,
    pub n_segments: usize,
    /// Segments excluded because a correlation was degenerate.
    pub n_excluded: usize,
}

/// Runs the decoder over every segment, correlates against all streams, and
/// aggregates accuracy and the correlation means. Degenerate segments are
/// excluded and tallied.
pub fn evaluate_segments(
    params: &DecoderParams,
    dcfg: &DecoderConfig,
    set: &SegmentSet,
    window_seconds: f64,
) -> Result<(EvalSummary, Vec<CorrelationRecord>)> {
    if set.items.is_empty() {
        return Err(Error::EmptyInput("evaluation segments"));
    }
    let mut records = Vec::with_capacity(set.items.len());
    let mut excluded = 0usize;
    for item in &set.items {
        let yhat = forward(params, dcfg, &item.eeg)?;
        match correlate_all(&yhat, &item.env) {
            Ok(rec) => records.push(rec),
            Err(Error::DegeneratePrediction) | Err(Error::DegenerateVariance { .. }) => {
                excluded += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if records.is_empty() {
        return Err(Error::Evaluation("every segment was degenerate".into()));
    }
    let accuracy = crate::correlation::decoding_accuracy(&records)?;
    let n = records.len() as f64;
    let mean_rho_a = records.iter().map(|r| r.rho_a).sum::<f64>() / n;
    let n_u: usize = records.iter().map(|r| r.rho_u.len()).sum();
    let mean_rho_u =
        records.iter().flat_map(|r| r.rho_u.iter()).sum::<f64>() / n_u as f64;
    let mean_delta = records.iter().map(|r| r.delta).sum::<f64>() / n;
    Ok((
        EvalSummary {
            window_seconds,
            accuracy,
            mean_rho_a,
            mean_rho_u,
            mean_delta,
            n_segments: records.len(),
            n_excluded: excluded,
        },
        records,
    ))
}

/// Significance stars at the 0.05 / 0.01 / 0.001 thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stars {
    Ns,
    One,
    Two,
    Three,
}

impl Stars {
    pub fn from_p(p: f64) -> Stars {
        if p < 0.001 {
            Stars::Three
        } else if p < 0.01 {
            Stars::Two
        } else if p < 0.05 {
            Stars::One
        } else {
            Stars::Ns
        }
    }
}

impl std::fmt::Display for Stars {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stars::Ns => write!(f, "ns"),
            Stars::One => write!(f, "*"),
            Stars::Two => write!(f, "**"),
            Stars::Three => write!(f, "***"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    /// Sum of signed ranks (positive favors the first argument).
    pub statistic: f64,
    pub p_value: f64,
    pub n_pairs: usize,
    pub stars: Stars,
}

/// Two-sided Wilcoxon signed-rank test on paired differences `a - b`.
/// Zero differences are dropped. Exact null enumeration for n <= 25 without
/// rank ties; otherwise the normal approximation with continuity and tie
/// corrections.
pub fn paired_test(per_unit_a: &[f64], per_unit_b: &[f64]) -> Result<PairedTestResult> {
    if per_unit_a.len() != per_unit_b.len() {
        return Err(Error::ShapeMismatch("paired samples differ in length".into()));
    }
    let n_pairs = per_unit_a.len();
    if n_pairs < 6 {
        return Err(Error::InsufficientPairs { got: n_pairs, need: 6 });
    }
    let diffs: Vec<f64> = per_unit_a
        .iter()
        .zip(per_unit_b)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(PairedTestResult { statistic: 0.0, p_value: 1.0, n_pairs, stars: Stars::Ns });
    }
    let n = diffs.len();

    // Average ranks of |d|.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks = vec![0.0; n];
    let mut has_ties = false;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        if j > i {
            has_ties = true;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }

    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w_minus: f64 = n as f64 * (n as f64 + 1.0) / 2.0 - w_plus;
    let statistic = w_plus - w_minus;

    let p_value = if n <= 25 && !has_ties {
        exact_wilcoxon_p(n, w_plus)
    } else {
        let mean = n as f64 * (n as f64 + 1.0) / 4.0;
        let mut var = n as f64 * (n as f64 + 1.0) * (2.0 * n as f64 + 1.0) / 24.0;
        // Tie correction: subtract sum(t^3 - t)/48 per tie group.
        let mut k = 0;
        while k < n {
            let mut j = k;
            while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[k]].abs() {
                j += 1;
            }
            let t = (j - k + 1) as f64;
            var -= (t * t * t - t) / 48.0;
            k = j + 1;
        }
        let z = (w_plus - mean).abs() - 0.5;
        let z = (z / var.sqrt()).max(0.0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        2.0 * (1.0 - normal.cdf(z))
    }
    .min(1.0);

    Ok(PairedTestResult { statistic, p_value, n_pairs, stars: Stars::from_p(p_value) })
}

/// Exact two-sided p for W+ under the signed-rank null, by dynamic programming
/// over the 2^n sign assignments.
fn exact_wilcoxon_p(n: usize, w_plus: f64) -> f64 {
    let max_sum = n * (n + 1) / 2;
    let mut counts = vec![0f64; max_sum + 1];
    counts[0] = 1.0;
    for r in 1..=n {
        for s in (r..=max_sum).rev() {
            counts[s] += counts[s - r];
        }
    }
    let total = 2f64.powi(n as i32);
    let w = w_plus.round() as usize;
    let lower: f64 = counts[..=w].iter().sum();
    let upper: f64 = counts[w..].iter().sum();
    (2.0 * (lower.min(upper)) / total).min(1.0)
}

/// One-sided exact sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips. Ties must be excluded by the caller.
pub fn sign_test_one_sided(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // Sum of binomial tail probabilities at p = 1/2.
    let ln2 = (2f64).ln();
    let mut p = 0.0;
    for k in wins..=n {
        let ln_choose = ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k);
        p += (ln_choose - n as f64 * ln2).exp();
    }
    p.min(1.0)
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares fit of `y` on `x` with `r^2 = 1 - SS_res / SS_tot`.
pub fn trend_fit(x: &[f64], y: &[f64]) -> Result<TrendFit> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch("trend inputs differ in length".into()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Config(format!("trend fit needs n >= 3, got {n}")));
    }
    let n_f = n as f64;
    let mx = x.iter().sum::<f64>() / n_f;
    let my = y.iter().sum::<f64>() / n_f;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx <= x.iter().map(|v| v * v).sum::<f64>() * 1e-24 {
        return Err(Error::DegenerateRegressor);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - (slope * a + intercept);
            e * e
        })
        .sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) };
    Ok(TrendFit { slope, intercept, r_squared })
}

/// One row of the final comparison table, pooled over folds and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub family: String,
    pub loss: String,
    pub window_seconds: f64,
    pub accuracy: f64,
    pub mean_delta: f64,
    pub mean_rho_a: f64,
    pub mean_rho_u: f64,
    pub n_segments: usize,
    pub n_excluded: usize,
    /// (fold, seed, summary) breakdown behind the pooled numbers.
    pub cells: Vec<CellSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub fold: usize,
    pub seed: u64,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

/// Pools per-cell summaries into one row, weighting by segment counts.
pub fn pool_cells(
    family: &str,
    loss: &str,
    window_seconds: f64,
    cells: Vec<CellSummary>,
) -> Result<MetricsRow> {
    if cells.is_empty() {
        return Err(Error::EmptyInput("cells to pool"));
    }
    let total: usize = cells.iter().map(|c| c.summary.n_segments).sum();
    let excluded: usize = cells.iter().map(|c| c.summary.n_excluded).sum();
    let wsum = |f: &dyn Fn(&EvalSummary) -> f64| -> f64 {
        cells
            .iter()
            .map(|c| f(&c.summary) * c.summary.n_segments as f64)
            .sum::<f64>()
            / total as f64
    };
    Ok(MetricsRow {
        family: family.into(),
        loss: loss.into(),
        window_seconds,
        accuracy: wsum(&|s| s.accuracy),
        mean_delta: wsum(&|s| s.mean_delta),
        mean_rho_a: wsum(&|s| s.mean_rho_a),
        mean_rho_u: wsum(&|s| s.mean_rho_u),
        n_segments: total,
        n_excluded: excluded,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTest {
    pub label: String,
    pub result: PairedTestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTrend {
    pub label: String,
    pub fit: TrendFit,
    pub n_points: usize,
}

/// Mean over matched (family, window) pairs of
/// `(delta_contrastive - delta_attended) / |delta_attended|`.
pub fn relative_delta_improvement(table: &MetricsTable) -> Option<f64> {
    let mut terms = Vec::new();
    for row in table.rows.iter().filter(|r| r.loss == "delta_pcc") {
        if let Some(base) = table.rows.iter().find(|r| {
            r.loss == "pcc" && r.family == row.family && r.window_seconds == row.window_seconds
        }) {
            if base.mean_delta != 0.0 {
                terms.push((row.mean_delta - base.mean_delta) / base.mean_delta.abs());
            }
        }
    }
    if terms.is_empty() {
        None
    } else {
        Some(terms.iter().sum::<f64>() / terms.len() as f64)
    }
}

/// Renders the three report artifacts into `dir`: `metrics.csv` (full
/// precision), `report.txt` (4 fractional digits, grouped metric x family x
/// loss x window with stars), and scatter files for external plotting.
pub fn report(
    table: &MetricsTable,
    tests: &[NamedTest],
    trends: &[NamedTrend],
    config_echo: &str,
    dir: &Path,
) -> Result<()> {
    if table.rows.is_empty() {
        return Err(Error::EmptyInput("metrics rows"));
    }
    std::fs::create_dir_all(dir)?;

    // Values file, full precision.
    let mut csv = String::from(
        "family,loss,window_seconds,accuracy,mean_delta,mean_rho_a,mean_rho_u,n_segments,n_excluded\n",
    );
    for r in &table.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.family,
            r.loss,
            r.window_seconds,
            r.accuracy,
            r.mean_delta,
            r.mean_rho_a,
            r.mean_rho_u,
            r.n_segments,
            r.n_excluded
        ));
    }
    std::fs::write(dir.join("metrics.csv"), csv)?;

    // Scatter data: one point per (cell, window).
    let mut scatter_a = String::from("accuracy,mean_rho_a\n");
    let mut scatter_d = String::from("accuracy,mean_delta\n");
    for r in &table.rows {
        for c in &r.cells {
            scatter_a.push_str(&format!("{},{}\n", c.summary.accuracy, c.summary.mean_rho_a));
            scatter_d.push_str(&format!("{},{}\n", c.summary.accuracy, c.summary.mean_delta));
        }
    }
    std::fs::write(dir.join("scatter_acc_vs_rho_a.csv"), scatter_a)?;
    std::fs::write(dir.join("scatter_acc_vs_delta.csv"), scatter_d)?;

    // Text table.
    let mut txt = String::new();
    txt.push_str("# Configuration\n");
    txt.push_str(config_echo);
    txt.push('\n');

    let mut windows: Vec<f64> = table.rows.iter().map(|r| r.window_seconds).collect();
    windows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    windows.dedup();
    let star_for = |family: &str, loss: &str, window: f64| -> Option<String> {
        if loss != "delta_pcc" {
            return None;
        }
        tests
            .iter()
            .find(|t| t.label == format!("{family}/{window}s"))
            .map(|t| t.result.stars.to_string())
    };
    for (metric, get) in [
        ("Accuracy", &(|r: &MetricsRow| r.accuracy) as &dyn Fn(&MetricsRow) -> f64),
        ("DeltaPCC", &|r: &MetricsRow| r.mean_delta),
        ("Attended PCC", &|r: &MetricsRow| r.mean_rho_a),
        ("Unattended PCC", &|r: &MetricsRow| r.mean_rho_u),
    ] {
        txt.push_str(&format!("\n## {metric}\n"));
        let header = if tests.is_empty() {
            "family\tloss\twindow\tvalue\n"
        } else {
            "family\tloss\twindow\tvalue\tsig\n"
        };
        txt.push_str(header);
        for &w in &windows {
            for r in table.rows.iter().filter(|r| r.window_seconds == w) {
                let star = star_for(&r.family, &r.loss, w);
                if tests.is_empty() {
                    txt.push_str(&format!("{}\t{}\t{} s\t{:.4}\n", r.family, r.loss, w, get(r)));
                } else {
                    txt.push_str(&format!(
                        "{}\t{}\t{} s\t{:.4}\t{}\n",
                        r.family,
                        r.loss,
                        w,
                        get(r),
                        star.unwrap_or_default()
                    ));
                }
            }
        }
    }

    if let Some(imp) = relative_delta_improvement(table) {
        txt.push_str(&format!(
            "\nRelative DeltaPCC improvement (contrastive vs attended-only): {:.2}%\n",
            100.0 * imp
        ));
    }

    if !tests.is_empty() {
        txt.push_str("\n## Paired tests (delta_pcc vs pcc)\n");
        for t in tests {
            txt.push_str(&format!(
                "{}\tW={:.1}\tp={:.6}\tn={}\t{}\n",
                t.label, t.result.statistic, t.result.p_value, t.result.n_pairs, t.result.stars
            ));
        }
    }
    if !trends.is_empty() {
        txt.push_str("\n## Linear trends\n");
        for t in trends {
            txt.push_str(&format!(
                "{}\tslope={:.4}\tintercept={:.4}\tR2={:.4}\tn={}\n",
                t.label, t.fit.slope, t.fit.intercept, t.fit.r_squared, t.n_points
            ));
        }
        txt.push_str("(reference soft target: R2 > 0.5 for accuracy vs DeltaPCC)\n");
    }
    std::fs::write(dir.join("report.txt"), txt)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_test_identical_samples() {
        let a = vec![1.0; 8];
        let r = paired_test(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.stars, Stars::Ns);
    }

    #[test]
    fn paired_test_all_greater_exact() {
        let a: Vec<f64> = (1..=10).map(|i| i as f64 + 0.5).collect();
        let b: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        // Perturb so |d| are distinct.
        let a: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + i as f64 * 0.01).collect();
        let r = paired_test(&a, &b).unwrap();
        assert!((r.p_value - 2.0 / 1024.0).abs() < 1e-12, "p = {}", r.p_value);
        assert_eq!(r.stars, Stars::Two);
        assert!(r.statistic > 0.0);
    }

    #[test]
    fn paired_test_too_few_pairs() {
        let a = vec![1.0; 5];
        let b = vec![0.0; 5];
        assert!(matches!(
            paired_test(&a, &b).unwrap_err(),
            Error::InsufficientPairs { .. }
        ));
    }

    #[test]
    fn paired_test_antisymmetric() {
        let a = vec![0.3, 0.5, 0.9, 0.2, 0.8, 0.7, 0.4, 0.35];
        let b = vec![0.1, 0.6, 0.3, 0.25, 0.4, 0.65, 0.45, 0.2];
        let ab = paired_test(&a, &b).unwrap();
        let ba = paired_test(&b, &a).unwrap();
        assert_eq!(ab.statistic, -ba.statistic);
        assert!((ab.p_value - ba.p_value).abs() < 1e-12);
    }

    #[test]
    fn normal_approximation_large_n() {
        // n = 30 forces the approximation path.
        let a: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin() + 0.4).collect();
        let b: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = paired_test(&a, &b).unwrap();
        assert!(r.p_value < 0.001);
        assert_eq!(r.stars, Stars::Three);
    }

    #[test]
    fn sign_test_values() {
        // 10 wins, 0 losses: p = 1/1024.
        assert!((sign_test_one_sided(10, 0) - 1.0 / 1024.0).abs() < 1e-12);
        assert!((sign_test_one_sided(0, 0) - 1.0).abs() < 1e-12);
        assert!(sign_test_one_sided(5, 5) > 0.5);
    }

    #[test]
    fn trend_exact_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let f = trend_fit(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trend_noise_low_r2() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let y: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = trend_fit(&x, &y).unwrap();
        assert!(f.r_squared < 0.2, "r2 = {}", f.r_squared);
    }

    #[test]
    fn trend_r2_equals_pearson_squared() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(18);
        let x: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.7 * v + rng.gen_range(-0.3..0.3)).collect();
        let f = trend_fit(&x, &y).unwrap();
        let r = crate::correlation::pearson(&x, &y).unwrap();
        assert!((f.r_squared - r * r).abs() < 1e-12);
    }

    #[test]
    fn trend_constant_x_rejected() {
        let x = vec![1.0; 5];
        let y = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        assert!(matches!(trend_fit(&x, &y).unwrap_err(), Error::DegenerateRegressor));
    }

    fn summary(acc: f64, n: usize) -> EvalSummary {
        EvalSummary {
            window_seconds: 10.0,
            accuracy: acc,
            mean_rho_a: 0.2,
            mean_rho_u: 0.1,
            mean_delta: 0.1,
            n_segments: n,
            n_excluded: 0,
        }
    }

    #[test]
    fn pooling_weights_by_segments() {
        let row = pool_cells(
            "linear_lagged",
            "pcc",
            10.0,
            vec![
                CellSummary { fold: 0, seed: 1, summary: summary(1.0, 10) },
                CellSummary { fold: 1, seed: 1, summary: summary(0.0, 30) },
            ],
        )
        .unwrap();
        assert!((row.accuracy - 0.25).abs() < 1e-12);
        assert_eq!(row.n_segments, 40);
        assert!((row.mean_delta - (row.mean_rho_a - row.mean_rho_u)).abs() < 1e-10);
    }

    #[test]
    fn report_roundtrip_and_structure() {
        let dir = tempfile::tempdir().unwrap();
        let cells = vec![CellSummary { fold: 0, seed: 1, summary: summary(0.75, 20) }];
        let table = MetricsTable {
            rows: vec![
                pool_cells("linear_lagged", "pcc", 10.0, cells.clone()).unwrap(),
                pool_cells("linear_lagged", "delta_pcc", 10.0, cells).unwrap(),
            ],
        };
        report(&table, &[], &[], "lr = 0.0005\n", dir.path()).unwrap();
        let txt = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(txt.contains("Accuracy"));
        assert!(!txt.contains("sig")); // no star column without tests

        // Parse the CSV back and compare numbers bit-exactly.
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let line = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[3].parse::<f64>().unwrap(), table.rows[0].accuracy);
        assert_eq!(fields[4].parse::<f64>().unwrap(), table.rows[0].mean_delta);
    }
}
