//! Prediction metrics (ACC, MSE, SRCC, LCC) and comparison tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ratings::Dimension;

/// Pearson linear correlation. `None` for fewer than two points or when
/// either vector is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "correlation needs equal lengths");
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks: tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub acc: f64,
    pub mse: f64,
    pub srcc: Option<f64>,
    pub lcc: Option<f64>,
}

/// Default good/bad boundary on the 1..=7 scale.
pub const GOOD_THRESHOLD: f64 = 4.0;

/// Scores `>= threshold` count as good, for predictions and ground truth alike.
pub fn compute_metrics(pred: &[f64], truth: &[f64], threshold: f64) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth scores",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidParameter("metrics need at least two scores".into()));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("metrics need finite scores".into()));
    }
    let n = pred.len();
    let agree = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| (**p >= threshold) == (**t >= threshold))
        .count();
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n as f64;
    Ok(MetricsReport {
        n,
        acc: agree as f64 / n as f64,
        mse,
        srcc: spearman(pred, truth),
        lcc: pearson(pred, truth),
    })
}

/// Relative improvements over a baseline, in percent. MSE counts a decrease
/// as an improvement. `None` marks cells whose baseline is zero or undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub acc: Option<f64>,
    pub mse: Option<f64>,
    pub srcc: Option<f64>,
    pub lcc: Option<f64>,
}

fn relative(baseline: Option<f64>, method: Option<f64>, lower_is_better: bool) -> Option<f64> {
    let (b, m) = (baseline?, method?);
    if b == 0.0 {
        return None;
    }
    let delta = if lower_is_better { b - m } else { m - b };
    Some(100.0 * delta / b)
}

pub fn improvement_report(baseline: &MetricsReport, method: &MetricsReport) -> ImprovementReport {
    ImprovementReport {
        acc: relative(Some(baseline.acc), Some(method.acc), false),
        mse: relative(Some(baseline.mse), Some(method.mse), true),
        srcc: relative(baseline.srcc, method.srcc, false),
        lcc: relative(baseline.lcc, method.lcc, false),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub rows: Vec<AblationRow>,
    /// Last row relative to the first.
    pub improvement: ImprovementReport,
}

/// Standard row labels, baseline first and full method last.
pub fn ablation_labels(dimension: Dimension) -> [&'static str; 6] {
    match dimension {
        Dimension::Beauty => [
            "Baseline",
            "wo/ local",
            "w/ local",
            "wo/ retrieval",
            "w/ emotion (single)",
            "w/ emotion (Full)",
        ],
        Dimension::Happy => [
            "Baseline",
            "wo/ local",
            "w/ local",
            "wo/ retrieval",
            "w/ beauty (single)",
            "w/ beauty (Full)",
        ],
    }
}

pub fn ablation_table(title: impl Into<String>, rows: Vec<AblationRow>) -> Result<AblationTable> {
    let (first, last) = match (rows.first(), rows.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::InvalidParameter("ablation table needs at least one row".into())),
    };
    let improvement = improvement_report(&first.metrics, &last.metrics);
    Ok(AblationTable {
        title: title.into(),
        rows,
        improvement,
    })
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.digits$}"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}%"))
}

impl AblationTable {
    /// Header line followed by one line per row and a closing improvement line.
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain(["Improvement".len(), "Metrics".len()])
            .max()
            .unwrap_or(0)
            + 2;
        let mut s = format!("{:<width$}{:>10}{:>10}{:>10}{:>10}\n", "Metrics", "ACC", "MSE", "SRCC", "LCC");
        for r in &self.rows {
            let m = &r.metrics;
            s.push_str(&format!(
                "{:<width$}{:>10}{:>10}{:>10}{:>10}\n",
                r.label,
                pct(Some(100.0 * m.acc)),
                cell(Some(m.mse), 4),
                cell(m.srcc, 4),
                cell(m.lcc, 4)
            ));
        }
        let i = &self.improvement;
        s.push_str(&format!(
            "{:<width$}{:>10}{:>10}{:>10}{:>10}\n",
            "Improvement",
            pct(i.acc),
            pct(i.mse),
            pct(i.srcc),
            pct(i.lcc)
        ));
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("ablation table", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("ablation table", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(acc: f64, mse: f64, srcc: f64, lcc: f64) -> MetricsReport {
        MetricsReport {
            n: 100,
            acc,
            mse,
            srcc: Some(srcc),
            lcc: Some(lcc),
        }
    }

    #[test]
    fn identity_metrics() {
        let v = [1.5, 3.9, 4.0, 6.2, 2.2];
        let m = compute_metrics(&v, &v, GOOD_THRESHOLD).unwrap();
        assert_eq!(m.acc, 1.0);
        assert_eq!(m.mse, 0.0);
        assert!((m.srcc.unwrap() - 1.0).abs() < 1e-12);
        assert!((m.lcc.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_ranks_give_minus_one() {
        let truth = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let pred = [9.0, 8.0, 7.0, 3.0, 2.0, 1.0];
        let m = compute_metrics(&pred, &truth, GOOD_THRESHOLD).unwrap();
        assert!((m.srcc.unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_vector_is_undefined_but_acc_mse_survive() {
        let m = compute_metrics(&[4.0, 4.0, 4.0], &[3.0, 5.0, 4.5], GOOD_THRESHOLD).unwrap();
        assert_eq!(m.srcc, None);
        assert_eq!(m.lcc, None);
        assert!((m.acc - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.mse - (1.0 + 1.0 + 0.25) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_is_inclusive() {
        let m = compute_metrics(&[4.0, 3.99], &[4.5, 4.0], 4.0).unwrap();
        assert_eq!(m.acc, 0.5);
    }

    #[test]
    fn metric_errors() {
        assert!(compute_metrics(&[1.0], &[1.0], 4.0).is_err());
        assert!(compute_metrics(&[1.0, 2.0], &[1.0], 4.0).is_err());
        assert!(compute_metrics(&[1.0, f64::NAN], &[1.0, 2.0], 4.0).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn improvement_matches_beauty_table() {
        let base = report(0.7379, 0.7602, 0.6331, 0.6361);
        let full = report(0.7733, 0.6547, 0.6871, 0.6903);
        let imp = improvement_report(&base, &full);
        assert!((imp.acc.unwrap() - 4.80).abs() <= 0.01);
        assert!((imp.mse.unwrap() - 13.88).abs() <= 0.01);
    }

    #[test]
    fn identical_reports_improve_by_zero() {
        let r = report(0.5, 0.3, 0.2, 0.1);
        let imp = improvement_report(&r, &r);
        assert_eq!(imp, ImprovementReport { acc: Some(0.0), mse: Some(0.0), srcc: Some(0.0), lcc: Some(0.0) });
    }

    #[test]
    fn zero_baseline_is_undefined() {
        let imp = improvement_report(&report(0.0, 0.0, 0.0, 0.5), &report(0.5, 0.1, 0.1, 0.6));
        assert_eq!((imp.acc, imp.mse, imp.srcc), (None, None, None));
        assert!(imp.lcc.is_some());
    }

    fn six_rows(dimension: Dimension) -> Vec<AblationRow> {
        ablation_labels(dimension)
            .iter()
            .enumerate()
            .map(|(i, l)| AblationRow {
                label: l.to_string(),
                metrics: report(0.7 + 0.01 * i as f64, 0.8 - 0.02 * i as f64, 0.6 + 0.01 * i as f64, 0.61 + 0.01 * i as f64),
            })
            .collect()
    }

    #[test]
    fn ablation_table_has_seven_body_lines() {
        let t = ablation_table("Beautifulness", six_rows(Dimension::Beauty)).unwrap();
        let text = t.render();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[0].starts_with("Metrics"));
        assert!(lines[7].starts_with("Improvement"));
        assert!(lines[6].starts_with("w/ emotion (Full)"));
    }

    #[test]
    fn ablation_json_round_trip() {
        let t = ablation_table("Happiness", six_rows(Dimension::Happy)).unwrap();
        assert_eq!(AblationTable::from_json(&t.to_json().unwrap()).unwrap(), t);
        assert!(t.render().contains("w/ beauty (Full)"));
        assert!(ablation_table("x", vec![]).is_err());
    }
}
