use std::fmt::Write as _;

use super::MetricsReport;

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub method: String,
    pub report: MetricsReport,
}

/// Model against baselines on the same test windows.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    /// Model row first, then baselines.
    pub rows: Vec<MethodRow>,
}

fn improvement(model: f64, best: f64) -> f64 {
    100.0 * (best - model) / best
}

impl ComparisonReport {
    /// Percent reduction of each model metric relative to the best baseline;
    /// positive means the model is better.
    pub fn improvement(&self) -> [Option<f64>; 3] {
        let model = &self.rows[0].report;
        let baselines = &self.rows[1..];
        let best = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
            baselines
                .iter()
                .filter_map(|r| f(&r.report))
                .min_by(f64::total_cmp)
        };
        let mae = best(&|r| Some(r.mae)).map(|b| improvement(model.mae, b));
        let mape = match (model.mape, best(&|r| r.mape)) {
            (Some(m), Some(b)) => Some(improvement(m, b)),
            _ => None,
        };
        let rmse = best(&|r| Some(r.rmse)).map(|b| improvement(model.rmse, b));
        [mae, mape, rmse]
    }

    /// `method,mae,mape,rmse,n_windows,mape_masked_count`; the Improvement
    /// row holds percentages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,mae,mape,rmse,n_windows,mape_masked_count\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            let m = &r.report;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method,
                m.mae,
                opt(m.mape),
                m.rmse,
                m.n_windows,
                m.mape_masked_count
            );
        }
        if self.rows.len() > 1 {
            let [a, b, c] = self.improvement();
            let _ = writeln!(out, "Improvement,{},{},{},,", opt(a), opt(b), opt(c));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let header = ["Method", "MAE", "MAPE", "RMSE", "n_windows", "mape_masked_count"];
        let mut grid: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let m = &r.report;
            grid.push(vec![
                r.method.clone(),
                format!("{:.3}", m.mae),
                m.mape.map_or("n/a".into(), |x| format!("{x:.3}")),
                format!("{:.3}", m.rmse),
                m.n_windows.to_string(),
                m.mape_masked_count.to_string(),
            ]);
        }
        if self.rows.len() > 1 {
            let fmt = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:+.2}%"));
            let [a, b, c] = self.improvement();
            grid.push(vec![
                "Improvement".into(),
                fmt(a),
                fmt(b),
                fmt(c),
                String::new(),
                String::new(),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &grid {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| {
                    if c == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(mae: f64, mape: Option<f64>) -> MetricsReport {
        MetricsReport {
            mae,
            mape,
            rmse: mae * 2.0,
            per_horizon: Vec::new(),
            n_windows: 3,
            n_points: 18,
            mape_masked_count: 2,
        }
    }

    #[test]
    fn improvement_is_against_best_baseline() {
        let r = ComparisonReport {
            rows: vec![
                MethodRow { method: "BysGNN".into(), report: rep(4.095, Some(0.5)) },
                MethodRow { method: "Naive Seasonal".into(), report: rep(4.746, Some(0.4)) },
                MethodRow { method: "Historical Average".into(), report: rep(8.86, None) },
            ],
        };
        let [mae, mape, _] = r.improvement();
        assert!((mae.unwrap() - 13.72).abs() < 0.01);
        assert!(mape.unwrap() < 0.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("method,mae,mape,rmse,n_windows,mape_masked_count\n"));
        assert!(csv.lines().last().unwrap().starts_with("Improvement,"));
        let text = r.to_text();
        assert!(text.contains("Improvement") && text.contains("+13.72%"));
    }
}
