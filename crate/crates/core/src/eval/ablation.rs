use std::fmt::Write as _;

use crate::config::Ablation;
use crate::error::Result;

use super::MetricsReport;

/// Median metrics across seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mae: f64,
    pub mape: Option<f64>,
    pub rmse: f64,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl MetricSummary {
    pub fn median_of(reports: &[MetricsReport]) -> Self {
        let mapes: Vec<f64> = reports.iter().filter_map(|r| r.mape).collect();
        Self {
            mae: median(reports.iter().map(|r| r.mae).collect()).unwrap_or(f64::NAN),
            mape: if mapes.len() == reports.len() {
                median(mapes)
            } else {
                None
            },
            rmse: median(reports.iter().map(|r| r.rmse).collect()).unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Ablation,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricsReport>,
    pub median: MetricSummary,
}

/// Signed relative change `(variant − full) / full` in percent.
pub fn relative_change(variant: f64, full: f64) -> f64 {
    100.0 * (variant - full) / full
}

fn pct(x: f64) -> String {
    format!("{x:+.2}%")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    /// First row is the full model.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn full(&self) -> &AblationRow {
        &self.rows[0]
    }

    pub fn row(&self, variant: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    fn metric_rows(&self) -> Vec<(&'static str, Vec<Option<f64>>)> {
        vec![
            ("MAE", self.rows.iter().map(|r| Some(r.median.mae)).collect()),
            ("MAPE", self.rows.iter().map(|r| r.median.mape).collect()),
            ("RMSE", self.rows.iter().map(|r| Some(r.median.rmse)).collect()),
        ]
    }

    /// Metrics as rows, variants as columns; each metric row is followed by
    /// the relative change of every variant against the full model.
    pub fn to_text(&self) -> String {
        let mut grid: Vec<Vec<String>> = Vec::new();
        let mut header = vec![String::new()];
        header.extend(self.rows.iter().map(|r| r.variant.to_string()));
        grid.push(header);
        for (name, values) in self.metric_rows() {
            let mut line = vec![name.to_string()];
            line.extend(values.iter().map(|v| v.map_or("n/a".into(), |x| format!("{x:.3}"))));
            grid.push(line);
            let mut change = vec![String::new()];
            change.extend(values.iter().enumerate().map(|(i, v)| match (i, v, values[0]) {
                (0, _, _) => "--".to_string(),
                (_, Some(v), Some(full)) => pct(relative_change(*v, full)),
                _ => "n/a".to_string(),
            }));
            grid.push(change);
        }
        let widths: Vec<usize> = (0..grid[0].len())
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
            let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
        }
        out
    }

    /// `variant,seeds,mae,mape,rmse,mae_change_pct,mape_change_pct,rmse_change_pct`
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,seeds,mae,mape,rmse,mae_change_pct,mape_change_pct,rmse_change_pct\n",
        );
        let full = self.full().median;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            let m = r.median;
            let mape_change = match (m.mape, full.mape) {
                (Some(a), Some(b)) => Some(relative_change(a, b)),
                _ => None,
            };
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.variant,
                seeds.join(" "),
                m.mae,
                opt(m.mape),
                m.rmse,
                relative_change(m.mae, full.mae),
                opt(mape_change),
                relative_change(m.rmse, full.rmse)
            );
        }
        out
    }
}

/// Runs the full model and every variant once per seed through `run`, which
/// trains and evaluates one configuration.
pub fn run_ablation(
    variants: &[Ablation],
    seeds: &[u64],
    mut run: impl FnMut(Ablation, u64) -> Result<MetricsReport>,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len() + 1);
    for &variant in std::iter::once(&Ablation::default()).chain(variants) {
        let per_seed = seeds
            .iter()
            .map(|&s| run(variant, s))
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow {
            variant,
            seeds: seeds.to_vec(),
            median: MetricSummary::median_of(&per_seed),
            per_seed,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(mae: f64) -> MetricsReport {
        MetricsReport {
            mae,
            mape: Some(mae / 10.0),
            rmse: mae * 1.5,
            per_horizon: Vec::new(),
            n_windows: 1,
            n_points: 1,
            mape_masked_count: 0,
        }
    }

    #[test]
    fn empty_variant_list_gives_only_full_row() {
        let t = run_ablation(&[], &[1, 2, 3], |_, s| Ok(report(s as f64))).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.full().median.mae, 2.0);
    }

    #[test]
    fn relative_change_is_signed_percent() {
        assert!((relative_change(4.561, 3.916) - 16.47).abs() < 0.01);
        assert!(relative_change(0.9, 1.0) < 0.0);
        assert_eq!(pct(16.4711), "+16.47%");
    }

    #[test]
    fn identical_variants_give_identical_rows() {
        let v = Ablation::single("no_space").unwrap();
        let t = run_ablation(&[v, v], &[4, 5], |a, s| {
            Ok(report(s as f64 + if a.is_full() { 0.0 } else { 1.0 }))
        })
        .unwrap();
        assert_eq!(t.rows[1], t.rows[2]);
        let text = t.to_text();
        assert!(text.contains("+22.22%"), "{text}");
        assert!(text.lines().nth(2).unwrap().contains("--"));
        assert_eq!(t.to_csv().lines().count(), 4);
    }
}
