//! Seasonal baselines. They read only raw series and never touch the model.

use std::fmt;

const WEEK: usize = 168;
const HA_WEEKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    NaiveSeasonal,
    HistoricalAverage,
}

impl Baseline {
    pub const ALL: [Baseline; 2] = [Baseline::NaiveSeasonal, Baseline::HistoricalAverage];

    /// Hours of history needed before the first forecast step.
    pub fn history(self) -> usize {
        match self {
            Baseline::NaiveSeasonal => WEEK,
            Baseline::HistoricalAverage => HA_WEEKS * WEEK,
        }
    }

    pub fn forecast(self, series: &[Vec<f64>], t: usize, horizon: usize) -> Option<Vec<Vec<f64>>> {
        match self {
            Baseline::NaiveSeasonal => naive_seasonal(series, t, horizon),
            Baseline::HistoricalAverage => historical_average(series, t, horizon),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::NaiveSeasonal => "Naive Seasonal",
            Baseline::HistoricalAverage => "Historical Average",
        })
    }
}

/// Forecast of `x[t + h]` as `x[t + h − 168]`, for every series. `None` when
/// `t` is inside the first week or the horizon exceeds a week.
pub fn naive_seasonal(series: &[Vec<f64>], t: usize, horizon: usize) -> Option<Vec<Vec<f64>>> {
    if t < WEEK || horizon > WEEK {
        return None;
    }
    Some(
        series
            .iter()
            .map(|s| (0..horizon).map(|h| s[t + h - WEEK]).collect())
            .collect(),
    )
}

/// Mean of the same weekday and hour over the previous four weeks.
pub fn historical_average(series: &[Vec<f64>], t: usize, horizon: usize) -> Option<Vec<Vec<f64>>> {
    if t < HA_WEEKS * WEEK || horizon > WEEK {
        return None;
    }
    Some(
        series
            .iter()
            .map(|s| {
                (0..horizon)
                    .map(|h| {
                        (1..=HA_WEEKS).map(|k| s[t + h - k * WEEK]).sum::<f64>() / HA_WEEKS as f64
                    })
                    .collect()
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineForecasts {
    /// `windows × series × horizon`
    pub pred: Vec<Vec<Vec<f64>>>,
    pub truth: Vec<Vec<Vec<f64>>>,
    /// Windows without enough history.
    pub skipped: usize,
}

/// Runs a baseline at every forecast origin in `origins` against the observed
/// values of `series`.
pub fn baseline_forecasts(
    method: Baseline,
    series: &[Vec<f64>],
    origins: &[usize],
    horizon: usize,
) -> BaselineForecasts {
    let mut out = BaselineForecasts {
        pred: Vec::new(),
        truth: Vec::new(),
        skipped: 0,
    };
    for &t in origins {
        let len = series.first().map_or(0, Vec::len);
        match method.forecast(series, t, horizon) {
            Some(p) if t + horizon <= len => {
                out.pred.push(p);
                out.truth.push(
                    series
                        .iter()
                        .map(|s| s[t..t + horizon].to_vec())
                        .collect(),
                );
            }
            _ => out.skipped += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::metrics;

    fn weekly(weeks: usize) -> Vec<Vec<f64>> {
        let base: Vec<f64> = (0..WEEK).map(|h| ((h * 37) % 23) as f64 + 1.0).collect();
        vec![base.iter().cycle().take(weeks * WEEK).copied().collect()]
    }

    #[test]
    fn periodic_series_are_forecast_exactly() {
        let s = weekly(6);
        let origins: Vec<usize> = (700..900).collect();
        for m in Baseline::ALL {
            let f = baseline_forecasts(m, &s, &origins, 6);
            assert_eq!(f.skipped, 0);
            let r = metrics(&f.pred, &f.truth).unwrap();
            assert_eq!((r.mae, r.mape, r.rmse), (0.0, Some(0.0), 0.0));
        }
    }

    #[test]
    fn level_shift_gives_constant_error() {
        let mut s = weekly(3);
        for v in &mut s[0][WEEK..] {
            *v += 2.5;
        }
        let f = baseline_forecasts(Baseline::NaiveSeasonal, &s, &(WEEK..2 * WEEK - 6).collect::<Vec<_>>(), 6);
        let r = metrics(&f.pred, &f.truth).unwrap();
        assert!((r.mae - 2.5).abs() < 1e-12);
    }

    #[test]
    fn early_origins_are_skipped() {
        let s = weekly(5);
        let f = baseline_forecasts(Baseline::NaiveSeasonal, &s, &(0..200).collect::<Vec<_>>(), 6);
        assert_eq!(f.skipped, 168);
        let f = baseline_forecasts(Baseline::HistoricalAverage, &s, &[671, 672], 6);
        assert_eq!(f.skipped, 1);
    }

    #[test]
    fn historical_average_arithmetic() {
        let constant = vec![vec![3.0; 5 * WEEK]];
        assert_eq!(historical_average(&constant, 4 * WEEK, 2), Some(vec![vec![3.0, 3.0]]));
        let mut four = vec![vec![0.0; 5 * WEEK]];
        for (k, v) in [2.0, 4.0, 6.0, 8.0].into_iter().enumerate() {
            four[0][(3 - k) * WEEK + 10] = v;
        }
        assert_eq!(historical_average(&four, 4 * WEEK + 10, 1), Some(vec![vec![5.0]]));
    }

    #[test]
    fn baselines_do_not_depend_on_model_code() {
        let src = include_str!("baselines.rs");
        let code = &src[..src.find("#[cfg(test)]").unwrap()];
        for module in ["model", "encoder", "gnn", "graphgen", "semantics", "training", "pipeline", "diffcore"] {
            assert!(!code.contains(&format!("{module}::")), "baselines reference {module}");
        }
    }
}
