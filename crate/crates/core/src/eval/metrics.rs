use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub mae: f64,
    /// Absent when every target at this step is zero.
    pub mape: Option<f64>,
    pub rmse: f64,
    pub mape_masked_count: usize,
}

/// Errors in visit-count units over all windows, POIs and horizon steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    /// Mean of `|e| / truth` over points with `truth > 0`; absent if none.
    pub mape: Option<f64>,
    pub rmse: f64,
    pub per_horizon: Vec<HorizonMetrics>,
    pub n_windows: usize,
    pub n_points: usize,
    /// Points left out of MAPE because their target was zero.
    pub mape_masked_count: usize,
}

#[derive(Default)]
struct Acc {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
    n_pct: usize,
    masked: usize,
}

impl Acc {
    fn push(&mut self, p: f64, t: f64) {
        let e = p - t;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if t > 0.0 {
            self.pct += e.abs() / t;
            self.n_pct += 1;
        } else {
            self.masked += 1;
        }
    }

    fn mae(&self) -> f64 {
        self.abs / self.n as f64
    }

    fn rmse(&self) -> f64 {
        (self.sq / self.n as f64).sqrt()
    }

    fn mape(&self) -> Option<f64> {
        (self.n_pct > 0).then(|| self.pct / self.n_pct as f64)
    }
}

/// `pred` and `truth` are `windows × nodes × horizon` in original units.
pub fn metrics(pred: &[Vec<Vec<f64>>], truth: &[Vec<Vec<f64>>]) -> Result<MetricsReport> {
    let shape_err = || Error::Config("prediction and truth shapes differ".into());
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(if pred.is_empty() {
            Error::Config("no evaluation windows".into())
        } else {
            shape_err()
        });
    }
    let h = truth[0].first().map_or(0, Vec::len);
    let mut total = Acc::default();
    let mut steps: Vec<Acc> = (0..h).map(|_| Acc::default()).collect();
    for (pw, tw) in pred.iter().zip(truth) {
        if pw.len() != tw.len() {
            return Err(shape_err());
        }
        for (pn, tn) in pw.iter().zip(tw) {
            if pn.len() != h || tn.len() != h {
                return Err(shape_err());
            }
            for (k, (&p, &t)) in pn.iter().zip(tn).enumerate() {
                total.push(p, t);
                steps[k].push(p, t);
            }
        }
    }
    if total.n == 0 {
        return Err(Error::Config("no evaluation points".into()));
    }
    let report = MetricsReport {
        mae: total.mae(),
        mape: total.mape(),
        rmse: total.rmse(),
        per_horizon: steps
            .iter()
            .map(|a| HorizonMetrics {
                mae: a.mae(),
                mape: a.mape(),
                rmse: a.rmse(),
                mape_masked_count: a.masked,
            })
            .collect(),
        n_windows: pred.len(),
        n_points: total.n,
        mape_masked_count: total.masked,
    };
    debug_assert!(report.rmse + 1e-12 * report.rmse.max(1.0) >= report.mae);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(p: &[f64], t: &[f64]) -> MetricsReport {
        metrics(&[vec![p.to_vec()]], &[vec![t.to_vec()]]).unwrap()
    }

    #[test]
    fn hand_examples() {
        let r = one(&[3.0, 4.0], &[3.0, 4.0]);
        assert_eq!((r.mae, r.mape, r.rmse), (0.0, Some(0.0), 0.0));
        let r = one(&[9.0], &[10.0]);
        assert_eq!(r.mae, 1.0);
        assert!((r.mape.unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(r.rmse, 1.0);
        let r = one(&[2.0, 4.0], &[1.0, 5.0]);
        assert_eq!((r.mae, r.rmse), (1.0, 1.0));
        let r = one(&[1.0, 7.0], &[1.0, 5.0]);
        assert_eq!(r.mae, 1.0);
        assert!((r.rmse - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_targets_are_masked() {
        let r = one(&[1.0, 2.0], &[0.0, 4.0]);
        assert_eq!(r.mape_masked_count, 1);
        assert_eq!(r.mape, Some(0.5));
        let r = one(&[1.0, 2.0], &[0.0, 0.0]);
        assert_eq!(r.mape, None);
        assert_eq!(r.mape_masked_count, 2);
        assert_eq!(r.per_horizon[0].mape, None);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(metrics(&[vec![vec![1.0]]], &[vec![vec![1.0, 2.0]]]).is_err());
        assert!(metrics(&[], &[]).is_err());
    }

    fn cube() -> impl Strategy<Value = (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
        (1usize..4, 1usize..5, 1usize..4).prop_flat_map(|(w, n, h)| {
            let c = move || {
                proptest::collection::vec(
                    proptest::collection::vec(proptest::collection::vec(0.0..100.0f64, h), n),
                    w,
                )
            };
            (c(), c())
        })
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae_and_order_is_irrelevant((p, t) in cube()) {
            let r = metrics(&p, &t).unwrap();
            prop_assert!(r.rmse + 1e-12 >= r.mae);
            prop_assert!(r.mae >= 0.0);
            let rev = |x: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
                x.iter().map(|w| w.iter().rev().cloned().collect()).collect()
            };
            let r2 = metrics(&rev(&p), &rev(&t)).unwrap();
            prop_assert!((r.mae - r2.mae).abs() < 1e-9);
            prop_assert!((r.rmse - r2.rmse).abs() < 1e-9);
            prop_assert_eq!(r.mape.is_some(), r2.mape.is_some());
            if let (Some(a), Some(b)) = (r.mape, r2.mape) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
