//! Per-series z-score normalisation fitted on the training block.

use serde::{Deserialize, Serialize};

use super::TrainSegment;
use crate::error::{Error, Result};

/// Standard deviations below this are treated as zero.
const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Series whose standard deviation was zero and was replaced by 1.
    pub floored: Vec<bool>,
}

impl NormalizationStats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn normalize(&self, row: usize, x: f64) -> f64 {
        (x - self.mean[row]) / self.std[row]
    }

    pub fn denormalize(&self, row: usize, z: f64) -> f64 {
        z * self.std[row] + self.mean[row]
    }

    /// Statistics restricted to the given rows, in that order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            mean: rows.iter().map(|&r| self.mean[r]).collect(),
            std: rows.iter().map(|&r| self.std[r]).collect(),
            floored: rows.iter().map(|&r| self.floored[r]).collect(),
        }
    }
}

pub fn zscore_fit(train: &TrainSegment) -> NormalizationStats {
    let mut stats = NormalizationStats {
        mean: Vec::new(),
        std: Vec::new(),
        floored: Vec::new(),
    };
    for row in train.rows() {
        let n = row.len().max(1) as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let floored = std < MIN_STD;
        stats.mean.push(mean);
        stats.std.push(if floored { 1.0 } else { std });
        stats.floored.push(floored);
    }
    stats
}

fn check_rows(x: &[Vec<f64>], stats: &NormalizationStats) -> Result<()> {
    if x.len() != stats.len() {
        return Err(Error::Config(format!(
            "{} series but statistics for {}",
            x.len(),
            stats.len()
        )));
    }
    Ok(())
}

pub fn zscore_apply(x: &[Vec<f64>], stats: &NormalizationStats) -> Result<Vec<Vec<f64>>> {
    check_rows(x, stats)?;
    Ok(x.iter()
        .enumerate()
        .map(|(r, row)| row.iter().map(|&v| stats.normalize(r, v)).collect())
        .collect())
}

pub fn zscore_invert(z: &[Vec<f64>], stats: &NormalizationStats) -> Result<Vec<Vec<f64>>> {
    check_rows(z, stats)?;
    Ok(z.iter()
        .enumerate()
        .map(|(r, row)| row.iter().map(|&v| stats.denormalize(r, v)).collect())
        .collect())
}
