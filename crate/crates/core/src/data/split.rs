//! Chronological train/validation/test splitting.

use std::ops::Deref;

use chrono::{DateTime, Duration, Utc};

use super::VisitSeriesDataset;
use crate::error::{Error, Result};

/// A contiguous block of hours cut from a set of aligned series.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Hour index of the first column within the full timeline.
    pub offset: usize,
    pub start: DateTime<Utc>,
    values: Vec<Vec<f64>>,
}

impl Segment {
    pub fn new(offset: usize, start: DateTime<Utc>, values: Vec<Vec<f64>>) -> Self {
        Self {
            offset,
            start,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn n_rows(&self) -> usize {
        self.values.len()
    }
}

/// The training block. Normalisation statistics can only be fitted on this
/// type, so validation and test data cannot leak into them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSegment(Segment);

impl Deref for TrainSegment {
    type Target = Segment;

    fn deref(&self) -> &Segment {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: TrainSegment,
    pub val: Segment,
    pub test: Segment,
    /// Names of splits that received no data (zero fraction).
    pub empty: Vec<&'static str>,
}

/// Cuts the time axis into consecutive train/validation/test blocks.
///
/// Every split with a non-zero fraction must hold at least `min_len` hours
/// (one input window plus its horizon).
pub fn split_series(
    values: &[Vec<f64>],
    start: DateTime<Utc>,
    fractions: [f64; 3],
    min_len: usize,
) -> Result<DatasetSplit> {
    if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let total = values.first().map_or(0, Vec::len);
    let n_train = ((total as f64) * fractions[0]).round() as usize;
    let n_val = (((total as f64) * fractions[1]).round() as usize).min(total - n_train.min(total));
    let n_train = n_train.min(total);
    let n_test = total - n_train - n_val;
    let lens = [n_train, n_val, n_test];
    let names = ["train", "val", "test"];
    let mut empty = Vec::new();
    for ((name, &len), &frac) in names.iter().zip(&lens).zip(&fractions) {
        if frac == 0.0 || len == 0 {
            if frac > 0.0 {
                return Err(Error::Config(format!(
                    "{name} split is empty for {total} hours"
                )));
            }
            empty.push(*name);
        } else if len < min_len {
            return Err(Error::Config(format!(
                "{name} split has {len} hours, fewer than one window ({min_len})"
            )));
        }
    }
    let cut = |from: usize, len: usize| {
        Segment::new(
            from,
            start + Duration::hours(from as i64),
            values.iter().map(|r| r[from..from + len].to_vec()).collect(),
        )
    };
    Ok(DatasetSplit {
        train: TrainSegment(cut(0, n_train)),
        val: cut(n_train, n_val),
        test: cut(n_train + n_val, n_test),
        empty,
    })
}

pub fn split_dataset(
    ds: &VisitSeriesDataset,
    fractions: [f64; 3],
    min_len: usize,
) -> Result<DatasetSplit> {
    split_series(ds.visits(), ds.start(), fractions, min_len)
}
