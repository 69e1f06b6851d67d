//! Visit-count datasets: ingestion, chronological splitting, normalisation,
//! windowing, and a synthetic generator.

mod io;
mod normalize;
mod split;
pub mod synth;
mod window;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    format_timestamp, load_metadata_csv, load_visits_csv, parse_timestamp, read_metadata,
    read_visits, write_metadata_csv,
    write_visits_csv, LoadReport,
};
pub use normalize::{zscore_apply, zscore_fit, zscore_invert, NormalizationStats};
pub use split::{split_dataset, split_series, DatasetSplit, Segment, TrainSegment};
pub use synth::{generate_synthetic, SynthSpec};
pub use window::{make_windows, WindowSample};

/// Descriptive attributes of one point of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiMetadata {
    pub poi_id: String,
    pub name: String,
    pub address: String,
    pub hours: String,
    pub phone: String,
    pub top_category: String,
    pub sub_category: String,
    pub latitude: f64,
    pub longitude: f64,
}

impl PoiMetadata {
    pub fn validate(&self) -> Result<()> {
        if self.poi_id.is_empty() {
            return Err(Error::Schema("empty poi_id".into()));
        }
        if self.top_category.trim().is_empty() {
            return Err(Error::Schema(format!(
                "POI {} has no top_category",
                self.poi_id
            )));
        }
        if !(-90.0..=90.0).contains(&self.latitude) || !(-180.0..=180.0).contains(&self.longitude)
        {
            return Err(Error::Schema(format!(
                "POI {} has out-of-range coordinates ({}, {})",
                self.poi_id, self.latitude, self.longitude
            )));
        }
        Ok(())
    }
}

/// Dense hourly visit counts for `N` POIs over a gap-free time range.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitSeriesDataset {
    poi_ids: Vec<String>,
    start: DateTime<Utc>,
    visits: Vec<Vec<f64>>,
}

impl VisitSeriesDataset {
    pub fn new(poi_ids: Vec<String>, start: DateTime<Utc>, visits: Vec<Vec<f64>>) -> Result<Self> {
        if poi_ids.len() != visits.len() {
            return Err(Error::Schema(format!(
                "{} ids for {} series",
                poi_ids.len(),
                visits.len()
            )));
        }
        let len = visits.first().map_or(0, Vec::len);
        if visits.iter().any(|r| r.len() != len) {
            return Err(Error::Schema("series have different lengths".into()));
        }
        if visits.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Schema("visit counts must be finite and ≥ 0".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = poi_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Schema(format!("duplicate poi_id {dup}")));
        }
        Ok(Self {
            poi_ids,
            start,
            visits,
        })
    }

    pub fn poi_ids(&self) -> &[String] {
        &self.poi_ids
    }

    pub fn n_pois(&self) -> usize {
        self.poi_ids.len()
    }

    /// Number of hourly steps.
    pub fn len(&self) -> usize {
        self.visits.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn timestamp(&self, hour: usize) -> DateTime<Utc> {
        self.start + Duration::hours(hour as i64)
    }

    /// Hour index of a timestamp, if it lies on the grid of this dataset.
    pub fn hour_index(&self, ts: DateTime<Utc>) -> Option<usize> {
        let delta = ts - self.start;
        if delta.num_seconds() < 0 || delta.num_seconds() % 3600 != 0 {
            return None;
        }
        let h = (delta.num_seconds() / 3600) as usize;
        (h < self.len()).then_some(h)
    }

    pub fn visits(&self) -> &[Vec<f64>] {
        &self.visits
    }

    pub fn series(&self, poi: usize) -> &[f64] {
        &self.visits[poi]
    }
}

/// Metadata rows reordered to follow `poi_ids`.
pub fn align_metadata(poi_ids: &[String], metadata: &[PoiMetadata]) -> Result<Vec<PoiMetadata>> {
    let by_id: std::collections::HashMap<&str, &PoiMetadata> =
        metadata.iter().map(|m| (m.poi_id.as_str(), m)).collect();
    if by_id.len() != metadata.len() {
        return Err(Error::Schema("duplicate poi_id in metadata".into()));
    }
    poi_ids
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|m| (*m).clone())
                .ok_or_else(|| Error::Config(format!("POI {id} has no metadata row")))
        })
        .collect()
}
