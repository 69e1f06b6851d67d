//! Category and global aggregate series appended after the POI rows.

use serde::{Deserialize, Serialize};

use crate::data::PoiMetadata;
use crate::error::{Error, Result};

/// Node layout: POIs `0..N`, categories `N..N+K`, global `N+K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryIndex {
    categories: Vec<String>,
    membership: Vec<usize>,
}

impl CategoryIndex {
    /// Categories are ordered by first appearance in `metadata`.
    pub fn from_metadata(metadata: &[PoiMetadata]) -> Result<Self> {
        let mut categories: Vec<String> = Vec::new();
        let mut membership = Vec::with_capacity(metadata.len());
        for m in metadata {
            let name = m.top_category.trim();
            if name.is_empty() {
                return Err(Error::Config(format!("POI {} has no category", m.poi_id)));
            }
            let k = match categories.iter().position(|c| c == name) {
                Some(k) => k,
                None => {
                    categories.push(name.to_string());
                    categories.len() - 1
                }
            };
            membership.push(k);
        }
        Ok(Self {
            categories,
            membership,
        })
    }

    pub fn new(categories: Vec<String>, membership: Vec<usize>) -> Result<Self> {
        if let Some(bad) = membership.iter().find(|&&k| k >= categories.len()) {
            return Err(Error::Config(format!(
                "category index {bad} out of range for {} categories",
                categories.len()
            )));
        }
        Ok(Self {
            categories,
            membership,
        })
    }

    pub fn n_pois(&self) -> usize {
        self.membership.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    /// `N + K + 1`
    pub fn n_nodes(&self) -> usize {
        self.n_pois() + self.n_categories() + 1
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_of(&self, poi: usize) -> usize {
        self.membership[poi]
    }

    pub fn membership(&self) -> &[usize] {
        &self.membership
    }

    pub fn category_node(&self, k: usize) -> usize {
        self.n_pois() + k
    }

    pub fn global_node(&self) -> usize {
        self.n_pois() + self.n_categories()
    }
}

/// Human-readable node labels in node order.
pub fn node_labels(poi_ids: &[String], index: Option<&CategoryIndex>) -> Vec<String> {
    let mut labels = poi_ids.to_vec();
    if let Some(index) = index {
        labels.extend(index.categories().iter().map(|c| format!("category:{c}")));
        labels.push("global".into());
    }
    labels
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSeries {
    pub values: Vec<Vec<f64>>,
    pub index: CategoryIndex,
}

/// Appends one summed row per category and one summed row over all POIs.
pub fn aggregate_by_category(x: &[Vec<f64>], index: &CategoryIndex) -> Result<AugmentedSeries> {
    if x.len() != index.n_pois() {
        return Err(Error::Config(format!(
            "{} series but {} POIs in the category index",
            x.len(),
            index.n_pois()
        )));
    }
    let len = x.first().map_or(0, Vec::len);
    let mut values = x.to_vec();
    let mut sums = vec![vec![0.0; len]; index.n_categories() + 1];
    for (i, row) in x.iter().enumerate() {
        let k = index.category_of(i);
        for (t, v) in row.iter().enumerate() {
            sums[k][t] += v;
        }
    }
    for k in 0..index.n_categories() {
        let (cats, global) = sums.split_at_mut(index.n_categories());
        for (g, v) in global[0].iter_mut().zip(&cats[k]) {
            *g += v;
        }
    }
    values.extend(sums);
    Ok(AugmentedSeries {
        values,
        index: index.clone(),
    })
}
