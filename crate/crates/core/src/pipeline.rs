//! Turns a dataset into normalised model windows and model output back into
//! visit counts.

use std::path::Path;

use chrono::{DateTime, Utc};
use diffcore::{Tape, Tensor};

use crate::config::{ModelConfig, TrainConfig};
use crate::data::{
    align_metadata, make_windows, split_series, zscore_apply, zscore_fit, NormalizationStats,
    PoiMetadata, Segment, VisitSeriesDataset, WindowSample,
};
use crate::error::{Error, Result};
use crate::eval::{baseline_forecasts, metrics, Baseline, ComparisonReport, MethodRow, MetricsReport};
use crate::metanodes::{aggregate_by_category, node_labels, CategoryIndex};
use crate::model::BysGnn;
use crate::semantics::{load_embeddings_csv, render_sentences, HashEmbedder};

/// Dataset ready for training and evaluation. Rows follow the full node order
/// (POIs, categories, global); models without meta-nodes use the first `N`.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub poi_ids: Vec<String>,
    pub metadata: Vec<PoiMetadata>,
    pub index: CategoryIndex,
    pub start: DateTime<Utc>,
    /// Raw counts of every node over the full timeline.
    pub raw: Vec<Vec<f64>>,
    /// Fitted on the training block of `raw`.
    pub stats: NormalizationStats,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl PreparedData {
    pub fn n_pois(&self) -> usize {
        self.poi_ids.len()
    }

    pub fn len(&self) -> usize {
        self.raw.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Aggregates raw counts, splits chronologically, normalises with statistics
/// fitted on the training block (or with `stats` when given) and cuts
/// windows.
pub fn prepare(
    ds: &VisitSeriesDataset,
    metadata: &[PoiMetadata],
    model: &ModelConfig,
    train: &TrainConfig,
    stats: Option<NormalizationStats>,
) -> Result<PreparedData> {
    let metadata = align_metadata(ds.poi_ids(), metadata)?;
    let index = CategoryIndex::from_metadata(&metadata)?;
    let aug = aggregate_by_category(ds.visits(), &index)?;
    let min_len = model.window + model.horizon;
    let split = split_series(&aug.values, ds.start(), train.split, min_len)?;
    let stats = match stats {
        Some(s) if s.len() != aug.values.len() => {
            return Err(Error::NodeMismatch(format!(
                "normalisation statistics cover {} nodes, dataset has {}",
                s.len(),
                aug.values.len()
            )))
        }
        Some(s) => s,
        None => zscore_fit(&split.train),
    };
    let windows = |seg: &Segment| -> Result<Vec<WindowSample>> {
        if seg.is_empty() {
            return Ok(Vec::new());
        }
        let norm = Segment::new(seg.offset, seg.start, zscore_apply(seg.rows(), &stats)?);
        make_windows(&norm, model.window, model.horizon, train.stride)
    };
    let (tr, va, te) = (windows(&split.train)?, windows(&split.val)?, windows(&split.test)?);
    Ok(PreparedData {
        poi_ids: ds.poi_ids().to_vec(),
        metadata,
        index,
        start: ds.start(),
        raw: aug.values,
        stats,
        train: tr,
        val: va,
        test: te,
    })
}

/// Frozen sentence embeddings for every node, from `path` when given or the
/// built-in hashing embedder otherwise.
pub fn raw_embeddings(
    metadata: &[PoiMetadata],
    index: &CategoryIndex,
    embed_dim: usize,
    path: Option<&Path>,
) -> Result<Tensor> {
    match path {
        Some(path) => {
            let ids: Vec<String> = metadata.iter().map(|m| m.poi_id.clone()).collect();
            load_embeddings_csv(path, &node_labels(&ids, Some(index)), embed_dim)
        }
        None => Ok(HashEmbedder::new(embed_dim).embed_all(&render_sentences(metadata, Some(index)))),
    }
}

/// Builds an untrained model for `data`.
pub fn build_model(
    data: &PreparedData,
    config: &ModelConfig,
    train: &TrainConfig,
    embeddings: Option<&Path>,
    distances: Vec<Vec<f64>>,
) -> Result<BysGnn> {
    let raw = if train.ablation.no_semantics {
        None
    } else {
        Some(raw_embeddings(&data.metadata, &data.index, config.embed_dim, embeddings)?)
    };
    BysGnn::new(
        config.clone(),
        train.ablation,
        data.poi_ids.clone(),
        data.index.clone(),
        raw,
        distances,
        train.seed,
    )
}

/// `[S, B, T]` model input from the first `nodes` rows of each window.
pub fn batch_inputs(windows: &[&WindowSample], nodes: usize) -> Tensor {
    let b = windows.len();
    let t = windows.first().map_or(0, |w| w.input[0].len());
    let mut data = Vec::with_capacity(nodes * b * t);
    for s in 0..nodes {
        for w in windows {
            data.extend_from_slice(&w.input[s]);
        }
    }
    Tensor::new(&[nodes, b, t], data).expect("windows share a shape")
}

/// `[B, S, H]` normalised targets.
pub fn batch_targets(windows: &[&WindowSample], nodes: usize) -> Tensor {
    let b = windows.len();
    let h = windows.first().map_or(0, |w| w.target[0].len());
    let mut data = Vec::with_capacity(b * nodes * h);
    for w in windows {
        for s in 0..nodes {
            data.extend_from_slice(&w.target[s]);
        }
    }
    Tensor::new(&[b, nodes, h], data).expect("windows share a shape")
}

/// POI forecasts in visit counts, `windows × N × H`.
pub fn forecast_windows(
    model: &BysGnn,
    data: &PreparedData,
    windows: &[WindowSample],
    batch_size: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let nodes = model.n_nodes();
    let n = data.n_pois();
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let tape = Tape::new();
        let fwd = model.forward(&tape, &batch_inputs(&refs, nodes))?;
        let pred = fwd.prediction.value();
        if !pred.all_finite() {
            return Err(Error::Numerical("non-finite forecast".into()));
        }
        let h = pred.shape()[2];
        for b in 0..chunk.len() {
            out.push(
                (0..n)
                    .map(|i| {
                        let off = (b * nodes + i) * h;
                        pred.data()[off..off + h]
                            .iter()
                            .map(|&z| data.stats.denormalize(i, z))
                            .collect()
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Observed POI counts over each window's horizon, `windows × N × H`.
pub fn truth_windows(data: &PreparedData, windows: &[WindowSample]) -> Vec<Vec<Vec<f64>>> {
    windows
        .iter()
        .map(|w| {
            let t0 = w.target_offset();
            let h = w.target[0].len();
            (0..data.n_pois())
                .map(|i| data.raw[i][t0..t0 + h].to_vec())
                .collect()
        })
        .collect()
}

/// Model metrics over `windows`, in visit counts on the POI nodes.
pub fn model_report(
    model: &BysGnn,
    data: &PreparedData,
    windows: &[WindowSample],
    batch_size: usize,
) -> Result<MetricsReport> {
    let pred = forecast_windows(model, data, windows, batch_size)?;
    metrics(&pred, &truth_windows(data, windows))
}

/// The model followed by the seasonal baselines on the test windows. A
/// baseline is left out when no test window has enough history for it.
pub fn test_comparison(
    model: &BysGnn,
    data: &PreparedData,
    batch_size: usize,
) -> Result<ComparisonReport> {
    let mut rows = vec![MethodRow {
        method: "BysGNN".into(),
        report: model_report(model, data, &data.test, batch_size)?,
    }];
    let origins: Vec<usize> = data.test.iter().map(|w| w.target_offset()).collect();
    let pois = &data.raw[..data.n_pois()];
    for b in Baseline::ALL {
        let f = baseline_forecasts(b, pois, &origins, model.config.horizon);
        if f.pred.is_empty() {
            continue;
        }
        rows.push(MethodRow {
            method: b.to_string(),
            report: metrics(&f.pred, &f.truth)?,
        });
    }
    Ok(ComparisonReport { rows })
}
