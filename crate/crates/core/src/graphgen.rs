//! Per-window adjacency: spatial, semantic and temporal similarities, the
//! learnable gate that fuses them, and case-amplification thresholding.

use std::path::Path;

use diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::data::PoiMetadata;
use crate::error::{Error, Result};
use crate::init::fan_in_uniform;

const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Kernel cutoff used when every POI sits at the same spot.
const TAU_FLOOR_M: f64 = 1.0;

/// Pairwise distances in meters from an equirectangular projection about the
/// centroid of all POIs.
pub fn pairwise_distances(metadata: &[PoiMetadata]) -> Vec<Vec<f64>> {
    let n = metadata.len().max(1) as f64;
    let lat0 = metadata.iter().map(|m| m.latitude).sum::<f64>() / n;
    let lon0 = metadata.iter().map(|m| m.longitude).sum::<f64>() / n;
    let k = lat0.to_radians().cos();
    let xy: Vec<(f64, f64)> = metadata
        .iter()
        .map(|m| {
            (
                EARTH_RADIUS_M * (m.longitude - lon0).to_radians() * k,
                EARTH_RADIUS_M * (m.latitude - lat0).to_radians(),
            )
        })
        .collect();
    xy.iter()
        .map(|a| xy.iter().map(|b| (a.0 - b.0).hypot(a.1 - b.1)).collect())
        .collect()
}

/// Reads a dense `N × N` matrix of distances in meters (no header).
pub fn load_distance_matrix(path: &Path, n: usize) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.into(),
            line: 0,
            msg: e.to_string(),
        })?;
    let mut rows = Vec::with_capacity(n);
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 1;
        let rec = rec.map_err(|e| Error::Parse {
            path: path.into(),
            line,
            msg: e.to_string(),
        })?;
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.into(),
                line,
                msg: e.to_string(),
            })?;
        rows.push(row);
    }
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Schema(format!(
            "{}: expected a {n}×{n} distance matrix",
            path.display()
        )));
    }
    for i in 0..n {
        if rows[i][i] != 0.0 {
            return Err(Error::Schema(format!("{}: nonzero diagonal at {i}", path.display())));
        }
        for j in 0..n {
            let (a, b) = (rows[i][j], rows[j][i]);
            if !(a >= 0.0) || !a.is_finite() || (a - b).abs() > 1e-9 * a.abs().max(1.0) {
                return Err(Error::Schema(format!(
                    "{}: distances must be finite, non-negative and symmetric (entry {i},{j})",
                    path.display()
                )));
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialContext {
    pub distances: Vec<Vec<f64>>,
    /// Population standard deviation of the off-diagonal distances.
    pub sigma: f64,
    pub tau: f64,
    /// True when `sigma` is zero and the cutoff fell back to one meter.
    pub degenerate: bool,
}

impl SpatialContext {
    pub fn new(distances: Vec<Vec<f64>>, tau_factor: f64) -> Self {
        let n = distances.len();
        let upper: Vec<f64> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| distances[i][j])
            .collect();
        let sigma = if upper.is_empty() {
            0.0
        } else {
            let mean = upper.iter().sum::<f64>() / upper.len() as f64;
            (upper.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / upper.len() as f64).sqrt()
        };
        let degenerate = sigma == 0.0;
        let tau = if degenerate {
            TAU_FLOOR_M
        } else {
            tau_factor * sigma
        };
        Self {
            distances,
            sigma,
            tau,
            degenerate,
        }
    }

    pub fn n_pois(&self) -> usize {
        self.distances.len()
    }
}

/// Gaussian-kernel similarity `[S, S]`: POI block from distances, every entry
/// touching one of the `n_meta` trailing meta-nodes equal to 1.
pub fn spatial_similarity(ctx: &SpatialContext, n_meta: usize) -> Tensor {
    let n = ctx.n_pois();
    let s = n + n_meta;
    let mut out = Tensor::ones(&[s, s]);
    for i in 0..n {
        for j in 0..n {
            let d = ctx.distances[i][j];
            let v = if d >= ctx.tau {
                0.0
            } else if ctx.degenerate {
                1.0
            } else {
                (-(d * d) / (ctx.sigma * ctx.sigma)).exp()
            };
            out.set(&[i, j], v);
        }
    }
    out
}

/// Cosine similarity between rows of `Û: [S, P]`.
pub fn semantic_similarity(u: Var<'_>) -> Result<Var<'_>> {
    Ok(u.cosine_rows()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphParams {
    pub heads: usize,
    /// Query projections of all heads side by side, `[M, M]`.
    pub wq: ParamId,
    pub wk: ParamId,
    /// Value path; used only by [`multihead_output`].
    pub wv: ParamId,
    pub wo: ParamId,
    /// `α = sigmoid(alpha_raw)`, `[1]`.
    pub alpha_raw: ParamId,
}

impl GraphParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        temporal_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || temporal_dim % heads != 0 {
            return Err(Error::Config(format!(
                "temporal_dim {temporal_dim} is not divisible by {heads} heads"
            )));
        }
        let m = temporal_dim;
        Ok(Self {
            heads,
            wq: store.add("graph.wq", fan_in_uniform(rng, &[m, m], m))?,
            wk: store.add("graph.wk", fan_in_uniform(rng, &[m, m], m))?,
            wv: store.add("graph.wv", fan_in_uniform(rng, &[m, m], m))?,
            wo: store.add("graph.wo", fan_in_uniform(rng, &[m, m], m))?,
            alpha_raw: store.add("graph.alpha_raw", Tensor::zeros(&[1]))?,
        })
    }

    pub fn alpha(&self, store: &ParamStore) -> f64 {
        diffcore::sigmoid(store.value(self.alpha_raw).data()[0])
    }
}

pub struct TemporalScores<'t> {
    /// Head-averaged attention weights `[B, S, S]`.
    pub s_t: Var<'t>,
    /// Pre-softmax scores of each head, `[B, S, S]`.
    pub head_scores: Vec<Var<'t>>,
    /// Post-softmax weights of each head, `[B, S, S]`.
    pub head_weights: Vec<Var<'t>>,
}

fn project_heads<'t>(c: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let s = c.shape();
    Ok(c.reshape(&[s[0] * s[1], s[2]])?
        .matmul(w)?
        .reshape(&s)?)
}

/// Scaled dot-product attention of every node over every node, with `C` as
/// queries and keys; scores are divided by `√M`.
pub fn temporal_attention<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &GraphParams,
    c: Var<'t>,
) -> Result<TemporalScores<'t>> {
    let shape = c.shape();
    if shape.len() != 3 {
        return Err(Error::Config(format!("expected [B, S, M] embeddings, got {shape:?}")));
    }
    let m = shape[2];
    if m % p.heads != 0 {
        return Err(Error::Config(format!("{m} columns not divisible by {} heads", p.heads)));
    }
    let dk = m / p.heads;
    let q = project_heads(c, tape.param(store, p.wq))?;
    let k = project_heads(c, tape.param(store, p.wk))?;
    let scale = 1.0 / (m as f64).sqrt();
    let mut head_scores = Vec::with_capacity(p.heads);
    let mut head_weights = Vec::with_capacity(p.heads);
    let mut total: Option<Var<'t>> = None;
    for h in 0..p.heads {
        let qh = q.slice_last(h * dk, dk)?;
        let kh = k.slice_last(h * dk, dk)?;
        let scores = qh.bmm(kh.transpose()?)?.scale(scale);
        let weights = scores.softmax_last();
        total = Some(match total {
            None => weights,
            Some(t) => t.add(weights)?,
        });
        head_scores.push(scores);
        head_weights.push(weights);
    }
    let s_t = total.expect("at least one head").scale(1.0 / p.heads as f64);
    Ok(TemporalScores {
        s_t,
        head_scores,
        head_weights,
    })
}

/// Full multi-head output `concat_i(A_i · C W_i^V) · W^O`, `[B, S, M]`.
pub fn multihead_output<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &GraphParams,
    c: Var<'t>,
    scores: &TemporalScores<'t>,
) -> Result<Var<'t>> {
    let shape = c.shape();
    let dk = shape[2] / p.heads;
    let v = project_heads(c, tape.param(store, p.wv))?;
    let heads = scores
        .head_weights
        .iter()
        .enumerate()
        .map(|(h, a)| a.bmm(v.slice_last(h * dk, dk)?))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    project_heads(Var::concat(&heads)?, tape.param(store, p.wo))
}

/// Which similarities feed the gate.
#[derive(Clone, Copy)]
pub enum Gate<'t> {
    /// `(1 − α)·S_E + α·S_D` with `α = sigmoid(alpha_raw)`.
    Mixed {
        s_e: Var<'t>,
        s_d: Var<'t>,
        alpha_raw: Var<'t>,
    },
    Semantic(Var<'t>),
    Spatial(Var<'t>),
}

/// `S = gate ⊙ S_T`; the `[S, S]` gate is shared across the batch.
pub fn fuse_gate<'t>(gate: Gate<'t>, s_t: Var<'t>) -> Result<Var<'t>> {
    let g = match gate {
        Gate::Mixed {
            s_e,
            s_d,
            alpha_raw,
        } => {
            let alpha = alpha_raw.sigmoid();
            s_e.mul(alpha.rsub_scalar(1.0))?.add(s_d.mul(alpha)?)?
        }
        Gate::Semantic(g) | Gate::Spatial(g) => g,
    };
    Ok(s_t.mul(g)?)
}

/// Keep pattern of case-amplification thresholding over the rows of `s`
/// (last axis), and the number of rows zeroed because their maximum was not
/// positive.
pub fn threshold_mask(s: &Tensor, p: f64, eta: f64) -> (Vec<bool>, usize) {
    let cols = s.shape().last().copied().unwrap_or(1).max(1);
    let mut keep = Vec::with_capacity(s.numel());
    let mut dead_rows = 0;
    for row in s.data().chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) {
            dead_rows += 1;
            keep.extend(std::iter::repeat_n(false, row.len()));
            continue;
        }
        keep.extend(row.iter().map(|&v| {
            let ratio = v / max;
            ratio > 0.0 && ratio.powf(p) > eta
        }));
    }
    (keep, dead_rows)
}

/// Applies [`threshold_mask`] as a constant mask; returns `(Ŝ, dead_rows)`.
pub fn amplify_threshold(s: Var<'_>, p: f64, eta: f64) -> Result<(Var<'_>, usize)> {
    let (keep, dead) = threshold_mask(&s.value(), p, eta);
    Ok((s.mask(keep)?, dead))
}

/// Writes a labelled square matrix as CSV with a `node` column.
pub fn write_matrix_csv(path: &Path, labels: &[String], m: &Tensor) -> Result<()> {
    let n = labels.len();
    if m.shape() != [n, n] {
        return Err(Error::Config(format!(
            "{} labels for a {:?} matrix",
            n,
            m.shape()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    let mut header = vec!["node".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header).map_err(|e| Error::Serde(e.to_string()))?;
    for (i, label) in labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Inverse of [`write_matrix_csv`].
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let parse = |line: u64, msg: String| Error::Parse {
        path: path.into(),
        line,
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| parse(0, e.to_string()))?;
    let labels: Vec<String> = r
        .headers()
        .map_err(|e| parse(1, e.to_string()))?
        .iter()
        .skip(1)
        .map(str::to_string)
        .collect();
    let n = labels.len();
    let mut data = Vec::with_capacity(n * n);
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse(line, e.to_string()))?;
        if rec.get(0) != labels.get(i).map(String::as_str) {
            return Err(parse(line, "row label does not match column order".into()));
        }
        for v in rec.iter().skip(1) {
            data.push(v.parse::<f64>().map_err(|e| parse(line, e.to_string()))?);
        }
    }
    Ok((labels, Tensor::new(&[n, n], data).map_err(|e| parse(0, e.to_string()))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(d: &[[f64; 3]; 3]) -> SpatialContext {
        SpatialContext::new(d.iter().map(|r| r.to_vec()).collect(), 2.0)
    }

    #[test]
    fn kernel_values_and_cutoff() {
        let c = ctx(&[[0.0, 1.0, 5.0], [1.0, 0.0, 4.0], [5.0, 4.0, 0.0]]);
        let s = spatial_similarity(&c, 2);
        assert_eq!(s.shape(), &[5, 5]);
        assert_eq!(s.get(&[0, 0]), 1.0);
        // σ of {1, 5, 4} = sqrt(26/9); τ = 2σ ≈ 3.40 so d = 4, 5 are cut.
        assert_eq!(s.get(&[0, 2]), 0.0);
        assert_eq!(s.get(&[1, 2]), 0.0);
        assert!((s.get(&[0, 1]) - (-1.0f64 / (26.0 / 9.0)).exp()).abs() < 1e-15);
        for i in 0..5 {
            for j in 3..5 {
                assert_eq!(s.get(&[i, j]), 1.0);
                assert_eq!(s.get(&[j, i]), 1.0);
            }
        }
    }

    #[test]
    fn colocated_pois_are_flagged() {
        let c = ctx(&[[0.0; 3]; 3]);
        assert!(c.degenerate);
        assert_eq!(c.tau, 1.0);
        assert!(spatial_similarity(&c, 0).data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn distances_are_metric_scale() {
        let mk = |lat: f64, lon: f64| PoiMetadata {
            poi_id: format!("{lat}"),
            name: String::new(),
            address: String::new(),
            hours: String::new(),
            phone: String::new(),
            top_category: "x".into(),
            sub_category: String::new(),
            latitude: lat,
            longitude: lon,
        };
        let d = pairwise_distances(&[mk(29.76, -95.37), mk(29.77, -95.37)]);
        // 0.01° of latitude is about 1.11 km.
        assert!((d[0][1] - 1111.95).abs() < 1.0);
        assert_eq!(d[0][0], 0.0);
        assert_eq!(d[0][1], d[1][0]);
    }

    #[test]
    fn single_node_attention_is_one() {
        let mut store = ParamStore::new();
        let p = GraphParams::register(&mut store, &mut ChaCha8Rng::seed_from_u64(1), 4, 2).unwrap();
        let tape = Tape::new();
        let c = tape.input(Tensor::new(&[1, 1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let st = temporal_attention(&tape, &store, &p, c).unwrap();
        assert_eq!(st.s_t.value().data(), &[1.0]);
        assert!(GraphParams::register(&mut store, &mut ChaCha8Rng::seed_from_u64(1), 6, 4).is_err());
        let out = multihead_output(&tape, &store, &p, c, &st).unwrap();
        assert_eq!(out.shape(), vec![1, 1, 4]);
    }

    #[test]
    fn threshold_examples() {
        let s = Tensor::new(&[2, 3], vec![1.0, 0.15, 0.5, -1.0, -0.5, 0.0]).unwrap();
        let (keep, dead) = threshold_mask(&s, 2.5, 0.15);
        // 0.5^2.5 ≈ 0.177 survives; 0.15^2.5 ≈ 0.0087 does not.
        assert_eq!(keep, vec![true, false, true, false, false, false]);
        assert_eq!(dead, 1);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adj.csv");
        let labels = vec!["a".to_string(), "category:x, y".to_string()];
        let m = Tensor::new(&[2, 2], vec![0.1 + 0.2, -0.0, 1e-300, 7.0 / 3.0]).unwrap();
        write_matrix_csv(&path, &labels, &m).unwrap();
        let (l2, m2) = read_matrix_csv(&path).unwrap();
        assert_eq!(l2, labels);
        assert_eq!(m2, m);
    }
}
