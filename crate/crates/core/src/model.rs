//! Full forecaster: encoder → node features → gated adjacency → GNN → head.

use diffcore::{ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, LossKind, ModelConfig};
use crate::encoder::{encode_all, EncoderOutput, EncoderParams};
use crate::error::{Error, Result};
use crate::gnn::{forecast_head, gcn_forward, GcnParams};
use crate::graphgen::{
    amplify_threshold, fuse_gate, semantic_similarity, spatial_similarity, temporal_attention,
    Gate, GraphParams, SpatialContext, TemporalScores,
};
use crate::metanodes::{node_labels, CategoryIndex};
use crate::semantics::{build_node_features, finetune_project, SemanticParams};

#[derive(Debug, Clone)]
pub struct BysGnn {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub poi_ids: Vec<String>,
    pub index: CategoryIndex,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub semantics: Option<SemanticParams>,
    pub graph: GraphParams,
    pub gcn: GcnParams,
    /// Frozen sentence embeddings `[S, E]`; absent without semantics.
    pub raw_embeddings: Option<Tensor>,
    /// Spatial similarity `[S, S]`.
    pub spatial: Tensor,
}

/// Everything computed in one forward pass over `B` windows.
pub struct Forward<'t> {
    /// Normalised forecasts `[B, S, H]`.
    pub prediction: Var<'t>,
    /// Thresholded adjacency `[B, S, S]`.
    pub adjacency: Var<'t>,
    /// Gated adjacency before thresholding `[B, S, S]`.
    pub fused: Var<'t>,
    /// Node features `[B, S, F]`.
    pub features: Var<'t>,
    /// Post-GNN node embeddings `[B, S, M*]`.
    pub node_embeddings: Var<'t>,
    pub encoder: EncoderOutput<'t>,
    pub temporal: TemporalScores<'t>,
    pub semantic: Option<Var<'t>>,
    /// Rows zeroed by thresholding because they had no positive entry.
    pub dead_rows: usize,
}

impl BysGnn {
    /// `raw_embeddings` and `distances` cover all `N + K + 1` nodes and `N`
    /// POIs respectively; rows that the ablation removes are dropped here.
    pub fn new(
        config: ModelConfig,
        ablation: Ablation,
        poi_ids: Vec<String>,
        index: CategoryIndex,
        raw_embeddings: Option<Tensor>,
        distances: Vec<Vec<f64>>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if ablation.no_semantics && ablation.no_space {
            return Err(Error::Config(
                "no_semantics and no_space together leave the gate undefined".into(),
            ));
        }
        let n = poi_ids.len();
        if index.n_pois() != n || distances.len() != n {
            return Err(Error::Config(format!(
                "{n} POIs, {} in the category index, {} distance rows",
                index.n_pois(),
                distances.len()
            )));
        }
        let s = if ablation.no_metanodes { n } else { index.n_nodes() };
        let raw_embeddings = if ablation.no_semantics {
            None
        } else {
            let raw = raw_embeddings
                .ok_or_else(|| Error::Config("semantic features need raw embeddings".into()))?;
            if raw.ndim() != 2 || raw.shape()[0] < s || raw.shape()[1] != config.embed_dim {
                return Err(Error::Config(format!(
                    "raw embeddings {:?} do not cover {s} nodes of width {}",
                    raw.shape(),
                    config.embed_dim
                )));
            }
            let e = config.embed_dim;
            Some(Tensor::new(&[s, e], raw.data()[..s * e].to_vec())?)
        };
        let ctx = SpatialContext::new(distances, config.tau_factor);
        let spatial = spatial_similarity(&ctx, s - n);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::register(
            &mut store,
            &mut rng,
            s,
            config.lift_dim,
            config.temporal_dim,
        )?;
        let semantics = if ablation.no_semantics {
            None
        } else {
            Some(SemanticParams::register(
                &mut store,
                &mut rng,
                config.embed_dim,
                config.semantic_dim,
            )?)
        };
        let graph = GraphParams::register(&mut store, &mut rng, config.temporal_dim, config.heads)?;
        let feat = config.temporal_dim + if ablation.no_semantics { 0 } else { config.semantic_dim };
        let gcn = GcnParams::register(
            &mut store,
            &mut rng,
            feat,
            config.gcn_hidden,
            config.gcn_out,
            config.horizon,
        )?;
        Ok(Self {
            config,
            ablation,
            poi_ids,
            index,
            store,
            encoder,
            semantics,
            graph,
            gcn,
            raw_embeddings,
            spatial,
        })
    }

    pub fn n_pois(&self) -> usize {
        self.poi_ids.len()
    }

    /// Nodes in the graph: `N` without meta-nodes, else `N + K + 1`.
    pub fn n_nodes(&self) -> usize {
        self.encoder.n_series
    }

    pub fn node_labels(&self) -> Vec<String> {
        node_labels(
            &self.poi_ids,
            (!self.ablation.no_metanodes).then_some(&self.index),
        )
    }

    pub fn alpha(&self) -> f64 {
        self.graph.alpha(&self.store)
    }

    /// Forward pass over `x: [S, B, T]` of normalised windows.
    pub fn forward<'t>(&self, tape: &'t Tape, x: &Tensor) -> Result<Forward<'t>> {
        let cfg = &self.config;
        let enc = encode_all(
            tape,
            &self.store,
            &self.encoder,
            x,
            cfg.layer_norm_eps,
            !self.ablation.no_self_attention,
        )?;
        let semantic = match (&self.semantics, &self.raw_embeddings) {
            (Some(p), Some(raw)) => Some(finetune_project(tape, &self.store, p, raw)?),
            _ => None,
        };
        let features = build_node_features(tape, enc.c, semantic)?;
        let temporal = temporal_attention(tape, &self.store, &self.graph, enc.c)?;
        let s_d = tape.constant(self.spatial.clone());
        let gate = match semantic {
            None => Gate::Spatial(s_d),
            Some(u) => {
                let s_e = semantic_similarity(u)?;
                if self.ablation.no_space {
                    Gate::Semantic(s_e)
                } else {
                    Gate::Mixed {
                        s_e,
                        s_d,
                        alpha_raw: tape.param(&self.store, self.graph.alpha_raw),
                    }
                }
            }
        };
        let fused = fuse_gate(gate, temporal.s_t)?;
        let (adjacency, dead_rows) = if self.ablation.no_adj_threshold {
            (fused, 0)
        } else {
            amplify_threshold(fused, cfg.amplification, cfg.threshold)?
        };
        let node_embeddings = gcn_forward(tape, &self.store, &self.gcn, adjacency, features)?;
        let prediction = forecast_head(tape, &self.store, &self.gcn, node_embeddings, features)?;
        Ok(Forward {
            prediction,
            adjacency,
            fused,
            features,
            node_embeddings,
            encoder: enc,
            temporal,
            semantic,
            dead_rows,
        })
    }
}

/// Mean absolute or squared error over every element.
pub fn loss<'t>(tape: &'t Tape, prediction: Var<'t>, target: &Tensor, kind: LossKind) -> Result<Var<'t>> {
    if prediction.shape() != target.shape() {
        return Err(Error::Config(format!(
            "prediction {:?} vs target {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let diff = prediction.sub(tape.constant(target.clone()))?;
    Ok(match kind {
        LossKind::Mae => diff.abs().mean(),
        LossKind::Mse => diff.square().mean(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(ablation: Ablation) -> BysGnn {
        let cfg = ModelConfig {
            window: 5,
            horizon: 2,
            lift_dim: 3,
            temporal_dim: 4,
            semantic_dim: 3,
            embed_dim: 6,
            heads: 2,
            gcn_hidden: 4,
            gcn_out: 2,
            ..Default::default()
        };
        let index = CategoryIndex::new(vec!["a".into(), "b".into()], vec![0, 1, 1]).unwrap();
        let raw = Tensor::new(&[6, 6], (0..36).map(|i| ((i * 7) % 11) as f64 - 5.0).collect()).unwrap();
        let d = vec![vec![0.0, 100.0, 900.0], vec![100.0, 0.0, 850.0], vec![900.0, 850.0, 0.0]];
        BysGnn::new(cfg, ablation, vec!["p0".into(), "p1".into(), "p2".into()], index, Some(raw), d, 1)
            .unwrap()
    }

    fn input(s: usize) -> Tensor {
        Tensor::new(&[s, 2, 5], (0..s * 10).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn shapes_with_and_without_metanodes() {
        let full = tiny(Ablation::default());
        assert_eq!(full.n_nodes(), 6);
        let tape = Tape::new();
        let f = full.forward(&tape, &input(6)).unwrap();
        assert_eq!(f.prediction.shape(), vec![2, 6, 2]);
        assert_eq!(f.adjacency.shape(), vec![2, 6, 6]);
        assert_eq!(f.features.shape(), vec![2, 6, 7]);
        assert_eq!(full.node_labels().len(), 6);

        let no_meta = tiny(Ablation::single("no_metanodes").unwrap());
        assert_eq!(no_meta.n_nodes(), 3);
        let tape = Tape::new();
        let f = no_meta.forward(&tape, &input(3)).unwrap();
        assert_eq!(f.adjacency.shape(), vec![2, 3, 3]);
    }

    #[test]
    fn no_threshold_keeps_fused_matrix() {
        let m = tiny(Ablation::single("no_adj_threshold").unwrap());
        let tape = Tape::new();
        let f = m.forward(&tape, &input(6)).unwrap();
        assert_eq!(f.adjacency.value(), f.fused.value());
    }

    #[test]
    fn no_semantics_drops_features_and_uses_spatial_gate() {
        let m = tiny(Ablation::single("no_semantics").unwrap());
        assert!(m.semantics.is_none());
        let tape = Tape::new();
        let f = m.forward(&tape, &input(6)).unwrap();
        assert_eq!(f.features.shape(), vec![2, 6, 4]);
        let st = f.temporal.s_t.value();
        let fused = f.fused.value();
        for (i, (a, b)) in fused.data().iter().zip(st.data()).enumerate() {
            assert_eq!(*a, b * m.spatial.data()[i % 36]);
        }
    }

    #[test]
    fn no_space_uses_semantic_gate() {
        let m = tiny(Ablation::single("no_space").unwrap());
        let tape = Tape::new();
        let f = m.forward(&tape, &input(6)).unwrap();
        let s_e = f.semantic.unwrap().cosine_rows().unwrap().value();
        let st = f.temporal.s_t.value();
        for (i, (a, b)) in f.fused.value().data().iter().zip(st.data()).enumerate() {
            assert_eq!(*a, b * s_e.data()[i % 36]);
        }
    }
}
