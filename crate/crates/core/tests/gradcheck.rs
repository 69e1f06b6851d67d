//! End-to-end finite-difference audit of every model parameter.

use std::time::Instant;

use bysgnn::data::{generate_synthetic, SynthSpec};
use bysgnn::graphgen::pairwise_distances;
use bysgnn::model::loss;
use bysgnn::pipeline::{batch_inputs, batch_targets, build_model, prepare};
use bysgnn::{Ablation, LossKind, ModelConfig, TrainConfig};
use diffcore::gradcheck::check_params;
use diffcore::Tape;

fn audit(ablation: Ablation) -> (f64, String, usize) {
    let spec = SynthSpec {
        n_pois: 4,
        n_categories: 2,
        days: 5,
        regime_shift_day: None,
        ..Default::default()
    };
    let (ds, meta) = generate_synthetic(&spec, 3).unwrap();
    let mc = ModelConfig {
        window: 8,
        horizon: 3,
        lift_dim: 8,
        temporal_dim: 16,
        semantic_dim: 8,
        embed_dim: 16,
        heads: 2,
        gcn_hidden: 8,
        gcn_out: 8,
        ..Default::default()
    };
    let tc = TrainConfig {
        loss: LossKind::Mse,
        ablation,
        ..Default::default()
    };
    let data = prepare(&ds, &meta, &mc, &tc, None).unwrap();
    let mut model = build_model(&data, &mc, &tc, None, pairwise_distances(&data.metadata)).unwrap();
    let batch = [&data.train[0], &data.train[17]];
    let nodes = model.n_nodes();
    let x = batch_inputs(&batch, nodes);
    let y = batch_targets(&batch, nodes);

    let tape = Tape::new();
    let fwd = model.forward(&tape, &x).unwrap();
    let l = loss(&tape, fwd.prediction, &y, LossKind::Mse).unwrap();
    let grads = tape.backward(l).unwrap();
    model.store.zero_grad();
    grads.accumulate_into(&mut model.store);

    let probe = model.clone();
    let report = check_params(&mut model.store, None, 1e-5, 1e-6, |store| {
        let mut m = probe.clone();
        m.store = store.clone();
        let tape = Tape::new();
        let f = m.forward(&tape, &x).map_err(|e| diffcore::DiffError::Invalid {
            op: "forward",
            msg: e.to_string(),
        })?;
        let l = loss(&tape, f.prediction, &y, LossKind::Mse).unwrap();
        l.item()
    })
    .unwrap();
    (report.max_rel_error, report.worst_param, report.checked)
}

#[test]
fn every_parameter_matches_central_differences() {
    let t0 = Instant::now();
    let (err, worst, checked) = audit(Ablation::default());
    assert!(checked > 1000);
    assert!(err <= 1e-4, "max relative error {err:e} at {worst}");
    assert!(t0.elapsed().as_secs() < 120);
}

#[test]
fn ablated_models_match_central_differences() {
    for name in ["no_semantics", "no_space", "no_metanodes", "no_self_attention", "no_adj_threshold"] {
        let (err, worst, _) = audit(Ablation::single(name).unwrap());
        assert!(err <= 1e-4, "{name}: max relative error {err:e} at {worst}");
    }
}
