//! RMSProp with step decay, the epoch loop, and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use diffcore::{ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::data::{NormalizationStats, WindowSample};
use crate::error::{Error, Result};
use crate::eval::metrics;
use crate::metanodes::CategoryIndex;
use crate::model::{loss, BysGnn};
use crate::pipeline::{batch_inputs, batch_targets, truth_windows, PreparedData};

/// Running mean of squared gradients per parameter.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub rho: f64,
    pub eps: f64,
    state: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(store: &ParamStore, rho: f64, eps: f64) -> Self {
        Self {
            rho,
            eps,
            state: store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value().shape()))
                .collect(),
        }
    }

    pub fn state(&self) -> &[Tensor] {
        &self.state
    }

    /// `s ← ρs + (1−ρ)g²; θ ← θ − lr·g/(√s + ε)` using the gradients held by
    /// `store`. Leaves every parameter untouched if any gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if !p.grad().all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter {}",
                    p.name()
                )));
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, s) in ids.into_iter().zip(&mut self.state) {
            let (value, grad) = store.value_and_grad_mut(id);
            for ((v, &g), s) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(s.data_mut())
            {
                *s = self.rho * *s + (1.0 - self.rho) * g * g;
                *v -= lr * g / (s.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_mae: Option<f64>,
    pub val_mape: Option<f64>,
    pub val_rmse: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_loss,val_mae,val_mape,val_rmse";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.val_loss),
            opt(self.val_mae),
            opt(self.val_mape),
            opt(self.val_rmse)
        )
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(out, "{}", e.csv_line());
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters the model now holds.
    pub best_epoch: Option<usize>,
    /// Set when training stopped on a numerical failure; the model then holds
    /// the last good parameters.
    pub failure: Option<String>,
}

/// Loss and de-normalised POI forecasts over `windows`, without gradients.
pub fn evaluate_windows(
    model: &BysGnn,
    data: &PreparedData,
    windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let nodes = model.n_nodes();
    let n = data.n_pois();
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(cfg.batch_size) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let tape = Tape::new();
        let fwd = model.forward(&tape, &batch_inputs(&refs, nodes))?;
        let l = loss(&tape, fwd.prediction, &batch_targets(&refs, nodes), cfg.loss)?.item()?;
        total += l * chunk.len() as f64;
        let pred = fwd.prediction.value();
        let h = pred.shape()[2];
        for b in 0..chunk.len() {
            preds.push(
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
    let mean = total / windows.len().max(1) as f64;
    if !mean.is_finite() {
        return Err(Error::Numerical("non-finite evaluation loss".into()));
    }
    Ok((mean, preds))
}

/// One optimisation step on `windows`; returns the loss before the update.
pub fn train_step(
    model: &mut BysGnn,
    opt: &mut RmsProp,
    windows: &[&WindowSample],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let nodes = model.n_nodes();
    let tape = Tape::new();
    let fwd = model.forward(&tape, &batch_inputs(windows, nodes))?;
    let l = loss(&tape, fwd.prediction, &batch_targets(windows, nodes), cfg.loss)?;
    let value = l.item()?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("training loss became {value}")));
    }
    let grads = tape
        .backward(l)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    model.store.zero_grad();
    grads.accumulate_into(&mut model.store);
    opt.step(&mut model.store, lr)?;
    Ok(value)
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, p)| p.value().clone()).collect()
}

fn restore(store: &mut ParamStore, values: &[Tensor]) {
    let ids: Vec<_> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        *store.value_mut(id) = v.clone();
    }
}

/// Trains on `data.train`, selecting the epoch with the lowest validation
/// MAE (the last epoch when there is no validation block). `on_epoch` sees
/// each log entry as it is produced.
pub fn train(
    model: &mut BysGnn,
    data: &PreparedData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    let mut opt = RmsProp::new(&model.store, cfg.rho, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut last_good = snapshot(&model.store);
    let mut log = Vec::with_capacity(cfg.epochs);
    let val_truth = truth_windows(data, &data.val);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut failure = None;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            match train_step(model, &mut opt, &batch, cfg, lr) {
                Ok(l) => sum += l * batch.len() as f64,
                Err(e) if e.is_numerical() => {
                    failure = Some(format!("epoch {epoch}: {e}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let val = if failure.is_none() && !data.val.is_empty() {
            match evaluate_windows(model, data, &data.val, cfg) {
                Ok(v) => Some(v),
                Err(e) if e.is_numerical() => {
                    failure = Some(format!("epoch {epoch}: {e}"));
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        if let Some(msg) = failure {
            match &best {
                Some((_, _, values)) => restore(&mut model.store, values),
                None => restore(&mut model.store, &last_good),
            }
            return Ok(TrainOutcome {
                log,
                best_epoch: best.map(|b| b.1),
                failure: Some(msg),
            });
        }
        let report = match &val {
            Some((_, pred)) => Some(metrics(pred, &val_truth)?),
            None => None,
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: sum / data.train.len() as f64,
            val_loss: val.as_ref().map(|v| v.0),
            val_mae: report.as_ref().map(|r| r.mae),
            val_mape: report.as_ref().and_then(|r| r.mape),
            val_rmse: report.as_ref().map(|r| r.rmse),
        };
        on_epoch(&entry);
        let score = entry.val_mae.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|b| score < b.0 || entry.val_mae.is_none()) {
            best = Some((score, epoch, snapshot(&model.store)));
        }
        last_good = snapshot(&model.store);
        log.push(entry);
    }
    let best_epoch = best.map(|(_, epoch, values)| {
        restore(&mut model.store, &values);
        epoch
    });
    Ok(TrainOutcome {
        log,
        best_epoch,
        failure: None,
    })
}

pub const CHECKPOINT_FORMAT: &str = "bysgnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl StoredTensor {
    fn new(name: &str, t: &Tensor) -> Self {
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        }
    }

    fn tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(&self.shape, self.values.clone())?)
    }
}

/// Self-describing model snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub epoch: Option<usize>,
    pub poi_ids: Vec<String>,
    pub index: CategoryIndex,
    pub stats: NormalizationStats,
    pub params: Vec<StoredTensor>,
    pub raw_embeddings: Option<StoredTensor>,
    pub spatial: StoredTensor,
}

impl Checkpoint {
    pub fn from_model(
        model: &BysGnn,
        train_config: &TrainConfig,
        stats: &NormalizationStats,
        epoch: Option<usize>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model_config: model.config.clone(),
            train_config: train_config.clone(),
            epoch,
            poi_ids: model.poi_ids.clone(),
            index: model.index.clone(),
            stats: stats.clone(),
            params: model
                .store
                .iter()
                .map(|(_, p)| StoredTensor::new(p.name(), p.value()))
                .collect(),
            raw_embeddings: model
                .raw_embeddings
                .as_ref()
                .map(|t| StoredTensor::new("raw_embeddings", t)),
            spatial: StoredTensor::new("spatial", &model.spatial),
        }
    }

    pub fn to_model(&self) -> Result<BysGnn> {
        let n = self.poi_ids.len();
        let mut model = BysGnn::new(
            self.model_config.clone(),
            self.train_config.ablation,
            self.poi_ids.clone(),
            self.index.clone(),
            self.raw_embeddings.as_ref().map(StoredTensor::tensor).transpose()?,
            vec![vec![0.0; n]; n],
            self.train_config.seed,
        )?;
        if self.params.len() != model.store.len() {
            return Err(Error::Serde(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in &self.params {
            model.store.set_value(&p.name, p.tensor()?)?;
        }
        let spatial = self.spatial.tensor()?;
        if spatial.shape() != model.spatial.shape() {
            return Err(Error::Serde("spatial matrix has the wrong size".into()));
        }
        model.spatial = spatial;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Error listing POIs that differ from `poi_ids`, if any.
    pub fn check_nodes(&self, poi_ids: &[String]) -> Result<()> {
        if self.poi_ids == poi_ids {
            return Ok(());
        }
        let missing: Vec<&String> = self.poi_ids.iter().filter(|p| !poi_ids.contains(p)).collect();
        let extra: Vec<&String> = poi_ids.iter().filter(|p| !self.poi_ids.contains(p)).collect();
        Err(Error::NodeMismatch(format!(
            "dataset lacks {missing:?}; dataset adds {extra:?}{}",
            if missing.is_empty() && extra.is_empty() {
                "; order differs"
            } else {
                ""
            }
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.001);
        assert!((lr_schedule(10, &cfg) - 0.0002).abs() < 1e-18);
        assert!((lr_schedule(39, &cfg) - 8e-6).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for e in 0..60 {
            let lr = lr_schedule(e, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
        let flat = TrainConfig {
            decay_factor: 1.0,
            ..cfg
        };
        assert_eq!(lr_schedule(35, &flat), 0.001);
    }

    fn store_with(grads: &[f64]) -> ParamStore {
        let mut store = ParamStore::new();
        for (i, _) in grads.iter().enumerate() {
            store.add(format!("p{i}"), Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
        }
        store
    }

    fn set_grads(store: &mut ParamStore, grads: &[f64]) {
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            store.set_grad(id, Tensor::new(&[1], vec![*g]).unwrap()).unwrap();
        }
    }

    #[test]
    fn rmsprop_first_step() {
        let mut store = store_with(&[1.0, 1.0]);
        let mut opt = RmsProp::new(&store, 0.99, 1e-8);
        set_grads(&mut store, &[1.0, 1.0]);
        opt.step(&mut store, 0.001).unwrap();
        assert!((opt.state()[0].data()[0] - 0.01).abs() < 1e-15);
        let v = store.value(store.find("p0").unwrap()).data()[0];
        assert!((1.0 - v - 0.01).abs() < 1e-8);
        assert_eq!(store.value(store.find("p1").unwrap()).data()[0], v);
    }

    #[test]
    fn zero_gradient_only_decays_state() {
        let mut store = store_with(&[1.0]);
        let mut opt = RmsProp::new(&store, 0.99, 1e-8);
        set_grads(&mut store, &[2.0]);
        opt.step(&mut store, 0.01).unwrap();
        let before = store.value(store.find("p0").unwrap()).clone();
        let s = opt.state()[0].data()[0];
        set_grads(&mut store, &[0.0]);
        opt.step(&mut store, 0.01).unwrap();
        assert_eq!(store.value(store.find("p0").unwrap()), &before);
        assert!((opt.state()[0].data()[0] - 0.99 * s).abs() < 1e-18);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = store_with(&[1.0, 1.0]);
        let mut opt = RmsProp::new(&store, 0.99, 1e-8);
        set_grads(&mut store, &[1.0, f64::NAN]);
        let err = opt.step(&mut store, 0.1).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("p1"));
        assert_eq!(store.value(store.find("p0").unwrap()).data()[0], 1.0);
    }
}
