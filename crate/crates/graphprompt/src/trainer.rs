//! Optimization loop: two-group AdamW over the prompt-side parameters
//! with early stopping on dev joint accuracy and per-epoch frozen
//! weight verification.

use crate::backbone::verify_frozen;
use crate::data::dialogue::DialogueExample;
use crate::data::schema::domain_of;
use crate::error::{Error, Result};
use crate::eval::{
    average_goal_accuracy, parse_decoded, report, TurnPrediction,
};
use crate::model::Model;
use crate::numerics::scalar::Scalar;
use crate::numerics::{AdamW, AdamWConfig, Binding, NodeId, ParamId, ParamStore, Tape};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub graph_lr: f64,
    pub graph_weight_decay: f64,
    pub embedding_lr: f64,
    pub embedding_weight_decay: f64,
    pub clip_norm: f64,
    pub decode_max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            graph_lr: 0.01,
            graph_weight_decay: 5e-4,
            embedding_lr: 0.5,
            embedding_weight_decay: 0.0,
            clip_norm: 1.0,
            decode_max_len: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".to_string()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".to_string()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be at least 1".to_string()));
        }
        if self.decode_max_len == 0 {
            return Err(Error::Config("decode budget must be at least 1".to_string()));
        }
        for (name, v) in [
            ("graph_lr", self.graph_lr),
            ("graph_weight_decay", self.graph_weight_decay),
            ("embedding_lr", self.embedding_lr),
            ("embedding_weight_decay", self.embedding_weight_decay),
            ("clip_norm", self.clip_norm),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Mean over the batch of per-example mean token negative
/// log-likelihood, on the tape.
pub fn batch_loss<S: Scalar>(
    model: &Model,
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binding: &Binding,
    batch: &[&DialogueExample],
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Argument("loss over an empty batch".to_string()));
    }
    let mut total: Option<NodeId> = None;
    for example in batch {
        let loss = model.example_loss(tape, store, binding, example)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    let total = total.expect("nonempty batch");
    Ok(tape.scale(total, S::from_f64(1.0 / batch.len() as f64)))
}

/// Batch loss evaluated without recording gradients.
pub fn compute_loss<S: Scalar>(
    model: &Model,
    store: &ParamStore<S>,
    batch: &[DialogueExample],
) -> Result<f64> {
    let refs: Vec<&DialogueExample> = batch.iter().collect();
    let mut tape = Tape::inference();
    let binding = store.bind(&mut tape);
    let loss = batch_loss(model, &mut tape, store, &binding, &refs)?;
    Ok(tape.scalar_value(loss).to_f64())
}

/// Greedy-decode each example and parse the output into a state.
pub fn predict_turns<S: Scalar>(
    model: &Model,
    store: &ParamStore<S>,
    examples: &[DialogueExample],
    max_len: usize,
) -> Result<Vec<TurnPrediction>> {
    let mut turns = Vec::with_capacity(examples.len());
    for example in examples {
        let mut tape = Tape::inference();
        let binding = store.bind(&mut tape);
        let decoded = model.decode_example(&mut tape, store, &binding, example, max_len)?;
        let query = model.query(&example.service)?;
        let predicted = parse_decoded(&decoded, query, &model.schema, &model.vocab)?;
        turns.push(TurnPrediction {
            dialogue_id: example.dialogue_id.clone(),
            turn_index: example.turn_index,
            service: example.service.clone(),
            predicted,
            gold: example.gold_state.clone(),
        });
    }
    Ok(turns)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DevMetrics {
    pub jga: f64,
    /// Undefined when no gold-active slots exist.
    pub aga: Option<f64>,
    pub avg_jga: f64,
}

pub fn service_domains(model: &Model) -> BTreeMap<String, String> {
    model
        .schema
        .services
        .iter()
        .map(|s| (s.name.clone(), domain_of(&s.name).to_string()))
        .collect()
}

/// Decode and score a whole split.
pub fn evaluate<S: Scalar>(
    model: &Model,
    store: &ParamStore<S>,
    examples: &[DialogueExample],
    max_len: usize,
) -> Result<DevMetrics> {
    let turns = predict_turns(model, store, examples, max_len)?;
    let rep = report(&turns, &service_domains(model))?;
    Ok(DevMetrics {
        jga: rep.overall_jga,
        aga: average_goal_accuracy(&turns).ok(),
        avg_jga: rep.avg_jga,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_jga: f64,
    pub dev_aga: Option<f64>,
    pub dev_avg_jga: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_avg_jga: f64,
    /// True when the patience rule ended training before max_epochs.
    pub stopped_early: bool,
}

fn snapshot<S: Scalar>(
    store: &ParamStore<S>,
    ids: &[ParamId],
) -> Vec<(ParamId, Rc<ArrayD<S>>)> {
    ids.iter().map(|&id| (id, store.value(id))).collect()
}

/// Run the optimization loop. `frozen_reference` holds the freeze-time
/// checksums; any drift, before or during training, is a hard failure.
/// The best-epoch parameters are restored before returning.
pub fn train<S: Scalar>(
    model: &Model,
    cfg: &TrainConfig,
    store: &mut ParamStore<S>,
    frozen_reference: &BTreeMap<String, String>,
    train_set: &[DialogueExample],
    dev_set: &[DialogueExample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Argument(
            "training needs nonempty train and dev splits".to_string(),
        ));
    }
    verify_frozen(store, frozen_reference)?;
    let mut opt = AdamW::new(
        AdamWConfig::with_lr(cfg.graph_lr, cfg.graph_weight_decay),
        AdamWConfig::with_lr(cfg.embedding_lr, cfg.embedding_weight_decay),
        Some(cfg.clip_norm),
    );
    let trainable = store.trainable_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut best: Option<(usize, f64, Vec<(ParamId, Rc<ArrayD<S>>)>)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DialogueExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let loss = batch_loss(model, &mut tape, store, &binding, &batch)?;
            loss_sum += tape.scalar_value(loss).to_f64();
            batches += 1;
            let grads = tape.backward(loss)?;
            let mut by_id = BTreeMap::new();
            for &id in &trainable {
                if let Some(g) = grads.get(binding.node(id)) {
                    by_id.insert(id, g.clone());
                }
            }
            opt.step(store, &by_id)?;
        }
        let dev = evaluate(model, store, dev_set, cfg.decode_max_len)?;
        verify_frozen(store, frozen_reference)?;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev_jga: dev.jga,
            dev_aga: dev.aga,
            dev_avg_jga: dev.avg_jga,
            seconds: started.elapsed().as_secs_f64(),
        });
        let improved = best
            .as_ref()
            .map(|(_, b, _)| dev.avg_jga > *b)
            .unwrap_or(true);
        if improved {
            best = Some((epoch, dev.avg_jga, snapshot(store, &trainable)));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_avg_jga, params) = best.expect("at least one epoch ran");
    for (id, value) in params {
        store.set_value(id, (*value).clone());
    }
    Ok(TrainOutcome {
        records,
        best_epoch,
        best_avg_jga,
        stopped_early,
    })
}

/// Render the per-epoch metrics log.
pub fn format_metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,dev_jga,dev_aga,dev_avg_jga,seconds\n");
    for r in records {
        let aga = r.dev_aga.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{:.6},{aga},{:.6},{:.3}\n",
            r.epoch, r.train_loss, r.dev_jga, r.dev_avg_jga, r.seconds
        ));
    }
    out
}

pub fn write_metrics_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, format_metrics_csv(records)).map_err(|e| Error::io(path, e))
}
