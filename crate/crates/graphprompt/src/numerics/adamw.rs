//! AdamW with decoupled weight decay, per-group learning rates, and
//! global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::numerics::params::{ParamGroup, ParamId, ParamStore};
use crate::numerics::scalar::Scalar;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One optimizer over a parameter store; each tensor uses the settings
/// of its group. Moment buffers are allocated lazily per tensor.
pub struct AdamW<S: Scalar> {
    graph: AdamWConfig,
    embedding: AdamWConfig,
    /// Set only while pretraining the backbone; the fine-tuning
    /// optimizer must reject backbone tensors outright.
    backbone: Option<AdamWConfig>,
    clip_norm: Option<f64>,
    step: u64,
    m: BTreeMap<usize, ArrayD<S>>,
    v: BTreeMap<usize, ArrayD<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(graph: AdamWConfig, embedding: AdamWConfig, clip_norm: Option<f64>) -> Self {
        AdamW {
            graph,
            embedding,
            backbone: None,
            clip_norm,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_backbone(
        graph: AdamWConfig,
        embedding: AdamWConfig,
        backbone: AdamWConfig,
        clip_norm: Option<f64>,
    ) -> Self {
        AdamW {
            backbone: Some(backbone),
            ..AdamW::new(graph, embedding, clip_norm)
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn config_for(&self, group: ParamGroup) -> Result<&AdamWConfig> {
        match group {
            ParamGroup::Graph => Ok(&self.graph),
            ParamGroup::Embedding => Ok(&self.embedding),
            ParamGroup::Backbone => self.backbone.as_ref().ok_or_else(|| {
                Error::Argument("optimizer step on a backbone-group tensor".to_string())
            }),
        }
    }

    /// Apply one update. `grads` maps parameter ids to gradients of the
    /// current loss; every gradient must be finite and belong to a
    /// trainable tensor.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &BTreeMap<ParamId, ArrayD<S>>,
    ) -> Result<StepStats> {
        let mut sq_sum = 0.0f64;
        for (&id, g) in grads {
            let p = store.get(id);
            if p.frozen {
                return Err(Error::FrozenDrift(format!(
                    "gradient supplied for frozen tensor {}",
                    p.name
                )));
            }
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!(
                        "gradient shape {:?} vs parameter {} shape {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    ),
                ));
            }
            for &x in g.iter() {
                let xf = x.to_f64();
                if !xf.is_finite() {
                    return Err(Error::NanGradient(p.name.clone()));
                }
                sq_sum += xf * xf;
            }
        }
        let grad_norm = sq_sum.sqrt();
        let mut scale = 1.0f64;
        let mut clipped = false;
        if let Some(c) = self.clip_norm {
            if grad_norm > c {
                scale = c / grad_norm;
                clipped = true;
            }
        }

        self.step += 1;
        let t = self.step as i32;

        for (&id, g) in grads {
            let (group, old) = {
                let p = store.get(id);
                (p.group, (*p.value).clone())
            };
            let cfg = *self.config_for(group)?;
            let b1 = S::from_f64(cfg.beta1);
            let b2 = S::from_f64(cfg.beta2);
            let one = S::one();
            let scale_s = S::from_f64(scale);

            let m = self
                .m
                .entry(id.index())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(id.index())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));

            let bc1 = S::from_f64(1.0 - cfg.beta1.powi(t));
            let bc2 = S::from_f64(1.0 - cfg.beta2.powi(t));
            let lr = S::from_f64(cfg.lr);
            let wd = S::from_f64(cfg.weight_decay);
            let eps = S::from_f64(cfg.eps);

            let mut new = old.clone();
            for (((theta, &gi), mi), vi) in new
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gs = gi * scale_s;
                *mi = b1 * *mi + (one - b1) * gs;
                *vi = b2 * *vi + (one - b2) * gs * gs;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *theta = *theta - lr * (mhat / (vhat.sqrt() + eps) + wd * *theta);
            }
            store.set_value(id, new);
        }

        Ok(StepStats { grad_norm, clipped })
    }
}
