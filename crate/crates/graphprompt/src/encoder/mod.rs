//! Graph encoder: stacked GCN/GAT propagation with hierarchical
//! cluster pooling and a mean/max readout, producing one prompt vector
//! per slot plus a pooled global summary.

mod asap;
mod gnn;

pub use asap::{asap_pool, PoolParams, PooledLevel};
pub use gnn::{gat_layer, gcn_layer, GatLayerOut};

use crate::error::{Error, Result};
use crate::graph::SchemaGraph;
use crate::numerics::scalar::Scalar;
use crate::numerics::{Binding, NodeId, ParamGroup, ParamStore, Tape};
use crate::numerics::params::{init_xavier, init_zeros};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Propagation {
    Gcn,
    Gat,
}

impl std::fmt::Display for Propagation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Propagation::Gcn => write!(f, "gcn"),
            Propagation::Gat => write!(f, "gat"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Propagation-plus-pooling pairs stacked hierarchically.
    pub num_levels: usize,
    /// Propagation layers per level.
    pub gnn_layers: usize,
    pub hidden_dim: usize,
    /// Width of the prompt vectors; must match the backbone embedding.
    pub output_dim: usize,
    /// Fraction of clusters kept by each pooling step, in (0, 1].
    pub pooling_ratio: f64,
    pub propagation: Propagation,
    pub gat_heads: usize,
    /// Width of the node input embeddings fed to the encoder.
    pub input_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_levels: 2,
            gnn_layers: 2,
            hidden_dim: 256,
            output_dim: 512,
            pooling_ratio: 0.5,
            propagation: Propagation::Gcn,
            gat_heads: 1,
            input_dim: 512,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 || self.gnn_layers == 0 {
            return Err(Error::Config(
                "encoder needs at least one level and one layer".to_string(),
            ));
        }
        if self.hidden_dim == 0 || self.output_dim == 0 || self.input_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".to_string()));
        }
        if !(self.pooling_ratio > 0.0 && self.pooling_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "pooling ratio {} outside (0, 1]",
                self.pooling_ratio
            )));
        }
        if self.propagation == Propagation::Gat {
            if self.gat_heads == 0 || self.hidden_dim % self.gat_heads != 0 {
                return Err(Error::Config(format!(
                    "hidden dim {} not divisible by {} attention heads",
                    self.hidden_dim, self.gat_heads
                )));
            }
        }
        Ok(())
    }
}

/// Register every encoder weight in the store under the graph group.
pub fn register_encoder_params<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    cfg: &EncoderConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let h = cfg.hidden_dim;
    let out = cfg.output_dim;
    let g = ParamGroup::Graph;
    store.register(
        "encoder.input.w",
        init_xavier(rng, cfg.input_dim, h),
        g,
        false,
    )?;
    store.register("encoder.input.b", init_zeros(&[h]), g, false)?;
    for l in 0..cfg.num_levels {
        for i in 0..cfg.gnn_layers {
            match cfg.propagation {
                Propagation::Gcn => {
                    store.register(
                        &format!("encoder.l{l}.gcn{i}.w"),
                        init_xavier(rng, h, h),
                        g,
                        false,
                    )?;
                }
                Propagation::Gat => {
                    store.register(
                        &format!("encoder.l{l}.gat{i}.w"),
                        init_xavier(rng, h, h),
                        g,
                        false,
                    )?;
                    store.register(
                        &format!("encoder.l{l}.gat{i}.a_src"),
                        init_xavier(rng, h, 1),
                        g,
                        false,
                    )?;
                    store.register(
                        &format!("encoder.l{l}.gat{i}.a_dst"),
                        init_xavier(rng, h, 1),
                        g,
                        false,
                    )?;
                }
            }
        }
        store.register(
            &format!("encoder.l{l}.pool.att_w"),
            init_xavier(rng, 2 * h, h),
            g,
            false,
        )?;
        store.register(
            &format!("encoder.l{l}.pool.att_v"),
            init_xavier(rng, h, 1),
            g,
            false,
        )?;
        for w in ["le_w1", "le_w2", "le_w3"] {
            store.register(
                &format!("encoder.l{l}.pool.{w}"),
                init_xavier(rng, h, 1),
                g,
                false,
            )?;
        }
    }
    store.register("encoder.readout.w1", init_xavier(rng, 2 * h, h), g, false)?;
    store.register("encoder.readout.b1", init_zeros(&[h]), g, false)?;
    store.register("encoder.readout.w2", init_xavier(rng, h, out), g, false)?;
    store.register("encoder.readout.b2", init_zeros(&[out]), g, false)?;
    store.register("encoder.out.w", init_xavier(rng, h + out, out), g, false)?;
    store.register("encoder.out.b", init_zeros(&[out]), g, false)?;
    Ok(())
}

pub(crate) fn param_node<S: Scalar>(
    store: &ParamStore<S>,
    binding: &Binding,
    name: &str,
) -> Result<NodeId> {
    store
        .id(name)
        .map(|id| binding.node(id))
        .ok_or_else(|| Error::Reference(format!("parameter {name} not registered")))
}

/// Symmetric renormalization on the tape: with degrees of A+I as D,
/// returns D^{-1/2} (A+I) D^{-1/2}. An all-zero adjacency yields the
/// exact identity.
pub fn normalize_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    adjacency: NodeId,
    n: usize,
) -> Result<NodeId> {
    let eye = tape.constant(ArrayD::from_shape_fn(IxDyn(&[n, n]), |ix| {
        if ix[0] == ix[1] {
            S::one()
        } else {
            S::zero()
        }
    }));
    let a_hat = tape.add(adjacency, eye)?;
    let deg = tape.row_sum(a_hat)?;
    let inv_sqrt = tape.pow_const(deg, -0.5);
    let rows = tape.mul_col_broadcast(a_hat, inv_sqrt)?;
    let rows_t = tape.transpose(rows)?;
    let cols = tape.mul_col_broadcast(rows_t, inv_sqrt)?;
    tape.transpose(cols)
}

/// Result of a full encoding pass.
pub struct EncodeOutput {
    /// m×output_dim graph prompt matrix, one row per slot.
    pub prompts: NodeId,
    /// Pooled global summary of width output_dim.
    pub readout: NodeId,
    /// Node counts after each pooling step.
    pub level_sizes: Vec<usize>,
}

/// Run the full encoder: propagate, pool per level, read out, and
/// project each slot's first-level feature joined with the global
/// summary into a prompt row.
pub fn encode_graph_prompts<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    binding: &Binding,
    node_features: NodeId,
    graph: &SchemaGraph,
    cfg: &EncoderConfig,
) -> Result<EncodeOutput> {
    let m = graph.num_nodes();
    if m == 0 {
        return Err(Error::EmptyGraph("schema has no slots".to_string()));
    }
    let in_shape = tape.value(node_features).shape().to_vec();
    if in_shape != [m, cfg.input_dim] {
        return Err(Error::shape(
            "encode_graph_prompts",
            format!("features {in_shape:?} vs [{m}, {}]", cfg.input_dim),
        ));
    }

    let w_in = param_node(store, binding, "encoder.input.w")?;
    let b_in = param_node(store, binding, "encoder.input.b")?;
    let projected = tape.matmul(node_features, w_in)?;
    let mut h = tape.add_row(projected, b_in)?;

    let mut adj = tape.constant(graph.adjacency::<S>());
    let mut n = m;
    let mut first_level: Option<NodeId> = None;
    let mut summaries = Vec::new();
    let mut level_sizes = Vec::new();

    for l in 0..cfg.num_levels {
        let norm = normalize_on_tape(tape, adj, n)?;
        for i in 0..cfg.gnn_layers {
            let activate = i + 1 < cfg.gnn_layers;
            h = match cfg.propagation {
                Propagation::Gcn => {
                    let w = param_node(store, binding, &format!("encoder.l{l}.gcn{i}.w"))?;
                    gcn_layer(tape, norm, h, w, activate)?
                }
                Propagation::Gat => {
                    let w = param_node(store, binding, &format!("encoder.l{l}.gat{i}.w"))?;
                    let a_src =
                        param_node(store, binding, &format!("encoder.l{l}.gat{i}.a_src"))?;
                    let a_dst =
                        param_node(store, binding, &format!("encoder.l{l}.gat{i}.a_dst"))?;
                    gat_layer(tape, adj, h, w, a_src, a_dst, cfg.gat_heads, activate)?.features
                }
            };
        }
        if l == 0 {
            first_level = Some(h);
        }
        let pool = PoolParams {
            att_w: param_node(store, binding, &format!("encoder.l{l}.pool.att_w"))?,
            att_v: param_node(store, binding, &format!("encoder.l{l}.pool.att_v"))?,
            le_w1: param_node(store, binding, &format!("encoder.l{l}.pool.le_w1"))?,
            le_w2: param_node(store, binding, &format!("encoder.l{l}.pool.le_w2"))?,
            le_w3: param_node(store, binding, &format!("encoder.l{l}.pool.le_w3"))?,
        };
        let pooled = asap_pool(tape, h, adj, norm, cfg.pooling_ratio, &pool)?;
        let mean = tape.mean_axis0(pooled.features)?;
        let max = tape.max_axis0(pooled.features)?;
        summaries.push(tape.vecs_to_row(&[mean, max])?);
        level_sizes.push(pooled.num_nodes);
        h = pooled.features;
        adj = pooled.adjacency;
        n = pooled.num_nodes;
    }

    let mut summed = summaries[0];
    for &s in &summaries[1..] {
        summed = tape.add(summed, s)?;
    }
    let w1 = param_node(store, binding, "encoder.readout.w1")?;
    let b1 = param_node(store, binding, "encoder.readout.b1")?;
    let w2 = param_node(store, binding, "encoder.readout.w2")?;
    let b2 = param_node(store, binding, "encoder.readout.b2")?;
    let pre = tape.matmul(summed, w1)?;
    let pre = tape.add_row(pre, b1)?;
    let mid = tape.relu(pre);
    let post = tape.matmul(mid, w2)?;
    let readout_row = tape.add_row(post, b2)?;
    let readout = tape.row_to_vec(readout_row)?;

    let w_out = param_node(store, binding, "encoder.out.w")?;
    let b_out = param_node(store, binding, "encoder.out.b")?;
    let joined = tape.concat_cols_broadcast(
        first_level.expect("at least one level"),
        readout,
    )?;
    let projected = tape.matmul(joined, w_out)?;
    let prompts = tape.add_row(projected, b_out)?;

    Ok(EncodeOutput {
        prompts,
        readout,
        level_sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::{Schema, Service, SlotDef};
    use crate::graph::build_graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema_sizes(sizes: &[usize]) -> Schema {
        let services = sizes
            .iter()
            .enumerate()
            .map(|(s, n)| Service {
                name: format!("svc{s}"),
                description: format!("service {s}"),
                slots: (0..*n)
                    .map(|j| SlotDef {
                        name: format!("slot{j}"),
                        description: format!("slot {j} of {s}"),
                        is_categorical: false,
                        possible_values: None,
                    })
                    .collect(),
            })
            .collect();
        Schema::from_services(services).unwrap()
    }

    fn toy_cfg(prop: Propagation) -> EncoderConfig {
        EncoderConfig {
            num_levels: 2,
            gnn_layers: 2,
            hidden_dim: 8,
            output_dim: 6,
            pooling_ratio: 0.5,
            propagation: prop,
            gat_heads: 2,
            input_dim: 10,
        }
    }

    fn run_encode(
        cfg: &EncoderConfig,
        graph: &SchemaGraph,
        features: ArrayD<f64>,
    ) -> (ArrayD<f64>, ArrayD<f64>, Vec<usize>) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        register_encoder_params(&mut store, cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.constant(features);
        let out = encode_graph_prompts(&mut tape, &store, &binding, x, graph, cfg).unwrap();
        (
            (*tape.value(out.prompts)).clone(),
            (*tape.value(out.readout)).clone(),
            out.level_sizes,
        )
    }

    #[test]
    fn output_shape_is_slots_by_output_dim() {
        for prop in [Propagation::Gcn, Propagation::Gat] {
            let cfg = toy_cfg(prop);
            let schema = schema_sizes(&[3, 2]);
            let graph = build_graph(&schema);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = crate::numerics::params::init_normal(&mut rng, &[5, 10], 1.0);
            let (prompts, readout, sizes) = run_encode(&cfg, &graph, x);
            assert_eq!(prompts.shape(), &[5, 6]);
            assert_eq!(readout.shape(), &[6]);
            assert_eq!(sizes, vec![3, 2]);
        }
    }

    #[test]
    fn single_slot_schema_yields_one_prompt_row() {
        let cfg = toy_cfg(Propagation::Gcn);
        let graph = build_graph(&schema_sizes(&[1]));
        let x = ArrayD::from_elem(IxDyn(&[1, 10]), 0.3);
        let (prompts, _, sizes) = run_encode(&cfg, &graph, x);
        assert_eq!(prompts.shape(), &[1, 6]);
        assert_eq!(sizes, vec![1, 1]);
    }

    #[test]
    fn symmetric_slots_get_identical_prompt_rows() {
        let cfg = toy_cfg(Propagation::Gcn);
        let graph = build_graph(&schema_sizes(&[2]));
        let x = ArrayD::from_elem(IxDyn(&[2, 10]), 0.7);
        let (prompts, _, _) = run_encode(&cfg, &graph, x);
        for j in 0..6 {
            assert!(
                (prompts[[0, j]] - prompts[[1, j]]).abs() < 1e-12,
                "column {j} differs"
            );
        }
    }

    #[test]
    fn encoder_is_deterministic() {
        let cfg = toy_cfg(Propagation::Gat);
        let graph = build_graph(&schema_sizes(&[2, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = crate::numerics::params::init_normal::<f64, _>(&mut rng, &[4, 10], 1.0);
        let (a, _, _) = run_encode(&cfg, &graph, x.clone());
        let (b, _, _) = run_encode(&cfg, &graph, x);
        assert_eq!(a, b);
    }

    #[test]
    fn normalize_on_tape_matches_off_tape_and_zero_graph_identity() {
        let schema = schema_sizes(&[2, 1]);
        let graph = build_graph(&schema);
        let mut tape = Tape::<f64>::new();
        let adj = tape.constant(graph.adjacency());
        let norm = normalize_on_tape(&mut tape, adj, 3).unwrap();
        let off = crate::graph::normalize_adjacency::<f64>(&graph);
        let on = tape.value(norm);
        for i in 0..3 {
            for j in 0..3 {
                assert!((on[[i, j]] - off[[i, j]]).abs() < 1e-15);
            }
        }

        let zero_graph = build_graph(&schema_sizes(&[1, 1, 1]));
        let mut tape = Tape::<f64>::new();
        let adj = tape.constant(zero_graph.adjacency::<f64>());
        let norm = normalize_on_tape(&mut tape, adj, 3).unwrap();
        let on = tape.value(norm);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(on[[i, j]], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = EncoderConfig::default();
        cfg.pooling_ratio = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.pooling_ratio = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.propagation = Propagation::Gat;
        cfg.gat_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.num_levels = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_feature_matrix_is_rejected() {
        let cfg = toy_cfg(Propagation::Gcn);
        let graph = build_graph(&schema_sizes(&[2]));
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        register_encoder_params(&mut store, &cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.constant(ArrayD::zeros(IxDyn(&[3, 10])));
        let err = encode_graph_prompts(&mut tape, &store, &binding, x, &graph, &cfg);
        assert!(err.is_err());
    }
}
