//! Composition of the pieces into one dialogue-state model: schema
//! graph encoding produces graph prompts, the prompt banks and token
//! embeddings fill out the input sequence, and the frozen backbone
//! scores or generates the sentinel/value target.

use crate::backbone::{
    embed_tokens, forward_teacher_forced, greedy_decode, BackboneConfig,
};
use crate::data::dialogue::DialogueExample;
use crate::data::schema::Schema;
use crate::data::vocab::Vocabulary;
use crate::encoder::{encode_graph_prompts, param_node, register_encoder_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::SchemaGraph;
use crate::numerics::params::init_normal;
use crate::numerics::scalar::Scalar;
use crate::numerics::{Binding, NodeId, ParamGroup, ParamStore, Tape};
use crate::prompt::{
    assemble_input, build_query, build_target, init_prompt_banks, QuerySpec, Segment,
    SegmentOrder, SHARED_PROMPT_PARAM, SLOT_TOKEN_PARAM,
};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::rc::Rc;

/// Free graph-prompt bank used when the graph encoder is bypassed.
pub const GRAPH_FREE_PARAM: &str = "prompt.graph_free";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Run slot features through the graph encoder; when off the graph
    /// prompts are free embeddings trained like shared prompts.
    pub use_gnn: bool,
    /// Give each slot its own prompt row; when off all rows carry the
    /// embedding of one fixed vocabulary token.
    pub use_graph_prompts: bool,
    /// Zero the rows of slots that are inactive for the example.
    pub use_active_mask: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_gnn: true,
            use_graph_prompts: true,
            use_active_mask: true,
        }
    }
}

impl AblationFlags {
    pub fn from_name(name: &str) -> Result<Self> {
        let full = AblationFlags::default();
        match name {
            "full" => Ok(full),
            "w/o-GP" => Ok(AblationFlags {
                use_graph_prompts: false,
                ..full
            }),
            "w/o-Active" => Ok(AblationFlags {
                use_active_mask: false,
                ..full
            }),
            "w/o-Active&GP" => Ok(AblationFlags {
                use_graph_prompts: false,
                use_active_mask: false,
                ..full
            }),
            "w/o-SlotConnect" => Ok(AblationFlags {
                use_gnn: false,
                ..full
            }),
            other => Err(Error::Config(format!("unknown ablation \"{other}\""))),
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.use_gnn, self.use_graph_prompts, self.use_active_mask) {
            (true, true, true) => "full",
            (_, false, true) => "w/o-GP",
            (true, true, false) => "w/o-Active",
            (_, false, false) => "w/o-Active&GP",
            (false, true, true) => "w/o-SlotConnect",
            (false, true, false) => "w/o-SlotConnect",
        }
    }
}

/// Everything needed to run one example through the model, minus the
/// parameters themselves (those live in a ParamStore).
#[derive(Debug, Clone)]
pub struct Model {
    pub schema: Schema,
    pub graph: SchemaGraph,
    pub vocab: Vocabulary,
    pub encoder_cfg: EncoderConfig,
    pub backbone_cfg: BackboneConfig,
    pub num_shared_prompts: usize,
    pub order: SegmentOrder,
    pub ablation: AblationFlags,
    queries: BTreeMap<String, QuerySpec>,
}

impl Model {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        schema: Schema,
        graph: SchemaGraph,
        vocab: Vocabulary,
        encoder_cfg: EncoderConfig,
        backbone_cfg: BackboneConfig,
        num_shared_prompts: usize,
        order: SegmentOrder,
        ablation: AblationFlags,
    ) -> Result<Model> {
        encoder_cfg.validate()?;
        backbone_cfg.validate()?;
        if graph.num_nodes() != schema.num_slots() {
            return Err(Error::shape(
                "model",
                format!(
                    "graph has {} nodes for {} slots",
                    graph.num_nodes(),
                    schema.num_slots()
                ),
            ));
        }
        if encoder_cfg.output_dim != backbone_cfg.d_model {
            return Err(Error::Config(format!(
                "graph prompts are {}-wide but the backbone expects {}",
                encoder_cfg.output_dim, backbone_cfg.d_model
            )));
        }
        if encoder_cfg.input_dim != backbone_cfg.d_model {
            return Err(Error::Config(format!(
                "slot tokens are {}-wide but the embedding table is {}-wide",
                encoder_cfg.input_dim, backbone_cfg.d_model
            )));
        }
        if backbone_cfg.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "backbone covers {} tokens but the vocabulary has {}",
                backbone_cfg.vocab_size,
                vocab.len()
            )));
        }
        if vocab.slot_token_range().len() != schema.num_slots() {
            return Err(Error::Config(format!(
                "{} slot tokens for {} schema slots",
                vocab.slot_token_range().len(),
                schema.num_slots()
            )));
        }
        if vocab.sentinel_range().len() < schema.max_slots_per_service() {
            return Err(Error::Config(format!(
                "{} sentinels cannot cover services with up to {} slots",
                vocab.sentinel_range().len(),
                schema.max_slots_per_service()
            )));
        }
        let mut queries = BTreeMap::new();
        for service in &schema.services {
            queries.insert(service.name.clone(), build_query(&schema, &vocab, &service.name)?);
        }
        Ok(Model {
            schema,
            graph,
            vocab,
            encoder_cfg,
            backbone_cfg,
            num_shared_prompts,
            order,
            ablation,
            queries,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.schema.num_slots()
    }

    pub fn query(&self, service: &str) -> Result<&QuerySpec> {
        self.queries
            .get(service)
            .ok_or_else(|| Error::Reference(format!("no query for service {service}")))
    }

    /// Register the trainable prompt-side parameters. The backbone
    /// (including its token-embedding table) must be registered first
    /// because shared prompts copy embedding rows.
    pub fn register_prompt_params<S: Scalar, R: Rng>(
        &self,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Result<()> {
        let embed_id = store
            .id("backbone.token_embed")
            .ok_or_else(|| Error::Reference("backbone must be registered first".to_string()))?;
        let table = store.value(embed_id);
        init_prompt_banks(
            store,
            &self.vocab,
            &table,
            self.num_shared_prompts,
            self.backbone_cfg.d_model,
            0.02,
            rng,
        )?;
        if self.ablation.use_graph_prompts {
            if self.ablation.use_gnn {
                register_encoder_params(store, &self.encoder_cfg, rng)?;
            } else {
                store.register(
                    GRAPH_FREE_PARAM,
                    init_normal(rng, &[self.num_slots(), self.backbone_cfg.d_model], 0.02),
                    ParamGroup::Embedding,
                    false,
                )?;
            }
        }
        Ok(())
    }

    /// Column of 1s over active slots and 0s elsewhere.
    fn active_mask_col<S: Scalar>(&self, example: &DialogueExample) -> ArrayD<S> {
        let m = self.num_slots();
        ArrayD::from_shape_fn(IxDyn(&[m, 1]), |ix| {
            if example.active_slots.contains(&ix[0]) {
                S::one()
            } else {
                S::zero()
            }
        })
    }

    /// The m graph-prompt rows for one example, honoring the ablation
    /// flags: encoder output, free embeddings, or one tiled token.
    pub fn graph_prompt_rows<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        binding: &Binding,
        example: &DialogueExample,
    ) -> Result<NodeId> {
        let m = self.num_slots();
        let mask = if self.ablation.use_active_mask {
            Some(tape.constant(self.active_mask_col::<S>(example)))
        } else {
            None
        };
        if !self.ablation.use_graph_prompts {
            // UNK never occurs in well-formed text, so tiling its embedding
            // keeps the prompt gradient out of the query token rows.
            let rows = embed_tokens(tape, store, binding, &vec![crate::data::vocab::UNK; m])?;
            return match mask {
                Some(c) => tape.mul_col_broadcast(rows, c),
                None => Ok(rows),
            };
        }
        if !self.ablation.use_gnn {
            let rows = param_node(store, binding, GRAPH_FREE_PARAM)?;
            return match mask {
                Some(c) => tape.mul_col_broadcast(rows, c),
                None => Ok(rows),
            };
        }
        let slot_tokens = param_node(store, binding, SLOT_TOKEN_PARAM)?;
        let features = match mask {
            Some(c) => tape.mul_col_broadcast(slot_tokens, c)?,
            None => slot_tokens,
        };
        let out = encode_graph_prompts(tape, store, binding, features, &self.graph, &self.encoder_cfg)?;
        Ok(out.prompts)
    }

    /// Assemble the embedded input matrix in the configured segment
    /// order; empty segments are skipped.
    pub fn assembled_input<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        binding: &Binding,
        example: &DialogueExample,
    ) -> Result<NodeId> {
        let query = self.query(&example.service)?;
        let plan = assemble_input(
            example,
            query,
            &self.vocab,
            self.num_slots(),
            self.num_shared_prompts,
            self.backbone_cfg.max_positions,
            self.order,
        )?;
        let mut parts = Vec::new();
        for (segment, range) in plan.segment_bounds() {
            if range.is_empty() {
                continue;
            }
            let part = match segment {
                Segment::GraphPrompts => self.graph_prompt_rows(tape, store, binding, example)?,
                Segment::SharedPrompts => param_node(store, binding, SHARED_PROMPT_PARAM)?,
                Segment::History => embed_tokens(tape, store, binding, &plan.history_tokens)?,
                Segment::Query => embed_tokens(tape, store, binding, &plan.query_tokens)?,
            };
            parts.push(part);
        }
        tape.concat_rows(&parts)
    }

    /// Teacher-forced pass returning per-position logits and labels.
    pub fn forward_example<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        binding: &Binding,
        example: &DialogueExample,
    ) -> Result<ExampleForward> {
        let query = self.query(&example.service)?;
        let target = build_target(example, query, &self.schema, &self.vocab)?;
        let input = self.assembled_input(tape, store, binding, example)?;
        let tf = forward_teacher_forced(tape, store, binding, &self.backbone_cfg, input, &target.tokens)?;
        Ok(ExampleForward {
            logits: tf.logits,
            labels: tf.labels,
            target_tokens: target.tokens,
        })
    }

    /// Mean token negative log-likelihood of one example's target.
    pub fn example_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        binding: &Binding,
        example: &DialogueExample,
    ) -> Result<NodeId> {
        let fwd = self.forward_example(tape, store, binding, example)?;
        tape.cross_entropy(fwd.logits, Rc::new(fwd.labels))
    }

    /// Greedy generation for one example.
    pub fn decode_example<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        binding: &Binding,
        example: &DialogueExample,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let input = self.assembled_input(tape, store, binding, example)?;
        greedy_decode(tape, store, binding, &self.backbone_cfg, input, max_len)
    }
}

pub struct ExampleForward {
    pub logits: NodeId,
    pub labels: Vec<Option<usize>>,
    pub target_tokens: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::test_support::{cafe_example as example, cafe_fixture as build_fixture, cafe_schema};

    #[test]
    fn forward_shapes_and_finite_loss() {
        let (model, store) = build_fixture(AblationFlags::default());
        let ex = example();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let fwd = model.forward_example(&mut tape, &store, &binding, &ex).unwrap();
        let logits = tape.value(fwd.logits);
        assert_eq!(
            logits.shape(),
            &[fwd.target_tokens.len() + 1, model.vocab.len()]
        );
        let loss = model.example_loss(&mut tape, &store, &binding, &ex).unwrap();
        let v = tape.scalar_value(loss);
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn gradients_reach_all_prompt_parameters() {
        let (model, store) = build_fixture(AblationFlags::default());
        let ex = example();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let loss = model.example_loss(&mut tape, &store, &binding, &ex).unwrap();
        let grads = tape.backward(loss).unwrap();
        for name in [
            SLOT_TOKEN_PARAM,
            SHARED_PROMPT_PARAM,
            "backbone.token_embed",
            "encoder.input.w",
            "encoder.l0.gcn0.w",
            "encoder.readout.b2",
        ] {
            let id = store.id(name).unwrap();
            let g = grads
                .get(binding.node(id))
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(
                g.iter().any(|&x| x != 0.0),
                "gradient for {name} is all zero"
            );
        }
    }

    #[test]
    fn without_graph_prompts_rows_are_one_tiled_token() {
        let flags = AblationFlags {
            use_graph_prompts: false,
            use_active_mask: false,
            ..AblationFlags::default()
        };
        let (model, store) = build_fixture(flags);
        let ex = example();
        let mut tape = Tape::inference();
        let binding = store.bind(&mut tape);
        let rows = model.graph_prompt_rows(&mut tape, &store, &binding, &ex).unwrap();
        let v = tape.value(rows);
        assert_eq!(v.shape(), &[4, 16]);
        for i in 1..4 {
            for j in 0..16 {
                assert_eq!(v[[i, j]], v[[0, j]], "row {i} differs at {j}");
            }
        }
        assert!(v.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn active_mask_zeroes_inactive_rows_without_graph_prompts() {
        let flags = AblationFlags {
            use_graph_prompts: false,
            ..AblationFlags::default()
        };
        let (model, store) = build_fixture(flags);
        let ex = example();
        // cafe_1 owns global slots 0 and 1; 2 and 3 are inactive.
        let mut tape = Tape::inference();
        let binding = store.bind(&mut tape);
        let rows = model.graph_prompt_rows(&mut tape, &store, &binding, &ex).unwrap();
        let v = tape.value(rows);
        for j in 0..16 {
            assert!(!v[[0, j]].is_nan());
            assert_eq!(v[[2, j]], 0.0);
            assert_eq!(v[[3, j]], 0.0);
        }
        assert!((0..16).any(|j| v[[0, j]] != 0.0));
    }

    #[test]
    fn free_embedding_mode_skips_encoder_registration() {
        let flags = AblationFlags {
            use_gnn: false,
            ..AblationFlags::default()
        };
        let (model, store) = build_fixture(flags);
        assert!(store.id(GRAPH_FREE_PARAM).is_some());
        assert!(store.id("encoder.input.w").is_none());
        let ex = example();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let loss = model.example_loss(&mut tape, &store, &binding, &ex).unwrap();
        assert!(tape.scalar_value(loss).is_finite());
        let grads = tape.backward(loss).unwrap();
        let id = store.id(GRAPH_FREE_PARAM).unwrap();
        let g = grads.get(binding.node(id)).unwrap();
        // Inactive rows are masked out, so only active rows get grads.
        for j in 0..16 {
            assert_eq!(g[[2, j]], 0.0);
            assert_eq!(g[[3, j]], 0.0);
        }
        assert!((0..16).any(|j| g[[0, j]] != 0.0));
    }

    #[test]
    fn disabling_the_mask_changes_the_logits() {
        let (with_mask, store) = build_fixture(AblationFlags::default());
        let mut no_mask = with_mask.clone();
        no_mask.ablation.use_active_mask = false;
        let ex = example();
        let run = |model: &Model| {
            let mut tape = Tape::inference();
            let binding = store.bind(&mut tape);
            let fwd = model.forward_example(&mut tape, &store, &binding, &ex).unwrap();
            (*tape.value(fwd.logits)).clone()
        };
        assert_ne!(run(&with_mask), run(&no_mask));
    }

    #[test]
    fn ablation_names_round_trip() {
        for name in ["full", "w/o-GP", "w/o-Active", "w/o-Active&GP", "w/o-SlotConnect"] {
            let flags = AblationFlags::from_name(name).unwrap();
            assert_eq!(flags.name(), name);
        }
        assert!(AblationFlags::from_name("w/o-Everything").is_err());
    }

    #[test]
    fn decode_produces_tokens_within_budget() {
        let (model, store) = build_fixture(AblationFlags::default());
        let ex = example();
        let mut tape = Tape::inference();
        let binding = store.bind(&mut tape);
        let out = model.decode_example(&mut tape, &store, &binding, &ex, 10).unwrap();
        assert!(out.len() <= 10);
        assert!(out.iter().all(|&t| t < model.vocab.len()));
    }

    #[test]
    fn mismatched_widths_are_config_errors() {
        let schema = cafe_schema();
        let graph = build_graph(&schema);
        let vocab = Vocabulary::build(["drink"], 2, 4, 0);
        let backbone_cfg = BackboneConfig {
            d_model: 16,
            num_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_dim: 24,
            max_positions: 64,
            vocab_size: vocab.len(),
        };
        let encoder_cfg = EncoderConfig {
            num_levels: 1,
            gnn_layers: 1,
            hidden_dim: 6,
            output_dim: 8,
            input_dim: 16,
            ..EncoderConfig::default()
        };
        let err = Model::build(
            schema,
            graph,
            vocab,
            encoder_cfg,
            backbone_cfg,
            0,
            SegmentOrder::PromptsFirst,
            AblationFlags::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
