//! Query rendering, target rendering, input-sequence planning, and
//! prompt-bank initialization.
//!
//! A query lists every slot of a service as "description : sentinel";
//! the target answers with "sentinel value" pairs, using the literal
//! word "none" for slots absent from the state. The input plan lays
//! out graph prompts, shared prompts, history tokens, and query tokens
//! within the backbone's position budget; only history is truncable.

use crate::data::dialogue::{truncate_history, DialogueExample, Speaker};
use crate::data::schema::Schema;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::params::init_normal;
use crate::numerics::scalar::Scalar;
use crate::numerics::{ParamGroup, ParamStore};
use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Parameter names for the two prompt banks.
pub const SLOT_TOKEN_PARAM: &str = "prompt.slot_tokens";
pub const SHARED_PROMPT_PARAM: &str = "prompt.shared";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySpec {
    pub service: String,
    /// Global slot indices in service order; sentinel j pairs with the
    /// j-th entry.
    pub slot_indices: Vec<usize>,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSpec {
    pub tokens: Vec<usize>,
}

/// Render the query for one service: every slot description followed
/// by a colon and that slot's sentinel token.
pub fn build_query(schema: &Schema, vocab: &Vocabulary, service: &str) -> Result<QuerySpec> {
    let svc = schema
        .service(service)
        .ok_or_else(|| Error::Reference(format!("unknown service {service}")))?;
    let colon = vocab
        .word_id(":")
        .ok_or_else(|| Error::Reference("delimiter token missing from vocabulary".to_string()))?;
    let mut slot_indices = Vec::new();
    let mut tokens = Vec::new();
    for (j, (global, slot)) in schema.service_slots(&svc.name)?.into_iter().enumerate() {
        slot_indices.push(global);
        tokens.extend(vocab.tokenize(&slot.description));
        tokens.push(colon);
        tokens.push(vocab.sentinel_id(j)?);
    }
    Ok(QuerySpec {
        service: service.to_string(),
        slot_indices,
        tokens,
    })
}

/// Render the target: sentinel j followed by the tokenized value of
/// the j-th slot, "none" when absent from the state.
pub fn build_target(
    example: &DialogueExample,
    query: &QuerySpec,
    schema: &Schema,
    vocab: &Vocabulary,
) -> Result<TargetSpec> {
    if example.service != query.service {
        return Err(Error::Reference(format!(
            "query for {} applied to example from {}",
            query.service, example.service
        )));
    }
    let mut tokens = Vec::new();
    for (j, &global) in query.slot_indices.iter().enumerate() {
        let (_, slot) = schema
            .slot_by_index(global)
            .ok_or_else(|| Error::Reference(format!("slot index {global} out of range")))?;
        tokens.push(vocab.sentinel_id(j)?);
        let value = example
            .gold_state
            .get(&slot.name)
            .map(String::as_str)
            .unwrap_or("none");
        tokens.extend(vocab.tokenize(value));
    }
    Ok(TargetSpec { tokens })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentOrder {
    /// Graph prompts, shared prompts, history, query.
    PromptsFirst,
    /// History, query, graph prompts, shared prompts.
    PromptsLast,
}

impl Default for SegmentOrder {
    fn default() -> Self {
        SegmentOrder::PromptsFirst
    }
}

/// Which of the four segments occupies a span of the assembled input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    GraphPrompts,
    SharedPrompts,
    History,
    Query,
}

/// Token-level layout of one assembled input sequence. Prompt segments
/// are placeholders resolved to vectors by the model; history and query
/// are concrete token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputPlan {
    pub order: SegmentOrder,
    pub num_graph_prompts: usize,
    pub num_shared_prompts: usize,
    pub history_tokens: Vec<usize>,
    pub query_tokens: Vec<usize>,
}

impl InputPlan {
    pub fn total_len(&self) -> usize {
        self.num_graph_prompts
            + self.num_shared_prompts
            + self.history_tokens.len()
            + self.query_tokens.len()
    }

    /// Segments in layout order with their index ranges.
    pub fn segment_bounds(&self) -> Vec<(Segment, std::ops::Range<usize>)> {
        let lens = match self.order {
            SegmentOrder::PromptsFirst => [
                (Segment::GraphPrompts, self.num_graph_prompts),
                (Segment::SharedPrompts, self.num_shared_prompts),
                (Segment::History, self.history_tokens.len()),
                (Segment::Query, self.query_tokens.len()),
            ],
            SegmentOrder::PromptsLast => [
                (Segment::History, self.history_tokens.len()),
                (Segment::Query, self.query_tokens.len()),
                (Segment::GraphPrompts, self.num_graph_prompts),
                (Segment::SharedPrompts, self.num_shared_prompts),
            ],
        };
        let mut out = Vec::with_capacity(4);
        let mut start = 0usize;
        for (seg, len) in lens {
            out.push((seg, start..start + len));
            start += len;
        }
        out
    }
}

/// Plan one input sequence within `max_positions`, truncating history
/// turn by turn (oldest first) after reserving room for the prompts
/// and the full query.
pub fn assemble_input(
    example: &DialogueExample,
    query: &QuerySpec,
    vocab: &Vocabulary,
    num_graph_prompts: usize,
    num_shared_prompts: usize,
    max_positions: usize,
    order: SegmentOrder,
) -> Result<InputPlan> {
    let reserved = num_graph_prompts + num_shared_prompts + query.tokens.len();
    let history_budget = max_positions.checked_sub(reserved).ok_or_else(|| {
        Error::Config(format!(
            "prompts and query need {reserved} positions but the backbone has {max_positions}"
        ))
    })?;
    let kept: Vec<(Speaker, String)> = truncate_history(&example.history, history_budget);
    let mut history_tokens = Vec::new();
    for (_, text) in &kept {
        history_tokens.extend(vocab.tokenize(text));
    }
    // Whole-turn truncation guarantees the budget except when even the
    // newest turn alone overflows; hard-trim that case from the front.
    if history_tokens.len() > history_budget {
        history_tokens.drain(..history_tokens.len() - history_budget);
    }
    Ok(InputPlan {
        order,
        num_graph_prompts,
        num_shared_prompts,
        history_tokens,
        query_tokens: query.tokens.clone(),
    })
}

/// Register the two trainable prompt banks: per-slot token embeddings
/// drawn from N(0, std²), and shared prompts copied row-for-row from
/// the first `num_shared` rows of the backbone embedding table.
pub fn init_prompt_banks<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    vocab: &Vocabulary,
    token_embed: &ArrayD<S>,
    num_shared: usize,
    width: usize,
    std: f64,
    rng: &mut R,
) -> Result<()> {
    if num_shared > vocab.base_len() {
        return Err(Error::Config(format!(
            "{num_shared} shared prompts exceed the {} base vocabulary rows",
            vocab.base_len()
        )));
    }
    if token_embed.ndim() != 2
        || token_embed.shape()[0] < num_shared
        || token_embed.shape()[1] != width
    {
        return Err(Error::shape(
            "init_prompt_banks",
            format!(
                "embedding table {:?} vs {num_shared} prompts of width {width}",
                token_embed.shape()
            ),
        ));
    }
    let m = vocab.slot_token_range().len();
    store.register(
        SLOT_TOKEN_PARAM,
        init_normal(rng, &[m, width], std),
        ParamGroup::Embedding,
        false,
    )?;
    let mut shared = ArrayD::zeros(ndarray::IxDyn(&[num_shared, width]));
    for i in 0..num_shared {
        for j in 0..width {
            shared[[i, j]] = token_embed[[i, j]];
        }
    }
    store.register(SHARED_PROMPT_PARAM, shared, ParamGroup::Embedding, false)?;
    Ok(())
}
