//! Shared fixtures for unit tests: a two-service cafe schema with a
//! tiny frozen backbone sized for fast assertions.

use crate::backbone::{pretrain_and_freeze, register_backbone_params, BackboneConfig, PretrainMode};
use crate::data::dialogue::{DialogueExample, Speaker};
use crate::data::schema::{Schema, Service, SlotDef};
use crate::data::vocab::Vocabulary;
use crate::encoder::EncoderConfig;
use crate::graph::build_graph;
use crate::model::{AblationFlags, Model};
use crate::numerics::ParamStore;
use crate::prompt::SegmentOrder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

pub(crate) fn cafe_schema() -> Schema {
    let slot = |name: &str, desc: &str| SlotDef {
        name: name.to_string(),
        description: desc.to_string(),
        is_categorical: false,
        possible_values: None,
    };
    Schema::from_services(vec![
        Service {
            name: "cafe_1".to_string(),
            description: "coffee shop".to_string(),
            slots: vec![slot("drink", "kind of drink"), slot("size", "cup size")],
        },
        Service {
            name: "cafe_2".to_string(),
            description: "tea house".to_string(),
            slots: vec![slot("drink", "kind of drink"), slot("payment", "payment method")],
        },
    ])
    .unwrap()
}

/// Frozen toy backbone plus registered prompt parameters for the cafe
/// schema, under the given ablation flags.
pub(crate) fn cafe_fixture(ablation: AblationFlags) -> (Model, ParamStore<f64>) {
    let schema = cafe_schema();
    let graph = build_graph(&schema);
    let texts = [
        "kind of drink cup size payment method",
        "i want a large tea please",
        "card cash tea coffee small large give me and pay with",
    ];
    let vocab = Vocabulary::build(
        texts.iter().copied(),
        schema.max_slots_per_service(),
        schema.num_slots(),
        3,
    );
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
        output_dim: 16,
        input_dim: 16,
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    register_backbone_params(&mut store, &backbone_cfg, &mut rng).unwrap();
    pretrain_and_freeze(
        &mut store,
        &backbone_cfg,
        &vocab,
        &[],
        PretrainMode::RandomFrozen,
        5,
    )
    .unwrap();
    let model = Model::build(
        schema,
        graph,
        vocab,
        encoder_cfg,
        backbone_cfg,
        3,
        SegmentOrder::PromptsFirst,
        ablation,
    )
    .unwrap();
    model.register_prompt_params(&mut store, &mut rng).unwrap();
    (model, store)
}

pub(crate) fn cafe_turn(
    id: &str,
    service: &str,
    utterance: &str,
    state: &[(&str, &str)],
    active: &[usize],
) -> DialogueExample {
    DialogueExample {
        dialogue_id: id.to_string(),
        service: service.to_string(),
        turn_index: 0,
        history: vec![(Speaker::User, utterance.to_string())],
        gold_state: state
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        active_slots: active.iter().copied().collect(),
    }
}

pub(crate) fn cafe_example() -> DialogueExample {
    cafe_turn(
        "d1",
        "cafe_1",
        "i want a large tea please",
        &[("drink", "tea"), ("size", "large")],
        &[0, 1],
    )
}

/// Six varied turns across both services.
pub(crate) fn cafe_examples() -> Vec<DialogueExample> {
    vec![
        cafe_example(),
        cafe_turn(
            "d2",
            "cafe_1",
            "give me a small coffee",
            &[("drink", "coffee"), ("size", "small")],
            &[0, 1],
        ),
        cafe_turn(
            "d3",
            "cafe_1",
            "tea please",
            &[("drink", "tea"), ("size", "none")],
            &[0],
        ),
        cafe_turn(
            "d4",
            "cafe_2",
            "tea and pay with card",
            &[("drink", "tea"), ("payment", "card")],
            &[2, 3],
        ),
        cafe_turn(
            "d5",
            "cafe_2",
            "coffee and pay with cash",
            &[("drink", "coffee"), ("payment", "cash")],
            &[2, 3],
        ),
        cafe_turn(
            "d6",
            "cafe_2",
            "coffee please",
            &[("drink", "coffee"), ("payment", "none")],
            &[2],
        ),
    ]
}
