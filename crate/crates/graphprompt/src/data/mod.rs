//! Schema and dialogue ingestion, synthetic corpus generation, and
//! the word-level vocabulary.

pub mod dialogue;
pub mod schema;
pub mod synthetic;
pub mod vocab;

pub use dialogue::{load_dialogues, DialogueExample, DialogueLoad, Speaker};
pub use schema::{domain_of, load_schema, Schema, Service, SlotDef};
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
pub use vocab::Vocabulary;
