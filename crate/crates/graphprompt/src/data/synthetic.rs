//! Deterministic synthetic corpus generation: templated single-service
//! dialogues over a generated schema, with cumulative gold states.
//!
//! User utterances follow three fixed templates ("set the <slot> to
//! <value>", the two-slot "and" form, and a no-op turn), so a test can
//! replay the templates and reconstruct every gold state independently
//! of this module's bookkeeping. System turns are fillers, optionally
//! replaced by decoy offers that never enter the state.

use crate::data::dialogue::{truncate_history, DialogueExample, Speaker};
use crate::data::schema::{Schema, Service, SlotDef};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

const SERVICE_BASES: &[&str] = &[
    "flights", "hotels", "rentals", "events", "music", "travel", "weather", "banks", "buses",
    "homes", "media", "movies", "restaurants", "rides", "salons", "trains",
];

const SLOT_KINDS: &[&str] = &[
    "date", "city", "price", "rating", "time", "area", "duration", "name", "category", "size",
    "guests", "airline", "cuisine", "color", "brand", "genre",
];

const VALUE_BANK: &[&str] = &[
    "tokyo", "paris", "london", "sydney", "cairo", "oslo", "lima", "denver", "austin", "dublin",
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "march",
    "april", "june", "red", "blue", "green", "amber", "violet", "coral", "ivory", "teal",
    "olive", "slate", "cheap", "moderate", "expensive", "luxury", "budget", "standard",
    "deluxe", "premium", "basic", "plus", "morning", "noon", "evening", "night", "dawn",
    "dusk", "early", "late", "soon", "today", "pasta", "sushi", "tacos", "curry", "ramen",
    "salad", "pizza", "bagels", "soup", "steak", "jazz", "rock", "folk", "blues", "opera",
    "disco", "techno", "salsa", "indie", "metal", "small", "medium", "large", "huge", "tiny",
    "double", "single", "triple", "quad", "king",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_services: usize,
    /// One entry per service; a single entry is reused for all.
    pub slots_per_service: Vec<usize>,
    pub num_dialogues: usize,
    pub min_user_turns: usize,
    pub max_user_turns: usize,
    pub values_per_slot: usize,
    pub history_budget: usize,
    /// Probability that a filler system turn instead offers a decoy
    /// value the user never takes up. Decoys mention slot and value in
    /// user-like phrasing but do not enter the gold state, so slot
    /// activity stops being readable off surface mentions.
    pub distractor_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_services: 3,
            slots_per_service: vec![3, 3, 4],
            num_dialogues: 50,
            min_user_turns: 2,
            max_user_turns: 4,
            values_per_slot: 5,
            history_budget: 256,
            distractor_rate: 0.0,
        }
    }
}

impl SyntheticSpec {
    fn slots_for(&self, service: usize) -> usize {
        if self.slots_per_service.len() == 1 {
            self.slots_per_service[0]
        } else {
            self.slots_per_service[service]
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_services == 0 {
            return Err(Error::Spec("num_services must be at least 1".to_string()));
        }
        if self.slots_per_service.len() != 1
            && self.slots_per_service.len() != self.num_services
        {
            return Err(Error::Spec(format!(
                "slots_per_service has {} entries for {} services",
                self.slots_per_service.len(),
                self.num_services
            )));
        }
        for s in 0..self.num_services {
            if self.slots_for(s) == 0 {
                return Err(Error::Spec(format!("service {s} has zero slots")));
            }
        }
        if self.num_dialogues == 0 {
            return Err(Error::Spec("num_dialogues must be at least 1".to_string()));
        }
        if self.min_user_turns == 0 || self.min_user_turns > self.max_user_turns {
            return Err(Error::Spec(format!(
                "bad turn range {}..{}",
                self.min_user_turns, self.max_user_turns
            )));
        }
        if self.values_per_slot == 0 {
            return Err(Error::Spec("values_per_slot must be at least 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::Spec(format!(
                "distractor_rate {} is outside [0, 1]",
                self.distractor_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub schema: Schema,
    pub train: Vec<DialogueExample>,
    pub dev: Vec<DialogueExample>,
    pub test: Vec<DialogueExample>,
    /// Per global slot, the closed set of values it can take.
    pub lexicons: Vec<Vec<String>>,
}

impl SyntheticCorpus {
    /// Every string the vocabulary must cover: utterances, slot and
    /// service descriptions, and all lexicon values.
    pub fn vocab_texts(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for split in [&self.train, &self.dev, &self.test] {
            for e in split {
                for (_, utt) in &e.history {
                    set.insert(utt.clone());
                }
            }
        }
        for svc in &self.schema.services {
            set.insert(svc.description.clone());
            for slot in &svc.slots {
                set.insert(slot.description.clone());
            }
        }
        for lex in &self.lexicons {
            for v in lex {
                set.insert(v.clone());
            }
        }
        set.into_iter().collect()
    }

    /// Plain sentences for backbone pretraining: the distinct
    /// utterances of all splits.
    pub fn pretrain_sentences(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for split in [&self.train, &self.dev, &self.test] {
            for e in split {
                for (_, utt) in &e.history {
                    set.insert(utt.clone());
                }
            }
        }
        set.into_iter().collect()
    }
}

fn service_name(i: usize) -> String {
    let base = SERVICE_BASES[i % SERVICE_BASES.len()];
    let round = i / SERVICE_BASES.len() + 1;
    format!("{base}_{round}")
}

fn slot_name(j: usize) -> String {
    if j < SLOT_KINDS.len() {
        SLOT_KINDS[j].to_string()
    } else {
        format!("extra{j}")
    }
}

fn build_schema(spec: &SyntheticSpec) -> Result<Schema> {
    let mut services = Vec::with_capacity(spec.num_services);
    for s in 0..spec.num_services {
        let name = service_name(s);
        let base = name.split('_').next().unwrap().to_string();
        let slots = (0..spec.slots_for(s))
            .map(|j| {
                let sname = slot_name(j);
                SlotDef {
                    name: sname.clone(),
                    description: format!("the {sname} for the {base} request"),
                    is_categorical: false,
                    possible_values: None,
                }
            })
            .collect();
        services.push(Service {
            name,
            description: format!("{base} assistant"),
            slots,
        });
    }
    Schema::from_services(services)
}

fn build_lexicons(spec: &SyntheticSpec, num_slots: usize) -> Vec<Vec<String>> {
    let mut out = Vec::with_capacity(num_slots);
    for g in 0..num_slots {
        let start = g * spec.values_per_slot;
        let lex: Vec<String> = if start + spec.values_per_slot <= VALUE_BANK.len() {
            VALUE_BANK[start..start + spec.values_per_slot]
                .iter()
                .map(|s| s.to_string())
                .collect()
        } else {
            (0..spec.values_per_slot)
                .map(|i| format!("item{g}x{i}"))
                .collect()
        };
        out.push(lex);
    }
    out
}

/// Generate a corpus as a pure function of (spec, seed).
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let schema = build_schema(spec)?;
    let lexicons = build_lexicons(spec, schema.num_slots());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();

    for d in 0..spec.num_dialogues {
        let si = d % spec.num_services;
        let svc_name = service_name(si);
        let slot_set = schema.service_slots(&svc_name)?;
        let turns = rng.gen_range(spec.min_user_turns..=spec.max_user_turns);

        let mut unassigned: Vec<usize> = (0..slot_set.len()).collect();
        let mut assigned: BTreeMap<String, String> = BTreeMap::new();
        let mut active: BTreeSet<usize> = BTreeSet::new();
        let mut history: Vec<(Speaker, String)> = Vec::new();
        history.push((Speaker::System, "hello how can i help you".to_string()));

        let mut examples = Vec::with_capacity(turns);
        for t in 0..turns {
            let want = if t == 0 {
                rng.gen_range(1..=2)
            } else {
                rng.gen_range(0..=2)
            };
            let take = want.min(unassigned.len());
            let mut introduced: Vec<(String, String)> = Vec::with_capacity(take);
            for _ in 0..take {
                let pick = rng.gen_range(0..unassigned.len());
                let local = unassigned.swap_remove(pick);
                let (gidx, slot) = slot_set[local];
                let lex = &lexicons[gidx];
                let value = lex[rng.gen_range(0..lex.len())].clone();
                assigned.insert(slot.name.clone(), value.clone());
                active.insert(gidx);
                introduced.push((slot.name.clone(), value));
            }
            let utterance = match introduced.as_slice() {
                [] => "nothing else for now".to_string(),
                [(n, v)] => format!("set the {n} to {v}"),
                [(n1, v1), (n2, v2)] => {
                    format!("set the {n1} to {v1} and the {n2} to {v2}")
                }
                _ => unreachable!(),
            };
            history.push((Speaker::User, utterance));

            let mut gold_state = BTreeMap::new();
            for (_, slot) in &slot_set {
                let v = assigned
                    .get(&slot.name)
                    .cloned()
                    .unwrap_or_else(|| "none".to_string());
                gold_state.insert(slot.name.clone(), v);
            }
            examples.push(DialogueExample {
                dialogue_id: format!("syn{d:05}"),
                service: svc_name.clone(),
                turn_index: t,
                history: truncate_history(&history, spec.history_budget),
                gold_state,
                active_slots: active.clone(),
            });
            if t + 1 < turns {
                // The rate-0 branch must not touch the RNG so existing
                // seeds keep producing byte-identical corpora.
                let filler = if spec.distractor_rate > 0.0 && rng.gen_bool(spec.distractor_rate) {
                    let (gidx, slot) = slot_set[rng.gen_range(0..slot_set.len())];
                    let taken = assigned.get(&slot.name);
                    let options: Vec<&String> = lexicons[gidx]
                        .iter()
                        .filter(|v| Some(*v) != taken)
                        .collect();
                    if options.is_empty() {
                        "okay what else".to_string()
                    } else {
                        let v = options[rng.gen_range(0..options.len())];
                        format!("i could set the {} to {v} if you like", slot.name)
                    }
                } else {
                    "okay what else".to_string()
                };
                history.push((Speaker::System, filler));
            }
        }

        let bucket = match d % 10 {
            0..=7 => &mut train,
            8 => &mut dev,
            _ => &mut test,
        };
        bucket.extend(examples);
    }

    Ok(SyntheticCorpus {
        schema,
        train,
        dev,
        test,
        lexicons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent template replay: reconstruct the cumulative state
    /// from the utterance texts alone.
    fn replay_state(history: &[(Speaker, String)]) -> BTreeMap<String, String> {
        let mut state = BTreeMap::new();
        for (speaker, utt) in history {
            if *speaker != Speaker::User {
                continue;
            }
            if let Some(rest) = utt.strip_prefix("set the ") {
                for part in rest.split(" and the ") {
                    let mut halves = part.splitn(2, " to ");
                    let name = halves.next().unwrap().to_string();
                    let value = halves.next().expect("template always has a value");
                    state.insert(name, value.to_string());
                }
            }
        }
        state
    }

    #[test]
    fn slot_count_is_sum_of_services() {
        let spec = SyntheticSpec::default();
        let corpus = generate_synthetic_corpus(&spec, 1).unwrap();
        assert_eq!(corpus.schema.num_slots(), 10);
        assert_eq!(corpus.schema.num_services(), 3);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic_corpus(&spec, 7).unwrap();
        let b = generate_synthetic_corpus(&spec, 7).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = generate_synthetic_corpus(&spec, 8).unwrap();
        assert_ne!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&c).unwrap()
        );
    }

    #[test]
    fn gold_states_match_template_replay() {
        let spec = SyntheticSpec::default();
        let corpus = generate_synthetic_corpus(&spec, 3).unwrap();
        let mut checked = 0usize;
        for e in corpus
            .train
            .iter()
            .chain(corpus.dev.iter())
            .chain(corpus.test.iter())
        {
            let replayed = replay_state(&e.history);
            for (slot, value) in &e.gold_state {
                let expected = replayed
                    .get(slot)
                    .cloned()
                    .unwrap_or_else(|| "none".to_string());
                assert_eq!(*value, expected, "slot {slot} in {}", e.dialogue_id);
            }
            // Active set is exactly the non-"none" slots.
            for (gidx, slot) in corpus.schema.service_slots(&e.service).unwrap() {
                let is_active = e.gold_state[&slot.name] != "none";
                assert_eq!(e.active_slots.contains(&gidx), is_active);
            }
            checked += 1;
        }
        assert!(checked > 100, "only {checked} examples generated");
    }

    #[test]
    fn split_ratios_are_80_10_10() {
        let spec = SyntheticSpec {
            num_dialogues: 100,
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec, 5).unwrap();
        let count_dialogues = |split: &[DialogueExample]| {
            split
                .iter()
                .map(|e| e.dialogue_id.clone())
                .collect::<BTreeSet<_>>()
                .len()
        };
        assert_eq!(count_dialogues(&corpus.train), 80);
        assert_eq!(count_dialogues(&corpus.dev), 10);
        assert_eq!(count_dialogues(&corpus.test), 10);
    }

    #[test]
    fn history_alternates_and_ends_with_user() {
        let corpus = generate_synthetic_corpus(&SyntheticSpec::default(), 11).unwrap();
        for e in &corpus.train {
            assert_eq!(e.history.last().unwrap().0, Speaker::User);
            for w in e.history.windows(2) {
                assert_ne!(w[0].0, w[1].0);
            }
        }
    }

    #[test]
    fn lexicons_are_disjoint_across_slots() {
        let corpus = generate_synthetic_corpus(&SyntheticSpec::default(), 2).unwrap();
        let mut seen = BTreeSet::new();
        for lex in &corpus.lexicons {
            for v in lex {
                assert!(seen.insert(v.clone()), "value {v} appears in two lexicons");
            }
        }
    }

    #[test]
    fn decoy_offers_do_not_enter_gold_states() {
        let spec = SyntheticSpec {
            distractor_rate: 1.0,
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec, 9).unwrap();
        let mut decoys = 0usize;
        let mut decoy_only_inactive = 0usize;
        for e in corpus
            .train
            .iter()
            .chain(corpus.dev.iter())
            .chain(corpus.test.iter())
        {
            let replayed = replay_state(&e.history);
            for (slot, value) in &e.gold_state {
                let expected = replayed
                    .get(slot)
                    .cloned()
                    .unwrap_or_else(|| "none".to_string());
                assert_eq!(*value, expected, "decoys leaked into {}", e.dialogue_id);
            }
            for (speaker, utt) in &e.history {
                if *speaker != Speaker::System || !utt.starts_with("i could set the ") {
                    continue;
                }
                decoys += 1;
                let slot = utt
                    .strip_prefix("i could set the ")
                    .unwrap()
                    .split(" to ")
                    .next()
                    .unwrap();
                if replayed.get(slot).is_none() && e.gold_state[slot] == "none" {
                    decoy_only_inactive += 1;
                }
            }
        }
        assert!(decoys > 50, "only {decoys} decoy turns at rate 1.0");
        // Some slots are mentioned only in decoys and must stay inactive.
        assert!(decoy_only_inactive > 0);
    }

    #[test]
    fn distractor_rate_must_be_a_probability() {
        let spec = SyntheticSpec {
            distractor_rate: 1.5,
            ..SyntheticSpec::default()
        };
        assert!(matches!(
            generate_synthetic_corpus(&spec, 0),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn zero_slots_is_a_spec_error() {
        let spec = SyntheticSpec {
            slots_per_service: vec![3, 0, 4],
            ..SyntheticSpec::default()
        };
        assert!(matches!(
            generate_synthetic_corpus(&spec, 0),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn vocab_texts_cover_values_and_descriptions() {
        let corpus = generate_synthetic_corpus(&SyntheticSpec::default(), 4).unwrap();
        let texts = corpus.vocab_texts();
        let joined = texts.join("\n");
        for lex in &corpus.lexicons {
            for v in lex {
                assert!(joined.contains(v));
            }
        }
        assert!(joined.contains("the date for the flights request"));
    }
}
