//! SGD-format dialogue ingestion: one training example per user turn.

use crate::data::schema::Schema;
use crate::data::vocab::segment;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    System,
    User,
}

/// One user turn of one dialogue, with the truncated history up to and
/// including that turn, the cumulative gold state over the service's
/// slots, and the set of globally-indexed active slots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogueExample {
    pub dialogue_id: String,
    pub service: String,
    pub turn_index: usize,
    pub history: Vec<(Speaker, String)>,
    /// Every slot of the service appears; unassigned slots hold "none".
    pub gold_state: BTreeMap<String, String>,
    pub active_slots: BTreeSet<usize>,
}

impl DialogueExample {
    /// History as one space-joined string, oldest turn first.
    pub fn history_text(&self) -> String {
        self.history
            .iter()
            .map(|(_, u)| u.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug)]
pub struct DialogueLoad {
    pub examples: Vec<DialogueExample>,
    /// Dialogues skipped because they span more than one service.
    pub skipped_multi_service: usize,
}

/// Truncate a history to at most `budget` word tokens, dropping whole
/// turns from the oldest end first. The newest turn is always kept,
/// even if it alone exceeds the budget.
pub fn truncate_history(history: &[(Speaker, String)], budget: usize) -> Vec<(Speaker, String)> {
    if history.is_empty() {
        return Vec::new();
    }
    let counts: Vec<usize> = history.iter().map(|(_, u)| segment(u).len()).collect();
    let mut start = history.len();
    let mut used = 0usize;
    while start > 0 {
        let next = used + counts[start - 1];
        if next > budget && start < history.len() {
            break;
        }
        used = next;
        start -= 1;
        if used > budget {
            break;
        }
    }
    history[start..].to_vec()
}

/// Parse an SGD `dialogues_*.json` file into per-user-turn examples.
/// `history_budget` caps the retained history length in word tokens.
pub fn load_dialogues(path: &Path, schema: &Schema, history_budget: usize) -> Result<DialogueLoad> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let dialogues = raw
        .as_array()
        .ok_or_else(|| Error::format(path, "top level is not an array of dialogues"))?;

    let mut examples = Vec::new();
    let mut skipped = 0usize;
    for (di, dlg) in dialogues.iter().enumerate() {
        let dialogue_id = dlg
            .get("dialogue_id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| {
                Error::format(path, format!("dialogue {di}: missing field 'dialogue_id'"))
            })?
            .to_string();
        let services: Vec<&str> = dlg
            .get("services")
            .and_then(|v| v.as_array())
            .map(|a| a.iter().filter_map(|s| s.as_str()).collect())
            .unwrap_or_default();
        if services.len() != 1 {
            log::warn!(
                "skipping dialogue {dialogue_id}: spans {} services",
                services.len()
            );
            skipped += 1;
            continue;
        }
        let service = services[0].to_string();
        let slot_set = schema.service_slots(&service)?;

        let turns = dlg
            .get("turns")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::format(path, format!("dialogue {di}: missing field 'turns'")))?;

        let mut history: Vec<(Speaker, String)> = Vec::new();
        let mut user_turns = 0usize;
        for (ti, turn) in turns.iter().enumerate() {
            let speaker_raw = turn
                .get("speaker")
                .and_then(|v| v.as_str())
                .ok_or_else(|| {
                    Error::format(path, format!("dialogue {di} turn {ti}: missing 'speaker'"))
                })?;
            let speaker = match speaker_raw.to_ascii_uppercase().as_str() {
                "USER" => Speaker::User,
                "SYSTEM" => Speaker::System,
                other => {
                    return Err(Error::format(
                        path,
                        format!("dialogue {di} turn {ti}: unknown speaker '{other}'"),
                    ))
                }
            };
            let utterance = turn
                .get("utterance")
                .and_then(|v| v.as_str())
                .unwrap_or("")
                .to_string();
            history.push((speaker, utterance));

            if speaker != Speaker::User {
                continue;
            }

            // Cumulative state from this turn's frame for the service.
            let mut assigned: BTreeMap<String, String> = BTreeMap::new();
            if let Some(frames) = turn.get("frames").and_then(|v| v.as_array()) {
                for frame in frames {
                    let fsvc = frame.get("service").and_then(|v| v.as_str());
                    if fsvc.is_some() && fsvc != Some(service.as_str()) {
                        continue;
                    }
                    if let Some(values) = frame
                        .get("state")
                        .and_then(|s| s.get("slot_values"))
                        .and_then(|v| v.as_object())
                    {
                        for (slot, vals) in values {
                            if schema.global_index(&service, slot).is_none() {
                                return Err(Error::Reference(format!(
                                    "slot '{slot}' of service '{service}' in dialogue {dialogue_id}"
                                )));
                            }
                            let value = vals
                                .as_array()
                                .and_then(|a| a.first())
                                .and_then(|v| v.as_str())
                                .unwrap_or("")
                                .to_string();
                            assigned.insert(slot.clone(), value);
                        }
                    }
                }
            }

            let mut gold_state = BTreeMap::new();
            let mut active_slots = BTreeSet::new();
            for (gidx, slot) in &slot_set {
                match assigned.get(&slot.name) {
                    Some(v) if !v.is_empty() && v != "none" => {
                        gold_state.insert(slot.name.clone(), v.clone());
                        active_slots.insert(*gidx);
                    }
                    _ => {
                        gold_state.insert(slot.name.clone(), "none".to_string());
                    }
                }
            }

            examples.push(DialogueExample {
                dialogue_id: dialogue_id.clone(),
                service: service.clone(),
                turn_index: user_turns,
                history: truncate_history(&history, history_budget),
                gold_state,
                active_slots,
            });
            user_turns += 1;
        }
    }
    Ok(DialogueLoad {
        examples,
        skipped_multi_service: skipped,
    })
}
