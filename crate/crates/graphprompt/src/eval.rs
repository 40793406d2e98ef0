//! Scoring of decoded outputs: state parsing, joint and per-slot goal
//! accuracy, and domain-level aggregation.

use crate::data::schema::Schema;
use crate::data::vocab::{Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::prompt::QuerySpec;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Lowercase and collapse runs of whitespace; the only normalization
/// applied before comparing slot values.
pub fn normalize_value(s: &str) -> String {
    s.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// One scored turn: predicted and gold states over the service's
/// slots, with "none" standing in for unassigned slots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub service: String,
    pub predicted: BTreeMap<String, String>,
    pub gold: BTreeMap<String, String>,
}

/// Split a decoded token sequence at sentinel tokens and read off one
/// value per query slot. Malformed output never fails: missing or
/// empty segments become "none", duplicate sentinels keep their first
/// value, sentinels outside the query's range are skipped.
pub fn parse_decoded(
    tokens: &[usize],
    query: &QuerySpec,
    schema: &Schema,
    vocab: &Vocabulary,
) -> Result<BTreeMap<String, String>> {
    let sentinels = vocab.sentinel_range();
    let mut spans: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut current: Option<usize> = None;
    for &tok in tokens {
        if tok == EOS {
            break;
        }
        if sentinels.contains(&tok) {
            let j = tok - sentinels.start;
            if spans.contains_key(&j) {
                current = None;
            } else {
                spans.insert(j, Vec::new());
                current = Some(j);
            }
        } else if let Some(j) = current {
            spans.get_mut(&j).expect("open span").push(tok);
        }
    }
    let mut state = BTreeMap::new();
    for (j, &global) in query.slot_indices.iter().enumerate() {
        let (_, slot) = schema
            .slot_by_index(global)
            .ok_or_else(|| Error::Reference(format!("slot index {global} out of range")))?;
        let value = spans
            .get(&j)
            .map(|toks| vocab.detokenize(toks))
            .filter(|v| !v.is_empty())
            .unwrap_or_else(|| "none".to_string());
        state.insert(slot.name.clone(), value);
    }
    Ok(state)
}

fn turn_is_exact(turn: &TurnPrediction) -> bool {
    let lookup = |map: &BTreeMap<String, String>, slot: &str| {
        map.get(slot).map(|v| normalize_value(v)).unwrap_or_else(|| "none".to_string())
    };
    turn.gold
        .keys()
        .chain(turn.predicted.keys())
        .all(|slot| lookup(&turn.predicted, slot) == lookup(&turn.gold, slot))
}

/// Fraction of turns whose predicted state matches the gold state on
/// every slot after normalization.
pub fn joint_goal_accuracy(preds: &[TurnPrediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Argument(
            "joint goal accuracy over zero turns".to_string(),
        ));
    }
    let exact = preds.iter().filter(|t| turn_is_exact(t)).count();
    Ok(exact as f64 / preds.len() as f64)
}

/// Fraction of gold-active slots (gold value not "none") predicted
/// with the correct value; inactive slots are excluded entirely.
pub fn average_goal_accuracy(preds: &[TurnPrediction]) -> Result<f64> {
    let mut active = 0usize;
    let mut correct = 0usize;
    for turn in preds {
        for (slot, gold) in &turn.gold {
            let gold = normalize_value(gold);
            if gold == "none" {
                continue;
            }
            active += 1;
            let predicted = turn
                .predicted
                .get(slot)
                .map(|v| normalize_value(v))
                .unwrap_or_else(|| "none".to_string());
            if predicted == gold {
                correct += 1;
            }
        }
    }
    if active == 0 {
        return Err(Error::UndefinedMetric(
            "no gold-active slots in the input".to_string(),
        ));
    }
    Ok(correct as f64 / active as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub jga: f64,
    /// Undefined when the domain has no gold-active slots.
    pub aga: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_domain: BTreeMap<String, DomainMetrics>,
    /// JGA over all turns pooled.
    pub overall_jga: f64,
    /// Unweighted mean of the per-domain JGA values.
    pub avg_jga: f64,
    /// Per-slot value accuracy keyed "service.slot".
    pub per_slot_accuracy: BTreeMap<String, f64>,
}

/// Aggregate turn scores by domain. `domain_map` assigns every service
/// to a domain; a service without an entry is a reference error.
pub fn report(
    preds: &[TurnPrediction],
    domain_map: &BTreeMap<String, String>,
) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Argument("metrics report over zero turns".to_string()));
    }
    let mut by_domain: BTreeMap<&str, Vec<&TurnPrediction>> = BTreeMap::new();
    for turn in preds {
        let domain = domain_map.get(&turn.service).ok_or_else(|| {
            Error::Reference(format!("service {} has no domain", turn.service))
        })?;
        by_domain.entry(domain).or_default().push(turn);
    }
    let mut per_domain = BTreeMap::new();
    let mut jga_sum = 0.0;
    for (domain, turns) in &by_domain {
        let owned: Vec<TurnPrediction> = turns.iter().map(|t| (*t).clone()).collect();
        let jga = joint_goal_accuracy(&owned)?;
        let aga = average_goal_accuracy(&owned).ok();
        jga_sum += jga;
        per_domain.insert(
            domain.to_string(),
            DomainMetrics {
                jga,
                aga,
                count: owned.len(),
            },
        );
    }
    let mut slot_hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for turn in preds {
        for (slot, gold) in &turn.gold {
            let key = format!("{}.{}", turn.service, slot);
            let entry = slot_hits.entry(key).or_insert((0, 0));
            entry.1 += 1;
            let predicted = turn
                .predicted
                .get(slot)
                .map(|v| normalize_value(v))
                .unwrap_or_else(|| "none".to_string());
            if predicted == normalize_value(gold) {
                entry.0 += 1;
            }
        }
    }
    Ok(MetricsReport {
        per_domain,
        overall_jga: joint_goal_accuracy(preds)?,
        avg_jga: jga_sum / by_domain.len() as f64,
        per_slot_accuracy: slot_hits
            .into_iter()
            .map(|(k, (hit, total))| (k, hit as f64 / total as f64))
            .collect(),
    })
}

impl MetricsReport {
    /// Per-domain rows then a summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,count,jga,aga\n");
        for (domain, m) in &self.per_domain {
            let aga = m.aga.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!("{domain},{},{:.6},{aga}\n", m.count, m.jga));
        }
        let total: usize = self.per_domain.values().map(|m| m.count).sum();
        out.push_str(&format!(
            "OVERALL,{total},{:.6},avg_jga={:.6}\n",
            self.overall_jga, self.avg_jga
        ));
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:>7} {:>9} {:>9}", "domain", "count", "jga", "aga")?;
        for (domain, m) in &self.per_domain {
            let aga = m
                .aga
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".to_string());
            writeln!(f, "{domain:<20} {:>7} {:>9.4} {aga:>9}", m.count, m.jga)?;
        }
        writeln!(
            f,
            "overall jga {:.4}   avg jga {:.4}",
            self.overall_jga, self.avg_jga
        )
    }
}
