//! Service/slot schema in SGD layout, with global slot indexing.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDef {
    pub name: String,
    pub description: String,
    pub is_categorical: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub possible_values: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Service {
    pub name: String,
    pub description: String,
    pub slots: Vec<SlotDef>,
}

/// Full schema: services in file order, slots in declaration order,
/// with a bijection between (service, slot) pairs and `[0, m)`.
#[derive(Debug, Clone)]
pub struct Schema {
    pub services: Vec<Service>,
    slot_index: BTreeMap<(String, String), usize>,
}

// The index is derived data with non-string keys; (de)serialize the
// service list only and rebuild the index.
impl Serialize for Schema {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.services.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Schema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let services = Vec::<Service>::deserialize(d)?;
        Schema::from_services(services).map_err(serde::de::Error::custom)
    }
}

impl Schema {
    pub fn from_services(services: Vec<Service>) -> Result<Self> {
        let mut slot_index = BTreeMap::new();
        let mut next = 0usize;
        for svc in &services {
            for slot in &svc.slots {
                if slot.description.trim().is_empty() {
                    return Err(Error::Spec(format!(
                        "slot '{}' in service '{}' has an empty description",
                        slot.name, svc.name
                    )));
                }
                if slot.is_categorical
                    && slot.possible_values.as_ref().map_or(true, |v| v.is_empty())
                {
                    return Err(Error::Spec(format!(
                        "categorical slot '{}' in service '{}' lists no possible values",
                        slot.name, svc.name
                    )));
                }
                let key = (svc.name.clone(), slot.name.clone());
                if slot_index.insert(key, next).is_some() {
                    return Err(Error::DuplicateDefinition {
                        service: svc.name.clone(),
                        slot: slot.name.clone(),
                    });
                }
                next += 1;
            }
        }
        Ok(Schema {
            services,
            slot_index,
        })
    }

    /// Total number of slots across all services.
    pub fn num_slots(&self) -> usize {
        self.slot_index.len()
    }

    pub fn num_services(&self) -> usize {
        self.services.len()
    }

    pub fn global_index(&self, service: &str, slot: &str) -> Option<usize> {
        self.slot_index
            .get(&(service.to_string(), slot.to_string()))
            .copied()
    }

    pub fn service(&self, name: &str) -> Option<&Service> {
        self.services.iter().find(|s| s.name == name)
    }

    /// Slots of one service with their global indices, in declaration
    /// order.
    pub fn service_slots(&self, name: &str) -> Result<Vec<(usize, &SlotDef)>> {
        let svc = self
            .service(name)
            .ok_or_else(|| Error::Reference(format!("service '{name}'")))?;
        Ok(svc
            .slots
            .iter()
            .map(|slot| {
                let idx = self.slot_index[&(svc.name.clone(), slot.name.clone())];
                (idx, slot)
            })
            .collect())
    }

    /// (service name, slot def) for a global index.
    pub fn slot_by_index(&self, index: usize) -> Option<(&str, &SlotDef)> {
        let mut next = 0usize;
        for svc in &self.services {
            for slot in &svc.slots {
                if next == index {
                    return Some((svc.name.as_str(), slot));
                }
                next += 1;
            }
        }
        None
    }

    /// Service owning each global slot index, as a flat lookup table.
    pub fn service_of_slot(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_slots());
        for (si, svc) in self.services.iter().enumerate() {
            out.extend(std::iter::repeat(si).take(svc.slots.len()));
        }
        out
    }

    /// Largest slot count over services; bounds the sentinel range.
    pub fn max_slots_per_service(&self) -> usize {
        self.services.iter().map(|s| s.slots.len()).max().unwrap_or(0)
    }
}

/// Domain of a service: the name with its trailing numeric suffix
/// stripped (Flights_1 -> Flights). Services without a suffix map to
/// themselves.
pub fn domain_of(service: &str) -> &str {
    if let Some(pos) = service.rfind('_') {
        let suffix = &service[pos + 1..];
        if !suffix.is_empty() && suffix.chars().all(|c| c.is_ascii_digit()) {
            return &service[..pos];
        }
    }
    service
}

pub fn load_schema(path: &Path) -> Result<Schema> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let arr = raw
        .as_array()
        .ok_or_else(|| Error::format(path, "top level is not an array of services"))?;

    let mut services = Vec::with_capacity(arr.len());
    for (i, svc) in arr.iter().enumerate() {
        let name = req_str(svc, "service_name", path, i)?;
        let description = req_str(svc, "description", path, i)?;
        let slots_raw = svc
            .get("slots")
            .and_then(|s| s.as_array())
            .ok_or_else(|| {
                Error::format(path, format!("service record {i}: missing field 'slots'"))
            })?;
        let mut slots = Vec::with_capacity(slots_raw.len());
        for slot in slots_raw {
            let sname = req_str(slot, "name", path, i)?;
            let sdesc = req_str(slot, "description", path, i)?;
            let is_categorical = slot
                .get("is_categorical")
                .and_then(|v| v.as_bool())
                .unwrap_or(false);
            let possible_values = slot.get("possible_values").and_then(|v| v.as_array()).map(
                |vals| {
                    vals.iter()
                        .filter_map(|v| v.as_str().map(str::to_string))
                        .collect::<Vec<_>>()
                },
            );
            slots.push(SlotDef {
                name: sname,
                description: sdesc,
                is_categorical,
                possible_values,
            });
        }
        services.push(Service {
            name,
            description,
            slots,
        });
    }
    Schema::from_services(services)
}

fn req_str(obj: &serde_json::Value, field: &str, path: &Path, record: usize) -> Result<String> {
    obj.get(field)
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| {
            Error::format(
                path,
                format!("service record {record}: missing field '{field}'"),
            )
        })
}
