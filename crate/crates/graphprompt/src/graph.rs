//! Slot-relation graph over the schema: two slots are connected iff
//! they belong to the same service (optionally, the same domain), plus
//! symmetric renormalization and per-example active-slot masking.

use crate::data::schema::{domain_of, Schema};
use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Which slots count as related: slots of one service, or slots of any
/// service sharing a domain name (Hotels_1 and Hotels_2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeScope {
    #[default]
    Service,
    Domain,
}

/// Undirected 0/1 graph on the m global slots, without self-loops.
#[derive(Debug, Clone)]
pub struct SchemaGraph {
    adjacency: Array2<u8>,
    group_of: Vec<usize>,
}

impl SchemaGraph {
    pub fn num_nodes(&self) -> usize {
        self.group_of.len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[[u, v]] != 0
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        let mut count = 0usize;
        for u in 0..self.num_nodes() {
            for v in (u + 1)..self.num_nodes() {
                count += self.adjacency[[u, v]] as usize;
            }
        }
        count
    }

    /// Adjacency as a dense m×m tensor of 0/1 values.
    pub fn adjacency<S: Scalar>(&self) -> ArrayD<S> {
        let m = self.num_nodes();
        ArrayD::from_shape_fn(IxDyn(&[m, m]), |ix| {
            S::from_f64(self.adjacency[[ix[0], ix[1]]] as f64)
        })
    }

    /// Edges as (u, v) pairs with u < v, sorted.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in 0..self.num_nodes() {
            for v in (u + 1)..self.num_nodes() {
                if self.has_edge(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Text export, one "u v" pair per line.
    pub fn export_edge_list(&self) -> String {
        let mut s = String::new();
        for (u, v) in self.edge_list() {
            s.push_str(&format!("{u} {v}\n"));
        }
        s
    }
}

/// Build the slot graph with service-level edges.
pub fn build_graph(schema: &Schema) -> SchemaGraph {
    build_graph_scoped(schema, EdgeScope::Service)
}

pub fn build_graph_scoped(schema: &Schema, scope: EdgeScope) -> SchemaGraph {
    let group_of: Vec<usize> = match scope {
        EdgeScope::Service => schema.service_of_slot(),
        EdgeScope::Domain => {
            // Map each service to a domain index, then each slot to it.
            let mut domains: Vec<String> = Vec::new();
            let mut service_domain = Vec::with_capacity(schema.num_services());
            for svc in &schema.services {
                let d = domain_of(&svc.name).to_string();
                let idx = match domains.iter().position(|x| *x == d) {
                    Some(i) => i,
                    None => {
                        domains.push(d);
                        domains.len() - 1
                    }
                };
                service_domain.push(idx);
            }
            schema
                .service_of_slot()
                .into_iter()
                .map(|s| service_domain[s])
                .collect()
        }
    };
    let m = group_of.len();
    let mut adjacency = Array2::zeros((m, m));
    for u in 0..m {
        for v in 0..m {
            if u != v && group_of[u] == group_of[v] {
                adjacency[[u, v]] = 1;
            }
        }
    }
    SchemaGraph {
        adjacency,
        group_of,
    }
}

/// Symmetric renormalization D̂^{-1/2}(A+I)D̂^{-1/2}, where D̂ is the
/// degree matrix of A+I. Isolated nodes reduce to an exact 1 on the
/// diagonal.
pub fn normalize_adjacency<S: Scalar>(graph: &SchemaGraph) -> ArrayD<S> {
    let m = graph.num_nodes();
    let a: ArrayD<S> = graph.adjacency();
    normalize_dense(&a, m)
}

/// Same renormalization on an arbitrary nonnegative dense adjacency
/// (used for pooled coarse graphs).
pub fn normalize_dense<S: Scalar>(adjacency: &ArrayD<S>, m: usize) -> ArrayD<S> {
    let mut out = ArrayD::zeros(IxDyn(&[m, m]));
    let mut inv_sqrt_deg = vec![S::zero(); m];
    for i in 0..m {
        let mut deg = S::one();
        for j in 0..m {
            deg = deg + adjacency[[i, j]];
        }
        inv_sqrt_deg[i] = deg.sqrt().recip();
    }
    for i in 0..m {
        for j in 0..m {
            let base = if i == j {
                adjacency[[i, j]] + S::one()
            } else {
                adjacency[[i, j]]
            };
            out[[i, j]] = inv_sqrt_deg[i] * base * inv_sqrt_deg[j];
        }
    }
    out
}

/// Node features with inactive rows zeroed (the per-example mask).
#[derive(Debug, Clone)]
pub struct MaskedNodeFeatures<S: Scalar> {
    pub features: ArrayD<S>,
    pub active: Vec<bool>,
}

/// Zero out the rows of inactive slots; the input is left untouched.
pub fn apply_active_mask<S: Scalar>(
    features: &ArrayD<S>,
    active: &[bool],
) -> Result<MaskedNodeFeatures<S>> {
    if features.ndim() != 2 || features.shape()[0] != active.len() {
        return Err(Error::shape(
            "apply_active_mask",
            format!(
                "features {:?} vs {} mask entries",
                features.shape(),
                active.len()
            ),
        ));
    }
    let mut out = features.clone();
    for (i, &keep) in active.iter().enumerate() {
        if !keep {
            for x in out.index_axis_mut(ndarray::Axis(0), i).iter_mut() {
                *x = S::zero();
            }
        }
    }
    Ok(MaskedNodeFeatures {
        features: out,
        active: active.to_vec(),
    })
}
