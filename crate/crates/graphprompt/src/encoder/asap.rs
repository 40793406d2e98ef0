//! Cluster pooling: every node proposes its closed 1-hop neighborhood
//! as a candidate cluster, members are mixed by attention against a
//! max-pooled master query, clusters are scored by a local-extremum
//! convolution, and the top ⌈kN⌉ survive with coarsened connectivity
//! SᵀAS.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::{NodeId, Tape};
use std::rc::Rc;

pub struct PoolParams {
    /// 2h×h mixer for [member ‖ master] pairs.
    pub att_w: NodeId,
    /// h×1 scoring vector applied after tanh.
    pub att_v: NodeId,
    pub le_w1: NodeId,
    pub le_w2: NodeId,
    pub le_w3: NodeId,
}

pub struct PooledLevel {
    /// Fitness-scaled cluster representations, one row per kept cluster.
    pub features: NodeId,
    /// Coarsened adjacency SᵀAS over the kept clusters.
    pub adjacency: NodeId,
    /// n×n' soft assignment; column c holds the membership weights of
    /// kept cluster c and sums to 1.
    pub assignment: NodeId,
    pub num_nodes: usize,
    /// Indices of the kept cluster centers, ascending.
    pub selected: Vec<usize>,
    /// n×1 fitness of every candidate cluster.
    pub fitness: NodeId,
}

/// Pool a graph level down to ⌈ratio·n⌉ clusters.
pub fn asap_pool<S: Scalar>(
    tape: &mut Tape<S>,
    features: NodeId,
    adjacency: NodeId,
    norm_adj: NodeId,
    ratio: f64,
    params: &PoolParams,
) -> Result<PooledLevel> {
    let shape = tape.value(features).shape().to_vec();
    let (n, _h) = match shape[..] {
        [n, h] => (n, h),
        _ => {
            return Err(Error::shape(
                "asap_pool",
                format!("features rank {} != 2", shape.len()),
            ))
        }
    };
    if n == 0 {
        return Err(Error::EmptyGraph("asap_pool on zero nodes".to_string()));
    }
    let adj = tape.value(adjacency);
    if adj.shape() != [n, n] {
        return Err(Error::shape(
            "asap_pool",
            format!("adjacency {:?} vs {n} nodes", adj.shape()),
        ));
    }

    // Candidate clusters: closed 1-hop neighborhoods, read from the
    // structural sparsity pattern of the current adjacency.
    let clusters: Vec<Rc<Vec<usize>>> = (0..n)
        .map(|i| {
            let members: Vec<usize> = (0..n)
                .filter(|&j| j == i || adj[[i, j]] > S::zero())
                .collect();
            Rc::new(members)
        })
        .collect();
    drop(adj);

    // Per-cluster attention over members against the max-pooled master.
    let mut reps = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    for members in &clusters {
        let member_feats = tape.gather_rows(features, Rc::clone(members))?;
        let master = tape.max_axis0(member_feats)?;
        let paired = tape.concat_cols_broadcast(member_feats, master)?;
        let mixed = tape.matmul(paired, params.att_w)?;
        let squashed = tape.tanh(mixed);
        let scores = tape.matmul(squashed, params.att_v)?;
        let score_row = tape.transpose(scores)?;
        let alpha_row = tape.softmax_rows(score_row)?;
        reps.push(tape.matmul(alpha_row, member_feats)?);
        alphas.push(tape.transpose(alpha_row)?);
    }
    let cluster_reps = tape.concat_rows(&reps)?;

    // Cluster fitness from a local-extremum score over Â.
    let t1 = tape.matmul(features, params.le_w1)?;
    let degrees = tape.row_sum(norm_adj)?;
    let xw2 = tape.matmul(features, params.le_w2)?;
    let t2 = tape.mul(degrees, xw2)?;
    let xw3 = tape.matmul(features, params.le_w3)?;
    let t3 = tape.matmul(norm_adj, xw3)?;
    let summed = tape.add(t1, t2)?;
    let raw = tape.sub(summed, t3)?;
    let fitness = tape.sigmoid(raw);

    // Keep the top ⌈ratio·n⌉ clusters; ties go to the lower index.
    let keep = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let phi = tape.value(fitness);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        phi[[b, 0]]
            .partial_cmp(&phi[[a, 0]])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    drop(phi);
    let mut selected = order[..keep].to_vec();
    selected.sort_unstable();

    let sel = Rc::new(selected.clone());
    let rep_sel = tape.gather_rows(cluster_reps, Rc::clone(&sel))?;
    let phi_sel = tape.gather_rows(fitness, sel)?;
    let pooled_features = tape.mul_col_broadcast(rep_sel, phi_sel)?;

    let columns: Vec<(NodeId, Rc<Vec<usize>>)> = selected
        .iter()
        .map(|&i| (alphas[i], Rc::clone(&clusters[i])))
        .collect();
    let assignment = tape.assemble_columns(n, &columns)?;
    let st = tape.transpose(assignment)?;
    let a_s = tape.matmul(adjacency, assignment)?;
    let pooled_adjacency = tape.matmul(st, a_s)?;

    Ok(PooledLevel {
        features: pooled_features,
        adjacency: pooled_adjacency,
        assignment,
        num_nodes: keep,
        selected,
        fitness,
    })
}
