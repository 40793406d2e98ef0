//! Propagation layers: spectral graph convolution over the
//! renormalized adjacency, and masked neighborhood attention.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::{NodeId, Tape};
use ndarray::{ArrayD, IxDyn};

/// One graph convolution: σ(Â · H · W), with σ = ReLU when `activate`
/// and the identity otherwise.
pub fn gcn_layer<S: Scalar>(
    tape: &mut Tape<S>,
    norm_adj: NodeId,
    features: NodeId,
    weight: NodeId,
    activate: bool,
) -> Result<NodeId> {
    let hw = tape.matmul(features, weight)?;
    let propagated = tape.matmul(norm_adj, hw)?;
    Ok(if activate {
        tape.relu(propagated)
    } else {
        propagated
    })
}

pub struct GatLayerOut {
    pub features: NodeId,
    /// One n×n attention matrix per head; each row sums to 1 over the
    /// closed neighborhood and is 0 elsewhere.
    pub attention: Vec<NodeId>,
}

fn leaky_relu<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> Result<NodeId> {
    let low = tape.scale(x, S::from_f64(0.2));
    let pos = tape.relu(x);
    let high = tape.scale(pos, S::from_f64(0.8));
    tape.add(low, high)
}

/// One attention layer over closed neighborhoods (self-loops always
/// included). Scores outside the neighborhood are pushed to -1e30 so
/// their softmax weight underflows to exactly zero.
pub fn gat_layer<S: Scalar>(
    tape: &mut Tape<S>,
    adjacency: NodeId,
    features: NodeId,
    weight: NodeId,
    attn_src: NodeId,
    attn_dst: NodeId,
    heads: usize,
    activate: bool,
) -> Result<GatLayerOut> {
    let adj = tape.value(adjacency);
    let n = match adj.shape() {
        [r, c] if r == c => *r,
        other => {
            return Err(Error::shape(
                "gat_layer",
                format!("adjacency shape {other:?} not square"),
            ))
        }
    };
    let hidden = tape.value(weight).shape()[1];
    if heads == 0 || hidden % heads != 0 {
        return Err(Error::shape(
            "gat_layer",
            format!("{hidden} outputs not divisible by {heads} heads"),
        ));
    }
    let head_dim = hidden / heads;

    let mask = tape.constant(ArrayD::from_shape_fn(IxDyn(&[n, n]), |ix| {
        if ix[0] == ix[1] || adj[[ix[0], ix[1]]] > S::zero() {
            S::zero()
        } else {
            S::from_f64(-1e30)
        }
    }));
    let ones_row = tape.constant(ArrayD::from_elem(IxDyn(&[1, n]), S::one()));
    let ones_col = tape.constant(ArrayD::from_elem(IxDyn(&[n, 1]), S::one()));

    let wh = tape.matmul(features, weight)?;
    let mut head_outputs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for k in 0..heads {
        let whk = tape.slice_cols(wh, k * head_dim, head_dim)?;
        let ak_src = tape.slice_rows(attn_src, k * head_dim, head_dim)?;
        let ak_dst = tape.slice_rows(attn_dst, k * head_dim, head_dim)?;
        let src = tape.matmul(whk, ak_src)?;
        let dst = tape.matmul(whk, ak_dst)?;
        let src_mat = tape.matmul(src, ones_row)?;
        let dst_row = tape.transpose(dst)?;
        let dst_mat = tape.matmul(ones_col, dst_row)?;
        let scores = tape.add(src_mat, dst_mat)?;
        let scores = leaky_relu(tape, scores)?;
        let masked = tape.add(scores, mask)?;
        let alpha = tape.softmax_rows(masked)?;
        attention.push(alpha);
        let mixed = tape.matmul(alpha, whk)?;
        // Stash transposed so heads concatenate along the feature axis.
        head_outputs.push(tape.transpose(mixed)?);
    }
    let stacked = tape.concat_rows(&head_outputs)?;
    let combined = tape.transpose(stacked)?;
    let features = if activate {
        tape.relu(combined)
    } else {
        combined
    };
    Ok(GatLayerOut {
        features,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::init_normal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[n, n]), |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 })
    }

    #[test]
    fn gcn_identity_adjacency_and_weight_passes_features_through() {
        let mut tape = Tape::<f64>::new();
        let norm = tape.constant(eye(3));
        let w = tape.constant(eye(4));
        let x = ArrayD::from_shape_fn(IxDyn(&[3, 4]), |ix| (ix[0] * 4 + ix[1]) as f64 - 5.0);
        let xn = tape.constant(x.clone());
        let out = gcn_layer(&mut tape, norm, xn, w, false).unwrap();
        assert_eq!(*tape.value(out), x);
    }

    #[test]
    fn gcn_two_node_complete_graph_averages_identity_features() {
        let mut tape = Tape::<f64>::new();
        let norm = tape.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 0.5));
        let w = tape.constant(eye(2));
        let x = tape.constant(eye(2));
        let out = gcn_layer(&mut tape, norm, x, w, false).unwrap();
        let v = tape.value(out);
        for i in 0..2 {
            for j in 0..2 {
                assert!((v[[i, j]] - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gcn_is_permutation_equivariant() {
        // 4-node path graph, permuted by reversal.
        let mut adj = ArrayD::zeros(IxDyn(&[4, 4]));
        for (u, v) in [(0, 1), (1, 2), (2, 3)] {
            adj[[u, v]] = 1.0;
            adj[[v, u]] = 1.0;
        }
        let perm = [3usize, 2, 1, 0];
        let padj = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |ix| {
            adj[[perm[ix[0]], perm[ix[1]]]]
        });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = init_normal::<f64, _>(&mut rng, &[4, 3], 1.0);
        let px = ArrayD::from_shape_fn(IxDyn(&[4, 3]), |ix| x[[perm[ix[0]], ix[1]]]);
        let w = init_normal::<f64, _>(&mut rng, &[3, 3], 1.0);

        let run = |a: ArrayD<f64>, x: ArrayD<f64>| {
            let mut tape = Tape::<f64>::new();
            let an = tape.constant(a);
            let norm = crate::encoder::normalize_on_tape(&mut tape, an, 4).unwrap();
            let xn = tape.constant(x);
            let wn = tape.constant(w.clone());
            let out = gcn_layer(&mut tape, norm, xn, wn, true).unwrap();
            (*tape.value(out)).clone()
        };
        let base = run(adj, x);
        let permuted = run(padj, px);
        for i in 0..4 {
            for j in 0..3 {
                assert!(
                    (permuted[[i, j]] - base[[perm[i], j]]).abs() < 1e-6,
                    "node {i} feature {j}"
                );
            }
        }
    }

    #[test]
    fn gat_single_node_reduces_to_projected_features() {
        let mut tape = Tape::<f64>::new();
        let adj = tape.constant(ArrayD::zeros(IxDyn(&[1, 1])));
        let x = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.4, -1.2]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w_arr = init_normal::<f64, _>(&mut rng, &[2, 2], 1.0);
        let w = tape.constant(w_arr.clone());
        let a_src = tape.constant(init_normal::<f64, _>(&mut rng, &[2, 1], 1.0));
        let a_dst = tape.constant(init_normal::<f64, _>(&mut rng, &[2, 1], 1.0));
        let out = gat_layer(&mut tape, adj, x, w, a_src, a_dst, 1, false).unwrap();
        let got = tape.value(out.features);
        let want = [
            0.4 * w_arr[[0, 0]] - 1.2 * w_arr[[1, 0]],
            0.4 * w_arr[[0, 1]] - 1.2 * w_arr[[1, 1]],
        ];
        for j in 0..2 {
            assert!((got[[0, j]] - want[j]).abs() < 1e-12);
        }
        let alpha = tape.value(out.attention[0]);
        assert!((alpha[[0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gat_identical_features_give_uniform_neighborhood_attention() {
        // Triangle plus a pendant node: closed neighborhoods have sizes
        // 3 or 4 depending on the node.
        let mut adj = ArrayD::zeros(IxDyn(&[4, 4]));
        for (u, v) in [(0, 1), (0, 2), (1, 2), (2, 3)] {
            adj[[u, v]] = 1.0;
            adj[[v, u]] = 1.0;
        }
        let mut tape = Tape::<f64>::new();
        let an = tape.constant(adj.clone());
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[4, 3]), 0.8));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = tape.constant(init_normal::<f64, _>(&mut rng, &[3, 3], 1.0));
        let a_src = tape.constant(init_normal::<f64, _>(&mut rng, &[3, 1], 1.0));
        let a_dst = tape.constant(init_normal::<f64, _>(&mut rng, &[3, 1], 1.0));
        let out = gat_layer(&mut tape, an, x, w, a_src, a_dst, 1, true).unwrap();
        let alpha = tape.value(out.attention[0]);
        for i in 0..4 {
            let neigh: Vec<usize> = (0..4)
                .filter(|&j| j == i || adj[[i, j]] > 0.0)
                .collect();
            let uniform = 1.0 / neigh.len() as f64;
            for j in 0..4 {
                let expect = if neigh.contains(&j) { uniform } else { 0.0 };
                assert!(
                    (alpha[[i, j]] - expect).abs() < 1e-12,
                    "alpha[{i},{j}] = {}",
                    alpha[[i, j]]
                );
            }
        }
    }

    #[test]
    fn gat_attention_rows_sum_to_one_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..10 {
            let n = 2 + (trial % 5);
            let mut adj = ArrayD::zeros(IxDyn(&[n, n]));
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.gen_bool(0.4) {
                        adj[[u, v]] = 1.0;
                        adj[[v, u]] = 1.0;
                    }
                }
            }
            let mut tape = Tape::<f64>::new();
            let an = tape.constant(adj);
            let x = tape.constant(init_normal::<f64, _>(&mut rng, &[n, 4], 1.0));
            let w = tape.constant(init_normal::<f64, _>(&mut rng, &[4, 4], 1.0));
            let a_src = tape.constant(init_normal::<f64, _>(&mut rng, &[4, 1], 1.0));
            let a_dst = tape.constant(init_normal::<f64, _>(&mut rng, &[4, 1], 1.0));
            let out = gat_layer(&mut tape, an, x, w, a_src, a_dst, 2, true).unwrap();
            for head in &out.attention {
                let alpha = tape.value(*head);
                for i in 0..n {
                    let total: f64 = (0..n).map(|j| alpha[[i, j]]).sum();
                    assert!((total - 1.0).abs() < 1e-6, "row {i} sums to {total}");
                }
            }
        }
    }

    #[test]
    fn gat_head_count_must_divide_width() {
        let mut tape = Tape::<f64>::new();
        let adj = tape.constant(ArrayD::zeros(IxDyn(&[2, 2])));
        let x = tape.constant(ArrayD::zeros(IxDyn(&[2, 3])));
        let w = tape.constant(ArrayD::zeros(IxDyn(&[3, 3])));
        let a = tape.constant(ArrayD::zeros(IxDyn(&[3, 1])));
        assert!(gat_layer(&mut tape, adj, x, w, a, a, 2, false).is_err());
    }
}
