//! Finite-difference verification of analytic gradients.
//!
//! The checker perturbs individual parameter coordinates, re-evaluates
//! the loss through a caller-supplied closure, and compares central
//! differences against the analytic gradient. Runs should use f64
//! parameters; f32 rounding drowns the difference quotient.

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::scalar::Scalar;
use ndarray::ArrayD;
use rand::seq::index::sample;
use rand::Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over all sampled coordinates.
    pub max_rel_err: f64,
    /// Tensor name and flat coordinate where it occurred.
    pub worst_param: String,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub fd_at_worst: f64,
    pub coords_checked: usize,
}

/// Relative error with an absolute floor, so that near-zero gradients
/// are compared on an absolute scale instead of blowing up.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare `analytic` gradients against central finite differences of
/// `eval_loss` for up to `max_coords_per_param` randomly sampled
/// coordinates of each listed tensor. The store is restored to its
/// original values before returning.
pub fn finite_difference_check<S, F, R>(
    store: &mut ParamStore<S>,
    ids: &[ParamId],
    analytic: &BTreeMap<ParamId, ArrayD<S>>,
    eps: f64,
    max_coords_per_param: usize,
    rng: &mut R,
    mut eval_loss: F,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>) -> Result<f64>,
    R: Rng,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        analytic_at_worst: 0.0,
        fd_at_worst: 0.0,
        coords_checked: 0,
    };

    for &id in ids {
        let name = store.get(id).name.clone();
        let base = (*store.value(id)).clone();
        let n = base.len();
        if n == 0 {
            continue;
        }
        let grad = analytic
            .get(&id)
            .ok_or_else(|| Error::Argument(format!("no analytic gradient for {name}")))?;
        if grad.shape() != base.shape() {
            return Err(Error::shape(
                "gradcheck",
                format!("gradient shape {:?} vs {:?} for {name}", grad.shape(), base.shape()),
            ));
        }
        let picks: Vec<usize> = if n <= max_coords_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(rng, n, max_coords_per_param).into_vec();
            v.sort_unstable();
            v
        };

        let base_slice: Vec<S> = base.iter().copied().collect();
        for &coord in &picks {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut perturbed = base.clone();
                let flat = perturbed
                    .as_slice_mut()
                    .expect("parameter tensors are contiguous");
                flat[coord] = base_slice[coord] + S::from_f64(delta);
                store.set_value(id, perturbed);
                eval_loss(store)
            };
            let plus = probe(eps)?;
            let minus = probe(-eps)?;
            store.set_value(id, base.clone());
            let fd = (plus - minus) / (2.0 * eps);
            // Index in logical order so non-standard gradient layouts
            // (e.g. transposed contributions) still line up with the
            // perturbed coordinate.
            let a = grad
                .iter()
                .nth(coord)
                .copied()
                .expect("coordinate within gradient")
                .to_f64();
            let rel = relative_error(a, fd, 1e-4);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_coord = coord;
                report.analytic_at_worst = a;
                report.fd_at_worst = fd;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::ParamGroup;
    use crate::numerics::tape::Tape;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// loss = sum(w * x)^2 with fixed x; d loss / d w = 2 sum(w x) * x.
    #[test]
    fn quadratic_loss_passes_check() {
        let x = [0.7, -1.3, 0.4];
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store
            .register(
                "w",
                ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.2, 0.5, -0.1]).unwrap(),
                ParamGroup::Graph,
                false,
            )
            .unwrap();

        let eval = |s: &ParamStore<f64>| -> Result<f64> {
            let w = s.value(id);
            let dot: f64 = w.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            Ok(dot * dot)
        };

        let w = store.value(id);
        let dot: f64 = w.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let grad =
            ArrayD::from_shape_vec(IxDyn(&[3]), x.iter().map(|&xi| 2.0 * dot * xi).collect())
                .unwrap();
        let mut analytic = BTreeMap::new();
        analytic.insert(id, grad);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = finite_difference_check(
            &mut store,
            &[id],
            &analytic,
            1e-5,
            16,
            &mut rng,
            eval,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert_eq!(report.coords_checked, 3);
        // Store restored.
        assert_eq!(store.value(id)[1], 0.5);
    }

    #[test]
    fn a_wrong_gradient_is_flagged() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store
            .register(
                "w",
                ArrayD::from_elem(IxDyn(&[2]), 1.0),
                ParamGroup::Graph,
                false,
            )
            .unwrap();
        let eval = |s: &ParamStore<f64>| -> Result<f64> {
            Ok(s.value(id).iter().map(|x| x * x).sum())
        };
        // Deliberately off by a factor of two.
        let mut analytic = BTreeMap::new();
        analytic.insert(id, ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report =
            finite_difference_check(&mut store, &[id], &analytic, 1e-5, 8, &mut rng, eval)
                .unwrap();
        assert!(report.max_rel_err > 0.3, "{report:?}");
    }

    /// End-to-end: analytic gradients from the tape agree with finite
    /// differences of the same composite expression.
    #[test]
    fn tape_losses_pass_the_checker() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = crate::numerics::params::init_normal(&mut rng, &[4, 3], 0.5);
        let b = crate::numerics::params::init_normal(&mut rng, &[3], 0.5);
        let wid = store.register("w", w, ParamGroup::Graph, false).unwrap();
        let bid = store.register("b", b, ParamGroup::Graph, false).unwrap();
        let x = crate::numerics::params::init_normal::<f64, _>(&mut rng, &[5, 4], 1.0);

        let build = |s: &ParamStore<f64>| -> Result<(Tape<f64>, crate::numerics::tape::NodeId)> {
            let mut tape = Tape::new();
            let bound = s.bind(&mut tape);
            let xn = tape.constant(x.clone());
            let h = tape.matmul(xn, bound.node(wid))?;
            let hb = tape.add_row(h, bound.node(bid))?;
            let a = tape.tanh(hb);
            let targets = std::rc::Rc::new(vec![Some(0), Some(2), None, Some(1), Some(2)]);
            let loss = tape.cross_entropy(a, targets)?;
            Ok((tape, loss))
        };

        let (tape, loss) = build(&store).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Binding order is deterministic, so the first two tape leaves
        // are w and b in registration order.
        let mut analytic_map = BTreeMap::new();
        for (i, id) in [wid, bid].iter().enumerate() {
            let node = crate::numerics::tape::NodeId(i);
            analytic_map.insert(*id, grads.get(node).unwrap().clone());
        }

        let eval = |s: &ParamStore<f64>| -> Result<f64> {
            let (tape, loss) = build(s)?;
            Ok(tape.scalar_value(loss).to_f64())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let report = finite_difference_check(
            &mut store,
            &[wid, bid],
            &analytic_map,
            1e-6,
            32,
            &mut rng,
            eval,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }
}
