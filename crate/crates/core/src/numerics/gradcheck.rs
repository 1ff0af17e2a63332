//! Central-difference gradient checking.
//!
//! The oracle is independent of the backward pass: it re-evaluates the loss
//! with perturbed parameters and never touches recorded gradients.

use super::graph::{Graph, NodeId};
use super::tensor::ParamStore;
use super::NumericsError;
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Relative error with a small floor so zero-gradient entries compare on an
/// absolute scale (~1e-5) instead of dividing by zero.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Compares autodiff gradients of `build_loss` against central finite
/// differences with step [`Real::GRAD_CHECK_STEP`] (1e-3 in f32, 1e-5 in f64).
///
/// `build_loss` receives a fresh graph plus one leaf per parameter (store
/// order) and returns the scalar loss node.
pub fn finite_diff_check<F: Real>(
    params: &ParamStore<F>,
    mut build_loss: impl FnMut(&mut Graph<F>, &[NodeId]) -> Result<NodeId, NumericsError>,
) -> Result<GradCheckReport, NumericsError> {
    let eval = |store: &ParamStore<F>,
                build: &mut dyn FnMut(&mut Graph<F>, &[NodeId]) -> Result<NodeId, NumericsError>,
                want_grads: bool|
     -> Result<(F, Option<Vec<Vec<F>>>), NumericsError> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = store.iter().map(|(id, _)| g.param(store, id)).collect();
        let loss = build(&mut g, &leaves)?;
        let value = g.scalar_value(loss);
        if !want_grads {
            return Ok((value, None));
        }
        g.backward(loss)?;
        let grads = leaves
            .iter()
            .zip(store.iter())
            .map(|(&leaf, (_, p))| {
                g.grad(leaf)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![F::zero(); p.tensor.numel()])
            })
            .collect();
        Ok((value, Some(grads)))
    };

    let (_, grads) = eval(params, &mut build_loss, true)?;
    let grads = grads.expect("grads requested");

    let h = F::GRAD_CHECK_STEP;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut work = params.clone();
    for (pi, (id, param)) in params.iter().enumerate() {
        for ei in 0..param.tensor.numel() {
            let orig = param.tensor.data()[ei];
            work.get_mut(id).tensor.data_mut()[ei] = orig + h;
            let (up, _) = eval(&work, &mut build_loss, false)?;
            work.get_mut(id).tensor.data_mut()[ei] = orig - h;
            let (down, _) = eval(&work, &mut build_loss, false)?;
            work.get_mut(id).tensor.data_mut()[ei] = orig;
            let fd = (up.as_f64() - down.as_f64()) / (2.0 * h.as_f64());
            let ad = grads[pi][ei].as_f64();
            let err = rel_err(ad, fd);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = param.name.clone();
                report.worst_index = ei;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::Rng;

    fn randn_store<F: Real>(seed: u64, entries: &[(&str, Vec<usize>)]) -> ParamStore<F> {
        let mut rng = crate::rng::stream(seed, "gradcheck");
        let mut store = ParamStore::new();
        for (name, shape) in entries {
            let numel: usize = shape.iter().product();
            let data: Vec<F> = (0..numel)
                .map(|_| F::of_f64(rng.gen_range(-1.0..1.0)))
                .collect();
            store.add(*name, Tensor::from_vec(shape.clone(), data).unwrap());
        }
        store
    }

    /// Zero-mean probe weights keep the loss magnitude small (so f32 forward
    /// rounding does not drown the finite difference) while gradients stay O(1).
    fn probe<F: Real>(n: usize, seed: u64) -> Vec<F> {
        let mut rng = crate::rng::stream(seed, "probe");
        (0..n)
            .map(|i| {
                let w = rng.gen_range(0.5..1.5);
                F::of_f64(if i % 2 == 0 { w } else { -w })
            })
            .collect()
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let store = randn_store::<f32>(1, &[("a", vec![5, 4]), ("b", vec![4, 3])]);
        let w = probe::<f32>(15, 2);
        let report = finite_diff_check(&store, |g, leaves| {
            let prod = g.matmul(leaves[0], leaves[1])?;
            let flat = g.reshape(prod, vec![1, 15])?;
            let wn = g.constant(vec![15, 1], w.clone())?;
            let s = g.matmul(flat, wn)?;
            g.reshape(s, vec![])
        })
        .unwrap();
        assert!(report.passes(1e-3), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn layernorm_gradients_match_finite_differences_f64_tight() {
        let store = randn_store::<f64>(2, &[("x", vec![3, 6]), ("g", vec![6]), ("b", vec![6])]);
        let w = probe::<f64>(18, 3);
        let report = finite_diff_check(&store, |g, leaves| {
            let y = g.layernorm(leaves[0], leaves[1], leaves[2], 1e-6)?;
            let flat = g.reshape(y, vec![1, 18])?;
            let wn = g.constant(vec![18, 1], w.clone())?;
            let s = g.matmul(flat, wn)?;
            g.reshape(s, vec![])
        })
        .unwrap();
        // f64 test mode: much tighter than the 1e-3 f32 budget
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err);
    }
}
