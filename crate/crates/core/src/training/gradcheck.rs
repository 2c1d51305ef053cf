use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::trainer::{batch_loss, Objective, PairBatch};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::params::ParamStore;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so near-zero derivatives are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// A scalar function of the parameters with an analytic gradient.
pub trait Differentiable {
    fn value(&self, params: &ParamStore) -> Result<f64>;
    fn gradient(&self, params: &ParamStore) -> Result<ParamStore>;
}

impl<V, G> Differentiable for (V, G)
where
    V: Fn(&ParamStore) -> Result<f64>,
    G: Fn(&ParamStore) -> Result<ParamStore>,
{
    fn value(&self, params: &ParamStore) -> Result<f64> {
        (self.0)(params)
    }

    fn gradient(&self, params: &ParamStore) -> Result<ParamStore> {
        (self.1)(params)
    }
}

/// A batch objective of the full model as a function of its parameters.
pub struct BatchObjective<'a> {
    pub model: &'a ModelConfig,
    pub batch: PairBatch<'a>,
    pub objective: Objective,
}

impl Differentiable for BatchObjective<'_> {
    fn value(&self, params: &ParamStore) -> Result<f64> {
        Ok(batch_loss(params, self.model, &self.batch, self.objective, false)?.0.objective)
    }

    fn gradient(&self, params: &ParamStore) -> Result<ParamStore> {
        let (_, g) = batch_loss(params, self.model, &self.batch, self.objective, true)?;
        Ok(g.expect("requested"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub probes: usize,
}

/// Probes up to `probe_count` random entries of every tensor (all entries
/// when the tensor is smaller) and compares the analytic derivative with
/// the central difference `(f(p+h) − f(p−h)) / 2h`.
pub fn finite_difference_check<F: Differentiable + ?Sized>(
    loss: &F,
    params: &ParamStore,
    probe_count: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = loss.gradient(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        probes: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let n = tensor.len();
        let indices: Vec<usize> = if n <= probe_count {
            (0..n).collect()
        } else {
            (0..probe_count).map(|_| rng.random_range(0..n)).collect()
        };
        let grad = analytic.get(name)?;
        for idx in indices {
            let original = tensor.data()[idx];
            probe.get_mut(name)?.data_mut()[idx] = original + step;
            let plus = loss.value(&probe)?;
            probe.get_mut(name)?.data_mut()[idx] = original - step;
            let minus = loss.value(&probe)?;
            probe.get_mut(name)?.data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.probes += 1;
            if rel > report.max_relative_error || report.worst_tensor.is_empty() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst_tensor = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn quadratic() -> impl Differentiable {
        (
            |p: &ParamStore| -> Result<f64> {
                Ok(p.iter().flat_map(|(_, m)| m.data().iter()).map(|v| v * v / 2.0).sum())
            },
            |p: &ParamStore| -> Result<ParamStore> { Ok(p.clone()) },
        )
    }

    fn quartic() -> impl Differentiable {
        (
            |p: &ParamStore| -> Result<f64> {
                Ok(p.iter().flat_map(|(_, m)| m.data().iter()).map(|v| v.powi(4)).sum())
            },
            |p: &ParamStore| -> Result<ParamStore> {
                let mut g = p.clone();
                for (_, m) in g.iter_mut() {
                    m.data_mut().iter_mut().for_each(|v| *v = 4.0 * v.powi(3));
                }
                Ok(g)
            },
        )
    }

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("a", Matrix::row_vector(vec![0.5, -1.5, 2.0]));
        p.insert("b", Matrix::from_vec(2, 2, vec![0.1, 0.2, -0.3, 1.1]).unwrap());
        p
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let r = finite_difference_check(&quadratic(), &store(), 10, 1e-5, 0).unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
        assert_eq!(r.probes, 7);
    }

    #[test]
    fn large_step_shows_truncation_error() {
        let small = finite_difference_check(&quartic(), &store(), 10, 1e-5, 0).unwrap();
        let large = finite_difference_check(&quartic(), &store(), 10, 1e-1, 0).unwrap();
        assert!(large.max_relative_error > 100.0 * small.max_relative_error);
        assert!(large.max_relative_error > 1e-3);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let wrong = (
            |p: &ParamStore| -> Result<f64> {
                Ok(p.iter().flat_map(|(_, m)| m.data().iter()).map(|v| v * v).sum())
            },
            |p: &ParamStore| -> Result<ParamStore> { Ok(p.clone()) },
        );
        let r = finite_difference_check(&wrong, &store(), 10, 1e-5, 0).unwrap();
        assert!(r.max_relative_error > 0.4);
    }
}
