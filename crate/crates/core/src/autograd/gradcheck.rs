//! Finite-difference gradient checking.
//!
//! The op under test is rebuilt from scratch for every probe, so stateful
//! side effects (batchnorm running stats) cannot leak between evaluations.
//! The output is reduced to a scalar through a fixed random projection;
//! a plain sum would silence errors in ops with constant sums such as
//! softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutogradError, Graph, Tensor, TensorId};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Builds the operation under test from leaf ids and returns its output.
pub type GradcheckCase = dyn Fn(&mut Graph, &[TensorId]) -> Result<TensorId, AutogradError>;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub name: String,
    /// Max relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: max rel err {:.3e} [{}]",
            self.name,
            self.max_rel_err,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

fn eval_scalar(
    f: &GradcheckCase,
    inputs: &[Tensor],
    projection: &Tensor,
    requires_grad: bool,
) -> Result<(Graph, TensorId, Vec<TensorId>), AutogradError> {
    let mut graph = Graph::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| graph.leaf(t, requires_grad)).collect();
    let out = f(&mut graph, &ids)?;
    let r = graph.leaf(projection, false);
    let prod = graph.mul(out, r)?;
    let flat_len = graph.data(prod).len();
    let flat = graph.reshape(prod, &[flat_len])?;
    let loss = graph.sum_along(flat, 0)?;
    Ok((graph, loss, ids))
}

/// Central-difference check of every input gradient of `f`.
pub fn gradcheck(
    name: &str,
    inputs: &[Tensor],
    f: &GradcheckCase,
    seed: u64,
) -> Result<GradcheckReport, AutogradError> {
    // probe forward once to size the projection
    let probe = {
        let mut graph = Graph::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| graph.leaf(t, false)).collect();
        let out = f(&mut graph, &ids)?;
        graph.tensor(out)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = Tensor::new(
        probe.shape(),
        (0..probe.len())
            .map(|_| {
                let mag = 0.5 + rng.gen::<f64>();
                if rng.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
    )?;

    let (mut graph, loss, ids) = eval_scalar(f, inputs, &projection, true)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| graph.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; graph.data(id).len()]))
        .collect();

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for e in 0..grad.len() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + GRADCHECK_EPS;
            let (gp, lp, _) = eval_scalar(f, &work, &projection, false)?;
            let plus = gp.scalar_value(lp);
            work[i].data_mut()[e] = orig - GRADCHECK_EPS;
            let (gm, lm, _) = eval_scalar(f, &work, &projection, false)?;
            let minus = gm.scalar_value(lm);
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_EPS);
            let a = grad[e];
            let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradcheckReport {
        name: name.to_string(),
        per_input,
        max_rel_err,
        passed: max_rel_err < GRADCHECK_TOL,
    })
}

/// Uniform tensor in [-1, 1), seeded. Shared helper for checker inputs.
pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(shape, (0..super::numel(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape/data agree by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_combination_is_near_exact() {
        // central differences are exact (to roundoff) for affine functions
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&[3, 4], &mut rng);
        let b = random_tensor(&[3, 4], &mut rng);
        let report = gradcheck(
            "add+scale",
            &[a, b],
            &|g, ids| {
                let s = g.scale(ids[0], 3.5);
                g.add(s, ids[1])
            },
            1,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.summary());
    }

    #[test]
    fn sigmoid_passes_at_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&[2, 3], &mut rng);
        let report = gradcheck("sigmoid", &[x], &|g, ids| Ok(g.sigmoid(ids[0])), 2).unwrap();
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn corrupted_backward_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&[4], &mut rng);
        let report = gradcheck("corrupted", &[x], &|g, ids| Ok(g.corrupted_double(ids[0])), 3).unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_err > 0.3, "rel err {}", report.max_rel_err);
    }
}
