//! Central finite-difference check of the analytic loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::ClassifierError;
use crate::model::{Batch, Model};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSample {
    /// Position in [`Model::visit_params`] order.
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Relative error with a floor on the denominator so that near-zero
/// gradients are compared absolutely.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn nudge(model: &mut Model, tensor: usize, index: usize, delta: f64) {
    let mut k = 0;
    model.visit_params(&mut |p| {
        if k == tensor {
            p.value[index] += delta;
        }
        k += 1;
    });
}

/// Samples `samples` parameters uniformly over all scalars and compares the
/// analytic gradient with `(L(w + eps) - L(w - eps)) / 2 eps`.
pub fn check_gradients(
    model: &mut Model,
    batch: &Batch,
    labels: &[usize],
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<GradSample>, ClassifierError> {
    model.loss_and_grad(batch, labels)?;
    let mut grads: Vec<Vec<f64>> = Vec::new();
    model.visit_params(&mut |p| grads.push(p.grad.clone()));
    let offsets: Vec<usize> = grads
        .iter()
        .scan(0, |acc, g| {
            let start = *acc;
            *acc += g.len();
            Some(start)
        })
        .collect();
    let total: usize = grads.iter().map(Vec::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let flat = rng.random_range(0..total);
        let tensor = offsets.partition_point(|&o| o <= flat) - 1;
        let index = flat - offsets[tensor];
        nudge(model, tensor, index, eps);
        let plus = model.loss(batch, labels)?;
        nudge(model, tensor, index, -2.0 * eps);
        let minus = model.loss(batch, labels)?;
        nudge(model, tensor, index, eps);
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[tensor][index];
        out.push(GradSample {
            tensor,
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, 1e-6),
        });
    }
    Ok(out)
}
