use serde::Serialize;
use thiserror::Error;

use super::graph::ModelGraph;
use super::layer::ParamKind;
use super::profile::count_nonzero_params;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("target sparsity {0} outside (0, 1)")]
    SparsityOutOfRange(f64),
    #[error("at least one pruning iteration is required")]
    NoIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneStep {
    pub iteration: usize,
    pub target_sparsity: f64,
    pub zero_weights: usize,
    pub nonzero_params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub prunable_weights: usize,
    pub steps: Vec<PruneStep>,
}

/// Unstructured global magnitude pruning of weight matrices (biases are
/// kept). Iteration `k` of `n` zeroes the smallest-magnitude surviving
/// weights until `target * k / n` of all weights are zero. Ties go to the
/// earlier layer / tensor / index.
pub fn prune_magnitude(
    g: &ModelGraph,
    target_sparsity: f64,
    iterations: usize,
) -> Result<(ModelGraph, PruneReport), PruneError> {
    if !(target_sparsity > 0.0 && target_sparsity < 1.0) {
        return Err(PruneError::SparsityOutOfRange(target_sparsity));
    }
    if iterations == 0 {
        return Err(PruneError::NoIterations);
    }
    let mut out = g.clone();
    out.set_quant(None);

    let mut slots: Vec<(usize, ParamKind, usize)> = Vec::new();
    for (i, layer) in g.layers().iter().enumerate() {
        for (param, shape) in layer.kind.param_shapes() {
            if param != ParamKind::Bias {
                let n: usize = shape.iter().product();
                slots.extend((0..n).map(|k| (i, param, k)));
            }
        }
    }
    let total = slots.len();
    let value = |g: &ModelGraph, (l, p, k): (usize, ParamKind, usize)| g.param(l, p).data()[k];

    let mut steps = Vec::with_capacity(iterations);
    for it in 1..=iterations {
        let target = target_sparsity * it as f64 / iterations as f64;
        let need = ((target * total as f64) - 1e-9).ceil().clamp(0.0, total as f64) as usize;
        let mut live: Vec<(f32, usize)> = slots
            .iter()
            .enumerate()
            .filter_map(|(s, &slot)| {
                let v = value(&out, slot);
                (v != 0.0).then_some((v.abs(), s))
            })
            .collect();
        let zeros = total - live.len();
        if need > zeros {
            live.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, s) in live.iter().take(need - zeros) {
                let (l, p, k) = slots[s];
                out.weights_mut().get_mut(l, p).expect("validated").data_mut()[k] = 0.0;
            }
        }
        let zero_weights = slots.iter().filter(|&&slot| value(&out, slot) == 0.0).count();
        steps.push(PruneStep {
            iteration: it,
            target_sparsity: target,
            zero_weights,
            nonzero_params: count_nonzero_params(&out),
        });
    }
    Ok((out, PruneReport { prunable_weights: total, steps }))
}
