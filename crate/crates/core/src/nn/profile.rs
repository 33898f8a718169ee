use serde::Serialize;

use super::graph::ModelGraph;
use super::layer::LayerKind;

/// FLOPs (counted as multiply-accumulates), trainable parameters and the
/// largest per-layer input+output activation footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryProfile {
    pub flops: u64,
    pub params: u64,
    pub peak_activation_bytes: u64,
}

pub fn profile(g: &ModelGraph, bytes_per_element: u64) -> MemoryProfile {
    MemoryProfile {
        flops: count_flops(g),
        params: count_params(g),
        peak_activation_bytes: peak_activation(g, bytes_per_element),
    }
}

/// MACs per layer, element-wise layers and pooling excluded.
pub fn layer_flops(g: &ModelGraph, layer: usize) -> u64 {
    let out = g.node_shape(layer + 1);
    let input = g.node_shape(g.layers()[layer].inputs[0]);
    match g.layers()[layer].kind {
        LayerKind::Conv2d { kernel, in_channels, out_channels, .. } => {
            (kernel * kernel * in_channels * out_channels) as u64 * (out[0] * out[1]) as u64
        }
        LayerKind::DepthwiseConv2d { kernel, channels, .. } => {
            (kernel * kernel * channels) as u64 * (out[0] * out[1]) as u64
        }
        LayerKind::PointwiseConv2d { in_channels, out_channels } => {
            (in_channels * out_channels) as u64 * (out[0] * out[1]) as u64
        }
        LayerKind::Conv1d { kernel, in_channels, out_channels, .. } => {
            (kernel * in_channels * out_channels) as u64 * out[0] as u64
        }
        LayerKind::FullyConnected { in_features, out_features } => (in_features * out_features) as u64,
        LayerKind::Lstm { input_size, hidden_size, .. } => {
            4 * (input_size * hidden_size + hidden_size * hidden_size) as u64 * input[0] as u64
        }
        _ => 0,
    }
}

pub fn count_flops(g: &ModelGraph) -> u64 {
    (0..g.layers().len()).map(|i| layer_flops(g, i)).sum()
}

pub fn count_params(g: &ModelGraph) -> u64 {
    g.layers().iter().flat_map(|l| l.kind.param_shapes()).map(|(_, shape)| shape.iter().product::<usize>() as u64).sum()
}

/// Parameters that are not exactly zero (the effective size after pruning).
pub fn count_nonzero_params(g: &ModelGraph) -> u64 {
    (0..g.layers().len())
        .flat_map(|i| g.weights().layer(i).map(|(_, t)| t.data().iter().filter(|v| **v != 0.0).count() as u64))
        .sum()
}

/// Bytes held while layer `layer` runs: every input plus its output.
pub fn layer_activation_bytes(g: &ModelGraph, layer: usize, bytes_per_element: u64) -> u64 {
    let elems = |node: usize| g.node_shape(node).iter().map(|&d| d as u64).product::<u64>();
    let inputs: u64 = g.layers()[layer].inputs.iter().map(|&n| elems(n)).sum();
    (inputs + elems(layer + 1)) * bytes_per_element
}

/// Largest [`layer_activation_bytes`] over all layers.
pub fn peak_activation(g: &ModelGraph, bytes_per_element: u64) -> u64 {
    (0..g.layers().len()).map(|i| layer_activation_bytes(g, i, bytes_per_element)).max().unwrap_or(0)
}
