use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use super::layer::{Layer, LayerKind, ParamKind};
use crate::quant::{FloatTensor, QuantError, QuantParams, QuantizedTensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("no layers")]
    NoLayers,
    #[error("input shape must have positive dimensions, got {0:?}")]
    BadInputShape(Vec<usize>),
    #[error("layer {layer} ({kind}): {detail}")]
    InvalidParameter { layer: usize, kind: &'static str, detail: String },
    #[error("layer {layer} ({kind}): expected {expected} inputs, got {found}")]
    Arity { layer: usize, kind: &'static str, expected: String, found: usize },
    #[error("layer {layer} ({kind}): input node {input} is not produced before this layer (cyclic wiring)")]
    Cycle { layer: usize, kind: &'static str, input: usize },
    #[error("layer {layer} ({kind}): shape mismatch: {detail}")]
    ShapeMismatch { layer: usize, kind: &'static str, detail: String },
    #[error("layer {layer} ({kind}): missing {param} tensor")]
    MissingWeight { layer: usize, kind: &'static str, param: &'static str },
    #[error("layer {layer} ({kind}): {param} tensor has shape {found:?}, expected {expected:?}")]
    WeightShape { layer: usize, kind: &'static str, param: &'static str, expected: Vec<usize>, found: Vec<usize> },
    #[error("layer {layer} ({kind}): unexpected {param} tensor")]
    UnexpectedWeight { layer: usize, kind: &'static str, param: &'static str },
    #[error("weight store has {found} layer entries for {expected} layers")]
    WeightCount { expected: usize, found: usize },
    #[error("input shape {found:?} does not match graph input {expected:?}")]
    InputShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("layer {layer} ({kind}): non-finite activation")]
    NonFinite { layer: usize, kind: &'static str },
    #[error("graph carries no INT8 parameters; calibrate it first")]
    MissingQuantParams,
    #[error("input tensor quantized with {found:?}, graph expects {expected:?}")]
    InputQuantParams { expected: QuantParams, found: QuantParams },
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Float master copies of every layer's parameter tensors, indexed by layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    layers: Vec<BTreeMap<ParamKind, FloatTensor>>,
}

impl WeightStore {
    pub fn with_layers(n: usize) -> Self {
        Self { layers: vec![BTreeMap::new(); n] }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, layer: usize, param: ParamKind) -> Option<&FloatTensor> {
        self.layers.get(layer)?.get(&param)
    }

    pub fn layer(&self, layer: usize) -> impl Iterator<Item = (ParamKind, &FloatTensor)> {
        self.layers.get(layer).into_iter().flat_map(|m| m.iter().map(|(k, v)| (*k, v)))
    }

    pub fn set(&mut self, layer: usize, param: ParamKind, tensor: FloatTensor) {
        if self.layers.len() <= layer {
            self.layers.resize_with(layer + 1, BTreeMap::new);
        }
        self.layers[layer].insert(param, tensor);
    }

    pub(crate) fn get_mut(&mut self, layer: usize, param: ParamKind) -> Option<&mut FloatTensor> {
        self.layers.get_mut(layer)?.get_mut(&param)
    }

    fn push_layer(&mut self) {
        self.layers.push(BTreeMap::new());
    }
}

/// An unvalidated graph description.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub weights: WeightStore,
}

impl GraphSpec {
    pub fn validate(self) -> Result<ModelGraph, GraphError> {
        validate_graph(self)
    }
}

/// INT8 parameters for one layer: output activation params plus quantized
/// shadows of its weight tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuant {
    pub output: QuantParams,
    pub weights: BTreeMap<ParamKind, QuantizedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphQuant {
    pub input: QuantParams,
    pub layers: Vec<LayerQuant>,
}

/// A graph whose wiring, shapes and weights have been checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    weights: WeightStore,
    shapes: Vec<Vec<usize>>,
    quant: Option<GraphQuant>,
}

/// Resolves every node shape and checks weights. Errors name the first
/// offending layer.
pub fn validate_graph(spec: GraphSpec) -> Result<ModelGraph, GraphError> {
    let GraphSpec { input_shape, layers, weights } = spec;
    if layers.is_empty() {
        return Err(GraphError::NoLayers);
    }
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(GraphError::BadInputShape(input_shape));
    }
    if weights.len() > layers.len() {
        return Err(GraphError::WeightCount { expected: layers.len(), found: weights.len() });
    }
    let mut shapes = vec![input_shape.clone()];
    for (i, layer) in layers.iter().enumerate() {
        let kind = layer.kind.name();
        layer.kind.check_params().map_err(|detail| GraphError::InvalidParameter { layer: i, kind, detail })?;
        let n = layer.inputs.len();
        let arity_ok = match layer.kind.arity() {
            Some(k) => n == k,
            None => n >= 2,
        };
        if !arity_ok {
            let expected = layer.kind.arity().map_or_else(|| "at least 2".to_string(), |k| k.to_string());
            return Err(GraphError::Arity { layer: i, kind, expected, found: n });
        }
        if let Some(&input) = layer.inputs.iter().find(|&&node| node > i) {
            return Err(GraphError::Cycle { layer: i, kind, input });
        }
        let ins: Vec<&[usize]> = layer.inputs.iter().map(|&node| shapes[node].as_slice()).collect();
        let out =
            layer.kind.output_shape(&ins).map_err(|detail| GraphError::ShapeMismatch { layer: i, kind, detail })?;
        if out.contains(&0) {
            return Err(GraphError::ShapeMismatch { layer: i, kind, detail: format!("empty output {out:?}") });
        }
        let required = layer.kind.param_shapes();
        for (param, expected) in &required {
            let t =
                weights.get(i, *param).ok_or(GraphError::MissingWeight { layer: i, kind, param: param.as_str() })?;
            if t.shape() != expected.as_slice() {
                return Err(GraphError::WeightShape {
                    layer: i,
                    kind,
                    param: param.as_str(),
                    expected: expected.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if let Some((param, _)) = weights.layer(i).find(|(p, _)| !required.iter().any(|(r, _)| r == p)) {
            return Err(GraphError::UnexpectedWeight { layer: i, kind, param: param.as_str() });
        }
        shapes.push(out);
    }
    let mut weights = weights;
    while weights.len() < layers.len() {
        weights.push_layer();
    }
    Ok(ModelGraph { input_shape, layers, weights, shapes, quant: None })
}

impl ModelGraph {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    /// Shape of node `node` (0 = input, `i + 1` = output of layer `i`).
    pub fn node_shape(&self, node: usize) -> &[usize] {
        &self.shapes[node]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("validated graph has layers")
    }

    pub fn quant(&self) -> Option<&GraphQuant> {
        self.quant.as_ref()
    }

    pub(crate) fn set_quant(&mut self, quant: Option<GraphQuant>) {
        self.quant = quant;
    }

    pub(crate) fn weights_mut(&mut self) -> &mut WeightStore {
        &mut self.weights
    }

    pub fn param(&self, layer: usize, param: ParamKind) -> &FloatTensor {
        self.weights.get(layer, param).expect("validated graph has all weights")
    }

    /// Back to an editable description (drops any INT8 parameters).
    pub fn into_spec(self) -> GraphSpec {
        GraphSpec { input_shape: self.input_shape, layers: self.layers, weights: self.weights }
    }
}

/// Convenience builder that chains layers and initializes weights.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    spec: GraphSpec,
}

impl GraphBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self { spec: GraphSpec { input_shape, layers: Vec::new(), weights: WeightStore::default() } }
    }

    /// Node id of the most recently added layer (0 before any layer).
    pub fn last(&self) -> usize {
        self.spec.layers.len()
    }

    /// Appends a layer fed by the previous node; returns its output node.
    pub fn push(&mut self, kind: LayerKind) -> usize {
        let prev = self.last();
        self.push_from(kind, vec![prev])
    }

    pub fn push_from(&mut self, kind: LayerKind, inputs: Vec<usize>) -> usize {
        self.spec.layers.push(Layer::new(kind, inputs));
        self.spec.weights.push_layer();
        self.last()
    }

    /// Sets a parameter tensor of the layer producing `node`.
    pub fn set_param(&mut self, node: usize, param: ParamKind, tensor: FloatTensor) -> &mut Self {
        self.spec.weights.set(node - 1, param, tensor);
        self
    }

    /// Fills every missing parameter with uniform values in `±sqrt(3 / fan_in)`
    /// and zero biases.
    pub fn init_weights<R: Rng>(&mut self, rng: &mut R) -> &mut Self {
        for (i, layer) in self.spec.layers.iter().enumerate() {
            for (param, shape) in layer.kind.param_shapes() {
                if self.spec.weights.get(i, param).is_some() {
                    continue;
                }
                let n: usize = shape.iter().product();
                let data = if param == ParamKind::Bias {
                    vec![0.0; n]
                } else {
                    let fan_in = (n / shape[0]).max(1);
                    let limit = (3.0 / fan_in as f32).sqrt();
                    (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
                };
                self.spec.weights.set(i, param, FloatTensor::from_parts(shape, data));
            }
        }
        self
    }

    /// Like [`init_weights`](Self::init_weights) but with random biases too.
    pub fn init_weights_and_biases<R: Rng>(&mut self, rng: &mut R, bias_scale: f32) -> &mut Self {
        for (i, layer) in self.spec.layers.iter().enumerate() {
            for (param, shape) in layer.kind.param_shapes() {
                if param == ParamKind::Bias && self.spec.weights.get(i, param).is_none() {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bias_scale..=bias_scale)).collect();
                    self.spec.weights.set(i, param, FloatTensor::from_parts(shape, data));
                }
            }
        }
        self.init_weights(rng)
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    /// Shape of the most recent node, resolved without touching weights.
    pub fn last_shape(&self) -> Result<Vec<usize>, String> {
        let mut shapes = vec![self.spec.input_shape.clone()];
        for layer in &self.spec.layers {
            let ins: Vec<&[usize]> = layer
                .inputs
                .iter()
                .map(|&n| shapes.get(n).map(|s| s.as_slice()).ok_or_else(|| format!("unknown node {n}")))
                .collect::<Result<_, _>>()?;
            let out = layer.kind.output_shape(&ins)?;
            shapes.push(out);
        }
        Ok(shapes.pop().expect("input shape present"))
    }

    pub fn into_spec(self) -> GraphSpec {
        self.spec
    }

    pub fn build(self) -> Result<ModelGraph, GraphError> {
        validate_graph(self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn empty_graph_is_rejected() {
        let err = GraphBuilder::new(vec![4]).build().unwrap_err();
        assert_eq!(err, GraphError::NoLayers);
        assert_eq!(err.to_string(), "no layers");
    }

    #[test]
    fn wrong_fan_in_names_the_fc_layer() {
        let mut b = GraphBuilder::new(vec![6, 6, 3]);
        b.push(LayerKind::Conv2d { kernel: 3, stride: 1, padding: 1, in_channels: 3, out_channels: 8 });
        b.push(LayerKind::Flatten);
        b.push(LayerKind::FullyConnected { in_features: 100, out_features: 4 });
        b.init_weights(&mut rng());
        match b.build().unwrap_err() {
            GraphError::ShapeMismatch { layer, kind, .. } => {
                assert_eq!(layer, 2);
                assert_eq!(kind, "fully_connected");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn mb_block_shapes_resolve() {
        // 8x8x4 -> expand x3 (12 ch) -> dw 3x3 -> project back to 4 -> add skip
        let mut b = GraphBuilder::new(vec![8, 8, 4]);
        let input = b.last();
        b.push(LayerKind::PointwiseConv2d { in_channels: 4, out_channels: 12 });
        b.push(LayerKind::Relu6);
        b.push(LayerKind::DepthwiseConv2d { kernel: 3, stride: 1, padding: 1, channels: 12 });
        b.push(LayerKind::Relu6);
        let proj = b.push(LayerKind::PointwiseConv2d { in_channels: 12, out_channels: 4 });
        b.push_from(LayerKind::ResidualAdd, vec![proj, input]);
        b.init_weights(&mut rng());
        let g = b.build().unwrap();
        assert_eq!(g.node_shape(1), &[8, 8, 12]);
        assert_eq!(g.node_shape(3), &[8, 8, 12]);
        assert_eq!(g.node_shape(5), &[8, 8, 4]);
        assert_eq!(g.output_shape(), &[8, 8, 4]);
    }

    #[test]
    fn forward_reference_is_a_cycle() {
        let spec = GraphSpec {
            input_shape: vec![4],
            layers: vec![Layer::new(LayerKind::Relu, vec![1])],
            weights: WeightStore::default(),
        };
        assert!(matches!(validate_graph(spec), Err(GraphError::Cycle { layer: 0, input: 1, .. })));
    }

    #[test]
    fn missing_and_misshaped_weights() {
        let mut b = GraphBuilder::new(vec![4]);
        b.push(LayerKind::FullyConnected { in_features: 4, out_features: 2 });
        let err = b.clone().build().unwrap_err();
        assert!(matches!(err, GraphError::MissingWeight { layer: 0, param: "weight", .. }));

        b.set_param(1, ParamKind::Weight, FloatTensor::zeros(vec![4, 2]));
        b.set_param(1, ParamKind::Bias, FloatTensor::zeros(vec![2]));
        assert!(matches!(b.build().unwrap_err(), GraphError::WeightShape { layer: 0, .. }));
    }

    #[test]
    fn invalid_stride_and_arity() {
        let mut b = GraphBuilder::new(vec![4, 4, 1]);
        b.push(LayerKind::MaxPool { size: 2, stride: 0 });
        assert!(matches!(b.build().unwrap_err(), GraphError::InvalidParameter { layer: 0, .. }));

        let mut b = GraphBuilder::new(vec![4]);
        b.push(LayerKind::ResidualAdd);
        assert!(matches!(b.build().unwrap_err(), GraphError::Arity { layer: 0, .. }));
    }
}
