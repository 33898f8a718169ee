//! Reference architectures: MobileNetV2-style MB blocks, an MCUNet-like
//! classifier and YOLO variant, the CNN-LSTM behavior model, and a random
//! small-graph generator for property tests.

use rand::Rng;

use super::graph::{GraphBuilder, GraphError, ModelGraph};
use super::layer::LayerKind;

/// Width multiplier and input resolution used for the vision backbone.
pub const DEFAULT_WIDTH_MULT: f32 = 0.5;
pub const DEFAULT_RESOLUTION: usize = 176;

/// Appends an inverted-residual block: 1x1 expansion (skipped when
/// `expansion == 1`), depthwise `kernel x kernel`, linear 1x1 projection,
/// and a skip connection when stride is 1 and channels match.
/// Returns the output node.
pub fn mb_block(
    b: &mut GraphBuilder,
    in_channels: usize,
    out_channels: usize,
    expansion: usize,
    kernel: usize,
    stride: usize,
) -> usize {
    let input = b.last();
    let hidden = in_channels * expansion.max(1);
    if expansion > 1 {
        b.push(LayerKind::PointwiseConv2d { in_channels, out_channels: hidden });
        b.push(LayerKind::Relu6);
    }
    b.push(LayerKind::DepthwiseConv2d { kernel, stride, padding: kernel / 2, channels: hidden });
    b.push(LayerKind::Relu6);
    let proj = b.push(LayerKind::PointwiseConv2d { in_channels: hidden, out_channels });
    if stride == 1 && in_channels == out_channels {
        b.push_from(LayerKind::ResidualAdd, vec![proj, input])
    } else {
        proj
    }
}

fn scaled(channels: usize, width_mult: f32) -> usize {
    let c = (channels as f32 * width_mult / 8.0).round() as usize * 8;
    c.max(8)
}

/// (expansion, out channels at width 1.0, repeats, first stride, kernel)
const MB_STAGES: [(usize, usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1, 3),
    (6, 24, 2, 2, 5),
    (6, 32, 3, 2, 3),
    (6, 64, 4, 2, 7),
    (6, 96, 3, 1, 5),
    (6, 160, 3, 2, 5),
    (6, 320, 1, 1, 3),
];

/// Stem and MB stages; returns the builder and the final channel count.
/// Spatial size is divided by 32.
fn mb_backbone(resolution: usize, width_mult: f32) -> (GraphBuilder, usize) {
    let mut b = GraphBuilder::new(vec![resolution, resolution, 3]);
    let stem = scaled(32, width_mult);
    b.push(LayerKind::Conv2d { kernel: 3, stride: 2, padding: 1, in_channels: 3, out_channels: stem });
    b.push(LayerKind::Relu6);
    let mut ch = stem;
    for &(expansion, out, repeats, stride, kernel) in &MB_STAGES {
        let out = scaled(out, width_mult);
        for r in 0..repeats {
            mb_block(&mut b, ch, out, expansion, kernel, if r == 0 { stride } else { 1 });
            ch = out;
        }
    }
    (b, ch)
}

/// MCUNet-style image classifier: stem, MB stages, global average pool, linear.
pub fn mcunet_classifier<R: Rng>(
    resolution: usize,
    width_mult: f32,
    classes: usize,
    rng: &mut R,
) -> Result<ModelGraph, GraphError> {
    let (mut b, ch) = mb_backbone(resolution, width_mult);
    let spatial = resolution.div_ceil(32);
    b.push(LayerKind::AvgPool { size: spatial, stride: spatial });
    b.push(LayerKind::Flatten);
    b.push(LayerKind::FullyConnected { in_features: ch, out_features: classes });
    b.push(LayerKind::Softmax);
    b.init_weights(rng);
    b.build()
}

/// MB backbone with a YOLOv1 head (two 3x3 convolutions and one linear
/// layer) emitting a flat `S * S * (5B + C)` tensor.
pub fn mcunet_yolo<R: Rng>(
    resolution: usize,
    width_mult: f32,
    grid: usize,
    boxes: usize,
    classes: usize,
    rng: &mut R,
) -> Result<ModelGraph, GraphError> {
    let (mut b, ch) = mb_backbone(resolution, width_mult);
    let head = 64;
    b.push(LayerKind::Conv2d { kernel: 3, stride: 1, padding: 1, in_channels: ch, out_channels: head });
    b.push(LayerKind::Relu);
    b.push(LayerKind::Conv2d { kernel: 3, stride: 1, padding: 1, in_channels: head, out_channels: head });
    b.push(LayerKind::Relu);
    let spatial = resolution.div_ceil(32);
    b.push(LayerKind::Flatten);
    b.push(LayerKind::FullyConnected {
        in_features: spatial * spatial * head,
        out_features: grid * grid * (5 * boxes + classes),
    });
    b.init_weights(rng);
    b.build()
}

/// Shape of the accelerometer CNN-LSTM: conv blocks (conv1d, ReLU, max-pool
/// by 2, dropout) followed by stacked LSTMs and a linear classifier with
/// softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnLstmConfig {
    pub window_len: usize,
    pub axes: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub classes: usize,
    pub dropout: f32,
}

impl CnnLstmConfig {
    /// 3 conv blocks + 4 LSTM layers sized to about 0.186M parameters.
    pub fn deployed() -> Self {
        Self {
            window_len: 250,
            axes: 3,
            conv_channels: vec![32, 64, 104],
            kernel: 5,
            lstm_hidden: 64,
            lstm_layers: 4,
            classes: 5,
            dropout: 0.2,
        }
    }

    /// The wider pre-pruning configuration, about 0.437M parameters.
    pub fn original() -> Self {
        Self { conv_channels: vec![32, 64, 96], lstm_hidden: 112, ..Self::deployed() }
    }

    pub fn build<R: Rng>(&self, rng: &mut R) -> Result<ModelGraph, GraphError> {
        let mut b = self.builder();
        b.init_weights(rng);
        b.build()
    }

    /// Layer structure without weights.
    pub fn builder(&self) -> GraphBuilder {
        let mut b = GraphBuilder::new(vec![self.window_len, self.axes]);
        let mut ch = self.axes;
        for &out in &self.conv_channels {
            b.push(LayerKind::Conv1d {
                kernel: self.kernel,
                stride: 1,
                padding: self.kernel / 2,
                in_channels: ch,
                out_channels: out,
            });
            b.push(LayerKind::Relu);
            b.push(LayerKind::MaxPool { size: 2, stride: 2 });
            b.push(LayerKind::Dropout { rate: self.dropout });
            ch = out;
        }
        for l in 0..self.lstm_layers {
            b.push(LayerKind::Lstm {
                input_size: ch,
                hidden_size: self.lstm_hidden,
                return_sequences: l + 1 < self.lstm_layers,
            });
            ch = self.lstm_hidden;
        }
        b.push(LayerKind::FullyConnected { in_features: ch, out_features: self.classes });
        b.push(LayerKind::Softmax);
        b
    }
}

/// A random small validated graph from one of several families (CNN,
/// MB block with residual, conv1d + LSTM, MLP, concat), with random
/// weights and biases. Output is a logit vector.
pub fn random_small_graph<R: Rng>(rng: &mut R) -> ModelGraph {
    let classes = rng.random_range(2..=6);
    let mut b = match rng.random_range(0..5) {
        0 => {
            let (h, c) = (rng.random_range(5..=9), rng.random_range(1..=3));
            let mut b = GraphBuilder::new(vec![h, h, c]);
            let out = rng.random_range(2..=6);
            let k = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            b.push(LayerKind::Conv2d { kernel: k, stride, padding: k / 2, in_channels: c, out_channels: out });
            b.push(if rng.random_bool(0.5) { LayerKind::Relu } else { LayerKind::Relu6 });
            b.push(LayerKind::MaxPool { size: 2, stride: 2 });
            b.push(LayerKind::Flatten);
            b
        }
        1 => {
            let (h, c) = (rng.random_range(4..=7), rng.random_range(2..=4));
            let mut b = GraphBuilder::new(vec![h, h, c]);
            mb_block(&mut b, c, c, rng.random_range(1..=4), 3, 1);
            b.push(LayerKind::AvgPool { size: 2, stride: 1 });
            b.push(LayerKind::Flatten);
            b
        }
        2 => {
            let (t, f) = (rng.random_range(6..=14), rng.random_range(1..=3));
            let mut b = GraphBuilder::new(vec![t, f]);
            let ch = rng.random_range(2..=6);
            b.push(LayerKind::Conv1d { kernel: 3, stride: 1, padding: 1, in_channels: f, out_channels: ch });
            b.push(LayerKind::Relu);
            b.push(LayerKind::Dropout { rate: 0.1 });
            b.push(LayerKind::Lstm { input_size: ch, hidden_size: rng.random_range(2..=6), return_sequences: false });
            b
        }
        3 => {
            let n = rng.random_range(3..=12);
            let mut b = GraphBuilder::new(vec![n]);
            let hidden = rng.random_range(3..=10);
            b.push(LayerKind::FullyConnected { in_features: n, out_features: hidden });
            b.push(LayerKind::Relu);
            b
        }
        _ => {
            let (h, c) = (rng.random_range(4..=6), rng.random_range(1..=3));
            let mut b = GraphBuilder::new(vec![h, h, c]);
            let left = b.push(LayerKind::PointwiseConv2d { in_channels: c, out_channels: 2 });
            let right =
                b.push_from(LayerKind::DepthwiseConv2d { kernel: 3, stride: 1, padding: 1, channels: c }, vec![0]);
            b.push_from(LayerKind::Concat, vec![left, right]);
            b.push(LayerKind::Relu6);
            b.push(LayerKind::Flatten);
            b
        }
    };
    let features: usize = b.last_shape().expect("generator emits valid graphs").iter().product();
    b.push(LayerKind::FullyConnected { in_features: features, out_features: classes });
    b.init_weights_and_biases(rng, 0.2);
    b.build().expect("generator emits valid graphs")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::profile::{count_flops, count_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cnn_lstm_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let deployed = CnnLstmConfig::deployed().build(&mut rng).unwrap();
        let p = count_params(&deployed) as f64;
        assert!((p / 186_000.0 - 1.0).abs() < 0.05, "{p}");
        let original = CnnLstmConfig::original().build(&mut rng).unwrap();
        let p = count_params(&original) as f64;
        assert!((p / 437_000.0 - 1.0).abs() < 0.05, "{p}");
        assert_eq!(deployed.output_shape(), &[5]);
    }

    #[test]
    fn mcunet_graphs_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cls = mcunet_classifier(DEFAULT_RESOLUTION, DEFAULT_WIDTH_MULT, 3, &mut rng).unwrap();
        assert_eq!(cls.output_shape(), &[3]);
        assert!(count_flops(&cls) > 10_000_000);
        let yolo = mcunet_yolo(224, DEFAULT_WIDTH_MULT, 7, 2, 4, &mut rng).unwrap();
        assert_eq!(yolo.output_shape(), &[7 * 7 * 14]);
    }

    #[test]
    fn random_graphs_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let g = random_small_graph(&mut rng);
            assert_eq!(g.output_shape().len(), 1);
        }
    }
}
