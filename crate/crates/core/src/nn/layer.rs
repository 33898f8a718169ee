use serde::{Deserialize, Serialize};
use std::fmt;

/// Tensor layouts: images are `[H, W, C]`, sequences are `[T, F]`.
///
/// Weight layouts (row-major):
///
/// | kind          | `Weight`          | `Recurrent` | `Bias`  |
/// |---------------|-------------------|-------------|---------|
/// | conv2d        | `[Cout, k, k, Cin]` |           | `[Cout]` |
/// | depthwise     | `[k, k, C]`       |             | `[C]`   |
/// | pointwise     | `[Cout, Cin]`     |             | `[Cout]` |
/// | conv1d        | `[Cout, k, Cin]`  |             | `[Cout]` |
/// | fully connected | `[out, in]`     |             | `[out]` |
/// | lstm          | `[4H, F]`         | `[4H, H]`   | `[4H]`  |
///
/// LSTM gate rows are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d { kernel: usize, stride: usize, padding: usize, in_channels: usize, out_channels: usize },
    DepthwiseConv2d { kernel: usize, stride: usize, padding: usize, channels: usize },
    PointwiseConv2d { in_channels: usize, out_channels: usize },
    Conv1d { kernel: usize, stride: usize, padding: usize, in_channels: usize, out_channels: usize },
    FullyConnected { in_features: usize, out_features: usize },
    Relu,
    Relu6,
    AvgPool { size: usize, stride: usize },
    MaxPool { size: usize, stride: usize },
    Softmax,
    Lstm { input_size: usize, hidden_size: usize, return_sequences: bool },
    Dropout { rate: f32 },
    ResidualAdd,
    Flatten,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Recurrent,
    Bias,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Recurrent => "recurrent",
            ParamKind::Bias => "bias",
        }
    }
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerKind::PointwiseConv2d { .. } => "pointwise_conv2d",
            LayerKind::Conv1d { .. } => "conv1d",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Relu => "relu",
            LayerKind::Relu6 => "relu6",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::Softmax => "softmax",
            LayerKind::Lstm { .. } => "lstm_layer",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::Flatten => "flatten",
            LayerKind::Concat => "concat",
        }
    }

    /// Required parameter tensors and their shapes.
    pub fn param_shapes(&self) -> Vec<(ParamKind, Vec<usize>)> {
        use ParamKind::*;
        match *self {
            LayerKind::Conv2d { kernel, in_channels, out_channels, .. } => {
                vec![(Weight, vec![out_channels, kernel, kernel, in_channels]), (Bias, vec![out_channels])]
            }
            LayerKind::DepthwiseConv2d { kernel, channels, .. } => {
                vec![(Weight, vec![kernel, kernel, channels]), (Bias, vec![channels])]
            }
            LayerKind::PointwiseConv2d { in_channels, out_channels } => {
                vec![(Weight, vec![out_channels, in_channels]), (Bias, vec![out_channels])]
            }
            LayerKind::Conv1d { kernel, in_channels, out_channels, .. } => {
                vec![(Weight, vec![out_channels, kernel, in_channels]), (Bias, vec![out_channels])]
            }
            LayerKind::FullyConnected { in_features, out_features } => {
                vec![(Weight, vec![out_features, in_features]), (Bias, vec![out_features])]
            }
            LayerKind::Lstm { input_size, hidden_size, .. } => vec![
                (Weight, vec![4 * hidden_size, input_size]),
                (Recurrent, vec![4 * hidden_size, hidden_size]),
                (Bias, vec![4 * hidden_size]),
            ],
            _ => Vec::new(),
        }
    }

    pub fn has_params(&self) -> bool {
        !self.param_shapes().is_empty()
    }

    /// Number of graph inputs the layer consumes; `None` means "two or more".
    pub fn arity(&self) -> Option<usize> {
        match self {
            LayerKind::ResidualAdd => Some(2),
            LayerKind::Concat => None,
            _ => Some(1),
        }
    }

    pub(crate) fn check_params(&self) -> Result<(), String> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(format!("{name} must be positive"))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerKind::Conv2d { kernel, stride, in_channels, out_channels, .. }
            | LayerKind::Conv1d { kernel, stride, in_channels, out_channels, .. } => {
                positive("kernel", kernel)?;
                positive("stride", stride)?;
                positive("in_channels", in_channels)?;
                positive("out_channels", out_channels)
            }
            LayerKind::DepthwiseConv2d { kernel, stride, channels, .. } => {
                positive("kernel", kernel)?;
                positive("stride", stride)?;
                positive("channels", channels)
            }
            LayerKind::PointwiseConv2d { in_channels, out_channels } => {
                positive("in_channels", in_channels)?;
                positive("out_channels", out_channels)
            }
            LayerKind::FullyConnected { in_features, out_features } => {
                positive("in_features", in_features)?;
                positive("out_features", out_features)
            }
            LayerKind::AvgPool { size, stride } | LayerKind::MaxPool { size, stride } => {
                positive("size", size)?;
                positive("stride", stride)
            }
            LayerKind::Lstm { input_size, hidden_size, .. } => {
                positive("input_size", input_size)?;
                positive("hidden_size", hidden_size)
            }
            LayerKind::Dropout { rate } => {
                if (0.0..1.0).contains(&rate) {
                    Ok(())
                } else {
                    Err(format!("dropout rate {rate} outside [0, 1)"))
                }
            }
            _ => Ok(()),
        }
    }

    /// Output shape for the given input shapes, or a description of the mismatch.
    pub(crate) fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        let x = inputs[0];
        let conv_out = |len: usize, k: usize, s: usize, p: usize| -> Result<usize, String> {
            if len + 2 * p < k {
                Err(format!("kernel {k} larger than padded extent {}", len + 2 * p))
            } else {
                Ok((len + 2 * p - k) / s + 1)
            }
        };
        match *self {
            LayerKind::Conv2d { kernel, stride, padding, in_channels, out_channels } => {
                let [h, w, c] = rank3(x)?;
                expect_channels(c, in_channels)?;
                Ok(vec![conv_out(h, kernel, stride, padding)?, conv_out(w, kernel, stride, padding)?, out_channels])
            }
            LayerKind::DepthwiseConv2d { kernel, stride, padding, channels } => {
                let [h, w, c] = rank3(x)?;
                expect_channels(c, channels)?;
                Ok(vec![conv_out(h, kernel, stride, padding)?, conv_out(w, kernel, stride, padding)?, c])
            }
            LayerKind::PointwiseConv2d { in_channels, out_channels } => {
                let [h, w, c] = rank3(x)?;
                expect_channels(c, in_channels)?;
                Ok(vec![h, w, out_channels])
            }
            LayerKind::Conv1d { kernel, stride, padding, in_channels, out_channels } => {
                let [t, c] = rank2(x)?;
                expect_channels(c, in_channels)?;
                Ok(vec![conv_out(t, kernel, stride, padding)?, out_channels])
            }
            LayerKind::FullyConnected { in_features, out_features } => {
                let n: usize = x.iter().product();
                if n != in_features {
                    return Err(format!("expects fan-in {in_features}, producer gives {x:?} ({n} elements)"));
                }
                Ok(vec![out_features])
            }
            LayerKind::Relu | LayerKind::Relu6 | LayerKind::Softmax | LayerKind::Dropout { .. } => Ok(x.to_vec()),
            LayerKind::AvgPool { size, stride } | LayerKind::MaxPool { size, stride } => match x.len() {
                2 => Ok(vec![conv_out(x[0], size, stride, 0)?, x[1]]),
                3 => Ok(vec![conv_out(x[0], size, stride, 0)?, conv_out(x[1], size, stride, 0)?, x[2]]),
                _ => Err(format!("pooling needs [T, C] or [H, W, C], got {x:?}")),
            },
            LayerKind::Lstm { input_size, hidden_size, return_sequences } => {
                let [t, f] = rank2(x)?;
                if f != input_size {
                    return Err(format!("expects {input_size} features per step, got {f}"));
                }
                Ok(if return_sequences { vec![t, hidden_size] } else { vec![hidden_size] })
            }
            LayerKind::ResidualAdd => {
                if inputs[0] != inputs[1] {
                    return Err(format!("branch shapes differ: {:?} vs {:?}", inputs[0], inputs[1]));
                }
                Ok(x.to_vec())
            }
            LayerKind::Flatten => Ok(vec![x.iter().product()]),
            LayerKind::Concat => {
                let lead = &x[..x.len().saturating_sub(1)];
                let mut last = 0;
                for s in inputs {
                    if s.is_empty() || s.len() != x.len() || &s[..s.len() - 1] != lead {
                        return Err(format!("concat inputs disagree on leading axes: {s:?} vs {x:?}"));
                    }
                    last += s[s.len() - 1];
                }
                let mut out = lead.to_vec();
                out.push(last);
                Ok(out)
            }
        }
    }
}

fn rank3(x: &[usize]) -> Result<[usize; 3], String> {
    <[usize; 3]>::try_from(x).map_err(|_| format!("expects [H, W, C], got {x:?}"))
}

fn rank2(x: &[usize]) -> Result<[usize; 2], String> {
    <[usize; 2]>::try_from(x).map_err(|_| format!("expects [T, F], got {x:?}"))
}

fn expect_channels(found: usize, expected: usize) -> Result<(), String> {
    if found == expected {
        Ok(())
    } else {
        Err(format!("expects {expected} input channels, got {found}"))
    }
}

/// A layer and the nodes it reads. Node 0 is the graph input and node
/// `i + 1` is the output of layer `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

impl Layer {
    pub fn new(kind: LayerKind, inputs: Vec<usize>) -> Self {
        Self { kind, inputs }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
