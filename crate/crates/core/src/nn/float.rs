//! Float reference kernels.
//!
//! Every kernel visits each multiply-accumulate explicitly (padded taps
//! included, as multiplications by zero) and reports it through an
//! [`Instrument`], so counters can be checked against what actually runs.

use super::graph::{GraphError, ModelGraph};
use super::layer::{LayerKind, ParamKind};
use crate::quant::FloatTensor;

/// Observer for executed multiply-accumulates and parameter reads.
pub trait Instrument {
    #[inline(always)]
    fn mac(&mut self) {}
    #[inline(always)]
    fn param_read(&mut self, _layer: usize, _param: ParamKind, _index: usize) {}
}

/// The no-op observer used by [`forward_float`].
pub struct Silent;

impl Instrument for Silent {}

pub fn forward_float(g: &ModelGraph, x: &FloatTensor) -> Result<FloatTensor, GraphError> {
    forward_float_instrumented(g, x, &mut Silent)
}

pub fn forward_float_instrumented<I: Instrument>(
    g: &ModelGraph,
    x: &FloatTensor,
    inst: &mut I,
) -> Result<FloatTensor, GraphError> {
    let mut nodes = forward_float_nodes(g, x, inst)?;
    Ok(nodes.pop().expect("validated graph has layers"))
}

/// Every node activation: index 0 is the input, `i + 1` the output of layer `i`.
pub fn forward_float_trace(g: &ModelGraph, x: &FloatTensor) -> Result<Vec<FloatTensor>, GraphError> {
    forward_float_nodes(g, x, &mut Silent)
}

fn forward_float_nodes<I: Instrument>(
    g: &ModelGraph,
    x: &FloatTensor,
    inst: &mut I,
) -> Result<Vec<FloatTensor>, GraphError> {
    if x.shape() != g.input_shape() {
        return Err(GraphError::InputShape { expected: g.input_shape().to_vec(), found: x.shape().to_vec() });
    }
    let mut nodes = Vec::with_capacity(g.layers().len() + 1);
    nodes.push(x.clone());
    for (i, layer) in g.layers().iter().enumerate() {
        let out_shape = g.node_shape(i + 1).to_vec();
        let input = &nodes[layer.inputs[0]];
        let mut k = Kernel { g, layer: i, inst: &mut *inst };
        let data = match layer.kind {
            LayerKind::Conv2d { kernel, stride, padding, .. } => k.conv2d(input, &out_shape, kernel, stride, padding),
            LayerKind::DepthwiseConv2d { kernel, stride, padding, .. } => {
                k.depthwise(input, &out_shape, kernel, stride, padding)
            }
            LayerKind::PointwiseConv2d { .. } => k.pointwise(input, &out_shape),
            LayerKind::Conv1d { kernel, stride, padding, .. } => k.conv1d(input, &out_shape, kernel, stride, padding),
            LayerKind::FullyConnected { .. } => k.fully_connected(input, &out_shape),
            LayerKind::Lstm { hidden_size, return_sequences, .. } => k.lstm(input, hidden_size, return_sequences),
            LayerKind::Relu => input.data().iter().map(|v| v.max(0.0)).collect(),
            LayerKind::Relu6 => input.data().iter().map(|v| v.clamp(0.0, 6.0)).collect(),
            LayerKind::Dropout { .. } | LayerKind::Flatten => input.data().to_vec(),
            LayerKind::Softmax => softmax_last_axis(input.data(), *input.shape().last().unwrap()),
            LayerKind::AvgPool { size, stride } => pool(input, &out_shape, size, stride, PoolOp::Avg),
            LayerKind::MaxPool { size, stride } => pool(input, &out_shape, size, stride, PoolOp::Max),
            LayerKind::ResidualAdd => {
                let b = &nodes[layer.inputs[1]];
                input.data().iter().zip(b.data()).map(|(a, b)| a + b).collect()
            }
            LayerKind::Concat => {
                let parts: Vec<&FloatTensor> = layer.inputs.iter().map(|&n| &nodes[n]).collect();
                concat_last_axis(&parts, |t| t.data(), |t| *t.shape().last().unwrap())
            }
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::NonFinite { layer: i, kind: layer.kind.name() });
        }
        nodes.push(FloatTensor::from_parts(out_shape, data));
    }
    Ok(nodes)
}

struct Kernel<'a, I: Instrument> {
    g: &'a ModelGraph,
    layer: usize,
    inst: &'a mut I,
}

impl<I: Instrument> Kernel<'_, I> {
    fn w(&mut self, param: ParamKind, index: usize) -> f32 {
        self.inst.param_read(self.layer, param, index);
        self.g.param(self.layer, param).data()[index]
    }

    fn conv2d(&mut self, x: &FloatTensor, out: &[usize], k: usize, s: usize, p: usize) -> Vec<f32> {
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ho, wo, cout) = (out[0], out[1], out[2]);
        let xd = x.data();
        let mut y = Vec::with_capacity(ho * wo * cout);
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = self.w(ParamKind::Bias, co);
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                            for ci in 0..cin {
                                let wv = self.w(ParamKind::Weight, ((co * k + ky) * k + kx) * cin + ci);
                                let xv = if inside { xd[(iy as usize * w + ix as usize) * cin + ci] } else { 0.0 };
                                acc += xv * wv;
                                self.inst.mac();
                            }
                        }
                    }
                    y.push(acc);
                }
            }
        }
        y
    }

    fn depthwise(&mut self, x: &FloatTensor, out: &[usize], k: usize, s: usize, p: usize) -> Vec<f32> {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ho, wo) = (out[0], out[1]);
        let xd = x.data();
        let mut y = Vec::with_capacity(ho * wo * c);
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut acc = self.w(ParamKind::Bias, ch);
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                            let wv = self.w(ParamKind::Weight, (ky * k + kx) * c + ch);
                            let xv = if inside { xd[(iy as usize * w + ix as usize) * c + ch] } else { 0.0 };
                            acc += xv * wv;
                            self.inst.mac();
                        }
                    }
                    y.push(acc);
                }
            }
        }
        y
    }

    fn pointwise(&mut self, x: &FloatTensor, out: &[usize]) -> Vec<f32> {
        let cin = x.shape()[2];
        let cout = out[2];
        let mut y = Vec::with_capacity(out.iter().product());
        for px in x.data().chunks(cin) {
            for co in 0..cout {
                let mut acc = self.w(ParamKind::Bias, co);
                for (ci, &xv) in px.iter().enumerate() {
                    acc += xv * self.w(ParamKind::Weight, co * cin + ci);
                    self.inst.mac();
                }
                y.push(acc);
            }
        }
        y
    }

    fn conv1d(&mut self, x: &FloatTensor, out: &[usize], k: usize, s: usize, p: usize) -> Vec<f32> {
        let (t, cin) = (x.shape()[0], x.shape()[1]);
        let (to, cout) = (out[0], out[1]);
        let xd = x.data();
        let mut y = Vec::with_capacity(to * cout);
        for ot in 0..to {
            for co in 0..cout {
                let mut acc = self.w(ParamKind::Bias, co);
                for kt in 0..k {
                    let it = (ot * s + kt) as isize - p as isize;
                    let inside = it >= 0 && (it as usize) < t;
                    for ci in 0..cin {
                        let wv = self.w(ParamKind::Weight, (co * k + kt) * cin + ci);
                        let xv = if inside { xd[it as usize * cin + ci] } else { 0.0 };
                        acc += xv * wv;
                        self.inst.mac();
                    }
                }
                y.push(acc);
            }
        }
        y
    }

    fn fully_connected(&mut self, x: &FloatTensor, out: &[usize]) -> Vec<f32> {
        let n_in = x.len();
        (0..out[0])
            .map(|o| {
                let mut acc = self.w(ParamKind::Bias, o);
                for (i, &xv) in x.data().iter().enumerate() {
                    acc += xv * self.w(ParamKind::Weight, o * n_in + i);
                    self.inst.mac();
                }
                acc
            })
            .collect()
    }

    fn lstm(&mut self, x: &FloatTensor, hidden: usize, return_sequences: bool) -> Vec<f32> {
        let (steps, features) = (x.shape()[0], x.shape()[1]);
        let mut h = vec![0.0f32; hidden];
        let mut c = vec![0.0f32; hidden];
        let mut seq = Vec::with_capacity(if return_sequences { steps * hidden } else { 0 });
        let mut gates = vec![0.0f32; 4 * hidden];
        for xt in x.data().chunks(features) {
            for (row, gate) in gates.iter_mut().enumerate() {
                let mut acc = self.w(ParamKind::Bias, row);
                for (f, &xv) in xt.iter().enumerate() {
                    acc += xv * self.w(ParamKind::Weight, row * features + f);
                    self.inst.mac();
                }
                for (j, &hv) in h.iter().enumerate() {
                    acc += hv * self.w(ParamKind::Recurrent, row * hidden + j);
                    self.inst.mac();
                }
                *gate = acc;
            }
            lstm_cell_update(&gates, &mut c, &mut h);
            if return_sequences {
                seq.extend_from_slice(&h);
            }
        }
        if return_sequences {
            seq
        } else {
            h
        }
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Applies the i, f, g, o gate nonlinearities and advances `(c, h)`.
pub(crate) fn lstm_cell_update(gates: &[f32], c: &mut [f32], h: &mut [f32]) {
    let hidden = h.len();
    for j in 0..hidden {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[hidden + j]);
        let g = gates[2 * hidden + j].tanh();
        let o = sigmoid(gates[3 * hidden + j]);
        c[j] = f * c[j] + i * g;
        h[j] = o * c[j].tanh();
    }
}

pub(crate) fn softmax_last_axis(data: &[f32], width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(width) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f32 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

#[derive(Clone, Copy)]
pub(crate) enum PoolOp {
    Avg,
    Max,
}

/// Window positions of a valid (unpadded) pool, as flat input offsets
/// grouped per output element. Shared by the float and INT8 paths.
pub(crate) fn pool_windows(in_shape: &[usize], out_shape: &[usize], size: usize, stride: usize) -> Vec<Vec<usize>> {
    let c = *in_shape.last().unwrap();
    let mut windows = Vec::with_capacity(out_shape.iter().product());
    if in_shape.len() == 2 {
        for ot in 0..out_shape[0] {
            for ch in 0..c {
                windows.push((0..size).map(|k| (ot * stride + k) * c + ch).collect());
            }
        }
    } else {
        let w = in_shape[1];
        for oy in 0..out_shape[0] {
            for ox in 0..out_shape[1] {
                for ch in 0..c {
                    let mut idx = Vec::with_capacity(size * size);
                    for ky in 0..size {
                        for kx in 0..size {
                            idx.push(((oy * stride + ky) * w + ox * stride + kx) * c + ch);
                        }
                    }
                    windows.push(idx);
                }
            }
        }
    }
    windows
}

fn pool(x: &FloatTensor, out: &[usize], size: usize, stride: usize, op: PoolOp) -> Vec<f32> {
    let xd = x.data();
    pool_windows(x.shape(), out, size, stride)
        .iter()
        .map(|idx| match op {
            PoolOp::Avg => idx.iter().map(|&i| xd[i]).sum::<f32>() / idx.len() as f32,
            PoolOp::Max => idx.iter().map(|&i| xd[i]).fold(f32::NEG_INFINITY, f32::max),
        })
        .collect()
}

pub(crate) fn concat_last_axis<T, V: Copy>(
    parts: &[&T],
    data: impl Fn(&T) -> &[V],
    width: impl Fn(&T) -> usize,
) -> Vec<V> {
    let rows = data(parts[0]).len() / width(parts[0]);
    let mut out = Vec::new();
    for r in 0..rows {
        for p in parts {
            let w = width(p);
            out.extend_from_slice(&data(p)[r * w..(r + 1) * w]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::GraphBuilder;

    fn fc_identity(n: usize) -> ModelGraph {
        let mut b = GraphBuilder::new(vec![n]);
        let node = b.push(LayerKind::FullyConnected { in_features: n, out_features: n });
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        b.set_param(node, ParamKind::Weight, FloatTensor::new(vec![n, n], eye).unwrap());
        b.set_param(node, ParamKind::Bias, FloatTensor::zeros(vec![n]));
        b.build().unwrap()
    }

    #[test]
    fn identity_fc_passes_input_through() {
        let g = fc_identity(5);
        let x = FloatTensor::new(vec![5], vec![1.0, -2.0, 0.5, 3.0, 0.0]).unwrap();
        assert_eq!(forward_float(&g, &x).unwrap(), x);
    }

    #[test]
    fn relu6_clips() {
        let mut b = GraphBuilder::new(vec![3]);
        b.push(LayerKind::Relu6);
        let g = b.build().unwrap();
        let x = FloatTensor::new(vec![3], vec![-1.0, 3.0, 9.0]).unwrap();
        assert_eq!(forward_float(&g, &x).unwrap().data(), &[0.0, 3.0, 6.0]);
    }

    #[test]
    fn dropout_is_identity_at_inference() {
        let mut b = GraphBuilder::new(vec![4]);
        b.push(LayerKind::Dropout { rate: 0.5 });
        let g = b.build().unwrap();
        let x = FloatTensor::new(vec![4], vec![1.0, -1.0, 2.0, 0.25]).unwrap();
        assert_eq!(forward_float(&g, &x).unwrap(), x);
    }

    #[test]
    fn zero_lstm_step_gives_zero_hidden() {
        let mut b = GraphBuilder::new(vec![1, 3]);
        let node = b.push(LayerKind::Lstm { input_size: 3, hidden_size: 4, return_sequences: false });
        b.set_param(node, ParamKind::Weight, FloatTensor::zeros(vec![16, 3]));
        b.set_param(node, ParamKind::Recurrent, FloatTensor::zeros(vec![16, 4]));
        b.set_param(node, ParamKind::Bias, FloatTensor::zeros(vec![16]));
        let g = b.build().unwrap();
        let x = FloatTensor::new(vec![1, 3], vec![0.7, -1.2, 3.0]).unwrap();
        assert_eq!(forward_float(&g, &x).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn lstm_single_step_matches_hand_cell() {
        // one hidden unit, one feature: gates = w*x + b
        let mut b = GraphBuilder::new(vec![1, 1]);
        let node = b.push(LayerKind::Lstm { input_size: 1, hidden_size: 1, return_sequences: false });
        b.set_param(node, ParamKind::Weight, FloatTensor::new(vec![4, 1], vec![1.0, 0.5, -1.0, 2.0]).unwrap());
        b.set_param(node, ParamKind::Recurrent, FloatTensor::zeros(vec![4, 1]));
        b.set_param(node, ParamKind::Bias, FloatTensor::new(vec![4], vec![0.0, 0.0, 0.5, 0.0]).unwrap());
        let g = b.build().unwrap();
        let x = FloatTensor::new(vec![1, 1], vec![2.0]).unwrap();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let c = s(2.0) * (-1.5f64).tanh();
        let h = s(4.0) * c.tanh();
        let got = forward_float(&g, &x).unwrap().data()[0];
        assert!((f64::from(got) - h).abs() < 1e-6);
    }

    #[test]
    fn conv2d_hand_values() {
        // 3x3 single channel, 2x2 kernel of ones, no padding
        let mut b = GraphBuilder::new(vec![3, 3, 1]);
        let n = b.push(LayerKind::Conv2d { kernel: 2, stride: 1, padding: 0, in_channels: 1, out_channels: 1 });
        b.set_param(n, ParamKind::Weight, FloatTensor::filled(vec![1, 2, 2, 1], 1.0));
        b.set_param(n, ParamKind::Bias, FloatTensor::new(vec![1], vec![0.5]).unwrap());
        let g = b.build().unwrap();
        let x = FloatTensor::new(vec![3, 3, 1], (1..=9).map(|v| v as f32).collect()).unwrap();
        assert_eq!(forward_float(&g, &x).unwrap().data(), &[12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_last_axis(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0], 3);
        assert!((p[..3].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((p[3] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let g = fc_identity(3);
        let x = FloatTensor::zeros(vec![4]);
        assert!(matches!(forward_float(&g, &x), Err(GraphError::InputShape { .. })));
    }
}
