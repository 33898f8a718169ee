//! Full-integer inference.
//!
//! Weights and activations are per-tensor INT8. Multiply-accumulate layers
//! sum `(q_x - z_x)(q_w - z_w)` into a 32-bit accumulator (64-bit when a
//! layer's worst case could overflow 32 bits), add an INT32 bias at scale
//! `s_x * s_w`, and requantize to the calibrated output parameters.
//! Element-wise layers use 256-entry lookup tables. LSTM gate pre-activations
//! use integer matmuls; the cell state stays in float, the hidden state is
//! requantized every step.

use std::collections::BTreeMap;

use super::float::{concat_last_axis, forward_float_trace, lstm_cell_update, pool_windows, softmax_last_axis};
use super::graph::{GraphError, GraphQuant, LayerQuant, ModelGraph};
use super::layer::{LayerKind, ParamKind};
use crate::quant::{
    compute_quant_params, dequantize_tensor, quantize_tensor, requantize, FloatTensor, QuantParams, QuantizedTensor,
    QMAX, QMIN,
};

/// Integer accumulator used by the MAC kernels.
pub trait Accumulator: Copy {
    fn from_i32(v: i32) -> Self;
    fn mac(self, a: i32, b: i32) -> Self;
    fn to_f64(self) -> f64;
}

impl Accumulator for i32 {
    #[inline(always)]
    fn from_i32(v: i32) -> Self {
        v
    }
    #[inline(always)]
    fn mac(self, a: i32, b: i32) -> Self {
        self + a * b
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Accumulator for i64 {
    #[inline(always)]
    fn from_i32(v: i32) -> Self {
        i64::from(v)
    }
    #[inline(always)]
    fn mac(self, a: i32, b: i32) -> Self {
        self + i64::from(a) * i64::from(b)
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Output range for LSTM hidden states, which `tanh` bounds to (-1, 1).
fn lstm_output_params() -> QuantParams {
    QuantParams::from_range(-1.0, 1.0).expect("static range")
}

fn softmax_output_params() -> QuantParams {
    QuantParams::new(1.0 / 256.0, QMIN).expect("static params")
}

/// Attaches INT8 parameters to `g`: activation ranges come from the min/max
/// of every node over the representative `samples`; weights are quantized
/// per tensor from their own min/max.
pub fn calibrate(g: &mut ModelGraph, samples: &[FloatTensor]) -> Result<(), GraphError> {
    if samples.is_empty() {
        return Err(crate::quant::QuantError::EmptyCalibration.into());
    }
    let n_nodes = g.layers().len() + 1;
    let mut ranges: Vec<Option<(f32, f32)>> = vec![None; n_nodes];
    for x in samples {
        let trace = forward_float_trace(g, x)?;
        for (node, t) in trace.iter().enumerate() {
            if let Some((lo, hi)) = t.min_max() {
                ranges[node] = Some(match ranges[node] {
                    None => (lo, hi),
                    Some((a, b)) => (a.min(lo), b.max(hi)),
                });
            }
        }
    }
    let params_of = |node: usize| -> Result<QuantParams, GraphError> {
        let (lo, hi) = ranges[node].unwrap_or((0.0, 0.0));
        Ok(QuantParams::from_range(lo, hi)?)
    };
    let input = params_of(0)?;
    let mut layers = Vec::with_capacity(g.layers().len());
    for (i, layer) in g.layers().iter().enumerate() {
        let output = match layer.kind {
            LayerKind::Softmax => softmax_output_params(),
            LayerKind::Lstm { .. } => lstm_output_params(),
            _ => params_of(i + 1)?,
        };
        let mut weights = BTreeMap::new();
        for (param, _) in layer.kind.param_shapes() {
            if param == ParamKind::Bias {
                continue;
            }
            let w = g.param(i, param);
            let qp = compute_quant_params([w])?;
            weights.insert(param, quantize_tensor(w, qp));
        }
        layers.push(LayerQuant { output, weights });
    }
    g.set_quant(Some(GraphQuant { input, layers }));
    Ok(())
}

/// Quantizes a float input with the graph's calibrated input parameters.
pub fn quantize_input(g: &ModelGraph, x: &FloatTensor) -> Result<QuantizedTensor, GraphError> {
    let q = g.quant().ok_or(GraphError::MissingQuantParams)?;
    if x.shape() != g.input_shape() {
        return Err(GraphError::InputShape { expected: g.input_shape().to_vec(), found: x.shape().to_vec() });
    }
    Ok(quantize_tensor(x, q.input))
}

/// Quantize, run [`forward_int8`], dequantize.
pub fn forward_int8_dequantized(g: &ModelGraph, x: &FloatTensor) -> Result<FloatTensor, GraphError> {
    let q = quantize_input(g, x)?;
    Ok(dequantize_tensor(&forward_int8(g, &q)?))
}

pub fn forward_int8(g: &ModelGraph, x: &QuantizedTensor) -> Result<QuantizedTensor, GraphError> {
    let quant = g.quant().ok_or(GraphError::MissingQuantParams)?;
    if x.shape() != g.input_shape() {
        return Err(GraphError::InputShape { expected: g.input_shape().to_vec(), found: x.shape().to_vec() });
    }
    let mut nodes: Vec<QuantizedTensor> = Vec::with_capacity(g.layers().len() + 1);
    nodes.push(requantize(x, quant.input));
    for (i, layer) in g.layers().iter().enumerate() {
        let lq = &quant.layers[i];
        let out_shape = g.node_shape(i + 1).to_vec();
        let out_p = lq.output;
        let input = &nodes[layer.inputs[0]];
        let data: Vec<i8> = match layer.kind {
            LayerKind::Conv2d { .. }
            | LayerKind::DepthwiseConv2d { .. }
            | LayerKind::PointwiseConv2d { .. }
            | LayerKind::Conv1d { .. }
            | LayerKind::FullyConnected { .. } => {
                let w = &lq.weights[&ParamKind::Weight];
                let bias = quantize_bias(g.param(i, ParamKind::Bias), input.params(), w.params());
                let multiplier =
                    f64::from(input.params().scale()) * f64::from(w.params().scale()) / f64::from(out_p.scale());
                let fan_in = mac_fan_in(&layer.kind);
                if needs_wide_accumulator(fan_in, &bias) {
                    let acc = mac_layer::<i64>(&layer.kind, input, &out_shape, w, &bias);
                    requantize_accumulators(&acc, multiplier, out_p)
                } else {
                    let acc = mac_layer::<i32>(&layer.kind, input, &out_shape, w, &bias);
                    requantize_accumulators(&acc, multiplier, out_p)
                }
            }
            LayerKind::Relu => map_lut(input, out_p, |v| v.max(0.0)),
            LayerKind::Relu6 => map_lut(input, out_p, |v| v.clamp(0.0, 6.0)),
            LayerKind::Dropout { .. } | LayerKind::Flatten => map_lut(input, out_p, |v| v),
            LayerKind::MaxPool { size, stride } => {
                let lut = build_lut(input.params(), out_p, |v| v);
                pool_windows(input.shape(), &out_shape, size, stride)
                    .iter()
                    .map(|idx| lut_get(&lut, idx.iter().map(|&k| input.data()[k]).max().unwrap()))
                    .collect()
            }
            LayerKind::AvgPool { size, stride } => {
                let zp = input.params().zero_point();
                let windows = pool_windows(input.shape(), &out_shape, size, stride);
                let m = f64::from(input.params().scale()) / (f64::from(out_p.scale()) * windows[0].len() as f64);
                let acc: Vec<i32> =
                    windows.iter().map(|idx| idx.iter().map(|&k| i32::from(input.data()[k]) - zp).sum()).collect();
                requantize_accumulators(&acc, m, out_p)
            }
            LayerKind::ResidualAdd => {
                let other = &nodes[layer.inputs[1]];
                let (pa, pb) = (input.params(), other.params());
                input
                    .data()
                    .iter()
                    .zip(other.data())
                    .map(|(&a, &b)| {
                        let real = f64::from(pa.scale()) * f64::from(i32::from(a) - pa.zero_point())
                            + f64::from(pb.scale()) * f64::from(i32::from(b) - pb.zero_point());
                        saturate((real / f64::from(out_p.scale())).round() + f64::from(out_p.zero_point()))
                    })
                    .collect()
            }
            LayerKind::Concat => {
                let parts: Vec<QuantizedTensor> = layer.inputs.iter().map(|&n| requantize(&nodes[n], out_p)).collect();
                let refs: Vec<&QuantizedTensor> = parts.iter().collect();
                concat_last_axis(&refs, |t| t.data(), |t| *t.shape().last().unwrap())
            }
            LayerKind::Softmax => {
                let real = dequantize_tensor(input);
                let width = *real.shape().last().unwrap();
                softmax_last_axis(real.data(), width).iter().map(|&p| out_p.quantize(p)).collect()
            }
            LayerKind::Lstm { hidden_size, return_sequences, .. } => {
                lstm_int8(input, lq, g.param(i, ParamKind::Bias).data(), hidden_size, return_sequences)
            }
        };
        nodes.push(QuantizedTensor::from_parts(out_shape, data, out_p));
    }
    Ok(nodes.pop().expect("validated graph has layers"))
}

fn saturate(v: f64) -> i8 {
    v.clamp(f64::from(QMIN), f64::from(QMAX)) as i8
}

fn quantize_bias(bias: &FloatTensor, x: QuantParams, w: QuantParams) -> Vec<i32> {
    let scale = f64::from(x.scale()) * f64::from(w.scale());
    bias.data()
        .iter()
        .map(|&b| (f64::from(b) / scale).round().clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32)
        .collect()
}

fn mac_fan_in(kind: &LayerKind) -> usize {
    match *kind {
        LayerKind::Conv2d { kernel, in_channels, .. } => kernel * kernel * in_channels,
        LayerKind::DepthwiseConv2d { kernel, .. } => kernel * kernel,
        LayerKind::PointwiseConv2d { in_channels, .. } => in_channels,
        LayerKind::Conv1d { kernel, in_channels, .. } => kernel * in_channels,
        LayerKind::FullyConnected { in_features, .. } => in_features,
        LayerKind::Lstm { input_size, hidden_size, .. } => input_size.max(hidden_size),
        _ => 0,
    }
}

/// Whether `fan_in` products of magnitude at most 255 * 255 plus the bias
/// could leave the i32 range.
pub fn needs_wide_accumulator(fan_in: usize, bias: &[i32]) -> bool {
    let max_bias = bias.iter().map(|b| i64::from(*b).abs()).max().unwrap_or(0);
    (fan_in as i64).saturating_mul(255 * 255).saturating_add(max_bias) > i64::from(i32::MAX)
}

fn requantize_accumulators<A: Accumulator>(acc: &[A], multiplier: f64, out: QuantParams) -> Vec<i8> {
    let zp = f64::from(out.zero_point());
    acc.iter().map(|a| saturate((a.to_f64() * multiplier).round() + zp)).collect()
}

fn build_lut(input: QuantParams, output: QuantParams, f: impl Fn(f32) -> f32) -> [i8; 256] {
    let mut lut = [0i8; 256];
    for (k, slot) in lut.iter_mut().enumerate() {
        let q = (k as i32 + QMIN) as i8;
        *slot = output.quantize(f(input.dequantize(q)));
    }
    lut
}

#[inline]
fn lut_get(lut: &[i8; 256], q: i8) -> i8 {
    lut[(i32::from(q) - QMIN) as usize]
}

fn map_lut(x: &QuantizedTensor, out: QuantParams, f: impl Fn(f32) -> f32) -> Vec<i8> {
    let lut = build_lut(x.params(), out, f);
    x.data().iter().map(|&q| lut_get(&lut, q)).collect()
}

fn mac_layer<A: Accumulator>(
    kind: &LayerKind,
    x: &QuantizedTensor,
    out: &[usize],
    w: &QuantizedTensor,
    bias: &[i32],
) -> Vec<A> {
    match *kind {
        LayerKind::Conv2d { kernel, stride, padding, .. } => conv2d_acc(x, out, w, bias, kernel, stride, padding),
        LayerKind::DepthwiseConv2d { kernel, stride, padding, .. } => {
            depthwise_acc(x, out, w, bias, kernel, stride, padding)
        }
        LayerKind::PointwiseConv2d { .. } => {
            let cin = x.shape()[2];
            dense_acc(x.data(), x.params().zero_point(), cin, w, bias)
        }
        LayerKind::Conv1d { kernel, stride, padding, .. } => conv1d_acc(x, out, w, bias, kernel, stride, padding),
        LayerKind::FullyConnected { .. } => dense_acc(x.data(), x.params().zero_point(), x.len(), w, bias),
        _ => unreachable!("not a MAC layer"),
    }
}

/// Raw INT32 accumulators of a quantized 2-D convolution, before
/// requantization. Padded taps contribute `z_x - z_x = 0`.
pub fn conv2d_accumulators(
    x: &QuantizedTensor,
    w: &QuantizedTensor,
    bias: &[i32],
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Vec<i32> {
    let (h, wd) = (x.shape()[0], x.shape()[1]);
    let out = [(h + 2 * padding - kernel) / stride + 1, (wd + 2 * padding - kernel) / stride + 1, w.shape()[0]];
    conv2d_acc(x, &out, w, bias, kernel, stride, padding)
}

fn conv2d_acc<A: Accumulator>(
    x: &QuantizedTensor,
    out: &[usize],
    w: &QuantizedTensor,
    bias: &[i32],
    k: usize,
    s: usize,
    p: usize,
) -> Vec<A> {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo, cout) = (out[0], out[1], out[2]);
    let (zx, zw) = (x.params().zero_point(), w.params().zero_point());
    let (xd, wdata) = (x.data(), w.data());
    let mut y = Vec::with_capacity(ho * wo * cout);
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = A::from_i32(bias[co]);
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix as usize >= wd {
                            continue;
                        }
                        let xrow = &xd[(iy as usize * wd + ix as usize) * cin..][..cin];
                        let wrow = &wdata[((co * k + ky) * k + kx) * cin..][..cin];
                        for (&xv, &wv) in xrow.iter().zip(wrow) {
                            acc = acc.mac(i32::from(xv) - zx, i32::from(wv) - zw);
                        }
                    }
                }
                y.push(acc);
            }
        }
    }
    y
}

fn depthwise_acc<A: Accumulator>(
    x: &QuantizedTensor,
    out: &[usize],
    w: &QuantizedTensor,
    bias: &[i32],
    k: usize,
    s: usize,
    p: usize,
) -> Vec<A> {
    let (h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (out[0], out[1]);
    let (zx, zw) = (x.params().zero_point(), w.params().zero_point());
    let (xd, wdata) = (x.data(), w.data());
    let mut y = Vec::with_capacity(ho * wo * c);
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut acc = A::from_i32(bias[ch]);
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                            continue;
                        }
                        let xv = i32::from(xd[(iy as usize * wd + ix as usize) * c + ch]) - zx;
                        acc = acc.mac(xv, i32::from(wdata[(ky * k + kx) * c + ch]) - zw);
                    }
                }
                y.push(acc);
            }
        }
    }
    y
}

fn conv1d_acc<A: Accumulator>(
    x: &QuantizedTensor,
    out: &[usize],
    w: &QuantizedTensor,
    bias: &[i32],
    k: usize,
    s: usize,
    p: usize,
) -> Vec<A> {
    let (t, cin) = (x.shape()[0], x.shape()[1]);
    let (to, cout) = (out[0], out[1]);
    let (zx, zw) = (x.params().zero_point(), w.params().zero_point());
    let (xd, wdata) = (x.data(), w.data());
    let mut y = Vec::with_capacity(to * cout);
    for ot in 0..to {
        for co in 0..cout {
            let mut acc = A::from_i32(bias[co]);
            for kt in 0..k {
                let it = (ot * s + kt) as isize - p as isize;
                if it < 0 || it as usize >= t {
                    continue;
                }
                let xrow = &xd[it as usize * cin..][..cin];
                let wrow = &wdata[(co * k + kt) * cin..][..cin];
                for (&xv, &wv) in xrow.iter().zip(wrow) {
                    acc = acc.mac(i32::from(xv) - zx, i32::from(wv) - zw);
                }
            }
            y.push(acc);
        }
    }
    y
}

/// `rows` of length `n_in` from `x` times `w` (`[out, n_in]`).
fn dense_acc<A: Accumulator>(x: &[i8], zx: i32, n_in: usize, w: &QuantizedTensor, bias: &[i32]) -> Vec<A> {
    let zw = w.params().zero_point();
    let n_out = w.shape()[0];
    let mut y = Vec::with_capacity(x.len() / n_in * n_out);
    for row in x.chunks(n_in) {
        for (o, wrow) in w.data().chunks(n_in).enumerate().take(n_out) {
            let mut acc = A::from_i32(bias[o]);
            for (&xv, &wv) in row.iter().zip(wrow) {
                acc = acc.mac(i32::from(xv) - zx, i32::from(wv) - zw);
            }
            y.push(acc);
        }
    }
    y
}

fn lstm_int8(x: &QuantizedTensor, lq: &LayerQuant, bias: &[f32], hidden: usize, return_sequences: bool) -> Vec<i8> {
    let features = x.shape()[1];
    let w_ih = &lq.weights[&ParamKind::Weight];
    let w_hh = &lq.weights[&ParamKind::Recurrent];
    let hp = lq.output;
    let sx = f64::from(x.params().scale()) * f64::from(w_ih.params().scale());
    let sh = f64::from(hp.scale()) * f64::from(w_hh.params().scale());
    let zero_bias = vec![0i32; 4 * hidden];
    let wide = needs_wide_accumulator(features.max(hidden), &zero_bias);

    let mut h_q = vec![hp.quantize(0.0); hidden];
    let mut h = vec![0.0f32; hidden];
    let mut c = vec![0.0f32; hidden];
    let mut gates = vec![0.0f32; 4 * hidden];
    let mut seq = Vec::new();
    for xt in x.data().chunks(features) {
        let (ax, ah): (Vec<f64>, Vec<f64>) = if wide {
            (
                dense_acc::<i64>(xt, x.params().zero_point(), features, w_ih, &zero_bias)
                    .iter()
                    .map(|a| a.to_f64())
                    .collect(),
                dense_acc::<i64>(&h_q, hp.zero_point(), hidden, w_hh, &zero_bias).iter().map(|a| a.to_f64()).collect(),
            )
        } else {
            (
                dense_acc::<i32>(xt, x.params().zero_point(), features, w_ih, &zero_bias)
                    .iter()
                    .map(|a| a.to_f64())
                    .collect(),
                dense_acc::<i32>(&h_q, hp.zero_point(), hidden, w_hh, &zero_bias).iter().map(|a| a.to_f64()).collect(),
            )
        };
        for (r, gate) in gates.iter_mut().enumerate() {
            *gate = (ax[r] * sx + ah[r] * sh + f64::from(bias[r])) as f32;
        }
        lstm_cell_update(&gates, &mut c, &mut h);
        for (q, &v) in h_q.iter_mut().zip(&h) {
            *q = hp.quantize(v);
        }
        if return_sequences {
            seq.extend_from_slice(&h_q);
        }
    }
    if return_sequences {
        seq
    } else {
        h_q
    }
}
