//! The `HERD` binary weight file. All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "HERD"
//! version      u16      1
//! layer_count  u16
//! input_rank   u8
//! input_dims   u32 * input_rank
//! input_quant  u8 flag, then (f32 scale, i32 zero_point) when 1
//! layers       layer_count records:
//!   kind          u8 tag (see `kind_tag`)
//!   input_count   u8
//!   inputs        u16 * input_count      node ids, 0 = graph input
//!   shape params  u32 * n(kind)          dropout stores its rate as f32 bits
//!   tensors       f32 * numel, one blob per parameter tensor in the order
//!                 weight, recurrent (lstm only), bias
//!   quant         u8 flag, then when 1: output (f32, i32) followed by one
//!                 (f32, i32) per non-bias tensor
//! ```
//!
//! Quantized weight shadows are not stored; they are recomputed from the
//! float tensors and the stored parameters on load.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use super::graph::{validate_graph, GraphError, GraphQuant, GraphSpec, LayerQuant, ModelGraph, WeightStore};
use super::layer::{Layer, LayerKind, ParamKind};
use crate::quant::{quantize_tensor, FloatTensor, QuantError, QuantParams};

pub const MAGIC: &[u8; 4] = b"HERD";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("bad magic bytes {0:?}, expected \"HERD\"")]
    BadMagic([u8; 4]),
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("layer {layer}: unknown kind tag {tag}")]
    UnknownKind { layer: usize, tag: u8 },
    #[error("{0} trailing bytes after last layer")]
    TrailingBytes(usize),
    #[error("graph does not fit the format: {0}")]
    Unencodable(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn kind_tag(kind: &LayerKind) -> u8 {
    match kind {
        LayerKind::Conv2d { .. } => 1,
        LayerKind::DepthwiseConv2d { .. } => 2,
        LayerKind::PointwiseConv2d { .. } => 3,
        LayerKind::Conv1d { .. } => 4,
        LayerKind::FullyConnected { .. } => 5,
        LayerKind::Relu => 6,
        LayerKind::Relu6 => 7,
        LayerKind::AvgPool { .. } => 8,
        LayerKind::MaxPool { .. } => 9,
        LayerKind::Softmax => 10,
        LayerKind::Lstm { .. } => 11,
        LayerKind::Dropout { .. } => 12,
        LayerKind::ResidualAdd => 13,
        LayerKind::Flatten => 14,
        LayerKind::Concat => 15,
    }
}

fn shape_params(kind: &LayerKind) -> Vec<u32> {
    let u = |v: usize| v as u32;
    match *kind {
        LayerKind::Conv2d { kernel, stride, padding, in_channels, out_channels }
        | LayerKind::Conv1d { kernel, stride, padding, in_channels, out_channels } => {
            vec![u(kernel), u(stride), u(padding), u(in_channels), u(out_channels)]
        }
        LayerKind::DepthwiseConv2d { kernel, stride, padding, channels } => {
            vec![u(kernel), u(stride), u(padding), u(channels)]
        }
        LayerKind::PointwiseConv2d { in_channels, out_channels } => vec![u(in_channels), u(out_channels)],
        LayerKind::FullyConnected { in_features, out_features } => vec![u(in_features), u(out_features)],
        LayerKind::AvgPool { size, stride } | LayerKind::MaxPool { size, stride } => vec![u(size), u(stride)],
        LayerKind::Lstm { input_size, hidden_size, return_sequences } => {
            vec![u(input_size), u(hidden_size), u32::from(return_sequences)]
        }
        LayerKind::Dropout { rate } => vec![rate.to_bits()],
        _ => Vec::new(),
    }
}

fn kind_from(tag: u8, r: &mut Reader<'_>, layer: usize) -> Result<LayerKind, WeightFileError> {
    let mut n =
        |k: usize| -> Result<Vec<usize>, WeightFileError> { (0..k).map(|_| r.u32().map(|v| v as usize)).collect() };
    Ok(match tag {
        1 | 4 => {
            let p = n(5)?;
            let (kernel, stride, padding, in_channels, out_channels) = (p[0], p[1], p[2], p[3], p[4]);
            if tag == 1 {
                LayerKind::Conv2d { kernel, stride, padding, in_channels, out_channels }
            } else {
                LayerKind::Conv1d { kernel, stride, padding, in_channels, out_channels }
            }
        }
        2 => {
            let p = n(4)?;
            LayerKind::DepthwiseConv2d { kernel: p[0], stride: p[1], padding: p[2], channels: p[3] }
        }
        3 => {
            let p = n(2)?;
            LayerKind::PointwiseConv2d { in_channels: p[0], out_channels: p[1] }
        }
        5 => {
            let p = n(2)?;
            LayerKind::FullyConnected { in_features: p[0], out_features: p[1] }
        }
        6 => LayerKind::Relu,
        7 => LayerKind::Relu6,
        8 | 9 => {
            let p = n(2)?;
            if tag == 8 {
                LayerKind::AvgPool { size: p[0], stride: p[1] }
            } else {
                LayerKind::MaxPool { size: p[0], stride: p[1] }
            }
        }
        10 => LayerKind::Softmax,
        11 => {
            let p = n(3)?;
            LayerKind::Lstm { input_size: p[0], hidden_size: p[1], return_sequences: p[2] != 0 }
        }
        12 => LayerKind::Dropout { rate: f32::from_bits(r.u32()?) },
        13 => LayerKind::ResidualAdd,
        14 => LayerKind::Flatten,
        15 => LayerKind::Concat,
        _ => return Err(WeightFileError::UnknownKind { layer, tag }),
    })
}

/// Serializes a validated graph (and its INT8 parameters, if calibrated).
pub fn encode_weights(g: &ModelGraph) -> Result<Vec<u8>, WeightFileError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let n_layers = u16::try_from(g.layers().len())
        .map_err(|_| WeightFileError::Unencodable(format!("{} layers", g.layers().len())))?;
    out.extend_from_slice(&n_layers.to_le_bytes());
    out.push(g.input_shape().len() as u8);
    for &d in g.input_shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let quant = g.quant();
    write_params(&mut out, quant.map(|q| q.input));
    for (i, layer) in g.layers().iter().enumerate() {
        out.push(kind_tag(&layer.kind));
        out.push(layer.inputs.len() as u8);
        for &node in &layer.inputs {
            let node = u16::try_from(node).map_err(|_| WeightFileError::Unencodable(format!("node id {node}")))?;
            out.extend_from_slice(&node.to_le_bytes());
        }
        for v in shape_params(&layer.kind) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (param, _) in layer.kind.param_shapes() {
            for v in g.param(i, param).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match quant.map(|q| &q.layers[i]) {
            None => out.push(0),
            Some(lq) => {
                write_params(&mut out, Some(lq.output));
                for q in lq.weights.values() {
                    out.extend_from_slice(&q.params().scale().to_le_bytes());
                    out.extend_from_slice(&q.params().zero_point().to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

fn write_params(out: &mut Vec<u8>, p: Option<QuantParams>) {
    match p {
        None => out.push(0),
        Some(p) => {
            out.push(1);
            out.extend_from_slice(&p.scale().to_le_bytes());
            out.extend_from_slice(&p.zero_point().to_le_bytes());
        }
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelGraph, WeightFileError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(WeightFileError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(WeightFileError::UnsupportedVersion(version));
    }
    let n_layers = r.u16()? as usize;
    let rank = r.u8()? as usize;
    let input_shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_, _>>()?;
    let input_quant = r.params()?;

    let mut layers = Vec::with_capacity(n_layers);
    let mut weights = WeightStore::with_layers(n_layers);
    let mut layer_quant: Vec<Option<(QuantParams, Vec<QuantParams>)>> = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let tag = r.u8()?;
        let n_inputs = r.u8()? as usize;
        let inputs: Vec<usize> = (0..n_inputs).map(|_| r.u16().map(usize::from)).collect::<Result<_, _>>()?;
        let kind = kind_from(tag, &mut r, i)?;
        let shapes = kind.param_shapes();
        for (param, shape) in &shapes {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| r.f32()).collect::<Result<_, _>>()?;
            weights.set(i, *param, FloatTensor::new(shape.clone(), data)?);
        }
        let lq = match r.params()? {
            None => None,
            Some(out) => {
                let n_w = shapes.iter().filter(|(p, _)| *p != ParamKind::Bias).count();
                let ws = (0..n_w).map(|_| r.raw_params()).collect::<Result<Vec<_>, _>>()?;
                Some((out, ws))
            }
        };
        layer_quant.push(lq);
        layers.push(Layer::new(kind, inputs));
    }
    if r.pos != bytes.len() {
        return Err(WeightFileError::TrailingBytes(bytes.len() - r.pos));
    }
    let mut g = validate_graph(GraphSpec { input_shape, layers, weights })?;
    if let Some(input) = input_quant {
        let mut lqs = Vec::with_capacity(n_layers);
        for (i, lq) in layer_quant.into_iter().enumerate() {
            let (output, wparams) = lq.ok_or(GraphError::MissingQuantParams)?;
            let mut map = BTreeMap::new();
            let params = g.layers()[i].kind.param_shapes().into_iter().filter(|(p, _)| *p != ParamKind::Bias);
            for ((param, _), qp) in params.zip(wparams) {
                map.insert(param, quantize_tensor(g.param(i, param), qp));
            }
            lqs.push(LayerQuant { output, weights: map });
        }
        g.set_quant(Some(GraphQuant { input, layers: lqs }));
    }
    Ok(g)
}

pub fn save_weights(g: &ModelGraph, path: impl AsRef<Path>) -> Result<(), WeightFileError> {
    let path = path.as_ref();
    let bytes = encode_weights(g)?;
    std::fs::write(path, bytes).map_err(|source| WeightFileError::Io { path: path.display().to_string(), source })
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelGraph, WeightFileError> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|source| WeightFileError::Io { path: path.display().to_string(), source })?;
    decode_weights(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightFileError> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(WeightFileError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32, WeightFileError> {
        Ok(f32::from_bits(self.u32()?))
    }

    fn raw_params(&mut self) -> Result<QuantParams, WeightFileError> {
        let scale = self.f32()?;
        let zp = self.u32()? as i32;
        Ok(QuantParams::new(scale, zp)?)
    }

    fn params(&mut self) -> Result<Option<QuantParams>, WeightFileError> {
        match self.u8()? {
            0 => Ok(None),
            _ => self.raw_params().map(Some),
        }
    }
}
