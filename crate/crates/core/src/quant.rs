//! Affine INT8 quantization.
//!
//! A real value `x` maps to `q = round(x / scale) + zero_point`, saturated to
//! the signed 8-bit range. `round` is half-away-from-zero. Parameters are
//! per tensor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const QMIN: i32 = i8::MIN as i32;
pub const QMAX: i32 = i8::MAX as i32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("scale must be finite and > 0, got {0}")]
    InvalidScale(f32),
    #[error("zero point {0} outside [-128, 127]")]
    InvalidZeroPoint(i32),
    #[error("calibration needs at least one sample")]
    EmptyCalibration,
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
}

/// Scale and zero point of an affine INT8 mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scale: f32,
    zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self, QuantError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(QuantError::InvalidScale(scale));
        }
        if !(QMIN..=QMAX).contains(&zero_point) {
            return Err(QuantError::InvalidZeroPoint(zero_point));
        }
        Ok(Self { scale, zero_point })
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    /// Quantizes one value.
    pub fn quantize(&self, x: f32) -> i8 {
        let q = (f64::from(x) / f64::from(self.scale)).round() + f64::from(self.zero_point);
        q.clamp(f64::from(QMIN), f64::from(QMAX)) as i8
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        ((i32::from(q) - self.zero_point) as f64 * f64::from(self.scale)) as f32
    }

    /// Real interval that maps into [-128, 127] without saturating.
    pub fn representable_range(&self) -> (f32, f32) {
        (self.dequantize(i8::MIN), self.dequantize(i8::MAX))
    }

    /// Fits parameters to an observed `[min, max]` range.
    ///
    /// The range is widened to contain zero so that zero padding and ReLU
    /// floors are exactly representable. A constant range `c == c` gets
    /// `scale = |c|` (or 1 for `c == 0`) and zero point 0, which makes `c`
    /// round-trip exactly.
    pub fn from_range(min: f32, max: f32) -> Result<Self, QuantError> {
        if !min.is_finite() {
            return Err(QuantError::NonFinite { index: 0 });
        }
        if !max.is_finite() {
            return Err(QuantError::NonFinite { index: 1 });
        }
        let (min, max) = if min <= max { (min, max) } else { (max, min) };
        if min == max {
            let scale = if min == 0.0 { 1.0 } else { min.abs() };
            return Self::new(scale, 0);
        }
        let lo = f64::from(min.min(0.0));
        let hi = f64::from(max.max(0.0));
        let scale = ((hi - lo) / f64::from(QMAX - QMIN)) as f32;
        let zp = (f64::from(QMIN) - lo / f64::from(scale)).round();
        Self::new(scale, zp.clamp(f64::from(QMIN), f64::from(QMAX)) as i32)
    }
}

/// Row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl FloatTensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, QuantError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(QuantError::ShapeMismatch { shape, len: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(QuantError::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    /// Internal constructor for kernels whose output length is known correct.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, QuantError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(QuantError::ShapeMismatch { shape, len: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Index of the largest element (first on ties).
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.data)
    }

    pub fn min_max(&self) -> Option<(f32, f32)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }
}

pub(crate) fn argmax(values: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Row-major INT8 tensor with its affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i8>, params: QuantParams) -> Result<Self, QuantError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(QuantError::ShapeMismatch { shape, len: data.len() });
        }
        Ok(Self { shape, data, params })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<i8>, params: QuantParams) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, params }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, i8)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Calibrates per-tensor parameters from the global min/max of all samples.
pub fn compute_quant_params<'a, I>(samples: I) -> Result<QuantParams, QuantError>
where
    I: IntoIterator<Item = &'a FloatTensor>,
{
    let mut range: Option<(f32, f32)> = None;
    let mut offset = 0;
    for t in samples {
        for (i, &v) in t.data().iter().enumerate() {
            if !v.is_finite() {
                return Err(QuantError::NonFinite { index: offset + i });
            }
            range = Some(match range {
                None => (v, v),
                Some((lo, hi)) => (lo.min(v), hi.max(v)),
            });
        }
        offset += t.len();
    }
    let (lo, hi) = range.ok_or(QuantError::EmptyCalibration)?;
    QuantParams::from_range(lo, hi)
}

pub fn quantize_tensor(x: &FloatTensor, params: QuantParams) -> QuantizedTensor {
    let data = x.data().iter().map(|&v| params.quantize(v)).collect();
    QuantizedTensor::from_parts(x.shape().to_vec(), data, params)
}

pub fn dequantize_tensor(q: &QuantizedTensor) -> FloatTensor {
    let p = q.params();
    let data = q.data().iter().map(|&v| p.dequantize(v)).collect();
    FloatTensor::from_parts(q.shape().to_vec(), data)
}

/// Re-expresses `q` under new parameters.
pub fn requantize(q: &QuantizedTensor, params: QuantParams) -> QuantizedTensor {
    if q.params() == params {
        return q.clone();
    }
    quantize_tensor(&dequantize_tensor(q), params)
}
