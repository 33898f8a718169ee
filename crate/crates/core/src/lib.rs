//! Building blocks for a two-tier livestock monitoring fleet.
//!
//! * [`quant`]: affine INT8 quantization with min/max calibration.
//! * [`nn`]: a small layer-graph engine (float and INT8 forward passes),
//!   FLOPs/params/peak-activation accounting, magnitude pruning and the
//!   `HERD` weight file.
//! * [`detection`]: YOLOv1 grid decoding, NMS, the YOLOv1 training loss and
//!   VOC-style average precision.
//! * [`behavior`]: accelerometer windowing, augmentation and window
//!   classification.
//! * [`fusion`]: decision-level fusion of environment and behavior
//!   predictions into eight activity labels with a severity tier.
//! * [`sim`]: a deterministic discrete-event simulator of gateways and
//!   collar devices, including the message wire format and the on-device
//!   activity log.

pub mod behavior;
pub mod detection;
pub mod fusion;
pub mod nn;
pub mod quant;
pub mod sim;

pub use quant::{FloatTensor, QuantParams, QuantizedTensor};
