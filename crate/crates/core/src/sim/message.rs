//! Binary layout of messages exchanged between cores and devices. All
//! integers are little-endian.
//!
//! ```text
//! header        msg_type u8 (1 DETECTION, 2 ACTIVITY, 3 ACK, 4 NOTIFICATION)
//!               device_id u16
//!               timestamp u32 (ms)
//! DETECTION     count u8, then per detection:
//!                 class u8, score u16 (thousandths),
//!                 x_min, y_min, x_max, y_max u16 (value * 65535, rounded)
//! ACTIVITY      fused label u8 (0..=7), severity u8 (0 green, 1 yellow, 2 red)
//! ACK           timestamp u32 of the acknowledged DETECTION
//! NOTIFICATION  level u8 (0..=3), text length u8, UTF-8 text
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{BoundingBox, Detection};
use crate::fusion::{severity_of, FusedLabel};

pub const HEADER_LEN: usize = 7;
pub const DETECTION_RECORD_LEN: usize = 11;
pub const MAX_DETECTIONS: usize = u8::MAX as usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("message truncated: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid field {field}: {value}")]
    InvalidField { field: &'static str, value: u32 },
    #[error("notification text is not UTF-8")]
    BadText,
    #[error("cannot encode: {0}")]
    Unencodable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgType {
    Detection = 1,
    Activity = 2,
    Ack = 3,
    Notification = 4,
}

impl MsgType {
    pub fn name(self) -> &'static str {
        match self {
            MsgType::Detection => "DETECTION",
            MsgType::Activity => "ACTIVITY",
            MsgType::Ack => "ACK",
            MsgType::Notification => "NOTIFICATION",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Detection(Vec<Detection>),
    Activity { label: FusedLabel, severity: u8 },
    Ack { acked_timestamp: u32 },
    Notification { level: u8, text: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceMessage {
    pub device_id: u16,
    pub timestamp: u32,
    pub payload: Payload,
}

impl DeviceMessage {
    pub fn activity(device_id: u16, timestamp: u32, label: FusedLabel) -> Self {
        Self { device_id, timestamp, payload: Payload::Activity { label, severity: severity_of(label).rank() } }
    }

    pub fn msg_type(&self) -> MsgType {
        match self.payload {
            Payload::Detection(_) => MsgType::Detection,
            Payload::Activity { .. } => MsgType::Activity,
            Payload::Ack { .. } => MsgType::Ack,
            Payload::Notification { .. } => MsgType::Notification,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4);
        out.push(self.msg_type() as u8);
        out.extend_from_slice(&self.device_id.to_le_bytes());
        out.extend_from_slice(&self.timestamp.to_le_bytes());
        match &self.payload {
            Payload::Detection(dets) => {
                if dets.len() > MAX_DETECTIONS {
                    return Err(WireError::Unencodable(format!("{} detections", dets.len())));
                }
                out.push(dets.len() as u8);
                for d in dets {
                    let class = u8::try_from(d.class_id)
                        .map_err(|_| WireError::Unencodable(format!("class {}", d.class_id)))?;
                    out.push(class);
                    out.extend_from_slice(&((d.score.clamp(0.0, 1.0) * 1000.0).round() as u16).to_le_bytes());
                    for v in [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max] {
                        out.extend_from_slice(&fixed16(v).to_le_bytes());
                    }
                }
            }
            Payload::Activity { label, severity } => {
                out.push(label.value());
                out.push(*severity);
            }
            Payload::Ack { acked_timestamp } => out.extend_from_slice(&acked_timestamp.to_le_bytes()),
            Payload::Notification { level, text } => {
                let len = u8::try_from(text.len())
                    .map_err(|_| WireError::Unencodable(format!("text of {} bytes", text.len())))?;
                out.push(*level);
                out.push(len);
                out.extend_from_slice(text.as_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Cursor { bytes, pos: 0 };
        let ty = r.u8()?;
        let device_id = r.u16()?;
        let timestamp = r.u32()?;
        let payload = match ty {
            1 => {
                let n = r.u8()? as usize;
                let mut dets = Vec::with_capacity(n);
                for _ in 0..n {
                    let class_id = r.u8()? as usize;
                    let milli = r.u16()?;
                    if milli > 1000 {
                        return Err(WireError::InvalidField { field: "score", value: milli.into() });
                    }
                    let c: Vec<f64> = (0..4).map(|_| r.u16().map(unfixed16)).collect::<Result<_, _>>()?;
                    let bbox = BoundingBox::new(c[0], c[1], c[2], c[3])
                        .map_err(|_| WireError::InvalidField { field: "box", value: 0 })?;
                    dets.push(Detection { bbox, class_id, score: milli as f64 / 1000.0 });
                }
                Payload::Detection(dets)
            }
            2 => {
                let raw = r.u8()?;
                let label =
                    FusedLabel::new(raw).map_err(|_| WireError::InvalidField { field: "label", value: raw.into() })?;
                let severity = r.u8()?;
                if severity != severity_of(label).rank() {
                    return Err(WireError::InvalidField { field: "severity", value: severity.into() });
                }
                Payload::Activity { label, severity }
            }
            3 => Payload::Ack { acked_timestamp: r.u32()? },
            4 => {
                let level = r.u8()?;
                if level > 3 {
                    return Err(WireError::InvalidField { field: "level", value: level.into() });
                }
                let len = r.u8()? as usize;
                let text = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| WireError::BadText)?;
                Payload::Notification { level, text }
            }
            other => return Err(WireError::UnknownType(other)),
        };
        if r.pos != bytes.len() {
            return Err(WireError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { device_id, timestamp, payload })
    }
}

fn fixed16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn unfixed16(v: u16) -> f64 {
    v as f64 / 65535.0
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(WireError::Truncated { needed: end, have: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
