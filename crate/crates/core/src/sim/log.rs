//! Fixed-capacity FIFO of recent activity records kept on a collar device.
//!
//! Serialized form: `"HLOG"`, version u8, count u16, then `count` 6-byte
//! records (timestamp u32, fused label u8, severity u8), little-endian.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::message::WireError;
use crate::fusion::{severity_of, FusedLabel};

pub const LOG_CAPACITY: usize = 100;
pub const RECORD_LEN: usize = 6;
pub const LOG_HEADER_LEN: usize = 7;
/// Five minutes of simulated time.
pub const DEFAULT_LOG_INTERVAL_MS: u64 = 5 * 60 * 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityRecord {
    pub timestamp: u32,
    pub label: FusedLabel,
    pub severity: u8,
}

impl ActivityRecord {
    pub fn new(timestamp: u32, label: FusedLabel) -> Self {
        Self { timestamp, label, severity: severity_of(label).rank() }
    }

    pub fn encode(&self) -> [u8; RECORD_LEN] {
        let t = self.timestamp.to_le_bytes();
        [t[0], t[1], t[2], t[3], self.label.value(), self.severity]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityLog {
    records: VecDeque<ActivityRecord>,
}

impl ActivityLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &ActivityRecord> {
        self.records.iter()
    }

    /// Appends, evicting the oldest record when full.
    pub fn push(&mut self, rec: ActivityRecord) {
        if self.records.len() == LOG_CAPACITY {
            self.records.pop_front();
        }
        self.records.push_back(rec);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LOG_HEADER_LEN + RECORD_LEN * self.records.len());
        out.extend_from_slice(b"HLOG");
        out.push(1);
        out.extend_from_slice(&(self.records.len() as u16).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.encode());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < LOG_HEADER_LEN {
            return Err(WireError::Truncated { needed: LOG_HEADER_LEN, have: bytes.len() });
        }
        if &bytes[..4] != b"HLOG" || bytes[4] != 1 {
            return Err(WireError::InvalidField { field: "log header", value: bytes[4].into() });
        }
        let count = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
        if count > LOG_CAPACITY {
            return Err(WireError::InvalidField { field: "log count", value: count as u32 });
        }
        let needed = LOG_HEADER_LEN + count * RECORD_LEN;
        if bytes.len() != needed {
            return Err(if bytes.len() < needed {
                WireError::Truncated { needed, have: bytes.len() }
            } else {
                WireError::TrailingBytes(bytes.len() - needed)
            });
        }
        let mut log = Self::new();
        for chunk in bytes[LOG_HEADER_LEN..].chunks_exact(RECORD_LEN) {
            let label = FusedLabel::new(chunk[4])
                .map_err(|_| WireError::InvalidField { field: "label", value: chunk[4].into() })?;
            if chunk[5] != severity_of(label).rank() {
                return Err(WireError::InvalidField { field: "severity", value: chunk[5].into() });
            }
            let timestamp = u32::from_le_bytes(chunk[..4].try_into().expect("4 bytes"));
            log.records.push_back(ActivityRecord { timestamp, label, severity: chunk[5] });
        }
        Ok(log)
    }
}

pub fn log_activity(log: &mut ActivityLog, rec: ActivityRecord) {
    log.push(rec);
}

/// Confined animals mostly feed in a stanchion; free-ranging ones mostly
/// move and graze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RangeSummary {
    Confined,
    FreeRanging,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct History {
    pub records: Vec<ActivityRecord>,
    pub summary: RangeSummary,
}

/// Records at or after `since`, oldest first, with a range summary:
/// CONFINED when more than half are label 2 and none are label 3,
/// FREE_RANGING when labels 1 and 3 together exceed half, MIXED otherwise.
pub fn query_history(log: &ActivityLog, since: u32) -> History {
    let records: Vec<ActivityRecord> = log.records().filter(|r| r.timestamp >= since).copied().collect();
    let count = |v: u8| records.iter().filter(|r| r.label.value() == v).count();
    let n = records.len();
    let summary = if n > 0 && 2 * count(2) > n && count(3) == 0 {
        RangeSummary::Confined
    } else if n > 0 && 2 * (count(1) + count(3)) > n {
        RangeSummary::FreeRanging
    } else {
        RangeSummary::Mixed
    };
    History { records, summary }
}
