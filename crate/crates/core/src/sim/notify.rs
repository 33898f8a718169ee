use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("severity score {0} outside 0..=7")]
pub struct SeverityOutOfRange(pub u8);

fn raw_level(a: u8, b: u32) -> i64 {
    (a as i64 - 4).div_euclid(2) + (b / 2) as i64
}

/// Gateway alert tier `clamp(floor((A - 4) / 2) + floor(B / 2), 0, 3)` from
/// the collar severity score `A` and the detected animal count `B`.
pub fn notification_level(a: u8, b: u32) -> Result<u8, SeverityOutOfRange> {
    if a > 7 {
        return Err(SeverityOutOfRange(a));
    }
    Ok(raw_level(a, b).clamp(0, 3) as u8)
}

/// The same sum wrapped in `max(3, .)`. Every result is at least 3, so it
/// can never signal "no alert"; kept for comparison only.
pub fn notification_level_max_reading(a: u8, b: u32) -> Result<i64, SeverityOutOfRange> {
    if a > 7 {
        return Err(SeverityOutOfRange(a));
    }
    Ok(raw_level(a, b).max(3))
}
