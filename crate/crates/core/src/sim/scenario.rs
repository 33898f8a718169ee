//! JSON scenario description.
//!
//! ```json
//! {
//!   "horizon_ms": 10000,
//!   "radio": { "range_m": 200, "drop_probability": 0.0, "latency_ms": 5 },
//!   "devices": [
//!     { "kind": "gateway", "id": 1, "position": [0, 0], "first_frame_ms": 500,
//!       "frames": { "animals": [4] } },
//!     { "kind": "collar", "id": 2, "position": [50, 0],
//!       "pipeline": { "labels": [7] } }
//!   ]
//! }
//! ```
//!
//! Per-step inputs (frames, labels, observations) cycle when the scenario
//! runs longer than the list.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::log::DEFAULT_LOG_INTERVAL_MS;
use super::radio::DEFAULT_RANGE_M;
use super::SimError;
use crate::behavior::BehaviorLabel;
use crate::detection::{DEFAULT_BOXES, DEFAULT_CLASSES, DEFAULT_GRID};
use crate::fusion::{EnvLabel, FusedLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Used when the caller does not supply a seed.
    #[serde(default)]
    pub seed: u64,
    pub horizon_ms: u64,
    #[serde(default)]
    pub radio: RadioConfig,
    #[serde(default = "default_log_interval")]
    pub log_interval_ms: u64,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioConfig {
    #[serde(default = "default_range")]
    pub range_m: f64,
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default = "default_radio_latency")]
    pub latency_ms: u64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self { range_m: DEFAULT_RANGE_M, drop_probability: 0.0, latency_ms: default_radio_latency() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeviceSpec {
    #[serde(alias = "type1")]
    Gateway(GatewaySpec),
    #[serde(alias = "type2")]
    Collar(CollarSpec),
}

impl DeviceSpec {
    pub fn id(&self) -> u16 {
        match self {
            DeviceSpec::Gateway(g) => g.id,
            DeviceSpec::Collar(c) => c.id,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        match self {
            DeviceSpec::Gateway(g) => g.position,
            DeviceSpec::Collar(c) => c.position,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySpec {
    pub id: u16,
    pub position: [f64; 2],
    #[serde(default = "default_period")]
    pub frame_period_ms: u64,
    #[serde(default)]
    pub first_frame_ms: u64,
    #[serde(default = "default_inference")]
    pub inference_ms: u64,
    #[serde(default = "default_ipc_latency")]
    pub ipc_latency_ms: u64,
    /// Defaults to one frame period.
    #[serde(default)]
    pub activity_ttl_ms: Option<u64>,
    /// Detection classes counted as animals.
    #[serde(default = "default_animal_classes")]
    pub animal_classes: Vec<usize>,
    pub frames: FrameSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSpec {
    /// Animal counts per frame; boxes are laid out side by side.
    Animals(Vec<u32>),
    Scripted(Vec<Vec<ScriptedDetection>>),
    Tensors(TensorFrames),
    Detector(DetectorSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedDetection {
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorFrames {
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_boxes")]
    pub boxes: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_score_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
    pub data: Vec<Vec<f64>>,
}

/// A detector weight file fed with seeded uniform-noise images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub weights: PathBuf,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_boxes")]
    pub boxes: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_score_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollarSpec {
    pub id: u16,
    pub position: [f64; 2],
    #[serde(default = "default_period")]
    pub period_ms: u64,
    #[serde(default)]
    pub first_step_ms: u64,
    pub pipeline: PipelineSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineSpec {
    /// Fused labels emitted as is.
    Labels(Vec<FusedLabel>),
    /// Environment and behavior labels mapped through the label table.
    Observations(Vec<Observation>),
    Models(ModelPipelineSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    pub env: EnvLabel,
    pub behavior: BehaviorLabel,
}

/// Behavior windows are synthesized for the scripted behaviors; the
/// environment classifier sees seeded uniform-noise images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPipelineSpec {
    pub behavior_weights: PathBuf,
    pub env_weights: PathBuf,
    /// A one-layer 8 -> 8 head; when absent a head is fitted to the label
    /// table.
    #[serde(default)]
    pub fusion_weights: Option<PathBuf>,
    pub behaviors: Vec<BehaviorLabel>,
}

fn default_log_interval() -> u64 {
    DEFAULT_LOG_INTERVAL_MS
}
fn default_range() -> f64 {
    DEFAULT_RANGE_M
}
fn default_radio_latency() -> u64 {
    5
}
fn default_period() -> u64 {
    1000
}
fn default_inference() -> u64 {
    77
}
fn default_ipc_latency() -> u64 {
    1
}
fn default_animal_classes() -> Vec<usize> {
    // cow, horse, sheep; class 2 is person
    vec![0, 1, 3]
}
fn default_grid() -> usize {
    DEFAULT_GRID
}
fn default_boxes() -> usize {
    DEFAULT_BOXES
}
fn default_classes() -> usize {
    DEFAULT_CLASSES
}
fn default_score_threshold() -> f64 {
    0.2
}
fn default_nms_iou() -> f64 {
    0.5
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Parses a scenario file; relative weight paths resolve against the
    /// file's directory.
    pub fn from_path(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Io { path: path.display().to_string(), message: e.to_string() })?;
        let mut s = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            s.resolve_paths(dir);
        }
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for d in &mut self.devices {
            match d {
                DeviceSpec::Gateway(GatewaySpec { frames: FrameSpec::Detector(det), .. }) => fix(&mut det.weights),
                DeviceSpec::Collar(CollarSpec { pipeline: PipelineSpec::Models(m), .. }) => {
                    fix(&mut m.behavior_weights);
                    fix(&mut m.env_weights);
                    if let Some(p) = &mut m.fusion_weights {
                        fix(p);
                    }
                }
                _ => {}
            }
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        // Leave room for in-flight messages past the horizon.
        if self.horizon_ms > u32::MAX as u64 / 2 {
            return bad(format!("horizon_ms {} exceeds {}", self.horizon_ms, u32::MAX / 2));
        }
        let r = &self.radio;
        if !(r.range_m.is_finite() && r.range_m >= 0.0) {
            return bad(format!("radio.range_m {} must be finite and non-negative", r.range_m));
        }
        if !(0.0..=1.0).contains(&r.drop_probability) {
            return bad(format!("radio.drop_probability {} outside [0, 1]", r.drop_probability));
        }
        if self.log_interval_ms == 0 {
            return bad("log_interval_ms must be positive".into());
        }
        let mut ids = BTreeSet::new();
        for d in &self.devices {
            let id = d.id();
            if !ids.insert(id) {
                return bad(format!("duplicate device id {id}"));
            }
            if d.position().iter().any(|v| !v.is_finite()) {
                return bad(format!("device {id}: position must be finite"));
            }
            match d {
                DeviceSpec::Gateway(g) => validate_gateway(g)?,
                DeviceSpec::Collar(c) => validate_collar(c)?,
            }
        }
        Ok(())
    }
}

fn validate_gateway(g: &GatewaySpec) -> Result<(), SimError> {
    let bad = |m: String| Err(SimError::Scenario(format!("device {}: {m}", g.id)));
    if g.frame_period_ms == 0 {
        return bad("frame_period_ms must be positive".into());
    }
    if g.activity_ttl_ms == Some(0) {
        return bad("activity_ttl_ms must be positive".into());
    }
    match &g.frames {
        FrameSpec::Animals(v) if v.is_empty() => bad("frames.animals is empty".into()),
        FrameSpec::Animals(v) if v.iter().any(|&n| n as usize > super::message::MAX_DETECTIONS) => {
            bad("at most 255 animals per frame".into())
        }
        FrameSpec::Scripted(v) if v.is_empty() => bad("frames.scripted is empty".into()),
        FrameSpec::Scripted(v) => {
            for d in v.iter().flatten() {
                let [x0, y0, x1, y1] = d.bbox;
                let in_unit = d.bbox.iter().all(|c| (0.0..=1.0).contains(c));
                if !(in_unit && x0 <= x1 && y0 <= y1) {
                    return bad(format!("box {:?} must satisfy 0 <= min <= max <= 1", d.bbox));
                }
                if !(0.0..=1.0).contains(&d.score) {
                    return bad(format!("score {} outside [0, 1]", d.score));
                }
                if d.class_id > u8::MAX as usize {
                    return bad(format!("class {} does not fit in a byte", d.class_id));
                }
            }
            Ok(())
        }
        FrameSpec::Tensors(t) if t.data.is_empty() => bad("frames.tensors.data is empty".into()),
        _ => Ok(()),
    }
}

fn validate_collar(c: &CollarSpec) -> Result<(), SimError> {
    let bad = |m: &str| Err(SimError::Scenario(format!("device {}: {m}", c.id)));
    if c.period_ms == 0 {
        return bad("period_ms must be positive");
    }
    match &c.pipeline {
        PipelineSpec::Labels(v) if v.is_empty() => bad("pipeline.labels is empty"),
        PipelineSpec::Observations(v) if v.is_empty() => bad("pipeline.observations is empty"),
        PipelineSpec::Models(m) if m.behaviors.is_empty() => bad("pipeline.models.behaviors is empty"),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"{
        "horizon_ms": 10000,
        "devices": [
            { "kind": "gateway", "id": 1, "position": [0, 0], "first_frame_ms": 500,
              "frames": { "animals": [4] } },
            { "kind": "type2", "id": 2, "position": [50, 0],
              "pipeline": { "labels": [7] } }
        ]
    }"#;

    #[test]
    fn defaults_fill_in() {
        let s = Scenario::from_json(EXAMPLE).unwrap();
        assert_eq!(s.radio, RadioConfig::default());
        assert_eq!(s.log_interval_ms, 300_000);
        let DeviceSpec::Gateway(g) = &s.devices[0] else { panic!() };
        assert_eq!((g.frame_period_ms, g.inference_ms, g.activity_ttl_ms), (1000, 77, None));
        assert!(matches!(&s.devices[1], DeviceSpec::Collar(c) if c.period_ms == 1000));
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn errors_name_the_problem() {
        let err = |text: &str| Scenario::from_json(text).unwrap_err().to_string();
        assert!(err(r#"{"devices": []}"#).contains("horizon_ms"));
        assert!(err(r#"{"horizon_ms": 1, "bogus": 2}"#).contains("bogus"));
        assert!(err(r#"{"horizon_ms": 1, "devices": [{"kind": "collar", "id": 1, "position": [0,0], "pipeline": {"labels": [9]}}]}"#)
            .contains("9"));
        let dup = EXAMPLE.replace("\"id\": 2", "\"id\": 1");
        assert!(err(&dup).contains("duplicate device id 1"));
        assert!(err(&EXAMPLE.replace("[4]", "[]")).contains("animals is empty"));
        assert!(err(r#"{"horizon_ms": 1, "radio": {"drop_probability": 1.5}}"#).contains("drop_probability"));
    }

    #[test]
    fn relative_weight_paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        std::fs::write(
            &path,
            r#"{"horizon_ms": 10, "devices": [{"kind": "collar", "id": 1, "position": [0,0],
                "pipeline": {"models": {"behavior_weights": "b.herd", "env_weights": "/abs/e.herd", "behaviors": ["MOV"]}}}]}"#,
        )
        .unwrap();
        let s = Scenario::from_path(&path).unwrap();
        let DeviceSpec::Collar(CollarSpec { pipeline: PipelineSpec::Models(m), .. }) = &s.devices[0] else { panic!() };
        assert_eq!(m.behavior_weights, dir.path().join("b.herd"));
        assert_eq!(m.env_weights, PathBuf::from("/abs/e.herd"));
    }
}
