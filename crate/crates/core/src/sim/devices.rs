//! Device state and the per-step behavior of each core.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::log::{ActivityLog, ActivityRecord};
use super::message::{DeviceMessage, Payload, MAX_DETECTIONS};
use super::notify::notification_level;
use super::scenario::{CollarSpec, FrameSpec, GatewaySpec, Observation, PipelineSpec};
use super::SimError;
use crate::behavior::{classify_window, synthetic_series, AccelWindow, BehaviorLabel, NUM_BEHAVIORS};
use crate::detection::{decode_yolo, nms, BoundingBox, Detection, YoloTensor};
use crate::fusion::{
    fit_fusion_head, fuse_decision, map_labels_table, severity_of, table_dataset, FusedLabel, FusionHead, Severity,
    NUM_ENVS,
};
use crate::nn::float::softmax_last_axis;
use crate::nn::{forward_float, load_weights, LayerKind, ModelGraph};
use crate::quant::FloatTensor;

/// Where a gateway's frames come from.
#[derive(Debug, Clone)]
pub enum FrameSource {
    Scripted(Vec<Vec<Detection>>),
    Tensors { tensors: Vec<YoloTensor>, score_threshold: f64, nms_iou: f64 },
    Detector(Box<Detector>),
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub graph: ModelGraph,
    pub grid: usize,
    pub boxes: usize,
    pub classes: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub rng: ChaCha8Rng,
}

impl FrameSource {
    fn frame(&mut self, index: usize) -> Result<Vec<Detection>, SimError> {
        Ok(match self {
            FrameSource::Scripted(frames) => frames[index % frames.len()].clone(),
            FrameSource::Tensors { tensors, score_threshold, nms_iou } => {
                let t = &tensors[index % tensors.len()];
                nms(&decode_yolo(t, *score_threshold)?, *nms_iou)?
            }
            FrameSource::Detector(d) => {
                let image = noise_image(d.graph.input_shape(), &mut d.rng);
                let out = forward_float(&d.graph, &image)?;
                let t = YoloTensor::new(d.grid, d.boxes, d.classes, out.data().iter().map(|&v| v as f64).collect())?;
                nms(&decode_yolo(&t, d.score_threshold)?, d.nms_iou)?
            }
        })
    }
}

fn noise_image(shape: &[usize], rng: &mut ChaCha8Rng) -> FloatTensor {
    let n = shape.iter().product();
    FloatTensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random::<f32>()).collect())
}

/// `n` non-overlapping class-0 boxes across the middle of the frame.
pub fn side_by_side_animals(n: u32) -> Vec<Detection> {
    let w = 1.0 / n.max(1) as f64;
    (0..n)
        .map(|i| Detection {
            bbox: BoundingBox::new(i as f64 * w + 0.1 * w, 0.3, (i + 1) as f64 * w - 0.1 * w, 0.7).expect("ordered"),
            class_id: 0,
            score: 0.9,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingActivity {
    pub arrived: u64,
    pub token: u64,
    pub from: u16,
    pub label: FusedLabel,
}

/// A fixed gateway: an M7 core running the detector and an M4 core that
/// owns the radio, joined by two one-way IPC queues.
#[derive(Debug, Clone)]
pub struct Gateway {
    pub id: u16,
    pub frame_period_ms: u64,
    pub first_frame_ms: u64,
    pub inference_ms: u64,
    pub ipc_latency_ms: u64,
    pub activity_ttl_ms: u64,
    pub animal_classes: Vec<usize>,
    pub to_m4: VecDeque<Vec<u8>>,
    pub to_m7: VecDeque<Vec<u8>>,
    pub pending: Vec<PendingActivity>,
    source: FrameSource,
    frame_index: usize,
}

impl Gateway {
    pub fn new(id: u16, source: FrameSource) -> Self {
        Self {
            id,
            frame_period_ms: 1000,
            first_frame_ms: 0,
            inference_ms: 77,
            ipc_latency_ms: 1,
            activity_ttl_ms: 1000,
            animal_classes: vec![0, 1, 3],
            to_m4: VecDeque::new(),
            to_m7: VecDeque::new(),
            pending: Vec::new(),
            source,
            frame_index: 0,
        }
    }

    pub fn from_spec(spec: &GatewaySpec, seed: u64) -> Result<Self, SimError> {
        let source = match &spec.frames {
            FrameSpec::Animals(counts) => {
                FrameSource::Scripted(counts.iter().map(|&n| side_by_side_animals(n)).collect())
            }
            FrameSpec::Scripted(frames) => FrameSource::Scripted(
                frames
                    .iter()
                    .map(|f| {
                        f.iter()
                            .map(|d| {
                                let [x0, y0, x1, y1] = d.bbox;
                                Ok(Detection {
                                    bbox: BoundingBox::new(x0, y0, x1, y1)?,
                                    class_id: d.class_id,
                                    score: d.score,
                                })
                            })
                            .collect::<Result<Vec<_>, SimError>>()
                    })
                    .collect::<Result<_, _>>()?,
            ),
            FrameSpec::Tensors(t) => FrameSource::Tensors {
                tensors: t
                    .data
                    .iter()
                    .map(|d| YoloTensor::new(t.grid, t.boxes, t.classes, d.clone()))
                    .collect::<Result<_, _>>()?,
                score_threshold: t.score_threshold,
                nms_iou: t.nms_iou,
            },
            FrameSpec::Detector(d) => {
                let graph = load_weights(&d.weights)?;
                let expected = d.grid * d.grid * (5 * d.boxes + d.classes);
                if graph.output_shape().iter().product::<usize>() != expected {
                    return Err(SimError::Scenario(format!(
                        "device {}: detector output {:?} does not hold {expected} values",
                        spec.id,
                        graph.output_shape()
                    )));
                }
                FrameSource::Detector(Box::new(Detector {
                    graph,
                    grid: d.grid,
                    boxes: d.boxes,
                    classes: d.classes,
                    score_threshold: d.score_threshold,
                    nms_iou: d.nms_iou,
                    rng: ChaCha8Rng::seed_from_u64(seed ^ (spec.id as u64) << 32),
                }))
            }
        };
        let mut g = Self::new(spec.id, source);
        g.frame_period_ms = spec.frame_period_ms;
        g.first_frame_ms = spec.first_frame_ms;
        g.inference_ms = spec.inference_ms;
        g.ipc_latency_ms = spec.ipc_latency_ms;
        g.activity_ttl_ms = spec.activity_ttl_ms.unwrap_or(spec.frame_period_ms);
        g.animal_classes = spec.animal_classes.clone();
        Ok(g)
    }

    fn take_latest(&mut self, keep: impl Fn(&PendingActivity) -> bool) -> Option<PendingActivity> {
        let (taken, kept): (Vec<_>, Vec<_>) = self.pending.drain(..).partition(|p| !keep(p));
        self.pending = kept;
        taken.into_iter().max_by_key(|p| (p.arrived, p.token))
    }

    /// Records an ACTIVITY heard over the radio.
    pub fn receive_activity(&mut self, p: PendingActivity) {
        self.pending.push(p);
    }
}

/// An alert decided by the M4 core.
#[derive(Debug, Clone, PartialEq)]
pub struct Notice {
    pub level: u8,
    pub a: u8,
    pub b: u32,
    pub message: DeviceMessage,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct M4Outcome {
    /// Timestamp of the DETECTION that was handled.
    pub handled: Option<u32>,
    pub ack: Option<DeviceMessage>,
    pub notice: Option<Notice>,
    pub malformed: bool,
}

/// Runs one frame through the detector and queues the DETECTION for the
/// M4 core. At most 255 detections are sent, highest scores first.
pub fn m7_step(d: &mut Gateway, frame_time: u64) -> Result<DeviceMessage, SimError> {
    let mut dets = d.source.frame(d.frame_index)?;
    d.frame_index += 1;
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(MAX_DETECTIONS);
    let msg = DeviceMessage { device_id: d.id, timestamp: frame_time as u32, payload: Payload::Detection(dets) };
    d.to_m4.push_back(msg.encode()?);
    Ok(msg)
}

/// Handles one queued DETECTION: acknowledges it, folds in the most recent
/// pending ACTIVITY and decides whether to alert.
pub fn m4_step(d: &mut Gateway, now: u64) -> Result<M4Outcome, SimError> {
    let Some(bytes) = d.to_m4.pop_front() else {
        return Ok(M4Outcome::default());
    };
    let msg = match DeviceMessage::decode(&bytes) {
        Ok(m @ DeviceMessage { payload: Payload::Detection(_), .. }) => m,
        Ok(_) | Err(_) => return Ok(M4Outcome { malformed: true, ..Default::default() }),
    };
    let Payload::Detection(dets) = &msg.payload else { unreachable!() };
    let b = dets.iter().filter(|x| d.animal_classes.contains(&x.class_id)).count() as u32;
    let ack = DeviceMessage {
        device_id: d.id,
        timestamp: now as u32,
        payload: Payload::Ack { acked_timestamp: msg.timestamp },
    };
    d.to_m7.push_back(ack.encode()?);
    let a = d.take_latest(|_| false).map_or(0, |p| p.label.value());
    let notice = decide(d.id, now, a, b)?;
    Ok(M4Outcome { handled: Some(msg.timestamp), ack: Some(ack), notice, malformed: false })
}

/// Timer path for ACTIVITY messages that no DETECTION picked up: every
/// pending activity older than the TTL is consumed with `B = 0`.
pub fn expire_activities(d: &mut Gateway, now: u64) -> Result<Option<Notice>, SimError> {
    let ttl = d.activity_ttl_ms;
    match d.take_latest(|p| p.arrived + ttl > now) {
        Some(p) => decide(d.id, now, p.label.value(), 0),
        None => Ok(None),
    }
}

fn decide(id: u16, now: u64, a: u8, b: u32) -> Result<Option<Notice>, SimError> {
    let level = notification_level(a, b)?;
    if level == 0 {
        return Ok(None);
    }
    let message = DeviceMessage {
        device_id: id,
        timestamp: now as u32,
        payload: Payload::Notification { level, text: format!("level {level}: severity {a}, {b} animals") },
    };
    Ok(Some(Notice { level, a, b, message }))
}

/// How a collar turns sensor input into a fused label.
#[derive(Debug, Clone)]
pub enum CollarPipeline {
    Labels(Vec<FusedLabel>),
    Observations(Vec<Observation>),
    Models(Box<ModelPipeline>),
}

#[derive(Debug, Clone)]
pub struct ModelPipeline {
    pub behavior: ModelGraph,
    pub env: ModelGraph,
    pub head: FusionHead,
    pub behaviors: Vec<BehaviorLabel>,
    pub rng: ChaCha8Rng,
}

/// Environment probabilities for one image.
pub fn classify_environment(g: &ModelGraph, image: &FloatTensor) -> Result<[f64; NUM_ENVS], SimError> {
    if g.output_shape() != [NUM_ENVS] {
        return Err(SimError::Scenario(format!("environment graph output {:?} is not 3 classes", g.output_shape())));
    }
    let mut out = forward_float(g, image)?.into_data();
    if !matches!(g.layers().last().map(|l| &l.kind), Some(LayerKind::Softmax)) {
        out = softmax_last_axis(&out, NUM_ENVS);
    }
    Ok(std::array::from_fn(|i| out[i] as f64))
}

/// Full on-collar pipeline: behavior and environment classifiers feeding
/// the fusion head.
pub fn fuse_models(
    behavior: &ModelGraph,
    env: &ModelGraph,
    head: &FusionHead,
    window: &AccelWindow,
    image: &FloatTensor,
) -> Result<FusedLabel, SimError> {
    let p = classify_window(behavior, window)?;
    let beh_p: [f64; NUM_BEHAVIORS] = std::array::from_fn(|i| p[i] as f64);
    let env_p = classify_environment(env, image)?;
    Ok(fuse_decision(head, &env_p, &beh_p)?.0)
}

/// A wearable collar: classifies periodically, keeps a short activity log
/// and broadcasts ACTIVITY when the severity is yellow or red.
#[derive(Debug, Clone)]
pub struct Collar {
    pub id: u16,
    pub period_ms: u64,
    pub first_step_ms: u64,
    pub log_interval_ms: u64,
    pub log: ActivityLog,
    pipeline: CollarPipeline,
    step_index: usize,
    next_log_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollarOutcome {
    pub label: FusedLabel,
    pub logged: bool,
    pub broadcast: Option<DeviceMessage>,
}

impl Collar {
    pub fn new(id: u16, pipeline: CollarPipeline, log_interval_ms: u64) -> Self {
        Self {
            id,
            period_ms: 1000,
            first_step_ms: 0,
            log_interval_ms,
            log: ActivityLog::new(),
            pipeline,
            step_index: 0,
            next_log_at: None,
        }
    }

    pub fn from_spec(spec: &CollarSpec, log_interval_ms: u64, seed: u64) -> Result<Self, SimError> {
        let pipeline = match &spec.pipeline {
            PipelineSpec::Labels(v) => CollarPipeline::Labels(v.clone()),
            PipelineSpec::Observations(v) => CollarPipeline::Observations(v.clone()),
            PipelineSpec::Models(m) => {
                let head = match &m.fusion_weights {
                    Some(p) => FusionHead::from_graph(&load_weights(p)?)?,
                    None => fit_fusion_head(&table_dataset(), 2000, 1.0, 7)?.0,
                };
                CollarPipeline::Models(Box::new(ModelPipeline {
                    behavior: load_weights(&m.behavior_weights)?,
                    env: load_weights(&m.env_weights)?,
                    head,
                    behaviors: m.behaviors.clone(),
                    rng: ChaCha8Rng::seed_from_u64(seed ^ (spec.id as u64) << 32),
                }))
            }
        };
        let mut c = Self::new(spec.id, pipeline, log_interval_ms);
        c.period_ms = spec.period_ms;
        c.first_step_ms = spec.first_step_ms;
        Ok(c)
    }

    fn next_label(&mut self, now: u64) -> Result<FusedLabel, SimError> {
        let i = self.step_index;
        self.step_index += 1;
        match &mut self.pipeline {
            CollarPipeline::Labels(v) => Ok(v[i % v.len()]),
            CollarPipeline::Observations(v) => {
                let o = v[i % v.len()];
                Ok(map_labels_table(o.env, o.behavior))
            }
            CollarPipeline::Models(m) => {
                let label = m.behaviors[i % m.behaviors.len()];
                let len = m.behavior.input_shape()[0];
                let start = now * crate::behavior::SAMPLE_RATE_HZ as u64 / 1000;
                let series = synthetic_series(label, len, start, &mut m.rng);
                let window = AccelWindow { samples: series.iter().map(|s| s.sample).collect(), label: Some(label) };
                let image = noise_image(m.env.input_shape(), &mut m.rng);
                fuse_models(&m.behavior, &m.env, &m.head, &window, &image)
            }
        }
    }
}

/// One collar cycle: classify, log on the log cadence, and build an
/// ACTIVITY broadcast for yellow or red severities.
pub fn collar_step(d: &mut Collar, now: u64) -> Result<CollarOutcome, SimError> {
    let label = d.next_label(now)?;
    let due = d.next_log_at.is_none_or(|t| now >= t);
    if due {
        d.log.push(ActivityRecord::new(now as u32, label));
        d.next_log_at = Some(now + d.log_interval_ms);
    }
    let broadcast = (severity_of(label) != Severity::Green).then(|| DeviceMessage::activity(d.id, now as u32, label));
    Ok(CollarOutcome { label, logged: due, broadcast })
}
