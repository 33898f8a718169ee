//! Discrete-event simulation of a fleet of gateways and collars.
//!
//! Gateways run a detector on one core (M7) and the radio and alert logic
//! on another (M4). Collars classify behavior and environment, keep a
//! short activity log and broadcast ACTIVITY messages when the fused label
//! is yellow or red.

mod devices;
mod engine;
pub mod log;
pub mod message;
mod notify;
pub mod radio;
pub mod scenario;

use thiserror::Error;

pub use devices::{
    classify_environment, collar_step, expire_activities, fuse_models, m4_step, m7_step, side_by_side_animals, Collar,
    CollarOutcome, CollarPipeline, Detector, FrameSource, Gateway, M4Outcome, ModelPipeline, Notice, PendingActivity,
};
pub use engine::{
    run_simulation, DeviceKind, DeviceReport, DropCounters, LatencyStats, LogReport, NotificationEvent, SimReport,
    Trigger,
};
pub use log::{log_activity, query_history, ActivityLog, ActivityRecord, History, RangeSummary};
pub use message::{DeviceMessage, MsgType, Payload, WireError};
pub use notify::{notification_level, notification_level_max_reading, SeverityOutOfRange};
pub use radio::RadioChannel;
pub use scenario::Scenario;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Severity(#[from] SeverityOutOfRange),
    #[error(transparent)]
    Weights(#[from] crate::nn::WeightFileError),
    #[error(transparent)]
    Graph(#[from] crate::nn::GraphError),
    #[error(transparent)]
    Detection(#[from] crate::detection::DetectionError),
    #[error(transparent)]
    Behavior(#[from] crate::behavior::BehaviorError),
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
}
