//! YOLOv1-style detection: output decoding, IoU and NMS, the training loss,
//! VOC 11-point mAP, and a line-based interchange format.

mod ap;
mod io;
mod loss;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ap::{average_precision, class_average_precision, mean_average_precision, ClassAp};
pub use io::{
    format_detections, format_ground_truth, parse_detections, parse_ground_truth, read_detections, read_ground_truth,
};
pub use loss::{yolo_loss, LAMBDA_COORD, LAMBDA_NOOBJ};

pub const DEFAULT_GRID: usize = 7;
pub const DEFAULT_BOXES: usize = 2;
pub const DEFAULT_CLASSES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("invalid box ({0}, {1}, {2}, {3})")]
    InvalidBox(f64, f64, f64, f64),
    #[error("tensor length {got} does not match S={grid}, B={boxes}, C={classes} (expected {expected})")]
    TensorShape { grid: usize, boxes: usize, classes: usize, expected: usize, got: usize },
    #[error("grid, boxes and classes must all be at least 1")]
    EmptyTensorShape,
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("ground truth box {index} has zero area")]
    ZeroAreaGroundTruth { index: usize },
    #[error("class {class_id} out of range for {classes} classes")]
    ClassOutOfRange { class_id: usize, classes: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, DetectionError> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if [x_min, y_min, x_max, y_max].iter().all(|&v| inside(v)) && x_min <= x_max && y_min <= y_max {
            Ok(Self { x_min, y_min, x_max, y_max })
        } else {
            Err(DetectionError::InvalidBox(x_min, y_min, x_max, y_max))
        }
    }

    /// Box from a center and size, clipped to the unit square.
    pub fn from_center_clamped(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let (w, h) = (w.max(0.0), h.max(0.0));
        let c = |v: f64| v.clamp(0.0, 1.0);
        let x_min = c(cx - w / 2.0);
        let y_min = c(cy - h / 2.0);
        Self { x_min, y_min, x_max: c(cx + w / 2.0).max(x_min), y_max: c(cy + h / 2.0).max(y_min) }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub bbox: BoundingBox,
}

pub type GroundTruth = Vec<GroundTruthBox>;
pub type DetectionsByImage = BTreeMap<u64, Vec<Detection>>;
pub type GroundTruthByImage = BTreeMap<u64, GroundTruth>;

/// Raw S x S x (5B + C) detector output. Cells are row-major; each holds B
/// tuples of (x, y, w, h, confidence) followed by C class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct YoloTensor {
    grid: usize,
    boxes: usize,
    classes: usize,
    data: Vec<f64>,
}

impl YoloTensor {
    pub fn new(grid: usize, boxes: usize, classes: usize, data: Vec<f64>) -> Result<Self, DetectionError> {
        if grid == 0 || boxes == 0 || classes == 0 {
            return Err(DetectionError::EmptyTensorShape);
        }
        let expected = grid * grid * (5 * boxes + classes);
        if data.len() != expected {
            return Err(DetectionError::TensorShape { grid, boxes, classes, expected, got: data.len() });
        }
        Ok(Self { grid, boxes, classes, data })
    }

    pub fn zeros(grid: usize, boxes: usize, classes: usize) -> Result<Self, DetectionError> {
        Self::new(grid, boxes, classes, vec![0.0; grid * grid * (5 * boxes + classes)])
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn boxes(&self) -> usize {
        self.boxes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell_len(&self) -> usize {
        5 * self.boxes + self.classes
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let n = self.cell_len();
        let start = (row * self.grid + col) * n;
        &self.data[start..start + n]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let n = self.cell_len();
        let start = (row * self.grid + col) * n;
        &mut self.data[start..start + n]
    }

    /// Predicted box `b` of a cell in image coordinates (w, h clamped to >= 0).
    pub fn predicted_box(&self, row: usize, col: usize, b: usize) -> BoundingBox {
        let p = &self.cell(row, col)[5 * b..5 * b + 5];
        let s = self.grid as f64;
        BoundingBox::from_center_clamped((col as f64 + p[0]) / s, (row as f64 + p[1]) / s, p[2], p[3])
    }
}

fn check_threshold(t: f64) -> Result<(), DetectionError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(DetectionError::Threshold(t))
    }
}

/// Turns a raw tensor into scored detections. Score is box confidence times
/// the largest class probability, clipped to [0, 1].
pub fn decode_yolo(t: &YoloTensor, score_threshold: f64) -> Result<Vec<Detection>, DetectionError> {
    check_threshold(score_threshold)?;
    let mut out = Vec::new();
    for row in 0..t.grid {
        for col in 0..t.grid {
            let cell = t.cell(row, col);
            let probs = &cell[5 * t.boxes..];
            let mut class_id = 0;
            for (i, v) in probs.iter().enumerate() {
                if *v > probs[class_id] {
                    class_id = i;
                }
            }
            let p = probs[class_id];
            for b in 0..t.boxes {
                let score = (cell[5 * b + 4] * p).clamp(0.0, 1.0);
                if score >= score_threshold {
                    out.push(Detection { bbox: t.predicted_box(row, col, b), class_id, score });
                }
            }
        }
    }
    Ok(out)
}

fn ranking(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)).then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
}

/// Greedy per-class non-maximum suppression. A detection survives unless a
/// kept detection of the same class overlaps it with IoU above the threshold.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>, DetectionError> {
    check_threshold(iou_threshold)?;
    let mut sorted = dets.to_vec();
    sorted.sort_by(ranking);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if !kept.iter().any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold) {
            kept.push(d);
        }
    }
    Ok(kept)
}
