//! Accelerometer pipeline: CSV ingestion, sliding windows with majority
//! labels, augmentations, a synthetic sinusoid generator, and window
//! classification through a CNN-LSTM graph.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::float::softmax_last_axis;
use crate::nn::{forward_float, GraphError, LayerKind, ModelGraph};
use crate::quant::FloatTensor;

pub const SAMPLE_RATE_HZ: u32 = 25;
/// 10 s at 25 Hz.
pub const DEFAULT_WINDOW_LEN: usize = 250;
/// 1 s at 25 Hz.
pub const DEFAULT_STEP: usize = 25;
pub const NUM_BEHAVIORS: usize = 5;

#[derive(Debug, Error)]
pub enum BehaviorError {
    #[error("window length and step must be at least 1")]
    ZeroWindow,
    #[error("series of {len} samples is shorter than window {window}")]
    TooShort { len: usize, window: usize },
    #[error("loop span is empty")]
    EmptySpan,
    #[error("loop span [{start}, {end}) exceeds window of {len}")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("noise sigma {0} must be finite and non-negative")]
    BadSigma(f64),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("graph expects input {expected:?} but window is {got:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("graph output {0:?} is not a {NUM_BEHAVIORS}-class vector")]
    OutputShape(Vec<usize>),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BehaviorLabel {
    /// Resting while standing.
    Res = 0,
    /// Moving.
    Mov = 1,
    /// Attacking.
    Att = 2,
    /// Feeding from a stall.
    Fes = 3,
    /// Grazing.
    Grz = 4,
}

impl BehaviorLabel {
    pub const ALL: [BehaviorLabel; NUM_BEHAVIORS] =
        [BehaviorLabel::Res, BehaviorLabel::Mov, BehaviorLabel::Att, BehaviorLabel::Fes, BehaviorLabel::Grz];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            BehaviorLabel::Res => "RES",
            BehaviorLabel::Mov => "MOV",
            BehaviorLabel::Att => "ATT",
            BehaviorLabel::Fes => "FES",
            BehaviorLabel::Grz => "GRZ",
        }
    }
}

impl fmt::Display for BehaviorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for BehaviorLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|l| l.code() == s).ok_or_else(|| format!("unknown behavior label {s:?}"))
    }
}

/// One reading, in g, at sample index `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelSample {
    pub t: u64,
    pub ax: f32,
    pub ay: f32,
    pub az: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample: AccelSample,
    pub label: BehaviorLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccelWindow {
    pub samples: Vec<AccelSample>,
    pub label: Option<BehaviorLabel>,
}

impl AccelWindow {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[len, 3]` tensor of (ax, ay, az).
    pub fn to_tensor(&self) -> FloatTensor {
        let data = self.samples.iter().flat_map(|s| [s.ax, s.ay, s.az]).collect();
        FloatTensor::from_parts(vec![self.samples.len(), 3], data)
    }

    /// Copy with the axis values replaced, keeping time stamps and label.
    fn with_values(&self, values: impl Iterator<Item = [f32; 3]>) -> Self {
        let samples =
            self.samples.iter().zip(values).map(|(s, [ax, ay, az])| AccelSample { t: s.t, ax, ay, az }).collect();
        Self { samples, label: self.label }
    }

    fn values(&self) -> impl DoubleEndedIterator<Item = [f32; 3]> + Clone + '_ {
        self.samples.iter().map(|s| [s.ax, s.ay, s.az])
    }
}

/// Majority label; ties go to the label of the center sample.
pub fn majority_label(labels: &[BehaviorLabel]) -> Option<BehaviorLabel> {
    let center = *labels.get(labels.len() / 2)?;
    let mut counts = [0usize; NUM_BEHAVIORS];
    for l in labels {
        counts[l.index()] += 1;
    }
    let top = *counts.iter().max().expect("non-empty");
    if counts[center.index()] == top {
        return Some(center);
    }
    BehaviorLabel::ALL.into_iter().find(|l| counts[l.index()] == top)
}

/// Windows starting at 0, step, 2*step, ... that fit entirely in the series.
pub fn slide_windows(
    series: &[LabeledSample],
    window_len: usize,
    step: usize,
) -> Result<Vec<AccelWindow>, BehaviorError> {
    if window_len == 0 || step == 0 {
        return Err(BehaviorError::ZeroWindow);
    }
    if series.len() < window_len {
        return Err(BehaviorError::TooShort { len: series.len(), window: window_len });
    }
    let count = (series.len() - window_len) / step + 1;
    Ok((0..count)
        .map(|k| {
            let chunk = &series[k * step..k * step + window_len];
            let labels: Vec<BehaviorLabel> = chunk.iter().map(|s| s.label).collect();
            AccelWindow { samples: chunk.iter().map(|s| s.sample).collect(), label: majority_label(&labels) }
        })
        .collect())
}

/// Placeholder for sensor filtering; returns the series unchanged.
pub fn preprocess(series: Vec<LabeledSample>) -> Vec<LabeledSample> {
    series
}

/// Reverses the order of the readings. Time stamps stay ascending.
pub fn augment_reverse(w: &AccelWindow) -> AccelWindow {
    w.with_values(w.values().rev())
}

/// Fills the window by repeating `[start, start + span)` from its beginning.
pub fn augment_loop(w: &AccelWindow, start: usize, span: usize) -> Result<AccelWindow, BehaviorError> {
    if span == 0 {
        return Err(BehaviorError::EmptySpan);
    }
    if start + span > w.len() {
        return Err(BehaviorError::SpanOutOfRange { start, end: start + span, len: w.len() });
    }
    let part: Vec<[f32; 3]> = w.values().skip(start).take(span).collect();
    Ok(w.with_values(part.into_iter().cycle()))
}

/// Adds independent N(0, sigma^2) noise to every axis of every sample.
pub fn augment_gaussian_noise(w: &AccelWindow, sigma: f64, seed: u64) -> Result<AccelWindow, BehaviorError> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(BehaviorError::BadSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(w.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("checked sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = || normal.sample(&mut rng) as f32;
    let noisy: Vec<[f32; 3]> = w.values().map(|[x, y, z]| [x + noise(), y + noise(), z + noise()]).collect();
    Ok(w.with_values(noisy.into_iter()))
}

/// Class probabilities for one window. A trailing softmax layer is used as
/// is; otherwise softmax is applied to the graph output.
pub fn classify_window(g: &ModelGraph, w: &AccelWindow) -> Result<Vec<f32>, BehaviorError> {
    let expected = g.input_shape().to_vec();
    let got = vec![w.len(), 3];
    if expected != got {
        return Err(BehaviorError::InputShape { expected, got });
    }
    if g.output_shape() != [NUM_BEHAVIORS] {
        return Err(BehaviorError::OutputShape(g.output_shape().to_vec()));
    }
    let mut out = forward_float(g, &w.to_tensor())?.into_data();
    if !matches!(g.layers().last().map(|l| &l.kind), Some(LayerKind::Softmax)) {
        out = softmax_last_axis(&out, NUM_BEHAVIORS);
    }
    Ok(out)
}

pub fn predict_label(g: &ModelGraph, w: &AccelWindow) -> Result<BehaviorLabel, BehaviorError> {
    let p = classify_window(g, w)?;
    Ok(crate::quant::argmax(&p).and_then(BehaviorLabel::from_index).expect("five outputs"))
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    t: u64,
    ax: f32,
    ay: f32,
    az: f32,
    label: String,
}

/// Parses `t,ax,ay,az,label` rows. Errors report the 1-based line number.
pub fn parse_accel_csv<R: std::io::Read>(reader: R) -> Result<Vec<LabeledSample>, BehaviorError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| BehaviorError::Csv { line: 1, message: e.to_string() })?.clone();
    if !headers.iter().eq(["t", "ax", "ay", "az", "label"]) {
        return Err(BehaviorError::Csv { line: 1, message: "expected header t,ax,ay,az,label".into() });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec =
            rec.map_err(|e| BehaviorError::Csv { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: CsvRow =
            rec.deserialize(Some(&headers)).map_err(|e| BehaviorError::Csv { line, message: e.to_string() })?;
        if ![row.ax, row.ay, row.az].iter().all(|v| v.is_finite()) {
            return Err(BehaviorError::Csv { line, message: "non-finite acceleration".into() });
        }
        let label = row.label.parse().map_err(|message| BehaviorError::Csv { line, message })?;
        out.push(LabeledSample { sample: AccelSample { t: row.t, ax: row.ax, ay: row.ay, az: row.az }, label });
    }
    Ok(out)
}

pub fn read_accel_csv(path: &Path) -> Result<Vec<LabeledSample>, BehaviorError> {
    let file =
        std::fs::File::open(path).map_err(|source| BehaviorError::Io { path: path.display().to_string(), source })?;
    parse_accel_csv(std::io::BufReader::new(file))
}

/// Per-class signal frequency (Hz) and amplitude (g) of the synthetic set.
pub const SYNTHETIC_FAMILIES: [(f32, f32); NUM_BEHAVIORS] =
    [(0.3, 0.05), (0.8, 0.4), (1.5, 1.0), (2.5, 0.6), (4.0, 0.3)];
pub const SYNTHETIC_NOISE: f32 = 0.05;

/// A synthetic reading sequence for one behavior: with
/// `theta = 2 pi f (1 + j) t / 25 + phi`, the axes are `A sin(theta)`,
/// `A/2 cos(theta)` and `1 + A/4 sin(2 theta)`, plus N(0, 0.05^2) noise.
/// `j` is uniform in [-0.05, 0.05] and `phi` uniform in [0, 2 pi).
pub fn synthetic_series<R: Rng>(label: BehaviorLabel, len: usize, start_t: u64, rng: &mut R) -> Vec<LabeledSample> {
    let (freq, amp) = SYNTHETIC_FAMILIES[label.index()];
    let f = freq * (1.0 + rng.random_range(-0.05..=0.05f32));
    let phi = rng.random_range(0.0..std::f32::consts::TAU);
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("positive sigma");
    (0..len as u64)
        .map(|k| {
            let t = start_t + k;
            let theta = std::f32::consts::TAU * f * k as f32 / SAMPLE_RATE_HZ as f32 + phi;
            let sample = AccelSample {
                t,
                ax: amp * theta.sin() + noise.sample(rng),
                ay: amp / 2.0 * theta.cos() + noise.sample(rng),
                az: 1.0 + amp / 4.0 * (2.0 * theta).sin() + noise.sample(rng),
            };
            LabeledSample { sample, label }
        })
        .collect()
}

/// `per_class` labeled windows for each behavior, in class order.
pub fn synthetic_windows(per_class: usize, window_len: usize, seed: u64) -> Vec<AccelWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BehaviorLabel::ALL
        .into_iter()
        .flat_map(|label| (0..per_class).map(move |_| label))
        .map(|label| {
            let series = synthetic_series(label, window_len, 0, &mut rng);
            AccelWindow { samples: series.iter().map(|s| s.sample).collect(), label: Some(label) }
        })
        .collect()
}
