//! Line-delimited detection and ground truth records:
//!
//! ```text
//! image_id,class_id,score,x_min,y_min,x_max,y_max   (detections)
//! image_id,class_id,x_min,y_min,x_max,y_max         (ground truth)
//! ```
//!
//! Coordinates are normalized and written with 6 decimals. Blank lines and
//! lines starting with `#` are skipped.

use std::fmt::Write as _;
use std::path::Path;

use super::{BoundingBox, Detection, DetectionError, DetectionsByImage, GroundTruthBox, GroundTruthByImage};

fn records(text: &str, fields: usize) -> Result<Vec<(usize, Vec<String>)>, DetectionError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DetectionError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != fields {
            return Err(DetectionError::Parse {
                line,
                message: format!("expected {fields} fields, found {}", rec.len()),
            });
        }
        out.push((line, rec.iter().map(str::to_owned).collect()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(line: usize, name: &str, s: &str) -> Result<T, DetectionError> {
    s.parse().map_err(|_| DetectionError::Parse { line, message: format!("bad {name} {s:?}") })
}

fn parse_box(line: usize, f: &[String]) -> Result<BoundingBox, DetectionError> {
    let v: Vec<f64> = f.iter().map(|s| num(line, "coordinate", s)).collect::<Result<_, _>>()?;
    BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| DetectionError::Parse { line, message: e.to_string() })
}

pub fn parse_detections(text: &str) -> Result<DetectionsByImage, DetectionError> {
    let mut out = DetectionsByImage::new();
    for (line, f) in records(text, 7)? {
        let image: u64 = num(line, "image_id", &f[0])?;
        let class_id = num(line, "class_id", &f[1])?;
        let score: f64 = num(line, "score", &f[2])?;
        if !(0.0..=1.0).contains(&score) {
            return Err(DetectionError::Parse { line, message: format!("score {score} outside [0, 1]") });
        }
        let bbox = parse_box(line, &f[3..])?;
        out.entry(image).or_default().push(Detection { bbox, class_id, score });
    }
    Ok(out)
}

pub fn parse_ground_truth(text: &str) -> Result<GroundTruthByImage, DetectionError> {
    let mut out = GroundTruthByImage::new();
    for (line, f) in records(text, 6)? {
        let image: u64 = num(line, "image_id", &f[0])?;
        let class_id = num(line, "class_id", &f[1])?;
        let bbox = parse_box(line, &f[2..])?;
        out.entry(image).or_default().push(GroundTruthBox { class_id, bbox });
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String, DetectionError> {
    std::fs::read_to_string(path)
        .map_err(|e| DetectionError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub fn read_detections(path: &Path) -> Result<DetectionsByImage, DetectionError> {
    parse_detections(&read(path)?)
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruthByImage, DetectionError> {
    parse_ground_truth(&read(path)?)
}

fn write_box(out: &mut String, b: &BoundingBox) {
    let _ = writeln!(out, "{:.6},{:.6},{:.6},{:.6}", b.x_min, b.y_min, b.x_max, b.y_max);
}

pub fn format_detections(dets: &DetectionsByImage) -> String {
    let mut out = String::new();
    for (image, list) in dets {
        for d in list {
            let _ = write!(out, "{image},{},{:.6},", d.class_id, d.score);
            write_box(&mut out, &d.bbox);
        }
    }
    out
}

pub fn format_ground_truth(gt: &GroundTruthByImage) -> String {
    let mut out = String::new();
    for (image, list) in gt {
        for g in list {
            let _ = write!(out, "{image},{},", g.class_id);
            write_box(&mut out, &g.bbox);
        }
    }
    out
}
