use super::{iou, DetectionError, GroundTruthBox, YoloTensor};

pub const LAMBDA_COORD: f64 = 5.0;
pub const LAMBDA_NOOBJ: f64 = 0.5;

/// YOLOv1 sum-squared loss for one image.
///
/// Each ground truth box is assigned to the cell containing its center; if
/// several share a cell the first one listed wins. Within that cell the
/// predictor with the highest IoU against the box is responsible (lower index
/// on ties), and its confidence target is that IoU. Every other predictor is
/// pushed toward zero confidence with weight `LAMBDA_NOOBJ`. Predicted w/h
/// below zero are treated as zero before the square root.
pub fn yolo_loss(pred: &YoloTensor, gt: &[GroundTruthBox]) -> Result<f64, DetectionError> {
    let (s, nb, nc) = (pred.grid(), pred.boxes(), pred.classes());
    let mut owner: Vec<Option<&GroundTruthBox>> = vec![None; s * s];
    for (index, g) in gt.iter().enumerate() {
        if g.bbox.area() <= 0.0 {
            return Err(DetectionError::ZeroAreaGroundTruth { index });
        }
        if g.class_id >= nc {
            return Err(DetectionError::ClassOutOfRange { class_id: g.class_id, classes: nc });
        }
        let (cx, cy) = g.bbox.center();
        let col = ((cx * s as f64) as usize).min(s - 1);
        let row = ((cy * s as f64) as usize).min(s - 1);
        owner[row * s + col].get_or_insert(g);
    }

    let mut loss = 0.0;
    for row in 0..s {
        for col in 0..s {
            let cell = pred.cell(row, col);
            let Some(g) = owner[row * s + col] else {
                for b in 0..nb {
                    loss += LAMBDA_NOOBJ * cell[5 * b + 4].powi(2);
                }
                continue;
            };
            let ious: Vec<f64> = (0..nb).map(|b| iou(&pred.predicted_box(row, col, b), &g.bbox)).collect();
            let mut resp = 0;
            for (b, v) in ious.iter().enumerate() {
                if *v > ious[resp] {
                    resp = b;
                }
            }
            let (cx, cy) = g.bbox.center();
            let tx = cx * s as f64 - col as f64;
            let ty = cy * s as f64 - row as f64;
            for b in 0..nb {
                let p = &cell[5 * b..5 * b + 5];
                if b != resp {
                    loss += LAMBDA_NOOBJ * p[4].powi(2);
                    continue;
                }
                loss += LAMBDA_COORD * ((p[0] - tx).powi(2) + (p[1] - ty).powi(2));
                loss += LAMBDA_COORD
                    * ((p[2].max(0.0).sqrt() - g.bbox.width().sqrt()).powi(2)
                        + (p[3].max(0.0).sqrt() - g.bbox.height().sqrt()).powi(2));
                loss += (p[4] - ious[b]).powi(2);
            }
            for (c, p) in cell[5 * nb..].iter().enumerate() {
                let target = if c == g.class_id { 1.0 } else { 0.0 };
                loss += (p - target).powi(2);
            }
        }
    }
    Ok(loss)
}
