use std::collections::BTreeSet;

use serde::Serialize;

use super::{iou, Detection, DetectionsByImage, GroundTruthByImage};

/// Per-class AP along with the counts it was computed from. `num_gt == 0`
/// flags a class with no ground truth, whose AP is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
}

/// Ranks all detections of `class_id` by score (then image id and box for
/// a stable order) and marks each as a true positive when it overlaps an
/// unmatched ground truth box of the class in its image with IoU at or above
/// the threshold. The highest-IoU unmatched box is taken.
fn true_positive_flags(
    dets: &DetectionsByImage,
    gt: &GroundTruthByImage,
    class_id: usize,
    iou_threshold: f64,
) -> (Vec<bool>, usize) {
    let mut ranked: Vec<(u64, &Detection)> = dets
        .iter()
        .flat_map(|(&img, list)| list.iter().filter(|d| d.class_id == class_id).map(move |d| (img, d)))
        .collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.score
            .total_cmp(&a.score)
            .then(ia.cmp(ib))
            .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
            .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
            .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
            .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
    });

    let num_gt = gt.values().flatten().filter(|g| g.class_id == class_id).count();
    let mut matched: BTreeSet<(u64, usize)> = BTreeSet::new();
    let flags = ranked
        .iter()
        .map(|(img, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gt.get(img).into_iter().flatten().enumerate() {
                if g.class_id != class_id || matched.contains(&(*img, k)) {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((k, v));
                }
            }
            best.map(|(k, _)| matched.insert((*img, k))).is_some()
        })
        .collect();
    (flags, num_gt)
}

/// VOC 11-point interpolated AP for one class.
pub fn class_average_precision(
    dets: &DetectionsByImage,
    gt: &GroundTruthByImage,
    class_id: usize,
    iou_threshold: f64,
) -> ClassAp {
    let (flags, num_gt) = true_positive_flags(dets, gt, class_id, iou_threshold);
    let num_detections = flags.len();
    if num_gt == 0 {
        return ClassAp { class_id, ap: 0.0, num_gt, num_detections };
    }
    let mut tp = 0usize;
    let curve: Vec<(f64, f64)> = flags
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            (tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    let ap = (0..=10)
        .map(|k| {
            let r = k as f64 / 10.0;
            curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|&(_, p)| p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0;
    ClassAp { class_id, ap, num_gt, num_detections }
}

pub fn average_precision(
    dets: &DetectionsByImage,
    gt: &GroundTruthByImage,
    class_id: usize,
    iou_threshold: f64,
) -> f64 {
    class_average_precision(dets, gt, class_id, iou_threshold).ap
}

/// Unweighted mean AP over the classes that appear in the ground truth
/// (0 when there is none), plus the per-class breakdown.
pub fn mean_average_precision(
    dets: &DetectionsByImage,
    gt: &GroundTruthByImage,
    iou_threshold: f64,
) -> (f64, Vec<ClassAp>) {
    let classes: BTreeSet<usize> = gt.values().flatten().map(|g| g.class_id).collect();
    let per_class: Vec<ClassAp> =
        classes.iter().map(|&c| class_average_precision(dets, gt, c, iou_threshold)).collect();
    if per_class.is_empty() {
        return (0.0, per_class);
    }
    let map = per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64;
    (map, per_class)
}
