//! Average precision at IoU 0.5 over a pooled set of scenes: greedy matching
//! per class, all-point interpolated precision-recall area, averaged over the
//! classes that actually appear in the ground truth.

use samdetr_core::geometry::{iou_xyxy, BBox};
use samdetr_core::tensor::Tensor;

/// One scored box prediction.
#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Matching threshold: a prediction must overlap a ground truth at least
/// this much to count as correct.
pub const IOU_THRESHOLD: f64 = 0.5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Turns one query set's class logits and boxes into scored detections:
/// every query reports its best class and that class's probability.
pub fn detections(logits: &Tensor, boxes: &[BBox]) -> Vec<Detection> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(boxes)
        .map(|(row, &bbox)| {
            let (class, &logit) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("at least one class");
            Detection { class, score: sigmoid(logit), bbox }
        })
        .collect()
}

/// AP50 over scenes: `preds[i]` are the detections for `gts[i]`. Returns the
/// mean AP of the classes present in the ground truth, and 0 when no ground
/// truth exists at all.
pub fn evaluate_ap50(preds: &[Vec<Detection>], gts: &[Vec<(usize, BBox)>]) -> f64 {
    assert_eq!(preds.len(), gts.len(), "prediction/ground-truth scene counts differ");
    let classes: std::collections::BTreeSet<usize> =
        gts.iter().flatten().map(|&(c, _)| c).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &class in &classes {
        total += class_ap(preds, gts, class);
    }
    total / classes.len() as f64
}

fn class_ap(preds: &[Vec<Detection>], gts: &[Vec<(usize, BBox)>], class: usize) -> f64 {
    let gt_total: usize = gts.iter().map(|g| g.iter().filter(|&&(c, _)| c == class).count()).sum();
    if gt_total == 0 {
        return 0.0;
    }
    // Pool this class's predictions across scenes and rank by score; ties
    // break on scene and emission order so the ranking is total.
    let mut ranked: Vec<(usize, usize, f64, BBox)> = Vec::new();
    for (scene, dets) in preds.iter().enumerate() {
        for (order, d) in dets.iter().enumerate() {
            if d.class == class {
                ranked.push((scene, order, d.score, d.bbox));
            }
        }
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut matched: Vec<Vec<bool>> =
        gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len());
    for (rank, &(scene, _, _, bbox)) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, &(gc, gb)) in gts[scene].iter().enumerate() {
            if gc != class || matched[scene][gi] {
                continue;
            }
            let iou = iou_xyxy(bbox.to_xyxy(), gb.to_xyxy());
            if iou >= IOU_THRESHOLD && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            matched[scene][gi] = true;
            tp += 1;
        }
        curve.push((tp as f64 / gt_total as f64, tp as f64 / (rank + 1) as f64));
    }

    // All-point interpolation: precision envelope from the right, then the
    // area under the stepwise curve.
    let mut envelope = 0.0_f64;
    let mut ap = 0.0;
    let mut next_recall = curve.last().map_or(0.0, |&(r, _)| r);
    for &(recall, precision) in curve.iter().rev() {
        envelope = envelope.max(precision);
        if recall < next_recall {
            ap += (next_recall - recall) * envelope;
            next_recall = recall;
        }
    }
    ap + next_recall * envelope
}
