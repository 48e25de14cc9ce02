use super::{Detection, DetectorConfig, DetectorOutput};
use crate::eval::iou;
use crate::synthdata::{quantize, Annotation};

const MIN_EXTENT: f64 = 1e-6;

/// Box predicted by `(tx, ty, tw, th, _)` in cell `(row, col)`, class 0.
pub fn predicted_box(cfg: &DetectorConfig, row: usize, col: usize, b: [f64; 5]) -> Annotation {
    let s = cfg.grid_size as f64;
    Annotation::new(0, (col as f64 + b[0]) / s, (row as f64 + b[1]) / s, b[2], b[3])
}

/// Every predictor whose `Ĉ · max p̂` reaches the threshold, in row, column,
/// predictor order.
pub fn decode(out: &DetectorOutput, cfg: &DetectorConfig) -> Vec<Detection> {
    let s = cfg.grid_size;
    let mut dets = Vec::new();
    for row in 0..s {
        for col in 0..s {
            let probs = out.class_probs(cfg, row, col);
            let (class_id, class_prob) = probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bp), (i, &p)| {
                    if p > bp {
                        (i, p)
                    } else {
                        (bi, bp)
                    }
                });
            for j in 0..cfg.boxes_per_cell {
                let b = out.box_at(cfg, row, col, j);
                let confidence = (b[4] * class_prob).clamp(0.0, 1.0);
                if confidence < cfg.conf_threshold {
                    continue;
                }
                let p = predicted_box(cfg, row, col, b);
                let annotation = Annotation::new(
                    class_id,
                    quantize(p.cx).clamp(0.0, 1.0),
                    quantize(p.cy).clamp(0.0, 1.0),
                    quantize(p.w).clamp(MIN_EXTENT, 1.0),
                    quantize(p.h).clamp(MIN_EXTENT, 1.0),
                );
                dets.push(Detection {
                    annotation,
                    confidence,
                    class_prob,
                });
            }
        }
    }
    dets
}

/// Greedy class-wise suppression. Detections are visited by descending
/// confidence (earlier input first on ties); one is kept iff it overlaps every
/// already-kept box of its class with IoU below `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i].annotation;
        let clear = kept.iter().all(|&k| {
            let o = &dets[k].annotation;
            o.class_id != d.class_id || iou(o, d) < iou_threshold
        });
        if clear {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}
