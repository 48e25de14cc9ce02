//! IoU, greedy detection matching, all-points interpolated AP and mAP.

use std::fmt::Write as _;

use thiserror::Error;

use crate::detector::{Detection, Detector, DetectorError};
use crate::synthdata::{Annotation, Dataset, Role};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation needs a non-empty test dataset")]
    EmptyTestSet,
    #[error("expected a test dataset, got {0}")]
    WrongRole(Role),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

pub fn iou(a: &Annotation, b: &Annotation) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy matching for one image and one class. `dets` must already be in
/// descending confidence order. Returns one TP flag per detection.
pub fn match_detections(dets: &[Detection], gts: &[Annotation], iou_threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.class_id != d.annotation.class_id {
                    continue;
                }
                let o = iou(&d.annotation, gt);
                if best.map_or(true, |(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, o)) if o >= iou_threshold => {
                    used[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// All-points interpolated AP from `(confidence, is_tp)` pairs pooled over a
/// test set for one class. Stable sort, so equal confidences keep input order.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 || scored.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap.clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub gt: usize,
    pub detections: usize,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `None` for classes without ground truth (excluded from mAP).
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub counts: Vec<ClassCounts>,
    pub iou_threshold: f64,
}

impl EvalReport {
    /// `class,AP,n_gt,n_det,tp,fp` rows plus a trailing summary line.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,AP,n_gt,n_det,tp,fp\n");
        for (c, (ap, n)) in self.per_class_ap.iter().zip(&self.counts).enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let ap = ap.map_or("NA".to_string(), |v| format!("{v:.6}"));
            writeln!(out, "{name},{ap},{},{},{},{}", n.gt, n.detections, n.tp, n.fp).unwrap();
        }
        writeln!(out, "mAP,{:.6},,,,", self.map).unwrap();
        out
    }

    /// Parses [`EvalReport::to_csv`] output into the report and class names.
    /// The IoU threshold is not part of the file and is supplied by the caller.
    pub fn from_csv(text: &str, iou_threshold: f64) -> Result<(Self, Vec<String>), String> {
        let mut lines = text.lines();
        if lines.next() != Some("class,AP,n_gt,n_det,tp,fp") {
            return Err("unrecognized report header".into());
        }
        let (mut names, mut aps, mut counts, mut map) = (Vec::new(), Vec::new(), Vec::new(), None);
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(format!("bad report line {line:?}"));
            }
            let num = |v: &str| v.parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
            let int = |v: &str| v.parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
            if f[0] == "mAP" && f[2..].iter().all(|v| v.is_empty()) {
                map = Some(num(f[1])?);
                continue;
            }
            names.push(f[0].to_string());
            aps.push(if f[1] == "NA" { None } else { Some(num(f[1])?) });
            counts.push(ClassCounts {
                gt: int(f[2])?,
                detections: int(f[3])?,
                tp: int(f[4])?,
                fp: int(f[5])?,
            });
        }
        let map = map.ok_or("missing mAP line")?;
        Ok((
            Self {
                per_class_ap: aps,
                map,
                counts,
                iou_threshold,
            },
            names,
        ))
    }
}

/// Pools per-image detections against ground truth and scores every class.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    num_classes: usize,
    iou_threshold: f64,
) -> EvalReport {
    assert_eq!(detections.len(), ground_truth.len());
    let mut pooled: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_classes];
    let mut counts = vec![ClassCounts::default(); num_classes];
    for (dets, gts) in detections.iter().zip(ground_truth) {
        for gt in gts {
            counts[gt.class_id].gt += 1;
        }
        for (c, pool) in pooled.iter_mut().enumerate() {
            let mut mine: Vec<Detection> = dets
                .iter()
                .filter(|d| d.annotation.class_id == c)
                .cloned()
                .collect();
            mine.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            let gts_c: Vec<Annotation> = gts.iter().filter(|g| g.class_id == c).copied().collect();
            for (d, tp) in mine.iter().zip(match_detections(&mine, &gts_c, iou_threshold)) {
                pool.push((d.confidence, tp));
                counts[c].detections += 1;
                if tp {
                    counts[c].tp += 1;
                } else {
                    counts[c].fp += 1;
                }
            }
        }
    }
    let per_class_ap: Vec<Option<f64>> = (0..num_classes)
        .map(|c| (counts[c].gt > 0).then(|| average_precision(&pooled[c], counts[c].gt)))
        .collect();
    let included: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if included.is_empty() {
        0.0
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    EvalReport {
        per_class_ap,
        map,
        counts,
        iou_threshold,
    }
}

/// Runs the detector over every test image (decode + NMS) and scores it.
pub fn evaluate(
    detector: &Detector,
    test: &Dataset,
    iou_threshold: f64,
) -> Result<EvalReport, EvalError> {
    if test.role != Role::Test {
        return Err(EvalError::WrongRole(test.role));
    }
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut dets = Vec::with_capacity(test.len());
    let mut gts = Vec::with_capacity(test.len());
    for item in &test.items {
        dets.push(detector.detect(&item.image)?);
        gts.push(item.labels.annotations());
    }
    Ok(evaluate_detections(
        &dets,
        &gts,
        detector.config.num_classes,
        iou_threshold,
    ))
}
