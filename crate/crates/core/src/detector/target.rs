use super::decode::predicted_box;
use super::{ConfTarget, DetectorConfig, DetectorError, DetectorOutput};
use crate::eval::iou;
use crate::synthdata::Annotation;

/// Regression target of one responsible predictor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTarget {
    /// Cell-relative center offsets in `[0,1)`.
    pub x: f64,
    pub y: f64,
    /// Image-relative size.
    pub w: f64,
    pub h: f64,
    pub conf: f64,
    pub alpha: f64,
    /// Index of the ground-truth box in the input list.
    pub source: usize,
}

/// Class target of a cell that contains at least one assigned center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellClass {
    pub class_id: usize,
    pub alpha: f64,
    pub source: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetGrid {
    pub grid_size: usize,
    pub boxes_per_cell: usize,
    pub num_classes: usize,
    /// `[S,S,B]`, row-major; `Some` marks a responsible predictor.
    pub slots: Vec<Option<BoxTarget>>,
    /// `[S,S]`; the class term of a cell belongs to its largest assigned box.
    pub cells: Vec<Option<CellClass>>,
    /// Mean alpha over every input box of the image (1 when there are none).
    pub image_alpha_mean: f64,
    /// Boxes left without a predictor because their cell ran out of slots.
    pub dropped: usize,
}

impl TargetGrid {
    pub fn empty(cfg: &DetectorConfig) -> Self {
        let s = cfg.grid_size;
        Self {
            grid_size: s,
            boxes_per_cell: cfg.boxes_per_cell,
            num_classes: cfg.num_classes,
            slots: vec![None; s * s * cfg.boxes_per_cell],
            cells: vec![None; s * s],
            image_alpha_mean: 1.0,
            dropped: 0,
        }
    }

    pub fn slot_index(&self, row: usize, col: usize, j: usize) -> usize {
        (row * self.grid_size + col) * self.boxes_per_cell + j
    }

    pub fn slot(&self, row: usize, col: usize, j: usize) -> Option<&BoxTarget> {
        self.slots[self.slot_index(row, col, j)].as_ref()
    }

    pub fn obj_mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    pub fn noobj_mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_none).collect()
    }

    pub fn responsible_count(&self) -> usize {
        self.slots.iter().flatten().count()
    }
}

/// Grid cell `(row, col)` containing the box center.
pub fn cell_of(cfg: &DetectorConfig, a: &Annotation) -> (usize, usize) {
    let s = cfg.grid_size;
    let idx = |v: f64| ((v * s as f64).floor().max(0.0) as usize).min(s - 1);
    (idx(a.cy), idx(a.cx))
}

/// Unweighted assignment; every box carries alpha 1.
pub fn assign_targets(
    gt: &[Annotation],
    cfg: &DetectorConfig,
    pred: Option<&DetectorOutput>,
) -> TargetGrid {
    let weighted: Vec<(Annotation, f64)> = gt.iter().map(|a| (*a, 1.0)).collect();
    assign_weighted(&weighted, cfg, pred).expect("unit alphas are in range")
}

/// Assigns every box to the cell holding its center. Within a cell, boxes are
/// taken largest first; each picks the free predictor whose current prediction
/// overlaps it most (first index on ties, so without predictions slots fill in
/// order). Boxes beyond B per cell are dropped and counted.
pub fn assign_weighted(
    gt: &[(Annotation, f64)],
    cfg: &DetectorConfig,
    pred: Option<&DetectorOutput>,
) -> Result<TargetGrid, DetectorError> {
    let mut grid = TargetGrid::empty(cfg);
    if let Some(&(_, a)) = gt.iter().find(|(_, a)| !(0.0..=1.0).contains(a)) {
        return Err(DetectorError::AlphaRange(a));
    }
    if !gt.is_empty() {
        grid.image_alpha_mean = gt.iter().map(|(_, a)| a).sum::<f64>() / gt.len() as f64;
    }
    let s = cfg.grid_size;
    let mut per_cell: Vec<Vec<usize>> = vec![Vec::new(); s * s];
    for (i, (a, _)) in gt.iter().enumerate() {
        let (row, col) = cell_of(cfg, a);
        per_cell[row * s + col].push(i);
    }
    for (cell, members) in per_cell.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        members.sort_by(|&p, &q| gt[q].0.area().total_cmp(&gt[p].0.area()));
        let (row, col) = (cell / s, cell % s);
        let kept = members.len().min(cfg.boxes_per_cell);
        grid.dropped += members.len() - kept;
        let mut used = vec![false; cfg.boxes_per_cell];
        for &i in &members[..kept] {
            let (a, alpha) = gt[i];
            let mut best: Option<(usize, f64)> = None;
            for j in 0..cfg.boxes_per_cell {
                if used[j] {
                    continue;
                }
                let o = pred.map_or(0.0, |p| {
                    iou(&predicted_box(cfg, row, col, p.box_at(cfg, row, col, j)), &a)
                });
                if best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            let (j, overlap) = best.expect("kept boxes never exceed B");
            used[j] = true;
            let conf = match (cfg.conf_target, pred) {
                (ConfTarget::Iou, Some(_)) => overlap,
                _ => 1.0,
            };
            let idx = grid.slot_index(row, col, j);
            grid.slots[idx] = Some(BoxTarget {
                x: a.cx * s as f64 - col as f64,
                y: a.cy * s as f64 - row as f64,
                w: a.w,
                h: a.h,
                conf,
                alpha,
                source: i,
            });
            if grid.cells[cell].is_none() {
                grid.cells[cell] = Some(CellClass {
                    class_id: a.class_id,
                    alpha,
                    source: i,
                });
            }
        }
    }
    Ok(grid)
}
