use std::fmt;

use super::{DetectorConfig, DetectorError, DetectorOutput, Heads, TargetGrid};
use crate::numerics::{NodeId, Scalar, Tape, Tensor};

/// How the background term is weighted when per-box alphas are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoobjAlpha {
    /// Scale by the mean alpha of the image's boxes.
    Mean,
    /// Leave at weight 1.
    One,
}

impl fmt::Display for NoobjAlpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoobjAlpha::Mean => "mean",
            NoobjAlpha::One => "one",
        })
    }
}

impl std::str::FromStr for NoobjAlpha {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(NoobjAlpha::Mean),
            "one" => Ok(NoobjAlpha::One),
            _ => Err(format!("unknown noobj alpha mode {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossWeighting {
    /// Every box weighs 1, whatever alpha it carries.
    Off,
    /// Each responsible box's terms are scaled by its alpha.
    PerBox(NoobjAlpha),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub centre: f64,
    pub bbox: f64,
    pub object: f64,
    pub noobj: f64,
    pub score: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 6] {
        [self.centre, self.bbox, self.object, self.noobj, self.score, self.total]
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown) {
        self.centre += other.centre;
        self.bbox += other.bbox;
        self.object += other.object;
        self.noobj += other.noobj;
        self.score += other.score;
        self.total += other.total;
    }

    pub(crate) fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            centre: self.centre * k,
            bbox: self.bbox * k,
            object: self.object * k,
            noobj: self.noobj * k,
            score: self.score * k,
            total: self.total * k,
        }
    }
}

/// Scalar loss nodes recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub centre: NodeId,
    pub bbox: NodeId,
    pub object: NodeId,
    pub noobj: NodeId,
    pub score: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn read<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |id| tape.value(id).item().as_f64();
        LossBreakdown {
            centre: v(self.centre),
            bbox: v(self.bbox),
            object: v(self.object),
            noobj: v(self.noobj),
            score: v(self.score),
            total: v(self.total),
        }
    }
}

/// Records the five-term loss on `tape` for activated `heads`:
///
/// ```text
/// centre = λc Σ 1obj [(x−x̂)² + (y−ŷ)²]
/// box    = λc Σ 1obj [(√w−√ŵ)² + (√h−√ĥ)²]
/// object =    Σ 1obj (C−Ĉ)²
/// noobj  = λn Σ 1noobj (C−Ĉ)²
/// score  =    Σ_cells Σ_c (p(c)−p̂(c))²
/// ```
///
/// With per-box weighting each responsible predictor's terms, and its cell's
/// class term, are multiplied by that box's alpha.
pub fn loss_nodes<T: Scalar>(
    tape: &mut Tape<T>,
    heads: Heads,
    targets: &TargetGrid,
    cfg: &DetectorConfig,
    weighting: LossWeighting,
) -> Result<LossNodes, DetectorError> {
    let (s, nb, c) = (cfg.grid_size, cfg.boxes_per_cell, cfg.num_classes);
    let ss = s * s;
    let nch = nb * 5;
    let weight = |alpha: f64| match weighting {
        LossWeighting::Off => 1.0,
        LossWeighting::PerBox(_) => alpha,
    };
    let noobj_weight = match weighting {
        LossWeighting::PerBox(NoobjAlpha::Mean) => targets.image_alpha_mean,
        _ => 1.0,
    };

    let mut target = vec![0.0; nch * ss];
    let mut sqrt_target = vec![0.0; nch * ss];
    let mut m_xy = vec![0.0; nch * ss];
    let mut m_wh = vec![0.0; nch * ss];
    let mut m_obj = vec![0.0; nch * ss];
    let mut m_noobj = vec![0.0; nch * ss];
    for cell in 0..ss {
        for j in 0..nb {
            let at = |k: usize| (j * 5 + k) * ss + cell;
            match &targets.slots[cell * nb + j] {
                Some(t) => {
                    let a = weight(t.alpha);
                    for (k, v) in [t.x, t.y, t.w, t.h, t.conf].into_iter().enumerate() {
                        target[at(k)] = v;
                    }
                    sqrt_target[at(2)] = t.w.sqrt();
                    sqrt_target[at(3)] = t.h.sqrt();
                    m_xy[at(0)] = cfg.lambda_coord * a;
                    m_xy[at(1)] = cfg.lambda_coord * a;
                    m_wh[at(2)] = cfg.lambda_coord * a;
                    m_wh[at(3)] = cfg.lambda_coord * a;
                    m_obj[at(4)] = a;
                }
                None => m_noobj[at(4)] = cfg.lambda_noobj * noobj_weight,
            }
        }
    }
    let mut class_target = vec![0.0; c * ss];
    let mut m_cls = vec![0.0; c * ss];
    for (cell, slot) in targets.cells.iter().enumerate() {
        if let Some(cc) = slot {
            class_target[cc.class_id * ss + cell] = 1.0;
            for k in 0..c {
                m_cls[k * ss + cell] = weight(cc.alpha);
            }
        }
    }

    let box_shape = [nch, s, s];
    let cls_shape = [c, s, s];
    let mut constant = |data: Vec<f64>, shape: &[usize]| -> Result<NodeId, DetectorError> {
        let t = Tensor::new(shape, data.into_iter().map(T::of_f64).collect())?;
        Ok(tape.constant(t))
    };
    let target = constant(target, &box_shape)?;
    let sqrt_target = constant(sqrt_target, &box_shape)?;
    let m_xy = constant(m_xy, &box_shape)?;
    let m_wh = constant(m_wh, &box_shape)?;
    let m_obj = constant(m_obj, &box_shape)?;
    let m_noobj = constant(m_noobj, &box_shape)?;
    let class_target = constant(class_target, &cls_shape)?;
    let m_cls = constant(m_cls, &cls_shape)?;

    let diff = tape.sub(heads.boxes, target)?;
    let d2 = tape.square(diff);
    let weighted_sum = |tape: &mut Tape<T>, mask: NodeId, x: NodeId| -> Result<NodeId, DetectorError> {
        let m = tape.mul(mask, x)?;
        Ok(tape.sum(m))
    };
    let centre = weighted_sum(tape, m_xy, d2)?;
    let root = tape.sqrt(heads.boxes);
    let root_diff = tape.sub(root, sqrt_target)?;
    let root_d2 = tape.square(root_diff);
    let bbox = weighted_sum(tape, m_wh, root_d2)?;
    let object = weighted_sum(tape, m_obj, d2)?;
    let noobj = weighted_sum(tape, m_noobj, d2)?;
    let cdiff = tape.sub(heads.classes, class_target)?;
    let c2 = tape.square(cdiff);
    let score = weighted_sum(tape, m_cls, c2)?;

    let mut total = tape.add(centre, bbox)?;
    total = tape.add(total, object)?;
    total = tape.add(total, noobj)?;
    total = tape.add(total, score)?;
    Ok(LossNodes {
        centre,
        bbox,
        object,
        noobj,
        score,
        total,
    })
}

/// Unweighted five-term loss of an already activated output.
pub fn yolo_loss(
    output: &DetectorOutput,
    targets: &TargetGrid,
    cfg: &DetectorConfig,
) -> Result<LossBreakdown, DetectorError> {
    evaluate_loss(output, targets, cfg, LossWeighting::Off)
}

/// Loss of a fixed output with per-box alpha weights.
pub fn weighted_breakdown(
    output: &DetectorOutput,
    targets: &TargetGrid,
    cfg: &DetectorConfig,
    noobj: NoobjAlpha,
) -> Result<LossBreakdown, DetectorError> {
    evaluate_loss(output, targets, cfg, LossWeighting::PerBox(noobj))
}

pub(crate) fn evaluate_loss(
    output: &DetectorOutput,
    targets: &TargetGrid,
    cfg: &DetectorConfig,
    weighting: LossWeighting,
) -> Result<LossBreakdown, DetectorError> {
    let s = cfg.grid_size;
    if output.grid.shape() != [s, s, cfg.cell_depth()]
        || targets.grid_size != s
        || targets.boxes_per_cell != cfg.boxes_per_cell
        || targets.num_classes != cfg.num_classes
    {
        return Err(DetectorError::InvalidConfig(
            "output, targets and config disagree on S, B or C".into(),
        ));
    }
    let (boxes, classes) = output.to_maps(cfg);
    let mut tape = Tape::<f64>::new();
    let boxes = tape.constant(Tensor::new(&[cfg.boxes_per_cell * 5, s, s], boxes)?);
    let classes = tape.constant(Tensor::new(&[cfg.num_classes, s, s], classes)?);
    let nodes = loss_nodes(&mut tape, Heads { boxes, classes }, targets, cfg, weighting)?;
    Ok(nodes.read(&tape))
}
