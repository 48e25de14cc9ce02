//! Grid detector: a four-block conv backbone with 1×1 box and class heads,
//! the five-term grid loss, decoding and class-wise NMS.

mod decode;
mod loss;
mod target;
mod train;

pub use decode::{decode, nms};
pub use loss::{loss_nodes, weighted_breakdown, yolo_loss, LossBreakdown, LossNodes, LossWeighting, NoobjAlpha};
pub use target::{assign_targets, assign_weighted, BoxTarget, TargetGrid};
pub use train::{loss_history_csv, train_detector, DetectorTrainConfig};

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::numerics::{NodeId, NumericsError, ParamSet, Scalar, Tape, Tensor};
use crate::seed::rng_for;
use crate::synthdata::{Annotation, Image};

pub const BACKBONE_WIDTHS: [usize; 4] = [16, 32, 64, 64];
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("image is {actual}×{actual}, detector expects {expected}×{expected}")]
    ImageSize { expected: usize, actual: usize },
    #[error("training needs a non-empty dataset")]
    EmptyDataset,
    #[error("cannot train a detector on a {0} dataset")]
    WrongRole(crate::synthdata::Role),
    #[error("alpha {0} outside [0,1]")]
    AlphaRange(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Confidence target of a responsible box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfTarget {
    One,
    Iou,
}

impl fmt::Display for ConfTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConfTarget::One => "one",
            ConfTarget::Iou => "iou",
        })
    }
}

impl std::str::FromStr for ConfTarget {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "one" => Ok(ConfTarget::One),
            "iou" => Ok(ConfTarget::Iou),
            _ => Err(format!("unknown conf target {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    /// S: the output grid is S×S cells.
    pub grid_size: usize,
    /// B: box predictors per cell.
    pub boxes_per_cell: usize,
    /// C: class count.
    pub num_classes: usize,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub input_size: usize,
    pub conf_threshold: f64,
    pub nms_iou_threshold: f64,
    pub conf_target: ConfTarget,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            grid_size: 4,
            boxes_per_cell: 2,
            num_classes: 5,
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            input_size: 64,
            conf_threshold: 0.05,
            nms_iou_threshold: 0.45,
            conf_target: ConfTarget::One,
        }
    }
}

impl DetectorConfig {
    /// Channels per cell: B·5 box values followed by C class scores.
    pub fn cell_depth(&self) -> usize {
        self.boxes_per_cell * 5 + self.num_classes
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.to_string()));
        if self.grid_size == 0 || self.boxes_per_cell == 0 || self.num_classes == 0 {
            return bad("S, B and C must be at least 1");
        }
        if !(self.lambda_coord > 0.0) || !(self.lambda_noobj >= 0.0) {
            return bad("lambda_coord must be > 0 and lambda_noobj >= 0");
        }
        for (name, v) in [
            ("conf_threshold", self.conf_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(DetectorError::InvalidConfig(format!("{name} = {v} outside (0,1)")));
            }
        }
        let pooled = self.input_size >> BACKBONE_WIDTHS.len();
        if self.input_size % (1 << BACKBONE_WIDTHS.len()) != 0 || pooled != self.grid_size {
            return Err(DetectorError::InvalidConfig(format!(
                "input {} gives a {}×{} feature map, grid is {}×{}",
                self.input_size,
                self.input_size as f64 / 16.0,
                self.input_size as f64 / 16.0,
                self.grid_size,
                self.grid_size
            )));
        }
        Ok(())
    }
}

/// Activated head outputs laid out as `[S, S, B·5 + C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    pub grid: Tensor<f64>,
}

impl DetectorOutput {
    /// Assembles the grid from channel-major box `[B·5,S,S]` and class `[C,S,S]` maps.
    pub fn from_maps(cfg: &DetectorConfig, boxes: &[f64], classes: &[f64]) -> Self {
        let (s, d, nb) = (cfg.grid_size, cfg.cell_depth(), cfg.boxes_per_cell * 5);
        let mut grid = vec![0.0; s * s * d];
        for cell in 0..s * s {
            for k in 0..nb {
                grid[cell * d + k] = boxes[k * s * s + cell];
            }
            for c in 0..cfg.num_classes {
                grid[cell * d + nb + c] = classes[c * s * s + cell];
            }
        }
        Self {
            grid: Tensor::new(&[s, s, d], grid).expect("consistent grid shape"),
        }
    }

    /// Splits back into channel-major box and class maps.
    pub fn to_maps(&self, cfg: &DetectorConfig) -> (Vec<f64>, Vec<f64>) {
        let (s, d, nb) = (cfg.grid_size, cfg.cell_depth(), cfg.boxes_per_cell * 5);
        let g = self.grid.data();
        let mut boxes = vec![0.0; nb * s * s];
        let mut classes = vec![0.0; cfg.num_classes * s * s];
        for cell in 0..s * s {
            for k in 0..nb {
                boxes[k * s * s + cell] = g[cell * d + k];
            }
            for c in 0..cfg.num_classes {
                classes[c * s * s + cell] = g[cell * d + nb + c];
            }
        }
        (boxes, classes)
    }

    /// `(tx, ty, tw, th, conf)` of predictor `j` in cell `(row, col)`.
    pub fn box_at(&self, cfg: &DetectorConfig, row: usize, col: usize, j: usize) -> [f64; 5] {
        let d = cfg.cell_depth();
        let base = (row * cfg.grid_size + col) * d + j * 5;
        let g = self.grid.data();
        [g[base], g[base + 1], g[base + 2], g[base + 3], g[base + 4]]
    }

    pub fn class_probs(&self, cfg: &DetectorConfig, row: usize, col: usize) -> &[f64] {
        let d = cfg.cell_depth();
        let base = (row * cfg.grid_size + col) * d + cfg.boxes_per_cell * 5;
        &self.grid.data()[base..base + cfg.num_classes]
    }
}

/// A decoded box with `confidence = Ĉ · max_c p̂(c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub annotation: Annotation,
    pub confidence: f64,
    pub class_prob: f64,
}

/// Activated head nodes on a tape: box map `[B·5,S,S]` after sigmoid, class map
/// `[C,S,S]` after a per-cell softmax.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub boxes: NodeId,
    pub classes: NodeId,
}

/// Parameter names in tape order.
pub fn param_names() -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..BACKBONE_WIDTHS.len() {
        names.push(format!("conv{i}.w"));
        names.push(format!("conv{i}.b"));
    }
    for head in ["box", "cls"] {
        names.push(format!("{head}.w"));
        names.push(format!("{head}.b"));
    }
    names
}

fn param_shapes(cfg: &DetectorConfig) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    let mut c_in = 3;
    for &w in &BACKBONE_WIDTHS {
        shapes.push(vec![w, c_in, 3, 3]);
        shapes.push(vec![w]);
        c_in = w;
    }
    for out in [cfg.boxes_per_cell * 5, cfg.num_classes] {
        shapes.push(vec![out, c_in, 1, 1]);
        shapes.push(vec![out]);
    }
    shapes
}

/// Detector weights plus the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamSet,
    pub init_seed: u64,
}

impl Detector {
    /// He-uniform weights (bound `√(6/fan_in)`), zero biases.
    pub fn build(config: &DetectorConfig, seed: u64) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut rng = rng_for(seed, "detector-init");
        let mut params = ParamSet::new();
        for (name, shape) in param_names().into_iter().zip(param_shapes(config)) {
            let t = if shape.len() == 4 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| rng.gen_range(-bound..bound) as f32)
                    .collect();
                Tensor::new(&shape, data)?
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        Ok(Self {
            config: config.clone(),
            params,
            init_seed: seed,
        })
    }

    /// Wraps loaded weights after checking every expected tensor and shape.
    pub fn from_params(
        config: &DetectorConfig,
        params: ParamSet,
        init_seed: u64,
    ) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut ordered = ParamSet::new();
        for (name, shape) in param_names().into_iter().zip(param_shapes(config)) {
            let t = params.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(NumericsError::ShapeMismatch {
                    op: "detector checkpoint",
                    left: shape,
                    right: t.shape().to_vec(),
                }
                .into());
            }
            ordered.insert(name, t.clone());
        }
        if ordered.len() != params.len() {
            return Err(DetectorError::InvalidConfig(
                "checkpoint has unexpected tensors".into(),
            ));
        }
        Ok(Self {
            config: config.clone(),
            params: ordered,
            init_seed,
        })
    }

    pub fn check_image(&self, image: &Image) -> Result<(), DetectorError> {
        let n = self.config.input_size;
        if image.width != n || image.height != n {
            return Err(DetectorError::ImageSize {
                expected: n,
                actual: image.width.max(image.height),
            });
        }
        Ok(())
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, image: &Image) -> Result<DetectorOutput, DetectorError> {
        self.check_image(image)?;
        let mut tape = Tape::<f32>::new();
        let ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect();
        let n = self.config.input_size;
        let x = tape.constant(Tensor::new(&[3, n, n], image.to_unit())?);
        let heads = forward(&mut tape, &ids, x)?;
        Ok(heads_output(&tape, heads, &self.config))
    }

    /// Decode, confidence threshold and class-wise NMS.
    pub fn detect(&self, image: &Image) -> Result<Vec<Detection>, DetectorError> {
        let out = self.predict(image)?;
        Ok(nms(
            &decode(&out, &self.config),
            self.config.nms_iou_threshold,
        ))
    }
}

/// Reads activated heads off a tape into a [`DetectorOutput`].
pub fn heads_output<T: Scalar>(tape: &Tape<T>, heads: Heads, cfg: &DetectorConfig) -> DetectorOutput {
    let boxes: Vec<f64> = tape.value(heads.boxes).data().iter().map(|v| v.as_f64()).collect();
    let classes: Vec<f64> = tape.value(heads.classes).data().iter().map(|v| v.as_f64()).collect();
    DetectorOutput::from_maps(cfg, &boxes, &classes)
}

/// Backbone and heads on `input: [3,N,N]`; `params` in [`param_names`] order.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &[NodeId],
    input: NodeId,
) -> Result<Heads, DetectorError> {
    let mut x = input;
    for i in 0..BACKBONE_WIDTHS.len() {
        x = tape.conv2d(x, params[2 * i], params[2 * i + 1], 1, 1)?;
        x = tape.leaky_relu(x, T::of_f64(LEAKY_SLOPE));
        x = tape.maxpool2(x)?;
    }
    let k = 2 * BACKBONE_WIDTHS.len();
    let boxes = tape.conv2d(x, params[k], params[k + 1], 1, 0)?;
    let classes = tape.conv2d(x, params[k + 2], params[k + 3], 1, 0)?;
    Ok(activate_heads(tape, boxes, classes))
}

/// Output activations: sigmoid on the box map, softmax over classes per cell.
pub fn activate_heads<T: Scalar>(tape: &mut Tape<T>, box_logits: NodeId, class_logits: NodeId) -> Heads {
    Heads {
        boxes: tape.sigmoid(box_logits),
        classes: tape.softmax(class_logits),
    }
}
