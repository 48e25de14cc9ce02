//! Synthetic shape scenes with exact box ground truth, and the four dataset
//! roles used by the pipeline: gold, unlabeled, silver and test.

mod crop;
mod io;
mod scene;

pub use crop::{crop_resize, resize};
pub use io::{read_dataset, read_hidden_truth, write_dataset, write_hidden_truth};
pub use scene::{generate_splits, render_scene, Scene, SceneSpec, ShapeKind, SplitSizes, Splits};

use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("could not place object after {0} attempts")]
    Placement(usize),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("crop box has zero area after clamping")]
    EmptyCrop,
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
    #[error("png: {0}")]
    Png(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Round to the 6-decimal grid used by annotation files, so that values
/// survive a write/read cycle exactly.
pub fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Class-labelled box in normalized image coordinates (center + size).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Annotation {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            class_id,
            cx,
            cy,
            w,
            h,
        }
    }

    /// Builds from corners, clamped to the unit square and quantized.
    pub fn from_corners(class_id: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        let (x0, x1) = (x0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0));
        let (y0, y1) = (y0.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        Self {
            class_id,
            cx: quantize((x0 + x1) / 2.0),
            cy: quantize((y0 + y1) / 2.0),
            w: quantize(x1 - x0),
            h: quantize(y1 - y0),
        }
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn quantized(&self) -> Self {
        Self {
            class_id: self.class_id,
            cx: quantize(self.cx),
            cy: quantize(self.cy),
            w: quantize(self.w),
            h: quantize(self.h),
        }
    }

    /// Checks the annotation invariants for `num_classes` classes.
    pub fn validate(&self, num_classes: usize) -> Result<(), String> {
        if self.class_id >= num_classes {
            return Err(format!("class {} out of range", self.class_id));
        }
        for (name, v) in [("cx", self.cx), ("cy", self.cy)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0,1]"));
            }
        }
        for (name, v) in [("w", self.w), ("h", self.h)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(format!("{name} = {v} outside (0,1]"));
            }
        }
        let (x0, y0, x1, y1) = self.corners();
        if x1.min(1.0) <= x0.max(0.0) || y1.min(1.0) <= y0.max(0.0) {
            return Err("box does not intersect the image".into());
        }
        Ok(())
    }
}

/// Pseudo-label with its confidence metric and the teacher's own confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredAnnotation {
    pub annotation: Annotation,
    pub alpha: f64,
    pub detector_confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Gold,
    Unlabeled,
    Silver,
    Test,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Gold => "gold",
            Role::Unlabeled => "unlabeled",
            Role::Silver => "silver",
            Role::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gold" => Some(Role::Gold),
            "unlabeled" => Some(Role::Unlabeled),
            "silver" => Some(Role::Silver),
            "test" => Some(Role::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// 8-bit RGB image stored planar, `[3, height, width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; 3 * width * height],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Pixel values scaled to `[0,1]`, planar.
    pub fn to_unit<T: crate::numerics::Scalar>(&self) -> Vec<T> {
        self.data
            .iter()
            .map(|&v| T::of_f64(v as f64 / 255.0))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    None,
    Plain(Vec<Annotation>),
    Scored(Vec<ScoredAnnotation>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::None => 0,
            Labels::Plain(v) => v.len(),
            Labels::Scored(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        match self {
            Labels::None => Vec::new(),
            Labels::Plain(v) => v.clone(),
            Labels::Scored(v) => v.iter().map(|s| s.annotation).collect(),
        }
    }

    /// Boxes with their loss weight; unscored labels weigh 1.
    pub fn weighted(&self) -> Vec<(Annotation, f64)> {
        match self {
            Labels::None => Vec::new(),
            Labels::Plain(v) => v.iter().map(|a| (*a, 1.0)).collect(),
            Labels::Scored(v) => v.iter().map(|s| (s.annotation, s.alpha)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub name: String,
    pub image: Image,
    pub labels: Labels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub role: Role,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn annotation_count(&self) -> usize {
        self.items.iter().map(|i| i.labels.len()).sum()
    }

    /// Checks the role-specific label invariants.
    pub fn validate(&self) -> Result<(), DataError> {
        let c = self.num_classes();
        for item in &self.items {
            let bad = |msg: String| DataError::Invariant(format!("{}: {msg}", item.name));
            match (&self.role, &item.labels) {
                (Role::Unlabeled, Labels::None) => {}
                (Role::Unlabeled, _) => return Err(bad("unlabeled item carries labels".into())),
                (Role::Silver, Labels::Scored(v)) if v.is_empty() => {
                    return Err(bad("blank silver item".into()))
                }
                (Role::Silver, Labels::Scored(v)) => {
                    for s in v {
                        s.annotation.validate(c).map_err(&bad)?;
                        if !(0.0..=1.0).contains(&s.alpha)
                            || !(0.0..=1.0).contains(&s.detector_confidence)
                        {
                            return Err(bad("score outside [0,1]".into()));
                        }
                    }
                }
                (Role::Gold | Role::Test, Labels::Plain(v)) => {
                    for a in v {
                        a.validate(c).map_err(&bad)?;
                    }
                }
                (role, _) => return Err(bad(format!("wrong label kind for {role} dataset"))),
            }
        }
        Ok(())
    }
}
