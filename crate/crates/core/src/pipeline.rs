//! Teacher on gold, pseudo-labels on the unlabeled pool, classifier scores as
//! per-box loss weights, student on the scored silver set, and the sweep
//! harness that runs the whole chain over a grid.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::detector::{
    self, train_detector, Detector, DetectorConfig, DetectorError, DetectorOutput,
    DetectorTrainConfig, LossBreakdown, LossWeighting, NoobjAlpha, TargetGrid,
};
use crate::eval::{evaluate, iou, EvalError, EvalReport};
use crate::scoring::{
    attach_scores, train_classifiers, ClassifierTrainConfig, ScoreCombiner, ScoringError,
};
use crate::seed::{derive_indexed, derive_seed, rng_for};
use crate::synthdata::{
    generate_splits, Annotation, DataError, Dataset, Item, Labels, Role, SceneSpec,
    ScoredAnnotation, SplitSizes, Splits,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: expected a {expected} dataset, got {actual}")]
    WrongRole {
        stage: &'static str,
        expected: Role,
        actual: Role,
    },
    #[error("bootstrap initialization needs the teacher checkpoint")]
    MissingTeacher,
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// How the student's weights start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StudentInit {
    Reinit,
    Bootstrap,
}

impl fmt::Display for StudentInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StudentInit::Reinit => "reinit",
            StudentInit::Bootstrap => "bootstrap",
        })
    }
}

impl std::str::FromStr for StudentInit {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reinit" => Ok(StudentInit::Reinit),
            "bootstrap" => Ok(StudentInit::Bootstrap),
            _ => Err(format!("unknown student init {s:?}")),
        }
    }
}

/// Label corruption applied to the teacher's private copy of the gold set.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherNoise {
    /// Probability that a box's class is replaced by a different, random class.
    pub class_flip: f64,
    /// Maximum relative perturbation of box center and size.
    pub box_jitter: f64,
}

impl TeacherNoise {
    pub fn none() -> Self {
        Self {
            class_flip: 0.0,
            box_jitter: 0.0,
        }
    }

    pub fn is_none(&self) -> bool {
        self.class_flip == 0.0 && self.box_jitter == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SilverConfig {
    pub conf_threshold: f64,
    pub nms_iou_threshold: f64,
    /// Each class is capped at this multiple of the median class count.
    pub imbalance_cap: f64,
}

impl Default for SilverConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.2,
            nms_iou_threshold: 0.45,
            imbalance_cap: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub scene: SceneSpec,
    pub detector: DetectorConfig,
    pub teacher: DetectorTrainConfig,
    pub student: DetectorTrainConfig,
    pub classifier: ClassifierTrainConfig,
    pub silver: SilverConfig,
    pub teacher_noise: TeacherNoise,
    pub noobj_alpha: NoobjAlpha,
    pub init: StudentInit,
    pub combiner: ScoreCombiner,
    /// Gold annotations per class (the gold image count follows from the mean
    /// number of objects per scene).
    pub gold_per_class: usize,
    /// Unlabeled pool size as a multiple of the gold image count.
    pub unlabeled_ratio: f64,
    pub test_images: usize,
    pub eval_iou: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            detector: DetectorConfig::default(),
            teacher: DetectorTrainConfig {
                lr: 0.005,
                epochs: 20,
                ..DetectorTrainConfig::default()
            },
            student: DetectorTrainConfig {
                lr: 0.005,
                epochs: 4,
                ..DetectorTrainConfig::default()
            },
            classifier: ClassifierTrainConfig::default(),
            silver: SilverConfig::default(),
            teacher_noise: TeacherNoise {
                class_flip: 0.4,
                box_jitter: 0.3,
            },
            noobj_alpha: NoobjAlpha::Mean,
            init: StudentInit::Bootstrap,
            combiner: ScoreCombiner::Max,
            gold_per_class: 64,
            unlabeled_ratio: 8.0,
            test_images: 128,
            eval_iou: 0.5,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        self.scene.validate()?;
        self.detector.validate()?;
        if self.scene.num_classes != self.detector.num_classes {
            return bad("scene and detector class counts differ".into());
        }
        if self.scene.image_size != self.detector.input_size {
            return bad("scene image size differs from detector input size".into());
        }
        for (name, v) in [
            ("teacher_noise.class_flip", self.teacher_noise.class_flip),
            ("teacher_noise.box_jitter", self.teacher_noise.box_jitter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0,1]"));
            }
        }
        if !(self.silver.conf_threshold > 0.0 && self.silver.conf_threshold < 1.0) {
            return bad("silver.conf_threshold outside (0,1)".into());
        }
        if !(self.silver.imbalance_cap >= 1.0) {
            return bad("silver.imbalance_cap must be >= 1".into());
        }
        if self.gold_per_class == 0 || self.test_images == 0 || !(self.unlabeled_ratio > 0.0) {
            return bad("gold, unlabeled and test sizes must be positive".into());
        }
        Ok(())
    }

    /// Gold image count that yields about `per_class` boxes per class.
    pub fn gold_images(&self, per_class: usize) -> usize {
        let mean_objects = (self.scene.min_objects + self.scene.max_objects) as f64 / 2.0;
        let n = per_class as f64 * self.scene.num_classes as f64 / mean_objects;
        (n.round() as usize).max(1)
    }

    /// Unlabeled pool size for a gold size and gold fraction. Fraction 0 is
    /// the standard silver-only setting; a fraction `f` in (0,1) sizes the pool
    /// so gold makes up `f` of the student's images.
    pub fn unlabeled_images(&self, gold_images: usize, gold_fraction: f64) -> usize {
        let n = if gold_fraction > 0.0 {
            gold_images as f64 * (1.0 - gold_fraction) / gold_fraction
        } else {
            gold_images as f64 * self.unlabeled_ratio
        };
        (n.round() as usize).max(1)
    }
}

/// Gold, unlabeled and test splits for one repeat.
pub fn prepare_data(
    cfg: &PipelineConfig,
    gold_per_class: usize,
    unlabeled: usize,
    seed: u64,
) -> Result<Splits, PipelineError> {
    Ok(generate_splits(
        &cfg.scene,
        SplitSizes {
            gold: cfg.gold_images(gold_per_class),
            unlabeled,
            test: cfg.test_images,
        },
        derive_seed(seed, "data"),
    )?)
}

/// Copy of `gold` with class flips and box jitter, for the teacher only.
pub fn corrupt_labels(gold: &Dataset, noise: &TeacherNoise, seed: u64) -> Dataset {
    let mut out = gold.clone();
    if noise.is_none() {
        return out;
    }
    let c = gold.num_classes();
    let mut rng = rng_for(seed, "teacher-noise");
    for item in &mut out.items {
        let Labels::Plain(boxes) = &mut item.labels else {
            continue;
        };
        for a in boxes.iter_mut() {
            if c > 1 && rng.gen_bool(noise.class_flip) {
                let shift = rng.gen_range(1..c);
                a.class_id = (a.class_id + shift) % c;
            }
            if noise.box_jitter > 0.0 {
                let j = noise.box_jitter;
                let (x0, y0, x1, y1) = a.corners();
                let dx = rng.gen_range(-j..=j) * a.w / 2.0;
                let dy = rng.gen_range(-j..=j) * a.h / 2.0;
                let sw = 1.0 + rng.gen_range(-j..=j);
                let sh = 1.0 + rng.gen_range(-j..=j);
                let (cx, cy) = ((x0 + x1) / 2.0 + dx, (y0 + y1) / 2.0 + dy);
                let (w, h) = (a.w * sw, a.h * sh);
                let moved = Annotation::from_corners(
                    a.class_id,
                    cx - w / 2.0,
                    cy - h / 2.0,
                    cx + w / 2.0,
                    cy + h / 2.0,
                );
                if moved.w > 0.0 && moved.h > 0.0 {
                    *a = moved;
                }
            }
        }
    }
    out
}

/// Trains the phase-one detector on (a possibly corrupted copy of) the gold set.
pub fn train_teacher(
    gold: &Dataset,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Detector, Vec<LossBreakdown>), PipelineError> {
    if gold.role != Role::Gold {
        return Err(PipelineError::WrongRole {
            stage: "train-teacher",
            expected: Role::Gold,
            actual: gold.role,
        });
    }
    let data = corrupt_labels(gold, &cfg.teacher_noise, seed);
    let det = Detector::build(&cfg.detector, derive_seed(seed, "teacher-init"))?;
    let train = DetectorTrainConfig {
        seed: derive_seed(seed, "teacher-train"),
        weighting: LossWeighting::Off,
        ..cfg.teacher.clone()
    };
    Ok(train_detector(det, &data, &train)?)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SilverStats {
    pub images_in: usize,
    pub blank: usize,
    pub capped: usize,
    pub kept: usize,
    pub boxes: usize,
}

/// Decode, threshold and NMS every unlabeled image with the teacher. Blank
/// images are dropped; then images are dropped in order while they would push
/// a class over the imbalance cap. Alpha is left at 0 until scoring.
pub fn generate_silver(
    teacher: &Detector,
    unlabeled: &Dataset,
    cfg: &SilverConfig,
) -> Result<(Dataset, SilverStats), PipelineError> {
    if unlabeled.role != Role::Unlabeled {
        return Err(PipelineError::WrongRole {
            stage: "pseudolabel",
            expected: Role::Unlabeled,
            actual: unlabeled.role,
        });
    }
    let det_cfg = DetectorConfig {
        conf_threshold: cfg.conf_threshold,
        nms_iou_threshold: cfg.nms_iou_threshold,
        ..teacher.config.clone()
    };
    let mut stats = SilverStats {
        images_in: unlabeled.len(),
        ..SilverStats::default()
    };
    let mut candidates = Vec::new();
    for item in &unlabeled.items {
        let out = teacher.predict(&item.image)?;
        let dets = detector::nms(&detector::decode(&out, &det_cfg), det_cfg.nms_iou_threshold);
        if dets.is_empty() {
            stats.blank += 1;
            continue;
        }
        let boxes: Vec<ScoredAnnotation> = dets
            .iter()
            .map(|d| ScoredAnnotation {
                annotation: d.annotation.quantized(),
                alpha: 0.0,
                detector_confidence: crate::synthdata::quantize(d.confidence),
            })
            .collect();
        candidates.push(Item {
            name: item.name.clone(),
            image: item.image.clone(),
            labels: Labels::Scored(boxes),
        });
    }
    let items = cap_imbalance(candidates, unlabeled.num_classes(), cfg.imbalance_cap, &mut stats);
    if items.is_empty() {
        log::warn!("silver set is empty: blank={} images_in={}", stats.blank, stats.images_in);
    }
    stats.kept = items.len();
    stats.boxes = items.iter().map(|i| i.labels.len()).sum();
    let silver = Dataset {
        role: Role::Silver,
        class_names: unlabeled.class_names.clone(),
        seed: unlabeled.seed,
        items,
    };
    Ok((silver, stats))
}

/// Cap per-class box counts at `cap × median` of the non-empty classes.
pub fn cap_imbalance(items: Vec<Item>, num_classes: usize, cap: f64, stats: &mut SilverStats) -> Vec<Item> {
    let mut counts = vec![0usize; num_classes];
    for item in &items {
        for a in item.labels.annotations() {
            counts[a.class_id] += 1;
        }
    }
    let mut present: Vec<usize> = counts.iter().copied().filter(|&n| n > 0).collect();
    if present.is_empty() {
        return items;
    }
    present.sort_unstable();
    let m = present.len();
    let median = if m % 2 == 1 {
        present[m / 2] as f64
    } else {
        (present[m / 2 - 1] + present[m / 2]) as f64 / 2.0
    };
    let limit = (cap * median).ceil() as usize;
    let mut running = vec![0usize; num_classes];
    let mut kept = Vec::with_capacity(items.len());
    for item in items {
        let mut add = vec![0usize; num_classes];
        for a in item.labels.annotations() {
            add[a.class_id] += 1;
        }
        if (0..num_classes).any(|c| add[c] > 0 && running[c] + add[c] > limit) {
            stats.capped += 1;
            continue;
        }
        for c in 0..num_classes {
            running[c] += add[c];
        }
        kept.push(item);
    }
    kept
}

/// Per-box weighted loss: each responsible box's five terms scaled by its
/// alpha, the background term by the image mean alpha (or 1).
pub fn weighted_loss(
    output: &DetectorOutput,
    targets: &TargetGrid,
    cfg: &DetectorConfig,
    noobj: NoobjAlpha,
) -> Result<f64, PipelineError> {
    for t in targets.slots.iter().flatten() {
        if !(0.0..=1.0).contains(&t.alpha) {
            return Err(DetectorError::AlphaRange(t.alpha).into());
        }
    }
    for c in targets.cells.iter().flatten() {
        if !(0.0..=1.0).contains(&c.alpha) {
            return Err(DetectorError::AlphaRange(c.alpha).into());
        }
    }
    Ok(detector::weighted_breakdown(output, targets, cfg, noobj)?.total)
}

/// Trains the phase-two detector on scored silver labels.
pub fn train_student(
    silver: &Dataset,
    init: StudentInit,
    teacher: Option<&Detector>,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Detector, Vec<LossBreakdown>), PipelineError> {
    if silver.role != Role::Silver {
        return Err(PipelineError::WrongRole {
            stage: "train-student",
            expected: Role::Silver,
            actual: silver.role,
        });
    }
    let det = match init {
        StudentInit::Reinit => Detector::build(&cfg.detector, derive_seed(seed, "student-init"))?,
        StudentInit::Bootstrap => teacher.ok_or(PipelineError::MissingTeacher)?.clone(),
    };
    let train = DetectorTrainConfig {
        seed: derive_seed(seed, "student-train"),
        weighting: LossWeighting::PerBox(cfg.noobj_alpha),
        ..cfg.student.clone()
    };
    Ok(train_detector(det, silver, &train)?)
}

/// Gold items (alpha 1) followed by the scored silver items, as one silver-role set.
pub fn mix_gold(gold: &Dataset, silver: &Dataset) -> Dataset {
    let mut items: Vec<Item> = gold
        .items
        .iter()
        .filter(|i| !i.labels.is_empty())
        .map(|i| Item {
            name: i.name.clone(),
            image: i.image.clone(),
            labels: Labels::Scored(
                i.labels
                    .annotations()
                    .into_iter()
                    .map(|a| ScoredAnnotation {
                        annotation: a,
                        alpha: 1.0,
                        detector_confidence: 1.0,
                    })
                    .collect(),
            ),
        })
        .collect();
    items.extend(silver.items.iter().cloned());
    Dataset {
        role: Role::Silver,
        class_names: silver.class_names.clone(),
        seed: silver.seed,
        items,
    }
}

/// Mean alpha over every box of a scored set.
pub fn mean_alpha(silver: &Dataset) -> Option<f64> {
    let alphas: Vec<f64> = silver
        .items
        .iter()
        .flat_map(|i| i.labels.weighted().into_iter().map(|(_, a)| a))
        .collect();
    (!alphas.is_empty()).then(|| alphas.iter().sum::<f64>() / alphas.len() as f64)
}

/// Silver quality against the hidden truth: mean best-IoU of silver boxes and
/// the fraction whose best-matching true box has the same class.
pub fn silver_audit(silver: &Dataset, truth: &BTreeMap<String, Vec<Annotation>>) -> (f64, f64) {
    let (mut iou_sum, mut class_hits, mut n) = (0.0, 0usize, 0usize);
    for item in &silver.items {
        let Some(gt) = truth.get(&item.name) else {
            continue;
        };
        for a in item.labels.annotations() {
            let best = gt
                .iter()
                .map(|g| (iou(&a, g), g.class_id))
                .fold((0.0, usize::MAX), |b, x| if x.0 > b.0 { x } else { b });
            iou_sum += best.0;
            class_hits += (best.1 == a.class_id) as usize;
            n += 1;
        }
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    (iou_sum / n as f64, class_hits as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentGrid {
    pub gold_per_class: Vec<usize>,
    pub combiners: Vec<ScoreCombiner>,
    pub inits: Vec<StudentInit>,
    pub repeats: usize,
    pub gold_fractions: Vec<f64>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            gold_per_class: vec![64],
            combiners: vec![ScoreCombiner::Constant1, ScoreCombiner::Avg, ScoreCombiner::Max],
            inits: vec![StudentInit::Bootstrap],
            repeats: 1,
            gold_fractions: vec![0.0],
        }
    }
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.gold_per_class.is_empty()
            || self.combiners.is_empty()
            || self.inits.is_empty()
            || self.repeats == 0
            || self.gold_fractions.is_empty()
        {
            return Err(PipelineError::InvalidConfig("every grid axis needs a value".into()));
        }
        if self.gold_fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(PipelineError::InvalidConfig("gold fractions must lie in [0,1)".into()));
        }
        Ok(())
    }

    /// Student runs per repeat and gold size.
    pub fn points_per_repeat(&self) -> usize {
        self.gold_fractions.len() * self.combiners.len() * self.inits.len()
    }
}

/// One row of the result table. `combiner = gold` marks the teacher-only
/// control row.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub gold_per_class: usize,
    pub gold_fraction: f64,
    pub combiner: String,
    pub init: String,
    pub seed: u64,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub silver_count: usize,
    pub mean_alpha: Option<f64>,
    /// Mean silver IoU and class agreement against the hidden truth.
    pub audit: Option<(f64, f64)>,
    pub error: Option<String>,
}

pub const CONTROL_COMBINER: &str = "gold";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub num_classes: usize,
    pub rows: Vec<ResultRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl ResultTable {
    pub fn to_csv(&self, audit: bool) -> String {
        let mut out = String::from("gold_size,gold_fraction,combiner,init,seed");
        for c in 0..self.num_classes {
            write!(out, ",AP_class{c}").unwrap();
        }
        out.push_str(",mAP,silver_count,mean_alpha");
        if audit {
            out.push_str(",silver_iou,silver_class_agreement");
        }
        out.push('\n');
        for r in &self.rows {
            write!(
                out,
                "{},{:.6},{},{},{}",
                r.gold_per_class, r.gold_fraction, r.combiner, r.init, r.seed
            )
            .unwrap();
            for c in 0..self.num_classes {
                write!(out, ",{}", fmt_opt(r.per_class_ap.get(c).copied().flatten())).unwrap();
            }
            write!(out, ",{},{},{}", fmt_opt(r.map), r.silver_count, fmt_opt(r.mean_alpha)).unwrap();
            if audit {
                let (a, b) = r.audit.map_or((None, None), |(a, b)| (Some(a), Some(b)));
                write!(out, ",{},{}", fmt_opt(a), fmt_opt(b)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`ResultTable::to_csv`] output; audit columns are detected from
    /// the header. Errors are not part of the CSV and come back as `None`.
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or("empty result CSV")?.split(',').collect();
        let audit = header.last() == Some(&"silver_class_agreement");
        let fixed = 8 + if audit { 2 } else { 0 };
        if header.len() < fixed || header[..5] != ["gold_size", "gold_fraction", "combiner", "init", "seed"] {
            return Err("unrecognized result CSV header".into());
        }
        let num_classes = header.len() - fixed;
        let opt = |v: &str| -> Result<Option<f64>, String> {
            if v == "NA" {
                Ok(None)
            } else {
                v.parse::<f64>().map(Some).map_err(|e| format!("{v:?}: {e}"))
            }
        };
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(format!("row {}: {} fields, expected {}", i + 1, f.len(), header.len()));
            }
            let num = |v: &str| v.parse::<f64>().map_err(|e| format!("row {}: {v:?}: {e}", i + 1));
            let int = |v: &str| v.parse::<u64>().map_err(|e| format!("row {}: {v:?}: {e}", i + 1));
            let k = 5 + num_classes;
            rows.push(ResultRow {
                gold_per_class: int(f[0])? as usize,
                gold_fraction: num(f[1])?,
                combiner: f[2].to_string(),
                init: f[3].to_string(),
                seed: int(f[4])?,
                per_class_ap: f[5..k].iter().map(|v| opt(v)).collect::<Result<_, _>>()?,
                map: opt(f[k])?,
                silver_count: int(f[k + 1])? as usize,
                mean_alpha: opt(f[k + 2])?,
                audit: if audit {
                    opt(f[k + 3])?.zip(opt(f[k + 4])?)
                } else {
                    None
                },
                error: None,
            });
        }
        Ok(Self { num_classes, rows })
    }

    /// Rows matching a predicate.
    pub fn select<'a>(&'a self, f: impl Fn(&ResultRow) -> bool + 'a) -> impl Iterator<Item = &'a ResultRow> {
        self.rows.iter().filter(move |r| f(r))
    }
}

/// Seed of repeat `r` under base seed `seed`.
pub fn repeat_seed(seed: u64, r: usize) -> u64 {
    derive_indexed(seed, "repeat", r)
}

fn row(
    gold_per_class: usize,
    gold_fraction: f64,
    combiner: String,
    init: String,
    seed: u64,
) -> ResultRow {
    ResultRow {
        gold_per_class,
        gold_fraction,
        combiner,
        init,
        seed,
        per_class_ap: Vec::new(),
        map: None,
        silver_count: 0,
        mean_alpha: None,
        audit: None,
        error: None,
    }
}

fn with_report(mut r: ResultRow, rep: &EvalReport) -> ResultRow {
    r.per_class_ap = rep.per_class_ap.clone();
    r.map = Some(rep.map);
    r
}

/// Everything the grid needs for one (gold size, repeat) unit: one dataset,
/// one teacher, one ensemble; then silver, scoring and a student per grid point.
fn run_unit(
    grid: &ExperimentGrid,
    base: &PipelineConfig,
    gold_per_class: usize,
    repeat: usize,
    audit: bool,
) -> Vec<ResultRow> {
    let seed = repeat_seed(base.seed, repeat);
    let mut rows = Vec::new();
    let control = row(gold_per_class, 1.0, CONTROL_COMBINER.into(), "none".into(), repeat as u64);
    let gold_images = base.gold_images(gold_per_class);
    let pool = grid
        .gold_fractions
        .iter()
        .map(|&f| base.unlabeled_images(gold_images, f))
        .max()
        .unwrap_or(1);
    let prepared = (|| -> Result<_, PipelineError> {
        let splits = prepare_data(base, gold_per_class, pool, seed)?;
        let (teacher, _) = train_teacher(&splits.gold, base, seed)?;
        let report = evaluate(&teacher, &splits.test, base.eval_iou)?;
        let ensemble = if grid.combiners.iter().any(|c| c.needs_classifiers()) {
            let ccfg = ClassifierTrainConfig {
                seed: derive_seed(seed, "classifiers"),
                ..base.classifier.clone()
            };
            Some(train_classifiers(&splits.gold, &ccfg)?.0)
        } else {
            None
        };
        Ok((splits, teacher, report, ensemble))
    })();
    let (splits, teacher, report, ensemble) = match prepared {
        Ok(v) => v,
        Err(e) => {
            log::error!("gold_size={gold_per_class} repeat={repeat} error={e}");
            let mut failed = control;
            failed.error = Some(e.to_string());
            rows.push(failed);
            for &f in &grid.gold_fractions {
                for c in &grid.combiners {
                    for i in &grid.inits {
                        let mut r = row(gold_per_class, f, c.to_string(), i.to_string(), repeat as u64);
                        r.error = Some(e.to_string());
                        rows.push(r);
                    }
                }
            }
            return rows;
        }
    };
    log::info!(
        "gold_size={gold_per_class} repeat={repeat} teacher_map={:.4}",
        report.map
    );
    rows.push(with_report(control, &report));

    let truth: BTreeMap<String, Vec<Annotation>> = splits
        .unlabeled
        .items
        .iter()
        .map(|i| i.name.clone())
        .zip(splits.unlabeled_truth.iter().cloned())
        .collect();
    for &fraction in &grid.gold_fractions {
        let mut pool_set = splits.unlabeled.clone();
        pool_set.items.truncate(base.unlabeled_images(gold_images, fraction));
        let silver = generate_silver(&teacher, &pool_set, &base.silver);
        for &combiner in &grid.combiners {
            for &init in &grid.inits {
                let mut r = row(
                    gold_per_class,
                    fraction,
                    combiner.to_string(),
                    init.to_string(),
                    repeat as u64,
                );
                let result = (|| -> Result<ResultRow, PipelineError> {
                    let (raw, _) = silver.as_ref().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
                    let (scored, _) = attach_scores(raw, ensemble.as_ref(), combiner)?;
                    let mut out = r.clone();
                    out.silver_count = scored.len();
                    out.mean_alpha = mean_alpha(&scored);
                    if audit {
                        out.audit = Some(silver_audit(&scored, &truth));
                    }
                    let train_set = if fraction > 0.0 {
                        mix_gold(&splits.gold, &scored)
                    } else {
                        scored
                    };
                    let (student, _) = train_student(&train_set, init, Some(&teacher), base, seed)?;
                    let rep = evaluate(&student, &splits.test, base.eval_iou)?;
                    Ok(with_report(out, &rep))
                })();
                match result {
                    Ok(done) => {
                        log::info!(
                            "gold_size={gold_per_class} fraction={fraction} combiner={combiner} init={init} repeat={repeat} map={:.4}",
                            done.map.unwrap_or(0.0)
                        );
                        rows.push(done)
                    }
                    Err(e) => {
                        log::error!("combiner={combiner} init={init} repeat={repeat} error={e}");
                        r.error = Some(e.to_string());
                        rows.push(r);
                    }
                }
            }
        }
    }
    rows
}

/// Runs every grid point; units of (gold size, repeat) go to a pool of `jobs`
/// workers and rows are merged in grid order.
pub fn run_experiment(
    grid: &ExperimentGrid,
    base: &PipelineConfig,
    jobs: usize,
    audit: bool,
) -> Result<ResultTable, PipelineError> {
    grid.validate()?;
    base.validate()?;
    let units: Vec<(usize, usize)> = grid
        .gold_per_class
        .iter()
        .flat_map(|&g| (0..grid.repeats).map(move |r| (g, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    let chunks: Vec<Vec<ResultRow>> = pool.install(|| {
        units
            .par_iter()
            .map(|&(g, r)| run_unit(grid, base, g, r, audit))
            .collect()
    });
    Ok(ResultTable {
        num_classes: base.detector.num_classes,
        rows: chunks.into_iter().flatten().collect(),
    })
}

/// Failure lines, one per failed row, for the sweep's side file.
pub fn failures(table: &ResultTable) -> Vec<String> {
    table
        .rows
        .iter()
        .filter_map(|r| {
            r.error.as_ref().map(|e| {
                format!(
                    "gold_size={} gold_fraction={} combiner={} init={} seed={} error={e}",
                    r.gold_per_class, r.gold_fraction, r.combiner, r.init, r.seed
                )
            })
        })
        .collect()
}
