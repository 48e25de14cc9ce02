//! Pseudo-label quality scores from an ensemble of four small crop classifiers.

use std::fmt;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::numerics::{NodeId, NumericsError, ParamSet, Scalar, Sgd, Tape, Tensor};
use crate::seed::{derive_indexed, rng_for};
use crate::synthdata::{crop_resize, Annotation, DataError, Dataset, Image, Labels, Role};

pub const ENSEMBLE_SIZE: usize = 4;
pub const BASE_WIDTHS: [usize; 3] = [8, 16, 32];
/// Channel-width multipliers that make the four classifiers differ.
pub const WIDTH_MULTIPLIERS: [f64; ENSEMBLE_SIZE] = [1.0, 1.25, 0.75, 1.5];
const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("class {0} has no gold crops")]
    MissingClass(usize),
    #[error("crop is {actual}×{actual}, classifiers expect {expected}×{expected}")]
    CropSize { expected: usize, actual: usize },
    #[error("detector confidence {0} outside [0,1]")]
    DetConf(f64),
    #[error("expected a {expected} dataset, got {actual}")]
    WrongRole { expected: Role, actual: Role },
    #[error("classifier checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Rule that turns the four class scores (and the teacher's confidence) into alpha.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScoreCombiner {
    Constant1,
    SingleClassifier(usize),
    Avg,
    Max,
    MaxWithDetector,
    /// The teacher's own decoded confidence.
    SingleDetector,
}

impl ScoreCombiner {
    pub fn combine(&self, s: &[f64; ENSEMBLE_SIZE], det_conf: f64) -> f64 {
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v = match self {
            ScoreCombiner::Constant1 => 1.0,
            ScoreCombiner::SingleClassifier(k) => s[*k],
            ScoreCombiner::Avg => s.iter().sum::<f64>() / ENSEMBLE_SIZE as f64,
            ScoreCombiner::Max => max,
            ScoreCombiner::MaxWithDetector => max.max(det_conf),
            ScoreCombiner::SingleDetector => det_conf,
        };
        v.clamp(0.0, 1.0)
    }

    pub fn needs_classifiers(&self) -> bool {
        !matches!(self, ScoreCombiner::Constant1 | ScoreCombiner::SingleDetector)
    }
}

impl fmt::Display for ScoreCombiner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreCombiner::Constant1 => f.write_str("const1"),
            ScoreCombiner::SingleClassifier(k) => write!(f, "clf{k}"),
            ScoreCombiner::Avg => f.write_str("avg"),
            ScoreCombiner::Max => f.write_str("max"),
            ScoreCombiner::MaxWithDetector => f.write_str("maxdet"),
            ScoreCombiner::SingleDetector => f.write_str("det"),
        }
    }
}

impl std::str::FromStr for ScoreCombiner {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "const1" => ScoreCombiner::Constant1,
            "avg" => ScoreCombiner::Avg,
            "max" => ScoreCombiner::Max,
            "maxdet" => ScoreCombiner::MaxWithDetector,
            "det" => ScoreCombiner::SingleDetector,
            _ => match s.strip_prefix("clf").and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if k < ENSEMBLE_SIZE => ScoreCombiner::SingleClassifier(k),
                _ => return Err(format!("unknown combiner {s:?}")),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTrainConfig {
    pub crop_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            crop_size: 32,
            epochs: 15,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

/// One conv 8/16/32 (scaled) + dense classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub widths: [usize; 3],
    pub params: ParamSet,
}

fn scaled_widths(mult: f64) -> [usize; 3] {
    BASE_WIDTHS.map(|w| ((w as f64) * mult).round() as usize)
}

impl Classifier {
    pub fn build(widths: [usize; 3], crop_size: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "classifier-init");
        let mut params = ParamSet::new();
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
            Tensor::new(shape, data).expect("positive extents")
        };
        let mut c_in = 3;
        for (i, &w) in widths.iter().enumerate() {
            params.insert(format!("conv{i}.w"), uniform(&[w, c_in, 3, 3], 9 * c_in));
            params.insert(format!("conv{i}.b"), Tensor::zeros(&[w]));
            c_in = w;
        }
        let side = crop_size >> widths.len();
        let features = c_in * side * side;
        params.insert("fc.w", uniform(&[num_classes, features], features));
        params.insert("fc.b", Tensor::zeros(&[num_classes]));
        Self { widths, params }
    }

    fn logits<T: Scalar>(tape: &mut Tape<T>, ids: &[NodeId], x: NodeId) -> Result<NodeId, NumericsError> {
        let mut h = x;
        for i in 0..3 {
            h = tape.conv2d(h, ids[2 * i], ids[2 * i + 1], 1, 1)?;
            h = tape.leaky_relu(h, T::of_f64(LEAKY_SLOPE));
            h = tape.maxpool2(h)?;
        }
        let n = tape.value(h).len();
        let flat = tape.reshape(h, &[n])?;
        tape.dense(flat, ids[6], ids[7])
    }

    /// Softmax class probabilities for a planar `[3,N,N]` unit-scaled crop.
    fn probs(&self, input: &Tensor<f32>) -> Result<Vec<f64>, NumericsError> {
        let mut tape = Tape::<f32>::new();
        let ids: Vec<NodeId> = self.params.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let x = tape.constant(input.clone());
        let logits = Self::logits(&mut tape, &ids, x)?;
        let p = tape.softmax(logits);
        Ok(tape.value(p).data().iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub classifiers: Vec<Classifier>,
    pub crop_size: usize,
    pub num_classes: usize,
}

fn crop_tensor(img: &Image) -> Tensor<f32> {
    Tensor::new(&[3, img.height, img.width], img.to_unit()).expect("image extents")
}

/// `(crop, class)` for every annotation of a labelled dataset.
pub fn crop_set(data: &Dataset, crop_size: usize) -> Result<Vec<(Tensor<f32>, usize)>, ScoringError> {
    let mut out = Vec::new();
    for item in &data.items {
        for a in item.labels.annotations() {
            out.push((crop_tensor(&crop_resize(&item.image, &a, crop_size)?), a.class_id));
        }
    }
    Ok(out)
}

/// Cross-entropy training of one classifier on `train`; returns accuracy on `holdout`.
pub fn train_classifier(
    clf: &mut Classifier,
    train: &[(Tensor<f32>, usize)],
    holdout: &[(Tensor<f32>, usize)],
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<f64, ScoringError> {
    let mut sgd = Sgd::new(cfg.lr as f32, cfg.momentum as f32);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(seed, &format!("classifier-epoch/{epoch}")));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut sum: Option<Vec<Tensor<f32>>> = None;
            for &i in chunk {
                let mut tape = Tape::<f32>::new();
                let ids: Vec<NodeId> = clf.params.iter().map(|(_, t)| tape.param(t.clone())).collect();
                let x = tape.constant(train[i].0.clone());
                let logits = Classifier::logits(&mut tape, &ids, x)?;
                let loss = tape.cross_entropy(logits, train[i].1)?;
                tape.backward(loss)?;
                let grads: Vec<Tensor<f32>> = ids.iter().map(|&id| tape.grad_tensor(id)).collect();
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(p, q)| *p += q);
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f32;
            let grads: Vec<Tensor<f32>> = sum
                .expect("non-empty chunk")
                .into_iter()
                .map(|g| g.map(|v| v * scale))
                .collect();
            sgd.step(&mut clf.params, &grads);
        }
    }
    accuracy(clf, holdout)
}

fn accuracy(clf: &Classifier, set: &[(Tensor<f32>, usize)]) -> Result<f64, ScoringError> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (x, y) in set {
        let p = clf.probs(x)?;
        if argmax(&p) == *y {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.len() as f64)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Splits crops into train and holdout parts with a seeded permutation.
pub fn holdout_split<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut rng_for(seed, "classifier-holdout"));
    let n_hold = ((items.len() as f64) * fraction).round() as usize;
    let n_hold = n_hold.min(items.len().saturating_sub(1));
    let (hold, train) = idx.split_at(n_hold);
    (
        train.iter().map(|&i| items[i].clone()).collect(),
        hold.iter().map(|&i| items[i].clone()).collect(),
    )
}

/// Trains the four classifiers on gold crops. Returns the ensemble and each
/// member's holdout accuracy.
pub fn train_classifiers(
    gold: &Dataset,
    cfg: &ClassifierTrainConfig,
) -> Result<(Ensemble, Vec<f64>), ScoringError> {
    if gold.role != Role::Gold {
        return Err(ScoringError::WrongRole {
            expected: Role::Gold,
            actual: gold.role,
        });
    }
    let c = gold.num_classes();
    let crops = crop_set(gold, cfg.crop_size)?;
    for class in 0..c {
        if !crops.iter().any(|(_, y)| *y == class) {
            return Err(ScoringError::MissingClass(class));
        }
    }
    let (train, holdout) = holdout_split(&crops, cfg.holdout_fraction, cfg.seed);
    let mut classifiers = Vec::with_capacity(ENSEMBLE_SIZE);
    let mut accuracies = Vec::with_capacity(ENSEMBLE_SIZE);
    for (k, &mult) in WIDTH_MULTIPLIERS.iter().enumerate() {
        let seed = derive_indexed(cfg.seed, "classifier", k);
        let mut clf = Classifier::build(scaled_widths(mult), cfg.crop_size, c, seed);
        let acc = train_classifier(&mut clf, &train, &holdout, cfg, seed)?;
        log::info!("classifier={k} holdout_accuracy={acc:.4}");
        classifiers.push(clf);
        accuracies.push(acc);
    }
    Ok((
        Ensemble {
            classifiers,
            crop_size: cfg.crop_size,
            num_classes: c,
        },
        accuracies,
    ))
}

impl Ensemble {
    /// Probability vector of classifier `k` for a `crop_size²` crop.
    pub fn classify(&self, k: usize, crop: &Image) -> Result<Vec<f64>, ScoringError> {
        if crop.width != self.crop_size || crop.height != self.crop_size {
            return Err(ScoringError::CropSize {
                expected: self.crop_size,
                actual: crop.width.max(crop.height),
            });
        }
        Ok(self.classifiers[k].probs(&crop_tensor(crop))?)
    }

    /// Probability of the annotation's own class under each classifier.
    pub fn class_scores(&self, image: &Image, ann: &Annotation) -> Result<[f64; ENSEMBLE_SIZE], ScoringError> {
        let crop = crop_resize(image, ann, self.crop_size)?;
        let mut s = [0.0; ENSEMBLE_SIZE];
        for (k, v) in s.iter_mut().enumerate() {
            *v = self.classify(k, &crop)?[ann.class_id];
        }
        Ok(s)
    }

    /// All four classifiers in one parameter set, prefixed `clf0.` … `clf3.`.
    pub fn to_params(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (k, clf) in self.classifiers.iter().enumerate() {
            set.extend_prefixed(&format!("clf{k}"), &clf.params);
        }
        set
    }

    /// Rebuilds an ensemble, recovering widths, crop size and class count from
    /// tensor shapes.
    pub fn from_params(set: &ParamSet) -> Result<Self, ScoringError> {
        let bad = |m: String| ScoringError::Checkpoint(m);
        let mut classifiers = Vec::new();
        let (mut crop_size, mut num_classes) = (0, 0);
        for k in 0..ENSEMBLE_SIZE {
            let params = set.with_prefix(&format!("clf{k}"));
            let mut widths = [0; 3];
            for (i, w) in widths.iter_mut().enumerate() {
                *w = params.require(&format!("conv{i}.w"))?.shape()[0];
            }
            let fc = params.require("fc.w")?;
            let (c, features) = (fc.shape()[0], fc.shape()[1]);
            let side2 = features / widths[2];
            let side = (side2 as f64).sqrt().round() as usize;
            if side * side * widths[2] != features {
                return Err(bad(format!("clf{k}: dense input {features} is not square")));
            }
            let crop = side << 3;
            let expected = Classifier::build(widths, crop, c, 0);
            for (name, t) in expected.params.iter() {
                if params.require(name)?.shape() != t.shape() {
                    return Err(bad(format!("clf{k}.{name}: unexpected shape")));
                }
            }
            if params.len() != expected.params.len() {
                return Err(bad(format!("clf{k}: unexpected tensors")));
            }
            if k > 0 && (crop != crop_size || c != num_classes) {
                return Err(bad("classifiers disagree on crop size or classes".into()));
            }
            crop_size = crop;
            num_classes = c;
            classifiers.push(Classifier {
                widths,
                params: expected.params.iter().map(|(n, _)| n).fold(ParamSet::new(), |mut acc, n| {
                    acc.insert(n, params.get(n).expect("checked above").clone());
                    acc
                }),
            });
        }
        Ok(Self {
            classifiers,
            crop_size,
            num_classes,
        })
    }
}

/// Alpha for one pseudo-box under `combiner`.
pub fn score_annotation(
    ens: Option<&Ensemble>,
    image: &Image,
    ann: &Annotation,
    det_conf: f64,
    combiner: ScoreCombiner,
) -> Result<f64, ScoringError> {
    Ok(score_detail(ens, image, ann, det_conf, combiner)?.1)
}

/// Class scores (zeros when the combiner needs no classifiers) and alpha.
pub fn score_detail(
    ens: Option<&Ensemble>,
    image: &Image,
    ann: &Annotation,
    det_conf: f64,
    combiner: ScoreCombiner,
) -> Result<([f64; ENSEMBLE_SIZE], f64), ScoringError> {
    if !(0.0..=1.0).contains(&det_conf) {
        return Err(ScoringError::DetConf(det_conf));
    }
    let s = match (combiner.needs_classifiers(), ens) {
        (false, _) => [0.0; ENSEMBLE_SIZE],
        (true, Some(e)) => e.class_scores(image, ann)?,
        (true, None) => {
            return Err(ScoringError::Checkpoint(format!(
                "combiner {combiner} needs classifier parameters"
            )))
        }
    };
    Ok((s, combiner.combine(&s, det_conf)))
}

/// Fills alpha for every silver annotation. Returns the scored set and the
/// `scores.csv` audit text.
pub fn attach_scores(
    silver: &Dataset,
    ens: Option<&Ensemble>,
    combiner: ScoreCombiner,
) -> Result<(Dataset, String), ScoringError> {
    if silver.role != Role::Silver {
        return Err(ScoringError::WrongRole {
            expected: Role::Silver,
            actual: silver.role,
        });
    }
    let mut out = silver.clone();
    let mut csv = String::from("image,box_index,class,s0,s1,s2,s3,det_conf,alpha,combiner\n");
    for item in &mut out.items {
        let Labels::Scored(boxes) = &mut item.labels else {
            continue;
        };
        for (i, b) in boxes.iter_mut().enumerate() {
            let (s, alpha) = score_detail(ens, &item.image, &b.annotation, b.detector_confidence, combiner)?;
            b.alpha = crate::synthdata::quantize(alpha);
            writeln!(
                csv,
                "{},{i},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{combiner}",
                item.name, b.annotation.class_id, s[0], s[1], s[2], s[3], b.detector_confidence, b.alpha
            )
            .unwrap();
        }
    }
    Ok((out, csv))
}
