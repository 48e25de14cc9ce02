//! Line-oriented `section.key = value` run configuration.
//!
//! Every key has a default; `#` starts a comment. Unknown or repeated keys are
//! errors. Serializing writes every key with its documentation, and parsing
//! that output gives back the same config.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::pipeline::{ExperimentGrid, PipelineConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: {key}: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub grid: ExperimentGrid,
}

struct Field {
    key: &'static str,
    doc: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<(), String>,
}

fn parse<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: Display,
{
    s.parse::<T>().map_err(|e| format!("cannot parse {s:?}: {e}"))
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    s.split(',').map(|p| parse(p.trim())).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

macro_rules! field {
    ($key:literal, $doc:literal, $($path:ident).+) => {
        Field {
            key: $key,
            doc: $doc,
            get: |c| c.$($path).+.to_string(),
            set: |c, s| {
                c.$($path).+ = parse(s)?;
                Ok(())
            },
        }
    };
    ($key:literal, $doc:literal, list $($path:ident).+) => {
        Field {
            key: $key,
            doc: $doc,
            get: |c| join(&c.$($path).+),
            set: |c, s| {
                c.$($path).+ = parse_list(s)?;
                Ok(())
            },
        }
    };
}

fn fields() -> Vec<Field> {
    vec![
        field!("run.seed", "base seed; every stage derives its own stream from it", pipeline.seed),
        field!("scene.image_size", "square image side in pixels; the detector grid is image_size/16", pipeline.scene.image_size),
        field!("scene.num_classes", "number of shape classes, 1..=5", pipeline.scene.num_classes),
        field!("scene.min_objects", "fewest objects per scene", pipeline.scene.min_objects),
        field!("scene.max_objects", "most objects per scene, at most 4", pipeline.scene.max_objects),
        field!("scene.min_size", "smallest object extent as a fraction of the image side", pipeline.scene.min_size),
        field!("scene.max_size", "largest object extent as a fraction of the image side", pipeline.scene.max_size),
        field!("scene.aspect_jitter", "maximum relative aspect-ratio deviation, [0,1)", pipeline.scene.aspect_jitter),
        field!("scene.color_jitter", "per-channel object color jitter in 8-bit levels", pipeline.scene.color_jitter),
        field!("scene.noise_level", "uniform pixel noise amplitude in 8-bit levels", pipeline.scene.noise_level),
        field!("scene.max_overlap_iou", "largest IoU allowed between objects of one scene", pipeline.scene.max_overlap_iou),
        field!("data.gold_per_class", "gold boxes per class (sets the gold image count)", pipeline.gold_per_class),
        field!("data.unlabeled_ratio", "unlabeled images per gold image", pipeline.unlabeled_ratio),
        field!("data.test_images", "test images", pipeline.test_images),
        field!("detector.boxes_per_cell", "box predictors per grid cell", pipeline.detector.boxes_per_cell),
        field!("detector.lambda_coord", "weight of the centre and size terms", pipeline.detector.lambda_coord),
        field!("detector.lambda_noobj", "weight of the no-object confidence term", pipeline.detector.lambda_noobj),
        field!("detector.conf_target", "confidence target of responsible boxes: one | iou", pipeline.detector.conf_target),
        field!("detector.conf_threshold", "score threshold for evaluation detections", pipeline.detector.conf_threshold),
        field!("detector.nms_iou_threshold", "class-wise NMS IoU threshold for evaluation", pipeline.detector.nms_iou_threshold),
        field!("teacher.lr", "teacher SGD learning rate", pipeline.teacher.lr),
        field!("teacher.momentum", "teacher SGD momentum", pipeline.teacher.momentum),
        field!("teacher.epochs", "teacher epochs", pipeline.teacher.epochs),
        field!("teacher.batch_size", "teacher mini-batch size", pipeline.teacher.batch_size),
        field!("teacher.class_flip", "probability a teacher gold box gets a wrong class", pipeline.teacher_noise.class_flip),
        field!("teacher.box_jitter", "relative jitter of teacher gold box centre and size", pipeline.teacher_noise.box_jitter),
        field!("silver.conf_threshold", "teacher score needed to keep a pseudo-label", pipeline.silver.conf_threshold),
        field!("silver.nms_iou_threshold", "class-wise NMS IoU threshold for pseudo-labels", pipeline.silver.nms_iou_threshold),
        field!("silver.imbalance_cap", "per-class box cap as a multiple of the median class count", pipeline.silver.imbalance_cap),
        field!("classifier.crop_size", "classifier input side in pixels", pipeline.classifier.crop_size),
        field!("classifier.epochs", "classifier epochs", pipeline.classifier.epochs),
        field!("classifier.lr", "classifier SGD learning rate", pipeline.classifier.lr),
        field!("classifier.momentum", "classifier SGD momentum", pipeline.classifier.momentum),
        field!("classifier.batch_size", "classifier mini-batch size", pipeline.classifier.batch_size),
        field!("classifier.holdout_fraction", "share of gold crops held out for accuracy", pipeline.classifier.holdout_fraction),
        field!("student.lr", "student SGD learning rate", pipeline.student.lr),
        field!("student.momentum", "student SGD momentum", pipeline.student.momentum),
        field!("student.epochs", "student epochs", pipeline.student.epochs),
        field!("student.batch_size", "student mini-batch size", pipeline.student.batch_size),
        field!("student.init", "student start: reinit | bootstrap", pipeline.init),
        field!("student.combiner", "alpha rule: const1 | clf0..clf3 | avg | max | maxdet | det", pipeline.combiner),
        field!("student.noobj_alpha", "no-object term weight: mean (image mean alpha) | one", pipeline.noobj_alpha),
        field!("eval.iou_threshold", "IoU needed for a true positive", pipeline.eval_iou),
        field!("grid.gold_per_class", "sweep: gold boxes per class, comma separated", list grid.gold_per_class),
        field!("grid.combiners", "sweep: alpha rules, comma separated", list grid.combiners),
        field!("grid.inits", "sweep: student starts, comma separated", list grid.inits),
        field!("grid.gold_fractions", "sweep: gold share of student data, 0 means silver only", list grid.gold_fractions),
        field!("grid.repeats", "sweep: seeds per grid point", grid.repeats),
    ]
}

impl RunConfig {
    /// Detector shape fields that follow from the scene.
    fn sync(&mut self) {
        let p = &mut self.pipeline;
        p.detector.num_classes = p.scene.num_classes;
        p.detector.input_size = p.scene.image_size;
        p.detector.grid_size = p.scene.image_size / 16;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn Display| ConfigError::Invalid(e.to_string());
        self.pipeline.validate().map_err(|e| inv(&e))?;
        self.grid.validate().map_err(|e| inv(&e))?;
        let t = [&self.pipeline.teacher, &self.pipeline.student];
        for c in t {
            if !(c.lr >= 0.0) || !(0.0..1.0).contains(&c.momentum) || c.batch_size == 0 {
                return Err(ConfigError::Invalid("learning rate, momentum or batch size out of range".into()));
            }
        }
        let c = &self.pipeline.classifier;
        if !(0.0..1.0).contains(&c.holdout_fraction) || c.crop_size < 8 || c.batch_size == 0 {
            return Err(ConfigError::Invalid("classifier holdout, crop size or batch size out of range".into()));
        }
        if !(self.pipeline.eval_iou > 0.0 && self.pipeline.eval_iou <= 1.0) {
            return Err(ConfigError::Invalid("eval.iou_threshold outside (0,1]".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table = fields();
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected `section.key = value`, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let field = table
                .iter()
                .find(|f| f.key == key)
                .ok_or_else(|| ConfigError::UnknownKey { line, key: key.to_string() })?;
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.to_string() });
            }
            (field.set)(&mut cfg, value).map_err(|msg| ConfigError::Value {
                line,
                key: key.to_string(),
                msg,
            })?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for f in fields() {
            let s = f.key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            out.push_str(&format!("# {}\n{} = {}\n", f.doc, f.key, (f.get)(self)));
        }
        out
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn keys() -> Vec<&'static str> {
        fields().iter().map(|f| f.key).collect()
    }
}

/// Config with only the default values, as a documented file.
pub fn default_config_text() -> String {
    let mut c = RunConfig::default();
    c.sync();
    c.serialize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ConfTarget;
    use crate::pipeline::StudentInit;
    use crate::scoring::ScoreCombiner;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let text = default_config_text();
        let a = RunConfig::parse(&text).unwrap();
        assert_eq!(a.serialize(), text);
        assert_eq!(RunConfig::parse(&a.serialize()).unwrap(), a);
        let mut d = RunConfig::default();
        d.sync();
        assert_eq!(a, d);
    }

    #[test]
    fn every_key_documented_once() {
        let keys = RunConfig::keys();
        let set: std::collections::BTreeSet<_> = keys.iter().collect();
        assert_eq!(set.len(), keys.len());
        assert!(fields().iter().all(|f| !f.doc.is_empty()));
    }

    #[test]
    fn errors() {
        assert!(matches!(RunConfig::parse("nope.key = 1"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(RunConfig::parse("\nrun.seed"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(
            RunConfig::parse("run.seed = 1\nrun.seed = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(RunConfig::parse("run.seed = -1"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse("student.init = warm"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse("teacher.class_flip = 1.5"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::parse("scene.image_size = 60"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::parse("grid.repeats = 0"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn comments_and_derived_fields() {
        let c = RunConfig::parse("# x\nscene.image_size = 32 # small\ngrid.gold_per_class = 16, 32\n").unwrap();
        assert_eq!(c.pipeline.detector.grid_size, 2);
        assert_eq!(c.pipeline.detector.input_size, 32);
        assert_eq!(c.grid.gold_per_class, vec![16, 32]);
    }

    proptest! {
        #[test]
        fn parse_serialize_fixed_point(
            seed in any::<u64>(),
            lr in 1e-5f64..1.0,
            flip in 0.0f64..1.0,
            thr in 0.01f64..0.99,
            golds in proptest::collection::vec(1usize..200, 1..5),
            fracs in proptest::collection::vec(0.0f64..0.99, 1..4),
            comb in 0usize..9,
            init in any::<bool>(),
            target in any::<bool>(),
        ) {
            let combs = ["const1", "clf0", "clf1", "clf2", "clf3", "avg", "max", "maxdet", "det"];
            let text = format!(
                "run.seed = {seed}\nteacher.lr = {lr}\nteacher.class_flip = {flip}\nsilver.conf_threshold = {thr}\n\
                 grid.gold_per_class = {}\ngrid.gold_fractions = {}\nstudent.combiner = {}\nstudent.init = {}\n\
                 detector.conf_target = {}\n",
                join(&golds), join(&fracs), combs[comb],
                if init { "bootstrap" } else { "reinit" },
                if target { ConfTarget::Iou } else { ConfTarget::One },
            );
            let a = RunConfig::parse(&text).unwrap();
            prop_assert_eq!(a.pipeline.teacher.lr, lr);
            prop_assert_eq!(a.pipeline.combiner, combs[comb].parse::<ScoreCombiner>().unwrap());
            prop_assert_eq!(a.pipeline.init, if init { StudentInit::Bootstrap } else { StudentInit::Reinit });
            let s = a.serialize();
            let b = RunConfig::parse(&s).unwrap();
            prop_assert_eq!(&b, &a);
            prop_assert_eq!(b.serialize(), s);
        }
    }
}
