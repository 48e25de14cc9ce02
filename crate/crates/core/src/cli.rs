//! Subcommands of the `silverweight` binary. Every stage reads and writes
//! files, so each can be rerun on its own.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::{default_config_text, RunConfig};
use crate::detector::{loss_history_csv, Detector};
use crate::eval::evaluate;
use crate::numerics::{ParamSet, CHECKPOINT_VERSION};
use crate::pipeline::{
    failures, generate_silver, prepare_data, run_experiment, train_student, train_teacher,
    StudentInit,
};
use crate::scoring::{attach_scores, train_classifiers, ClassifierTrainConfig, Ensemble, ScoreCombiner};
use crate::seed::{content_hash, derive_seed};
use crate::synthdata::{read_dataset, write_dataset, write_hidden_truth, Dataset, Role};

#[derive(Parser, Debug)]
#[command(name = "silverweight", version, about = "Pseudo-label detector training with classifier-weighted loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run config file (`section.key = value`); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the gold, unlabeled and test splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the teacher on the gold split.
    TrainTeacher {
        /// Data root from gen-data, or a gold split directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pseudo-label the unlabeled split with the teacher.
    Pseudolabel {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the four crop classifiers on gold.
    TrainClassifiers {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Attach alpha to every silver box.
    Score {
        #[arg(long)]
        silver: PathBuf,
        #[arg(long)]
        classifiers: Option<PathBuf>,
        #[arg(long)]
        combiner: ScoreCombiner,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the student on scored silver labels.
    TrainStudent {
        #[arg(long)]
        silver: PathBuf,
        #[arg(long)]
        init: StudentInit,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-class AP and mAP of a detector on a test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the whole pipeline over the config's grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Adds silver-quality columns from the unlabeled pool's hidden truth.
        #[arg(long)]
        audit: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the default config with every key documented.
    DefaultConfig,
}

pub fn long_version() -> String {
    format!(
        "{}\ncheckpoint format: SLVW v{}\nprofile: {}",
        env!("CARGO_PKG_VERSION"),
        CHECKPOINT_VERSION,
        if cfg!(debug_assertions) { "debug" } else { "release" }
    )
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    };
    if let Some(s) = seed {
        cfg.pipeline.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_params(path: &Path) -> Result<ParamSet> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ParamSet::read_checkpoint(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_detector(path: &Path, cfg: &RunConfig) -> Result<Detector> {
    Ok(Detector::from_params(&cfg.pipeline.detector, read_params(path)?, 0)?)
}

/// A split directory, or the named split inside a gen-data root.
fn split_dir(path: &Path, role: Role) -> PathBuf {
    let nested = path.join(role.as_str());
    if !path.join("manifest.txt").exists() && nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn expect_role(ds: &Dataset, role: Role, path: &Path) -> Result<()> {
    if ds.role != role {
        bail!("{} holds a {} dataset, expected {}", path.display(), ds.role, role);
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Runs one subcommand; the returned text is the final status line.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { out, common } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let p = &cfg.pipeline;
            let gold = p.gold_images(p.gold_per_class);
            let splits = prepare_data(p, p.gold_per_class, p.unlabeled_images(gold, 0.0), p.seed)?;
            for ds in [&splits.gold, &splits.unlabeled, &splits.test] {
                write_dataset(ds, &out.join(ds.role.as_str()))?;
            }
            write_hidden_truth(&splits.unlabeled, &splits.unlabeled_truth, &out.join(Role::Unlabeled.as_str()))?;
            write(&out.join("config.txt"), cfg.serialize())?;
            Ok(format!(
                "status=ok command=gen-data gold={} unlabeled={} test={} out={}",
                splits.gold.len(),
                splits.unlabeled.len(),
                splits.test.len(),
                out.display()
            ))
        }
        Command::TrainTeacher { data, out, common } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let dir = split_dir(&data, Role::Gold);
            let gold = read_dataset(&dir)?;
            expect_role(&gold, Role::Gold, &dir)?;
            let (det, history) = train_teacher(&gold, &cfg.pipeline, cfg.pipeline.seed)?;
            write(&out, det.params.checkpoint_bytes())?;
            write(&sibling(&out, ".loss.csv"), loss_history_csv(&history))?;
            Ok(format!(
                "status=ok command=train-teacher images={} final_loss={:.6} out={}",
                gold.len(),
                history.last().map_or(f64::NAN, |l| l.total),
                out.display()
            ))
        }
        Command::Pseudolabel { teacher, unlabeled, out, common } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let det = load_detector(&teacher, &cfg)?;
            let dir = split_dir(&unlabeled, Role::Unlabeled);
            let pool = read_dataset(&dir)?;
            expect_role(&pool, Role::Unlabeled, &dir)?;
            let (silver, stats) = generate_silver(&det, &pool, &cfg.pipeline.silver)?;
            write_dataset(&silver, &out)?;
            log::info!(
                "images_in={} blank={} capped={} kept={} boxes={}",
                stats.images_in,
                stats.blank,
                stats.capped,
                stats.kept,
                stats.boxes
            );
            Ok(format!(
                "status=ok command=pseudolabel kept={} boxes={} out={}",
                stats.kept,
                stats.boxes,
                out.display()
            ))
        }
        Command::TrainClassifiers { gold, out, common } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let dir = split_dir(&gold, Role::Gold);
            let ds = read_dataset(&dir)?;
            expect_role(&ds, Role::Gold, &dir)?;
            let ccfg = ClassifierTrainConfig {
                seed: derive_seed(cfg.pipeline.seed, "classifiers"),
                ..cfg.pipeline.classifier.clone()
            };
            let (ens, accs) = train_classifiers(&ds, &ccfg)?;
            write(&out, ens.to_params().checkpoint_bytes())?;
            let accs: Vec<String> = accs.iter().map(|a| format!("{a:.4}")).collect();
            Ok(format!(
                "status=ok command=train-classifiers holdout_accuracy={} out={}",
                accs.join(","),
                out.display()
            ))
        }
        Command::Score { silver, classifiers, combiner, out, .. } => {
            let ds = read_dataset(&silver)?;
            expect_role(&ds, Role::Silver, &silver)?;
            let ens = match &classifiers {
                Some(p) => Some(Ensemble::from_params(&read_params(p)?)?),
                None if combiner.needs_classifiers() => {
                    bail!("combiner {combiner} needs --classifiers")
                }
                None => None,
            };
            let (scored, csv) = attach_scores(&ds, ens.as_ref(), combiner)?;
            write_dataset(&scored, &out)?;
            write(&out.join("scores.csv"), csv)?;
            Ok(format!(
                "status=ok command=score combiner={combiner} boxes={} out={}",
                scored.annotation_count(),
                out.display()
            ))
        }
        Command::TrainStudent { silver, init, teacher, out, common } => {
            let mut cfg = load_config(common.config.as_deref(), common.seed)?;
            cfg.pipeline.init = init;
            let ds = read_dataset(&silver)?;
            expect_role(&ds, Role::Silver, &silver)?;
            let teacher = teacher.map(|p| load_detector(&p, &cfg)).transpose()?;
            let (det, history) = train_student(&ds, init, teacher.as_ref(), &cfg.pipeline, cfg.pipeline.seed)?;
            write(&out, det.params.checkpoint_bytes())?;
            write(&sibling(&out, ".loss.csv"), loss_history_csv(&history))?;
            Ok(format!(
                "status=ok command=train-student init={init} images={} final_loss={:.6} out={}",
                ds.len(),
                history.last().map_or(f64::NAN, |l| l.total),
                out.display()
            ))
        }
        Command::Eval { model, test, out, common } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let det = load_detector(&model, &cfg)?;
            let dir = split_dir(&test, Role::Test);
            let ds = read_dataset(&dir)?;
            expect_role(&ds, Role::Test, &dir)?;
            let report = evaluate(&det, &ds, cfg.pipeline.eval_iou)?;
            write(&out, report.to_csv(&ds.class_names))?;
            Ok(format!("status=ok command=eval mAP={:.6} out={}", report.map, out.display()))
        }
        Command::Sweep { grid, out, jobs, audit, seed } => {
            let text = fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let mut cfg = RunConfig::parse(&text)?;
            if let Some(s) = seed {
                cfg.pipeline.seed = s;
            }
            let table = run_experiment(&cfg.grid, &cfg.pipeline, jobs, audit)?;
            let csv = table.to_csv(audit);
            write(&out.join("results.csv"), &csv)?;
            let resolved = cfg.serialize();
            let manifest = format!(
                "version {}\nconfig_hash {}\nresults_hash {}\naudit {}\nrows {}\n\n{}",
                env!("CARGO_PKG_VERSION"),
                content_hash(resolved.as_bytes()),
                content_hash(csv.as_bytes()),
                audit,
                table.rows.len(),
                resolved
            );
            write(&out.join("manifest.txt"), manifest)?;
            let failed = failures(&table);
            if !failed.is_empty() {
                write(&out.join("failures.txt"), failed.join("\n") + "\n")?;
            }
            Ok(format!(
                "status=ok command=sweep rows={} failed={} out={}",
                table.rows.len(),
                failed.len(),
                out.display()
            ))
        }
        Command::DefaultConfig => {
            let _ = std::io::Write::write_all(&mut std::io::stdout(), default_config_text().as_bytes());
            Ok("# status=ok command=default-config".into())
        }
    }
}
