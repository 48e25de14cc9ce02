//! On-disk dataset layout:
//!
//! ```text
//! DIR/manifest.txt        role, class names, seed, ordered image list
//! DIR/<name>.png          8-bit RGB
//! DIR/<name>.txt          one box per line
//! DIR/<name>.gt           hidden truth (unlabeled pool only, never read by trainers)
//! ```
//!
//! Box lines are `class cx cy w h` for gold/test and
//! `class cx cy w h alpha det_conf` for silver, reals with 6 decimals.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::{Annotation, DataError, Dataset, Image, Item, Labels, Role, ScoredAnnotation};

const MANIFEST: &str = "manifest.txt";
pub(crate) const HIDDEN_EXT: &str = "gt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_annotation(out: &mut String, a: &Annotation) {
    write!(out, "{} {:.6} {:.6} {:.6} {:.6}", a.class_id, a.cx, a.cy, a.w, a.h).unwrap();
}

pub(crate) fn format_labels(labels: &Labels) -> String {
    let mut out = String::new();
    match labels {
        Labels::None => {}
        Labels::Plain(v) => {
            for a in v {
                format_annotation(&mut out, a);
                out.push('\n');
            }
        }
        Labels::Scored(v) => {
            for s in v {
                format_annotation(&mut out, &s.annotation);
                writeln!(out, " {:.6} {:.6}", s.alpha, s.detector_confidence).unwrap();
            }
        }
    }
    out
}

fn parse_line(
    file: &Path,
    line_no: usize,
    line: &str,
    scored: bool,
) -> Result<ScoredAnnotation, DataError> {
    let bad = |msg: String| DataError::Parse {
        file: file.to_path_buf(),
        line: line_no,
        msg,
    };
    let fields: Vec<&str> = line.split_whitespace().collect();
    let expected = if scored { 7 } else { 5 };
    if fields.len() != expected {
        return Err(bad(format!(
            "expected {expected} fields, found {}",
            fields.len()
        )));
    }
    let class_id: usize = fields[0]
        .parse()
        .map_err(|_| bad(format!("bad class id {:?}", fields[0])))?;
    let reals = fields[1..]
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("bad number {f:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let annotation = Annotation::new(class_id, reals[0], reals[1], reals[2], reals[3]);
    let (alpha, detector_confidence) = if scored {
        (reals[4], reals[5])
    } else {
        (1.0, 1.0)
    };
    Ok(ScoredAnnotation {
        annotation,
        alpha,
        detector_confidence,
    })
}

pub(crate) fn parse_labels(path: &Path, text: &str, role: Role) -> Result<Labels, DataError> {
    let scored = role == Role::Silver;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(path, i + 1, line, scored)?);
    }
    Ok(match role {
        Role::Silver => Labels::Scored(out),
        Role::Unlabeled if out.is_empty() => Labels::None,
        _ => Labels::Plain(out.into_iter().map(|s| s.annotation).collect()),
    })
}

fn write_png(path: &Path, image: &Image) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| DataError::Png(e.to_string()))?;
    let plane = image.width * image.height;
    let mut interleaved = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            interleaved.push(image.data[c * plane + i]);
        }
    }
    writer
        .write_image_data(&interleaved)
        .map_err(|e| DataError::Png(e.to_string()))
}

fn read_png(path: &Path) -> Result<Image, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder
        .read_info()
        .map_err(|e| DataError::Png(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| DataError::Png(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(DataError::Png(format!("{}: expected 8-bit RGB", path.display())));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut image = Image::new(w, h);
    let plane = w * h;
    for i in 0..plane {
        for c in 0..3 {
            image.data[c * plane + i] = buf[3 * i + c];
        }
    }
    Ok(image)
}

pub(crate) fn manifest_text(ds: &Dataset) -> String {
    let mut out = String::new();
    writeln!(out, "role {}", ds.role).unwrap();
    writeln!(out, "classes {}", ds.class_names.join(" ")).unwrap();
    writeln!(out, "seed {}", ds.seed).unwrap();
    for item in &ds.items {
        writeln!(out, "image {}", item.name).unwrap();
    }
    out
}

/// Writes images, per-image box files and the manifest into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for item in &ds.items {
        write_png(&dir.join(format!("{}.png", item.name)), &item.image)?;
        let txt = dir.join(format!("{}.txt", item.name));
        fs::write(&txt, format_labels(&item.labels)).map_err(io_err(&txt))?;
    }
    let manifest = dir.join(MANIFEST);
    fs::write(&manifest, manifest_text(ds)).map_err(io_err(&manifest))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
    let (mut role, mut classes, mut seed) = (None, None, None);
    let mut names = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |msg: &str| DataError::Parse {
            file: manifest.clone(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let (key, value) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "role" => role = Some(Role::parse(value).ok_or_else(|| bad("unknown role"))?),
            "classes" => classes = Some(value.split_whitespace().map(String::from).collect()),
            "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad("bad seed"))?),
            "image" if !value.is_empty() => names.push(value.to_string()),
            "" => {}
            _ => return Err(bad("unrecognized manifest line")),
        }
    }
    let missing = |what: &str| DataError::Parse {
        file: manifest.clone(),
        line: 0,
        msg: format!("missing {what}"),
    };
    let role = role.ok_or_else(|| missing("role"))?;
    let class_names: Vec<String> = classes.ok_or_else(|| missing("classes"))?;
    let seed = seed.ok_or_else(|| missing("seed"))?;

    let mut items = Vec::with_capacity(names.len());
    for name in names {
        let image = read_png(&dir.join(format!("{name}.png")))?;
        let txt: PathBuf = dir.join(format!("{name}.txt"));
        let labels_text = fs::read_to_string(&txt).map_err(io_err(&txt))?;
        let labels = parse_labels(&txt, &labels_text, role)?;
        items.push(Item {
            name,
            image,
            labels,
        });
    }
    let ds = Dataset {
        role,
        class_names,
        seed,
        items,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the hidden ground truth of an unlabeled pool next to its images.
pub fn write_hidden_truth(
    ds: &Dataset,
    truth: &[Vec<Annotation>],
    dir: &Path,
) -> Result<(), DataError> {
    if ds.role != Role::Unlabeled || truth.len() != ds.len() {
        return Err(DataError::Invariant(
            "hidden truth must match an unlabeled dataset".into(),
        ));
    }
    for (item, boxes) in ds.items.iter().zip(truth) {
        let path = dir.join(format!("{}.{HIDDEN_EXT}", item.name));
        let text = format_labels(&Labels::Plain(boxes.clone()));
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Reads the hidden ground truth for the named images. Only analysis code
/// calls this.
pub fn read_hidden_truth(dir: &Path, names: &[String]) -> Result<Vec<Vec<Annotation>>, DataError> {
    names
        .iter()
        .map(|name| {
            let path = dir.join(format!("{name}.{HIDDEN_EXT}"));
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            Ok(parse_labels(&path, &text, Role::Gold)?.annotations())
        })
        .collect()
}
