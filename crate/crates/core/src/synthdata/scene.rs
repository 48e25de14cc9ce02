use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Annotation, DataError, Dataset, Image, Item, Labels, Role};
use crate::eval::iou;
use crate::seed::derive_indexed;

const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
        }
    }

    /// Membership test in shape-local coordinates, `u,v ∈ [-1,1]`.
    fn contains(&self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Disk => r2 <= 1.0,
            ShapeKind::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
            ShapeKind::Ring => (0.3..=1.0).contains(&r2),
            ShapeKind::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent as a fraction of the image side.
    pub min_size: f64,
    pub max_size: f64,
    /// Maximum relative deviation of an object's aspect ratio from 1.
    pub aspect_jitter: f64,
    /// Per-channel object color jitter, in 8-bit levels.
    pub color_jitter: f64,
    /// Uniform per-pixel noise amplitude, in 8-bit levels.
    pub noise_level: f64,
    pub max_overlap_iou: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 5,
            min_objects: 1,
            max_objects: 3,
            min_size: 0.2,
            max_size: 0.45,
            aspect_jitter: 0.2,
            color_jitter: 60.0,
            noise_level: 20.0,
            max_overlap_iou: 0.1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.image_size < 8 {
            return err("image_size must be at least 8");
        }
        if self.num_classes == 0 || self.num_classes > ShapeKind::ALL.len() {
            return err("num_classes must be in 1..=5");
        }
        if self.min_objects < 1 || self.max_objects > 4 || self.min_objects > self.max_objects {
            return err("objects per image must satisfy 1 <= min <= max <= 4");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return err("object size range must satisfy 0 < min <= max <= 1");
        }
        if !(0.0..1.0).contains(&self.aspect_jitter) {
            return err("aspect_jitter must be in [0,1)");
        }
        if self.color_jitter < 0.0 || self.noise_level < 0.0 {
            return err("jitter and noise must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.max_overlap_iou) {
            return err("max_overlap_iou must be in [0,1]");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        ShapeKind::ALL[..self.num_classes]
            .iter()
            .map(|k| k.name().to_string())
            .collect()
    }
}

/// One placed object, in pixel units.
#[derive(Clone, Copy, Debug)]
struct Placement {
    kind: ShapeKind,
    class_id: usize,
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
}

impl Placement {
    fn covers(&self, px: usize, py: usize) -> bool {
        let u = (px as f64 + 0.5 - self.cx) / self.half_w;
        let v = (py as f64 + 0.5 - self.cy) / self.half_h;
        self.kind.contains(u, v)
    }

    fn pixel_bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let lo = |c: f64, h: f64| ((c - h).floor().max(0.0)) as usize;
        let hi = |c: f64, h: f64| ((c + h).ceil() as usize).min(size);
        (
            lo(self.cx, self.half_w),
            lo(self.cy, self.half_h),
            hi(self.cx, self.half_w),
            hi(self.cy, self.half_h),
        )
    }

    /// Tight box around the rasterized mask.
    fn tight_box(&self, size: usize) -> Option<Annotation> {
        let (x0, y0, x1, y1) = self.pixel_bounds(size);
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for py in y0..y1 {
            for px in x0..x1 {
                if self.covers(px, py) {
                    bounds = Some(match bounds {
                        None => (px, py, px, py),
                        Some((a, b, c, d)) => (a.min(px), b.min(py), c.max(px), d.max(py)),
                    });
                }
            }
        }
        let s = size as f64;
        bounds.map(|(a, b, c, d)| {
            Annotation::from_corners(
                self.class_id,
                a as f64 / s,
                b as f64 / s,
                (c + 1) as f64 / s,
                (d + 1) as f64 / s,
            )
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub annotations: Vec<Annotation>,
}

/// Renders one scene; `(spec, seed)` determines every byte.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<Scene, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let s = size as f64;
    let n = rng.gen_range(spec.min_objects..=spec.max_objects);

    let mut placed: Vec<(Placement, Annotation)> = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = rng.gen_range(0..spec.num_classes);
        let kind = ShapeKind::ALL[class_id];
        let mut accepted = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let extent = rng.gen_range(spec.min_size..=spec.max_size) * s;
            let aspect = 1.0 + rng.gen_range(-1.0..=1.0) * spec.aspect_jitter;
            let (w, h) = (extent * aspect.sqrt(), extent / aspect.sqrt());
            let (w, h) = (w.min(s), h.min(s));
            let cx = rng.gen_range(w / 2.0..=s - w / 2.0);
            let cy = rng.gen_range(h / 2.0..=s - h / 2.0);
            let p = Placement {
                kind,
                class_id,
                cx,
                cy,
                half_w: w / 2.0,
                half_h: h / 2.0,
            };
            let Some(ann) = p.tight_box(size) else {
                continue;
            };
            if placed
                .iter()
                .all(|(_, other)| iou(&ann, other) <= spec.max_overlap_iou)
            {
                accepted = Some((p, ann));
                break;
            }
        }
        placed.push(accepted.ok_or(DataError::Placement(MAX_PLACEMENT_ATTEMPTS))?);
    }

    let mut image = Image::new(size, size);
    let background: [f64; 3] = std::array::from_fn(|_| rng.gen_range(20.0..90.0));
    let mut canvas: Vec<[f64; 3]> = vec![background; size * size];
    for (p, _) in &placed {
        let color: [f64; 3] = std::array::from_fn(|_| {
            let base = 200.0;
            (base + rng.gen_range(-1.0..=1.0) * spec.color_jitter).clamp(0.0, 255.0)
        });
        let (x0, y0, x1, y1) = p.pixel_bounds(size);
        for py in y0..y1 {
            for px in x0..x1 {
                if p.covers(px, py) {
                    canvas[py * size + px] = color;
                }
            }
        }
    }
    for (idx, px) in canvas.iter().enumerate() {
        for (c, &v) in px.iter().enumerate() {
            let noise = if spec.noise_level > 0.0 {
                rng.gen_range(-1.0..=1.0) * spec.noise_level
            } else {
                0.0
            };
            image.data[c * size * size + idx] = (v + noise).round().clamp(0.0, 255.0) as u8;
        }
    }

    Ok(Scene {
        image,
        annotations: placed.into_iter().map(|(_, a)| a).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub gold: usize,
    pub unlabeled: usize,
    pub test: usize,
}

/// Output of [`generate_splits`]. `unlabeled_truth` is the hidden sidecar:
/// ground truth for the unlabeled pool, kept out of [`Dataset`] so that no
/// training path can see it.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub gold: Dataset,
    pub unlabeled: Dataset,
    pub test: Dataset,
    pub unlabeled_truth: Vec<Vec<Annotation>>,
}

pub(crate) fn split_image_seed(seed: u64, role: Role, index: usize) -> u64 {
    derive_indexed(seed, role.as_str(), index)
}

pub(crate) fn image_name(role: Role, index: usize) -> String {
    format!("{}_{index:05}", role.as_str())
}

fn render_split(
    spec: &SceneSpec,
    seed: u64,
    role: Role,
    count: usize,
) -> Result<(Dataset, Vec<Vec<Annotation>>), DataError> {
    let mut items = Vec::with_capacity(count);
    let mut truth = Vec::with_capacity(count);
    for i in 0..count {
        let scene = render_scene(spec, split_image_seed(seed, role, i))?;
        let labels = match role {
            Role::Unlabeled => Labels::None,
            _ => Labels::Plain(scene.annotations.clone()),
        };
        truth.push(scene.annotations);
        items.push(Item {
            name: image_name(role, i),
            image: scene.image,
            labels,
        });
    }
    let ds = Dataset {
        role,
        class_names: spec.class_names(),
        seed,
        items,
    };
    Ok((ds, truth))
}

/// Gold, unlabeled and test splits from disjoint seed streams.
pub fn generate_splits(
    spec: &SceneSpec,
    sizes: SplitSizes,
    seed: u64,
) -> Result<Splits, DataError> {
    if sizes.gold == 0 || sizes.unlabeled == 0 || sizes.test == 0 {
        return Err(DataError::InvalidSpec("split sizes must be >= 1".into()));
    }
    let (gold, _) = render_split(spec, seed, Role::Gold, sizes.gold)?;
    let (unlabeled, unlabeled_truth) = render_split(spec, seed, Role::Unlabeled, sizes.unlabeled)?;
    let (test, _) = render_split(spec, seed, Role::Test, sizes.test)?;
    Ok(Splits {
        gold,
        unlabeled,
        test,
        unlabeled_truth,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn plain_spec() -> SceneSpec {
        SceneSpec {
            min_objects: 1,
            max_objects: 1,
            num_classes: 1,
            aspect_jitter: 0.0,
            color_jitter: 0.0,
            noise_level: 0.0,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn render_is_deterministic() {
        let spec = plain_spec();
        assert_eq!(render_scene(&spec, 11).unwrap(), render_scene(&spec, 11).unwrap());
        let spec = SceneSpec::default();
        assert_eq!(render_scene(&spec, 12).unwrap(), render_scene(&spec, 12).unwrap());
        assert_ne!(render_scene(&spec, 12).unwrap(), render_scene(&spec, 13).unwrap());
    }

    #[test]
    fn centered_disk_box() {
        let r = 10.0;
        let p = Placement {
            kind: ShapeKind::Disk,
            class_id: 0,
            cx: 32.0,
            cy: 32.0,
            half_w: r,
            half_h: r,
        };
        let a = p.tight_box(64).unwrap();
        let px = 1.0 / 64.0;
        assert!((a.cx - 0.5).abs() <= px);
        assert!((a.cy - 0.5).abs() <= px);
        assert!((a.w - 2.0 * r / 64.0).abs() <= px);
        assert!((a.h - 2.0 * r / 64.0).abs() <= px);
    }

    // Independent check: recover each object's box by scanning a fresh
    // per-object mask over the whole image.
    fn mask_box(p: &Placement, size: usize) -> (usize, usize, usize, usize) {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..size {
            for x in 0..size {
                if p.covers(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0, y0, x1, y1)
    }

    #[test]
    fn annotations_are_tight_and_valid() {
        let spec = SceneSpec::default();
        let size = spec.image_size;
        let tol = 1.0 / size as f64 + 1e-9;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let seed: u64 = rng.gen();
            let scene = render_scene(&spec, seed).unwrap();
            assert!((1..=4).contains(&scene.annotations.len()));
            for a in &scene.annotations {
                a.validate(spec.num_classes).unwrap();
            }
            for (i, a) in scene.annotations.iter().enumerate() {
                for b in &scene.annotations[i + 1..] {
                    assert!(iou(a, b) <= spec.max_overlap_iou + 1e-9);
                }
            }
        }
        // Pixel-mask oracle on randomly placed shapes of every kind.
        for kind in ShapeKind::ALL {
            for _ in 0..200 {
                let hw = rng.gen_range(4.0..14.0);
                let hh = rng.gen_range(4.0..14.0);
                let p = Placement {
                    kind,
                    class_id: 0,
                    cx: rng.gen_range(hw..size as f64 - hw),
                    cy: rng.gen_range(hh..size as f64 - hh),
                    half_w: hw,
                    half_h: hh,
                };
                let a = p.tight_box(size).unwrap();
                let (x0, y0, x1, y1) = mask_box(&p, size);
                let s = size as f64;
                let (ax0, ay0, ax1, ay1) = a.corners();
                assert!((ax0 - x0 as f64 / s).abs() <= tol);
                assert!((ay0 - y0 as f64 / s).abs() <= tol);
                assert!((ax1 - x1 as f64 / s).abs() <= tol);
                assert!((ay1 - y1 as f64 / s).abs() <= tol);
            }
        }
    }

    #[test]
    fn scene_boxes_match_pixels() {
        // No noise, so object pixels are exactly the object color and the
        // background is exactly the background color.
        let spec = SceneSpec {
            min_objects: 1,
            max_objects: 1,
            noise_level: 0.0,
            ..SceneSpec::default()
        };
        let size = spec.image_size;
        for seed in 0..200 {
            let scene = render_scene(&spec, seed).unwrap();
            let bg = [0, 1, 2].map(|c| scene.image.get(c, 0, 0));
            let corner_is_bg = [0, 1, 2].map(|c| scene.image.get(c, size - 1, size - 1)) == bg;
            if !corner_is_bg {
                continue;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (size, size, 0, 0);
            for y in 0..size {
                for x in 0..size {
                    if [0, 1, 2].map(|c| scene.image.get(c, y, x)) != bg {
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                    }
                }
            }
            let (ax0, ay0, ax1, ay1) = scene.annotations[0].corners();
            let s = size as f64;
            let tol = 1.0 / s + 1e-9;
            assert!((ax0 - x0 as f64 / s).abs() <= tol, "seed {seed}");
            assert!((ay0 - y0 as f64 / s).abs() <= tol, "seed {seed}");
            assert!((ax1 - x1 as f64 / s).abs() <= tol, "seed {seed}");
            assert!((ay1 - y1 as f64 / s).abs() <= tol, "seed {seed}");
        }
    }

    #[test]
    fn placement_failure_is_reported() {
        let spec = SceneSpec {
            min_objects: 4,
            max_objects: 4,
            min_size: 0.95,
            max_size: 1.0,
            max_overlap_iou: 0.0,
            ..SceneSpec::default()
        };
        assert!(matches!(render_scene(&spec, 1), Err(DataError::Placement(100))));
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let spec = SceneSpec::default();
        let sizes = SplitSizes {
            gold: 64,
            unlabeled: 512,
            test: 128,
        };
        let splits = generate_splits(&spec, sizes, 3).unwrap();
        assert_eq!(splits.gold.len(), 64);
        assert_eq!(splits.unlabeled.len(), 512);
        assert_eq!(splits.test.len(), 128);
        assert_eq!(splits.unlabeled_truth.len(), 512);
        assert!(splits.unlabeled.items.iter().all(|i| i.labels.is_empty()));
        splits.gold.validate().unwrap();
        splits.unlabeled.validate().unwrap();
        splits.test.validate().unwrap();

        let mut seeds = HashSet::new();
        for (role, n) in [(Role::Gold, 64), (Role::Unlabeled, 512), (Role::Test, 128)] {
            for i in 0..n {
                assert!(seeds.insert(split_image_seed(3, role, i)));
            }
        }
        let images: HashSet<_> = splits
            .gold
            .items
            .iter()
            .chain(&splits.unlabeled.items)
            .chain(&splits.test.items)
            .map(|i| i.image.data.clone())
            .collect();
        assert_eq!(images.len(), 64 + 512 + 128);

        let again = generate_splits(&spec, sizes, 3).unwrap();
        assert_eq!(splits, again);
    }

    #[test]
    fn gold_sweep_grid() {
        // Gold-set sweep used by the size experiment: increasing sizes share
        // a prefix, so larger gold sets extend smaller ones.
        let spec = SceneSpec::default();
        let sweep = [128, 160, 192, 224, 256];
        let mut prev: Option<Dataset> = None;
        for &n in &sweep[..2] {
            let s = generate_splits(
                &spec,
                SplitSizes {
                    gold: n,
                    unlabeled: 1,
                    test: 1,
                },
                9,
            )
            .unwrap();
            assert_eq!(s.gold.len(), n);
            if let Some(p) = prev {
                assert_eq!(&s.gold.items[..p.len()], &p.items[..]);
            }
            prev = Some(s.gold);
        }
        assert!(sweep.windows(2).all(|w| w[1] - w[0] == 32));
    }
}
