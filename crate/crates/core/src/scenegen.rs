//! Procedural "instrument" scenes with exact whole and per-part masks.
//!
//! An instrument is a chain of parts laid along an axis that enters the
//! frame from one border. Instruments are drawn in order, so later ones
//! occlude earlier ones; tissue blobs drawn last occlude both. All masks are
//! read back from a single label map, which makes part masks of one
//! instrument disjoint and their union the whole mask by construction.

use gradkit::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_VOCAB: [&str; 5] = ["shaft", "wrist", "tip", "disc", "hook"];

const MAX_ATTEMPTS: usize = 200;

pub fn default_vocab() -> Vec<String> {
    DEFAULT_VOCAB.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub category_id: usize,
    pub name: String,
    /// Indices into the part vocabulary, ascending.
    pub parts: Vec<usize>,
    pub color_seed: u64,
}

const NAMED_TABLE: [(&str, &[&str]); 8] = [
    ("large needle driver", &["shaft", "wrist", "tip"]),
    ("monopolar curved scissors", &["shaft", "tip"]),
    ("bipolar forceps", &["shaft", "wrist", "disc"]),
    ("clip applier", &["shaft", "hook"]),
    ("prograsp forceps", &["shaft", "wrist", "tip", "disc"]),
    ("vessel sealer", &["shaft", "disc"]),
    ("grasping retractor", &["shaft", "wrist", "hook"]),
    ("suction instrument", &["shaft"]),
];

/// The shipped category table, restricted to `count` entries.
///
/// Entries whose parts are missing from `vocab` are skipped; when the named
/// entries run out, further categories use unused part subsets.
pub fn default_category_table(vocab: &[String], count: usize) -> Result<Vec<CategorySpec>> {
    let index = |name: &str| vocab.iter().position(|v| v == name);
    for required in ["shaft", "wrist", "tip"] {
        if index(required).is_none() {
            return Err(Error::Config(format!("part vocabulary must contain `{required}`")));
        }
    }
    if count == 0 {
        return Err(Error::Config("category count must be positive".into()));
    }
    let mut subsets: Vec<(String, Vec<usize>)> = Vec::new();
    for (name, parts) in NAMED_TABLE {
        let idx: Option<Vec<usize>> = parts.iter().map(|p| index(p)).collect();
        if let Some(mut idx) = idx {
            idx.sort_unstable();
            subsets.push((name.to_string(), idx));
        }
    }
    let p = vocab.len();
    let mut mask = 1u64;
    while subsets.len() < count && p < 63 && mask < (1u64 << p) {
        let idx: Vec<usize> = (0..p).filter(|i| mask >> i & 1 == 1).collect();
        if !subsets.iter().any(|(_, s)| *s == idx) {
            subsets.push((format!("instrument {}", subsets.len() + 1), idx));
        }
        mask += 1;
    }
    if subsets.len() < count {
        return Err(Error::Config(format!(
            "cannot build {count} categories with distinct part sets over {p} parts"
        )));
    }
    Ok(subsets
        .into_iter()
        .take(count)
        .enumerate()
        .map(|(i, (name, parts))| CategorySpec {
            category_id: i,
            name,
            parts,
            color_seed: i as u64,
        })
        .collect())
}

/// Binary `H x W` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Usage(format!(
                "mask of {height}x{width} needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count()
    }

    pub fn union(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a || b).count()
    }

    pub fn to_tensor<T: gradkit::Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![self.height, self.width], |i| if self.data[i] { T::one() } else { T::zero() })
    }
}

/// One drawn instrument. `parts` and `occluded` are indexed by the global
/// part vocabulary; parts the category lacks have empty masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub category: usize,
    pub whole: Mask,
    pub parts: Vec<Mask>,
    /// True for a part of the category whose visible area is zero.
    pub occluded: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Every drawn instrument, ordered by category id.
    pub instances: Vec<Instance>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Categories with a non-empty whole mask, ascending.
    pub fn present_categories(&self) -> Vec<usize> {
        self.instances
            .iter()
            .filter(|i| !i.whole.is_empty())
            .map(|i| i.category)
            .collect()
    }

    pub fn instance(&self, category: usize) -> Option<&Instance> {
        self.instances.iter().find(|i| i.category == category)
    }

    /// Whole mask of `category`, empty when it is not in the scene.
    pub fn whole_mask(&self, category: usize) -> Mask {
        self.instance(category)
            .map_or_else(|| Mask::empty(self.height(), self.width()), |i| i.whole.clone())
    }

    /// Part masks of `category` (`parts` entries), empty when absent.
    pub fn part_masks(&self, category: usize, parts: usize) -> Vec<Mask> {
        self.instance(category).map_or_else(
            || vec![Mask::empty(self.height(), self.width()); parts],
            |i| i.parts.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub vocab: Vec<String>,
    pub categories: Vec<CategorySpec>,
    pub max_instruments: usize,
    pub occlusion_prob: f64,
    pub clutter_level: f64,
}

impl SceneConfig {
    pub fn default_for(height: usize, width: usize, categories: usize) -> Result<Self> {
        let vocab = default_vocab();
        let categories = default_category_table(&vocab, categories)?;
        Ok(Self {
            height,
            width,
            max_instruments: categories.len().min(3),
            vocab,
            categories,
            occlusion_prob: 0.15,
            clutter_level: 0.5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "scene size {}x{} is below the 32x32 minimum",
                self.height, self.width
            )));
        }
        if self.max_instruments == 0 || self.max_instruments > self.categories.len() {
            return Err(Error::Config(format!(
                "max_instruments must lie in [1, {}], got {}",
                self.categories.len(),
                self.max_instruments
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || !(0.0..=1.0).contains(&self.clutter_level) {
            return Err(Error::Config("occlusion_prob and clutter_level must lie in [0, 1]".into()));
        }
        for (i, c) in self.categories.iter().enumerate() {
            if c.category_id != i {
                return Err(Error::Config(format!("category at position {i} has id {}", c.category_id)));
            }
            if c.parts.is_empty() || c.parts.iter().any(|&p| p >= self.vocab.len()) {
                return Err(Error::Config(format!("category `{}` has an invalid part list", c.name)));
            }
        }
        for (i, a) in self.categories.iter().enumerate() {
            if self.categories[..i]
                .iter()
                .any(|b| b.parts == a.parts && b.color_seed == a.color_seed)
            {
                return Err(Error::Config(format!("category `{}` duplicates another", a.name)));
            }
        }
        Ok(())
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn category_hue(color_seed: u64) -> f64 {
    (0.08 + 0.23 * color_seed as f64).fract()
}

/// Smooth tissue background: low-saturation pink with slow variation.
struct Tissue {
    freq: [f64; 4],
    phase: [f64; 4],
}

impl Tissue {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            freq: std::array::from_fn(|_| rng.random_range(0.04..0.2)),
            phase: std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)),
        }
    }

    fn color(&self, y: f64, x: f64, shade: f64) -> [f64; 3] {
        let a = (x * self.freq[0] + self.phase[0]).sin() * (y * self.freq[1] + self.phase[1]).cos();
        let b = (y * self.freq[2] + self.phase[2]).sin() * (x * self.freq[3] + self.phase[3]).cos();
        hsv(0.97, 0.28 + 0.07 * a, 0.82 + 0.07 * b + shade)
    }
}

/// Axis-aligned rectangle in instrument-local coordinates
/// (`a` along the axis, `b` across it).
#[derive(Debug, Clone, Copy)]
struct LocalBox {
    a0: f64,
    a1: f64,
    b0: f64,
    b1: f64,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Elongated quadrilateral (shaft) or short one (wrist).
    Bar { a0: f64, len: f64, half_width: f64 },
    /// Two tapering jaws opening away from the axis.
    Jaws { a0: f64, len: f64, half_width: f64, open: f64 },
    Disc { centre: f64, radius: f64 },
    /// Bar with a perpendicular barb at its far end.
    Hook { a0: f64, len: f64, thick: f64, barb: f64, side: f64 },
}

impl Shape {
    fn contains(&self, a: f64, b: f64) -> bool {
        match *self {
            Shape::Bar { a0, len, half_width } => a >= a0 && a <= a0 + len && b.abs() <= half_width,
            Shape::Jaws { a0, len, half_width, open } => {
                if a < a0 || a > a0 + len {
                    return false;
                }
                let t = (a - a0) / len;
                let half = 0.5 * half_width * (1.0 - t);
                let centre = 0.5 * half_width + t * open;
                (b.abs() - centre).abs() <= half
            }
            Shape::Disc { centre, radius } => (a - centre).powi(2) + b * b <= radius * radius,
            Shape::Hook { a0, len, thick, barb, side } => {
                let shank = a >= a0 && a <= a0 + len && b.abs() <= 0.5 * thick;
                let tip = a >= a0 + len - thick && a <= a0 + len && b * side >= 0.0 && b * side <= barb;
                shank || tip
            }
        }
    }

    fn bounds(&self) -> LocalBox {
        match *self {
            Shape::Bar { a0, len, half_width } => LocalBox { a0, a1: a0 + len, b0: -half_width, b1: half_width },
            Shape::Jaws { a0, len, half_width, open } => {
                let reach = half_width.max(0.5 * half_width + open);
                LocalBox { a0, a1: a0 + len, b0: -reach, b1: reach }
            }
            Shape::Disc { centre, radius } => LocalBox {
                a0: centre - radius,
                a1: centre + radius,
                b0: -radius,
                b1: radius,
            },
            Shape::Hook { a0, len, thick, barb, .. } => {
                let reach = barb.max(0.5 * thick);
                LocalBox { a0, a1: a0 + len, b0: -reach, b1: reach }
            }
        }
    }

    /// Colour of the part at local coordinates, before noise.
    fn shade(&self, part_name: &str, hue: f64, a: f64, b: f64) -> [f64; 3] {
        match (part_name, self) {
            ("shaft", _) => hsv(hue, 0.8, 0.55 + 0.08 * (b * 1.3).cos()),
            ("wrist", _) => {
                let checker = ((a / 2.5).floor() + (b / 2.5).floor()).rem_euclid(2.0);
                hsv(hue, 0.7, 0.78 + 0.12 * checker)
            }
            ("tip", _) => hsv(hue, 0.45, 0.95),
            (_, Shape::Disc { centre, .. }) => {
                let r = ((a - centre).powi(2) + b * b).sqrt();
                hsv(hue, 0.75, 0.7 + 0.1 * (r * 1.5).cos())
            }
            _ => hsv(hue, 0.9, 0.65),
        }
    }
}

struct Pose {
    oy: f64,
    ox: f64,
    uy: f64,
    ux: f64,
}

impl Pose {
    fn local(&self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.oy, x - self.ox);
        (dy * self.uy + dx * self.ux, -dy * self.ux + dx * self.uy)
    }
}

struct Drawn {
    category: usize,
    pose: Pose,
    /// (vocab index, shape) in chain order.
    parts: Vec<(usize, Shape)>,
}

fn place_instrument(rng: &mut ChaCha8Rng, cfg: &SceneConfig, category: usize, scale: f64) -> Drawn {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let side = rng.random_range(0..4);
    let along = rng.random_range(0.2..0.8);
    // entry point on the border and inward normal
    let (ey, ex, ny, nx) = match side {
        0 => (0.0, along * w, 1.0, 0.0),
        1 => (h, along * w, -1.0, 0.0),
        2 => (along * h, 0.0, 0.0, 1.0),
        _ => (along * h, w, 0.0, -1.0),
    };
    let angle: f64 = rng.random_range(-0.6..0.6);
    let (s, c) = angle.sin_cos();
    let (uy, ux) = (ny * c - nx * s, ny * s + nx * c);
    let pose = Pose {
        oy: ey - 6.0 * scale * uy,
        ox: ex - 6.0 * scale * ux,
        uy,
        ux,
    };
    let spec = &cfg.categories[category];
    let half_width = rng.random_range(4.5..6.0) * scale;
    let mut cursor = 0.0;
    let mut parts = Vec::with_capacity(spec.parts.len());
    for &p in &spec.parts {
        let shape = match cfg.vocab[p].as_str() {
            "shaft" => {
                let len = rng.random_range(24.0..32.0) * scale;
                Shape::Bar { a0: cursor, len, half_width }
            }
            "wrist" => {
                let len = rng.random_range(7.0..9.0) * scale;
                Shape::Bar {
                    a0: cursor,
                    len,
                    half_width: half_width + scale,
                }
            }
            "tip" => Shape::Jaws {
                a0: cursor,
                len: rng.random_range(10.0..13.0) * scale,
                half_width,
                open: rng.random_range(1.0..3.0) * scale,
            },
            "disc" => {
                let radius = rng.random_range(6.0..7.5) * scale;
                Shape::Disc {
                    centre: cursor + radius,
                    radius,
                }
            }
            _ => Shape::Hook {
                a0: cursor,
                len: rng.random_range(9.0..12.0) * scale,
                thick: 5.0 * scale,
                barb: rng.random_range(6.0..8.0) * scale,
                side: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            },
        };
        let b = shape.bounds();
        cursor = b.a1;
        parts.push((p, shape));
    }
    Drawn { category, pose, parts }
}

/// Pixel ownership: `Some((instrument slot, vocab part))` or tissue.
type LabelMap = Vec<Option<(usize, usize)>>;

/// Generates one scene; pure in `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(sample) = attempt(&mut rng, cfg) {
            return Ok(sample);
        }
    }
    Err(Error::Generation(format!(
        "no valid layout for seed {seed} after {MAX_ATTEMPTS} attempts"
    )))
}

fn attempt(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Option<SceneSample> {
    let (h, w) = (cfg.height, cfg.width);
    let scale = (h.min(w) as f64) / 64.0;
    let min_visible = ((12.0 * scale * scale).round() as usize).max(3);
    let n_parts = cfg.vocab.len();

    let count = rng.random_range(1..=cfg.max_instruments);
    let mut chosen = sample(rng, cfg.categories.len(), count).into_vec();
    chosen.sort_unstable();
    let drawn: Vec<Drawn> = chosen.iter().map(|&c| place_instrument(rng, cfg, c, scale)).collect();
    let designated: Vec<Vec<bool>> = drawn
        .iter()
        .map(|d| d.parts.iter().map(|_| rng.random_bool(cfg.occlusion_prob)).collect())
        .collect();

    // draw order is random; masks are reported per category
    let mut order: Vec<usize> = (0..drawn.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }

    let mut labels: LabelMap = vec![None; h * w];
    for &slot in &order {
        let d = &drawn[slot];
        for y in 0..h {
            for x in 0..w {
                let (a, b) = d.pose.local(y as f64 + 0.5, x as f64 + 0.5);
                if let Some(&(p, _)) = d.parts.iter().rev().find(|(_, s)| s.contains(a, b)) {
                    labels[y * w + x] = Some((slot, p));
                }
            }
        }
    }

    // tissue blobs: deliberate covers over designated parts, then clutter
    let mut covers: Vec<(usize, Shape)> = Vec::new();
    for (slot, d) in drawn.iter().enumerate() {
        for (k, (_, shape)) in d.parts.iter().enumerate() {
            if designated[slot][k] {
                covers.push((slot, *shape));
            }
        }
    }
    let clutter = (cfg.clutter_level * 4.0).round() as usize;
    let blobs: Vec<(f64, f64, f64, f64, f64)> = (0..clutter)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(3.0..7.0) * scale,
                rng.random_range(3.0..7.0) * scale,
                rng.random_range(0.0..std::f64::consts::PI),
            )
        })
        .collect();
    let mut tissue_over = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let covered = covers.iter().any(|(slot, shape)| {
                let (a, b) = drawn[*slot].pose.local(py, px);
                let bx = shape.bounds();
                // superellipse that contains the part's whole local box
                let ca = 0.5 * (bx.a0 + bx.a1);
                let cb = 0.5 * (bx.b0 + bx.b1);
                let ra = (0.5 * (bx.a1 - bx.a0) + 1.0) * 1.19;
                let rb = (0.5 * (bx.b1 - bx.b0) + 1.0) * 1.19;
                ((a - ca) / ra).powi(4) + ((b - cb) / rb).powi(4) <= 1.0
            }) || blobs.iter().any(|&(cy, cx, ry, rx, th)| {
                let (s, c) = th.sin_cos();
                let (dy, dx) = (py - cy, px - cx);
                let (u, v) = (dy * c + dx * s, -dy * s + dx * c);
                (u / ry).powi(2) + (v / rx).powi(2) <= 1.0
            });
            if covered {
                labels[y * w + x] = None;
                tissue_over[y * w + x] = true;
            }
        }
    }

    // masks and validity
    let mut instances: Vec<Instance> = drawn
        .iter()
        .map(|d| Instance {
            category: d.category,
            whole: Mask::empty(h, w),
            parts: vec![Mask::empty(h, w); n_parts],
            occluded: vec![false; n_parts],
        })
        .collect();
    for (i, label) in labels.iter().enumerate() {
        if let Some((slot, p)) = *label {
            instances[slot].whole.data[i] = true;
            instances[slot].parts[p].data[i] = true;
        }
    }
    for (slot, d) in drawn.iter().enumerate() {
        for (k, &(p, _)) in d.parts.iter().enumerate() {
            let area = instances[slot].parts[p].count();
            if designated[slot][k] {
                debug_assert_eq!(area, 0, "designated part must be fully covered");
            } else if area < min_visible {
                return None;
            }
            instances[slot].occluded[p] = area == 0;
        }
    }
    if instances.iter().all(|i| i.whole.is_empty()) {
        return None;
    }

    // render
    let tissue = Tissue::new(rng);
    let mut image = vec![0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let rgb = match labels[i] {
                Some((slot, p)) => {
                    let d = &drawn[slot];
                    let (a, b) = d.pose.local(py, px);
                    let shape = d.parts.iter().find(|(q, _)| *q == p).map(|(_, s)| *s).expect("drawn part");
                    let hue = category_hue(cfg.categories[d.category].color_seed);
                    shape.shade(&cfg.vocab[p], hue, a, b)
                }
                None => tissue.color(py, px, if tissue_over[i] { -0.04 } else { 0.0 }),
            };
            for ch in 0..3 {
                let noise = rng.random_range(-0.02..0.02);
                image[i * 3 + ch] = (rgb[ch] + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Some(SceneSample {
        image: Tensor::new(vec![h, w, 3], image).expect("image shape"),
        instances,
    })
}
