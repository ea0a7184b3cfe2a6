//! Procedural shapes dataset and incremental step construction.
//!
//! Each foreground class is a shape family with its own texture and base
//! colour: 1 circle, 2 square, 3 triangle, 4 cross, 5 bar, 6 diamond.
//! Backgrounds carry per-scene colour noise of random strength and clutter
//! shapes whose texture and colour belong to different classes; both are
//! labelled background. Masks are rasterized
//! analytically at pixel centres, so labels are exact.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::LabelMap;
use crate::numcore::Tensor;
use crate::rng::{stream, Rng};

pub const MAX_CLASS: u8 = 6;
pub const MIN_CANVAS: usize = 32;
/// Background clutter shapes per scene, at most.
pub const MAX_CLUTTER: usize = 2;
/// Range of the per-scene background noise amplitude.
const BG_NOISE: (f64, f64) = (0.05, 0.8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Circle,
    Square,
    Triangle,
    Cross,
    Bar,
    Diamond,
}

impl Family {
    pub fn of_class(class: u8) -> Family {
        match (class.max(1) - 1) % 6 {
            0 => Family::Circle,
            1 => Family::Square,
            2 => Family::Triangle,
            3 => Family::Cross,
            4 => Family::Bar,
            _ => Family::Diamond,
        }
    }

    /// Whether pixel-centre offset `(dy, dx)` from the centre lies inside a
    /// shape of radius `r`.
    pub fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Family::Circle => dx * dx + dy * dy <= r * r,
            Family::Square => dx.abs().max(dy.abs()) <= 0.85 * r,
            Family::Triangle => dy >= -r && dy <= 0.7 * r && dx.abs() <= 0.58 * (dy + r),
            Family::Cross => {
                (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
            }
            Family::Bar => dy.abs() <= r / 2.5 && dx.abs() <= r,
            Family::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

fn texture(class: u8, y: usize, x: usize) -> f64 {
    let on = match (class.max(1) - 1) % 6 {
        0 => (y / 2) % 2 == 0,
        1 => (x / 2) % 2 == 0,
        2 => (x / 2 + y / 2) % 2 == 0,
        3 => ((x + y) / 2) % 2 == 0,
        4 => (x % 3 == 0) || (y % 3 == 0),
        _ => (x % 4 < 2) && (y % 4 < 2),
    };
    if on {
        1.0
    } else {
        0.0
    }
}

fn base_color(class: u8) -> [f64; 3] {
    match (class.max(1) - 1) % 6 {
        0 => [0.90, 0.20, 0.20],
        1 => [0.20, 0.80, 0.25],
        2 => [0.20, 0.30, 0.90],
        3 => [0.90, 0.85, 0.20],
        4 => [0.85, 0.20, 0.85],
        _ => [0.20, 0.85, 0.85],
    }
}

/// Boolean mask of a shape centred at `(cy, cx)` on a `canvas x canvas` grid.
pub fn rasterize(family: Family, cy: f64, cx: f64, r: f64, canvas: usize) -> Vec<bool> {
    let mut mask = vec![false; canvas * canvas];
    for y in 0..canvas {
        for x in 0..canvas {
            mask[y * canvas + x] = family.contains(y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r);
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class: u8,
    /// `[y0, x0, y1, x1)` in pixels.
    pub bbox: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Global class id per pixel (0 = background).
    pub labels: Vec<u8>,
    pub instances: Vec<Instance>,
    pub height: usize,
    pub width: usize,
}

impl Scene {
    /// Classes with at least one labelled pixel.
    pub fn present_classes(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().filter(|&c| c != 0).collect()
    }

    pub fn label_map(&self, classes: usize) -> Result<LabelMap> {
        LabelMap::new(classes, self.height, self.width, self.labels.clone())
    }
}

/// Renders one scene with one shape per class in `class_subset`.
pub fn gen_scene(rng: &mut Rng, class_subset: &[u8], canvas: usize) -> Result<Scene> {
    if canvas < MIN_CANVAS {
        return Err(Error::Invalid(format!("canvas {canvas} below {MIN_CANVAS}")));
    }
    if class_subset.len() > 4 {
        return Err(Error::Invalid("at most 4 classes per scene".into()));
    }
    if let Some(&c) = class_subset.iter().find(|&&c| c == 0 || c > MAX_CLASS) {
        return Err(Error::Invalid(format!("class {c} outside 1..={MAX_CLASS}")));
    }
    let hw = canvas * canvas;
    let mut img = vec![0.0; 3 * hw];
    let gray = rng.gen_range(0.3..0.6);
    let amp = rng.gen_range(BG_NOISE.0..BG_NOISE.1);
    let tint: [f64; 3] = [
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
    ];
    for (ch, t) in tint.iter().enumerate() {
        for v in &mut img[ch * hw..(ch + 1) * hw] {
            *v = gray + t + rng.gen_range(-amp..amp);
        }
    }
    let (rmin, rmax) = (canvas as f64 / 8.0, canvas as f64 / 4.5);
    for _ in 0..rng.gen_range(0..=MAX_CLUTTER) {
        // a class texture in another class's colour
        let family = Family::of_class(rng.gen_range(1..=MAX_CLASS));
        let tex_class = rng.gen_range(1..=MAX_CLASS);
        let color = base_color((tex_class + rng.gen_range(0..MAX_CLASS - 1)) % MAX_CLASS + 1);
        let r = rng.gen_range(rmin..rmax);
        let cy = rng.gen_range(r + 1.0..canvas as f64 - r - 1.0);
        let cx = rng.gen_range(r + 1.0..canvas as f64 - r - 1.0);
        let mask = rasterize(family, cy, cx, r, canvas);
        for p in (0..hw).filter(|&p| mask[p]) {
            let tex = 0.55 + 0.45 * texture(tex_class, p / canvas, p % canvas);
            for ch in 0..3 {
                img[ch * hw + p] = color[ch] * tex + rng.gen_range(-0.04..0.04);
            }
        }
    }
    let mut labels = vec![0u8; hw];
    let mut instances = Vec::new();
    for &class in class_subset {
        let family = Family::of_class(class);
        let mut best: Option<(usize, Vec<bool>)> = None;
        for _ in 0..30 {
            let r = rng.gen_range(rmin..rmax);
            let cy = rng.gen_range(r + 1.0..canvas as f64 - r - 1.0);
            let cx = rng.gen_range(r + 1.0..canvas as f64 - r - 1.0);
            let mask = rasterize(family, cy, cx, r, canvas);
            let area = mask.iter().filter(|&&m| m).count();
            let overlap = mask.iter().zip(&labels).filter(|(&m, &l)| m && l != 0).count();
            if best.as_ref().map_or(true, |(o, _)| overlap < *o) {
                best = Some((overlap, mask));
            }
            if overlap * 7 <= area {
                break;
            }
        }
        let (_, mask) = best.expect("at least one placement");
        let base = base_color(class);
        let color: Vec<f64> = base
            .iter()
            .map(|c| (c + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0))
            .collect();
        let (mut y0, mut x0, mut y1, mut x1) = (canvas, canvas, 0, 0);
        for y in 0..canvas {
            for x in 0..canvas {
                let p = y * canvas + x;
                if !mask[p] {
                    continue;
                }
                labels[p] = class;
                let tex = 0.55 + 0.45 * texture(class, y, x);
                for ch in 0..3 {
                    img[ch * hw + p] = color[ch] * tex + rng.gen_range(-0.04..0.04);
                }
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y + 1);
                x1 = x1.max(x + 1);
            }
        }
        instances.push(Instance {
            class,
            bbox: [y0, x0, y1, x1],
        });
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Scene {
        image: Tensor::new(vec![3, canvas, canvas], img)?,
        labels,
        instances,
        height: canvas,
        width: canvas,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Disjoint,
    Overlapped,
}

/// Class sets per learning step. Model channel order is background followed
/// by the classes of each step in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    pub steps: Vec<Vec<u8>>,
    pub mode: SplitMode,
}

impl StepSpec {
    pub fn new(steps: Vec<Vec<u8>>, mode: SplitMode) -> Result<Self> {
        let spec = StepSpec { steps, mode };
        spec.validate()?;
        Ok(spec)
    }

    /// Named protocol such as `"3-1"` or `"3-1-1-1"`; classes are numbered
    /// consecutively from 1.
    pub fn protocol(name: &str, mode: SplitMode) -> Result<Self> {
        let sizes: Vec<usize> = name
            .split('-')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Invalid(format!("bad protocol name {name:?}")))?;
        let mut next = 1u8;
        let mut steps = Vec::new();
        for n in sizes {
            let mut set = Vec::new();
            for _ in 0..n {
                set.push(next);
                next = next.saturating_add(1);
            }
            steps.push(set);
        }
        Self::new(steps, mode)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() || self.steps.iter().any(|s| s.is_empty()) {
            return Err(Error::Invalid("every step needs at least one class".into()));
        }
        let mut seen = BTreeSet::new();
        for &c in self.steps.iter().flatten() {
            if c == 0 || c > MAX_CLASS {
                return Err(Error::Invalid(format!("class {c} outside 1..={MAX_CLASS}")));
            }
            if !seen.insert(c) {
                return Err(Error::Invalid(format!("class {c} appears in two steps")));
            }
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn universe(&self) -> Vec<u8> {
        self.steps.iter().flatten().copied().collect()
    }

    /// Channel count of the model after `step` (background included).
    pub fn channels_through(&self, step: usize) -> usize {
        1 + self.steps[..=step].iter().map(Vec::len).sum::<usize>()
    }

    /// Channels introduced at `step`.
    pub fn new_channels(&self, step: usize) -> std::ops::Range<usize> {
        let hi = self.channels_through(step);
        hi - self.steps[step].len()..hi
    }

    /// Model channel of a global class id.
    pub fn channel_of(&self, class: u8) -> Option<usize> {
        self.universe().iter().position(|&c| c == class).map(|i| i + 1)
    }

    pub fn step_of(&self, class: u8) -> Option<usize> {
        self.steps.iter().position(|s| s.contains(&class))
    }
}

/// Scene indices assigned to each step.
pub fn split_incremental(scenes: &[Scene], spec: &StepSpec) -> Result<Vec<Vec<usize>>> {
    let mut per_step = vec![Vec::new(); spec.num_steps()];
    for (i, scene) in scenes.iter().enumerate() {
        let present = scene.present_classes();
        let mut steps_present = BTreeSet::new();
        for &c in &present {
            let s = spec
                .step_of(c)
                .ok_or_else(|| Error::Invalid(format!("scene {i} has class {c} outside the universe")))?;
            steps_present.insert(s);
        }
        match spec.mode {
            SplitMode::Overlapped => {
                for &s in &steps_present {
                    per_step[s].push(i);
                }
            }
            SplitMode::Disjoint => {
                // the latest step present is the only one with no future pixels
                if let Some(&last) = steps_present.iter().next_back() {
                    per_step[last].push(i);
                }
            }
        }
    }
    Ok(per_step)
}

/// Training labels at `step`: classes of that step keep their model channel,
/// everything else becomes background.
pub fn relabel_for_step(scene: &Scene, spec: &StepSpec, step: usize) -> Result<LabelMap> {
    let channels = spec.channels_through(step);
    let current = &spec.steps[step];
    let labels = scene
        .labels
        .iter()
        .map(|&c| {
            if c != 0 && current.contains(&c) {
                spec.channel_of(c).expect("class in universe") as u8
            } else {
                0
            }
        })
        .collect();
    LabelMap::new(channels, scene.height, scene.width, labels)
}

/// Labels of every class seen through `step`; pixels of later classes are
/// marked ignore.
pub fn labels_through(scene: &Scene, spec: &StepSpec, step: usize) -> Result<LabelMap> {
    let channels = spec.channels_through(step);
    let mut ignore = vec![false; scene.labels.len()];
    let mut labels = vec![0u8; scene.labels.len()];
    for (p, &c) in scene.labels.iter().enumerate() {
        if c == 0 {
            continue;
        }
        match spec.step_of(c) {
            Some(s) if s <= step => labels[p] = spec.channel_of(c).unwrap() as u8,
            _ => ignore[p] = true,
        }
    }
    LabelMap::new(channels, scene.height, scene.width, labels)?.with_ignore(ignore)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub canvas: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Relative weights for 1, 2, 3, 4 classes per scene.
    pub classes_per_scene: Vec<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            canvas: 64,
            train_scenes: 200,
            test_scenes: 60,
            classes_per_scene: vec![0.8, 0.15, 0.05],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.classes_per_scene;
        if w.is_empty() || w.len() > 4 || w.iter().any(|&v| !(v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Invalid("classes_per_scene needs 1-4 non-negative weights".into()));
        }
        if self.canvas < MIN_CANVAS {
            return Err(Error::Invalid(format!("canvas must be >= {MIN_CANVAS}")));
        }
        Ok(())
    }
}

/// Scenes drawn over `universe`; a pure function of `(seed, tag, config)`.
pub fn generate_scenes(cfg: &DatasetConfig, universe: &[u8], count: usize, seed: u64, tag: &str) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let total: f64 = cfg.classes_per_scene.iter().sum();
    (0..count)
        .map(|i| {
            let mut rng = stream(seed, tag, i as u64);
            let u = rng.gen::<f64>() * total;
            let mut k = cfg.classes_per_scene.len();
            let mut acc = 0.0;
            for (j, w) in cfg.classes_per_scene.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j + 1;
                    break;
                }
            }
            let k = k.min(universe.len());
            let mut chosen: Vec<u8> = universe.choose_multiple(&mut rng, k).copied().collect();
            chosen.shuffle(&mut rng);
            gen_scene(&mut rng, &chosen, cfg.canvas)
        })
        .collect()
}
