//! Procedural toy "vehicle" scenes with exact instance masks.
//!
//! A scene is a handful of part polygons laid out on a coarse grid of cells,
//! with damage marks drawn on top of them. Each damage class has a fixed
//! shape family (ellipse, scratch, crack) and colour; real damage carries a
//! shading gradient while fake artifacts copy a paired damage class with a
//! flat fill and a tint.
//!
//! Every instance draws from its own RNG stream derived from
//! `(seed, sample index, instance index)`, and a mark's shape never leaves the
//! bounding box chosen before its class is consulted. Re-labelling one mark
//! therefore only changes pixels inside that mark's box.

mod io;
mod raster;

pub use io::{load_dataset, rle_decode, rle_encode, save_dataset, Dataset};
pub use raster::BBox;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Domain, InstanceLabel, LabelSpace, NUM_FAKE, NUM_PART};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    /// Patch size the downstream encoder uses; image sides must be multiples of it.
    pub patch_size: usize,
    pub seed: u64,
    /// Inclusive `[min, max]` part count per scene.
    pub parts_per_scene: [usize; 2],
    /// Inclusive `[min, max]` damage-or-fake mark count per scene.
    pub damages_per_scene: [usize; 2],
    /// Probability that a mark is a fake artifact instead of real damage.
    pub fake_probability: f64,
    /// Rows and columns of the layout grid; each part occupies one cell.
    pub layout_grid: [usize; 2],
    /// Inclusive `[min, max]` outer radius of part polygons, in pixels.
    pub part_radius: [f64; 2],
    /// Inclusive `[min, max]` half-extent of damage marks, in pixels.
    pub damage_radius: [f64; 2],
    /// Stroke width of scratch and crack marks.
    pub stroke_width: f64,
    /// Std-dev of additive per-pixel noise.
    pub noise: f64,
    pub active_damage: Vec<usize>,
    pub active_fake: Vec<usize>,
    pub active_part: Vec<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            patch_size: 8,
            seed: 0,
            parts_per_scene: [2, 3],
            damages_per_scene: [1, 2],
            fake_probability: 0.25,
            layout_grid: [2, 2],
            part_radius: [10.0, 13.0],
            damage_radius: [4.0, 6.0],
            stroke_width: 3.0,
            noise: 0.02,
            active_damage: vec![0, 1, 2, 3, 4, 5],
            active_fake: vec![0, 1, 2],
            active_part: vec![0, 1, 2, 3, 4, 5, 17],
        }
    }
}

impl GenConfig {
    pub fn validate(&self, labels: &LabelSpace) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return err("image size must be nonzero".into());
        }
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return err(format!(
                "image {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch_size
            ));
        }
        let [pmin, pmax] = self.parts_per_scene;
        let [dmin, dmax] = self.damages_per_scene;
        if pmin == 0 || pmin > pmax || dmin > dmax {
            return err("scene count ranges must be nonempty with min <= max (and >= 1 part)".into());
        }
        let cells = self.layout_grid[0] * self.layout_grid[1];
        if pmax > cells {
            return err(format!("{pmax} parts do not fit a {cells}-cell layout"));
        }
        if pmax > self.active_part.len() {
            return err("fewer active part classes than parts per scene".into());
        }
        if !(0.0..=1.0).contains(&self.fake_probability) {
            return err("fake_probability must be in [0, 1]".into());
        }
        if dmax > 0 && self.active_damage.is_empty() {
            return err("damage marks requested but no active damage classes".into());
        }
        if self.fake_probability > 0.0 && self.active_fake.is_empty() {
            return err("fakes requested but no active fake classes".into());
        }
        if !(self.part_radius[0] >= 1.0 && self.part_radius[0] <= self.part_radius[1]) {
            return err("part radius range degenerate (zero-area parts)".into());
        }
        if !(self.damage_radius[0] >= 1.0 && self.damage_radius[0] <= self.damage_radius[1]) {
            return err("damage radius range degenerate (zero-area marks)".into());
        }
        if !(self.stroke_width >= 1.0) {
            return err("stroke width must be >= 1 pixel".into());
        }
        let cell = (self.height / self.layout_grid[0]).min(self.width / self.layout_grid[1]) as f64;
        if self.part_radius[1] + 2.0 > cell / 2.0 {
            return err(format!(
                "part radius {} does not fit cells of {cell} px",
                self.part_radius[1]
            ));
        }
        if !(self.noise >= 0.0) {
            return err("noise must be >= 0".into());
        }
        for (ids, domain) in [
            (&self.active_damage, Domain::Damage),
            (&self.active_fake, Domain::Fake),
            (&self.active_part, Domain::Part),
        ] {
            for &id in ids {
                labels.check(InstanceLabel::new(domain, id))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// Row-major `H*W` bitmap.
    pub mask: Vec<bool>,
    pub label: InstanceLabel,
}

impl Instance {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major `H*W*3`, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub instances: Vec<Instance>,
}

impl Sample {
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| f64::from(v)).collect()
    }

    /// Index of the part instance overlapping `mask` most, if any overlaps at all.
    pub fn host_part(&self, mask: &[bool]) -> Option<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.label.domain == Domain::Part)
            .map(|(i, inst)| {
                let overlap = inst.mask.iter().zip(mask).filter(|(a, b)| **a && **b).count();
                (i, overlap)
            })
            .filter(|&(_, o)| o > 0)
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartSpec {
    pub class_id: usize,
    /// Polygon vertices as `(y, x)`.
    pub vertices: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkSpec {
    pub label: InstanceLabel,
    /// Index into [`ScenePlan::parts`].
    pub host: usize,
    pub bbox: BBox,
    pub center: (f64, f64),
    pub shape_seed: u64,
}

/// Everything about a scene except pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePlan {
    pub sample_id: String,
    pub height: usize,
    pub width: usize,
    pub parts: Vec<PartSpec>,
    pub marks: Vec<MarkSpec>,
    pub noise_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Scratch,
    Crack,
}

impl ShapeKind {
    pub fn for_damage(class_id: usize) -> Self {
        match class_id % 3 {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Scratch,
            _ => ShapeKind::Crack,
        }
    }
}

const STREAM_SCENE: u64 = 1;
const STREAM_PART: u64 = 2;
const STREAM_MARK: u64 = 3;
const STREAM_NOISE: u64 = 4;
const BACKGROUND: [f64; 3] = [0.12, 0.12, 0.14];

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_seed(seed: u64, index: usize, stream: u64, item: usize) -> u64 {
    mix(mix(mix(seed ^ mix(stream)) ^ index as u64) ^ item as u64)
}

fn rng_for(seed: u64, index: usize, stream: u64, item: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, index, stream, item))
}

/// Fake class `f` imitates this damage class.
pub fn paired_damage(config: &GenConfig, fake_class: usize) -> usize {
    config.active_damage[fake_class % config.active_damage.len()]
}

pub fn generate(config: &GenConfig, labels: &LabelSpace, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    config.validate(labels)?;
    (0..n).map(|i| generate_one(config, i)).collect()
}

pub fn generate_one(config: &GenConfig, index: usize) -> Result<Sample> {
    let plan = plan_scene(config, index)?;
    render(config, &plan)
}

pub fn plan_scene(config: &GenConfig, index: usize) -> Result<ScenePlan> {
    let (h, w) = (config.height, config.width);
    let mut rng = rng_for(config.seed, index, STREAM_SCENE, 0);
    let num_parts = rng.random_range(config.parts_per_scene[0]..=config.parts_per_scene[1]);
    let num_marks = rng.random_range(config.damages_per_scene[0]..=config.damages_per_scene[1]);
    let [rows, cols] = config.layout_grid;
    let mut cells: Vec<usize> = (0..rows * cols).collect();
    cells.shuffle(&mut rng);
    let mut classes = config.active_part.clone();
    classes.shuffle(&mut rng);

    let (ch, cw) = (h as f64 / rows as f64, w as f64 / cols as f64);
    let mut parts = Vec::with_capacity(num_parts);
    for p in 0..num_parts {
        let mut prng = rng_for(config.seed, index, STREAM_PART, p);
        let cell = cells[p];
        let (cy, cx) = (
            (cell / cols) as f64 * ch + ch / 2.0,
            (cell % cols) as f64 * cw + cw / 2.0,
        );
        let radius = prng.random_range(config.part_radius[0]..=config.part_radius[1]);
        let slack = (ch.min(cw) / 2.0 - radius - 1.0).clamp(0.0, 2.0);
        let cy = cy + prng.random_range(-slack..=slack);
        let cx = cx + prng.random_range(-slack..=slack);
        let n_vertices = prng.random_range(5..=8);
        let phase = prng.random_range(0.0..std::f64::consts::TAU);
        let vertices = (0..n_vertices)
            .map(|k| {
                let a = phase + k as f64 * std::f64::consts::TAU / n_vertices as f64;
                let r = radius * prng.random_range(0.8..=1.0);
                (cy + r * a.sin(), cx + r * a.cos())
            })
            .collect();
        parts.push(PartSpec {
            class_id: classes[p],
            vertices,
        });
    }

    let part_masks: Vec<Vec<bool>> = parts.iter().map(|p| raster::fill_polygon(h, w, &p.vertices)).collect();
    let mut marks: Vec<MarkSpec> = Vec::with_capacity(num_marks);
    for m in 0..num_marks {
        let mut mrng = rng_for(config.seed, index, STREAM_MARK, m);
        let is_fake = mrng.random_bool(config.fake_probability);
        let label = if is_fake {
            let f = config.active_fake[mrng.random_range(0..config.active_fake.len())];
            InstanceLabel::new(Domain::Fake, f)
        } else {
            let d = config.active_damage[mrng.random_range(0..config.active_damage.len())];
            InstanceLabel::new(Domain::Damage, d)
        };
        let host = mrng.random_range(0..num_parts);
        let radius = mrng.random_range(config.damage_radius[0]..=config.damage_radius[1]);
        let interior = raster::erode(&part_masks[host], h, w, 2);
        let candidates: Vec<usize> = {
            let inner: Vec<usize> = (0..h * w).filter(|&i| interior[i]).collect();
            if inner.is_empty() {
                (0..h * w).filter(|&i| part_masks[host][i]).collect()
            } else {
                inner
            }
        };
        if candidates.is_empty() {
            return Err(Error::Config("part polygon rasterized to zero pixels".into()));
        }
        let mut placed = None;
        for _ in 0..32 {
            let pix = candidates[mrng.random_range(0..candidates.len())];
            let center = ((pix / w) as f64 + 0.5, (pix % w) as f64 + 0.5);
            let bbox = bbox_around(center, radius, h, w);
            let clear = marks.iter().all(|other| !other.bbox.overlaps(&bbox));
            placed = Some((center, bbox));
            if clear {
                break;
            }
        }
        let (center, bbox) = placed.expect("at least one placement attempt");
        marks.push(MarkSpec {
            label,
            host,
            bbox,
            center,
            shape_seed: mrng.random(),
        });
    }

    Ok(ScenePlan {
        sample_id: format!("sample_{index:05}"),
        height: h,
        width: w,
        parts,
        marks,
        noise_seed: stream_seed(config.seed, index, STREAM_NOISE, 0),
    })
}

fn bbox_around(center: (f64, f64), radius: f64, h: usize, w: usize) -> BBox {
    let lo = |c: f64| (c - radius).floor().max(0.0) as usize;
    let hi = |c: f64, n: usize| ((c + radius).ceil() as usize).min(n - 1);
    BBox {
        y0: lo(center.0),
        x0: lo(center.1),
        y1: hi(center.0, h),
        x1: hi(center.1, w),
    }
}

fn hsv(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let h6 = hue.rem_euclid(1.0) * 6.0;
    let c = val * sat;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

pub fn part_color(class_id: usize) -> [f64; 3] {
    hsv(class_id as f64 * 0.618_034, 0.55, 0.80)
}

pub fn damage_color(class_id: usize) -> [f64; 3] {
    hsv(0.1 + class_id as f64 * 0.381_966, 0.9, 0.45)
}

fn fake_color(config: &GenConfig, fake_class: usize) -> [f64; 3] {
    let base = damage_color(paired_damage(config, fake_class));
    let tint = hsv(fake_class as f64 / NUM_FAKE as f64, 1.0, 1.0);
    std::array::from_fn(|c| 0.75 * base[c] + 0.25 * tint[c])
}

fn mark_shape(config: &GenConfig, plan: &ScenePlan, mark: &MarkSpec) -> Vec<bool> {
    let (h, w) = (plan.height, plan.width);
    let damage_class = match mark.label.domain {
        Domain::Fake => paired_damage(config, mark.label.class_id),
        _ => mark.label.class_id,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mark.shape_seed);
    let half = ((mark.bbox.y1 - mark.bbox.y0).min(mark.bbox.x1 - mark.bbox.x0) as f64 / 2.0).max(1.0);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = angle.sin_cos();
    let shape = match ShapeKind::for_damage(damage_class) {
        ShapeKind::Ellipse => {
            let ry = half * rng.random_range(0.6..=1.0);
            let rx = half * rng.random_range(0.6..=1.0);
            raster::fill_ellipse(h, w, mark.center, (ry.max(1.0), rx.max(1.0)), angle)
        }
        ShapeKind::Scratch => {
            let len = half * 1.1;
            let a = (mark.center.0 - s * len, mark.center.1 - c * len);
            let b = (mark.center.0 + s * len, mark.center.1 + c * len);
            raster::fill_polyline(h, w, &[a, b], config.stroke_width)
        }
        ShapeKind::Crack => {
            let step = half * 0.6;
            let zig = half * 0.45;
            let pts: Vec<(f64, f64)> = (-2i32..=2)
                .map(|k| {
                    let t = k as f64 * step;
                    let off = if k % 2 == 0 { 0.0 } else { zig };
                    (mark.center.0 + s * t + c * off, mark.center.1 + c * t - s * off)
                })
                .collect();
            raster::fill_polyline(h, w, &pts, config.stroke_width)
        }
    };
    let mut mask = shape;
    for y in 0..h {
        for x in 0..w {
            if !mark.bbox.contains(y, x) {
                mask[y * w + x] = false;
            }
        }
    }
    let cy = (mark.center.0 as usize).min(h - 1);
    let cx = (mark.center.1 as usize).min(w - 1);
    mask[cy * w + cx] = true;
    mask
}

/// Draws a planned scene into pixels and exact masks.
pub fn render(config: &GenConfig, plan: &ScenePlan) -> Result<Sample> {
    let (h, w) = (plan.height, plan.width);
    let mut rgb: Vec<[f64; 3]> = vec![BACKGROUND; h * w];
    let mut instances = Vec::new();

    let mut part_masks = Vec::with_capacity(plan.parts.len());
    for part in &plan.parts {
        if part.class_id >= NUM_PART {
            return Err(Error::OutOfRange(format!("part class {}", part.class_id)));
        }
        let mask = raster::fill_polygon(h, w, &part.vertices);
        if !mask.iter().any(|&b| b) {
            return Err(Error::Config("part polygon rasterized to zero pixels".into()));
        }
        let color = part_color(part.class_id);
        for (px, &m) in rgb.iter_mut().zip(&mask) {
            if m {
                *px = color;
            }
        }
        part_masks.push(mask.clone());
        instances.push(Instance {
            mask,
            label: InstanceLabel::new(Domain::Part, part.class_id),
        });
    }

    for mark in &plan.marks {
        let host = &part_masks[mark.host];
        let mut mask = mark_shape(config, plan, mark);
        for (m, &inside) in mask.iter_mut().zip(host) {
            *m &= inside;
        }
        if !mask.iter().any(|&b| b) {
            let cy = (mark.center.0 as usize).min(h - 1);
            let cx = (mark.center.1 as usize).min(w - 1);
            mask[cy * w + cx] = true;
        }
        let (color, shaded) = match mark.label.domain {
            Domain::Fake => (fake_color(config, mark.label.class_id), false),
            _ => (damage_color(mark.label.class_id), true),
        };
        let b = mark.bbox;
        let span = ((b.y1 - b.y0) + (b.x1 - b.x0)).max(1) as f64;
        for y in b.y0..=b.y1 {
            for x in b.x0..=b.x1 {
                if !mask[y * w + x] {
                    continue;
                }
                let shade = if shaded {
                    0.7 + 0.6 * ((y - b.y0) + (x - b.x0)) as f64 / span
                } else {
                    1.0
                };
                rgb[y * w + x] = color.map(|c| (c * shade).min(1.0));
            }
        }
        instances.push(Instance {
            mask,
            label: mark.label,
        });
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(plan.noise_seed);
    let normal = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut image = Vec::with_capacity(h * w * 3);
    for px in &rgb {
        for &c in px {
            let n = if config.noise > 0.0 {
                normal.sample(&mut noise_rng)
            } else {
                0.0
            };
            image.push((c + n).clamp(0.0, 1.0) as f32);
        }
    }

    Ok(Sample {
        sample_id: plan.sample_id.clone(),
        height: h,
        width: w,
        image,
        instances,
    })
}
