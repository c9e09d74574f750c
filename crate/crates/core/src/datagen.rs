//! Procedural day/night street scenes with ground truth, dataset export, and
//! a reader for Cityscapes-style directory trees.
//!
//! A scene is a painter's list of analytic shapes in scene coordinates. Views
//! are rendered by mapping each pixel centre back through the view's pose
//! transform and taking the nearest shape that contains it (sky when none
//! does). One sample renders three views: an independent labelled day scene,
//! the target scene at night, and the target scene by day from a slightly
//! shifted pose with its dynamic objects re-drawn.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;
use crate::types::{check_spatial, ClassTaxonomy, Domain, Image, LabelMap, PairedSample, IGNORE_ID};

pub const ROAD: u8 = 0;
pub const BUILDING: u8 = 1;
pub const SKY: u8 = 2;
pub const VEGETATION: u8 = 3;
pub const POLE: u8 = 4;
pub const SIGN: u8 = 5;
pub const LIGHT: u8 = 6;
pub const CAR: u8 = 7;
pub const PERSON: u8 = 8;
const NUM_CLASSES: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Diamond { cx: f64, cy: f64, r: f64 },
    /// Everything at or below the line `y`.
    Below { y: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
            Shape::Diamond { cx, cy, r } => (x - cx).abs() + (y - cy).abs() <= r,
            Shape::Below { y: y0 } => y >= y0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutItem {
    pub class: u8,
    pub shape: Shape,
    /// Higher values are drawn on top.
    pub depth: f64,
    /// Day colour in `[0, 1]`.
    pub color: [f64; 3],
}

/// Rigid view offset: translation in pixels, rotation in degrees about the image centre.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseShift {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl PoseShift {
    pub fn is_zero(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.dtheta == 0.0
    }

    /// Scene coordinates seen at view pixel `(x, y)`.
    fn inverse(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        if self.is_zero() {
            return (x, y);
        }
        let (u, v) = (x - cx - self.dx, y - cy - self.dy);
        let (s, c) = self.dtheta.to_radians().sin_cos();
        (c * u + s * v + cx, -s * u + c * v + cy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NightParams {
    /// Brightness multiplier per class id.
    pub visibility: Vec<f64>,
    pub gamma: f64,
    /// Standard deviation of additive Gaussian noise, in `[0, 1]` intensity units.
    pub noise: f64,
}

impl Default for NightParams {
    fn default() -> Self {
        Self {
            visibility: vec![0.45, 0.25, 0.1, 0.2, 0.35, 0.6, 1.0, 0.7, 0.4],
            gamma: 1.3,
            noise: 0.03,
        }
    }
}

impl NightParams {
    pub fn identity(num_classes: usize) -> Self {
        Self {
            visibility: vec![1.0; num_classes],
            gamma: 1.0,
            noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.visibility.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Range("visibility factors must lie in [0, 1]".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Range("gamma must be positive and noise non-negative".into()));
        }
        Ok(())
    }
}

/// Options for drawing random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneOptions {
    pub height: usize,
    pub width: usize,
    pub pose_shift_max_px: f64,
    pub pose_shift_max_deg: f64,
    pub resample_dynamic: bool,
    pub night: NightParams,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            pose_shift_max_px: 12.0,
            pose_shift_max_deg: 5.0,
            resample_dynamic: true,
            night: NightParams::default(),
        }
    }
}

/// Everything needed to render one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Static part of the target scene.
    pub layout: Vec<LayoutItem>,
    /// Dynamic objects of the target scene at night.
    pub dynamic_night: Vec<LayoutItem>,
    /// Dynamic objects in the day-time reference view.
    pub dynamic_ref: Vec<LayoutItem>,
    /// The unrelated labelled day scene.
    pub source_layout: Vec<LayoutItem>,
    pub pose_shift: PoseShift,
    pub night: NightParams,
}

impl SceneSpec {
    /// Draw a random scene from `seed`.
    pub fn random(seed: u64, opts: &SceneOptions) -> Result<Self> {
        check_spatial(opts.height, opts.width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (opts.height as f64, opts.width as f64);
        let (layout, frame) = static_layout(&mut rng, h, w);
        let dynamic_night = dynamic_objects(&mut rng, &frame, h, w);
        let dynamic_ref = if opts.resample_dynamic {
            dynamic_objects(&mut rng, &frame, h, w)
        } else {
            dynamic_night.clone()
        };
        let (mut source_layout, src_frame) = static_layout(&mut rng, h, w);
        source_layout.extend(dynamic_objects(&mut rng, &src_frame, h, w));
        let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let pose_shift = PoseShift {
            dx: sym(&mut rng, opts.pose_shift_max_px),
            dy: sym(&mut rng, opts.pose_shift_max_px),
            dtheta: sym(&mut rng, opts.pose_shift_max_deg),
        };
        let spec = Self {
            seed,
            height: opts.height,
            width: opts.width,
            layout,
            dynamic_night,
            dynamic_ref,
            source_layout,
            pose_shift,
            night: opts.night.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_spatial(self.height, self.width)?;
        let p = self.pose_shift;
        let lim = self.width as f64 / 4.0;
        if !(p.dx.abs() <= lim && p.dy.abs() <= lim && p.dtheta.abs() <= 10.0) {
            return Err(Error::Range(format!(
                "pose shift ({}, {}, {}) exceeds (+-{lim} px, +-10 deg)",
                p.dx, p.dy, p.dtheta
            )));
        }
        if self.night.visibility.len() < NUM_CLASSES {
            return Err(Error::Range("night visibility needs one factor per class".into()));
        }
        self.night.validate()
    }
}

/// One rendered sample plus the labels that are never used for training.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub sample: PairedSample,
    pub y_night: LabelMap,
    pub y_day_ref: LabelMap,
}

struct Frame {
    road_top: f64,
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    let s = rng.random_range(-amount..=amount);
    base.map(|c| (c + s + rng.random_range(-amount..=amount) * 0.5).clamp(0.0, 1.0))
}

fn static_layout(rng: &mut ChaCha8Rng, h: f64, w: f64) -> (Vec<LayoutItem>, Frame) {
    let unit = w / 128.0;
    let horizon = h * rng.random_range(0.36..0.46);
    let road_top = h * rng.random_range(0.6..0.68);
    let mut items = vec![LayoutItem {
        class: ROAD,
        shape: Shape::Below { y: road_top },
        depth: 0.0,
        color: jitter(rng, [0.42, 0.42, 0.45], 0.05),
    }];

    // roadside band, extended past the frame so shifted views stay covered
    let mut x = -0.3 * w;
    while x < 1.3 * w {
        let seg = w * rng.random_range(0.12..0.32);
        if rng.random_bool(0.55) {
            let top = horizon - h * rng.random_range(0.02..0.28);
            items.push(LayoutItem {
                class: BUILDING,
                shape: Shape::Rect { x0: x, y0: top, x1: x + seg, y1: road_top + 1.0 },
                depth: 1.0,
                color: jitter(rng, [0.62, 0.42, 0.32], 0.07),
            });
        } else {
            let top = horizon - h * rng.random_range(0.0..0.08);
            let color = jitter(rng, [0.22, 0.5, 0.2], 0.05);
            items.push(LayoutItem {
                class: VEGETATION,
                shape: Shape::Rect { x0: x, y0: top, x1: x + seg, y1: road_top + 1.0 },
                depth: 1.0,
                color,
            });
            let crowns = rng.random_range(1..=3);
            for _ in 0..crowns {
                let r = h * rng.random_range(0.05..0.1);
                items.push(LayoutItem {
                    class: VEGETATION,
                    shape: Shape::Ellipse {
                        cx: x + rng.random_range(0.0..seg),
                        cy: top,
                        rx: r * 1.2,
                        ry: r,
                    },
                    depth: 1.5,
                    color,
                });
            }
        }
        x += seg;
    }

    let poles = match rng.random_range(0.0..1.0) {
        p if p < 0.08 => 0,
        p if p < 0.45 => 1,
        p if p < 0.85 => 2,
        _ => 3,
    };
    for k in 0..poles {
        let slot = w / poles as f64;
        let px = slot * (k as f64 + rng.random_range(0.15..0.85));
        let pw = unit * rng.random_range(2.0..3.2);
        let top = horizon - h * rng.random_range(0.0..0.16);
        let bottom = road_top + h * rng.random_range(0.02..0.12);
        items.push(LayoutItem {
            class: POLE,
            shape: Shape::Rect { x0: px, y0: top, x1: px + pw, y1: bottom },
            depth: 3.0,
            color: jitter(rng, [0.3, 0.3, 0.34], 0.04),
        });
        let cx = px + pw / 2.0;
        if rng.random_bool(0.6) {
            let r = unit * rng.random_range(3.5..5.0);
            let cy = top + h * rng.random_range(0.04..0.12);
            let shape = if rng.random_bool(0.5) {
                Shape::Diamond { cx, cy, r }
            } else {
                Shape::Rect { x0: cx - r, y0: cy - r, x1: cx + r, y1: cy + r * 0.8 }
            };
            items.push(LayoutItem {
                class: SIGN,
                shape,
                depth: 4.0,
                color: jitter(rng, [0.92, 0.78, 0.12], 0.05),
            });
        }
        if rng.random_bool(0.55) {
            let (lw, lh) = (unit * rng.random_range(2.5..3.5), unit * rng.random_range(5.0..7.0));
            items.push(LayoutItem {
                class: LIGHT,
                shape: Shape::Rect { x0: cx - lw, y0: top - lh, x1: cx + lw, y1: top + lh * 0.3 },
                depth: 4.0,
                color: jitter(rng, [0.95, 0.55, 0.15], 0.04),
            });
        }
    }
    (items, Frame { road_top })
}

fn dynamic_objects(rng: &mut ChaCha8Rng, f: &Frame, h: f64, w: f64) -> Vec<LayoutItem> {
    let mut items = Vec::new();
    let cars = [0.12, 0.45, 0.8, 1.0];
    let n_cars = cars.iter().position(|&p| rng.random_range(0.0..1.0) < p).unwrap_or(3);
    const CAR_COLORS: [[f64; 3]; 4] = [[0.75, 0.12, 0.1], [0.15, 0.25, 0.7], [0.85, 0.85, 0.85], [0.12, 0.12, 0.14]];
    for _ in 0..n_cars {
        let cw = w * rng.random_range(0.14..0.26);
        let ch = cw * rng.random_range(0.35..0.5);
        let bottom = rng.random_range(f.road_top + 0.08 * h..h + 0.05 * h);
        let x0 = rng.random_range(-0.1 * w..w);
        let base = CAR_COLORS[rng.random_range(0..CAR_COLORS.len())];
        let color = jitter(rng, base, 0.05);
        let depth = 10.0 + bottom / h;
        items.push(LayoutItem {
            class: CAR,
            shape: Shape::Rect { x0, y0: bottom - ch * 0.6, x1: x0 + cw, y1: bottom },
            depth,
            color,
        });
        items.push(LayoutItem {
            class: CAR,
            shape: Shape::Rect {
                x0: x0 + cw * 0.2,
                y0: bottom - ch,
                x1: x0 + cw * 0.8,
                y1: bottom - ch * 0.55,
            },
            depth,
            color,
        });
    }
    let persons = [0.3, 0.65, 0.9, 1.0];
    let n_persons = persons.iter().position(|&p| rng.random_range(0.0..1.0) < p).unwrap_or(3);
    for _ in 0..n_persons {
        let ph = h * rng.random_range(0.12..0.2);
        let pw = ph * rng.random_range(0.25..0.35);
        let bottom = rng.random_range(f.road_top + 0.02 * h..h + 0.02 * h);
        let cx = rng.random_range(0.0..w);
        let color = jitter(rng, [0.7, 0.3, 0.55], 0.12);
        let depth = 10.0 + bottom / h;
        items.push(LayoutItem {
            class: PERSON,
            shape: Shape::Rect { x0: cx - pw / 2.0, y0: bottom - ph * 0.8, x1: cx + pw / 2.0, y1: bottom },
            depth,
            color,
        });
        items.push(LayoutItem {
            class: PERSON,
            shape: Shape::Ellipse { cx, cy: bottom - ph * 0.87, rx: pw * 0.4, ry: ph * 0.13 },
            depth,
            color: [0.85, 0.68, 0.55],
        });
    }
    items
}

const SKY_COLOR: [f64; 3] = [0.55, 0.72, 0.92];

/// Render a layout into `[0, 1]` RGB intensities (planar) and labels.
fn rasterize(items: &[&LayoutItem], h: usize, w: usize, pose: &PoseShift, rng: &mut ChaCha8Rng) -> (Vec<f64>, LabelMap) {
    let mut order: Vec<&LayoutItem> = items.to_vec();
    order.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let hw = h * w;
    let mut rgb = vec![0.0; 3 * hw];
    let mut labels = vec![SKY; hw];
    let light = rng.random_range(0.9..1.1);
    let texture = Normal::new(0.0, 0.02).expect("valid std");
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = pose.inverse(x as f64 + 0.5, y as f64 + 0.5, cx, cy);
            let hit = order.iter().rev().find(|it| it.shape.contains(sx, sy));
            let i = y * w + x;
            let color = match hit {
                Some(it) => {
                    labels[i] = it.class;
                    it.color
                }
                None => SKY_COLOR,
            };
            for c in 0..3 {
                let v = color[c] * light + texture.sample(rng);
                rgb[c * hw + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    (rgb, LabelMap::new(h, w, labels).expect("sized by construction"))
}

fn intensities_to_image(v: &[f64], h: usize, w: usize, domain: Domain) -> Image {
    let data = v.iter().map(|&u| 2.0 * u - 1.0).collect();
    Image::new(Tensor::new(vec![3, h, w], data), domain).expect("intensities lie in [0, 1]")
}

/// Darken a day image class by class, apply gamma, then add noise.
pub fn night_render(day: &Image, labels: &LabelMap, params: &NightParams, rng: &mut impl Rng) -> Result<Image> {
    params.validate()?;
    let (h, w) = (day.height(), day.width());
    if labels.height() != h || labels.width() != w {
        return Err(Error::Shape("night_render labels do not match the image".into()));
    }
    let hw = h * w;
    let noise = (params.noise > 0.0).then(|| Normal::new(0.0, params.noise).expect("finite std"));
    let mut out = vec![0.0; 3 * hw];
    let d = day.tensor().data();
    for c in 0..3 {
        for i in 0..hw {
            let k = labels.data()[i] as usize;
            let vis = params.visibility.get(k).copied().unwrap_or(1.0);
            let v = (d[c * hw + i] + 1.0) * 0.5 * vis;
            let mut v = if params.gamma == 1.0 { v } else { v.powf(params.gamma) };
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            out[c * hw + i] = v.clamp(0.0, 1.0) * 2.0 - 1.0;
        }
    }
    Image::new(Tensor::new(vec![3, h, w], out), Domain::Night)
}

/// Render every view of a scene. A pure function of `spec`.
pub fn synth_sample(spec: &SceneSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_d1a9);
    let none = PoseShift::default();

    let src: Vec<&LayoutItem> = spec.source_layout.iter().collect();
    let (src_rgb, y_day) = rasterize(&src, h, w, &none, &mut rng);
    let x_day = intensities_to_image(&src_rgb, h, w, Domain::Day);

    let night_items: Vec<&LayoutItem> = spec.layout.iter().chain(&spec.dynamic_night).collect();
    let (base_rgb, y_night) = rasterize(&night_items, h, w, &none, &mut rng);
    let base = intensities_to_image(&base_rgb, h, w, Domain::Day);
    let x_night = night_render(&base, &y_night, &spec.night, &mut rng)?;

    let ref_items: Vec<&LayoutItem> = spec.layout.iter().chain(&spec.dynamic_ref).collect();
    let (ref_rgb, y_day_ref) = rasterize(&ref_items, h, w, &spec.pose_shift, &mut rng);
    let x_day_ref = intensities_to_image(&ref_rgb, h, w, Domain::DayRef);

    let sample = PairedSample::new(format!("{:06}", spec.seed), x_day, y_day, x_night, x_day_ref)?;
    Ok(SynthOutput {
        sample,
        y_night,
        y_day_ref,
    })
}

/// Files of one sample, relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub x_day: PathBuf,
    pub y_day: PathBuf,
    pub x_night: PathBuf,
    pub x_day_ref: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_night: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub samples: Vec<ManifestEntry>,
}

pub fn is_eval_split(split: &str) -> bool {
    matches!(split, "val" | "test")
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn path(root: &Path, split: &str) -> PathBuf {
        root.join(split).join(MANIFEST_FILE)
    }

    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let m: Self = io::read_json(&Self::path(root, split))?;
        m.validate(root)?;
        Ok(m)
    }

    pub fn validate(&self, root: &Path) -> Result<()> {
        let eval = is_eval_split(&self.split);
        for e in &self.samples {
            if e.y_night.is_some() != eval {
                return Err(Error::Config(format!(
                    "sample {}: night labels must be present exactly for eval splits",
                    e.id
                )));
            }
            let paths = [&e.x_day, &e.y_day, &e.x_night, &e.x_day_ref].into_iter().chain(e.y_night.as_ref());
            for p in paths {
                if !root.join(p).is_file() {
                    return Err(Error::Config(format!("sample {}: missing file {}", e.id, p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Write rendered samples under `<root>/<split>/...` and return the manifest.
pub fn export_split(root: &Path, split: &str, samples: &[SynthOutput]) -> Result<DatasetManifest> {
    let eval = is_eval_split(split);
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let id = &s.sample.sample_id;
        let rel = |dir: &str| PathBuf::from(split).join(dir).join(format!("{id}.png"));
        let e = ManifestEntry {
            id: id.clone(),
            x_day: rel("day"),
            y_day: rel("day_label"),
            x_night: rel("night"),
            x_day_ref: rel("day_ref"),
            y_night: eval.then(|| rel("night_label")),
        };
        io::save_image(&root.join(&e.x_day), &s.sample.x_day)?;
        io::save_labels(&root.join(&e.y_day), &s.sample.y_day)?;
        io::save_image(&root.join(&e.x_night), &s.sample.x_night)?;
        io::save_image(&root.join(&e.x_day_ref), &s.sample.x_day_ref)?;
        if let Some(p) = &e.y_night {
            io::save_labels(&root.join(p), &s.y_night)?;
        }
        entries.push(e);
    }
    let m = DatasetManifest {
        split: split.to_string(),
        samples: entries,
    };
    io::write_json(&DatasetManifest::path(root, split), &m)?;
    Ok(m)
}

/// Sample seeds of a split: disjoint ranges derived from the corpus seed.
pub fn split_seed(corpus_seed: u64, split: &str, index: usize) -> u64 {
    let offset: u64 = match split {
        "train" => 0,
        "val" => 1 << 20,
        _ => 2 << 20,
    };
    corpus_seed.wrapping_mul(1 << 24).wrapping_add(offset + index as u64)
}

pub fn generate_split(corpus_seed: u64, split: &str, n: usize, opts: &SceneOptions) -> Result<Vec<SynthOutput>> {
    (0..n)
        .map(|i| synth_sample(&SceneSpec::random(split_seed(corpus_seed, split, i), opts)?))
        .collect()
}

/// A sample held in memory as quantized bytes.
#[derive(Clone, Debug)]
pub struct StoredSample {
    pub id: String,
    pub h: usize,
    pub w: usize,
    pub x_day: Vec<u8>,
    pub y_day: LabelMap,
    pub x_night: Vec<u8>,
    pub x_day_ref: Vec<u8>,
    pub y_night: Option<LabelMap>,
}

impl StoredSample {
    /// Quantize a rendered sample exactly as exporting and reloading it would.
    pub fn from_synth(s: &SynthOutput, with_night_labels: bool) -> Self {
        let p = &s.sample;
        Self {
            id: p.sample_id.clone(),
            h: p.x_day.height(),
            w: p.x_day.width(),
            x_day: io::image_to_rgb8(&p.x_day),
            y_day: p.y_day.clone(),
            x_night: io::image_to_rgb8(&p.x_night),
            x_day_ref: io::image_to_rgb8(&p.x_day_ref),
            y_night: with_night_labels.then(|| s.y_night.clone()),
        }
    }

    pub fn paired(&self) -> Result<PairedSample> {
        PairedSample::new(
            self.id.clone(),
            io::rgb8_to_image(self.h, self.w, &self.x_day, Domain::Day)?,
            self.y_day.clone(),
            io::rgb8_to_image(self.h, self.w, &self.x_night, Domain::Night)?,
            io::rgb8_to_image(self.h, self.w, &self.x_day_ref, Domain::DayRef)?,
        )
    }

    pub fn night(&self) -> Result<Image> {
        io::rgb8_to_image(self.h, self.w, &self.x_night, Domain::Night)
    }

    pub fn day_ref(&self) -> Result<Image> {
        io::rgb8_to_image(self.h, self.w, &self.x_day_ref, Domain::DayRef)
    }
}

/// Load a split listed by its manifest; labels are validated against `tax`.
pub fn load_split(root: &Path, split: &str, tax: &ClassTaxonomy) -> Result<Vec<StoredSample>> {
    let m = DatasetManifest::load(root, split)?;
    m.samples
        .iter()
        .map(|e| {
            let (h, w, x_day) = io::load_rgb8(&root.join(&e.x_day))?;
            let y_day = io::load_labels(&root.join(&e.y_day))?;
            y_day.validate(tax)?;
            let (_, _, x_night) = io::load_rgb8(&root.join(&e.x_night))?;
            let (_, _, x_day_ref) = io::load_rgb8(&root.join(&e.x_day_ref))?;
            let y_night = match &e.y_night {
                Some(p) => {
                    let l = io::load_labels(&root.join(p))?;
                    l.validate(tax)?;
                    Some(l)
                }
                None => None,
            };
            for len in [x_night.len(), x_day_ref.len()] {
                if len != 3 * h * w {
                    return Err(Error::Shape(format!("sample {}: views differ in size", e.id)));
                }
            }
            Ok(StoredSample {
                id: e.id.clone(),
                h,
                w,
                x_day,
                y_day,
                x_night,
                x_day_ref,
                y_night,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CityscapesEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CityscapesManifest {
    pub entries: Vec<CityscapesEntry>,
    /// Images without a label file.
    pub skipped: Vec<PathBuf>,
}

const IMAGE_SUFFIX: &str = "_leftImg8bit.png";
const LABEL_SUFFIX: &str = "_gtFine_labelIds.png";

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Scan `root/leftImg8bit/<split>/<city>/*_leftImg8bit.png` and pair each image
/// with `root/gtFine/<split>/<city>/*_gtFine_labelIds.png`. Paths are relative
/// to `root`; images lacking a label go to `skipped`.
pub fn load_cityscapes_tree(root: &Path) -> Result<CityscapesManifest> {
    let mut m = CityscapesManifest::default();
    let img_root = root.join("leftImg8bit");
    if !img_root.is_dir() {
        return Ok(m);
    }
    for split_dir in sorted_dir(&img_root)?.into_iter().filter(|p| p.is_dir()) {
        for city_dir in sorted_dir(&split_dir)?.into_iter().filter(|p| p.is_dir()) {
            for img in sorted_dir(&city_dir)? {
                let Some(name) = img.file_name().and_then(|n| n.to_str()) else {
                    continue;
                };
                let Some(stem) = name.strip_suffix(IMAGE_SUFFIX) else {
                    continue;
                };
                let rel_img = img.strip_prefix(root).expect("under root").to_path_buf();
                let mut rel_label = PathBuf::from("gtFine");
                rel_label.extend(rel_img.components().skip(1));
                rel_label.set_file_name(format!("{stem}{LABEL_SUFFIX}"));
                if root.join(&rel_label).is_file() {
                    m.entries.push(CityscapesEntry {
                        id: stem.to_string(),
                        image: rel_img,
                        label: rel_label,
                    });
                } else {
                    m.skipped.push(rel_img);
                }
            }
        }
    }
    Ok(m)
}

/// Read a label file of a Cityscapes-style tree, mapping raw ids through
/// `id_map`; ids without a mapping (or mapping outside the taxonomy) become ignore.
pub fn load_cityscapes_labels(path: &Path, id_map: &BTreeMap<u8, u8>, tax: &ClassTaxonomy) -> Result<LabelMap> {
    let mut l = io::load_labels(path)?;
    let c = tax.num_classes();
    for v in l.data_mut() {
        *v = match id_map.get(v) {
            Some(&k) if (k as usize) < c => k,
            _ => tax.ignore_id,
        };
    }
    Ok(l)
}

/// Identity mapping for ids already in the taxonomy's range.
pub fn identity_id_map(tax: &ClassTaxonomy) -> BTreeMap<u8, u8> {
    (0..tax.num_classes() as u8).map(|k| (k, k)).collect()
}

/// Write the labelled day images of a split in Cityscapes layout (city `synth`).
pub fn export_cityscapes(root: &Path, split: &str, samples: &[SynthOutput]) -> Result<()> {
    for s in samples {
        let id = &s.sample.sample_id;
        let img = root.join("leftImg8bit").join(split).join("synth").join(format!("synth_{id}{IMAGE_SUFFIX}"));
        let lab = root.join("gtFine").join(split).join("synth").join(format!("synth_{id}{LABEL_SUFFIX}"));
        io::save_image(&img, &s.sample.x_day)?;
        io::save_labels(&lab, &s.sample.y_day)?;
    }
    Ok(())
}

/// Fraction of pixels carrying the same label in both maps, ignore excluded.
pub fn label_agreement(a: &LabelMap, b: &LabelMap) -> f64 {
    let (mut same, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        if x == IGNORE_ID || y == IGNORE_ID {
            continue;
        }
        total += 1;
        same += (x == y) as usize;
    }
    if total == 0 {
        1.0
    } else {
        same as f64 / total as f64
    }
}
