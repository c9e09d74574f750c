//! Domain types shared across the crate: the class taxonomy and per-pixel maps.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Serialized value used for "no label" in 8-bit label images.
pub const IGNORE_ID: u8 = 255;

/// Class inventory split into static and dynamic classes, with the
/// shift-sensitive classes (thin or small static objects) marked separately.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    pub names: Vec<String>,
    pub static_ids: BTreeSet<usize>,
    pub dynamic_ids: BTreeSet<usize>,
    pub ssc_ids: BTreeSet<usize>,
    #[serde(default = "default_ignore")]
    pub ignore_id: u8,
}

fn default_ignore() -> u8 {
    IGNORE_ID
}

impl ClassTaxonomy {
    pub fn new(
        names: Vec<String>,
        static_ids: BTreeSet<usize>,
        dynamic_ids: BTreeSet<usize>,
        ssc_ids: BTreeSet<usize>,
        ignore_id: u8,
    ) -> Result<Self> {
        let t = Self {
            names,
            static_ids,
            dynamic_ids,
            ssc_ids,
            ignore_id,
        };
        t.validate()?;
        Ok(t)
    }

    /// The nine-class toy street taxonomy used by the synthetic generator.
    pub fn synthetic() -> Self {
        let names = [
            "road", "building", "sky", "vegetation", "pole", "sign", "light", "car", "person",
        ];
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            static_ids: (0..7).collect(),
            dynamic_ids: [7, 8].into_iter().collect(),
            ssc_ids: [4, 5, 6].into_iter().collect(),
            ignore_id: IGNORE_ID,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn all_ids(&self) -> BTreeSet<usize> {
        (0..self.num_classes()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c == 0 {
            return Err(Error::Taxonomy("no classes".into()));
        }
        if c > IGNORE_ID as usize {
            return Err(Error::Taxonomy(format!("{c} classes do not fit 8-bit label maps")));
        }
        if (self.ignore_id as usize) < c {
            return Err(Error::Taxonomy(format!(
                "ignore id {} collides with a class id",
                self.ignore_id
            )));
        }
        if !self.static_ids.is_disjoint(&self.dynamic_ids) {
            return Err(Error::Taxonomy("static and dynamic sets overlap".into()));
        }
        let union: BTreeSet<usize> = self.static_ids.union(&self.dynamic_ids).copied().collect();
        if union != self.all_ids() {
            return Err(Error::Taxonomy("static and dynamic sets must cover every class".into()));
        }
        if !self.ssc_ids.is_subset(&self.static_ids) {
            return Err(Error::Taxonomy("shift-sensitive classes must be static".into()));
        }
        Ok(())
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_static(&self, c: usize) -> bool {
        self.static_ids.contains(&c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = toml::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Day,
    Night,
    DayRef,
    Translated,
}

/// RGB image in `[-1, 1]`, stored as a `[1, 3, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Tensor,
    pub domain: Domain,
}

impl Image {
    pub fn new(data: Tensor, domain: Domain) -> Result<Self> {
        let data = match data.shape().len() {
            3 => {
                let s = data.shape().to_vec();
                data.reshape(&[1, s[0], s[1], s[2]])
            }
            _ => data,
        };
        if data.shape().len() != 4 || data.shape()[0] != 1 || data.shape()[1] != 3 {
            return Err(Error::Shape(format!("image must be 3xHxW, got {:?}", data.shape())));
        }
        let (_, _, h, w) = data.dims4();
        check_spatial(h, w)?;
        if let Some(v) = data.data().iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Range(format!("image value {v} outside [-1, 1]")));
        }
        Ok(Self { data, domain })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Image sides must be at least 16 and divisible by the latent stride.
pub fn check_spatial(h: usize, w: usize) -> Result<()> {
    if h < 16 || w < 16 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Shape(format!(
            "spatial size {h}x{w} must be >= 16 and divisible by 8"
        )));
    }
    Ok(())
}

/// Encoder output, `[1, C_f, H/8, W/8]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFeature(pub Tensor);

/// Per-pixel class probabilities, `[1, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Tensor);

impl ProbMap {
    pub const SIMPLEX_TOL: f64 = 1e-5;

    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 4 || t.shape()[0] != 1 {
            return Err(Error::Shape(format!("probability map must be 1xCxHxW, got {:?}", t.shape())));
        }
        let (_, c, h, w) = t.dims4();
        let hw = h * w;
        for i in 0..hw {
            let mut s = 0.0;
            for ch in 0..c {
                let v = t.data()[ch * hw + i];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Range(format!("probability {v} outside [0, 1]")));
                }
                s += v;
            }
            if (s - 1.0).abs() > Self::SIMPLEX_TOL {
                return Err(Error::Range(format!("pixel {i} sums to {s}")));
            }
        }
        Ok(Self(t))
    }

    pub(crate) fn new_unchecked(t: Tensor) -> Self {
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    /// Probability of class `c` at flat pixel index `i`.
    pub fn at(&self, c: usize, i: usize) -> f64 {
        let hw = self.height() * self.width();
        self.0.data()[c * hw + i]
    }
}

/// Hard labels; each pixel is a class id or the taxonomy's ignore id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!("{} labels for a {h}x{w} map", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        Self {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn validate(&self, tax: &ClassTaxonomy) -> Result<()> {
        let c = tax.num_classes();
        match self
            .data
            .iter()
            .find(|&&v| (v as usize) >= c && v != tax.ignore_id)
        {
            Some(v) => Err(Error::Range(format!("label {v} is neither a class nor ignore"))),
            None => Ok(()),
        }
    }
}

/// Sparse one-hot supervision, `C x H x W` with at most one set channel per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotMask {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl OneHotMask {
    pub fn empty(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0; c * h * w],
        }
    }

    /// Build from per-pixel optional class ids.
    pub fn from_pixels(c: usize, h: usize, w: usize, pixels: impl IntoIterator<Item = Option<usize>>) -> Self {
        let mut m = Self::empty(c, h, w);
        for (i, p) in pixels.into_iter().enumerate() {
            if let Some(k) = p {
                m.data[k * h * w + i] = 1;
            }
        }
        m
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, i: usize) -> u8 {
        self.data[c * self.h * self.w + i]
    }

    /// The set channel at flat pixel `i`, if any.
    pub fn pixel_class(&self, i: usize) -> Option<usize> {
        let hw = self.h * self.w;
        (0..self.c).find(|&k| self.data[k * hw + i] != 0)
    }

    pub fn count_labeled(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn validate(&self) -> Result<()> {
        let hw = self.h * self.w;
        for i in 0..hw {
            let s: u32 = (0..self.c).map(|k| self.data[k * hw + i] as u32).sum();
            if s > 1 {
                return Err(Error::Range(format!("pixel {i} has {s} set channels")));
            }
        }
        if self.data.iter().any(|&v| v > 1) {
            return Err(Error::Range("one-hot entries must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Dense `[1, C, H, W]` target tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.c, self.h, self.w],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Labels with unsupervised pixels mapped to `ignore`.
    pub fn to_labels(&self, ignore: u8) -> LabelMap {
        let labels = (0..self.h * self.w)
            .map(|i| self.pixel_class(i).map_or(ignore, |k| k as u8))
            .collect();
        LabelMap {
            h: self.h,
            w: self.w,
            data: labels,
        }
    }

    /// Interpret the mask as a probability map; unsupervised pixels become uniform.
    pub fn as_prob(&self) -> ProbMap {
        let hw = self.h * self.w;
        let mut t = self.to_tensor();
        let u = 1.0 / self.c as f64;
        for i in 0..hw {
            if self.pixel_class(i).is_none() {
                for k in 0..self.c {
                    t.data_mut()[k * hw + i] = u;
                }
            }
        }
        ProbMap(t)
    }
}

/// One training step's worth of inputs.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub sample_id: String,
    pub x_day: Image,
    pub y_day: LabelMap,
    pub x_night: Image,
    pub x_day_ref: Image,
}

impl PairedSample {
    pub fn new(
        sample_id: impl Into<String>,
        x_day: Image,
        y_day: LabelMap,
        x_night: Image,
        x_day_ref: Image,
    ) -> Result<Self> {
        let (h, w) = (x_day.height(), x_day.width());
        let same = |i: &Image| i.height() == h && i.width() == w;
        if !same(&x_night) || !same(&x_day_ref) || y_day.height() != h || y_day.width() != w {
            return Err(Error::Shape("paired sample maps differ in spatial size".into()));
        }
        Ok(Self {
            sample_id: sample_id.into(),
            x_day,
            y_day,
            x_night,
            x_day_ref,
        })
    }
}

/// Per-pixel argmax over channels; ties go to the lowest class id.
pub fn argmax_labels(p: &ProbMap) -> LabelMap {
    argmax_tensor(p.tensor())
        .into_iter()
        .next()
        .expect("probability map has a batch item")
}

/// Argmax of every batch item of a `[N, C, H, W]` tensor.
pub fn argmax_tensor(t: &Tensor) -> Vec<LabelMap> {
    let (n, c, h, w) = t.dims4();
    let hw = h * w;
    (0..n)
        .map(|b| {
            let base = b * c * hw;
            let data = (0..hw)
                .map(|i| {
                    let mut best = 0;
                    let mut bv = t.data()[base + i];
                    for k in 1..c {
                        let v = t.data()[base + k * hw + i];
                        if v > bv {
                            bv = v;
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap { h, w, data }
        })
        .collect()
}

/// One-hot encode labels; ignore pixels get no channel.
pub fn onehot(l: &LabelMap, tax: &ClassTaxonomy) -> OneHotMask {
    let c = tax.num_classes();
    OneHotMask::from_pixels(
        c,
        l.h,
        l.w,
        l.data.iter().map(|&v| ((v as usize) < c).then_some(v as usize)),
    )
}

/// Zero every channel outside `allowed`.
pub fn restrict(mask: &OneHotMask, allowed: &BTreeSet<usize>) -> OneHotMask {
    let hw = mask.h * mask.w;
    let mut out = mask.clone();
    for k in (0..mask.c).filter(|k| !allowed.contains(k)) {
        out.data[k * hw..(k + 1) * hw].fill(0);
    }
    out
}
