//! Metrics, visual panels, the tau sweep and overlap-based pair retrieval.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::StoredSample;
use crate::error::{Error, Result};
use crate::io;
use crate::nets::ModelBundle;
use crate::selftrain::{lor, OnlineChoice};
use crate::trainer::{self, read_metrics, RunPaths, Stage, TrainConfig};
use crate::types::{argmax_tensor, ClassTaxonomy, Image, LabelMap};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every pixel whose ground truth is a valid class. Predictions
    /// outside the class range are counted against nothing (skipped).
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape("prediction and ground truth differ in size".into()));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let (p, g) = (p as usize, g as usize);
            if g < c && p < c {
                self.counts[g * c + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "merging matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn miou(&self) -> Result<MiouReport> {
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::EmptyConfusion);
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouReport { per_class, mean })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Segment every night image of `samples` and score it against its labels.
pub fn evaluate_night(bundle: &ModelBundle, samples: &[StoredSample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(bundle.arch.num_classes);
    for s in samples {
        let gt = s
            .y_night
            .as_ref()
            .ok_or_else(|| Error::Config(format!("sample {} has no night labels", s.id)))?;
        let pred = predict_labels(bundle, &s.night()?);
        cm.accumulate(&pred, gt)?;
    }
    Ok(cm)
}

pub fn predict_labels(bundle: &ModelBundle, x: &Image) -> LabelMap {
    argmax_tensor(&bundle.predict_batch(x.tensor()))
        .pop()
        .expect("one prediction per image")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub split: String,
    pub samples: usize,
    pub param_hash: String,
    pub per_class: BTreeMap<String, Option<f64>>,
    pub miou: f64,
}

pub fn eval_record(bundle: &ModelBundle, tax: &ClassTaxonomy, split: &str, samples: &[StoredSample]) -> Result<EvalRecord> {
    let r = evaluate_night(bundle, samples)?.miou()?;
    Ok(EvalRecord {
        split: split.to_string(),
        samples: samples.len(),
        param_hash: bundle.store.hash_all(),
        per_class: tax.names.iter().cloned().zip(r.per_class).collect(),
        miou: r.mean,
    })
}

/// Fixed colours for the synthetic classes; further ids get generated colours.
pub fn palette(num_classes: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 9] = [
        [128, 64, 128],
        [70, 70, 70],
        [70, 130, 180],
        [107, 142, 35],
        [153, 153, 153],
        [220, 220, 0],
        [250, 170, 30],
        [0, 0, 142],
        [220, 20, 60],
    ];
    (0..num_classes)
        .map(|k| {
            BASE.get(k).copied().unwrap_or_else(|| {
                let v = (k as u32).wrapping_mul(2_654_435_761);
                [(v >> 24) as u8 | 1, (v >> 16) as u8, (v >> 8) as u8]
            })
        })
        .collect()
}

pub const IGNORE_COLOR: [u8; 3] = [0, 0, 0];

/// Map a colour back to its class; `None` for the ignore colour or unknown colours.
pub fn color_to_class(pal: &[[u8; 3]], c: [u8; 3]) -> Option<usize> {
    pal.iter().position(|&p| p == c)
}

/// Side-by-side RGB panel: the image, then one colour-coded tile per label map.
pub fn render_panel(path: &Path, x: &Image, maps: &[&LabelMap], pal: &[[u8; 3]]) -> Result<(usize, usize)> {
    let (h, w) = (x.height(), x.width());
    if maps.iter().any(|m| m.height() != h || m.width() != w) {
        return Err(Error::Shape("panel tiles differ in size".into()));
    }
    let tiles = 1 + maps.len();
    let pw = tiles * w;
    let mut buf = vec![0u8; 3 * pw * h];
    let rgb = io::image_to_rgb8(x);
    for y in 0..h {
        for xx in 0..w {
            let src = 3 * (y * w + xx);
            let dst = 3 * (y * pw + xx);
            buf[dst..dst + 3].copy_from_slice(&rgb[src..src + 3]);
            for (t, m) in maps.iter().enumerate() {
                let k = m.data()[y * w + xx] as usize;
                let c = pal.get(k).copied().unwrap_or(IGNORE_COLOR);
                let d = 3 * (y * pw + (t + 1) * w + xx);
                buf[d..d + 3].copy_from_slice(&c);
            }
        }
    }
    io::save_rgb8(path, pw, h, buf)?;
    Ok((pw, h))
}

/// Decode tile `t` (1-based after the image) of a panel back into labels.
pub fn decode_panel_tile(path: &Path, tile: usize, tile_w: usize, pal: &[[u8; 3]], ignore: u8) -> Result<LabelMap> {
    let (h, pw, rgb) = io::load_rgb8(path)?;
    let mut out = Vec::with_capacity(h * tile_w);
    for y in 0..h {
        for x in 0..tile_w {
            let i = 3 * (y * pw + tile * tile_w + x);
            let c = [rgb[i], rgb[i + 1], rgb[i + 2]];
            out.push(color_to_class(pal, c).map_or(ignore, |k| k as u8));
        }
    }
    LabelMap::new(h, tile_w, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub miou: f64,
    /// How often the online branch used the full static map and the agreement map.
    pub static_selected: usize,
    pub dna_selected: usize,
    pub run_dir: PathBuf,
}

/// One self-training run per tau, all from the same warm-up weights,
/// pseudo-labels and seed, each scored on `val`.
pub fn sweep_tau(
    base: &TrainConfig,
    taus: &[f64],
    tax: &ClassTaxonomy,
    train: &[StoredSample],
    val: &[StoredSample],
    out: &Path,
) -> Result<Vec<TauRow>> {
    if base.stage != Stage::Selftrain {
        return Err(Error::Config("sweep-tau needs a self-training config".into()));
    }
    taus.iter()
        .map(|&tau| {
            let mut cfg = base.clone();
            cfg.selftrain.tau = tau;
            let run_dir = out.join(format!("tau_{tau:.2}"));
            let paths = RunPaths {
                data: PathBuf::new(),
                out: run_dir.clone(),
                resume: None,
            };
            let t = trainer::run_on(&cfg, tax, train, &paths)?;
            let (mut s, mut d) = (0, 0);
            for rec in read_metrics(&run_dir.join(trainer::METRICS_FILE))? {
                for c in rec.online {
                    match c {
                        OnlineChoice::Static => s += 1,
                        OnlineChoice::Dna => d += 1,
                    }
                }
            }
            Ok(TauRow {
                tau,
                miou: evaluate_night(&t.bundle, val)?.miou()?.mean,
                static_selected: s,
                dna_selected: d,
                run_dir,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPair {
    pub id: String,
    pub lor: f64,
}

/// Night/day pairs whose predicted shift-sensitive layouts overlap by at least `lor_min`.
pub fn retrieve(bundle: &ModelBundle, tax: &ClassTaxonomy, samples: &[StoredSample], lor_min: f64) -> Result<Vec<RetrievedPair>> {
    let mut out = Vec::new();
    for s in samples {
        let l_n = predict_labels(bundle, &s.night()?);
        let l_r = predict_labels(bundle, &s.day_ref()?);
        let v = lor(&l_n, &l_r, &tax.ssc_ids);
        if v >= lor_min {
            out.push(RetrievedPair { id: s.id.clone(), lor: v });
        }
    }
    Ok(out)
}
