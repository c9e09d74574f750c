//! Pseudo-supervision for the self-training stage.
//!
//! Night images get two signals: an offline label map from the frozen warm-up
//! model (dynamic and shift-sensitive classes, confidence-thresholded) and an
//! online static-class map built each step from the paired day-time reference
//! view. The online map is used whole when the two views agree on where the
//! shift-sensitive classes are, and cut down to the pixels where day and night
//! predictions agree otherwise.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{argmax_labels, ClassTaxonomy, LabelMap, OneHotMask, ProbMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfTrainConfig {
    pub tau: f64,
    pub confidence_threshold: f64,
    /// Classes the offline night labels may carry; `None` means dynamic plus shift-sensitive.
    pub offline_classes: Option<BTreeSet<usize>>,
    /// Classes the online signal may carry; `None` means all static classes.
    pub online_classes: Option<BTreeSet<usize>>,
    /// Drop online labels on pixels the offline map already supervises.
    pub mutually_exclusive: bool,
    /// Replace the online signal by an all-zero mask.
    pub disable_online: bool,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            confidence_threshold: 0.9,
            offline_classes: None,
            online_classes: None,
            mutually_exclusive: false,
            disable_online: false,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self, tax: &ClassTaxonomy) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return Err(Error::Config(format!(
                "confidence threshold {} outside (0, 1)",
                self.confidence_threshold
            )));
        }
        let c = tax.num_classes();
        for set in [&self.offline_classes, &self.online_classes].into_iter().flatten() {
            if let Some(&k) = set.iter().find(|&&k| k >= c) {
                return Err(Error::Config(format!("class id {k} out of range for {c} classes")));
            }
        }
        Ok(())
    }

    pub fn offline_set(&self, tax: &ClassTaxonomy) -> BTreeSet<usize> {
        self.offline_classes
            .clone()
            .unwrap_or_else(|| tax.dynamic_ids.union(&tax.ssc_ids).copied().collect())
    }

    pub fn online_set(&self, tax: &ClassTaxonomy) -> BTreeSet<usize> {
        self.online_classes.clone().unwrap_or_else(|| tax.static_ids.clone())
    }
}

/// Label every pixel whose top probability reaches `threshold` and whose
/// argmax class is in `allowed`.
pub fn offline_pseudo(p: &ProbMap, allowed: &BTreeSet<usize>, threshold: f64) -> OneHotMask {
    let (c, h, w) = (p.num_classes(), p.height(), p.width());
    let labels = argmax_labels(p);
    OneHotMask::from_pixels(
        c,
        h,
        w,
        labels.data().iter().enumerate().map(|(i, &k)| {
            let k = k as usize;
            (p.at(k, i) >= threshold && allowed.contains(&k)).then_some(k)
        }),
    )
}

/// Label-level form of [`static_map`].
pub fn static_map_labels(l_ref: &LabelMap, l_n: &LabelMap, tax: &ClassTaxonomy) -> Result<OneHotMask> {
    same_size(l_ref, l_n)?;
    Ok(OneHotMask::from_pixels(
        tax.num_classes(),
        l_ref.height(),
        l_ref.width(),
        l_ref.data().iter().zip(l_n.data()).map(|(&r, &n)| {
            let (r, n) = (r as usize, n as usize);
            (tax.is_static(r) && tax.is_static(n)).then_some(r)
        }),
    ))
}

/// Reference-view labels, kept where both views predict a static class.
pub fn static_map(p_ref: &ProbMap, p_n: &ProbMap, tax: &ClassTaxonomy) -> Result<OneHotMask> {
    static_map_labels(&argmax_labels(p_ref), &argmax_labels(p_n), tax)
}

/// Label-level form of [`dna`].
pub fn dna_labels(y_static: &OneHotMask, l_n: &LabelMap) -> Result<OneHotMask> {
    if y_static.height() != l_n.height() || y_static.width() != l_n.width() {
        return Err(Error::Shape("mask and label map differ in size".into()));
    }
    Ok(OneHotMask::from_pixels(
        y_static.num_classes(),
        y_static.height(),
        y_static.width(),
        (0..l_n.len()).map(|i| y_static.pixel_class(i).filter(|&k| k == l_n.data()[i] as usize)),
    ))
}

/// Keep the static-map pixels whose label matches the night argmax.
pub fn dna(y_static: &OneHotMask, p_n: &ProbMap) -> Result<OneHotMask> {
    dna_labels(y_static, &argmax_labels(p_n))
}

/// Dice overlap of the shift-sensitive pixels of two label maps. Zero when
/// neither map has any.
pub fn lor(l_n: &LabelMap, l_ref: &LabelMap, ssc: &BTreeSet<usize>) -> f64 {
    assert_eq!(l_n.len(), l_ref.len(), "lor needs equally sized maps");
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in l_n.data().iter().zip(l_ref.data()) {
        let (in_a, in_b) = (ssc.contains(&(x as usize)), ssc.contains(&(y as usize)));
        a += in_a as usize;
        b += in_b as usize;
        both += (in_a && in_b) as usize;
    }
    if a + b == 0 {
        0.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineChoice {
    Static,
    Dna,
}

/// `y_static` when `lor_value >= tau`, `y_dna` otherwise.
pub fn select_online<'a>(
    lor_value: f64,
    y_static: &'a OneHotMask,
    y_dna: &'a OneHotMask,
    tau: f64,
) -> (OnlineChoice, &'a OneHotMask) {
    if lor_value >= tau {
        (OnlineChoice::Static, y_static)
    } else {
        (OnlineChoice::Dna, y_dna)
    }
}

/// Dense target for the night cross-entropy: the elementwise sum of both
/// masks, so a pixel labelled by both contributes two log terms.
pub fn coteach_target(y_off: &OneHotMask, y_on: &OneHotMask, mutually_exclusive: bool) -> Result<Tensor> {
    if y_off.num_classes() != y_on.num_classes()
        || y_off.height() != y_on.height()
        || y_off.width() != y_on.width()
    {
        return Err(Error::Shape("co-teaching masks differ in shape".into()));
    }
    let hw = y_off.height() * y_off.width();
    let mut t = y_off.to_tensor();
    for i in 0..hw {
        if mutually_exclusive && y_off.pixel_class(i).is_some() {
            continue;
        }
        if let Some(k) = y_on.pixel_class(i) {
            t.data_mut()[k * hw + i] += 1.0;
        }
    }
    Ok(t)
}

/// Everything the online branch decided for one night image.
#[derive(Clone, Debug)]
pub struct OnlineSignal {
    pub mask: OneHotMask,
    pub lor: f64,
    pub choice: OnlineChoice,
}

/// Full online pipeline: static map, agreement filter, overlap ratio, selection.
pub fn online_signal(p_ref: &ProbMap, p_n: &ProbMap, tax: &ClassTaxonomy, cfg: &SelfTrainConfig) -> Result<OnlineSignal> {
    let (l_ref, l_n) = (argmax_labels(p_ref), argmax_labels(p_n));
    let y_static = static_map_labels(&l_ref, &l_n, tax)?;
    let y_dna = dna_labels(&y_static, &l_n)?;
    let lor_value = lor(&l_n, &l_ref, &tax.ssc_ids);
    let (choice, chosen) = select_online(lor_value, &y_static, &y_dna, cfg.tau);
    let mut mask = crate::types::restrict(chosen, &cfg.online_set(tax));
    if cfg.disable_online {
        mask = OneHotMask::empty(mask.num_classes(), mask.height(), mask.width());
    }
    Ok(OnlineSignal {
        mask,
        lor: lor_value,
        choice,
    })
}

fn same_size(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "label maps {}x{} and {}x{} differ",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}
