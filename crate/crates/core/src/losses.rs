//! Training objectives.
//!
//! Every loss comes in graph form (taking [`Var`]s so gradients flow) and the
//! value-level helpers below are thin wrappers that evaluate the same graph
//! code on constants.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{LabelMap, ProbMap};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-8;
/// Least-squares target for real samples.
pub const REAL_LABEL: f64 = 1.0;
/// Least-squares target for generated samples.
pub const FAKE_LABEL: f64 = 0.0;
/// Default weight of the ground-truth one-hot when fusing it with a prediction.
pub const DEFAULT_FUSE_ALPHA: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub seg: f64,
    pub inner: f64,
    pub outer: f64,
    pub adv: f64,
    pub percep: f64,
    /// Weight of the latent L1 term inside the perceptual loss.
    pub z: f64,
    /// Weight of the structural term inside the perceptual loss.
    pub l: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.25,
            inner: 1.0,
            outer: 1.0,
            adv: 0.1,
            percep: 1.0,
            z: 0.1,
            l: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.seg, self.inner, self.outer, self.adv, self.percep, self.z, self.l];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn weight(&self, c: Category) -> f64 {
        match c {
            Category::Seg => self.seg,
            Category::Inner => self.inner,
            Category::Outer => self.outer,
            Category::Adv => self.adv,
            Category::Percep => self.percep,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Seg,
    Inner,
    Outer,
    Adv,
    Percep,
}

/// Named loss terms of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    SegD,
    SegD2n,
    InnerD,
    OuterD,
    InnerN,
    OuterN,
    InnerUd,
    AdvD2n,
    AdvN2d,
    PercepD,
    PercepN,
    SegUdPseudo,
    SegNCoteach,
}

impl Term {
    pub const WARMUP: [Term; 11] = [
        Term::SegD,
        Term::SegD2n,
        Term::InnerD,
        Term::OuterD,
        Term::InnerN,
        Term::OuterN,
        Term::InnerUd,
        Term::AdvD2n,
        Term::AdvN2d,
        Term::PercepD,
        Term::PercepN,
    ];

    pub const SELFTRAIN_EXTRA: [Term; 2] = [Term::SegUdPseudo, Term::SegNCoteach];

    pub fn key(self) -> &'static str {
        match self {
            Term::SegD => "seg_d",
            Term::SegD2n => "seg_d2n",
            Term::InnerD => "inner_d",
            Term::OuterD => "outer_d",
            Term::InnerN => "inner_n",
            Term::OuterN => "outer_n",
            Term::InnerUd => "inner_ud",
            Term::AdvD2n => "adv_d2n",
            Term::AdvN2d => "adv_n2d",
            Term::PercepD => "percep_d",
            Term::PercepN => "percep_n",
            Term::SegUdPseudo => "seg_ud_pseudo",
            Term::SegNCoteach => "seg_n_coteach",
        }
    }

    pub fn category(self) -> Category {
        match self {
            Term::SegD | Term::SegD2n | Term::SegUdPseudo | Term::SegNCoteach => Category::Seg,
            Term::InnerD | Term::InnerN | Term::InnerUd => Category::Inner,
            Term::OuterD | Term::OuterN => Category::Outer,
            Term::AdvD2n | Term::AdvN2d => Category::Adv,
            Term::PercepD | Term::PercepN => Category::Percep,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Scalar values of every term of one step plus the weighted `total`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport(pub BTreeMap<String, f64>);

impl LossReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key).copied()
    }

    pub fn total(&self) -> f64 {
        self.0.get("total").copied().unwrap_or(f64::NAN)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

/// Weighted sum of term values; fails on the first non-finite term.
pub fn total_loss(terms: &[(Term, f64)], w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for &(t, v) in terms {
        if !v.is_finite() {
            return Err(Error::NonFinite(t.key().to_string()));
        }
        total += w.weight(t.category()) * v;
    }
    Ok(total)
}

/// Graph form of [`total_loss`]. Terms with zero weight are left out entirely.
pub fn weighted_total(g: &mut Graph, terms: &[(Term, Var)], w: &LossWeights) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for &(t, v) in terms {
        let lambda = w.weight(t.category());
        if lambda == 0.0 {
            continue;
        }
        let s = g.scale(v, lambda);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    acc
}

/// Cross-entropy of probabilities `p` against a (possibly summed) one-hot target,
/// averaged over pixels whose target has any mass. Zero when nothing is supervised.
pub fn seg_ce(g: &mut Graph, p: Var, target: &Tensor) -> Var {
    let (n, c, h, w) = g.value(p).dims4();
    assert_eq!(target.shape(), &[n, c, h, w], "seg_ce target shape");
    let hw = h * w;
    let mut supervised = 0usize;
    for b in 0..n {
        for i in 0..hw {
            if (0..c).any(|k| target.data()[(b * c + k) * hw + i] != 0.0) {
                supervised += 1;
            }
        }
    }
    if supervised == 0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let logp = g.log_clamp(p, LOG_FLOOR);
    let s = g.weighted_sum(logp, Rc::new(target.clone()));
    g.scale(s, -1.0 / supervised as f64)
}

/// Mean absolute difference.
pub fn recon_l1(g: &mut Graph, x_hat: Var, x: Var) -> Var {
    let d = g.sub(x_hat, x);
    let a = g.abs(d);
    g.mean_all(a)
}

fn mean_sq_to(g: &mut Graph, s: Var, target: f64) -> Var {
    let d = g.add_scalar(s, -target);
    let q = g.square(d);
    g.mean_all(q)
}

/// Discriminator objective: every real map pushed to [`REAL_LABEL`], the fake to [`FAKE_LABEL`].
pub fn lsgan_disc(g: &mut Graph, reals: &[Var], fake: Var) -> Var {
    assert!(!reals.is_empty(), "lsgan_disc needs at least one real score map");
    let mut acc = mean_sq_to(g, fake, FAKE_LABEL);
    for &r in reals {
        let t = mean_sq_to(g, r, REAL_LABEL);
        acc = g.add(acc, t);
    }
    acc
}

/// Generator objective: the fake score map pushed to [`REAL_LABEL`].
pub fn lsgan_gen(g: &mut Graph, fake: Var) -> Var {
    mean_sq_to(g, fake, REAL_LABEL)
}

/// Structural distance between two images, used inside the perceptual loss.
pub trait StructDist {
    fn distance(&self, g: &mut Graph, a: Var, b: Var) -> Var;
}

/// Multi-scale mean L1 between spatial-gradient-magnitude maps.
#[derive(Clone, Debug)]
pub struct GradientStructDist {
    pub scales: usize,
    pub eps: f64,
}

impl Default for GradientStructDist {
    fn default() -> Self {
        Self { scales: 3, eps: 1e-6 }
    }
}

impl GradientStructDist {
    fn magnitude(&self, g: &mut Graph, x: Var) -> Var {
        let dx = g.diff_x(x);
        let dy = g.diff_y(x);
        let dx2 = g.square(dx);
        let dy2 = g.square(dy);
        let s = g.add(dx2, dy2);
        let s = g.add_scalar(s, self.eps);
        g.sqrt(s)
    }
}

impl StructDist for GradientStructDist {
    fn distance(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        let mut acc: Option<Var> = None;
        let (mut a, mut b) = (a, b);
        for s in 0..self.scales {
            if s > 0 {
                a = g.avg_pool(a, 2);
                b = g.avg_pool(b, 2);
            }
            let ma = self.magnitude(g, a);
            let mb = self.magnitude(g, b);
            let d = recon_l1(g, ma, mb);
            acc = Some(match acc {
                Some(x) => g.add(x, d),
                None => d,
            });
        }
        let sum = acc.expect("at least one scale");
        g.scale(sum, 1.0 / self.scales as f64)
    }
}

/// `lambda_z * mean|z_t - z_o| + lambda_l * StructDist(x_t, x_o)`.
pub fn perceptual(
    g: &mut Graph,
    dist: &dyn StructDist,
    x_trans: Var,
    x_orig: Var,
    z_trans: Var,
    z_orig: Var,
    w: &LossWeights,
) -> Var {
    let lz = recon_l1(g, z_trans, z_orig);
    let lz = g.scale(lz, w.z);
    let ls = dist.distance(g, x_trans, x_orig);
    let ls = g.scale(ls, w.l);
    g.add(lz, ls)
}

/// Blend a prediction with ground truth: `alpha * onehot(y) + (1 - alpha) * p` at
/// labelled pixels, `p` unchanged at ignored ones. Works on `[N, C, H, W]`
/// batches with one label map per item. The result is a plain value, so it is
/// detached from whatever produced `p`.
pub fn fuse_probs_batch(p: &Tensor, labels: &[&LabelMap], alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range(format!("fusion alpha {alpha} outside [0, 1]")));
    }
    let (n, c, h, w) = p.dims4();
    if labels.len() != n || labels.iter().any(|l| l.height() != h || l.width() != w) {
        return Err(Error::Shape("fusion labels do not match the probability batch".into()));
    }
    let hw = h * w;
    let mut out = p.clone();
    for (b, l) in labels.iter().enumerate() {
        for (i, &y) in l.data().iter().enumerate() {
            let y = y as usize;
            if y >= c {
                continue;
            }
            for k in 0..c {
                let j = (b * c + k) * hw + i;
                let hot = if k == y { 1.0 } else { 0.0 };
                out.data_mut()[j] = alpha * hot + (1.0 - alpha) * p.data()[j];
            }
        }
    }
    Ok(out)
}

pub fn fuse_probs(p: &ProbMap, y: &LabelMap, alpha: f64) -> Result<ProbMap> {
    fuse_probs_batch(p.tensor(), &[y], alpha).map(ProbMap::new_unchecked)
}

fn eval_scalar(build: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = build(&mut g);
    g.value(v).item()
}

/// Value-level cross-entropy.
pub fn seg_ce_value(p: &Tensor, target: &Tensor) -> f64 {
    eval_scalar(|g| {
        let pv = g.constant(p.clone());
        seg_ce(g, pv, target)
    })
}

pub fn recon_l1_value(a: &Tensor, b: &Tensor) -> f64 {
    eval_scalar(|g| {
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        recon_l1(g, av, bv)
    })
}

pub fn lsgan_disc_value(reals: &[&Tensor], fake: &Tensor) -> f64 {
    eval_scalar(|g| {
        let rv: Vec<Var> = reals.iter().map(|r| g.constant((*r).clone())).collect();
        let fv = g.constant(fake.clone());
        lsgan_disc(g, &rv, fv)
    })
}

pub fn lsgan_gen_value(fake: &Tensor) -> f64 {
    eval_scalar(|g| {
        let fv = g.constant(fake.clone());
        lsgan_gen(g, fv)
    })
}

pub fn perceptual_value(x_t: &Tensor, x_o: &Tensor, z_t: &Tensor, z_o: &Tensor, w: &LossWeights) -> f64 {
    eval_scalar(|g| {
        let v = [x_t, x_o, z_t, z_o].map(|t| g.constant(t.clone()));
        perceptual(g, &GradientStructDist::default(), v[0], v[1], v[2], v[3], w)
    })
}
