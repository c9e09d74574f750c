//! Warm-up and self-training loops, checkpoints, and pseudo-label files.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datagen::{self, StoredSample};
use crate::error::{Error, Result};
use crate::io;
use crate::losses::{self, GradientStructDist, LossReport, LossWeights, Term};
use crate::nets::{ArchConfig, ModelBundle};
use crate::optim::{clip_global_norm, poly_lr, Adam, Sgd};
use crate::params::{ParamGroup, ParamStore};
use crate::selftrain::{self, OnlineChoice, SelfTrainConfig};
use crate::tensor::Tensor;
use crate::types::{onehot, ClassTaxonomy, LabelMap, PairedSample, ProbMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Selftrain,
}

/// Switches that remove parts of the warm-up objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Train encoder and classifier on labelled day images only.
    pub source_only: bool,
    pub no_inner: bool,
    pub no_outer: bool,
    /// Decode without semantic rendering.
    pub no_render: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_seg: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Adam step size for decoders and discriminators.
    pub lr_aux: f64,
    pub clip_norm: f64,
    pub fuse_alpha: f64,
    pub weights: LossWeights,
    pub selftrain: SelfTrainConfig,
    pub ablation: Ablation,
    pub arch: ArchConfig,
    pub seed: u64,
    /// Zero disables periodic checkpoints; the final step is always saved.
    pub checkpoint_every: usize,
    /// Square random crop side; `None` trains on full images.
    pub crop_size: Option<usize>,
    pub warmup_checkpoint: Option<PathBuf>,
    pub pseudo_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Warmup,
            steps: 1000,
            batch_size: 2,
            lr_seg: 2.5e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            lr_aux: 1e-4,
            clip_norm: 10.0,
            fuse_alpha: losses::DEFAULT_FUSE_ALPHA,
            weights: LossWeights::default(),
            selftrain: SelfTrainConfig::default(),
            ablation: Ablation::default(),
            arch: ArchConfig::desk(9),
            seed: 0,
            checkpoint_every: 0,
            crop_size: None,
            warmup_checkpoint: None,
            pseudo_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(toml::from_str(&s)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self, tax: &ClassTaxonomy) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        for (name, v) in [("lr_seg", self.lr_seg), ("lr_aux", self.lr_aux), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.fuse_alpha) {
            return Err(Error::Config("fuse_alpha must lie in [0, 1]".into()));
        }
        if let Some(c) = self.crop_size {
            crate::types::check_spatial(c, c)?;
        }
        if self.arch.num_classes != tax.num_classes() {
            return Err(Error::Config(format!(
                "architecture predicts {} classes, taxonomy has {}",
                self.arch.num_classes,
                tax.num_classes()
            )));
        }
        self.arch.validate()?;
        self.weights.validate()?;
        self.selftrain.validate(tax)?;
        if self.stage == Stage::Selftrain && (self.warmup_checkpoint.is_none() || self.pseudo_dir.is_none()) {
            return Err(Error::Config(
                "self-training needs warmup_checkpoint and pseudo_dir".into(),
            ));
        }
        Ok(())
    }
}

/// A training batch stacked along the first axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub x_day: Tensor,
    pub y_day: Vec<LabelMap>,
    pub x_night: Tensor,
    pub x_day_ref: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[PairedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let first = &samples[0];
        let (h, w) = (first.x_day.height(), first.x_day.width());
        if samples.iter().any(|s| s.x_day.height() != h || s.x_day.width() != w) {
            return Err(Error::Shape("batch samples differ in size".into()));
        }
        let stack = |f: &dyn Fn(&PairedSample) -> &Tensor| Tensor::stack(&samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>());
        Ok(Self {
            ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
            x_day: stack(&|s| s.x_day.tensor()),
            y_day: samples.iter().map(|s| s.y_day.clone()).collect(),
            x_night: stack(&|s| s.x_night.tensor()),
            x_day_ref: stack(&|s| s.x_day_ref.tensor()),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Offline pseudo-labels as 8-bit maps keyed by sample id.
#[derive(Clone, Debug, Default)]
pub struct PseudoStore {
    night: HashMap<String, LabelMap>,
    day_ref: HashMap<String, LabelMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoSidecar {
    pub threshold: f64,
    pub checkpoint_hash: String,
    pub night_classes: Vec<usize>,
    pub samples: usize,
    pub labelled_night_pixels: usize,
    pub labelled_ref_pixels: usize,
}

pub const PSEUDO_SIDECAR: &str = "pseudo.json";

impl PseudoStore {
    pub fn insert(&mut self, id: &str, night: LabelMap, day_ref: LabelMap) {
        self.night.insert(id.to_string(), night);
        self.day_ref.insert(id.to_string(), day_ref);
    }

    /// Read `<dir>/{night,day_ref}/<id>.png` for every id.
    pub fn load<'a>(dir: &Path, ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut s = Self::default();
        for id in ids {
            let read = |sub: &str| {
                let p = dir.join(sub).join(format!("{id}.png"));
                if p.is_file() {
                    io::load_labels(&p)
                } else {
                    Err(Error::MissingPseudoLabel(id.to_string()))
                }
            };
            let (n, r) = (read("night")?, read("day_ref")?);
            s.insert(id, n, r);
        }
        Ok(s)
    }

    pub fn get(&self, id: &str) -> Result<(&LabelMap, &LabelMap)> {
        match (self.night.get(id), self.day_ref.get(id)) {
            (Some(n), Some(r)) => Ok((n, r)),
            _ => Err(Error::MissingPseudoLabel(id.to_string())),
        }
    }
}

/// Label night and reference views with the frozen model and write them
/// under `dir`. Night labels keep only the offline classes; reference labels
/// keep every class.
pub fn generate_pseudo(
    bundle: &ModelBundle,
    samples: &[StoredSample],
    tax: &ClassTaxonomy,
    cfg: &SelfTrainConfig,
    dir: &Path,
) -> Result<PseudoSidecar> {
    let night_classes = cfg.offline_set(tax);
    let all = tax.all_ids();
    let (mut n_px, mut r_px) = (0, 0);
    for s in samples {
        let p_n = ProbMap::new_unchecked(bundle.predict_batch(s.night()?.tensor()));
        let y_n = selftrain::offline_pseudo(&p_n, &night_classes, cfg.confidence_threshold);
        let p_r = ProbMap::new_unchecked(bundle.predict_batch(s.day_ref()?.tensor()));
        let y_r = selftrain::offline_pseudo(&p_r, &all, cfg.confidence_threshold);
        n_px += y_n.count_labeled();
        r_px += y_r.count_labeled();
        io::save_labels(&dir.join("night").join(format!("{}.png", s.id)), &y_n.to_labels(tax.ignore_id))?;
        io::save_labels(&dir.join("day_ref").join(format!("{}.png", s.id)), &y_r.to_labels(tax.ignore_id))?;
    }
    let side = PseudoSidecar {
        threshold: cfg.confidence_threshold,
        checkpoint_hash: bundle.store.hash_all(),
        night_classes: night_classes.into_iter().collect(),
        samples: samples.len(),
        labelled_night_pixels: n_px,
        labelled_ref_pixels: r_px,
    };
    io::write_json(&dir.join(PSEUDO_SIDECAR), &side)?;
    Ok(side)
}

/// Outcome of one training step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepInfo {
    pub step: usize,
    pub stage: Stage,
    pub lr_seg: f64,
    pub losses: LossReport,
    /// Discriminator objective before its update; absent for source-only training.
    pub disc: Option<f64>,
    /// Per-sample overlap ratio and online choice (self-training only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lor: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub online: Vec<OnlineChoice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Serde("corrupt RNG state in checkpoint".into());
        let bytes = hex::decode(&self.seed).map_err(|_| bad())?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: Stage,
    pub step: usize,
    pub arch: ArchConfig,
    pub params: Vec<(String, Tensor)>,
    pub sgd: Sgd,
    pub adam_gen: Adam,
    pub adam_disc: Adam,
    pub rng: RngState,
    pub param_hash: String,
}

impl Checkpoint {
    /// Accepts either the checkpoint file or the directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
        let c: Self = io::read_json(&file)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!("unsupported checkpoint version {}", c.version)));
        }
        Ok(c)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let file = dir.join(CHECKPOINT_FILE);
        io::write_json(&file, self)?;
        Ok(file)
    }

    /// Rebuild the networks, rejecting a different architecture.
    pub fn bundle(&self, expected: &ArchConfig) -> Result<ModelBundle> {
        if &self.arch != expected {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint architecture {:?} differs from configured {:?}",
                self.arch, expected
            )));
        }
        let mut bundle = ModelBundle::new(self.arch.clone(), 0)?;
        if self.params.len() != bundle.store.len() {
            return Err(Error::CheckpointMismatch("parameter count differs".into()));
        }
        for (name, value) in &self.params {
            let id = bundle
                .store
                .find(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("unknown parameter `{name}`")))?;
            if bundle.store.get(id).shape() != value.shape() {
                return Err(Error::CheckpointMismatch(format!("parameter `{name}` has the wrong shape")));
            }
            *bundle.store.get_mut(id) = value.clone();
        }
        Ok(bundle)
    }
}

pub fn checkpoint_dir(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join("ckpt").join(format!("step_{step}"))
}

fn params_of(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect()
}

/// Values built during a forward pass that later phases of the step reuse.
struct Forward {
    terms: Vec<(Term, Var)>,
    p_n: Option<Var>,
    p_ud: Option<Var>,
    x_d2n: Option<Tensor>,
    x_n2d: Option<Tensor>,
}

/// Networks, optimizer state and RNG of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub tax: ClassTaxonomy,
    pub bundle: ModelBundle,
    pub sgd: Sgd,
    pub adam_gen: Adam,
    pub adam_disc: Adam,
    pub rng: ChaCha8Rng,
    /// Completed steps.
    pub step: usize,
}

const SEG_GROUPS: [ParamGroup; 2] = [ParamGroup::Encoder, ParamGroup::Classifier];
const DEC_GROUPS: [ParamGroup; 2] = [ParamGroup::DecoderDay, ParamGroup::DecoderNight];

impl Trainer {
    /// Fresh networks seeded from `cfg.seed`.
    pub fn new(cfg: TrainConfig, tax: ClassTaxonomy) -> Result<Self> {
        cfg.validate(&tax)?;
        let bundle = ModelBundle::new(cfg.arch.clone(), cfg.seed)?;
        Ok(Self::with_bundle(cfg, tax, bundle))
    }

    /// Start from existing networks with fresh optimizer state.
    pub fn with_bundle(cfg: TrainConfig, tax: ClassTaxonomy, bundle: ModelBundle) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed);
        Self {
            sgd: Sgd::new(cfg.momentum, cfg.weight_decay),
            adam_gen: Adam::default(),
            adam_disc: Adam::default(),
            cfg,
            tax,
            bundle,
            rng,
            step: 0,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            stage: self.cfg.stage,
            step: self.step,
            arch: self.bundle.arch.clone(),
            params: params_of(&self.bundle.store),
            sgd: self.sgd.clone(),
            adam_gen: self.adam_gen.clone(),
            adam_disc: self.adam_disc.clone(),
            rng: RngState::capture(&self.rng),
            param_hash: self.bundle.store.hash_all(),
        }
    }

    /// Continue exactly where `ck` stopped.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.stage != self.cfg.stage {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint is from stage {:?}, run is {:?}",
                ck.stage, self.cfg.stage
            )));
        }
        self.bundle = ck.bundle(&self.cfg.arch)?;
        self.sgd = ck.sgd.clone();
        self.adam_gen = ck.adam_gen.clone();
        self.adam_disc = ck.adam_disc.clone();
        self.rng = ck.rng.restore()?;
        self.step = ck.step;
        Ok(())
    }

    fn onehot_batch(&self, labels: &[&LabelMap]) -> Tensor {
        Tensor::stack(&labels.iter().map(|l| onehot(l, &self.tax).to_tensor()).collect::<Vec<_>>())
    }

    /// Warm-up objective on `b`. Terms with every weight at zero still appear in
    /// the report but contribute no gradient.
    fn forward_warmup(&self, g: &mut Graph, b: &Batch) -> Result<Forward> {
        let net = &self.bundle;
        let ab = &self.cfg.ablation;
        let (_, _, h, w) = b.x_day.dims4();
        let y_day: Vec<&LabelMap> = b.y_day.iter().collect();
        let y_day_t = self.onehot_batch(&y_day);
        let alpha = self.cfg.fuse_alpha;
        let dist = GradientStructDist::default();
        let wts = &self.cfg.weights;
        let render = |p: Var| (!ab.no_render).then_some(p);

        let mut f = Forward {
            terms: Vec::new(),
            p_n: None,
            p_ud: None,
            x_d2n: None,
            x_n2d: None,
        };

        let x_d = g.constant(b.x_day.clone());
        let z_d = net.enc.forward(g, x_d);
        let p_d = net.cls.forward(g, z_d, h, w);
        let l = losses::seg_ce(g, p_d, &y_day_t);
        f.terms.push((Term::SegD, l));
        if ab.source_only {
            return Ok(f);
        }

        // day: fused labels enter the decoders as constants
        let p_d_fused = g.constant(losses::fuse_probs_batch(g.value(p_d), &y_day, alpha)?);
        if !ab.no_inner {
            let p = render(p_d_fused);
            let rec = net.dec_day.forward(g, z_d, p);
            f.terms.push((Term::InnerD, losses::recon_l1(g, rec, x_d)));
        }
        let p = render(p_d_fused);
        let x_d2n = net.dec_night.forward(g, z_d, p);
        f.x_d2n = Some(g.value(x_d2n).clone());
        let s = net.disc_night.forward(g, x_d2n);
        f.terms.push((Term::AdvD2n, losses::lsgan_gen(g, s)));
        let z_d2n = net.enc.forward(g, x_d2n);
        f.terms.push((Term::PercepD, losses::perceptual(g, &dist, x_d2n, x_d, z_d2n, z_d, wts)));
        let p_d2n = net.cls.forward(g, z_d2n, h, w);
        f.terms.push((Term::SegD2n, losses::seg_ce(g, p_d2n, &y_day_t)));
        if !ab.no_outer {
            let fused = g.constant(losses::fuse_probs_batch(g.value(p_d2n), &y_day, alpha)?);
            let p = render(fused);
            let cyc = net.dec_day.forward(g, z_d2n, p);
            f.terms.push((Term::OuterD, losses::recon_l1(g, cyc, x_d)));
        }

        // night: predictions stay attached so every loop tunes the classifier
        let x_n = g.constant(b.x_night.clone());
        let z_n = net.enc.forward(g, x_n);
        let p_n = net.cls.forward(g, z_n, h, w);
        f.p_n = Some(p_n);
        if !ab.no_inner {
            let p = render(p_n);
            let rec = net.dec_night.forward(g, z_n, p);
            f.terms.push((Term::InnerN, losses::recon_l1(g, rec, x_n)));
        }
        let p = render(p_n);
        let x_n2d = net.dec_day.forward(g, z_n, p);
        f.x_n2d = Some(g.value(x_n2d).clone());
        let s = net.disc_day.forward(g, x_n2d);
        f.terms.push((Term::AdvN2d, losses::lsgan_gen(g, s)));
        let z_n2d = net.enc.forward(g, x_n2d);
        f.terms.push((Term::PercepN, losses::perceptual(g, &dist, x_n2d, x_n, z_n2d, z_n, wts)));
        if !ab.no_outer {
            let p_n2d = net.cls.forward(g, z_n2d, h, w);
            let p = render(p_n2d);
            let cyc = net.dec_night.forward(g, z_n2d, p);
            f.terms.push((Term::OuterN, losses::recon_l1(g, cyc, x_n)));
        }

        // day-time reference: inner loop only
        let x_ud = g.constant(b.x_day_ref.clone());
        let z_ud = net.enc.forward(g, x_ud);
        let p_ud = net.cls.forward(g, z_ud, h, w);
        f.p_ud = Some(p_ud);
        if !ab.no_inner {
            let p = render(p_ud);
            let rec = net.dec_day.forward(g, z_ud, p);
            f.terms.push((Term::InnerUd, losses::recon_l1(g, rec, x_ud)));
        }
        Ok(f)
    }

    /// Gradients of the weighted generator objective, without applying them.
    /// Exposed for gradient inspection.
    pub fn generator_grads(&self, b: &Batch) -> Result<(LossReport, crate::params::ParamGrads)> {
        let mut g = Graph::with_params(&self.bundle.store).freeze(&ParamGroup::DISCRIMINATOR);
        let f = self.forward_warmup(&mut g, b)?;
        let report = self.report(&g, &f.terms)?;
        let grads = match losses::weighted_total(&mut g, &f.terms, &self.cfg.weights) {
            Some(total) => g.param_grads(&g.backward(total)),
            None => crate::params::ParamGrads::new(self.bundle.store.len()),
        };
        Ok((report, grads))
    }

    /// Gradients of each named term separately (unweighted).
    pub fn term_grads(&self, b: &Batch, terms: &[Term]) -> Result<Vec<crate::params::ParamGrads>> {
        let mut g = Graph::with_params(&self.bundle.store).freeze(&ParamGroup::DISCRIMINATOR);
        let f = self.forward_warmup(&mut g, b)?;
        terms
            .iter()
            .map(|t| {
                let v = f
                    .terms
                    .iter()
                    .find(|(k, _)| k == t)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::Config(format!("term {t} not computed")))?;
                Ok(g.param_grads(&g.backward(v)))
            })
            .collect()
    }

    fn report(&self, g: &Graph, terms: &[(Term, Var)]) -> Result<LossReport> {
        let values: Vec<(Term, f64)> = terms.iter().map(|&(t, v)| (t, g.value(v).item())).collect();
        let total = losses::total_loss(&values, &self.cfg.weights)?;
        let mut r = LossReport::default();
        for (t, v) in values {
            r.0.insert(t.key().to_string(), v);
        }
        r.0.insert("total".into(), total);
        Ok(r)
    }

    fn lr_seg_now(&self) -> f64 {
        poly_lr(self.cfg.lr_seg, self.step, self.cfg.steps, self.cfg.poly_power)
    }

    fn apply_generator(&mut self, mut grads: crate::params::ParamGrads, lr_seg: f64) {
        let store = &mut self.bundle.store;
        let gen = store.ids_in(&ParamGroup::GENERATOR);
        clip_global_norm(&mut grads, &gen, self.cfg.clip_norm);
        let seg = store.ids_in(&SEG_GROUPS);
        self.sgd.step(store, &grads, &seg, lr_seg);
        if !self.cfg.ablation.source_only {
            let dec = store.ids_in(&DEC_GROUPS);
            self.adam_gen.step(store, &grads, &dec, self.cfg.lr_aux);
        }
    }

    /// Both discriminators against the translations of this step, held fixed.
    fn update_discriminators(&mut self, b: &Batch, x_d2n: Tensor, x_n2d: Tensor) -> f64 {
        let (loss, mut grads) = {
            let net = &self.bundle;
            let mut g = Graph::with_params(&net.store).freeze(&ParamGroup::GENERATOR);
            let real_n = g.constant(b.x_night.clone());
            let fake_n = g.constant(x_d2n);
            let sr = net.disc_night.forward(&mut g, real_n);
            let sf = net.disc_night.forward(&mut g, fake_n);
            let ln = losses::lsgan_disc(&mut g, &[sr], sf);
            let real_d = g.constant(b.x_day.clone());
            let real_ud = g.constant(b.x_day_ref.clone());
            let fake_d = g.constant(x_n2d);
            let sr1 = net.disc_day.forward(&mut g, real_d);
            let sr2 = net.disc_day.forward(&mut g, real_ud);
            let sf = net.disc_day.forward(&mut g, fake_d);
            let ld = losses::lsgan_disc(&mut g, &[sr1, sr2], sf);
            let total = g.add(ln, ld);
            (g.value(total).item(), g.param_grads(&g.backward(total)))
        };
        let store = &mut self.bundle.store;
        let ids = store.ids_in(&ParamGroup::DISCRIMINATOR);
        clip_global_norm(&mut grads, &ids, self.cfg.clip_norm);
        self.adam_disc.step(store, &grads, &ids, self.cfg.lr_aux);
        loss
    }

    pub fn warmup_step(&mut self, b: &Batch) -> Result<StepInfo> {
        self.train_step(b, None)
    }

    pub fn selftrain_step(&mut self, b: &Batch, pseudo: &PseudoStore) -> Result<StepInfo> {
        self.train_step(b, Some(pseudo))
    }

    fn train_step(&mut self, b: &Batch, pseudo: Option<&PseudoStore>) -> Result<StepInfo> {
        let lr_seg = self.lr_seg_now();
        let (report, grads, x_d2n, x_n2d, lor, online) = {
            let mut g = Graph::with_params(&self.bundle.store).freeze(&ParamGroup::DISCRIMINATOR);
            let mut f = self.forward_warmup(&mut g, b)?;
            let (mut lor, mut online) = (Vec::new(), Vec::new());
            if let Some(store) = pseudo {
                self.add_pseudo_terms(&mut g, b, store, &mut f, &mut lor, &mut online)?;
            }
            let report = self.report(&g, &f.terms)?;
            let grads = losses::weighted_total(&mut g, &f.terms, &self.cfg.weights).map(|t| g.param_grads(&g.backward(t)));
            (report, grads, f.x_d2n, f.x_n2d, lor, online)
        };
        if let Some(grads) = grads {
            self.apply_generator(grads, lr_seg);
        }
        let disc = match (x_d2n, x_n2d) {
            (Some(a), Some(c)) => Some(self.update_discriminators(b, a, c)),
            _ => None,
        };
        self.step += 1;
        Ok(StepInfo {
            step: self.step,
            stage: self.cfg.stage,
            lr_seg,
            losses: report,
            disc,
            lor,
            online,
        })
    }

    fn add_pseudo_terms(
        &self,
        g: &mut Graph,
        b: &Batch,
        store: &PseudoStore,
        f: &mut Forward,
        lor: &mut Vec<f64>,
        online: &mut Vec<OnlineChoice>,
    ) -> Result<()> {
        let (Some(p_n), Some(p_ud)) = (f.p_n, f.p_ud) else {
            return Err(Error::Config("self-training cannot run in source-only mode".into()));
        };
        let cfg = &self.cfg.selftrain;
        let mut ud_targets = Vec::with_capacity(b.len());
        let mut n_targets = Vec::with_capacity(b.len());
        for (i, id) in b.ids.iter().enumerate() {
            let (y_off_l, y_ud_l) = store.get(id)?;
            let pn = ProbMap::new_unchecked(g.value(p_n).batch_item(i));
            let pr = ProbMap::new_unchecked(g.value(p_ud).batch_item(i));
            let sig = selftrain::online_signal(&pr, &pn, &self.tax, cfg)?;
            let y_off = onehot(y_off_l, &self.tax);
            n_targets.push(selftrain::coteach_target(&y_off, &sig.mask, cfg.mutually_exclusive)?);
            ud_targets.push(onehot(y_ud_l, &self.tax).to_tensor());
            lor.push(sig.lor);
            online.push(sig.choice);
        }
        let l = losses::seg_ce(g, p_ud, &Tensor::stack(&ud_targets));
        f.terms.push((Term::SegUdPseudo, l));
        let l = losses::seg_ce(g, p_n, &Tensor::stack(&n_targets));
        f.terms.push((Term::SegNCoteach, l));
        Ok(())
    }

    /// Draw a batch (with replacement) and crop it if configured.
    pub fn sample_batch(&mut self, data: &[StoredSample], pseudo: Option<&PseudoStore>) -> Result<(Batch, Option<PseudoStore>)> {
        if data.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut samples = Vec::with_capacity(self.cfg.batch_size);
        let mut cropped = pseudo.map(|_| PseudoStore::default());
        for _ in 0..self.cfg.batch_size {
            let s = &data[self.rng.random_range(0..data.len())];
            let mut p = s.paired()?;
            let window = match self.cfg.crop_size {
                Some(c) if c < s.h || c < s.w => {
                    if c > s.h || c > s.w {
                        return Err(Error::Config(format!("crop {c} larger than {}x{}", s.h, s.w)));
                    }
                    Some((self.rng.random_range(0..=s.h - c), self.rng.random_range(0..=s.w - c), c))
                }
                _ => None,
            };
            if let Some((y, x, c)) = window {
                p = crop_sample(&p, y, x, c)?;
            }
            if let (Some(src), Some(dst)) = (pseudo, cropped.as_mut()) {
                let (n, r) = src.get(&s.id)?;
                let (n, r) = match window {
                    Some((y, x, c)) => (crop_labels(n, y, x, c), crop_labels(r, y, x, c)),
                    None => (n.clone(), r.clone()),
                };
                dst.insert(&s.id, n, r);
            }
            samples.push(p);
        }
        Ok((Batch::from_samples(&samples)?, cropped))
    }
}

fn crop_tensor(t: &Tensor, y: usize, x: usize, c: usize) -> Tensor {
    let (_, ch, h, w) = t.dims4();
    let mut out = Vec::with_capacity(ch * c * c);
    for k in 0..ch {
        for r in y..y + c {
            let base = (k * h + r) * w;
            out.extend_from_slice(&t.data()[base + x..base + x + c]);
        }
    }
    Tensor::new(vec![1, ch, c, c], out)
}

pub fn crop_labels(l: &LabelMap, y: usize, x: usize, c: usize) -> LabelMap {
    let mut out = Vec::with_capacity(c * c);
    for r in y..y + c {
        out.extend_from_slice(&l.data()[r * l.width() + x..r * l.width() + x + c]);
    }
    LabelMap::new(c, c, out).expect("crop size")
}

fn crop_sample(p: &PairedSample, y: usize, x: usize, c: usize) -> Result<PairedSample> {
    use crate::types::Image;
    let im = |i: &Image| Image::new(crop_tensor(i.tensor(), y, x, c), i.domain);
    PairedSample::new(
        p.sample_id.clone(),
        im(&p.x_day)?,
        crop_labels(&p.y_day, y, x, c),
        im(&p.x_night)?,
        im(&p.x_day_ref)?,
    )
}

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Keep only the records of steps `<= last_step`.
fn truncate_metrics(path: &Path, last_step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: serde_json::Value = serde_json::from_str(&line)?;
        if rec["step"].as_u64().is_some_and(|s| s as usize <= last_step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    io::write_atomic(path, kept.as_bytes())
}

/// Where a run reads its data and writes its outputs.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
}

/// Train `cfg.steps` steps of `cfg.stage`, logging every step to
/// `<out>/metrics.jsonl` and checkpointing to `<out>/ckpt/step_<N>`.
pub fn run(cfg: &TrainConfig, tax: &ClassTaxonomy, paths: &RunPaths) -> Result<Trainer> {
    cfg.validate(tax)?;
    let data = datagen::load_split(&paths.data, "train", tax)?;
    run_on(cfg, tax, &data, paths)
}

/// [`run`] on an already loaded training split.
pub fn run_on(cfg: &TrainConfig, tax: &ClassTaxonomy, data: &[StoredSample], paths: &RunPaths) -> Result<Trainer> {
    cfg.validate(tax)?;
    let (mut trainer, pseudo) = match cfg.stage {
        Stage::Warmup => (Trainer::new(cfg.clone(), tax.clone())?, None),
        Stage::Selftrain => {
            let ck_path = cfg.warmup_checkpoint.as_ref().expect("validated");
            let ck = Checkpoint::load(ck_path)?;
            if ck.stage != Stage::Warmup {
                return Err(Error::Config(format!("{} is not a warm-up checkpoint", ck_path.display())));
            }
            let bundle = ck.bundle(&cfg.arch)?;
            let dir = cfg.pseudo_dir.as_ref().expect("validated");
            let pseudo = PseudoStore::load(dir, data.iter().map(|s| s.id.as_str()))?;
            (Trainer::with_bundle(cfg.clone(), tax.clone(), bundle), Some(pseudo))
        }
    };
    fs::create_dir_all(&paths.out).map_err(|e| Error::io(&paths.out, e))?;
    let metrics = paths.out.join(METRICS_FILE);
    match &paths.resume {
        Some(r) => {
            trainer.restore(&Checkpoint::load(r)?)?;
            truncate_metrics(&metrics, trainer.step)?;
        }
        None => io::write_atomic(&metrics, b"")?,
    }
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;
    while trainer.step < cfg.steps {
        let (batch, crop_pseudo) = trainer.sample_batch(data, pseudo.as_ref())?;
        let info = match &crop_pseudo {
            Some(p) => trainer.selftrain_step(&batch, p)?,
            None => trainer.warmup_step(&batch)?,
        };
        let mut line = serde_json::to_string(&info)?;
        line.push('\n');
        log.write_all(line.as_bytes()).map_err(|e| Error::io(&metrics, e))?;
        if info.step % 25 == 0 || info.step == cfg.steps {
            log::info!("step {} total {:.4}", info.step, info.losses.total());
        }
        let periodic = cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0;
        if periodic || trainer.step == cfg.steps {
            trainer.checkpoint().save(&checkpoint_dir(&paths.out, trainer.step))?;
        }
    }
    Ok(trainer)
}

/// Read back a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepInfo>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}
