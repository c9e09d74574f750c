//! The sub-networks: shared encoder, semantic classifier, two image decoders
//! with semantic rendering layers, and two patch discriminators.
//!
//! Layers only hold [`ParamId`]s; the weights live in the bundle's
//! [`ParamStore`] so one store can be hashed, checkpointed and updated as a
//! unit. Everything is built in a fixed order from [`ArchConfig`], which is
//! what makes name-based checkpoint restore possible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::types::{check_spatial, Domain, Image, LatentFeature, ProbMap};

pub const LATENT_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub num_classes: usize,
    /// Channel width of each of the three stride-2 encoder stages.
    pub enc_widths: [usize; 3],
    /// Output grid sizes of the classifier's pooling pyramid.
    pub pool_scales: Vec<usize>,
    pub pool_width: usize,
    pub cls_width: usize,
    /// One entry per rendering level, coarse to fine.
    pub dec_widths: Vec<usize>,
    pub sem_width: usize,
    pub disc_widths: [usize; 3],
    /// Zero-initialize the last layer of every semantic rendering branch.
    pub zero_init_render: bool,
}

impl ArchConfig {
    /// Widths used for desk-scale training on 128x128 inputs.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_classes,
            enc_widths: [8, 16, 32],
            pool_scales: vec![1, 2],
            pool_width: 8,
            cls_width: 32,
            dec_widths: vec![32, 16, 8],
            sem_width: 8,
            disc_widths: [8, 16, 32],
            zero_init_render: true,
        }
    }

    /// Minimal widths for finite-difference checks on 16x16 inputs.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            num_classes,
            enc_widths: [2, 3, 4],
            pool_scales: vec![1, 2],
            pool_width: 2,
            cls_width: 4,
            dec_widths: vec![4, 3, 2],
            sem_width: 2,
            disc_widths: [2, 2, 3],
            zero_init_render: true,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.enc_widths[2]
    }

    pub fn render_levels(&self) -> usize {
        self.dec_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(2..=4).contains(&self.render_levels()) {
            return Err(Error::Config(format!(
                "rendering levels must be in 2..=4, got {}",
                self.render_levels()
            )));
        }
        if self.pool_scales.is_empty() || self.pool_scales.contains(&0) {
            return Err(Error::Config("pool scales must be nonempty and positive".into()));
        }
        let widths = self
            .enc_widths
            .iter()
            .chain(&self.dec_widths)
            .chain(&self.disc_widths)
            .chain([&self.pool_width, &self.cls_width, &self.sem_width]);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Day,
    Night,
}

/// Patch discriminator output, `[N, 1, h_s, w_s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap(pub Tensor);

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(
        &mut self,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let std = gain / fan_in.sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = cout * cin * k * k;
        let data = if gain == 0.0 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| normal.sample(&mut self.rng)).collect()
        };
        let w = self
            .store
            .add(format!("{name}.weight"), group, Tensor::new(vec![cout, cin, k, k], data));
        let b = self.store.add(format!("{name}.bias"), group, Tensor::zeros(&[cout]));
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

impl Conv {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

/// Three stride-2 stages, each followed by a residual 3x3 unit.
#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<(Conv, Conv)>,
}

impl Encoder {
    fn build(b: &mut Builder, arch: &ArchConfig) -> Self {
        let mut cin = 3;
        let stages = arch
            .enc_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let down = b.conv(&format!("enc.stage{i}.down"), ParamGroup::Encoder, cin, w, 3, 2, RELU_GAIN);
                let res = b.conv(&format!("enc.stage{i}.res"), ParamGroup::Encoder, w, w, 3, 1, 1.0);
                cin = w;
                (down, res)
            })
            .collect();
        Self { stages }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (down, res) in &self.stages {
            let d = down.forward(g, h);
            let d = g.silu(d);
            let r = res.forward(g, d);
            let r = g.silu(r);
            h = g.add(d, r);
        }
        h
    }
}

/// Pooling-pyramid context head producing per-class logits at latent resolution.
#[derive(Clone, Debug)]
pub struct Classifier {
    pyramid: Vec<(usize, Conv)>,
    fuse: Conv,
    head: Conv,
}

impl Classifier {
    fn build(b: &mut Builder, arch: &ArchConfig) -> Self {
        let cf = arch.latent_channels();
        let pyramid = arch
            .pool_scales
            .iter()
            .map(|&s| {
                let c = b.conv(&format!("cls.pool{s}"), ParamGroup::Classifier, cf, arch.pool_width, 1, 1, RELU_GAIN);
                (s, c)
            })
            .collect::<Vec<_>>();
        let cat = cf + arch.pool_width * pyramid.len();
        let fuse = b.conv("cls.fuse", ParamGroup::Classifier, cat, arch.cls_width, 3, 1, RELU_GAIN);
        let head = b.conv("cls.head", ParamGroup::Classifier, arch.cls_width, arch.num_classes, 1, 1, 1.0);
        Self { pyramid, fuse, head }
    }

    pub fn logits(&self, g: &mut Graph, z: Var) -> Var {
        let (_, _, h, w) = g.value(z).dims4();
        let mut parts = vec![z];
        for (s, conv) in &self.pyramid {
            // grids that do not divide evenly fall back to global pooling
            let pooled = if h % s == 0 && w % s == 0 {
                g.avg_pool_rect(z, h / s, w / s)
            } else {
                g.avg_pool_rect(z, h, w)
            };
            let c = conv.forward(g, pooled);
            let c = g.silu(c);
            parts.push(g.resize(c, h, w));
        }
        let cat = g.concat(&parts);
        let f = self.fuse.forward(g, cat);
        let f = g.silu(f);
        self.head.forward(g, f)
    }

    /// Logits upsampled to `out_h x out_w`, then per-pixel softmax.
    pub fn forward(&self, g: &mut Graph, z: Var, out_h: usize, out_w: usize) -> Var {
        let l = self.logits(g, z);
        let l = g.resize(l, out_h, out_w);
        g.softmax(l)
    }
}

#[derive(Clone, Debug)]
struct RenderLevel {
    raw: Conv,
    sem_in: Conv,
    sem_out: Conv,
}

/// Image decoder whose raw feature path is modulated by an encoding of the
/// class-probability map at every level: `out = raw + raw * sem(p)`.
#[derive(Clone, Debug)]
pub struct Decoder {
    levels: Vec<RenderLevel>,
    out: Conv,
}

impl Decoder {
    fn build(b: &mut Builder, arch: &ArchConfig, side: Side) -> Self {
        let (group, tag) = match side {
            Side::Day => (ParamGroup::DecoderDay, "dec_day"),
            Side::Night => (ParamGroup::DecoderNight, "dec_night"),
        };
        let sem_gain = if arch.zero_init_render { 0.0 } else { 1.0 };
        let mut cin = arch.latent_channels();
        let levels = arch
            .dec_widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                let raw = b.conv(&format!("{tag}.level{l}.raw"), group, cin, w, 3, 1, RELU_GAIN);
                let sem_in = b.conv(
                    &format!("{tag}.level{l}.sem_in"),
                    group,
                    arch.num_classes,
                    arch.sem_width,
                    3,
                    1,
                    RELU_GAIN,
                );
                let sem_out = b.conv(&format!("{tag}.level{l}.sem_out"), group, arch.sem_width, w, 3, 1, sem_gain);
                cin = w;
                RenderLevel { raw, sem_in, sem_out }
            })
            .collect();
        let out = b.conv(&format!("{tag}.out"), group, cin, 3, 3, 1, 1.0);
        Self { levels, out }
    }

    /// Decode `z` to an image. With `p = None` the semantic branches are skipped.
    pub fn forward(&self, g: &mut Graph, z: Var, p: Option<Var>) -> Var {
        let (_, _, h, w) = g.value(z).dims4();
        let (out_h, out_w) = (h * LATENT_STRIDE, w * LATENT_STRIDE);
        let mut r = z;
        for (l, level) in self.levels.iter().enumerate() {
            let (lh, lw) = (h << l, w << l);
            r = g.resize(r, lh, lw);
            let raw = level.raw.forward(g, r);
            let raw = g.silu(raw);
            r = match p {
                Some(p) => {
                    let pl = g.avg_pool(p, out_h / lh);
                    let s = level.sem_in.forward(g, pl);
                    let s = g.silu(s);
                    let s = level.sem_out.forward(g, s);
                    let m = g.mul(raw, s);
                    g.add(raw, m)
                }
                None => raw,
            };
        }
        let r = g.resize(r, out_h, out_w);
        let o = self.out.forward(g, r);
        g.tanh(o)
    }

    /// Parameter ids of the last layer of each semantic branch.
    pub fn render_heads(&self) -> Vec<ParamId> {
        self.levels
            .iter()
            .flat_map(|l| [l.sem_out.weight(), l.sem_out.bias()])
            .collect()
    }
}

/// Four-layer fully-convolutional patch discriminator with a linear output.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layers: Vec<Conv>,
}

impl Discriminator {
    fn build(b: &mut Builder, arch: &ArchConfig, side: Side) -> Self {
        let (group, tag) = match side {
            Side::Day => (ParamGroup::DiscDay, "disc_day"),
            Side::Night => (ParamGroup::DiscNight, "disc_night"),
        };
        let mut cin = 3;
        let mut layers: Vec<Conv> = arch
            .disc_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = b.conv(&format!("{tag}.layer{i}"), group, cin, w, 3, 2, RELU_GAIN);
                cin = w;
                c
            })
            .collect();
        layers.push(b.conv(&format!("{tag}.score"), group, cin, 1, 3, 1, 1.0));
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = self.layers.len();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i + 1 < n {
                h = g.silu(h);
            }
        }
        h
    }
}

/// All sub-networks plus the parameter store they share.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub enc: Encoder,
    pub cls: Classifier,
    pub dec_day: Decoder,
    pub dec_night: Decoder,
    pub disc_day: Discriminator,
    pub disc_night: Discriminator,
}

impl ModelBundle {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let enc = Encoder::build(&mut b, &arch);
        let cls = Classifier::build(&mut b, &arch);
        let dec_day = Decoder::build(&mut b, &arch, Side::Day);
        let dec_night = Decoder::build(&mut b, &arch, Side::Night);
        let disc_day = Discriminator::build(&mut b, &arch, Side::Day);
        let disc_night = Discriminator::build(&mut b, &arch, Side::Night);
        Ok(Self {
            arch,
            store,
            enc,
            cls,
            dec_day,
            dec_night,
            disc_day,
            disc_night,
        })
    }

    /// Rebuild the layer layout for `arch` and adopt `store`'s values.
    pub fn from_store(arch: ArchConfig, store: ParamStore) -> Result<Self> {
        let mut bundle = Self::new(arch, 0)?;
        if store.len() != bundle.store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameter tensors, found {}",
                bundle.store.len(),
                store.len()
            )));
        }
        for id in bundle.store.ids().collect::<Vec<_>>() {
            let e = bundle.store.entry(id).clone();
            let src = store.find(&e.name).ok_or_else(|| {
                Error::CheckpointMismatch(format!("parameter `{}` missing", e.name))
            })?;
            let v = store.get(src);
            if v.shape() != e.value.shape() || store.group(src) != e.group {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    v.shape(),
                    e.value.shape()
                )));
            }
            *bundle.store.get_mut(id) = v.clone();
        }
        Ok(bundle)
    }

    pub fn decoder(&self, side: Side) -> &Decoder {
        match side {
            Side::Day => &self.dec_day,
            Side::Night => &self.dec_night,
        }
    }

    pub fn discriminator(&self, side: Side) -> &Discriminator {
        match side {
            Side::Day => &self.disc_day,
            Side::Night => &self.disc_night,
        }
    }

    /// Replace the zero-initialized rendering heads with random weights.
    pub fn randomize_render_heads(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        let heads: Vec<ParamId> = self
            .dec_day
            .render_heads()
            .into_iter()
            .chain(self.dec_night.render_heads())
            .collect();
        for id in heads {
            for v in self.store.get_mut(id).data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    }

    /// Encoder features for a single image.
    pub fn encode(&self, x: &Image) -> Result<LatentFeature> {
        check_spatial(x.height(), x.width())?;
        let mut g = Graph::with_params(&self.store);
        let xv = g.constant(x.tensor().clone());
        let z = self.enc.forward(&mut g, xv);
        Ok(LatentFeature(g.value(z).clone()))
    }

    /// Class probabilities at `8x` the latent resolution.
    pub fn classify(&self, z: &LatentFeature) -> Result<ProbMap> {
        let (_, c, h, w) = z.0.dims4();
        if c != self.arch.latent_channels() {
            return Err(Error::Shape(format!(
                "latent has {c} channels, expected {}",
                self.arch.latent_channels()
            )));
        }
        let mut g = Graph::with_params(&self.store);
        let zv = g.constant(z.0.clone());
        let p = self.cls.forward(&mut g, zv, h * LATENT_STRIDE, w * LATENT_STRIDE);
        Ok(ProbMap::new_unchecked(g.value(p).clone()))
    }

    pub fn decode(&self, z: &LatentFeature, p: &ProbMap, side: Side) -> Result<Image> {
        self.decode_inner(z, Some(p), side)
    }

    /// Decode through the raw path only (no semantic rendering).
    pub fn decode_raw(&self, z: &LatentFeature, side: Side) -> Result<Image> {
        self.decode_inner(z, None, side)
    }

    fn decode_inner(&self, z: &LatentFeature, p: Option<&ProbMap>, side: Side) -> Result<Image> {
        let (_, _, h, w) = z.0.dims4();
        if let Some(p) = p {
            if p.height() != h * LATENT_STRIDE || p.width() != w * LATENT_STRIDE {
                return Err(Error::Shape(format!(
                    "probability map {}x{} does not match latent {h}x{w}",
                    p.height(),
                    p.width()
                )));
            }
            if p.num_classes() != self.arch.num_classes {
                return Err(Error::Shape("probability map class count mismatch".into()));
            }
        }
        let mut g = Graph::with_params(&self.store);
        let zv = g.constant(z.0.clone());
        let pv = p.map(|p| g.constant(p.tensor().clone()));
        let x = self.decoder(side).forward(&mut g, zv, pv);
        Image::new(g.value(x).clone(), Domain::Translated)
    }

    pub fn discriminate(&self, x: &Image, side: Side) -> Result<ScoreMap> {
        check_spatial(x.height(), x.width())?;
        let mut g = Graph::with_params(&self.store);
        let xv = g.constant(x.tensor().clone());
        let s = self.discriminator(side).forward(&mut g, xv);
        Ok(ScoreMap(g.value(s).clone()))
    }

    /// `classify(encode(x))` on a whole batch `[N, 3, H, W]`.
    pub fn predict_batch(&self, x: &Tensor) -> Tensor {
        let (_, _, h, w) = x.dims4();
        let mut g = Graph::with_params(&self.store);
        let xv = g.constant(x.clone());
        let z = self.enc.forward(&mut g, xv);
        let p = self.cls.forward(&mut g, z, h, w);
        g.value(p).clone()
    }
}
