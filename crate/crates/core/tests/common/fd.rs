//! Analytic gradients against central finite differences.

use nightseg_core::autograd::{Graph, Var};
use nightseg_core::losses::{self, GradientStructDist, LossWeights, Term};
use nightseg_core::trainer::{Batch, TrainConfig};
use nightseg_core::types::{onehot, ClassTaxonomy, LabelMap};
use nightseg_core::{ModelBundle, ParamGroup, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const MAX_REL: f64 = 1e-3;
const COORDS: usize = 100;
const FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Compare d loss / d inputs with central differences on `COORDS` random coordinates.
fn check_inputs(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var, seed: u64) {
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vs);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let l = build(&mut g, &vs);
    let grads = g.backward(l);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..COORDS {
        let k = rng.random_range(0..inputs.len());
        let j = rng.random_range(0..inputs[k].numel());
        let analytic = grads.wrt(vs[k]).map_or(0.0, |t| t.data()[j]);
        let mut plus = inputs.to_vec();
        plus[k].data_mut()[j] += STEP;
        let mut minus = inputs.to_vec();
        minus[k].data_mut()[j] -= STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    assert!(worst <= MAX_REL, "max relative error {worst:e}");
}

pub fn seg_ce_through_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = rand_tensor(&mut rng, &[2, 5, 4, 4], -2.0, 2.0);
    let mut target = Tensor::zeros(&[2, 5, 4, 4]);
    for n in 0..2 {
        for y in 0..4 {
            for x in 0..4 {
                // leave some pixels unsupervised
                if rng.random_bool(0.8) {
                    target.set4(n, rng.random_range(0..5), y, x, 1.0);
                }
            }
        }
    }
    check_inputs(
        &[logits],
        |g, v| {
            let p = g.softmax(v[0]);
            losses::seg_ce(g, p, &target)
        },
        1,
    );
}

pub fn recon_l1_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    check_inputs(&[a, b], |g, v| losses::recon_l1(g, v[0], v[1]), 2);
}

pub fn lsgan_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = rand_tensor(&mut rng, &[2, 1, 3, 3], -1.0, 2.0);
    check_inputs(&[s.clone()], |g, v| losses::lsgan_gen(g, v[0]), 3);
    let r = rand_tensor(&mut rng, &[2, 1, 3, 3], -1.0, 2.0);
    check_inputs(&[r, s], |g, v| losses::lsgan_disc(g, &[v[0]], v[1]), 4);
}

pub fn perceptual_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let xt = rand_tensor(&mut rng, &[1, 3, 16, 16], -1.0, 1.0);
    let xo = rand_tensor(&mut rng, &[1, 3, 16, 16], -1.0, 1.0);
    let zt = rand_tensor(&mut rng, &[1, 4, 2, 2], -1.0, 1.0);
    let zo = rand_tensor(&mut rng, &[1, 4, 2, 2], -1.0, 1.0);
    let w = LossWeights::default();
    let d = GradientStructDist::default();
    check_inputs(&[xt, xo, zt, zo], |g, v| losses::perceptual(g, &d, v[0], v[1], v[2], v[3], &w), 5);
}

/// A loop term evaluated by hand, plus the sign pattern of its L1 residual.
/// L1 has a kink at zero residual; a finite difference whose interval changes
/// the pattern straddles the kink and is redrawn.
struct Eval {
    value: f64,
    signs: Vec<bool>,
}

fn l1_eval(g: &mut Graph, a: Var, b: Var) -> Eval {
    let l = losses::recon_l1(g, a, b);
    let signs = g.value(a).data().iter().zip(g.value(b).data()).map(|(u, v)| u > v).collect();
    Eval {
        value: g.value(l).item(),
        signs,
    }
}

/// Gradient the trainer computes for `term` against central differences of the
/// hand-built `eval`, over every generator parameter.
fn check_against(term: Term, seed: u64, eval: impl Fn(&ModelBundle, &Batch) -> Eval) {
    let trainer = super::tiny_trainer(seed);
    let batch = super::random_batch(2, 16, seed + 100);
    let grads = trainer.term_grads(&batch, &[term]).unwrap().pop().unwrap();
    let reported = trainer.generator_grads(&batch).unwrap().0.get(term.key()).unwrap();
    assert!((eval(&trainer.bundle, &batch).value - reported).abs() <= 1e-12);
    let ids = trainer.bundle.store.ids_in(&ParamGroup::GENERATOR);

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let (mut accepted, mut redrawn, mut nonzero) = (0, 0, 0);
    let mut worst = 0.0f64;
    while accepted < COORDS {
        assert!(redrawn < COORDS, "{term}: too many coordinates straddle a kink");
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..trainer.bundle.store.get(id).numel());
        let at = |delta: f64| {
            let mut b = trainer.bundle.clone();
            b.store.get_mut(id).data_mut()[j] += delta;
            eval(&b, &batch)
        };
        let (hi, lo) = (at(STEP), at(-STEP));
        if hi.signs != lo.signs {
            redrawn += 1;
            continue;
        }
        accepted += 1;
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[j]);
        let numeric = (hi.value - lo.value) / (2.0 * STEP);
        nonzero += (analytic != 0.0) as usize;
        worst = worst.max(rel_err(analytic, numeric));
    }
    assert!(nonzero > 0, "{term}: no sampled coordinate carries gradient");
    assert!(worst <= MAX_REL, "{term}: max relative error {worst:e}");
}

fn y_day(batch: &Batch) -> Tensor {
    let tax = ClassTaxonomy::synthetic();
    Tensor::stack(&batch.y_day.iter().map(|l| onehot(l, &tax).to_tensor()).collect::<Vec<_>>())
}

/// Day-side maps fused with the labels, frozen at the unperturbed parameters:
/// that is what the stop-gradient means for a finite difference.
struct Frozen {
    fused_d: Tensor,
    fused_d2n: Tensor,
}

impl Frozen {
    fn at(base: &ModelBundle, batch: &Batch) -> Self {
        let alpha = TrainConfig::default().fuse_alpha;
        let y: Vec<&LabelMap> = batch.y_day.iter().collect();
        let mut g = Graph::with_params(&base.store);
        let x = g.constant(batch.x_day.clone());
        let z = base.enc.forward(&mut g, x);
        let p = base.cls.forward(&mut g, z, 16, 16);
        let fused_d = losses::fuse_probs_batch(g.value(p), &y, alpha).unwrap();
        let pf = g.constant(fused_d.clone());
        let x2 = base.dec_night.forward(&mut g, z, Some(pf));
        let z2 = base.enc.forward(&mut g, x2);
        let p2 = base.cls.forward(&mut g, z2, 16, 16);
        let fused_d2n = losses::fuse_probs_batch(g.value(p2), &y, alpha).unwrap();
        Self { fused_d, fused_d2n }
    }
}

fn day_term(net: &ModelBundle, batch: &Batch, fz: &Frozen, term: Term) -> Eval {
    let mut g = Graph::with_params(&net.store);
    let x = g.constant(batch.x_day.clone());
    let z = net.enc.forward(&mut g, x);
    let pf = g.constant(fz.fused_d.clone());
    if term == Term::InnerD {
        let rec = net.dec_day.forward(&mut g, z, Some(pf));
        return l1_eval(&mut g, rec, x);
    }
    let x2 = net.dec_night.forward(&mut g, z, Some(pf));
    let z2 = net.enc.forward(&mut g, x2);
    match term {
        Term::SegD2n => {
            let p2 = net.cls.forward(&mut g, z2, 16, 16);
            let l = losses::seg_ce(&mut g, p2, &y_day(batch));
            Eval {
                value: g.value(l).item(),
                signs: Vec::new(),
            }
        }
        Term::OuterD => {
            let pf2 = g.constant(fz.fused_d2n.clone());
            let cyc = net.dec_day.forward(&mut g, z2, Some(pf2));
            l1_eval(&mut g, cyc, x)
        }
        other => panic!("{other} is not a day-path term"),
    }
}

/// Night predictions stay attached, so nothing is frozen here.
fn night_term(net: &ModelBundle, batch: &Batch, term: Term) -> Eval {
    let mut g = Graph::with_params(&net.store);
    let x = g.constant(batch.x_night.clone());
    let z = net.enc.forward(&mut g, x);
    let p = net.cls.forward(&mut g, z, 16, 16);
    match term {
        Term::InnerN => {
            let rec = net.dec_night.forward(&mut g, z, Some(p));
            l1_eval(&mut g, rec, x)
        }
        Term::OuterN => {
            let x2 = net.dec_day.forward(&mut g, z, Some(p));
            let z2 = net.enc.forward(&mut g, x2);
            let p2 = net.cls.forward(&mut g, z2, 16, 16);
            let cyc = net.dec_night.forward(&mut g, z2, Some(p2));
            l1_eval(&mut g, cyc, x)
        }
        Term::AdvN2d => {
            let x2 = net.dec_day.forward(&mut g, z, Some(p));
            let s = net.disc_day.forward(&mut g, x2);
            let l = losses::lsgan_gen(&mut g, s);
            Eval {
                value: g.value(l).item(),
                signs: Vec::new(),
            }
        }
        other => panic!("{other} is not a night-path term"),
    }
}

pub fn check_day(term: Term, seed: u64) {
    let base = super::tiny_trainer(seed);
    let batch = super::random_batch(2, 16, seed + 100);
    let fz = Frozen::at(&base.bundle, &batch);
    check_against(term, seed, |net, b| day_term(net, b, &fz, term));
}

pub fn check_night(term: Term, seed: u64) {
    check_against(term, seed, |net, b| night_term(net, b, term));
}

pub fn inner_loop_day_through_networks() {
    check_day(Term::InnerD, 21);
}

pub fn inner_loop_night_through_networks() {
    check_night(Term::InnerN, 22);
}

pub fn outer_loop_day_through_networks() {
    check_day(Term::OuterD, 23);
}

pub fn outer_loop_night_through_networks() {
    check_night(Term::OuterN, 24);
}

pub fn translated_segmentation_through_networks() {
    check_day(Term::SegD2n, 25);
}

pub fn translated_adversarial_term_through_networks() {
    check_night(Term::AdvN2d, 26);
}
