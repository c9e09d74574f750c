//! Brute-force per-pixel oracles for the label-map algebra.

use std::collections::BTreeSet;

use nightseg_core::eval::ConfusionMatrix;
use nightseg_core::selftrain::{dna_labels, lor, static_map_labels};
use nightseg_core::types::{argmax_labels, onehot, restrict, ClassTaxonomy, LabelMap, OneHotMask, ProbMap};
use nightseg_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const C: usize = 9;

pub fn tax() -> ClassTaxonomy {
    ClassTaxonomy::synthetic()
}

pub fn random_probs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ProbMap {
    let hw = h * w;
    let mut t = Tensor::zeros(&[1, c, h, w]);
    for i in 0..hw {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
        let s: f64 = raw.iter().sum();
        for k in 0..c {
            t.data_mut()[k * hw + i] = raw[k] / s;
        }
    }
    ProbMap::new(t).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, ignore_rate: f64) -> LabelMap {
    let data = (0..h * w)
        .map(|_| if rng.random_bool(ignore_rate) { 255 } else { rng.random_range(0..C as u8) })
        .collect();
    LabelMap::new(h, w, data).unwrap()
}

pub fn oracle_argmax(p: &ProbMap) -> Vec<u8> {
    let (c, hw) = (p.num_classes(), p.height() * p.width());
    (0..hw)
        .map(|i| {
            let mut best = 0usize;
            for k in 0..c {
                if p.at(k, i) > p.at(best, i) {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

pub fn mask_rows(m: &OneHotMask) -> Vec<Vec<u8>> {
    let hw = m.height() * m.width();
    (0..hw).map(|i| (0..m.num_classes()).map(|k| m.get(k, i)).collect()).collect()
}

pub fn oracle_onehot(l: &[u8], c: usize) -> Vec<Vec<u8>> {
    l.iter()
        .map(|&v| (0..c).map(|k| (v as usize == k) as u8).collect())
        .collect()
}

pub fn argmax_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..150 {
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let p = random_probs(&mut rng, C, h, w);
        assert_eq!(argmax_labels(&p).data(), oracle_argmax(&p).as_slice());
    }
}

pub fn onehot_and_restrict_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = tax();
    for _ in 0..150 {
        let l = random_labels(&mut rng, 4, 5, 0.2);
        let m = onehot(&l, &t);
        assert_eq!(mask_rows(&m), oracle_onehot(l.data(), C));
        m.validate().unwrap();

        let allowed: BTreeSet<usize> = (0..C).filter(|_| rng.random_bool(0.5)).collect();
        let r = restrict(&m, &allowed);
        let expect: Vec<Vec<u8>> = l
            .data()
            .iter()
            .map(|&v| (0..C).map(|k| (v as usize == k && allowed.contains(&k)) as u8).collect())
            .collect();
        assert_eq!(mask_rows(&r), expect);
    }
}

pub fn static_map_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = tax();
    for _ in 0..150 {
        let p_ref = random_probs(&mut rng, C, 4, 4);
        let p_n = random_probs(&mut rng, C, 4, 4);
        let (a, b) = (oracle_argmax(&p_ref), oracle_argmax(&p_n));
        let m = static_map_labels(&argmax_labels(&p_ref), &argmax_labels(&p_n), &t).unwrap();
        let expect: Vec<Vec<u8>> = (0..16)
            .map(|i| {
                let keep = a[i] < 7 && b[i] < 7;
                (0..C).map(|k| (keep && a[i] as usize == k) as u8).collect()
            })
            .collect();
        assert_eq!(mask_rows(&m), expect);
        assert!((7..9).all(|k| (0..16).all(|i| m.get(k, i) == 0)));
    }
}

pub fn dna_matches_loop_and_is_a_subset() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = tax();
    for _ in 0..150 {
        let y_static = onehot(&random_labels(&mut rng, 4, 4, 0.3), &t);
        let l_n = random_labels(&mut rng, 4, 4, 0.0);
        let d = dna_labels(&y_static, &l_n).unwrap();
        for i in 0..16 {
            for k in 0..C {
                let expect = y_static.get(k, i) == 1 && l_n.data()[i] as usize == k;
                assert_eq!(d.get(k, i) == 1, expect);
                assert!(d.get(k, i) <= y_static.get(k, i));
            }
        }
    }
}

pub fn oracle_lor(a: &[u8], b: &[u8], ssc: &BTreeSet<usize>) -> f64 {
    let ia: Vec<usize> = (0..a.len()).filter(|&i| ssc.contains(&(a[i] as usize))).collect();
    let ib: Vec<usize> = (0..b.len()).filter(|&i| ssc.contains(&(b[i] as usize))).collect();
    let both = ia.iter().filter(|i| ib.contains(i)).count();
    if ia.len() + ib.len() == 0 {
        0.0
    } else {
        2.0 * both as f64 / (ia.len() + ib.len()) as f64
    }
}

pub fn lor_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ssc = tax().ssc_ids;
    for _ in 0..200 {
        let a = random_labels(&mut rng, 5, 5, 0.1);
        let b = random_labels(&mut rng, 5, 5, 0.1);
        let v = lor(&a, &b, &ssc);
        assert!((v - oracle_lor(a.data(), b.data(), &ssc)).abs() <= 1e-12);
        assert_eq!(v, lor(&b, &a, &ssc));
        assert!((0.0..=1.0).contains(&v));
    }
}

pub fn confusion_and_miou_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..150 {
        let pred = random_labels(&mut rng, 8, 8, 0.0);
        let gt = random_labels(&mut rng, 8, 8, 0.15);
        let mut cm = ConfusionMatrix::new(C);
        cm.accumulate(&pred, &gt).unwrap();
        let mut counts = vec![vec![0u64; C]; C];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != 255 {
                counts[g as usize][p as usize] += 1;
            }
        }
        for g in 0..C {
            for p in 0..C {
                assert_eq!(cm.get(g, p), counts[g][p]);
            }
        }
        // IoU straight from pixel sets
        let mut ious = Vec::new();
        for k in 0..C {
            let (mut inter, mut uni) = (0, 0);
            for (&p, &g) in pred.data().iter().zip(gt.data()) {
                if g == 255 {
                    continue;
                }
                let (a, b) = (p as usize == k, g as usize == k);
                inter += (a && b) as usize;
                uni += (a || b) as usize;
            }
            if uni > 0 {
                ious.push(inter as f64 / uni as f64);
            }
        }
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!((cm.miou().unwrap().mean - mean).abs() <= 1e-12);
    }
}
