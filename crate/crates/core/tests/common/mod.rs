//! Loop-form reference implementations of the few-shot classifiers, shared
//! by the oracle tests and the acceptance target.
#![allow(dead_code, clippy::needless_range_loop)]

use lixp::adapters::{NnConfig, SupportSet, Vote};
use lixp::autodiff::NORM_EPS;
use lixp::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub spt: SupportSet,
    pub test: Array2,
    pub texts: Array2,
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2 {
    Array2::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)).row_normalized(NORM_EPS)
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=5);
    let k = rng.random_range(1..=6);
    let d = rng.random_range(2..=8);
    let labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
    let x = unit_rows(&mut rng, n * k, d);
    Instance {
        spt: SupportSet::new(&x, &labels, n).unwrap(),
        test: unit_rows(&mut rng, 7, d),
        texts: unit_rows(&mut rng, n, d),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn max_dev(a: &Array2, b: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            worst = worst.max((a.get(i, j) - b[i][j]).abs());
        }
    }
    worst
}

pub fn ref_zero_shot(test: &Array2, texts: &Array2) -> Vec<Vec<f64>> {
    (0..test.rows())
        .map(|i| {
            (0..texts.rows())
                .map(|c| dot(test.row(i), texts.row(c)))
                .collect()
        })
        .collect()
}

pub fn ref_prototypes(spt: &SupportSet) -> Vec<Vec<f64>> {
    let n = spt.num_classes();
    let d = spt.dim();
    let mut protos = vec![vec![0.0; d]; n];
    let mut counts = vec![0usize; n];
    for r in 0..spt.len() {
        let c = spt.labels()[r];
        counts[c] += 1;
        for j in 0..d {
            protos[c][j] += spt.embeddings().get(r, j);
        }
    }
    for c in 0..n {
        for j in 0..d {
            protos[c][j] /= counts[c] as f64;
        }
    }
    protos
}

pub fn ref_tip(
    test: &Array2,
    spt: &SupportSet,
    texts: &Array2,
    mix: f64,
    sharpness: f64,
) -> Vec<Vec<f64>> {
    let mut out = ref_zero_shot(test, texts);
    for i in 0..test.rows() {
        for r in 0..spt.len() {
            let a = dot(test.row(i), spt.embeddings().row(r));
            out[i][spt.labels()[r]] += mix * (-sharpness * (1.0 - a)).exp();
        }
    }
    out
}

/// Exhaustive: sort every support row by (similarity desc, index asc).
pub fn ref_nn(test: &Array2, spt: &SupportSet, cfg: &NnConfig) -> Vec<Vec<f64>> {
    let k = cfg.k.min(spt.len());
    let mut out = vec![vec![0.0; spt.num_classes()]; test.rows()];
    for i in 0..test.rows() {
        let mut cand: Vec<(f64, usize)> = (0..spt.len())
            .map(|r| (dot(test.row(i), spt.embeddings().row(r)), r))
            .collect();
        for a in 0..cand.len() {
            for b in a + 1..cand.len() {
                let swap =
                    cand[b].0 > cand[a].0 || (cand[b].0 == cand[a].0 && cand[b].1 < cand[a].1);
                if swap {
                    cand.swap(a, b);
                }
            }
        }
        let top = &cand[..k];
        let weights: Vec<f64> = match cfg.vote {
            Vote::Plurality => vec![1.0; k],
            Vote::Rank => (0..k).map(|r| 1.0 / (cfg.rank_offset + r as f64)).collect(),
            Vote::Softmax => {
                let z: f64 = top.iter().map(|(s, _)| (s / cfg.softmax_temp).exp()).sum();
                top.iter()
                    .map(|(s, _)| (s / cfg.softmax_temp).exp() / z)
                    .collect()
            }
        };
        for ((_, r), w) in top.iter().zip(weights) {
            out[i][spt.labels()[*r]] += w;
        }
    }
    out
}
