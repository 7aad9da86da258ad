//! Brute-force reference implementations and small random instances shared
//! by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srncd::dataset::{QMatrix, ResponseLog};
use srncd::numerics::Tensor2;

/// All positive/negative pairs, ties counted as half.
pub fn auc_oracle(pairs: &[(u8, f64)]) -> Option<f64> {
    let (mut concordant, mut tied, mut pos, mut neg) = (0u64, 0u64, 0u64, 0u64);
    for &(yp, sp) in pairs {
        if yp == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
        if yp != 1 {
            continue;
        }
        for &(yn, sn) in pairs {
            if yn != 0 {
                continue;
            }
            if sp > sn {
                concordant += 1;
            } else if sp == sn {
                tied += 1;
            }
        }
    }
    if pos == 0 || neg == 0 {
        return None;
    }
    Some((concordant as f64 + 0.5 * tied as f64) / (pos as f64 * neg as f64))
}

/// Per-concept DOA by looping over every student pair and every exercise.
pub fn doa_oracle(
    h: &Tensor2<f64>,
    logs: &[ResponseLog],
    q: &QMatrix,
) -> (Option<f64>, Vec<Option<f64>>) {
    let (n, k_total) = h.shape();
    let m = q.n_exercises();
    let mut y: Vec<Vec<Option<u8>>> = vec![vec![None; m]; n];
    for l in logs {
        y[l.student][l.exercise] = Some(l.score);
    }
    let mut per = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let (mut sum, mut z) = (0.0f64, 0u64);
        for i in 0..n {
            for j in 0..n {
                if h.get(i, k) <= h.get(j, k) {
                    continue;
                }
                let (mut num, mut den) = (0u32, 0u32);
                for (l, (&yi, &yj)) in y[i].iter().zip(&y[j]).enumerate() {
                    if !q.contains(k, l) {
                        continue;
                    }
                    if let (Some(a), Some(b)) = (yi, yj) {
                        if a != b {
                            den += 1;
                        }
                        if a > b {
                            num += 1;
                        }
                    }
                }
                if den > 0 {
                    sum += num as f64 / den as f64;
                    z += 1;
                }
            }
        }
        per.push((z > 0).then(|| sum / z as f64));
    }
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (mean, per)
}

pub struct Instance {
    pub h: Tensor2<f64>,
    pub logs: Vec<ResponseLog>,
    pub q: QMatrix,
}

/// Random instance with N ≤ 30, M ≤ 20, K ≤ 5. Proficiencies are drawn from
/// a small grid so ties occur.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=30);
    let m = rng.random_range(1..=20);
    let k = rng.random_range(1..=5);
    let mut pairs = Vec::new();
    for j in 0..m {
        pairs.push((rng.random_range(0..k), j));
        for c in 0..k {
            if rng.random_bool(0.3) {
                pairs.push((c, j));
            }
        }
    }
    let q = QMatrix::from_pairs(k, m, pairs).unwrap();
    let mut logs = Vec::new();
    for i in 0..n {
        for j in 0..m {
            if rng.random_bool(0.6) {
                logs.push(ResponseLog {
                    student: i,
                    exercise: j,
                    score: u8::from(rng.random_bool(0.5)),
                });
            }
        }
    }
    let h = Tensor2::from_fn(n, k, |_, _| f64::from(rng.random_range(0..8u8)) / 8.0);
    Instance { h, logs, q }
}

/// Random labelled scores with frequent ties.
pub fn random_scores(seed: u64) -> Vec<(u8, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=60);
    (0..n)
        .map(|_| {
            (
                u8::from(rng.random_bool(0.5)),
                f64::from(rng.random_range(0..10u8)) / 10.0,
            )
        })
        .collect()
}
