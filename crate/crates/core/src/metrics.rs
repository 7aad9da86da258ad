//! Classification metrics, degree of agreement, and the proficiency histogram.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{QMatrix, ResponseLog};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor2};

/// Predictions at or above this are read as "correct".
pub const ACC_THRESHOLD: f64 = 0.5;

/// Default cap on student pairs evaluated per concept in [`doa`].
pub const DEFAULT_DOA_SAMPLE_CAP: u64 = 1_000_000;

/// Fraction of `(label, score)` pairs where `score >= 0.5` agrees with the label.
pub fn accuracy(pairs: &[(u8, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("accuracy of an empty prediction set".into()));
    }
    let hits = pairs
        .iter()
        .filter(|&&(y, p)| (p >= ACC_THRESHOLD) == (y == 1))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Area under the ROC curve, Mann-Whitney form with ties counted as half.
///
/// `None` when the labels are all one class.
pub fn auc(pairs: &[(u8, f64)]) -> Option<f64> {
    let mut sorted: Vec<(f64, u8)> = pairs.iter().map(|&(y, s)| (s, y)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut concordant, mut tied) = (0u64, 0u64);
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        concordant += pos * neg_below;
        tied += pos * neg;
        neg_below += neg;
        i = j;
    }
    let n_pos = pairs.iter().filter(|p| p.0 == 1).count() as u64;
    let n_neg = pairs.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    Some((concordant as f64 + 0.5 * tied as f64) / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoaResult {
    /// Mean over concepts whose DOA is defined.
    pub mean: Option<f64>,
    pub per_concept: Vec<Option<f64>>,
}

/// Responses of one student on the exercises of one concept, sorted by exercise.
type Answers = Vec<(usize, u8)>;

/// `(agreeing, disagreeing)` counts over the shared exercises of two students.
fn pair_counts(hi: &Answers, lo: &Answers) -> (u32, u32) {
    let (mut a, mut b) = (0, 0);
    let (mut agree, mut differ) = (0u32, 0u32);
    while a < hi.len() && b < lo.len() {
        match hi[a].0.cmp(&lo[b].0) {
            std::cmp::Ordering::Less => a += 1,
            std::cmp::Ordering::Greater => b += 1,
            std::cmp::Ordering::Equal => {
                let (y_hi, y_lo) = (hi[a].1, lo[b].1);
                if y_hi != y_lo {
                    differ += 1;
                    if y_hi > y_lo {
                        agree += 1;
                    }
                }
                a += 1;
                b += 1;
            }
        }
    }
    (agree, differ)
}

/// Degree of agreement between a proficiency matrix and observed responses.
///
/// For concept `k`, every ordered student pair `(i, j)` with `h[i,k] > h[j,k]`
/// contributes the fraction of their disagreeing shared responses on
/// concept-`k` exercises where `i` is correct and `j` is not. Pairs without
/// disagreeing shared responses are left out of both the sum and the
/// normalizer. A concept with no contributing pair is undefined.
///
/// When the number of candidate pairs for a concept exceeds `sample_cap`,
/// `sample_cap` unordered pairs are drawn uniformly (with replacement)
/// using `seed`.
pub fn doa<T: Real>(
    h: &Tensor2<T>,
    logs: &[ResponseLog],
    q: &QMatrix,
    sample_cap: Option<u64>,
    seed: u64,
) -> DoaResult {
    let k_total = q.n_concepts();
    assert_eq!(
        h.cols(),
        k_total,
        "proficiency matrix has {} concepts, q-matrix {k_total}",
        h.cols()
    );

    // (concept, student, exercise, y), grouped by concept then student.
    let mut entries: Vec<(usize, usize, usize, u8)> = Vec::new();
    for log in logs {
        for &k in q.concepts_of(log.exercise) {
            entries.push((k, log.student, log.exercise, log.score));
        }
    }
    entries.sort_unstable();
    let mut by_concept: Vec<Vec<(usize, Answers)>> = vec![Vec::new(); k_total];
    for (k, s, e, y) in entries {
        let list = &mut by_concept[k];
        match list.last_mut() {
            Some((last, answers)) if *last == s => answers.push((e, y)),
            _ => list.push((s, vec![(e, y)])),
        }
    }

    let per_concept: Vec<Option<f64>> = by_concept
        .par_iter()
        .enumerate()
        .map(|(k, students)| {
            let n = students.len() as u64;
            let pairs = n * n.saturating_sub(1) / 2;
            let (mut sum, mut z) = (0.0f64, 0u64);
            let mut visit = |a: usize, b: usize| {
                let (ha, hb) = (h.get(students[a].0, k), h.get(students[b].0, k));
                if ha > hb {
                    let (agree, differ) = pair_counts(&students[a].1, &students[b].1);
                    if differ > 0 {
                        sum += agree as f64 / differ as f64;
                        z += 1;
                    }
                }
            };
            match sample_cap {
                Some(cap) if pairs > cap => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(k as u64);
                    let n = n as usize;
                    for _ in 0..cap {
                        let a = rng.random_range(0..n);
                        let mut b = rng.random_range(0..n - 1);
                        if b >= a {
                            b += 1;
                        }
                        visit(a, b);
                        visit(b, a);
                    }
                }
                _ => {
                    for a in 0..students.len() {
                        for b in 0..students.len() {
                            visit(a, b);
                        }
                    }
                }
            }
            (z > 0).then(|| sum / z as f64)
        })
        .collect();

    let defined: Vec<f64> = per_concept.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    DoaResult { mean, per_concept }
}

/// Ten equal-width bins over [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProficiencyHistogram {
    pub bin_edges: [f64; 11],
    pub counts: [u64; 10],
}

impl ProficiencyHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `bin_low,bin_high,count` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for b in 0..10 {
            let _ = writeln!(
                out,
                "{:.1},{:.1},{}",
                self.bin_edges[b],
                self.bin_edges[b + 1],
                self.counts[b]
            );
        }
        out
    }
}

/// Histogram of every entry of an N×K proficiency matrix. A value equal to
/// an edge falls in the bin that starts there; 1.0 falls in the last bin.
pub fn histogram<T: Real>(h: &Tensor2<T>) -> ProficiencyHistogram {
    let bin_edges: [f64; 11] = std::array::from_fn(|b| b as f64 / 10.0);
    let mut counts = [0u64; 10];
    for &v in h.data() {
        let v = v.wide();
        let bin = bin_edges[1..10].iter().take_while(|&&e| e <= v).count();
        counts[bin] += 1;
    }
    ProficiencyHistogram { bin_edges, counts }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_responses: usize,
    pub acc: f64,
    pub auc: Option<f64>,
    pub doa: Option<f64>,
    pub per_concept_doa: Vec<Option<f64>>,
    pub test_loss: f64,
    /// Evaluated exercises that never occur in the training logs.
    pub cold_exercise_count: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// Flat `key=value` text.
    pub fn to_kv(&self) -> String {
        let defined = self.per_concept_doa.iter().flatten().count();
        format!(
            "n_responses={}\nacc={:.6}\nauc={}\ndoa={}\ndoa_defined_concepts={}\ntest_loss={:.6}\ncold_exercise_count={}\n",
            self.n_responses,
            self.acc,
            opt(self.auc),
            opt(self.doa),
            defined,
            self.test_loss,
            self.cold_exercise_count
        )
    }

    /// `concept_id,doa` rows; undefined concepts are written as `NA`.
    pub fn per_concept_csv(&self, concept_ids: &[String]) -> String {
        let mut out = String::from("concept_id,doa\n");
        for (id, v) in concept_ids.iter().zip(&self.per_concept_doa) {
            let _ = writeln!(out, "{id},{}", opt(*v));
        }
        out
    }
}

/// Clamped binary cross-entropy of a single prediction.
pub fn bce_loss(y: u8, y_hat: f64) -> f64 {
    let p = y_hat.clamp(1e-7, 1.0 - 1e-7);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}
