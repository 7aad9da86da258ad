//! Seeded synthetic cohorts with a known proficiency matrix and a two-level
//! concept tree.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    ConceptHierarchy, Dataset, IdRegistry, QMatrix, ResponseLog, HIERARCHY_HEADER, QMATRIX_HEADER,
    RESPONSES_HEADER,
};
use crate::error::{Error, Result};
use crate::metrics::doa;
use crate::numerics::Tensor2;

/// Logistic scaling constant of the response link.
const LINK_SCALE: f64 = 1.7;
const DISCRIMINATION_RANGE: (f64, f64) = (0.5, 2.5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_students: usize,
    pub n_exercises: usize,
    pub n_concepts: usize,
    pub n_parents: usize,
    /// Inclusive range.
    pub concepts_per_exercise: (usize, usize),
    /// Inclusive range; each student answers distinct exercises.
    pub logs_per_student: (usize, usize),
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_students: 165,
            n_exercises: 250,
            n_concepts: 74,
            n_parents: 7,
            concepts_per_exercise: (1, 3),
            logs_per_student: (72, 92),
            noise_sd: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_students == 0
            || self.n_exercises == 0
            || self.n_concepts == 0
            || self.n_parents == 0
        {
            return bad("synthetic counts must be at least 1".into());
        }
        if self.n_parents > self.n_concepts {
            return bad(format!(
                "n_parents ({}) exceeds n_concepts ({})",
                self.n_parents, self.n_concepts
            ));
        }
        let (clo, chi) = self.concepts_per_exercise;
        if clo == 0 || clo > chi || chi > self.n_concepts {
            return bad(format!(
                "concepts_per_exercise {clo}..={chi} infeasible with {} concepts",
                self.n_concepts
            ));
        }
        let (llo, lhi) = self.logs_per_student;
        if llo == 0 || llo > lhi || lhi > self.n_exercises {
            return bad(format!(
                "logs_per_student {llo}..={lhi} infeasible with {} exercises",
                self.n_exercises
            ));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!(
                "noise_sd must be finite and >= 0, got {}",
                self.noise_sd
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// N×L.
    pub theta_parent: Tensor2<f64>,
    /// N×K.
    pub theta_child: Tensor2<f64>,
    pub difficulty: Vec<f64>,
    pub discrimination: Vec<f64>,
}

/// `σ(1.7·a·(mean proficiency − b))`.
pub fn response_probability(mean_theta: f64, difficulty: f64, discrimination: f64) -> f64 {
    1.0 / (1.0 + (-LINK_SCALE * discrimination * (mean_theta - difficulty)).exp())
}

pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let (n, m, k, l) = (
        cfg.n_students,
        cfg.n_exercises,
        cfg.n_concepts,
        cfg.n_parents,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let parent_of: Vec<usize> = (0..k).map(|c| c % l).collect();
    let theta_parent = Tensor2::from_fn(n, l, |_, _| rng.random::<f64>());
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let theta_child = Tensor2::from_fn(n, k, |i, c| {
        let base = theta_parent.get(i, parent_of[c]);
        if cfg.noise_sd == 0.0 {
            base
        } else {
            (base + noise.sample(&mut rng)).clamp(0.0, 1.0)
        }
    });

    let mut pairs = Vec::new();
    let mut difficulty = Vec::with_capacity(m);
    let mut discrimination = Vec::with_capacity(m);
    for j in 0..m {
        let count = rng.random_range(cfg.concepts_per_exercise.0..=cfg.concepts_per_exercise.1);
        pairs.extend(sample(&mut rng, k, count).into_iter().map(|c| (c, j)));
        difficulty.push(rng.random::<f64>());
        discrimination.push(rng.random_range(DISCRIMINATION_RANGE.0..DISCRIMINATION_RANGE.1));
    }
    let q = QMatrix::from_pairs(k, m, pairs)?;

    let mut logs = Vec::new();
    for i in 0..n {
        let count = rng.random_range(cfg.logs_per_student.0..=cfg.logs_per_student.1);
        let mut exercises = sample(&mut rng, m, count).into_vec();
        exercises.sort_unstable();
        for j in exercises {
            let concepts = q.concepts_of(j);
            let mean = concepts.iter().map(|&c| theta_child.get(i, c)).sum::<f64>()
                / concepts.len() as f64;
            let p = response_probability(mean, difficulty[j], discrimination[j]);
            let score = u8::from(rng.random::<f64>() < p);
            logs.push(ResponseLog {
                student: i,
                exercise: j,
                score,
            });
        }
    }

    let ids = IdRegistry {
        students: (0..n).map(|i| format!("s{i}")).collect(),
        exercises: (0..m).map(|j| format!("e{j}")).collect(),
        concepts: (0..k).map(|c| format!("c{c}")).collect(),
        parents: (0..l).map(|p| format!("p{p}")).collect(),
    };
    let hierarchy = ConceptHierarchy::new(parent_of, l)?;
    let dataset = Dataset::from_parts(ids, logs, q, Some(hierarchy))?;
    let gt = GroundTruth {
        theta_parent,
        theta_child,
        difficulty,
        discrimination,
    };
    Ok((dataset, gt))
}

/// DOA of the true child proficiencies over the dataset's responses.
pub fn ground_truth_doa(gt: &GroundTruth, dataset: &Dataset) -> Option<f64> {
    ground_truth_doa_on(gt, dataset, &dataset.logs)
}

/// As [`ground_truth_doa`], restricted to a subset of responses.
pub fn ground_truth_doa_on(
    gt: &GroundTruth,
    dataset: &Dataset,
    logs: &[ResponseLog],
) -> Option<f64> {
    doa(&gt.theta_child, logs, &dataset.q, None, 0).mean
}

fn write_rows<const W: usize>(
    path: &Path,
    header: [&str; W],
    rows: impl IntoIterator<Item = [String; W]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(&row).map_err(to_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write `responses.csv`, `q_matrix.csv`, `hierarchy.csv` and
/// `ground_truth.csv` into `dir`.
pub fn write_cohort(dataset: &Dataset, gt: &GroundTruth, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids = &dataset.ids;
    write_rows(
        &dir.join("responses.csv"),
        RESPONSES_HEADER,
        dataset.logs.iter().map(|l| {
            [
                ids.students[l.student].clone(),
                ids.exercises[l.exercise].clone(),
                l.score.to_string(),
            ]
        }),
    )?;
    write_rows(
        &dir.join("q_matrix.csv"),
        QMATRIX_HEADER,
        dataset
            .q
            .pairs()
            .map(|(c, j)| [ids.exercises[j].clone(), ids.concepts[c].clone()]),
    )?;
    if let Some(h) = &dataset.hierarchy {
        write_rows(
            &dir.join("hierarchy.csv"),
            HIERARCHY_HEADER,
            h.parents()
                .iter()
                .enumerate()
                .map(|(c, &p)| [ids.concepts[c].clone(), ids.parents[p].clone()]),
        )?;
    }
    let (n, k) = gt.theta_child.shape();
    write_rows(
        &dir.join("ground_truth.csv"),
        ["student_id", "concept_id", "theta"],
        (0..n).flat_map(|i| {
            (0..k).map(move |c| {
                [
                    ids.students[i].clone(),
                    ids.concepts[c].clone(),
                    gt.theta_child.get(i, c).to_string(),
                ]
            })
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_students: 20,
            n_exercises: 30,
            n_concepts: 8,
            n_parents: 3,
            logs_per_student: (10, 15),
            ..Default::default()
        }
    }

    #[test]
    fn default_shape() {
        let (d, gt) = generate(&SynthConfig::default()).unwrap();
        assert_eq!(
            (
                d.n_students(),
                d.n_exercises(),
                d.n_concepts(),
                d.n_parents()
            ),
            (165, 250, 74, Some(7))
        );
        assert_eq!(gt.theta_child.shape(), (165, 74));
        let per_student = d.logs.len() as f64 / 165.0;
        assert!((72.0..=92.0).contains(&per_student));
    }

    #[test]
    fn noise_free_children_equal_parents() {
        let cfg = SynthConfig {
            noise_sd: 0.0,
            ..small()
        };
        let (d, gt) = generate(&cfg).unwrap();
        let h = d.hierarchy.as_ref().unwrap();
        for i in 0..cfg.n_students {
            for c in 0..cfg.n_concepts {
                assert_eq!(
                    gt.theta_child.get(i, c),
                    gt.theta_parent.get(i, h.parent_of(c))
                );
            }
        }
    }

    #[test]
    fn parents_round_robin_and_bounds() {
        let (d, gt) = generate(&small()).unwrap();
        let h = d.hierarchy.as_ref().unwrap();
        assert_eq!(h.parents(), &[0, 1, 2, 0, 1, 2, 0, 1]);
        assert!(gt
            .theta_child
            .data()
            .iter()
            .all(|t| (0.0..=1.0).contains(t)));
        assert!(gt.discrimination.iter().all(|a| (0.5..2.5).contains(a)));
        assert!(gt.difficulty.iter().all(|b| (0.0..1.0).contains(b)));
        for j in 0..d.n_exercises() {
            assert!((1..=3).contains(&d.q.concepts_of(j).len()));
        }
    }

    #[test]
    fn full_mastery_on_easiest_exercise_bound() {
        assert!(response_probability(1.0, 0.0, 0.5) >= 0.70);
        assert!((response_probability(1.0, 0.0, 0.5) - 0.700567).abs() < 1e-6);
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let (a, ga) = generate(&small()).unwrap();
        let (b, gb) = generate(&small()).unwrap();
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.q, b.q);
        assert_eq!(ga, gb);
        let (c, _) = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.logs, c.logs);
    }

    #[test]
    fn infeasible_configs_rejected() {
        for cfg in [
            SynthConfig {
                concepts_per_exercise: (1, 9),
                ..small()
            },
            SynthConfig {
                n_parents: 9,
                ..small()
            },
            SynthConfig {
                logs_per_student: (10, 31),
                ..small()
            },
            SynthConfig {
                n_students: 0,
                ..small()
            },
            SynthConfig {
                noise_sd: -1.0,
                ..small()
            },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn written_cohort_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let (d, gt) = generate(&small()).unwrap();
        write_cohort(&d, &gt, dir.path()).unwrap();
        let back = Dataset::load(
            &dir.path().join("responses.csv"),
            &dir.path().join("q_matrix.csv"),
            Some(&dir.path().join("hierarchy.csv")),
        )
        .unwrap();
        assert_eq!(back.logs.len(), d.logs.len());
        assert_eq!(back.n_concepts(), d.n_concepts());
        assert_eq!(back.n_parents(), Some(3));
        let gt_text = fs::read_to_string(dir.path().join("ground_truth.csv")).unwrap();
        assert_eq!(gt_text.lines().count(), 1 + 20 * 8);
    }
}
