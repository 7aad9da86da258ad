//! Response logs, Q-matrix, and concept hierarchy: loading, validation,
//! per-student splitting, and summary statistics.
//!
//! All three inputs are headed CSV files. Ids are opaque strings, trimmed,
//! and registered densely in first-seen order:
//!
//! * `responses.csv`: `student_id,exercise_id,score`
//! * `q_matrix.csv`: `exercise_id,concept_id`
//! * `hierarchy.csv`: `child_concept_id,parent_concept_id`

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use indexmap::IndexSet;
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RESPONSES_HEADER: [&str; 3] = ["student_id", "exercise_id", "score"];
pub const QMATRIX_HEADER: [&str; 2] = ["exercise_id", "concept_id"];
pub const HIERARCHY_HEADER: [&str; 2] = ["child_concept_id", "parent_concept_id"];

/// Dense-index registry for the four id spaces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdRegistry {
    pub students: IndexSet<String>,
    pub exercises: IndexSet<String>,
    pub concepts: IndexSet<String>,
    pub parents: IndexSet<String>,
}

impl IdRegistry {
    pub fn student_index(&self, id: &str) -> Option<usize> {
        self.students.get_index_of(id)
    }

    pub fn exercise_index(&self, id: &str) -> Option<usize> {
        self.exercises.get_index_of(id)
    }

    pub fn concept_index(&self, id: &str) -> Option<usize> {
        self.concepts.get_index_of(id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResponseLog {
    pub student: usize,
    pub exercise: usize,
    pub score: u8,
}

/// Binary concept-by-exercise incidence, stored as a sorted concept list per exercise.
#[derive(Clone, Debug, PartialEq)]
pub struct QMatrix {
    n_concepts: usize,
    concepts_of: Vec<Vec<usize>>,
}

impl QMatrix {
    /// Build from `(concept, exercise)` pairs. Duplicates are merged.
    pub fn from_pairs(
        n_concepts: usize,
        n_exercises: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut concepts_of = vec![Vec::new(); n_exercises];
        for (k, j) in pairs {
            if k >= n_concepts || j >= n_exercises {
                return Err(Error::Data(format!(
                    "q-matrix entry ({k}, {j}) outside {n_concepts}x{n_exercises}"
                )));
            }
            concepts_of[j].push(k);
        }
        for list in &mut concepts_of {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self {
            n_concepts,
            concepts_of,
        })
    }

    #[inline]
    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    #[inline]
    pub fn n_exercises(&self) -> usize {
        self.concepts_of.len()
    }

    /// Concepts attached to exercise `j`, ascending.
    #[inline]
    pub fn concepts_of(&self, j: usize) -> &[usize] {
        &self.concepts_of[j]
    }

    #[inline]
    pub fn contains(&self, k: usize, j: usize) -> bool {
        self.concepts_of[j].binary_search(&k).is_ok()
    }

    /// Dense column `q_j` of length K.
    pub fn column(&self, j: usize) -> Vec<f32> {
        let mut col = vec![0.0; self.n_concepts];
        for &k in &self.concepts_of[j] {
            col[k] = 1.0;
        }
        col
    }

    /// All `(concept, exercise)` pairs, exercise-major.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.concepts_of
            .iter()
            .enumerate()
            .flat_map(|(j, ks)| ks.iter().map(move |&k| (k, j)))
    }

    /// Exercises containing each concept.
    pub fn exercises_by_concept(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_concepts];
        for (k, j) in self.pairs() {
            out[k].push(j);
        }
        out
    }
}

/// Two-level concept tree: every child concept has exactly one parent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptHierarchy {
    parent_of: Vec<usize>,
    n_parents: usize,
}

impl ConceptHierarchy {
    pub fn new(parent_of: Vec<usize>, n_parents: usize) -> Result<Self> {
        let mut seen = vec![false; n_parents];
        for (k, &p) in parent_of.iter().enumerate() {
            if p >= n_parents {
                return Err(Error::Data(format!(
                    "concept {k} has parent index {p} outside [0, {n_parents})"
                )));
            }
            seen[p] = true;
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("parent concept {p} has no children")));
        }
        Ok(Self {
            parent_of,
            n_parents,
        })
    }

    #[inline]
    pub fn parent_of(&self, k: usize) -> usize {
        self.parent_of[k]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent_of
    }

    #[inline]
    pub fn n_parents(&self) -> usize {
        self.n_parents
    }

    #[inline]
    pub fn n_children(&self) -> usize {
        self.parent_of.len()
    }

    /// Row-major K×L support mask: `true` where child `k` descends from parent `l`.
    pub fn support_mask(&self) -> Vec<bool> {
        let l = self.n_parents;
        let mut mask = vec![false; self.parent_of.len() * l];
        for (k, &p) in self.parent_of.iter().enumerate() {
            mask[k * l + p] = true;
        }
        mask
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: IdRegistry,
    pub logs: Vec<ResponseLog>,
    pub q: QMatrix,
    pub hierarchy: Option<ConceptHierarchy>,
}

impl Dataset {
    /// Assemble and validate a dataset from already-indexed parts.
    pub fn from_parts(
        ids: IdRegistry,
        logs: Vec<ResponseLog>,
        q: QMatrix,
        hierarchy: Option<ConceptHierarchy>,
    ) -> Result<Self> {
        let d = Self {
            ids,
            logs,
            q,
            hierarchy,
        };
        d.validate()?;
        Ok(d)
    }

    /// Load the canonical CSV triple.
    pub fn load(responses: &Path, q_matrix: &Path, hierarchy: Option<&Path>) -> Result<Self> {
        let mut ids = IdRegistry::default();
        let logs = load_responses(responses, &mut ids)?;
        let q = load_qmatrix(q_matrix, &mut ids)?;
        let hierarchy = hierarchy.map(|p| load_hierarchy(p, &mut ids)).transpose()?;
        Self::from_parts(ids, logs, q, hierarchy)
    }

    pub fn n_students(&self) -> usize {
        self.ids.students.len()
    }

    pub fn n_exercises(&self) -> usize {
        self.ids.exercises.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.q.n_concepts()
    }

    pub fn n_parents(&self) -> Option<usize> {
        self.hierarchy.as_ref().map(ConceptHierarchy::n_parents)
    }

    fn validate(&self) -> Result<()> {
        let (n, m, k) = (self.n_students(), self.n_exercises(), self.n_concepts());
        if n == 0 || m == 0 {
            return Err(Error::Data(
                "dataset has no students or no exercises".into(),
            ));
        }
        if self.q.n_exercises() != m || self.ids.concepts.len() != k {
            return Err(Error::Data(format!(
                "q-matrix is {}x{}, registry has {} concepts and {m} exercises",
                k,
                self.q.n_exercises(),
                self.ids.concepts.len()
            )));
        }
        let mut pairs = HashSet::with_capacity(self.logs.len());
        for log in &self.logs {
            if log.student >= n || log.exercise >= m || log.score > 1 {
                return Err(Error::Data(format!("response log out of range: {log:?}")));
            }
            if !pairs.insert((log.student, log.exercise)) {
                return Err(Error::Data(format!(
                    "duplicate response for student {} on exercise {}",
                    self.ids.students[log.student], self.ids.exercises[log.exercise]
                )));
            }
        }
        for j in 0..m {
            if self.q.concepts_of(j).is_empty() {
                return Err(Error::Data(format!(
                    "exercise without concepts: {}",
                    self.ids.exercises[j]
                )));
            }
        }
        if let Some(h) = &self.hierarchy {
            if h.n_children() != k {
                return Err(Error::Data(format!(
                    "hierarchy covers {} concepts, q-matrix has {k}",
                    h.n_children()
                )));
            }
        }
        Ok(())
    }
}

struct Row {
    line: u64,
    fields: Vec<String>,
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<Row>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_to_io(path, e))?;
    let mut rows = Vec::new();
    let mut seen_header = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if !seen_header {
            let got: Vec<&str> = rec.iter().collect();
            if got != header {
                return Err(parse_err(
                    line,
                    format!(
                        "expected header `{}`, found `{}`",
                        header.join(","),
                        got.join(",")
                    ),
                ));
            }
            seen_header = true;
            continue;
        }
        if rec.len() != header.len() || rec.iter().any(str::is_empty) {
            return Err(parse_err(
                line,
                format!("malformed row (expected {} non-empty fields)", header.len()),
            ));
        }
        rows.push(Row {
            line,
            fields: rec.iter().map(str::to_owned).collect(),
        });
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    Ok(rows)
}

fn csv_to_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

fn parse_score(raw: &str) -> std::result::Result<u8, String> {
    match raw {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => match raw.parse::<f64>() {
            Ok(0.0) => Ok(0),
            Ok(1.0) => Ok(1),
            Ok(_) => Err("score outside {0,1}".to_owned()),
            Err(_) => Err(format!("malformed row (score `{raw}` is not a number)")),
        },
    }
}

/// Read `student_id,exercise_id,score` rows. Duplicate (student, exercise)
/// pairs keep their first occurrence.
pub fn load_responses(path: &Path, ids: &mut IdRegistry) -> Result<Vec<ResponseLog>> {
    let rows = read_rows(path, &RESPONSES_HEADER)?;
    let mut seen = HashSet::with_capacity(rows.len());
    let mut logs = Vec::with_capacity(rows.len());
    let mut dupes = 0usize;
    for row in rows {
        let score = parse_score(&row.fields[2]).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: row.line,
            message,
        })?;
        let student = ids.students.insert_full(row.fields[0].clone()).0;
        let exercise = ids.exercises.insert_full(row.fields[1].clone()).0;
        if !seen.insert((student, exercise)) {
            dupes += 1;
            continue;
        }
        logs.push(ResponseLog {
            student,
            exercise,
            score,
        });
    }
    if dupes > 0 {
        warn!(
            "{}: dropped {dupes} duplicate (student, exercise) responses",
            path.display()
        );
    }
    Ok(logs)
}

/// Read `exercise_id,concept_id` rows. Exercises not yet registered are
/// appended to the registry; every registered exercise must end up with at
/// least one concept.
pub fn load_qmatrix(path: &Path, ids: &mut IdRegistry) -> Result<QMatrix> {
    let rows = read_rows(path, &QMATRIX_HEADER)?;
    let mut seen = HashSet::with_capacity(rows.len());
    let mut pairs = Vec::with_capacity(rows.len());
    let mut dupes = 0usize;
    for row in rows {
        let j = ids.exercises.insert_full(row.fields[0].clone()).0;
        let k = ids.concepts.insert_full(row.fields[1].clone()).0;
        if seen.insert((k, j)) {
            pairs.push((k, j));
        } else {
            dupes += 1;
        }
    }
    if dupes > 0 {
        warn!(
            "{}: dropped {dupes} duplicate q-matrix rows",
            path.display()
        );
    }
    let q = QMatrix::from_pairs(ids.concepts.len(), ids.exercises.len(), pairs)?;
    if let Some(j) = (0..q.n_exercises()).find(|&j| q.concepts_of(j).is_empty()) {
        return Err(Error::Data(format!(
            "exercise without concepts: {}",
            ids.exercises[j]
        )));
    }
    Ok(q)
}

/// Read `child_concept_id,parent_concept_id` rows covering every registered concept.
pub fn load_hierarchy(path: &Path, ids: &mut IdRegistry) -> Result<ConceptHierarchy> {
    let rows = read_rows(path, &HIERARCHY_HEADER)?;
    let mut parent_of: Vec<Option<usize>> = vec![None; ids.concepts.len()];
    let mut unknown = 0usize;
    for row in rows {
        let Some(k) = ids.concept_index(&row.fields[0]) else {
            unknown += 1;
            continue;
        };
        let p = ids.parents.insert_full(row.fields[1].clone()).0;
        match parent_of[k] {
            None => parent_of[k] = Some(p),
            Some(prev) if prev == p => {
                warn!("{}: duplicate row for {}", path.display(), row.fields[0])
            }
            Some(_) => {
                return Err(Error::Data(format!(
                    "child with multiple parents: {}",
                    row.fields[0]
                )))
            }
        }
    }
    if unknown > 0 {
        warn!(
            "{}: ignored {unknown} rows whose child concept is not in the q-matrix",
            path.display()
        );
    }
    let parent_of = parent_of
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            p.ok_or_else(|| {
                Error::Data(format!(
                    "concept missing from hierarchy: {}",
                    ids.concepts[k]
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ConceptHierarchy::new(parent_of, ids.parents.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<ResponseLog>,
    pub valid: Vec<ResponseLog>,
    pub test: Vec<ResponseLog>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            valid: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.valid, self.test];
        if r.iter().any(|&x| !x.is_finite() || x <= 0.0) {
            return Err(Error::Config(format!(
                "split ratios must be positive, got {r:?}"
            )));
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {r:?}"
            )));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` logs; ties favor train, then valid.
    fn apportion(&self, n: usize) -> [usize; 3] {
        let quotas = [self.train, self.valid, self.test].map(|r| r * n as f64);
        let mut counts = quotas.map(|q| q.floor() as usize);
        let mut left = n - counts.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        if counts[0] == 0 {
            let donor = if counts[2] >= counts[1] { 2 } else { 1 };
            counts[donor] -= 1;
            counts[0] += 1;
        }
        counts
    }
}

/// Students with fewer logs than this go entirely to the training set.
pub const MIN_LOGS_TO_SPLIT: usize = 3;

/// Seeded per-student split: each student's logs are shuffled and
/// apportioned to train/valid/test by largest remainder.
pub fn split_dataset(logs: &[ResponseLog], ratios: SplitRatios, seed: u64) -> Result<Split> {
    ratios.validate()?;
    let n_students = logs.iter().map(|l| l.student + 1).max().unwrap_or(0);
    let mut by_student: Vec<Vec<ResponseLog>> = vec![Vec::new(); n_students];
    for &log in logs {
        by_student[log.student].push(log);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::with_capacity(logs.len()),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for mut own in by_student {
        if own.is_empty() {
            continue;
        }
        if own.len() < MIN_LOGS_TO_SPLIT {
            split.train.extend(own);
            continue;
        }
        own.shuffle(&mut rng);
        let [tr, va, _] = ratios.apportion(own.len());
        split.train.extend_from_slice(&own[..tr]);
        split.valid.extend_from_slice(&own[tr..tr + va]);
        split.test.extend_from_slice(&own[tr + va..]);
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub students: usize,
    pub exercises: usize,
    pub concepts: usize,
    pub parents: Option<usize>,
    pub logs: usize,
    pub logs_per_student: f64,
    pub logs_per_exercise: f64,
}

pub fn dataset_stats(d: &Dataset) -> DatasetStats {
    let logs = d.logs.len();
    DatasetStats {
        students: d.n_students(),
        exercises: d.n_exercises(),
        concepts: d.n_concepts(),
        parents: d.n_parents(),
        logs,
        logs_per_student: logs as f64 / d.n_students() as f64,
        logs_per_exercise: logs as f64 / d.n_exercises() as f64,
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parents = self
            .parents
            .map_or_else(|| "-".to_owned(), |p| p.to_string());
        writeln!(f, "students={}", self.students)?;
        writeln!(f, "exercises={}", self.exercises)?;
        writeln!(f, "concepts={}", self.concepts)?;
        writeln!(f, "parent_concepts={parents}")?;
        writeln!(f, "response_logs={}", self.logs)?;
        writeln!(f, "logs_per_student={:.2}", self.logs_per_student)?;
        write!(f, "logs_per_exercise={:.2}", self.logs_per_exercise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn loads_responses_with_dense_indices() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            &dir,
            "r.csv",
            "student_id,exercise_id,score\ns1,e1,1\ns1,e2,0\n\n s2 , e1 ,1\n",
        );
        let mut ids = IdRegistry::default();
        let logs = load_responses(&p, &mut ids).unwrap();
        assert_eq!(logs.len(), 3);
        assert_eq!(ids.students.len(), 2);
        assert_eq!(ids.exercises.len(), 2);
        assert_eq!(
            logs[2],
            ResponseLog {
                student: 1,
                exercise: 0,
                score: 1
            }
        );
    }

    #[test]
    fn rejects_score_outside_binary_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "r.csv", "student_id,exercise_id,score\ns1,e1,2\n");
        let err = load_responses(&p, &mut IdRegistry::default()).unwrap_err();
        assert!(
            err.to_string().ends_with("score outside {0,1} at line 2"),
            "{err}"
        );
    }

    #[test]
    fn rejects_malformed_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            &dir,
            "r.csv",
            "student_id,exercise_id,score\ns1,e1,1\ns2,e1\n",
        );
        let err = load_responses(&p, &mut IdRegistry::default()).unwrap_err();
        assert!(err.to_string().contains("malformed row"));
        assert!(err.to_string().ends_with("line 3"), "{err}");

        let p = write_tmp(&dir, "e.csv", "");
        let err = load_responses(&p, &mut IdRegistry::default()).unwrap_err();
        assert!(err.to_string().contains("empty file"));

        let p = write_tmp(&dir, "h.csv", "student,exercise,score\n");
        assert!(load_responses(&p, &mut IdRegistry::default()).is_err());
    }

    #[test]
    fn duplicate_responses_keep_first() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            &dir,
            "r.csv",
            "student_id,exercise_id,score\ns1,e1,1\ns1,e1,0\n",
        );
        let logs = load_responses(&p, &mut IdRegistry::default()).unwrap();
        assert_eq!(
            logs,
            vec![ResponseLog {
                student: 0,
                exercise: 0,
                score: 1
            }]
        );
    }

    #[test]
    fn qmatrix_columns_and_missing_exercise() {
        let dir = tempfile::tempdir().unwrap();
        let mut ids = IdRegistry::default();
        ids.exercises.insert("e1".into());
        ids.exercises.insert("e2".into());
        let p = write_tmp(
            &dir,
            "q.csv",
            "exercise_id,concept_id\ne1,c1\ne1,c2\ne2,c2\ne2,c2\n",
        );
        let q = load_qmatrix(&p, &mut ids).unwrap();
        assert_eq!(q.n_concepts(), 2);
        assert_eq!(q.column(0), vec![1.0, 1.0]);
        assert_eq!(q.column(1), vec![0.0, 1.0]);

        ids.exercises.insert("e3".into());
        let err = load_qmatrix(&p, &mut ids).unwrap_err();
        assert_eq!(err.to_string(), "exercise without concepts: e3");
    }

    #[test]
    fn hierarchy_parent_map_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut ids = IdRegistry::default();
        for c in ["c1", "c2", "c3"] {
            ids.concepts.insert(c.into());
        }
        let p = write_tmp(
            &dir,
            "h.csv",
            "child_concept_id,parent_concept_id\nc1,p1\nc2,p1\nc3,p2\n",
        );
        let h = load_hierarchy(&p, &mut ids.clone()).unwrap();
        assert_eq!(h.n_parents(), 2);
        assert_eq!(h.parents(), &[0, 0, 1]);

        let p = write_tmp(
            &dir,
            "h2.csv",
            "child_concept_id,parent_concept_id\nc1,p1\nc1,p2\n",
        );
        let err = load_hierarchy(&p, &mut ids.clone()).unwrap_err();
        assert_eq!(err.to_string(), "child with multiple parents: c1");

        let p = write_tmp(
            &dir,
            "h3.csv",
            "child_concept_id,parent_concept_id\nc1,p1\nc2,p1\n",
        );
        let err = load_hierarchy(&p, &mut ids.clone()).unwrap_err();
        assert_eq!(err.to_string(), "concept missing from hierarchy: c3");
    }

    fn logs_for(student: usize, n: usize) -> Vec<ResponseLog> {
        (0..n)
            .map(|j| ResponseLog {
                student,
                exercise: j,
                score: (j % 2) as u8,
            })
            .collect()
    }

    #[test]
    fn split_largest_remainder() {
        let r = SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        };
        let s = split_dataset(&logs_for(0, 10), r, 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_small_student_goes_to_train() {
        let s = split_dataset(&logs_for(0, 2), SplitRatios::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (2, 0, 0));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let mut logs = logs_for(0, 17);
        logs.extend(logs_for(1, 9));
        let a = split_dataset(&logs, SplitRatios::default(), 42).unwrap();
        let b = split_dataset(&logs, SplitRatios::default(), 42).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = split_dataset(&logs, SplitRatios::default(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let r = SplitRatios {
            train: 0.7,
            valid: 0.2,
            test: 0.2,
        };
        assert!(split_dataset(&logs_for(0, 3), r, 0).is_err());
        let r = SplitRatios {
            train: 1.0,
            valid: 0.0,
            test: 0.0,
        };
        assert!(split_dataset(&logs_for(0, 3), r, 0).is_err());
    }

    fn tiny_dataset(hierarchy: bool) -> Dataset {
        let mut ids = IdRegistry::default();
        for s in ["s1", "s2"] {
            ids.students.insert(s.into());
        }
        for e in ["e1", "e2"] {
            ids.exercises.insert(e.into());
        }
        ids.concepts.insert("c1".into());
        let logs = vec![
            ResponseLog {
                student: 0,
                exercise: 0,
                score: 1,
            },
            ResponseLog {
                student: 0,
                exercise: 1,
                score: 0,
            },
            ResponseLog {
                student: 1,
                exercise: 0,
                score: 1,
            },
        ];
        let q = QMatrix::from_pairs(1, 2, [(0, 0), (0, 1)]).unwrap();
        let h = hierarchy.then(|| {
            ids.parents.insert("p1".into());
            ConceptHierarchy::new(vec![0], 1).unwrap()
        });
        Dataset::from_parts(ids, logs, q, h).unwrap()
    }

    #[test]
    fn stats_small_dataset() {
        let st = dataset_stats(&tiny_dataset(false));
        assert_eq!(format!("{:.2}", st.logs_per_student), "1.50");
        assert_eq!(st.parents, None);
        assert!(st.to_string().contains("parent_concepts=-"));
        assert_eq!(dataset_stats(&tiny_dataset(true)).parents, Some(1));
    }

    #[test]
    fn stats_ratios_for_published_shapes() {
        // Averages are derived from the reported counts only.
        let assist = DatasetStats {
            students: 4163,
            exercises: 17746,
            concepts: 123,
            parents: None,
            logs: 324_572,
            logs_per_student: 324_572.0 / 4163.0,
            logs_per_exercise: 324_572.0 / 17746.0,
        };
        let text = assist.to_string();
        assert!(text.contains("logs_per_student=77.97"));
        assert!(text.contains("logs_per_exercise=18.29"));
        assert_eq!(format!("{:.2}", 13_574.0 / 165.0), "82.27");
        assert_eq!(format!("{:.2}", 13_574.0 / 250.0), "54.30");
    }
}
