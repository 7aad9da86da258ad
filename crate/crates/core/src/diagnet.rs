//! The neural diagnosis model family.
//!
//! A student is represented by a proficiency vector `h_i` over the K
//! knowledge concepts, built one of three ways:
//!
//! * from parent-concept proficiency through a sparse parent-child map,
//!   `h_p = σ(G x_p[i] + b_p)` (PK-NCD),
//! * from a dense student embedding, `h_e = σ(F x_e[i] + b_e)` (EMB-NCD),
//! * or their mean (SR-NCD).
//!
//! The two reference variants keep a direct N×K proficiency table
//! (`NCD_BASELINE`), optionally with a linear head (`MIRT_DEGENERATE`).
//!
//! The prediction head is shared by all variants: per-exercise
//! discrimination `α_j = σ(x_a[j])` and difficulty `β_j = σ(x_b[j])` form the
//! interaction `z = q_j ∘ α_j ∘ (h_i − β_j)`, which feeds an MLP whose weights
//! are kept non-negative. Together with the non-negative `G`, this makes the
//! predicted probability non-decreasing in every entry of `h_i` on the
//! exercise's concepts.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ConceptHierarchy, QMatrix, ResponseLog};
use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid_scalar, Constraint, ParamTensor, Real, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    EmbNcd,
    PkNcd,
    SrNcd,
    NcdBaseline,
    MirtDegenerate,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::EmbNcd,
        Variant::PkNcd,
        Variant::SrNcd,
        Variant::NcdBaseline,
        Variant::MirtDegenerate,
    ];

    pub fn needs_hierarchy(self) -> bool {
        matches!(self, Variant::PkNcd | Variant::SrNcd)
    }

    fn uses_parent_path(self) -> bool {
        matches!(self, Variant::PkNcd | Variant::SrNcd)
    }

    fn uses_embedding_path(self) -> bool {
        matches!(self, Variant::EmbNcd | Variant::SrNcd)
    }

    fn uses_direct_table(self) -> bool {
        matches!(self, Variant::NcdBaseline | Variant::MirtDegenerate)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::EmbNcd => "EMB_NCD",
            Variant::PkNcd => "PK_NCD",
            Variant::SrNcd => "SR_NCD",
            Variant::NcdBaseline => "NCD_BASELINE",
            Variant::MirtDegenerate => "MIRT_DEGENERATE",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of EMB_NCD, PK_NCD, SR_NCD, NCD_BASELINE, MIRT_DEGENERATE)"
                ))
            })
    }
}

/// Orientation of the ability/difficulty gap in the interaction vector.
///
/// `HMinusBeta` makes the prediction increase with proficiency under
/// non-negative head weights. `BetaMinusH` reproduces the opposite
/// orientation for comparison runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionSign {
    #[default]
    HMinusBeta,
    BetaMinusH,
}

impl InteractionSign {
    #[inline]
    fn factor<T: Real>(self) -> T {
        match self {
            InteractionSign::HMinusBeta => T::one(),
            InteractionSign::BetaMinusH => -T::one(),
        }
    }
}

impl FromStr for InteractionSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "h_minus_beta" => Ok(Self::HMinusBeta),
            "beta_minus_h" => Ok(Self::BetaMinusH),
            other => Err(Error::Config(format!(
                "unknown interaction sign `{other}` (expected h_minus_beta or beta_minus_h)"
            ))),
        }
    }
}

/// Default student-embedding width: `max(1, floor(K / 4))`.
pub fn default_emb_dim(n_concepts: usize) -> usize {
    (n_concepts / 4).max(1)
}

/// Everything needed to allocate a parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub variant: Variant,
    pub n_students: usize,
    pub n_exercises: usize,
    pub n_concepts: usize,
    pub emb_dim: usize,
    /// Hidden widths of the head; empty means a single linear layer.
    pub hidden: Vec<usize>,
    pub sign: InteractionSign,
    /// Parent index of each concept, when a hierarchy is available.
    pub parent_of: Option<Vec<usize>>,
    pub n_parents: usize,
}

impl Architecture {
    pub fn new(
        variant: Variant,
        n_students: usize,
        n_exercises: usize,
        n_concepts: usize,
        hierarchy: Option<&ConceptHierarchy>,
    ) -> Result<Self> {
        if variant.needs_hierarchy() && hierarchy.is_none() {
            return Err(Error::Config(format!(
                "variant {variant} requires a concept hierarchy (hierarchy file)"
            )));
        }
        Ok(Self {
            variant,
            n_students,
            n_exercises,
            n_concepts,
            emb_dim: default_emb_dim(n_concepts),
            hidden: vec![512, 256],
            sign: InteractionSign::default(),
            parent_of: hierarchy.map(|h| h.parents().to_vec()),
            n_parents: hierarchy.map_or(0, ConceptHierarchy::n_parents),
        })
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_emb_dim(mut self, d: usize) -> Self {
        self.emb_dim = d;
        self
    }

    pub fn with_sign(mut self, sign: InteractionSign) -> Self {
        self.sign = sign;
        self
    }

    /// Hidden widths actually used by the head for this variant.
    pub fn head_hidden(&self) -> &[usize] {
        if self.variant == Variant::MirtDegenerate {
            &[]
        } else {
            &self.hidden
        }
    }

    fn support_mask(&self) -> Option<Vec<bool>> {
        let parent_of = self.parent_of.as_ref()?;
        let l = self.n_parents;
        let mut mask = vec![false; parent_of.len() * l];
        for (k, &p) in parent_of.iter().enumerate() {
            mask[k * l + p] = true;
        }
        Some(mask)
    }
}

#[derive(Clone, Debug)]
pub struct StudentParams<T: Real = f32> {
    pub x_direct: Option<ParamTensor<T>>,
    pub x_p: Option<ParamTensor<T>>,
    pub x_e: Option<ParamTensor<T>>,
    pub b_p: Option<ParamTensor<T>>,
    pub b_e: Option<ParamTensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ConceptProjection<T: Real = f32> {
    /// K×L parent-child map; non-negative on the hierarchy support, zero elsewhere.
    pub g: Option<ParamTensor<T>>,
    /// K×D embedding projection.
    pub f: Option<ParamTensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ExerciseParams<T: Real = f32> {
    /// M×K discrimination logits.
    pub x_a: ParamTensor<T>,
    /// M×K difficulty logits.
    pub x_b: ParamTensor<T>,
}

#[derive(Clone, Debug)]
pub struct DenseLayer<T: Real = f32> {
    /// out×in, non-negative.
    pub w: ParamTensor<T>,
    /// out×1.
    pub b: ParamTensor<T>,
}

#[derive(Clone, Debug)]
pub struct MlpParams<T: Real = f32> {
    pub layers: Vec<DenseLayer<T>>,
}

#[derive(Clone, Debug)]
pub struct ModelParams<T: Real = f32> {
    pub arch: Architecture,
    pub student: StudentParams<T>,
    pub projection: ConceptProjection<T>,
    pub exercise: ExerciseParams<T>,
    pub mlp: MlpParams<T>,
}

fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor2<f32> {
    Tensor2::from_fn(rows, cols, |_, _| {
        if hi > lo {
            rng.random_range(lo..hi) as f32
        } else {
            lo as f32
        }
    })
}

impl ModelParams<f32> {
    /// Seeded initialization.
    ///
    /// Unconstrained weight tables draw from `U(-a, a)` with
    /// `a = sqrt(6 / (fan_in + fan_out))`, non-negative weights from
    /// `U(0, a)`, student vectors `x_p`/`x_e` from `U(-1, 1)`. Biases start at
    /// 0, except in head layers after the first, where each bias is
    /// `-0.5 * sum(w_row)` so the initial prediction sits near 0.5.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let v = arch.variant;
        if v.needs_hierarchy() && arch.parent_of.is_none() {
            return Err(Error::Config(format!(
                "variant {v} requires a concept hierarchy"
            )));
        }
        if arch.n_concepts == 0 || arch.emb_dim == 0 || arch.hidden.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m, k, d, l) = (
            arch.n_students,
            arch.n_exercises,
            arch.n_concepts,
            arch.emb_dim,
            arch.n_parents,
        );
        let free = |t: Tensor2<f32>| ParamTensor::new(t, Constraint::Free);

        let x_direct = v.uses_direct_table().then(|| {
            let a = xavier_bound(k, n);
            free(uniform(n, k, -a, a, &mut rng))
        });
        let x_p = v
            .uses_parent_path()
            .then(|| free(uniform(n, l, -1.0, 1.0, &mut rng)));
        let x_e = v
            .uses_embedding_path()
            .then(|| free(uniform(n, d, -1.0, 1.0, &mut rng)));
        let g = if v.uses_parent_path() {
            let a = xavier_bound(l, k);
            let mask = arch.support_mask().expect("hierarchy checked above");
            Some(ParamTensor::new(
                uniform(k, l, 0.0, a, &mut rng),
                Constraint::Support(mask),
            ))
        } else {
            None
        };
        let f = v.uses_embedding_path().then(|| {
            let a = xavier_bound(d, k);
            free(uniform(k, d, -a, a, &mut rng))
        });
        let b_p = v.uses_parent_path().then(|| free(Tensor2::zeros(k, 1)));
        let b_e = v.uses_embedding_path().then(|| free(Tensor2::zeros(k, 1)));

        let a = xavier_bound(k, m);
        let x_a = free(uniform(m, k, -a, a, &mut rng));
        let x_b = free(uniform(m, k, -a, a, &mut rng));

        let mut widths = vec![k];
        widths.extend_from_slice(arch.head_hidden());
        widths.push(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(li, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = xavier_bound(fan_in, fan_out);
                let weights = uniform(fan_out, fan_in, 0.0, bound, &mut rng);
                // Layers fed by sigmoid units see inputs near 0.5; offset the
                // bias so each unit starts centred instead of saturated.
                let bias = if li == 0 {
                    Tensor2::zeros(fan_out, 1)
                } else {
                    Tensor2::from_fn(fan_out, 1, |o, _| {
                        (-0.5 * weights.row(o).iter().map(|&x| f64::from(x)).sum::<f64>()) as f32
                    })
                };
                DenseLayer {
                    w: ParamTensor::new(weights, Constraint::NonNeg),
                    b: free(bias),
                }
            })
            .collect();

        Ok(Self {
            arch: arch.clone(),
            student: StudentParams {
                x_direct,
                x_p,
                x_e,
                b_p,
                b_e,
            },
            projection: ConceptProjection { g, f },
            exercise: ExerciseParams { x_a, x_b },
            mlp: MlpParams { layers },
        })
    }
}

impl<T: Real> ModelParams<T> {
    /// Parameter groups in canonical order, with their names.
    ///
    /// The order is: `x_direct, x_p, x_e, g, f, b_p, b_e, x_a, x_b`, then
    /// `mlp.<i>.w, mlp.<i>.b` per layer; absent groups are skipped.
    pub fn named_groups(&self) -> Vec<(String, &ParamTensor<T>)> {
        let s = &self.student;
        let c = &self.projection;
        let mut out: Vec<(String, &ParamTensor<T>)> = [
            ("x_direct", s.x_direct.as_ref()),
            ("x_p", s.x_p.as_ref()),
            ("x_e", s.x_e.as_ref()),
            ("g", c.g.as_ref()),
            ("f", c.f.as_ref()),
            ("b_p", s.b_p.as_ref()),
            ("b_e", s.b_e.as_ref()),
            ("x_a", Some(&self.exercise.x_a)),
            ("x_b", Some(&self.exercise.x_b)),
        ]
        .into_iter()
        .filter_map(|(n, p)| p.map(|p| (n.to_owned(), p)))
        .collect();
        for (i, layer) in self.mlp.layers.iter().enumerate() {
            out.push((format!("mlp.{i}.w"), &layer.w));
            out.push((format!("mlp.{i}.b"), &layer.b));
        }
        out
    }

    /// Mutable groups in the same order as [`named_groups`](Self::named_groups).
    pub fn groups_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let s = &mut self.student;
        let c = &mut self.projection;
        let mut out: Vec<&mut ParamTensor<T>> = [
            s.x_direct.as_mut(),
            s.x_p.as_mut(),
            s.x_e.as_mut(),
            c.g.as_mut(),
            c.f.as_mut(),
            s.b_p.as_mut(),
            s.b_e.as_mut(),
        ]
        .into_iter()
        .flatten()
        .collect();
        out.push(&mut self.exercise.x_a);
        out.push(&mut self.exercise.x_b);
        for layer in &mut self.mlp.layers {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.groups_mut() {
            p.zero_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let c = |p: &Option<ParamTensor<T>>| p.as_ref().map(ParamTensor::cast);
        ModelParams {
            arch: self.arch.clone(),
            student: StudentParams {
                x_direct: c(&self.student.x_direct),
                x_p: c(&self.student.x_p),
                x_e: c(&self.student.x_e),
                b_p: c(&self.student.b_p),
                b_e: c(&self.student.b_e),
            },
            projection: ConceptProjection {
                g: c(&self.projection.g),
                f: c(&self.projection.f),
            },
            exercise: ExerciseParams {
                x_a: self.exercise.x_a.cast(),
                x_b: self.exercise.x_b.cast(),
            },
            mlp: MlpParams {
                layers: self
                    .mlp
                    .layers
                    .iter()
                    .map(|l| DenseLayer {
                        w: l.w.cast(),
                        b: l.b.cast(),
                    })
                    .collect(),
            },
        }
    }

    /// Check that these parameters fit a dataset's dimensions.
    pub fn check_dims(
        &self,
        n_students: usize,
        n_exercises: usize,
        n_concepts: usize,
    ) -> Result<()> {
        let a = &self.arch;
        for (what, ours, theirs) in [
            ("students", a.n_students, n_students),
            ("exercises", a.n_exercises, n_exercises),
            ("concepts", a.n_concepts, n_concepts),
        ] {
            if ours != theirs {
                return Err(Error::Shape(format!(
                    "model has {ours} {what}, dataset has {theirs}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Single-student / single-exercise operations
// ---------------------------------------------------------------------------

fn require<'a, T: Real>(p: &'a Option<ParamTensor<T>>, what: &str) -> Result<&'a ParamTensor<T>> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("model has no {what} parameters for this variant")))
}

/// `out = σ(W x + b)` for a row slice `x`.
fn sigmoid_affine_into<T: Real>(w: &Tensor2<T>, x: &[T], b: &Tensor2<T>, out: &mut [T]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = sigmoid_scalar(T::of(dot(w.row(r), x) + b.get(r, 0).wide()));
    }
}

/// Child-concept proficiency from parent proficiency: `σ(G x_p[i] + b_p)`.
pub fn parent_proficiency<T: Real>(
    i: usize,
    sp: &StudentParams<T>,
    cp: &ConceptProjection<T>,
) -> Result<Tensor2<T>> {
    let (x_p, g, b_p) = (
        require(&sp.x_p, "parent-proficiency")?,
        require(&cp.g, "parent-child map")?,
        require(&sp.b_p, "parent bias")?,
    );
    let mut out = vec![T::zero(); g.value.rows()];
    sigmoid_affine_into(&g.value, x_p.value.row(i), &b_p.value, &mut out);
    Ok(Tensor2::column(&out))
}

/// Proficiency from the student embedding: `σ(F x_e[i] + b_e)`.
pub fn embedding_proficiency<T: Real>(
    i: usize,
    sp: &StudentParams<T>,
    cp: &ConceptProjection<T>,
) -> Result<Tensor2<T>> {
    let (x_e, f, b_e) = (
        require(&sp.x_e, "student-embedding")?,
        require(&cp.f, "embedding projection")?,
        require(&sp.b_e, "embedding bias")?,
    );
    let mut out = vec![T::zero(); f.value.rows()];
    sigmoid_affine_into(&f.value, x_e.value.row(i), &b_e.value, &mut out);
    Ok(Tensor2::column(&out))
}

/// Elementwise mean of the two proficiency estimates.
pub fn fuse_proficiency<T: Real>(h_p: &Tensor2<T>, h_e: &Tensor2<T>) -> Tensor2<T> {
    assert_eq!(h_p.shape(), h_e.shape(), "fuse_proficiency shape mismatch");
    let half = T::of(0.5);
    Tensor2::new(
        h_p.rows(),
        h_p.cols(),
        h_p.data()
            .iter()
            .zip(h_e.data())
            .map(|(&a, &b)| (a + b) * half)
            .collect(),
    )
}

/// Proficiency vector `h_i` (K×1) under the given variant.
pub fn student_proficiency<T: Real>(
    i: usize,
    variant: Variant,
    sp: &StudentParams<T>,
    cp: &ConceptProjection<T>,
) -> Result<Tensor2<T>> {
    match variant {
        Variant::EmbNcd => embedding_proficiency(i, sp, cp),
        Variant::PkNcd => parent_proficiency(i, sp, cp),
        Variant::SrNcd => Ok(fuse_proficiency(
            &parent_proficiency(i, sp, cp)?,
            &embedding_proficiency(i, sp, cp)?,
        )),
        Variant::NcdBaseline | Variant::MirtDegenerate => {
            let x = require(&sp.x_direct, "direct proficiency")?;
            Ok(Tensor2::column(x.value.row(i)).map(sigmoid_scalar))
        }
    }
}

/// `z = q_j ∘ α_j ∘ (h − β_j)` (or `(β_j − h)` under the alternate sign).
pub fn interaction_vector<T: Real>(
    j: usize,
    h: &Tensor2<T>,
    ep: &ExerciseParams<T>,
    q: &QMatrix,
    sign: InteractionSign,
) -> Tensor2<T> {
    let s = sign.factor::<T>();
    let mut z = Tensor2::zeros(h.rows(), 1);
    for &k in q.concepts_of(j) {
        let alpha = sigmoid_scalar(ep.x_a.value.get(j, k));
        let beta = sigmoid_scalar(ep.x_b.value.get(j, k));
        z.set(k, 0, s * alpha * (h.get(k, 0) - beta));
    }
    z
}

/// Run the head on one interaction vector; returns the final logit.
fn head_logit<T: Real>(mlp: &MlpParams<T>, z: &[T]) -> T {
    let mut act = z.to_vec();
    let last = mlp.layers.len() - 1;
    for (idx, layer) in mlp.layers.iter().enumerate() {
        let w = &layer.w.value;
        let pre: Vec<T> = (0..w.rows())
            .map(|r| T::of(dot(w.row(r), &act) + layer.b.value.get(r, 0).wide()))
            .collect();
        if idx == last {
            return pre[0];
        }
        act = pre.into_iter().map(sigmoid_scalar).collect();
    }
    unreachable!("head has at least one layer")
}

/// Predicted probability for exercise `j` given a proficiency vector.
pub fn predict_from_proficiency<T: Real>(
    params: &ModelParams<T>,
    h: &Tensor2<T>,
    j: usize,
    q: &QMatrix,
) -> T {
    let z = interaction_vector(j, h, &params.exercise, q, params.arch.sign);
    sigmoid_scalar(head_logit(&params.mlp, z.data()))
}

/// Probability that student `i` answers exercise `j` correctly.
pub fn predict<T: Real>(
    params: &ModelParams<T>,
    variant: Variant,
    i: usize,
    j: usize,
    q: &QMatrix,
) -> Result<T> {
    let h = student_proficiency(i, variant, &params.student, &params.projection)?;
    Ok(predict_from_proficiency(params, &h, j, q))
}

/// N×K proficiency matrix under the model's own variant.
pub fn proficiency_matrix<T: Real>(params: &ModelParams<T>) -> Result<Tensor2<T>> {
    let (n, k) = (params.arch.n_students, params.arch.n_concepts);
    let mut out = Tensor2::zeros(n, k);
    for i in 0..n {
        let h = student_proficiency(i, params.arch.variant, &params.student, &params.projection)?;
        out.row_mut(i).copy_from_slice(h.data());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Batched forward / backward
// ---------------------------------------------------------------------------

/// Numerically stable `-[y log σ(t) + (1-y) log(1-σ(t))]` on the logit `t`.
#[inline]
pub fn bce_with_logit(y: u8, logit: f64) -> f64 {
    let softplus = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    softplus - f64::from(y) * logit
}

/// Inverted dropout on hidden activations during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

struct Cache<T> {
    /// B×K proficiency (and its two sources, when used).
    h: Vec<T>,
    h_p: Option<Vec<T>>,
    h_e: Option<Vec<T>>,
    /// B×K discrimination / difficulty, filled on active concepts only.
    alpha: Vec<T>,
    beta: Vec<T>,
    /// `inputs[l]` is the input to head layer `l`; `inputs[0]` is z.
    inputs: Vec<Vec<T>>,
    /// Pre-dropout sigmoid outputs and dropout scales of hidden layers.
    sig: Vec<Vec<T>>,
    drop: Vec<Option<Vec<T>>>,
    logits: Vec<T>,
}

/// `out[b, o] = x[b, :] · w[o, :] + bias[o]`, parallel over batch rows.
fn linear_rows<T: Real>(x: &[T], in_dim: usize, w: &Tensor2<T>, bias: &Tensor2<T>) -> Vec<T> {
    let out_dim = w.rows();
    let batch = x.len() / in_dim;
    let mut out = vec![T::zero(); batch * out_dim];
    out.par_chunks_mut(out_dim)
        .zip(x.par_chunks(in_dim))
        .for_each(|(o_row, x_row)| {
            for (o, v) in o_row.iter_mut().enumerate() {
                *v = T::of(dot(w.row(o), x_row) + bias.get(o, 0).wide());
            }
        });
    debug_assert_eq!(batch * in_dim, x.len());
    out
}

fn forward_batch<T: Real>(
    params: &ModelParams<T>,
    variant: Variant,
    batch: &[ResponseLog],
    q: &QMatrix,
    mut dropout: Option<Dropout<'_>>,
) -> Result<Cache<T>> {
    let k = params.arch.n_concepts;
    let bsz = batch.len();
    let sp = &params.student;
    let cp = &params.projection;
    let mut h = vec![T::zero(); bsz * k];
    let mut h_p = variant.uses_parent_path().then(|| vec![T::zero(); bsz * k]);
    let mut h_e = variant
        .uses_embedding_path()
        .then(|| vec![T::zero(); bsz * k]);

    for (b, log) in batch.iter().enumerate() {
        let i = log.student;
        let row = b * k..(b + 1) * k;
        if let Some(hp) = h_p.as_mut() {
            let (x_p, g, b_p) = (
                require(&sp.x_p, "parent-proficiency")?,
                require(&cp.g, "parent-child map")?,
                require(&sp.b_p, "parent bias")?,
            );
            sigmoid_affine_into(&g.value, x_p.value.row(i), &b_p.value, &mut hp[row.clone()]);
        }
        if let Some(he) = h_e.as_mut() {
            let (x_e, f, b_e) = (
                require(&sp.x_e, "student-embedding")?,
                require(&cp.f, "embedding projection")?,
                require(&sp.b_e, "embedding bias")?,
            );
            sigmoid_affine_into(&f.value, x_e.value.row(i), &b_e.value, &mut he[row.clone()]);
        }
        let hb = &mut h[row.clone()];
        match variant {
            Variant::EmbNcd => hb.copy_from_slice(&h_e.as_ref().unwrap()[row]),
            Variant::PkNcd => hb.copy_from_slice(&h_p.as_ref().unwrap()[row]),
            Variant::SrNcd => {
                let (hp, he) = (
                    &h_p.as_ref().unwrap()[row.clone()],
                    &h_e.as_ref().unwrap()[row],
                );
                let half = T::of(0.5);
                for ((o, &a), &c) in hb.iter_mut().zip(hp).zip(he) {
                    *o = (a + c) * half;
                }
            }
            Variant::NcdBaseline | Variant::MirtDegenerate => {
                let x = require(&sp.x_direct, "direct proficiency")?;
                for (o, &v) in hb.iter_mut().zip(x.value.row(i)) {
                    *o = sigmoid_scalar(v);
                }
            }
        }
    }

    let s = params.arch.sign.factor::<T>();
    let ep = &params.exercise;
    let mut alpha = vec![T::zero(); bsz * k];
    let mut beta = vec![T::zero(); bsz * k];
    let mut z = vec![T::zero(); bsz * k];
    for (b, log) in batch.iter().enumerate() {
        let j = log.exercise;
        for &c in q.concepts_of(j) {
            let idx = b * k + c;
            let a = sigmoid_scalar(ep.x_a.value.get(j, c));
            let d = sigmoid_scalar(ep.x_b.value.get(j, c));
            alpha[idx] = a;
            beta[idx] = d;
            z[idx] = s * a * (h[idx] - d);
        }
    }

    let n_layers = params.mlp.layers.len();
    let mut inputs = vec![z];
    let mut sig = Vec::with_capacity(n_layers);
    let mut drop = Vec::with_capacity(n_layers);
    let mut logits = Vec::new();
    let mut in_dim = k;
    for (idx, layer) in params.mlp.layers.iter().enumerate() {
        let pre = linear_rows(
            inputs.last().unwrap(),
            in_dim,
            &layer.w.value,
            &layer.b.value,
        );
        if idx + 1 == n_layers {
            logits = pre;
            break;
        }
        let act: Vec<T> = pre.into_iter().map(sigmoid_scalar).collect();
        let scale = match dropout.as_mut() {
            Some(d) if d.rate > 0.0 => {
                let keep = 1.0 - d.rate;
                let inv = T::of(1.0 / keep);
                Some(
                    (0..act.len())
                        .map(|_| {
                            if d.rng.random::<f64>() < keep {
                                inv
                            } else {
                                T::zero()
                            }
                        })
                        .collect::<Vec<T>>(),
                )
            }
            _ => None,
        };
        let next = match &scale {
            Some(m) => act.iter().zip(m).map(|(&a, &m)| a * m).collect(),
            None => act.clone(),
        };
        in_dim = layer.w.value.rows();
        sig.push(act);
        drop.push(scale);
        inputs.push(next);
    }

    Ok(Cache {
        h,
        h_p,
        h_e,
        alpha,
        beta,
        inputs,
        sig,
        drop,
        logits,
    })
}

/// Mean training objective over a batch (no gradients).
pub fn batch_loss<T: Real>(
    params: &ModelParams<T>,
    variant: Variant,
    batch: &[ResponseLog],
    q: &QMatrix,
) -> Result<f64> {
    let cache = forward_batch(params, variant, batch, q, None)?;
    let total: f64 = batch
        .iter()
        .zip(&cache.logits)
        .map(|(log, &t)| bce_with_logit(log.score, t.wide()))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Predicted probabilities for a list of responses.
pub fn predict_batch<T: Real>(
    params: &ModelParams<T>,
    variant: Variant,
    batch: &[ResponseLog],
    q: &QMatrix,
) -> Result<Vec<T>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let cache = forward_batch(params, variant, batch, q, None)?;
    Ok(cache.logits.into_iter().map(sigmoid_scalar).collect())
}

/// Forward and backward pass over a batch.
///
/// Gradients of the mean objective are *added* to each group's `grad`;
/// callers zero them first. Returns the mean objective.
pub fn forward_backward<T: Real>(
    params: &mut ModelParams<T>,
    variant: Variant,
    batch: &[ResponseLog],
    q: &QMatrix,
    dropout: Option<Dropout<'_>>,
) -> Result<f64> {
    assert!(!batch.is_empty(), "forward_backward on empty batch");
    let cache = forward_batch(params, variant, batch, q, dropout)?;
    let bsz = batch.len();
    let inv_b = 1.0 / bsz as f64;
    let k = params.arch.n_concepts;

    let mut loss = 0.0;
    let mut upstream: Vec<T> = Vec::with_capacity(bsz);
    for (log, &t) in batch.iter().zip(&cache.logits) {
        loss += bce_with_logit(log.score, t.wide());
        let y_hat = sigmoid_scalar(t).wide();
        upstream.push(T::of((y_hat - f64::from(log.score)) * inv_b));
    }
    loss *= inv_b;

    // Head, last layer first. `upstream` holds d(loss)/d(pre-activation).
    let n_layers = params.mlp.layers.len();
    for idx in (0..n_layers).rev() {
        let input = &cache.inputs[idx];
        let layer = &mut params.mlp.layers[idx];
        let (out_dim, in_dim) = layer.w.value.shape();

        layer
            .w
            .grad
            .data_mut()
            .par_chunks_mut(in_dim)
            .zip(layer.b.grad.data_mut().par_iter_mut())
            .enumerate()
            .for_each(|(o, (gw, gb))| {
                let mut acc = vec![0.0f64; in_dim];
                let mut acc_b = 0.0f64;
                for b in 0..bsz {
                    let u = upstream[b * out_dim + o].wide();
                    if u == 0.0 {
                        continue;
                    }
                    acc_b += u;
                    for (a, &x) in acc.iter_mut().zip(&input[b * in_dim..(b + 1) * in_dim]) {
                        *a += u * x.wide();
                    }
                }
                for (g, a) in gw.iter_mut().zip(acc) {
                    *g = T::of(g.wide() + a);
                }
                *gb = T::of(gb.wide() + acc_b);
            });

        let w = &layer.w.value;
        let mut down = vec![T::zero(); bsz * in_dim];
        down.par_chunks_mut(in_dim)
            .enumerate()
            .for_each(|(b, d_row)| {
                let mut acc = vec![0.0f64; in_dim];
                for o in 0..out_dim {
                    let u = upstream[b * out_dim + o].wide();
                    if u == 0.0 {
                        continue;
                    }
                    for (a, &wv) in acc.iter_mut().zip(w.row(o)) {
                        *a += u * wv.wide();
                    }
                }
                for (d, a) in d_row.iter_mut().zip(acc) {
                    *d = T::of(a);
                }
            });
        if idx > 0 {
            // Through dropout and the hidden sigmoid feeding this layer.
            let sig = &cache.sig[idx - 1];
            let drop = &cache.drop[idx - 1];
            for (n, d) in down.iter_mut().enumerate() {
                let s = sig[n];
                let m = drop.as_ref().map_or(T::one(), |m| m[n]);
                *d = *d * m * s * (T::one() - s);
            }
        }
        upstream = down;
    }
    let dz = upstream;

    // Interaction and student representation, example by example in order.
    let s = params.arch.sign.factor::<T>();
    let parent_of = params.arch.parent_of.clone();
    let n_parents = params.arch.n_parents;
    let half = T::of(0.5);
    for (b, log) in batch.iter().enumerate() {
        let (i, j) = (log.student, log.exercise);
        for &c in q.concepts_of(j) {
            let idx = b * k + c;
            let g = dz[idx];
            if g == T::zero() {
                continue;
            }
            let (a, d, hk) = (cache.alpha[idx], cache.beta[idx], cache.h[idx]);
            let dh = s * a * g;
            let da = s * (hk - d) * g;
            let dd = -s * a * g;
            let ex = &mut params.exercise;
            let ga = ex.x_a.grad.get(j, c) + da * a * (T::one() - a);
            ex.x_a.grad.set(j, c, ga);
            let gb = ex.x_b.grad.get(j, c) + dd * d * (T::one() - d);
            ex.x_b.grad.set(j, c, gb);

            let (dh_p, dh_e) = match variant {
                Variant::EmbNcd => (T::zero(), dh),
                Variant::PkNcd => (dh, T::zero()),
                Variant::SrNcd => (dh * half, dh * half),
                Variant::NcdBaseline | Variant::MirtDegenerate => {
                    let x = params
                        .student
                        .x_direct
                        .as_mut()
                        .expect("checked in forward");
                    let v = x.grad.get(i, c) + dh * hk * (T::one() - hk);
                    x.grad.set(i, c, v);
                    continue;
                }
            };

            if variant.uses_parent_path() {
                let hp = cache.h_p.as_ref().unwrap()[idx];
                let dpre = dh_p * hp * (T::one() - hp);
                let sp = &mut params.student;
                let bp = sp.b_p.as_mut().unwrap();
                bp.grad.set(c, 0, bp.grad.get(c, 0) + dpre);
                let x_p = sp.x_p.as_mut().unwrap();
                let g_map = params.projection.g.as_mut().unwrap();
                let parents = parent_of.as_ref().expect("hierarchy present");
                let l = parents[c];
                debug_assert!(l < n_parents);
                let gv = g_map.grad.get(c, l) + dpre * x_p.value.get(i, l);
                g_map.grad.set(c, l, gv);
                let xv = x_p.grad.get(i, l) + dpre * g_map.value.get(c, l);
                x_p.grad.set(i, l, xv);
            }
            if variant.uses_embedding_path() {
                let he = cache.h_e.as_ref().unwrap()[idx];
                let dpre = dh_e * he * (T::one() - he);
                let sp = &mut params.student;
                let be = sp.b_e.as_mut().unwrap();
                be.grad.set(c, 0, be.grad.get(c, 0) + dpre);
                let x_e = sp.x_e.as_mut().unwrap();
                let f = params.projection.f.as_mut().unwrap();
                let dim = f.value.cols();
                for t in 0..dim {
                    let fv = f.grad.get(c, t) + dpre * x_e.value.get(i, t);
                    f.grad.set(c, t, fv);
                    let xv = x_e.grad.get(i, t) + dpre * f.value.get(c, t);
                    x_e.grad.set(i, t, xv);
                }
            }
        }
    }
    Ok(loss)
}
