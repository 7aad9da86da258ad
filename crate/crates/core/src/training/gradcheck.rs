use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{QMatrix, ResponseLog};
use crate::diagnet::{batch_loss, forward_backward, ModelParams, Variant};
use crate::error::Result;
use crate::numerics::{
    finite_diff_check, sample_coords, Coord, GradCheckReport, Objective, Tensor2,
};

#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub group: String,
    pub report: GradCheckReport,
}

/// Batch objective evaluated in f64, perturbed one coordinate at a time.
struct ModelObjective<'a> {
    params: ModelParams<f64>,
    variant: Variant,
    batch: &'a [ResponseLog],
    q: &'a QMatrix,
}

impl Objective for ModelObjective<'_> {
    fn value_at(&self, (t, i): Coord) -> f64 {
        self.params.named_groups()[t].1.value.data()[i]
    }

    fn set_value(&mut self, (t, i): Coord, v: f64) {
        self.params.groups_mut()[t].value.data_mut()[i] = v;
    }

    fn loss(&self) -> f64 {
        batch_loss(&self.params, self.variant, self.batch, self.q).unwrap_or(f64::NAN)
    }
}

/// Compare the production (f32) backward pass against f64 central
/// differences of the batch objective, `per_group` coordinates per group.
/// Structural zeros of the parent-child map are never sampled.
pub fn check_gradients(
    params: &ModelParams,
    batch: &[ResponseLog],
    q: &QMatrix,
    per_group: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GroupCheck>> {
    let variant = params.arch.variant;
    let mut analytic_params = params.clone();
    analytic_params.zero_grad();
    forward_backward(&mut analytic_params, variant, batch, q, None)?;
    let analytic: Vec<Tensor2<f64>> = analytic_params
        .named_groups()
        .iter()
        .map(|(_, p)| p.grad.cast())
        .collect();

    let groups = params.named_groups();
    let sizes: Vec<usize> = groups.iter().map(|(_, p)| p.value.len()).collect();
    // Per-student and per-exercise tables are only sampled on rows the
    // batch touches; other rows have zero gradient by construction.
    let mut students = vec![false; params.arch.n_students];
    let mut exercises = vec![false; params.arch.n_exercises];
    for l in batch {
        students[l.student] = true;
        exercises[l.exercise] = true;
    }
    let eligible = |t: usize, i: usize| {
        let (name, p) = &groups[t];
        let row = i / p.value.cols();
        let touched = match name.as_str() {
            "x_direct" | "x_p" | "x_e" => students[row],
            "x_a" | "x_b" => exercises[row],
            _ => true,
        };
        touched && !p.constraint.is_structural_zero(i)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample_coords(&sizes, per_group, eligible, &mut rng);

    let mut objective = ModelObjective {
        params: params.cast(),
        variant,
        batch,
        q,
    };
    let mut out = Vec::with_capacity(groups.len());
    for (t, (name, _)) in groups.iter().enumerate() {
        let mine: Vec<Coord> = coords.iter().copied().filter(|c| c.0 == t).collect();
        let report = finite_diff_check(&mut objective, &analytic, &mine, h)?;
        out.push(GroupCheck {
            group: name.clone(),
            report,
        });
    }
    Ok(out)
}
