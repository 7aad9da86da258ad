//! Central finite-difference gradient checking.

use rand::Rng;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// A coordinate inside a list of parameter tensors: `(tensor index, flat index)`.
pub type Coord = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinate with the largest error, with its analytic and numeric values.
    pub worst: Option<(Coord, f64, f64)>,
}

/// A scalar objective over a list of tensors that can be perturbed in place.
pub trait Objective {
    fn value_at(&self, c: Coord) -> f64;
    fn set_value(&mut self, c: Coord, v: f64);
    fn loss(&self) -> f64;
}

/// Adapter for a closure over plain tensors.
pub struct TensorObjective<F> {
    pub point: Vec<Tensor2<f64>>,
    pub f: F,
}

impl<F: Fn(&[Tensor2<f64>]) -> f64> Objective for TensorObjective<F> {
    fn value_at(&self, (t, i): Coord) -> f64 {
        self.point[t].data()[i]
    }

    fn set_value(&mut self, (t, i): Coord, v: f64) {
        self.point[t].data_mut()[i] = v;
    }

    fn loss(&self) -> f64 {
        (self.f)(&self.point)
    }
}

/// Compare analytic gradients against central differences of an objective.
///
/// Each coordinate is perturbed by `±h` and restored. The error at a
/// coordinate is `|analytic - numeric| / max(1, |numeric|)`; the maximum is
/// reported.
pub fn finite_diff_check<O: Objective>(
    objective: &mut O,
    analytic: &[Tensor2<f64>],
    coords: &[Coord],
    h: f64,
) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&h) {
        return Err(Error::Config(format!(
            "finite-difference step {h} outside [1e-5, 1e-2]"
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for &c in coords {
        let orig = objective.value_at(c);
        objective.set_value(c, orig + h);
        let up = objective.loss();
        objective.set_value(c, orig - h);
        let down = objective.loss();
        objective.set_value(c, orig);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss not finite while perturbing tensor {} index {}",
                c.0, c.1
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[c.0].data()[c.1];
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        report.coords_checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((c, a, numeric));
        }
    }
    Ok(report)
}

/// Draw up to `per_tensor` coordinates from each tensor, restricted to
/// indices accepted by `eligible(tensor, index)`. Tensors with fewer
/// eligible entries are checked exhaustively.
pub fn sample_coords<R: Rng>(
    sizes: &[usize],
    per_tensor: usize,
    mut eligible: impl FnMut(usize, usize) -> bool,
    rng: &mut R,
) -> Vec<Coord> {
    let mut out = Vec::new();
    for (t, &n) in sizes.iter().enumerate() {
        let pool: Vec<usize> = (0..n).filter(|&i| eligible(t, i)).collect();
        if pool.len() <= per_tensor {
            out.extend(pool.into_iter().map(|i| (t, i)));
        } else {
            let picked = rand::seq::index::sample(rng, pool.len(), per_tensor);
            let mut picked: Vec<usize> = picked.into_iter().map(|k| pool[k]).collect();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|i| (t, i)));
        }
    }
    out
}
