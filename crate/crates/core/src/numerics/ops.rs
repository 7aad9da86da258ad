//! Elementwise kernels, the affine map, and their analytic gradients.

use super::tensor::{dot, Real, Tensor2};

/// Exponent clamp for the logistic function; keeps `exp` finite in `f32`.
pub const SIGMOID_CLAMP: f64 = 88.0;

/// Logistic function with clamped exponent.
///
/// The output is kept strictly inside (0, 1) in the target precision so
/// downstream log-likelihoods stay finite.
#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    let x = x.wide().clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    let y = T::of(y);
    let hi = T::one() - T::epsilon() / T::of(2.0);
    y.max(T::min_positive_value()).min(hi)
}

pub fn sigmoid<T: Real>(x: &Tensor2<T>) -> Tensor2<T> {
    x.map(sigmoid_scalar)
}

/// `w * x + b` for a column vector `x`.
pub fn affine<T: Real>(w: &Tensor2<T>, x: &Tensor2<T>, b: &Tensor2<T>) -> Tensor2<T> {
    assert_eq!(x.cols(), 1, "affine input must be a column vector");
    assert_eq!(
        w.cols(),
        x.rows(),
        "affine: W is {:?}, x is {:?}",
        w.shape(),
        x.shape()
    );
    assert_eq!(
        b.shape(),
        (w.rows(), 1),
        "affine: bias shape {:?}",
        b.shape()
    );
    Tensor2::from_fn(w.rows(), 1, |r, _| {
        T::of(dot(w.row(r), x.data()) + b.get(r, 0).wide())
    })
}

pub fn hadamard<T: Real>(a: &Tensor2<T>, b: &Tensor2<T>) -> Tensor2<T> {
    assert_eq!(a.shape(), b.shape(), "hadamard shape mismatch");
    Tensor2::new(
        a.rows(),
        a.cols(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct AffineGrads<T> {
    pub dw: Tensor2<T>,
    pub dx: Tensor2<T>,
    pub db: Tensor2<T>,
}

/// Gradients of `w * x + b` given upstream `g` (same shape as the output).
pub fn backward_affine<T: Real>(w: &Tensor2<T>, x: &Tensor2<T>, g: &Tensor2<T>) -> AffineGrads<T> {
    assert_eq!(
        g.shape(),
        (w.rows(), 1),
        "backward_affine: upstream shape {:?}",
        g.shape()
    );
    assert_eq!(
        x.shape(),
        (w.cols(), 1),
        "backward_affine: cached input shape {:?}",
        x.shape()
    );
    let dw = Tensor2::from_fn(w.rows(), w.cols(), |r, c| g.get(r, 0) * x.get(c, 0));
    let dx = Tensor2::from_fn(w.cols(), 1, |c, _| {
        let acc: f64 = (0..w.rows())
            .map(|r| w.get(r, c).wide() * g.get(r, 0).wide())
            .sum();
        T::of(acc)
    });
    AffineGrads {
        dw,
        dx,
        db: g.clone(),
    }
}

/// Gradient through the logistic function, from its cached output.
pub fn backward_sigmoid<T: Real>(y: &Tensor2<T>, g: &Tensor2<T>) -> Tensor2<T> {
    assert_eq!(y.shape(), g.shape(), "backward_sigmoid shape mismatch");
    Tensor2::new(
        y.rows(),
        y.cols(),
        y.data()
            .iter()
            .zip(g.data())
            .map(|(&s, &gi)| gi * s * (T::one() - s))
            .collect(),
    )
}

/// Gradients of `a ∘ b` with respect to `a` and `b`.
pub fn backward_hadamard<T: Real>(
    a: &Tensor2<T>,
    b: &Tensor2<T>,
    g: &Tensor2<T>,
) -> (Tensor2<T>, Tensor2<T>) {
    (hadamard(g, b), hadamard(g, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        assert_eq!(sigmoid_scalar(0.0f32), 0.5);
        let lo = sigmoid_scalar(-100.0f32);
        assert!(lo > 0.0 && lo <= 1e-30, "{lo}");
        let hi = sigmoid_scalar(100.0f32);
        assert!(hi < 1.0 && hi.is_finite());
        assert!(sigmoid_scalar(f32::MAX) < 1.0);
    }

    #[test]
    fn sigmoid_symmetry_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x: f32 = rng.random_range(-20.0..20.0);
            let s = sigmoid_scalar(x) + sigmoid_scalar(-x);
            assert!((s - 1.0).abs() < 1e-6, "x={x} sum={s}");
        }
    }

    #[test]
    fn affine_identity_and_bias() {
        let eye = Tensor2::new(2, 2, vec![1.0f32, 0.0, 0.0, 1.0]);
        let x = Tensor2::column(&[3.0f32, 4.0]);
        let zero = Tensor2::zeros(2, 1);
        assert_eq!(affine(&eye, &x, &zero).data(), &[3.0, 4.0]);

        let w0 = Tensor2::<f32>::zeros(2, 2);
        let b = Tensor2::column(&[1.0f32, 2.0]);
        assert_eq!(affine(&w0, &x, &b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor2::from_fn(3, 2, |_, _| rng.random_range(-1.0f64..1.0));
        let x = Tensor2::from_fn(2, 1, |_, _| rng.random_range(-1.0f64..1.0));
        let b = Tensor2::from_fn(3, 1, |_, _| rng.random_range(-1.0f64..1.0));
        let out = affine(&w, &x, &b);
        for r in 0..3 {
            let mut acc = b.get(r, 0);
            for c in 0..2 {
                acc += w.get(r, c) * x.get(c, 0);
            }
            assert!((out.get(r, 0) - acc).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "affine")]
    fn affine_shape_mismatch_panics() {
        let w = Tensor2::<f32>::zeros(2, 3);
        let x = Tensor2::<f32>::zeros(2, 1);
        let b = Tensor2::<f32>::zeros(2, 1);
        affine(&w, &x, &b);
    }

    #[test]
    fn sigmoid_local_derivative_at_zero() {
        let y = sigmoid(&Tensor2::column(&[0.0f32]));
        let g = Tensor2::column(&[1.0f32]);
        assert_eq!(backward_sigmoid(&y, &g).data(), &[0.25]);
    }

    #[test]
    fn affine_weight_gradient_is_outer_product() {
        let w = Tensor2::new(1, 2, vec![0.3f32, -0.7]);
        let x = Tensor2::column(&[1.0f32, 0.0]);
        let g = Tensor2::column(&[1.0f32]);
        let grads = backward_affine(&w, &x, &g);
        assert_eq!(grads.dw.get(0, 0), 1.0);
        assert_eq!(grads.dw.get(0, 1), 0.0);
        assert_eq!(grads.dx.data(), &[0.3, -0.7]);
        assert_eq!(grads.db.data(), &[1.0]);
    }

    #[test]
    fn hadamard_product_rule() {
        let a = Tensor2::column(&[2.0f32, 3.0]);
        let b = Tensor2::column(&[5.0f32, -1.0]);
        let g = Tensor2::column(&[1.0f32, 2.0]);
        let (da, db) = backward_hadamard(&a, &b, &g);
        assert_eq!(da.data(), &[5.0, -2.0]);
        assert_eq!(db.data(), &[2.0, 6.0]);
    }
}
