//! Smooth activations with explicit derivatives.

use ndarray::{ArrayBase, Data, Dimension, OwnedRepr};

use super::Real;

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// x * sigmoid(x).
pub fn silu<T: Real, S: Data<Elem = T>, D: Dimension>(
    x: &ArrayBase<S, D>,
) -> ArrayBase<OwnedRepr<T>, D> {
    x.map(|&v| v * sigmoid(v))
}

/// dL/dx given the forward input and dL/dy.
pub fn silu_backward<T: Real, S: Data<Elem = T>, D: Dimension>(
    x: &ArrayBase<S, D>,
    dy: &ArrayBase<S, D>,
) -> ArrayBase<OwnedRepr<T>, D> {
    let mut out = x.map(|&v| {
        let s = sigmoid(v);
        s * (T::one() + v * (T::one() - s))
    });
    out.zip_mut_with(dy, |d, g| *d *= *g);
    out
}

const GELU_C: f64 = 0.044_715;

fn sqrt_2_over_pi<T: Real>() -> T {
    T::from_f64((2.0 / std::f64::consts::PI).sqrt())
}

/// Tanh-approximated GELU.
pub fn gelu<T: Real, S: Data<Elem = T>, D: Dimension>(
    x: &ArrayBase<S, D>,
) -> ArrayBase<OwnedRepr<T>, D> {
    let c = T::from_f64(GELU_C);
    let k = sqrt_2_over_pi::<T>();
    let half = T::from_f64(0.5);
    x.map(|&v| {
        let u = k * (v + c * v * v * v);
        half * v * (T::one() + u.tanh())
    })
}

/// dL/dx for the tanh-approximated GELU.
pub fn gelu_backward<T: Real, S: Data<Elem = T>, D: Dimension>(
    x: &ArrayBase<S, D>,
    dy: &ArrayBase<S, D>,
) -> ArrayBase<OwnedRepr<T>, D> {
    let c = T::from_f64(GELU_C);
    let three_c = T::from_f64(3.0 * GELU_C);
    let k = sqrt_2_over_pi::<T>();
    let half = T::from_f64(0.5);
    let mut out = x.map(|&v| {
        let u = k * (v + c * v * v * v);
        let th = u.tanh();
        let sech2 = T::one() - th * th;
        half * (T::one() + th) + half * v * sech2 * k * (T::one() + three_c * v * v)
    });
    out.zip_mut_with(dy, |d, g| *d *= *g);
    out
}
