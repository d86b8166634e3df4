use crate::real::Real;
use crate::splat::{normalize_quat, sigmoid, Activated, GaussianGrads, GaussianSet, QUAT_EPS};
use crate::tensor::Array;

use super::ModelError;

/// Width of one raw head row: position, log-scale, quaternion, opacity, color.
pub const RAW_WIDTH: usize = 14;
pub const LOG_SCALE_MIN: f64 = -8.0;
pub const LOG_SCALE_MAX: f64 = 2.0;

/// Axis-aligned box every decoded position lies in:
/// `center + half * tanh(raw)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionBounds {
    pub center: [f64; 3],
    pub half: f64,
}

impl PositionBounds {
    /// Box centered on the origin.
    pub fn origin(half: f64) -> Self {
        PositionBounds { center: [0.0; 3], half }
    }

    #[inline]
    fn apply<T: Real>(&self, raw: &[T]) -> [T; 3] {
        let h = T::lit(self.half);
        [0, 1, 2].map(|k| T::lit(self.center[k]) + h * raw[k].tanh())
    }
}

fn check_row<T: Real>(raw: &[T]) -> Result<(), ModelError> {
    if raw.len() != RAW_WIDTH {
        return Err(ModelError::Shape(format!("head row has {} values, expected {RAW_WIDTH}", raw.len())));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("Gaussian head output".into()));
    }
    Ok(())
}

#[inline]
fn clamp_log_scale<T: Real>(v: T) -> T {
    v.max(T::lit(LOG_SCALE_MIN)).min(T::lit(LOG_SCALE_MAX))
}

/// Render-space Gaussian from one raw head row.
pub fn gaussian_head_activate<T: Real>(raw: &[T], bounds: &PositionBounds) -> Result<Activated<T>, ModelError> {
    check_row(raw)?;
    Ok(Activated {
        mean: bounds.apply(raw),
        scale: [3, 4, 5].map(|k| clamp_log_scale(raw[k]).exp()),
        rotation: normalize_quat([raw[6], raw[7], raw[8], raw[9]]).0,
        opacity: sigmoid(raw[10]),
        color: [11, 12, 13].map(|k| sigmoid(raw[k])),
    })
}

/// Flattened activated row: mean, scale, quaternion, opacity, color.
pub fn activated_row<T: Real>(a: &Activated<T>) -> [T; RAW_WIDTH] {
    let mut out = [T::zero(); RAW_WIDTH];
    out[0..3].copy_from_slice(&a.mean);
    out[3..6].copy_from_slice(&a.scale);
    out[6..10].copy_from_slice(&a.rotation);
    out[10] = a.opacity;
    out[11..14].copy_from_slice(&a.color);
    out
}

/// Vector-Jacobian product of [`gaussian_head_activate`] in the
/// [`activated_row`] layout.
pub fn gaussian_head_vjp<T: Real>(raw: &[T], bounds: &PositionBounds, cot: &[T; RAW_WIDTH]) -> [T; RAW_WIDTH] {
    let a = gaussian_head_activate(raw, bounds).expect("finite head row");
    let one = T::one();
    let mut g = [T::zero(); RAW_WIDTH];
    for k in 0..3 {
        let t = raw[k].tanh();
        g[k] = cot[k] * T::lit(bounds.half) * (one - t * t);
        let inside = raw[3 + k] > T::lit(LOG_SCALE_MIN) && raw[3 + k] < T::lit(LOG_SCALE_MAX);
        g[3 + k] = if inside { cot[3 + k] * a.scale[k] } else { T::zero() };
        g[11 + k] = cot[11 + k] * a.color[k] * (one - a.color[k]);
    }
    g[10] = cot[10] * a.opacity * (one - a.opacity);
    let q = &raw[6..10];
    let norm = q.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm >= T::lit(QUAT_EPS) {
        let u = a.rotation;
        let proj: T = (0..4).map(|k| u[k] * cot[6 + k]).sum();
        for k in 0..4 {
            g[6 + k] = (cot[6 + k] - u[k] * proj) / norm;
        }
    }
    g
}

/// Raw Gaussian parameters for every head row of an `N x 14` array.
///
/// Positions are bounded by `bounds`, log-scales are clamped; the remaining
/// blocks are stored as pre-activations.
pub fn head_to_gaussians<T: Real>(raw: &Array<T>, bounds: &PositionBounds) -> Result<GaussianSet<T>, ModelError> {
    if raw.rank() != 2 || raw.shape()[1] != RAW_WIDTH {
        return Err(ModelError::Shape(format!("head output {:?}, expected [N, {RAW_WIDTH}]", raw.shape())));
    }
    let mut g = GaussianSet::default();
    for r in raw.data().chunks_exact(RAW_WIDTH) {
        check_row(r)?;
        g.push(
            bounds.apply(r),
            [3, 4, 5].map(|k| clamp_log_scale(r[k])),
            [r[6], r[7], r[8], r[9]],
            r[10],
            [r[11], r[12], r[13]],
        );
    }
    Ok(g)
}

/// Pull raw-parameter gradients of the set back to the `N x 14` head output.
pub fn head_backward<T: Real>(raw: &Array<T>, bounds: &PositionBounds, grads: &GaussianGrads<T>) -> Array<T> {
    let one = T::one();
    let mut out = Array::zeros(raw.shape());
    for (i, (r, o)) in raw
        .data()
        .chunks_exact(RAW_WIDTH)
        .zip(out.data_mut().chunks_exact_mut(RAW_WIDTH))
        .enumerate()
    {
        for k in 0..3 {
            let t = r[k].tanh();
            o[k] = grads.positions[i][k] * T::lit(bounds.half) * (one - t * t);
            let inside = r[3 + k] > T::lit(LOG_SCALE_MIN) && r[3 + k] < T::lit(LOG_SCALE_MAX);
            o[3 + k] = if inside { grads.log_scales[i][k] } else { T::zero() };
            o[11 + k] = grads.color_logits[i][k];
        }
        o[6..10].copy_from_slice(&grads.rotations[i]);
        o[10] = grads.opacity_logits[i];
    }
    out
}
