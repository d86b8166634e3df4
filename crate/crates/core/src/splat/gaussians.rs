use crate::real::Real;
use crate::tensor::Array;

use super::SplatError;

/// Quaternions shorter than this fall back to the identity rotation.
pub const QUAT_EPS: f64 = 1e-8;

/// Raw (pre-activation) Gaussian parameters, one entry per Gaussian.
///
/// Quaternions are stored `(w, x, y, z)` and normalized only when activated.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet<T> {
    pub positions: Vec<[T; 3]>,
    pub log_scales: Vec<[T; 3]>,
    pub rotations: Vec<[T; 4]>,
    pub opacity_logits: Vec<T>,
    pub color_logits: Vec<[T; 3]>,
    /// Row-major `len() x feature_dim` lifted features; empty when `feature_dim == 0`.
    pub features: Vec<T>,
    pub feature_dim: usize,
}

/// Gaussian in render space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activated<T> {
    pub mean: [T; 3],
    pub scale: [T; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [T; 4],
    pub opacity: T,
    pub color: [T; 3],
}

impl<T: Real> Default for GaussianSet<T> {
    fn default() -> Self {
        GaussianSet {
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            color_logits: Vec::new(),
            features: Vec::new(),
            feature_dim: 0,
        }
    }
}

impl<T: Real> GaussianSet<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: [T; 3], log_scale: [T; 3], rotation: [T; 4], opacity_logit: T, color_logit: [T; 3]) {
        assert_eq!(self.feature_dim, 0, "push without features on a featured set");
        self.positions.push(position);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.opacity_logits.push(opacity_logit);
        self.color_logits.push(color_logit);
    }

    pub fn feature(&self, i: usize) -> &[T] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Attach an `N x d'` feature block.
    pub fn set_features(&mut self, features: &Array<T>) -> Result<(), SplatError> {
        let s = features.shape();
        if s.len() != 2 || s[0] != self.len() {
            return Err(SplatError::FeatureShape {
                expected: self.len(),
                got: s.to_vec(),
            });
        }
        self.feature_dim = s[1];
        self.features = features.data().to_vec();
        Ok(())
    }

    pub fn clear_features(&mut self) {
        self.features.clear();
        self.feature_dim = 0;
    }

    /// First Gaussian with a non-finite parameter.
    pub fn first_non_finite(&self) -> Option<usize> {
        (0..self.len()).find(|&i| {
            let ok = self.positions[i].iter().all(|v| v.is_finite())
                && self.log_scales[i].iter().all(|v| v.is_finite())
                && self.rotations[i].iter().all(|v| v.is_finite())
                && self.opacity_logits[i].is_finite()
                && self.color_logits[i].iter().all(|v| v.is_finite())
                && self.feature(i).iter().all(|v| v.is_finite());
            !ok
        })
    }

    pub fn activate(&self, i: usize) -> Activated<T> {
        Activated {
            mean: self.positions[i],
            scale: self.log_scales[i].map(|v| v.exp()),
            rotation: normalize_quat(self.rotations[i]).0,
            opacity: sigmoid(self.opacity_logits[i]),
            color: self.color_logits[i].map(sigmoid),
        }
    }

    /// Keep only the Gaussians at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let d = self.feature_dim;
        GaussianSet {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            log_scales: indices.iter().map(|&i| self.log_scales[i]).collect(),
            rotations: indices.iter().map(|&i| self.rotations[i]).collect(),
            opacity_logits: indices.iter().map(|&i| self.opacity_logits[i]).collect(),
            color_logits: indices.iter().map(|&i| self.color_logits[i]).collect(),
            features: indices.iter().flat_map(|&i| self.feature(i).to_vec()).collect(),
            feature_dim: d,
        }
    }

    pub fn cast<U: Real>(&self) -> GaussianSet<U> {
        let c3 = |v: &[T; 3]| v.map(|e| U::lit(e.as_f64()));
        GaussianSet {
            positions: self.positions.iter().map(c3).collect(),
            log_scales: self.log_scales.iter().map(c3).collect(),
            rotations: self.rotations.iter().map(|q| q.map(|e| U::lit(e.as_f64()))).collect(),
            opacity_logits: self.opacity_logits.iter().map(|e| U::lit(e.as_f64())).collect(),
            color_logits: self.color_logits.iter().map(c3).collect(),
            features: self.features.iter().map(|e| U::lit(e.as_f64())).collect(),
            feature_dim: self.feature_dim,
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    crate::tensor::sigmoid(x)
}

/// Unit quaternion and whether the input norm was usable.
pub fn normalize_quat<T: Real>(q: [T; 4]) -> ([T; 4], bool) {
    let n = q.iter().map(|&v| v * v).sum::<T>().sqrt();
    if n < T::lit(QUAT_EPS) {
        ([T::one(), T::zero(), T::zero(), T::zero()], false)
    } else {
        (q.map(|v| v / n), true)
    }
}

/// Rotation matrix (row-major) of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix<T: Real>(q: [T; 4]) -> [[T; 3]; 3] {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = T::lit(2.0);
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

impl<T: Real> Activated<T> {
    /// `R S S^T R^T`, row-major.
    pub fn covariance(&self) -> [[T; 3]; 3] {
        let r = quat_to_matrix(self.rotation);
        let mut m = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[i][j] * self.scale[j];
            }
        }
        let mut c = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| m[i][k] * m[j][k]).sum();
            }
        }
        c
    }
}
