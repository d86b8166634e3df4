use nalgebra::{Matrix3, Rotation3, Vector3};

use super::SplatError;

/// Near plane used unless a camera says otherwise.
pub const DEFAULT_NEAR: f64 = 0.01;

/// Pinhole camera with a world-to-camera rigid transform.
///
/// Camera axes: x right, y down, z forward. Pixel `(col, row)` has its
/// center at `(col + 0.5, row + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    /// Identity pose with a symmetric field of view.
    pub fn canonical(width: usize, height: usize, focal: f64) -> Self {
        Camera {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near: DEFAULT_NEAR,
        }
    }

    /// Camera at `eye` looking at `target`, with `up` roughly opposite to +y.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        focal: f64,
    ) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        // Rows of the world-to-camera rotation are the camera axes in world.
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Camera {
            rotation,
            translation,
            ..Camera::canonical(width, height, focal)
        }
    }

    pub fn validate(&self) -> Result<(), SplatError> {
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(ortho <= 1e-6 && (det - 1.0).abs() <= 1e-6) {
            return Err(SplatError::InvalidCamera(format!(
                "rotation not orthonormal (err {ortho:.2e}, det {det:.6})"
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SplatError::InvalidCamera("focal lengths must be positive".into()));
        }
        let w = self.width as f64;
        let h = self.height as f64;
        if !(self.cx >= 0.0 && self.cx < w && self.cy >= 0.0 && self.cy < h) {
            return Err(SplatError::InvalidCamera("principal point outside image".into()));
        }
        if !(self.near > 0.0) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(SplatError::InvalidCamera("bad near plane or translation".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    /// Pixel coordinates of a camera-space point (no validity checks).
    pub fn project(&self, pc: &Vector3<f64>) -> (f64, f64) {
        (self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy)
    }

    /// World-space ray direction (unit) through continuous pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d).normalize()
    }

    /// Same pose, intrinsics rescaled to a `width x height` raster.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..self.clone()
        }
    }

    /// Left-compose a camera-frame increment: `R' = exp(w) R`, `t' = exp(w) t + d`.
    pub fn perturbed(&self, axis_angle: &Vector3<f64>, delta: &Vector3<f64>) -> Self {
        let e = Rotation3::from_scaled_axis(*axis_angle).into_inner();
        Camera {
            rotation: e * self.rotation,
            translation: e * self.translation + delta,
            ..self.clone()
        }
    }

    /// Geodesic angle (radians) between the two world-to-camera rotations.
    pub fn rotation_angle_to(&self, other: &Camera) -> f64 {
        let rel = self.rotation * other.rotation.transpose();
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}
