use nalgebra::{Rotation3, Vector3};

use crate::real::Real;
use crate::splat::{rasterize_backward, rasterize_forward, Camera, Channels, GaussianSet, RasterConfig, RenderGrads};
use crate::tensor::Array;

use super::optim::Moments;
use super::{photometric_loss, TrainError};

/// Settings of target-pose refinement against frozen Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseConfig {
    pub steps: usize,
    pub lr: f64,
    pub s: f64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        PoseConfig {
            steps: 500,
            lr: 1e-3,
            s: 0.3,
        }
    }
}

impl PoseConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let bad = || TrainError::Config(format!("bad value `{value}` for `{key}`"));
        match key {
            "steps" => self.steps = value.parse().map_err(|_| bad())?,
            "lr" => self.lr = value.parse().map_err(|_| bad())?,
            "s" => self.s = value.parse().map_err(|_| bad())?,
            _ => return Err(TrainError::Config(format!("unknown key `{key}` in [pose]"))),
        }
        Ok(())
    }
}

/// Outcome of [`refine_pose`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoseResult {
    pub camera: Camera,
    /// Loss of the returned pose.
    pub loss: f64,
    /// MSE observed at every evaluated pose, starting with `init`.
    pub losses: Vec<f64>,
}

/// Nearest rotation matrix, so repeated composition stays on SO(3).
fn orthonormalize(cam: &mut Camera) {
    cam.rotation = Rotation3::from_matrix(&cam.rotation).into_inner();
}

/// Camera-frame centroid of the Gaussian means seen from `cam`.
fn pivot<T: Real>(g: &GaussianSet<T>, cam: &Camera) -> Vector3<f64> {
    if g.is_empty() {
        return Vector3::zeros();
    }
    let sum: Vector3<f64> = g
        .positions
        .iter()
        .map(|p| cam.to_camera(&Vector3::new(p[0].as_f64(), p[1].as_f64(), p[2].as_f64())))
        .sum();
    sum / g.len() as f64
}

/// Optimize only the camera pose so the frozen Gaussians reproduce `target`.
///
/// Each Adam step yields an increment (axis-angle, translation) in the camera
/// frame. The rotation turns about the camera-frame centroid of the
/// Gaussians, which decouples it from translation for an object-centred
/// view. The pose with the lowest observed MSE is returned.
pub fn refine_pose<T: Real>(
    g: &GaussianSet<T>,
    target: &Array<T>,
    init: &Camera,
    cfg: &PoseConfig,
) -> Result<PoseResult, TrainError> {
    if !(cfg.lr > 0.0) {
        return Err(TrainError::Config("pose learning rate must be positive".into()));
    }
    let raster = RasterConfig::new(cfg.s, Channels::COLOR);
    let mut cam = init.clone();
    let mut moments = Moments::<f64>::new(6);
    let p = pivot(g, init);
    let mut best = (f64::INFINITY, init.clone());
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let color = rasterize_forward(g, &cam, &raster)?.color.expect("color channel requested");
        let loss = photometric_loss(&color, target, 1.0)?;
        if !loss.value.is_finite() {
            return Err(TrainError::NonFinite { step, scene: 0 });
        }
        losses.push(loss.value);
        if loss.value < best.0 {
            best = (loss.value, cam.clone());
        }
        if step == cfg.steps {
            break;
        }
        let rg = RenderGrads {
            color: Some(loss.grad),
            ..Default::default()
        };
        let grads = rasterize_backward(g, &cam, &raster, &rg)?;
        let c: Vec<f64> = grads.camera.iter().map(|v| v.as_f64()).collect();
        let (gw, gt) = (Vector3::new(c[0], c[1], c[2]), Vector3::new(c[3], c[4], c[5]));
        // Turning by w about p shifts the translation by p x w.
        let gw = gw - p.cross(&gt);
        let grad = [gw.x, gw.y, gw.z, gt.x, gt.y, gt.z];
        let mut delta = [0.0; 6];
        moments.update(&mut delta, &grad, step as u64 + 1, cfg.lr, 0.9, 0.999, 1e-8, 0.0);
        let w = Vector3::new(delta[0], delta[1], delta[2]);
        let d = Vector3::new(delta[3], delta[4], delta[5]);
        cam = cam.perturbed(&w, &(p - Rotation3::from_scaled_axis(w) * p + d));
        orthonormalize(&mut cam);
    }
    Ok(PoseResult {
        camera: best.1,
        loss: best.0,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> (GaussianSet<f64>, Camera) {
        let mut g = GaussianSet::default();
        for i in 0..27 {
            let (a, b, c) = ((i % 3) as f64 - 1.0, ((i / 3) % 3) as f64 - 1.0, (i / 9) as f64 - 1.0);
            let p = [0.5 * a + 0.1 * c, 0.5 * b - 0.1 * c, 3.0 + 0.5 * c];
            g.push(p, [-2.4, -2.4, -2.4], [1.0, 0.0, 0.0, 0.0], 2.0, [2.0 * a, 2.0 * b, 2.0 * c]);
        }
        (g, Camera::canonical(32, 32, 30.0))
    }

    fn render(g: &GaussianSet<f64>, cam: &Camera) -> Array<f64> {
        rasterize_forward(g, cam, &RasterConfig::new(0.3, Channels::COLOR)).unwrap().color.unwrap()
    }

    #[test]
    fn ground_truth_start_is_kept() {
        let (g, cam) = scene();
        let target = render(&g, &cam);
        let cfg = PoseConfig {
            steps: 20,
            ..Default::default()
        };
        let out = refine_pose(&g, &target, &cam, &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.camera, cam);
    }

    #[test]
    fn small_perturbation_is_reduced_and_rotation_stays_orthonormal() {
        let (g, cam) = scene();
        let target = render(&g, &cam);
        let init = cam.perturbed(&Vector3::new(0.0, 0.03, 0.01), &Vector3::new(0.02, -0.01, 0.0));
        let cfg = PoseConfig {
            steps: 400,
            ..Default::default()
        };
        let out = refine_pose(&g, &target, &init, &cfg).unwrap();
        assert!(out.loss < 0.2 * out.losses[0]);
        assert!(out.camera.rotation_angle_to(&cam) < 0.5 * init.rotation_angle_to(&cam));
        let r = out.camera.rotation;
        assert!((r * r.transpose() - nalgebra::Matrix3::identity()).amax() < 1e-6);
        assert!((r.determinant() - 1.0).abs() < 1e-6);
    }
}
