use crate::real::Real;

use super::gaussians::Activated;
use super::Camera;

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected2D<T> {
    /// Pixel coordinates of the projected mean.
    pub mean2d: [T; 2],
    /// Projected covariance `(xx, xy, yy)` before low-pass dilation.
    pub cov2d: [T; 3],
    /// Camera-space z.
    pub depth: T,
    pub valid: bool,
}

/// Camera parameters converted to the working precision.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CamT<T> {
    pub r: [[T; 3]; 3],
    pub t: [T; 3],
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub near: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CamT<T> {
    pub fn new(cam: &Camera) -> Self {
        let c = T::lit;
        let mut r = [[T::zero(); 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = c(cam.rotation[(i, j)]);
            }
        }
        CamT {
            r,
            t: [c(cam.translation.x), c(cam.translation.y), c(cam.translation.z)],
            fx: c(cam.fx),
            fy: c(cam.fy),
            cx: c(cam.cx),
            cy: c(cam.cy),
            near: c(cam.near),
            width: cam.width,
            height: cam.height,
        }
    }

    pub fn to_camera(&self, p: [T; 3]) -> [T; 3] {
        let r = &self.r;
        [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.t[i])
    }

    /// Perspective Jacobian rows at camera-space point `pc`.
    pub fn jacobian(&self, pc: [T; 3]) -> [[T; 3]; 2] {
        let [x, y, z] = pc;
        let zi = T::one() / z;
        [
            [self.fx * zi, T::zero(), -self.fx * x * zi * zi],
            [T::zero(), self.fy * zi, -self.fy * y * zi * zi],
        ]
    }
}

/// `W Sigma W^T` for a row-major 3x3 covariance.
pub(crate) fn rotate_cov<T: Real>(w: &[[T; 3]; 3], sigma: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut ws = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            ws[i][j] = (0..3).map(|k| w[i][k] * sigma[k][j]).sum();
        }
    }
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| ws[i][k] * w[j][k]).sum();
        }
    }
    out
}

/// `J C J^T` as `(xx, xy, yy)`.
pub(crate) fn jcj<T: Real>(j: &[[T; 3]; 2], c: &[[T; 3]; 3]) -> [T; 3] {
    let mut jc = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for b in 0..3 {
            jc[a][b] = (0..3).map(|k| j[a][k] * c[k][b]).sum();
        }
    }
    let e = |a: usize, b: usize| (0..3).map(|k| jc[a][k] * j[b][k]).sum::<T>();
    [e(0, 0), e(0, 1), e(1, 1)]
}

pub(crate) fn project_t<T: Real>(g: &Activated<T>, cam: &CamT<T>, s: T) -> Projected2D<T> {
    let pc = cam.to_camera(g.mean);
    let z = pc[2];
    let mut out = Projected2D {
        mean2d: [T::zero(); 2],
        cov2d: [T::zero(); 3],
        depth: z,
        valid: false,
    };
    if !(z > cam.near) {
        return out;
    }
    out.mean2d = [cam.fx * pc[0] / z + cam.cx, cam.fy * pc[1] / z + cam.cy];
    let j = cam.jacobian(pc);
    out.cov2d = jcj(&j, &rotate_cov(&cam.r, &g.covariance()));
    let [a, b, c] = [out.cov2d[0] + s, out.cov2d[1], out.cov2d[2] + s];
    let det = a * c - b * b;
    if !(det > T::zero() && a > T::zero()) {
        return out;
    }
    let half = (a + c) / T::lit(2.0);
    let lmax = half + (half * half - det).max(T::zero()).sqrt();
    let margin = T::lit(3.0) * lmax.sqrt();
    let [u, v] = out.mean2d;
    out.valid = u >= -margin
        && v >= -margin
        && u <= T::lit(cam.width as f64) + margin
        && v <= T::lit(cam.height as f64) + margin;
    out
}

/// EWA projection of an activated Gaussian under low-pass dilation `s`.
///
/// `s` only enters the validity test; `cov2d` is reported undilated.
pub fn project_gaussian<T: Real>(g: &Activated<T>, cam: &Camera, s: f64) -> Projected2D<T> {
    project_t(g, &CamT::new(cam), T::lit(s))
}

/// Stable ascending order by depth over the valid entries; ties keep input order.
pub fn depth_order<T: Real>(projected: &[Projected2D<T>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..projected.len()).filter(|&i| projected[i].valid).collect();
    idx.sort_by(|&a, &b| {
        projected[a]
            .depth
            .partial_cmp(&projected[b].depth)
            .expect("finite depths")
            .then(a.cmp(&b))
    });
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::GaussianSet;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn one(pos: [f64; 3], log_scale: [f64; 3], rot: [f64; 4]) -> Activated<f64> {
        let mut g = GaussianSet::default();
        g.push(pos, log_scale, rot, 0.0, [0.0; 3]);
        g.activate(0)
    }

    #[test]
    fn on_axis_mean_lands_on_principal_point() {
        let cam = Camera::canonical(64, 64, 50.0);
        let p = project_gaussian(&one([0.0, 0.0, 2.0], [-3.0; 3], [1.0, 0.0, 0.0, 0.0]), &cam, 0.3);
        assert!(p.valid);
        assert_eq!(p.mean2d, [32.0, 32.0]);
    }

    #[test]
    fn behind_near_plane_is_invalid() {
        let cam = Camera::canonical(64, 64, 50.0);
        let p = project_gaussian(&one([0.0, 0.0, cam.near / 2.0], [-3.0; 3], [1.0, 0.0, 0.0, 0.0]), &cam, 0.3);
        assert!(!p.valid);
    }

    #[test]
    fn depth_order_examples() {
        let mk = |d: f64| Projected2D {
            mean2d: [0.0; 2],
            cov2d: [1.0, 0.0, 1.0],
            depth: d,
            valid: true,
        };
        assert_eq!(depth_order(&[mk(3.0), mk(1.0), mk(2.0)]), vec![1, 2, 0]);
        assert_eq!(depth_order(&[mk(2.0), mk(2.0), mk(2.0)]), vec![0, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps: Vec<_> = (0..200).map(|_| mk((rng.random_range(0..20) as f64) * 0.5)).collect();
        let mut oracle: Vec<(f64, usize)> = ps.iter().enumerate().map(|(i, p)| (p.depth, i)).collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: Vec<usize> = oracle.into_iter().map(|(_, i)| i).collect();
        assert_eq!(depth_order(&ps), expected);
    }

    #[test]
    fn cov2d_matches_monte_carlo_projection() {
        // A small, far Gaussian keeps the linearized projection accurate.
        let cam = Camera::look_at(
            Vector3::new(0.3, -0.2, -0.5),
            Vector3::new(0.2, 0.1, 3.0),
            Vector3::new(0.0, -1.0, 0.0),
            64,
            64,
            60.0,
        );
        let g = one([0.5, 0.3, 3.0], [-3.2, -4.0, -3.6], [0.9, 0.3, -0.2, 0.4]);
        let p = project_gaussian(&g, &cam, 0.0);
        assert!(p.valid);
        let sigma = nalgebra::Matrix3::from_fn(|i, j| g.covariance()[i][j]);
        let chol = sigma.cholesky().unwrap().l();
        let mu = Vector3::from(g.mean);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let (mut su, mut sv, mut suu, mut suv, mut svv) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let e = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            let (u, v) = cam.project(&cam.to_camera(&(mu + chol * e)));
            su += u;
            sv += v;
            suu += u * u;
            suv += u * v;
            svv += v * v;
        }
        let nf = n as f64;
        let (mu_u, mu_v) = (su / nf, sv / nf);
        let emp = [suu / nf - mu_u * mu_u, suv / nf - mu_u * mu_v, svv / nf - mu_v * mu_v];
        let fro = |c: [f64; 3]| (c[0] * c[0] + 2.0 * c[1] * c[1] + c[2] * c[2]).sqrt();
        let diff = [emp[0] - p.cov2d[0], emp[1] - p.cov2d[1], emp[2] - p.cov2d[2]];
        assert!(fro(diff) / fro(emp) < 0.02, "rel err {}", fro(diff) / fro(emp));
    }
}
