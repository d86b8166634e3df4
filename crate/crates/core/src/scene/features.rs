use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{SceneError, SyntheticScene, ViewRecord, BACKGROUND};
use crate::splat::Camera;
use crate::tensor::Array;

/// Per-patch one-hot object features with independent Gaussian noise.
///
/// Returns `h x w x dim` with `h = H / patch`, `w = W / patch`. Channel
/// `n_objects` marks background.
pub fn synth_features(
    scene: &SyntheticScene,
    cam: &Camera,
    dim: usize,
    patch: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Array<f32>, SceneError> {
    let n_obj = scene.spec.n_objects;
    if dim < n_obj + 1 {
        return Err(SceneError::Spec(format!("feature dim {dim} cannot hold {n_obj} objects plus background")));
    }
    if patch == 0 || !cam.width.is_multiple_of(patch) || !cam.height.is_multiple_of(patch) {
        return Err(SceneError::Spec(format!("patch {patch} does not tile {}x{}", cam.width, cam.height)));
    }
    let (h, w) = (cam.height / patch, cam.width / patch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| SceneError::Spec(e.to_string()))?;
    let mut out = Array::zeros(&[h, w, dim]);
    let half = patch as f64 / 2.0;
    for r in 0..h {
        for c in 0..w {
            let id = scene
                .probe(cam, (c * patch) as f64 + half, (r * patch) as f64 + half)
                .map_or(BACKGROUND, |(_, id)| id);
            let slot = if id == BACKGROUND { n_obj } else { id as usize };
            let row = &mut out.data_mut()[(r * w + c) * dim..(r * w + c + 1) * dim];
            for (k, v) in row.iter_mut().enumerate() {
                let base = if k == slot { 1.0 } else { 0.0 };
                *v = (base + noise.sample(&mut rng)) as f32;
            }
        }
    }
    Ok(out)
}

/// Ground-truth pixel correspondences from view `a` into view `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub width: usize,
    pub height: usize,
    /// Row-major over `a`; continuous pixel coordinates in `b` where the
    /// surface point is visible there.
    pub target: Vec<Option<[f64; 2]>>,
}

/// Reproject every surface pixel of `a` into `b`, rejecting points occluded in `b`.
pub fn correspondences(a: &ViewRecord, b: &ViewRecord) -> Correspondence {
    let ca = &a.camera;
    let cb = &b.camera;
    let (w, h) = (ca.width, ca.height);
    let mut target = vec![None; w * h];
    for row in 0..h {
        for col in 0..w {
            let z = a.depth.data()[row * w + col] as f64;
            if !z.is_finite() {
                continue;
            }
            let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
            let pc = Vector3::new((u - ca.cx) / ca.fx * z, (v - ca.cy) / ca.fy * z, z);
            let world = ca.rotation.transpose() * (pc - ca.translation);
            let qc = cb.to_camera(&world);
            if qc.z <= cb.near {
                continue;
            }
            let (ub, vb) = cb.project(&qc);
            if !(ub >= 0.0 && vb >= 0.0 && ub < cb.width as f64 && vb < cb.height as f64) {
                continue;
            }
            let seen = b.depth.data()[vb as usize * cb.width + ub as usize] as f64;
            if (seen - qc.z).abs() <= 0.02 * qc.z {
                target[row * w + col] = Some([ub, vb]);
            }
        }
    }
    Correspondence {
        width: w,
        height: h,
        target,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    fn scene() -> SyntheticScene {
        let spec = SceneSpec {
            n_objects: 4,
            n_views: 6,
            width: 32,
            height: 32,
            azimuth_span: 60.0,
            ..SceneSpec::default()
        };
        generate_scene(&spec, 21).unwrap()
    }

    #[test]
    fn noiseless_features_are_one_hot_ids() {
        let s = scene();
        let f = synth_features(&s, &s.rig[1], 6, 4, 0.0, 3).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let id = s.probe(&s.rig[1], c as f64 * 4.0 + 2.0, r as f64 * 4.0 + 2.0).map_or(4, |h| h.1 as usize);
                let row = &f.data()[(r * 8 + c) * 6..(r * 8 + c + 1) * 6];
                let arg = (0..6).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
                assert_eq!(arg, id);
            }
        }
    }

    #[test]
    fn noiseless_features_are_view_invariant() {
        let s = scene();
        let a = synth_features(&s, &s.rig[0], 6, 4, 0.0, 1).unwrap();
        let b = synth_features(&s, &s.rig[3], 6, 4, 0.0, 2).unwrap();
        // Any two patches with the same object carry bit-identical vectors.
        let rows = |f: &Array<f32>| f.data().chunks(6).map(|c| c.to_vec()).collect::<Vec<_>>();
        let (ra, rb) = (rows(&a), rows(&b));
        for x in &ra {
            for y in &rb {
                let same_id = x.iter().zip(y).all(|(p, q)| (*p == 1.0) == (*q == 1.0));
                if same_id {
                    assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn noisy_features_keep_object_affinity() {
        let s = scene();
        let ids = |cam: &Camera| -> Vec<usize> {
            (0..64)
                .map(|p| s.probe(cam, (p % 8) as f64 * 4.0 + 2.0, (p / 8) as f64 * 4.0 + 2.0).map_or(4, |h| h.1 as usize))
                .collect()
        };
        let a = synth_features(&s, &s.rig[0], 8, 4, 0.3, 1).unwrap();
        let b = synth_features(&s, &s.rig[2], 8, 4, 0.3, 2).unwrap();
        let (ia, ib) = (ids(&s.rig[0]), ids(&s.rig[2]));
        let cos = |x: &[f32], y: &[f32]| {
            let d: f32 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            d / (x.iter().map(|v| v * v).sum::<f32>().sqrt() * y.iter().map(|v| v * v).sum::<f32>().sqrt())
        };
        let (mut same, mut ns, mut cross, mut nc) = (0.0, 0, 0.0, 0);
        for p in 0..64 {
            for q in 0..64 {
                let c = cos(&a.data()[p * 8..(p + 1) * 8], &b.data()[q * 8..(q + 1) * 8]);
                if ia[p] == ib[q] {
                    assert!(c < 1.0);
                    same += c;
                    ns += 1;
                } else {
                    cross += c;
                    nc += 1;
                }
            }
        }
        assert!(same / ns as f32 > cross / nc as f32);
    }

    #[test]
    fn too_narrow_feature_dim_is_rejected() {
        let s = scene();
        assert!(synth_features(&s, &s.rig[0], 4, 4, 0.0, 0).is_err());
    }

    #[test]
    fn self_correspondence_is_identity() {
        let s = scene();
        let v = s.trace_ground_truth(&s.rig[1]);
        let c = correspondences(&v, &v);
        for (p, t) in c.target.iter().enumerate() {
            if let Some([u, vv]) = t {
                assert!((u - ((p % 32) as f64 + 0.5)).abs() < 1e-3);
                assert!((vv - ((p / 32) as f64 + 0.5)).abs() < 1e-3);
            }
        }
        assert!(c.target.iter().filter(|t| t.is_some()).count() > 100);
    }
}
