use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::real::Real;
use crate::scene::ViewRecord;
use crate::splat::GaussianSet;

use super::TrainError;

fn logit(p: f64) -> f64 {
    let p = p.clamp(0.02, 0.98);
    (p / (1.0 - p)).ln()
}

/// `count` Gaussians on surface points back-projected from ground-truth
/// depth, colored by their pixel. Isotropic scales are sized so the set
/// roughly tiles the visible foreground of one view.
pub fn seed_from_depth<T: Real>(views: &[ViewRecord], count: usize, seed: u64) -> Result<GaussianSet<T>, TrainError> {
    let pixels: Vec<(usize, usize)> = views
        .iter()
        .enumerate()
        .flat_map(|(v, rec)| {
            rec.depth
                .data()
                .iter()
                .enumerate()
                .filter(|(_, d)| d.is_finite())
                .map(move |(p, _)| (v, p))
        })
        .collect();
    if pixels.is_empty() {
        return Err(TrainError::Config("no foreground pixel to seed from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_view = pixels.len() as f64 / views.len() as f64;
    let mut g = GaussianSet::default();
    for _ in 0..count {
        let (v, p) = pixels[rng.random_range(0..pixels.len())];
        let rec = &views[v];
        let cam = &rec.camera;
        let (row, col) = (p / cam.width, p % cam.width);
        let z = rec.depth.data()[p] as f64;
        let (u, w) = (col as f64 + 0.5, row as f64 + 0.5);
        let pc = Vector3::new((u - cam.cx) / cam.fx * z, (w - cam.cy) / cam.fy * z, z);
        let world = cam.rotation.transpose() * (pc - cam.translation);
        // Pixel footprint times the side of the foreground share per Gaussian.
        let side = (per_view / count as f64).sqrt().max(1.0);
        let scale = 0.5 * side * z / cam.fx;
        let color: [T; 3] = std::array::from_fn(|c| T::lit(logit(rec.image.data()[p * 3 + c] as f64)));
        let ls = T::lit(scale.ln());
        g.push(
            [0, 1, 2].map(|k| T::lit(world[k])),
            [ls; 3],
            [T::one(), T::zero(), T::zero(), T::zero()],
            T::lit(2.0),
            color,
        );
    }
    Ok(g)
}
