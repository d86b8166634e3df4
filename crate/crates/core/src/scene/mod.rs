//! Procedural multi-view scenes with exact ground truth.
//!
//! Geometry lives in an object frame (y up) and is mapped into the canonical
//! frame, which is the first rig camera's camera frame. Ray casting here is
//! closed-form and shares no code with the splatting rasterizer.

mod features;
pub mod io;

pub use features::{correspondences, synth_features, Correspondence};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::splat::Camera;
use crate::tensor::Array;

/// Object id of pixels that hit no geometry.
pub const BACKGROUND: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("degenerate scene spec: {0}")]
    Spec(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureMode {
    Flat,
    Checker,
}

impl TextureMode {
    pub fn name(self) -> &'static str {
        match self {
            TextureMode::Flat => "flat",
            TextureMode::Checker => "checker",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "flat" => Some(TextureMode::Flat),
            "checker" => Some(TextureMode::Checker),
            _ => None,
        }
    }
}

/// Everything that determines a scene besides its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Number of objects, counting the ground plane when present.
    pub n_objects: usize,
    pub texture_mode: TextureMode,
    /// Half-size of the object-frame bounding cube.
    pub extent: f64,
    /// Checker cell edge, in units of `extent`.
    pub checker_size: f64,
    pub ground: bool,
    pub n_views: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    /// Camera distance to the look-at point, in units of `extent`.
    pub radius: f64,
    /// Total azimuth covered by the rig, in degrees.
    pub azimuth_span: f64,
    pub elevation_deg: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_objects: 3,
            texture_mode: TextureMode::Checker,
            extent: 1.0,
            checker_size: 0.5,
            ground: false,
            n_views: 12,
            width: 64,
            height: 64,
            fov_deg: 50.0,
            radius: 3.2,
            azimuth_span: 360.0,
            elevation_deg: (15.0, 35.0),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Spec(m.into()));
        if !(1..=64).contains(&self.n_objects) {
            return bad("n_objects must lie in [1, 64]");
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad("extent must be positive");
        }
        if self.n_views < 2 {
            return bad("a rig needs at least two cameras");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(self.fov_deg > 1.0 && self.fov_deg < 170.0) {
            return bad("field of view out of range");
        }
        if !(self.radius > 1.8) {
            return bad("cameras must stay outside the scene bounds");
        }
        if !(self.checker_size > 0.0) {
            return bad("checker size must be positive");
        }
        Ok(())
    }

    /// `key = value` lines, in a fixed order.
    pub fn to_lines(&self) -> Vec<String> {
        vec![
            format!("n_objects = {}", self.n_objects),
            format!("texture_mode = {}", self.texture_mode.name()),
            format!("extent = {}", self.extent),
            format!("checker_size = {}", self.checker_size),
            format!("ground = {}", self.ground),
            format!("n_views = {}", self.n_views),
            format!("width = {}", self.width),
            format!("height = {}", self.height),
            format!("fov_deg = {}", self.fov_deg),
            format!("radius = {}", self.radius),
            format!("azimuth_span = {}", self.azimuth_span),
            format!("elevation_min = {}", self.elevation_deg.0),
            format!("elevation_max = {}", self.elevation_deg.1),
        ]
    }

    /// Apply one `key = value` setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), SceneError> {
        let err = || SceneError::Spec(format!("bad value `{value}` for `{key}`"));
        let f = || value.parse::<f64>().map_err(|_| err());
        let u = || value.parse::<usize>().map_err(|_| err());
        match key {
            "n_objects" => self.n_objects = u()?,
            "texture_mode" => self.texture_mode = TextureMode::parse(value).ok_or_else(err)?,
            "extent" => self.extent = f()?,
            "checker_size" => self.checker_size = f()?,
            "ground" => self.ground = value.parse().map_err(|_| err())?,
            "n_views" => self.n_views = u()?,
            "width" => self.width = u()?,
            "height" => self.height = u()?,
            "fov_deg" => self.fov_deg = f()?,
            "radius" => self.radius = f()?,
            "azimuth_span" => self.azimuth_span = f()?,
            "elevation_min" => self.elevation_deg.0 = f()?,
            "elevation_max" => self.elevation_deg.1 = f()?,
            _ => return Err(SceneError::Spec(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        self.width as f64 / (2.0 * (self.fov_deg.to_radians() / 2.0).tan())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Axis-aligned box in the object frame.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Horizontal square `|x|, |z| <= half` at height `y` in the object frame.
    Ground { y: f64, half: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub object_id: u32,
    pub albedo: [f64; 3],
    pub texture: TextureMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    /// Object frame to canonical frame: `x_c = rotation * x_o + translation`.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub rig: Vec<Camera>,
}

/// Ground truth for one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    /// `H x W x 3` in [0, 1].
    pub image: Array<f32>,
    /// `H x W` camera-space depth, `+inf` where nothing is hit.
    pub depth: Array<f32>,
    /// Row-major object ids, [`BACKGROUND`] where nothing is hit.
    pub ids: Vec<u32>,
    pub camera: Camera,
}

const LIGHT: [f64; 3] = [0.4, 0.8, 0.45];
const CHECKER_DARK: f64 = 0.45;

fn pick_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // A dominant channel keeps neighbouring objects distinguishable.
    let hi = rng.random_range(0..3);
    std::array::from_fn(|k| if k == hi { rng.random_range(0.75..0.95) } else { rng.random_range(0.1..0.6) })
}

/// Deterministic procedural scene.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = spec.extent;
    let floor = -0.5 * e;
    let mut primitives = Vec::with_capacity(spec.n_objects);
    if spec.ground {
        primitives.push(Primitive {
            shape: Shape::Ground { y: floor, half: e },
            object_id: 0,
            albedo: [0.55, 0.55, 0.5],
            texture: spec.texture_mode,
        });
    }
    let n_boxes = spec.n_objects - primitives.len();
    // Small objects when many share the floor.
    let size_hi = (0.9 / (n_boxes as f64).sqrt()).clamp(0.2, 0.7);
    for _ in 0..n_boxes {
        let half: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0) * size_hi * e);
        let cx = rng.random_range(-(e - half[0])..(e - half[0]));
        let cz = rng.random_range(-(e - half[2])..(e - half[2]));
        let height = 2.0 * half[1];
        primitives.push(Primitive {
            shape: Shape::Box {
                min: [cx - half[0], floor, cz - half[2]],
                max: [cx + half[0], floor + height, cz + half[2]],
            },
            object_id: primitives.len() as u32,
            albedo: pick_color(&mut rng),
            texture: spec.texture_mode,
        });
    }

    let mut scene = SyntheticScene {
        spec: spec.clone(),
        seed,
        primitives,
        rotation: Matrix3::identity(),
        translation: Vector3::zeros(),
        rig: Vec::new(),
    };
    let span = spec.azimuth_span;
    let step = if (span - 360.0).abs() < 1e-9 {
        span / spec.n_views as f64
    } else {
        span / (spec.n_views - 1).max(1) as f64
    };
    let mut object_rig = Vec::with_capacity(spec.n_views);
    for k in 0..spec.n_views {
        let jitter = if k == 0 { 0.0 } else { rng.random_range(-0.15..0.15) * step };
        let (lo, hi) = spec.elevation_deg;
        let el = if hi > lo { rng.random_range(lo..hi) } else { lo };
        object_rig.push(scene.orbit_camera(step * k as f64 + jitter, el));
    }

    // Re-express everything in the first camera's frame.
    scene.rotation = object_rig[0].rotation;
    scene.translation = object_rig[0].translation;
    let mut rig: Vec<Camera> = object_rig.iter().map(|c| scene.object_to_canonical(c)).collect();
    rig[0].rotation = Matrix3::identity();
    rig[0].translation = Vector3::zeros();
    scene.rig = rig;
    Ok(scene)
}

struct Hit {
    t: f64,
    id: u32,
    color: [f64; 3],
}

fn checker(p: &Vector3<f64>, cell: f64) -> bool {
    let k = (p.x / cell).floor() + (p.y / cell).floor() + (p.z / cell).floor();
    k.rem_euclid(2.0) == 1.0
}

fn shade(prim: &Primitive, p: &Vector3<f64>, normal: &Vector3<f64>, cell: f64) -> [f64; 3] {
    let l = Vector3::from(LIGHT).normalize();
    let lambert = 0.55 + 0.45 * normal.dot(&l).max(0.0);
    let tex = match prim.texture {
        TextureMode::Checker if checker(p, cell) => CHECKER_DARK,
        _ => 1.0,
    };
    prim.albedo.map(|a| (a * lambert * tex).clamp(0.0, 1.0))
}

impl SyntheticScene {
    /// Camera on the viewing orbit at azimuth/elevation in degrees, looking
    /// at the scene center, expressed in the current canonical frame.
    pub fn orbit_camera(&self, azimuth_deg: f64, elevation_deg: f64) -> Camera {
        let spec = &self.spec;
        let e = spec.extent;
        let target = Vector3::new(0.0, -0.2 * e, 0.0);
        let up = Vector3::new(0.0, -1.0, 0.0);
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let r = spec.radius * e;
        let eye = target + Vector3::new(r * el.cos() * az.sin(), r * el.sin(), -r * el.cos() * az.cos());
        let cam = Camera::look_at(eye, target, up, spec.width, spec.height, spec.focal());
        self.object_to_canonical(&cam)
    }

    /// Re-express an object-frame camera in the canonical frame.
    fn object_to_canonical(&self, c: &Camera) -> Camera {
        let rotation = c.rotation * self.rotation.transpose();
        let translation = c.translation - rotation * self.translation;
        Camera {
            rotation: Rotation3::from_matrix(&rotation).into_inner(),
            translation,
            ..c.clone()
        }
    }

    /// Largest distance from the canonical origin to a corner of the bounds.
    pub fn canonical_extent(&self) -> f64 {
        let e = self.spec.extent;
        let mut best: f64 = 0.0;
        for corner in 0..8 {
            let p = Vector3::new(
                if corner & 1 == 0 { -e } else { e },
                if corner & 2 == 0 { -e } else { e },
                if corner & 4 == 0 { -e } else { e },
            );
            best = best.max((self.rotation * p + self.translation).norm());
        }
        best
    }

    /// Object-frame point to canonical frame.
    pub fn to_canonical(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Closest intersection along `origin + t * dir` (object frame), `t > 0`.
    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let cell = self.spec.checker_size * self.spec.extent;
        let mut best: Option<(f64, usize, Vector3<f64>)> = None;
        for (idx, prim) in self.primitives.iter().enumerate() {
            let hit = match prim.shape {
                Shape::Box { min, max } => intersect_box(origin, dir, &min, &max),
                Shape::Ground { y, half } => {
                    if dir.y.abs() < 1e-12 {
                        None
                    } else {
                        let t = (y - origin.y) / dir.y;
                        let p = origin + dir * t;
                        (t > 0.0 && p.x.abs() <= half && p.z.abs() <= half)
                            .then(|| (t, Vector3::new(0.0, if dir.y < 0.0 { 1.0 } else { -1.0 }, 0.0)))
                    }
                }
            };
            if let Some((t, n)) = hit {
                if best.as_ref().is_none_or(|b| t < b.0) {
                    best = Some((t, idx, n));
                }
            }
        }
        best.map(|(t, idx, n)| {
            let prim = &self.primitives[idx];
            let p = origin + dir * t;
            Hit {
                t,
                id: prim.object_id,
                color: shade(prim, &p, &n, cell),
            }
        })
    }

    /// Depth and object id seen through continuous pixel `(u, v)`.
    pub fn probe(&self, cam: &Camera, u: f64, v: f64) -> Option<(f64, u32)> {
        let origin = self.rotation.transpose() * (cam.center() - self.translation);
        let dc = Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
        let dir = self.rotation.transpose() * (cam.rotation.transpose() * dc);
        self.cast(&origin, &dir).map(|h| (h.t, h.id))
    }

    /// Exact image, depth and id maps for `cam`.
    pub fn trace_ground_truth(&self, cam: &Camera) -> ViewRecord {
        let (w, h) = (cam.width, cam.height);
        let rows: Vec<(Vec<f32>, Vec<f32>, Vec<u32>)> = (0..h)
            .into_par_iter()
            .map(|row| {
                let mut img = Vec::with_capacity(w * 3);
                let mut depth = Vec::with_capacity(w);
                let mut ids = Vec::with_capacity(w);
                let center_c = cam.center();
                let origin = self.rotation.transpose() * (center_c - self.translation);
                for col in 0..w {
                    let u = col as f64 + 0.5;
                    let v = row as f64 + 0.5;
                    // Camera-space direction with unit z, so the ray parameter is depth.
                    let dc = Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
                    let dir = self.rotation.transpose() * (cam.rotation.transpose() * dc);
                    match self.cast(&origin, &dir) {
                        Some(hit) => {
                            img.extend(hit.color.map(|c| c as f32));
                            depth.push(hit.t as f32);
                            ids.push(hit.id);
                        }
                        None => {
                            img.extend([0.0f32; 3]);
                            depth.push(f32::INFINITY);
                            ids.push(BACKGROUND);
                        }
                    }
                }
                (img, depth, ids)
            })
            .collect();
        let mut image = Vec::with_capacity(w * h * 3);
        let mut depth = Vec::with_capacity(w * h);
        let mut ids = Vec::with_capacity(w * h);
        for (i, d, o) in rows {
            image.extend(i);
            depth.extend(d);
            ids.extend(o);
        }
        ViewRecord {
            image: Array::new(&[h, w, 3], image).expect("row lengths"),
            depth: Array::new(&[h, w], depth).expect("row lengths"),
            ids,
            camera: cam.clone(),
        }
    }

    /// Ground truth for every rig camera.
    pub fn render_rig(&self) -> Vec<ViewRecord> {
        self.rig.iter().map(|c| self.trace_ground_truth(c)).collect()
    }
}

/// Slab test; returns the entry distance and outward face normal.
fn intersect_box(o: &Vector3<f64>, d: &Vector3<f64>, min: &[f64; 3], max: &[f64; 3]) -> Option<(f64, Vector3<f64>)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 1.0;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k] < min[k] || o[k] > max[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let (t0, t1) = ((min[k] - o[k]) * inv, (max[k] - o[k]) * inv);
        let (lo, hi, s) = if t0 < t1 { (t0, t1, -1.0) } else { (t1, t0, 1.0) };
        if lo > t_near {
            t_near = lo;
            axis = k;
            sign = s;
        }
        t_far = t_far.min(hi);
    }
    if t_near > t_far || t_near <= 0.0 {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis] = sign;
    Some((t_near, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(n_objects: usize, n_views: usize) -> SceneSpec {
        SceneSpec {
            n_objects,
            n_views,
            width: 32,
            height: 32,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&spec(4, 6), 7).unwrap();
        let b = generate_scene(&spec(4, 6), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace_ground_truth(&a.rig[2]), b.trace_ground_truth(&b.rig[2]));
    }

    #[test]
    fn first_camera_is_canonical() {
        let s = generate_scene(&spec(3, 5), 1).unwrap();
        assert_eq!(s.rig[0].rotation, Matrix3::identity());
        assert_eq!(s.rig[0].translation, Vector3::zeros());
        for c in &s.rig {
            c.validate().unwrap();
        }
    }

    #[test]
    fn single_object_ids() {
        let s = generate_scene(&spec(1, 3), 3).unwrap();
        let v = s.trace_ground_truth(&s.rig[0]);
        let ids: BTreeSet<u32> = v.ids.iter().copied().collect();
        assert_eq!(ids, BTreeSet::from([0, BACKGROUND]));
    }

    #[test]
    fn every_object_seen_twice() {
        let s = generate_scene(&spec(8, 12), 5).unwrap();
        let mut seen = [0usize; 8];
        for v in s.render_rig() {
            let ids: BTreeSet<u32> = v.ids.iter().copied().collect();
            for id in ids.into_iter().filter(|&i| i != BACKGROUND) {
                seen[id as usize] += 1;
            }
        }
        assert!(seen.iter().all(|&n| n >= 2), "{seen:?}");
    }

    #[test]
    fn rig_sees_most_of_the_bounds() {
        let s = generate_scene(&spec(3, 12), 9).unwrap();
        let e = s.spec.extent;
        let corners: Vec<_> = (0..8)
            .map(|c| {
                s.to_canonical(&Vector3::new(
                    if c & 1 == 0 { -e } else { e },
                    if c & 2 == 0 { -e } else { e },
                    if c & 4 == 0 { -e } else { e },
                ))
            })
            .collect();
        for cam in &s.rig {
            let inside = corners
                .iter()
                .filter(|p| {
                    let pc = cam.to_camera(p);
                    let (u, v) = cam.project(&pc);
                    pc.z > 0.0 && (0.0..cam.width as f64).contains(&u) && (0.0..cam.height as f64).contains(&v)
                })
                .count();
            assert!(inside >= 4, "{inside} corners in view");
        }
    }

    #[test]
    fn empty_view_is_background() {
        let s = generate_scene(&spec(2, 3), 2).unwrap();
        let away = Camera {
            rotation: Rotation3::from_euler_angles(0.0, std::f64::consts::PI, 0.0).into_inner(),
            ..s.rig[0].clone()
        };
        let v = s.trace_ground_truth(&away);
        assert!(v.ids.iter().all(|&i| i == BACKGROUND));
        assert!(v.depth.data().iter().all(|d| d.is_infinite()));
        assert!(v.image.data().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn on_axis_face_depth_is_exact() {
        let mut s = generate_scene(&spec(1, 2), 0).unwrap();
        s.rotation = Matrix3::identity();
        s.translation = Vector3::zeros();
        s.primitives[0].shape = Shape::Box {
            min: [-0.5, -0.5, 2.0],
            max: [0.5, 0.5, 3.0],
        };
        let mut cam = Camera::canonical(33, 33, 30.0);
        cam.cx = 16.5;
        cam.cy = 16.5;
        let v = s.trace_ground_truth(&cam);
        assert_eq!(v.depth.at(&[16, 16]), 2.0);
    }

    #[test]
    fn overlapping_boxes_follow_nearest_surface() {
        let mut s = generate_scene(&spec(2, 4), 11).unwrap();
        s.primitives[0].shape = Shape::Box {
            min: [-0.6, -0.5, -0.6],
            max: [0.2, 0.3, 0.2],
        };
        s.primitives[1].shape = Shape::Box {
            min: [-0.2, -0.5, -0.2],
            max: [0.6, 0.1, 0.6],
        };
        for cam in &s.rig {
            let v = s.trace_ground_truth(cam);
            let origin = s.rotation.transpose() * (cam.center() - s.translation);
            for row in 0..cam.height {
                for col in 0..cam.width {
                    let dc = Vector3::new(
                        (col as f64 + 0.5 - cam.cx) / cam.fx,
                        (row as f64 + 0.5 - cam.cy) / cam.fy,
                        1.0,
                    );
                    let dir = s.rotation.transpose() * (cam.rotation.transpose() * dc);
                    // Brute force: every face plane of every box, with in-face bounds.
                    let mut best = (f64::INFINITY, BACKGROUND);
                    for p in &s.primitives {
                        if let Shape::Box { min, max } = p.shape {
                            for axis in 0..3 {
                                for bound in [min[axis], max[axis]] {
                                    if dir[axis] == 0.0 {
                                        continue;
                                    }
                                    let t = (bound - origin[axis]) / dir[axis];
                                    let q = origin + dir * t;
                                    let on_face = (0..3)
                                        .filter(|&k| k != axis)
                                        .all(|k| q[k] >= min[k] - 1e-12 && q[k] <= max[k] + 1e-12);
                                    if t > 0.0 && on_face && t < best.0 {
                                        best = (t, p.object_id);
                                    }
                                }
                            }
                        }
                    }
                    assert_eq!(v.ids[row * cam.width + col], best.1);
                }
            }
        }
    }
}
