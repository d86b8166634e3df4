use rayon::prelude::*;

use crate::real::Real;
use crate::tensor::Array;

use super::gaussians::{quat_to_matrix, Activated, GaussianSet};
use super::project::{depth_order, project_t, rotate_cov, CamT, Projected2D};
use super::{Camera, SplatError};

/// Tile edge in pixels.
pub const TILE: usize = 16;
/// Per-Gaussian alpha is clamped to this value.
pub const ALPHA_MAX: f64 = 0.999;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    pub color: bool,
    pub depth: bool,
    pub features: bool,
}

impl Channels {
    pub const COLOR: Channels = Channels { color: true, depth: false, features: false };
    pub const FEATURES: Channels = Channels { color: false, depth: false, features: true };
    pub const ALL: Channels = Channels { color: true, depth: true, features: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterConfig {
    /// Isotropic low-pass dilation added to every projected covariance.
    pub s: f64,
    pub background: [f64; 3],
    pub channels: Channels,
}

impl RasterConfig {
    pub fn new(s: f64, channels: Channels) -> Self {
        RasterConfig {
            s,
            background: [0.0; 3],
            channels,
        }
    }
}

/// Composited images. Absent channels are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput<T> {
    /// `H x W x 3`.
    pub color: Option<Array<T>>,
    /// `H x W x d'`.
    pub features: Option<Array<T>>,
    /// `H x W` accumulated opacity.
    pub alpha: Array<T>,
    /// `H x W`, sum of blending weight times camera depth.
    pub depth: Option<Array<T>>,
    /// `H x W` transmittance left after the last Gaussian.
    pub transmittance: Array<T>,
}

/// Upstream gradients, shaped like the matching [`RenderOutput`] channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads<T> {
    pub color: Option<Array<T>>,
    pub features: Option<Array<T>>,
    pub alpha: Option<Array<T>>,
    pub depth: Option<Array<T>>,
}

impl<T> Default for RenderGrads<T> {
    fn default() -> Self {
        RenderGrads {
            color: None,
            features: None,
            alpha: None,
            depth: None,
        }
    }
}

/// Gradients with respect to every raw Gaussian parameter and the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads<T> {
    pub positions: Vec<[T; 3]>,
    pub log_scales: Vec<[T; 3]>,
    pub rotations: Vec<[T; 4]>,
    pub opacity_logits: Vec<T>,
    pub color_logits: Vec<[T; 3]>,
    pub features: Vec<T>,
    /// Norm of the screen-space mean gradient, per Gaussian.
    pub mean2d_norms: Vec<T>,
    /// Camera-frame increment `(rotation axis-angle, translation)`.
    pub camera: [T; 6],
}

impl<T: Real> GaussianGrads<T> {
    fn zeros(n: usize, feature_dim: usize) -> Self {
        let z = T::zero();
        GaussianGrads {
            positions: vec![[z; 3]; n],
            log_scales: vec![[z; 3]; n],
            rotations: vec![[z; 4]; n],
            opacity_logits: vec![z; n],
            color_logits: vec![[z; 3]; n],
            features: vec![z; n * feature_dim],
            mean2d_norms: vec![z; n],
            camera: [z; 6],
        }
    }
}

/// Offsets of each channel inside the per-Gaussian attribute vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    color: Option<usize>,
    alpha: usize,
    depth: Option<usize>,
    features: Option<usize>,
    feature_dim: usize,
    dim: usize,
}

impl Layout {
    fn new(ch: Channels, feature_dim: usize) -> Self {
        let mut dim = 0;
        let mut take = |on: bool, w: usize| {
            on.then(|| {
                dim += w;
                dim - w
            })
        };
        let color = take(ch.color, 3);
        let alpha = take(true, 1).expect("alpha is always rendered");
        let depth = take(ch.depth, 1);
        let features = take(ch.features, feature_dim);
        Layout {
            color,
            alpha,
            depth,
            features,
            feature_dim,
            dim,
        }
    }
}

/// Per-Gaussian screen-space quantities shared by forward and backward.
struct Prepared<T> {
    cam: CamT<T>,
    layout: Layout,
    order: Vec<usize>,
    act: Vec<Activated<T>>,
    proj: Vec<Projected2D<T>>,
    conic: Vec<[T; 3]>,
    attrs: Vec<T>,
    background: Vec<T>,
    tiles_x: usize,
    tiles_y: usize,
    lists: Vec<Vec<u32>>,
}

struct Hit<T> {
    a: T,
    e: T,
    dx: T,
    dy: T,
    clamped: bool,
}

impl<T: Real> Prepared<T> {
    fn new(g: &GaussianSet<T>, cam: &Camera, cfg: &RasterConfig) -> Result<Self, SplatError> {
        cam.validate()?;
        if cfg.channels.features && g.feature_dim == 0 {
            return Err(SplatError::MissingFeatures);
        }
        if let Some(index) = g.first_non_finite() {
            return Err(SplatError::NonFinite { index });
        }
        let n = g.len();
        let camt = CamT::new(cam);
        let s = T::lit(cfg.s);
        let layout = Layout::new(cfg.channels, g.feature_dim);
        let act: Vec<_> = (0..n).map(|i| g.activate(i)).collect();
        let proj: Vec<_> = act.iter().map(|a| project_t(a, &camt, s)).collect();
        let order = depth_order(&proj);

        let mut conic = vec![[T::zero(); 3]; n];
        let mut attrs = vec![T::zero(); n * layout.dim];
        for &i in &order {
            let [a, b, c] = proj[i].cov2d;
            let (a, c) = (a + s, c + s);
            let det = a * c - b * b;
            conic[i] = [c / det, -b / det, a / det];
            let row = &mut attrs[i * layout.dim..(i + 1) * layout.dim];
            if let Some(o) = layout.color {
                row[o..o + 3].copy_from_slice(&act[i].color);
            }
            row[layout.alpha] = T::one();
            if let Some(o) = layout.depth {
                row[o] = proj[i].depth;
            }
            if let Some(o) = layout.features {
                row[o..o + layout.feature_dim].copy_from_slice(g.feature(i));
            }
        }
        let mut background = vec![T::zero(); layout.dim];
        if let Some(o) = layout.color {
            for k in 0..3 {
                background[o + k] = T::lit(cfg.background[k]);
            }
        }

        let tiles_x = cam.width.div_ceil(TILE);
        let tiles_y = cam.height.div_ceil(TILE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for &i in &order {
            let Some((c0, c1, r0, r1)) = footprint(&proj[i], act[i].opacity.as_f64(), cfg.s, cam.width, cam.height)
            else {
                continue;
            };
            for ty in r0 / TILE..=r1 / TILE {
                for tx in c0 / TILE..=c1 / TILE {
                    lists[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
        Ok(Prepared {
            cam: camt,
            layout,
            order,
            act,
            proj,
            conic,
            attrs,
            background,
            tiles_x,
            tiles_y,
            lists,
        })
    }

    #[inline]
    fn attr(&self, i: usize) -> &[T] {
        &self.attrs[i * self.layout.dim..(i + 1) * self.layout.dim]
    }

    #[inline]
    fn hit(&self, i: usize, px: T, py: T) -> Option<Hit<T>> {
        let [mx, my] = self.proj[i].mean2d;
        let [ca, cb, cc] = self.conic[i];
        let (dx, dy) = (px - mx, py - my);
        let power = -T::lit(0.5) * (ca * dx * dx + cc * dy * dy) - cb * dx * dy;
        let e = power.exp();
        let raw = self.act[i].opacity * e;
        let max = T::lit(ALPHA_MAX);
        let clamped = raw >= max;
        let a = if clamped { max } else { raw };
        (a >= T::lit(ALPHA_MIN)).then_some(Hit { a, e, dx, dy, clamped })
    }

    /// Front-to-back compositing of one pixel; returns final transmittance.
    fn composite(&self, px: T, py: T, list: impl Iterator<Item = usize>, acc: &mut [T]) -> T {
        let mut tr = T::one();
        for i in list {
            let Some(h) = self.hit(i, px, py) else { continue };
            let w = h.a * tr;
            for (o, &v) in acc.iter_mut().zip(self.attr(i)) {
                *o += w * v;
            }
            tr *= T::one() - h.a;
        }
        tr
    }
}

/// Inclusive pixel box `(col0, col1, row0, row1)` that contains every pixel
/// center where the Gaussian's alpha can reach the skip threshold.
fn footprint<T: Real>(p: &Projected2D<T>, opacity: f64, s: f64, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    if !p.valid || opacity * 255.0 < 1.0 {
        return None;
    }
    // a >= 1/255 iff the Mahalanobis radius is at most sqrt(2 ln(255 sigma)).
    let r = (2.0 * (255.0 * opacity).ln()).max(0.0).sqrt();
    let ex = r * (p.cov2d[0].as_f64() + s).sqrt();
    let ey = r * (p.cov2d[2].as_f64() + s).sqrt();
    let [mx, my] = p.mean2d.map(|v| v.as_f64());
    let c0 = (mx - ex - 0.5).floor() - 1.0;
    let c1 = (mx + ex - 0.5).ceil() + 1.0;
    let r0 = (my - ey - 0.5).floor() - 1.0;
    let r1 = (my + ey - 0.5).ceil() + 1.0;
    let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
    if c1 < 0.0 || r1 < 0.0 || c0 > w || r0 > h {
        return None;
    }
    Some((c0.max(0.0) as usize, c1.min(w) as usize, r0.max(0.0) as usize, r1.min(h) as usize))
}

fn assemble<T: Real>(prep: &Prepared<T>, cam: &Camera, pixel: impl Fn(usize, usize) -> (Vec<T>, T)) -> RenderOutput<T> {
    let (w, h) = (cam.width, cam.height);
    let l = prep.layout;
    let mut color = l.color.map(|_| Array::zeros(&[h, w, 3]));
    let mut features = l.features.map(|_| Array::zeros(&[h, w, l.feature_dim]));
    let mut alpha = Array::zeros(&[h, w]);
    let mut depth = l.depth.map(|_| Array::zeros(&[h, w]));
    let mut transmittance = Array::zeros(&[h, w]);
    for row in 0..h {
        for col in 0..w {
            let (acc, tr) = pixel(row, col);
            let p = row * w + col;
            if let (Some(img), Some(o)) = (color.as_mut(), l.color) {
                for k in 0..3 {
                    img.data_mut()[p * 3 + k] = acc[o + k] + tr * prep.background[o + k];
                }
            }
            if let (Some(img), Some(o)) = (features.as_mut(), l.features) {
                img.data_mut()[p * l.feature_dim..(p + 1) * l.feature_dim].copy_from_slice(&acc[o..o + l.feature_dim]);
            }
            alpha.data_mut()[p] = acc[l.alpha];
            if let (Some(img), Some(o)) = (depth.as_mut(), l.depth) {
                img.data_mut()[p] = acc[o];
            }
            transmittance.data_mut()[p] = tr;
        }
    }
    RenderOutput {
        color,
        features,
        alpha,
        depth,
        transmittance,
    }
}

#[inline]
fn center<T: Real>(i: usize) -> T {
    T::lit(i as f64 + 0.5)
}

/// Tiled, tile-parallel alpha compositing.
pub fn rasterize_forward<T: Real>(g: &GaussianSet<T>, cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput<T>, SplatError> {
    let prep = Prepared::new(g, cam, cfg)?;
    let dim = prep.layout.dim;
    let tiles: Vec<(Vec<T>, Vec<T>)> = (0..prep.lists.len())
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % prep.tiles_x, t / prep.tiles_x);
            let mut acc = vec![T::zero(); TILE * TILE * dim];
            let mut trs = vec![T::one(); TILE * TILE];
            for ly in 0..TILE {
                let row = ty * TILE + ly;
                if row >= cam.height {
                    break;
                }
                for lx in 0..TILE {
                    let col = tx * TILE + lx;
                    if col >= cam.width {
                        break;
                    }
                    let k = ly * TILE + lx;
                    let list = prep.lists[t].iter().map(|&i| i as usize);
                    trs[k] = prep.composite(center(col), center(row), list, &mut acc[k * dim..(k + 1) * dim]);
                }
            }
            (acc, trs)
        })
        .collect();
    debug_assert_eq!(tiles.len(), prep.tiles_x * prep.tiles_y);
    Ok(assemble(&prep, cam, |row, col| {
        let t = (row / TILE) * prep.tiles_x + col / TILE;
        let k = (row % TILE) * TILE + col % TILE;
        let (acc, trs) = &tiles[t];
        (acc[k * dim..(k + 1) * dim].to_vec(), trs[k])
    }))
}

/// Untiled per-pixel loop over every valid Gaussian.
pub fn reference_rasterize<T: Real>(g: &GaussianSet<T>, cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput<T>, SplatError> {
    let prep = Prepared::new(g, cam, cfg)?;
    Ok(assemble(&prep, cam, |row, col| {
        let mut acc = vec![T::zero(); prep.layout.dim];
        let tr = prep.composite(center(col), center(row), prep.order.iter().copied(), &mut acc);
        (acc, tr)
    }))
}

fn check_grad<T: Real>(
    channel: &'static str,
    grad: &Option<Array<T>>,
    rendered: bool,
    expected: Vec<usize>,
) -> Result<(), SplatError> {
    match grad {
        Some(a) if !rendered || a.shape() != expected.as_slice() => Err(SplatError::GradShape {
            channel,
            expected: if rendered { expected } else { Vec::new() },
            got: a.shape().to_vec(),
        }),
        _ => Ok(()),
    }
}

// Per-Gaussian screen-space gradient slots.
const G_MX: usize = 0;
const G_MY: usize = 1;
const G_CA: usize = 2;
const G_CB: usize = 3;
const G_CC: usize = 4;
const G_OP: usize = 5;
const G_ATTR: usize = 6;

/// Analytic gradients of `<grads, render>` with respect to raw parameters and
/// the camera pose increment.
pub fn rasterize_backward<T: Real>(
    g: &GaussianSet<T>,
    cam: &Camera,
    cfg: &RasterConfig,
    grads: &RenderGrads<T>,
) -> Result<GaussianGrads<T>, SplatError> {
    let prep = Prepared::new(g, cam, cfg)?;
    let (w, h) = (cam.width, cam.height);
    let l = prep.layout;
    check_grad("color", &grads.color, l.color.is_some(), vec![h, w, 3])?;
    check_grad("features", &grads.features, l.features.is_some(), vec![h, w, l.feature_dim])?;
    check_grad("alpha", &grads.alpha, true, vec![h, w])?;
    check_grad("depth", &grads.depth, l.depth.is_some(), vec![h, w])?;

    let dim = l.dim;
    let gdim = G_ATTR + dim;
    let upstream = |p: usize, out: &mut [T]| {
        out.iter_mut().for_each(|v| *v = T::zero());
        if let (Some(a), Some(o)) = (&grads.color, l.color) {
            out[o..o + 3].copy_from_slice(&a.data()[p * 3..p * 3 + 3]);
        }
        if let Some(a) = &grads.alpha {
            out[l.alpha] = a.data()[p];
        }
        if let (Some(a), Some(o)) = (&grads.depth, l.depth) {
            out[o] = a.data()[p];
        }
        if let (Some(a), Some(o)) = (&grads.features, l.features) {
            let d = l.feature_dim;
            out[o..o + d].copy_from_slice(&a.data()[p * d..(p + 1) * d]);
        }
    };

    let partials: Vec<Vec<T>> = (0..prep.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &prep.lists[t];
            let mut buf = vec![T::zero(); list.len() * gdim];
            let (tx, ty) = (t % prep.tiles_x, t / prep.tiles_x);
            let mut gpix = vec![T::zero(); dim];
            let mut s_acc = vec![T::zero(); dim];
            let mut hits: Vec<(usize, Hit<T>, T)> = Vec::new();
            for row in ty * TILE..((ty + 1) * TILE).min(h) {
                for col in tx * TILE..((tx + 1) * TILE).min(w) {
                    upstream(row * w + col, &mut gpix);
                    if gpix.iter().all(|v| *v == T::zero()) {
                        continue;
                    }
                    let (px, py) = (center::<T>(col), center::<T>(row));
                    hits.clear();
                    let mut tr = T::one();
                    for (slot, &i) in list.iter().enumerate() {
                        if let Some(hit) = prep.hit(i as usize, px, py) {
                            let a = hit.a;
                            hits.push((slot, hit, tr));
                            tr *= T::one() - a;
                        }
                    }
                    s_acc.copy_from_slice(&prep.background);
                    for (slot, hit, tr_i) in hits.iter().rev() {
                        let i = list[*slot] as usize;
                        let attr = prep.attr(i);
                        let b = &mut buf[slot * gdim..(slot + 1) * gdim];
                        let mut dot = T::zero();
                        let wgt = hit.a * *tr_i;
                        for k in 0..dim {
                            dot += gpix[k] * (attr[k] - s_acc[k]);
                            b[G_ATTR + k] += wgt * gpix[k];
                            s_acc[k] = hit.a * attr[k] + (T::one() - hit.a) * s_acc[k];
                        }
                        if hit.clamped {
                            continue;
                        }
                        let dl_da = *tr_i * dot;
                        b[G_OP] += dl_da * hit.e;
                        let dp = dl_da * hit.a;
                        let [ca, cb, cc] = prep.conic[i];
                        let half = T::lit(0.5);
                        b[G_MX] += dp * (ca * hit.dx + cb * hit.dy);
                        b[G_MY] += dp * (cb * hit.dx + cc * hit.dy);
                        b[G_CA] -= dp * half * hit.dx * hit.dx;
                        b[G_CB] -= dp * hit.dx * hit.dy;
                        b[G_CC] -= dp * half * hit.dy * hit.dy;
                    }
                }
            }
            buf
        })
        .collect();

    let n = g.len();
    let mut screen = vec![T::zero(); n * gdim];
    for (t, buf) in partials.iter().enumerate() {
        for (slot, &i) in prep.lists[t].iter().enumerate() {
            let dst = &mut screen[i as usize * gdim..(i as usize + 1) * gdim];
            for (d, &v) in dst.iter_mut().zip(&buf[slot * gdim..(slot + 1) * gdim]) {
                *d += v;
            }
        }
    }

    let mut out = GaussianGrads::zeros(n, g.feature_dim);
    for &i in &prep.order {
        chain_gaussian(&prep, g, i, &screen[i * gdim..(i + 1) * gdim], &mut out);
    }
    Ok(out)
}

/// Pull screen-space gradients of Gaussian `i` back to its raw parameters.
fn chain_gaussian<T: Real>(prep: &Prepared<T>, g: &GaussianSet<T>, i: usize, sg: &[T], out: &mut GaussianGrads<T>) {
    let l = prep.layout;
    let act = &prep.act[i];
    let cam = &prep.cam;
    let one = T::one();
    let two = T::lit(2.0);
    let attr_g = &sg[G_ATTR..];

    out.opacity_logits[i] = sg[G_OP] * act.opacity * (one - act.opacity);
    if let Some(o) = l.color {
        for k in 0..3 {
            let c = act.color[k];
            out.color_logits[i][k] = attr_g[o + k] * c * (one - c);
        }
    }
    if let Some(o) = l.features {
        let d = l.feature_dim;
        out.features[i * d..(i + 1) * d].copy_from_slice(&attr_g[o..o + d]);
    }

    let pc = cam.to_camera(act.mean);
    let [x, y, z] = pc;
    let zi = one / z;
    let mut gpc = [T::zero(); 3];
    if let Some(o) = l.depth {
        gpc[2] += attr_g[o];
    }
    let (gmx, gmy) = (sg[G_MX], sg[G_MY]);
    out.mean2d_norms[i] = (gmx * gmx + gmy * gmy).sqrt();
    gpc[0] += gmx * cam.fx * zi;
    gpc[1] += gmy * cam.fy * zi;
    gpc[2] -= (gmx * cam.fx * x + gmy * cam.fy * y) * zi * zi;

    // Conic -> dilated covariance: dL/dC = -M (dL/dM) M with M the conic.
    let [ca, cb, cc] = prep.conic[i];
    let m = [[ca, cb], [cb, cc]];
    let half = T::lit(0.5);
    let gm = [[sg[G_CA], half * sg[G_CB]], [half * sg[G_CB], sg[G_CC]]];
    let mut tmp = [[T::zero(); 2]; 2];
    let mut g2 = [[T::zero(); 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            tmp[a][b] = m[a][0] * gm[0][b] + m[a][1] * gm[1][b];
        }
    }
    for a in 0..2 {
        for b in 0..2 {
            g2[a][b] = -(tmp[a][0] * m[0][b] + tmp[a][1] * m[1][b]);
        }
    }

    // cov2d = J Sc J^T.
    let sigma = act.covariance();
    let sc = rotate_cov(&cam.r, &sigma);
    let j = cam.jacobian(pc);
    let mut jsc = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for b in 0..3 {
            jsc[a][b] = (0..3).map(|k| j[a][k] * sc[k][b]).sum();
        }
    }
    let mut gj = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for b in 0..3 {
            gj[a][b] = two * (g2[a][0] * jsc[0][b] + g2[a][1] * jsc[1][b]);
        }
    }
    let mut gsc = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            gsc[a][b] = (0..2).map(|p| (0..2).map(|q| j[p][a] * g2[p][q] * j[q][b]).sum::<T>()).sum();
        }
    }
    let zi2 = zi * zi;
    let zi3 = zi2 * zi;
    gpc[0] -= gj[0][2] * cam.fx * zi2;
    gpc[1] -= gj[1][2] * cam.fy * zi2;
    gpc[2] += -gj[0][0] * cam.fx * zi2 + gj[0][2] * two * cam.fx * x * zi3 - gj[1][1] * cam.fy * zi2
        + gj[1][2] * two * cam.fy * y * zi3;

    let w = &cam.r;
    for a in 0..3 {
        out.positions[i][a] = (0..3).map(|k| w[k][a] * gpc[k]).sum();
    }

    // Camera increment: translation takes gpc, rotation takes pc x gpc plus
    // the covariance term 2 <G_Sc, K_k Sc> with K_k the cross-product matrix of e_k.
    for k in 0..3 {
        out.camera[3 + k] += gpc[k];
    }
    let cross = [y * gpc[2] - z * gpc[1], z * gpc[0] - x * gpc[2], x * gpc[1] - y * gpc[0]];
    let mut ks = [T::zero(); 3];
    for a in 0..3 {
        for b in 0..3 {
            // rows of K_k Sc for e_x, e_y, e_z.
            let kx = [T::zero(), -sc[2][b], sc[1][b]][a];
            let ky = [sc[2][b], T::zero(), -sc[0][b]][a];
            let kz = [-sc[1][b], sc[0][b], T::zero()][a];
            ks[0] += gsc[a][b] * kx;
            ks[1] += gsc[a][b] * ky;
            ks[2] += gsc[a][b] * kz;
        }
    }
    for k in 0..3 {
        out.camera[k] += cross[k] + two * ks[k];
    }

    // Sc = W Sigma W^T, Sigma = (R S)(R S)^T.
    let mut gsig = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            gsig[a][b] = (0..3).map(|p| (0..3).map(|q| w[p][a] * gsc[p][q] * w[q][b]).sum::<T>()).sum();
        }
    }
    let r = quat_to_matrix(act.rotation);
    let sc3 = act.scale;
    let mut gr = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            // dL/dM = 2 G_Sigma M with M = R S.
            let gm_ab: T = two * (0..3).map(|k| gsig[a][k] * r[k][b] * sc3[b]).sum::<T>();
            gr[a][b] = gm_ab * sc3[b];
            out.log_scales[i][b] += gm_ab * r[a][b] * sc3[b];
        }
    }

    let [qw, qx, qy, qz] = act.rotation;
    let gq = [
        two * (-qz * gr[0][1] + qy * gr[0][2] + qz * gr[1][0] - qx * gr[1][2] - qy * gr[2][0] + qx * gr[2][1]),
        two * (qy * gr[0][1] + qz * gr[0][2] + qy * gr[1][0] - two * qx * gr[1][1] - qw * gr[1][2] + qz * gr[2][0]
            + qw * gr[2][1]
            - two * qx * gr[2][2]),
        two * (-two * qy * gr[0][0] + qx * gr[0][1] + qw * gr[0][2] + qx * gr[1][0] + qz * gr[1][2] - qw * gr[2][0]
            + qz * gr[2][1]
            - two * qy * gr[2][2]),
        two * (-two * qz * gr[0][0] - qw * gr[0][1] + qx * gr[0][2] + qw * gr[1][0] - two * qz * gr[1][1]
            + qy * gr[1][2]
            + qx * gr[2][0]
            + qy * gr[2][1]),
    ];
    let raw = g.rotations[i];
    let norm = raw.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm >= T::lit(super::QUAT_EPS) {
        let u = act.rotation;
        let proj: T = (0..4).map(|k| u[k] * gq[k]).sum();
        for k in 0..4 {
            out.rotations[i][k] = (gq[k] - u[k] * proj) / norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(seed: u64, n: usize, size: usize) -> (GaussianSet<f64>, Camera) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = Camera::look_at(
            Vector3::new(0.2, -0.1, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            size,
            size,
            size as f64,
        );
        let mut g = GaussianSet::default();
        for _ in 0..n {
            g.push(
                std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                std::array::from_fn(|_| rng.random_range(-3.5..-1.0)),
                std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                rng.random_range(-3.0..5.0),
                std::array::from_fn(|_| rng.random_range(-3.0..3.0)),
            );
        }
        (g, cam)
    }

    /// Gaussian whose projected mean sits exactly on pixel `(8, 8)`'s center.
    fn centered(opacity_logit: f64, color_logits: [f64; 3]) -> (GaussianSet<f64>, Camera) {
        let mut cam = Camera::canonical(16, 16, 20.0);
        cam.cx = 8.5;
        cam.cy = 8.5;
        let mut g = GaussianSet::default();
        g.push([0.0, 0.0, 2.0], [-2.0; 3], [1.0, 0.0, 0.0, 0.0], opacity_logit, color_logits);
        (g, cam)
    }

    #[test]
    fn saturated_gaussian_at_its_center() {
        let (g, cam) = centered(40.0, [0.5, -1.0, 2.0]);
        let mut cfg = RasterConfig::new(0.0, Channels::COLOR);
        cfg.background = [0.2, 0.4, 0.6];
        let r = rasterize_forward(&g, &cam, &cfg).unwrap();
        let c = g.activate(0).color;
        let img = r.color.unwrap();
        for k in 0..3 {
            let expected = 0.999 * c[k] + 0.001 * cfg.background[k];
            assert!((img.at(&[8, 8, k]) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn two_coincident_half_opaque_gaussians() {
        let (mut g, cam) = centered(0.0, [40.0, -40.0, -40.0]);
        g.push([0.0, 0.0, 3.0], [-1.6, -1.6, -2.0], [1.0, 0.0, 0.0, 0.0], 0.0, [-40.0, -40.0, 40.0]);
        let r = rasterize_forward(&g, &cam, &RasterConfig::new(0.0, Channels::COLOR)).unwrap();
        let img = r.color.unwrap();
        let px = [img.at(&[8, 8, 0]), img.at(&[8, 8, 1]), img.at(&[8, 8, 2])];
        for (got, want) in px.iter().zip([0.5, 0.0, 0.25]) {
            assert!((got - want).abs() < 1e-12, "{px:?}");
        }
    }

    #[test]
    fn empty_set_renders_background() {
        let g = GaussianSet::<f64>::default();
        let cam = Camera::canonical(20, 12, 10.0);
        let mut cfg = RasterConfig::new(0.3, Channels::COLOR);
        cfg.background = [0.1, 0.2, 0.3];
        let r = reference_rasterize(&g, &cam, &cfg).unwrap();
        assert!(r.alpha.data().iter().all(|&a| a == 0.0));
        let img = r.color.unwrap();
        assert!(img.data().chunks(3).all(|p| p == [0.1, 0.2, 0.3]));
    }

    #[test]
    fn opaque_gaussian_saturates_its_footprint() {
        let (mut g, cam) = centered(40.0, [0.0; 3]);
        g.log_scales[0] = [4.0; 3];
        let r = reference_rasterize(&g, &cam, &RasterConfig::new(0.3, Channels::COLOR)).unwrap();
        assert!(r.alpha.data().iter().all(|&a| (a - 0.999).abs() < 1e-6));
    }

    #[test]
    fn tiled_matches_reference_and_telescopes() {
        for seed in 0..6 {
            let (g, cam) = random_scene(seed, 48, 40);
            for s in [0.3, 3.0, 30.0] {
                let cfg = RasterConfig::new(s, Channels { color: true, depth: true, features: false });
                let a = rasterize_forward(&g, &cam, &cfg).unwrap();
                let b = reference_rasterize(&g, &cam, &cfg).unwrap();
                assert!(a.color.as_ref().unwrap().max_abs_diff(b.color.as_ref().unwrap()) <= 1e-6);
                assert!(a.depth.as_ref().unwrap().max_abs_diff(b.depth.as_ref().unwrap()) <= 1e-6);
                for (al, tr) in a.alpha.data().iter().zip(a.transmittance.data()) {
                    assert!((al + tr - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn non_finite_parameter_is_reported() {
        let (mut g, cam) = random_scene(1, 5, 16);
        g.log_scales[3][1] = f64::NAN;
        match rasterize_forward(&g, &cam, &RasterConfig::new(0.3, Channels::COLOR)) {
            Err(SplatError::NonFinite { index }) => assert_eq!(index, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_features_are_rejected() {
        let (g, cam) = random_scene(1, 2, 16);
        assert!(matches!(
            rasterize_forward(&g, &cam, &RasterConfig::new(0.3, Channels::FEATURES)),
            Err(SplatError::MissingFeatures)
        ));
    }

    #[test]
    fn mismatched_grad_shape_is_rejected() {
        let (g, cam) = random_scene(2, 3, 16);
        let cfg = RasterConfig::new(0.3, Channels::COLOR);
        let grads = RenderGrads {
            color: Some(Array::zeros(&[16, 16, 4])),
            ..Default::default()
        };
        assert!(matches!(
            rasterize_backward(&g, &cam, &cfg, &grads),
            Err(SplatError::GradShape { channel: "color", .. })
        ));
    }

    #[test]
    fn fully_occluded_gaussian_gets_zero_gradient() {
        // Twenty saturated blockers drive f32 transmittance to exactly zero.
        let mut cam = Camera::canonical(16, 16, 20.0);
        cam.cx = 8.0;
        cam.cy = 8.0;
        let mut g = GaussianSet::<f32>::default();
        for k in 0..20 {
            g.push([0.0, 0.0, 1.0 + 0.01 * k as f32], [3.0; 3], [1.0, 0.0, 0.0, 0.0], 30.0, [0.0; 3]);
        }
        g.push([0.05, 0.0, 3.0], [-2.0; 3], [1.0, 0.0, 0.0, 0.0], 0.0, [0.3; 3]);
        let cfg = RasterConfig::new(0.3, Channels::COLOR);
        let grads = RenderGrads {
            color: Some(Array::ones(&[16, 16, 3])),
            alpha: Some(Array::ones(&[16, 16])),
            ..Default::default()
        };
        let out = rasterize_backward(&g, &cam, &cfg, &grads).unwrap();
        let last = g.len() - 1;
        assert_eq!(out.positions[last], [0.0; 3]);
        assert_eq!(out.log_scales[last], [0.0; 3]);
        assert_eq!(out.rotations[last], [0.0; 4]);
        assert_eq!(out.opacity_logits[last], 0.0);
        assert_eq!(out.color_logits[last], [0.0; 3]);
    }

    #[test]
    fn untouched_gaussian_gets_zero_gradient() {
        let (mut g, cam) = random_scene(4, 6, 16);
        // Far outside the frustum: no pixel influence.
        g.positions[2] = [0.0, 0.0, -50.0];
        let cfg = RasterConfig::new(0.3, Channels::COLOR);
        let grads = RenderGrads {
            color: Some(Array::ones(&[16, 16, 3])),
            ..Default::default()
        };
        let out = rasterize_backward(&g, &cam, &cfg, &grads).unwrap();
        assert_eq!(out.positions[2], [0.0; 3]);
        assert_eq!(out.opacity_logits[2], 0.0);
    }

    #[test]
    fn low_pass_widens_position_gradient_support() {
        let (mut g, cam) = centered(1.0, [0.0; 3]);
        g.log_scales[0] = [-4.0; 3];
        let count = |s: f64| {
            let cfg = RasterConfig::new(s, Channels::COLOR);
            let mut n = 0;
            for p in 0..16 * 16 {
                let mut seed = Array::zeros(&[16, 16, 3]);
                seed.data_mut()[p * 3] = 1.0;
                let grads = RenderGrads {
                    color: Some(seed),
                    ..Default::default()
                };
                let out = rasterize_backward(&g, &cam, &cfg, &grads).unwrap();
                if out.positions[0].iter().any(|&v| v != 0.0) {
                    n += 1;
                }
            }
            n
        };
        let (narrow, wide) = (count(0.3), count(300.0));
        assert!(wide > narrow, "{narrow} vs {wide}");
    }

    #[test]
    fn single_gaussian_gradients_match_finite_differences() {
        let (mut g, cam, cfg) = crate::gradgate::micro_scene(9, 1, 16);
        g.opacity_logits[0] = 0.4;
        let err = crate::gradgate::raster_fd_check(&g, &cam, &cfg, 1e-5).unwrap();
        assert!(err < 1e-4, "{err:e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn rendering_ignores_input_order(seed in 0u64..1000, rot in 1usize..20) {
            let (g, cam) = random_scene(seed, 20, 24);
            let perm: Vec<usize> = (0..20).map(|i| (i + rot) % 20).collect();
            let cfg = RasterConfig::new(0.3, Channels::COLOR);
            let a = rasterize_forward(&g, &cam, &cfg).unwrap();
            let b = rasterize_forward(&g.select(&perm), &cam, &cfg).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn footprint_grows_with_low_pass(seed in 0u64..1000, s in 0.0f64..10.0, ds in 0.0f64..20.0) {
            let (g, cam) = random_scene(seed, 1, 24);
            let covered = |s: f64| {
                let r = reference_rasterize(&g, &cam, &RasterConfig::new(s, Channels::COLOR)).unwrap();
                r.alpha.data().iter().filter(|&&a| a > 0.0).count()
            };
            prop_assert!(covered(s + ds) >= covered(s));
        }
    }
}
