use crate::scene::Correspondence;
use crate::tensor::Array;

use super::EvalError;

/// Matching protocol parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    pub threshold_px: f64,
    pub top_k: usize,
    /// Lowe ratio bound; matches with a larger ratio are dropped.
    pub ratio: f64,
    pub mutual: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            threshold_px: 10.0,
            top_k: 1000,
            ratio: 0.8,
            mutual: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    /// Pixel indices `(col, row)` in the source and target images.
    pub source: [usize; 2],
    pub target: [usize; 2],
    /// `(1 - sim1 + eps) / (1 - sim2 + eps)`, in `(0, 1]`.
    pub ratio: f64,
}

/// Ranked matches, ascending by ratio.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckResult {
    /// Percentage of kept matches within the threshold, 0 when none survive.
    pub pck: f64,
    pub matches: MatchSet,
}

const RATIO_EPS: f64 = 1e-12;

/// A feature map on the pixel grid: unit rows plus the source cell of every
/// pixel (pixels of one cell carry identical features).
struct PixelFeatures {
    dim: usize,
    unit: Vec<f32>,
    cell: Vec<usize>,
}

/// Nearest-cell upsampling of an `h x w x d` map to `height x width`, with
/// rows normalized for cosine similarity.
fn upsample(map: &Array<f32>, width: usize, height: usize) -> Result<PixelFeatures, EvalError> {
    let [h, w, d] = *map.shape() else {
        return Err(EvalError::Shape(format!("feature map must be h x w x d, got {:?}", map.shape())));
    };
    if h == 0 || w == 0 || d == 0 || h > height || w > width {
        return Err(EvalError::Shape(format!("cannot upsample {h}x{w} to {height}x{width}")));
    }
    let mut unit = Vec::with_capacity(width * height * d);
    let mut cell = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let (cr, cc) = (r * h / height, c * w / width);
            let idx = cr * w + cc;
            let f = &map.data()[idx * d..(idx + 1) * d];
            let norm = f.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt().max(1e-8);
            unit.extend(f.iter().map(|&v| (v as f64 / norm) as f32));
            cell.push(idx);
        }
    }
    Ok(PixelFeatures { dim: d, unit, cell })
}

const BLOCK: usize = 256;

/// Cosine similarities of `rows` source pixels starting at `first` against every target pixel.
fn sim_block(a: &PixelFeatures, b: &PixelFeatures, first: usize, rows: usize) -> Vec<f32> {
    let d = a.dim;
    let n = b.cell.len();
    let mut out = vec![0.0f32; rows * n];
    // SAFETY: a is rows x d (row-major), b^T is d x n via strides, out is rows x n.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            d,
            n,
            1.0,
            a.unit[first * d..].as_ptr(),
            d as isize,
            1,
            b.unit.as_ptr(),
            1,
            d as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Two-view PCK of dense feature matching.
///
/// Features are upsampled to the correspondence grid by nearest cell.
/// Every source pixel with a ground-truth correspondence queries its most
/// similar target pixel (ties go to the lowest index); the runner-up is the
/// best target pixel from a different feature cell. Optionally keeps only
/// mutual nearest neighbours, then ranks by Lowe ratio and keeps the top K.
pub fn pck_two_view(
    feat_a: &Array<f32>,
    feat_b: &Array<f32>,
    gt: &Correspondence,
    cfg: &MatchConfig,
) -> Result<PckResult, EvalError> {
    let (width, height) = (gt.width, gt.height);
    if gt.target.len() != width * height {
        return Err(EvalError::Shape("correspondence map does not cover its grid".into()));
    }
    if feat_a.last_dim() != feat_b.last_dim() {
        return Err(EvalError::Shape(format!("feature widths {} and {}", feat_a.last_dim(), feat_b.last_dim())));
    }
    let a = upsample(feat_a, width, height)?;
    let b = upsample(feat_b, width, height)?;
    let n = width * height;

    // Forward nearest neighbours (all source pixels, for the mutual check) and
    // the best score per target column for the reverse direction.
    let mut best = vec![(0usize, f32::NEG_INFINITY); n];
    let mut second = vec![f32::NEG_INFINITY; n];
    let mut col_best = vec![(0usize, f32::NEG_INFINITY); n];
    for first in (0..n).step_by(BLOCK) {
        let rows = BLOCK.min(n - first);
        let sims = sim_block(&a, &b, first, rows);
        for r in 0..rows {
            let i = first + r;
            let row = &sims[r * n..(r + 1) * n];
            let mut bj = 0;
            for (j, &s) in row.iter().enumerate() {
                if s > row[bj] {
                    bj = j;
                }
                if s > col_best[j].1 {
                    col_best[j] = (i, s);
                }
            }
            let bcell = b.cell[bj];
            let s2 = row
                .iter()
                .zip(&b.cell)
                .filter(|&(_, &c)| c != bcell)
                .map(|(&s, _)| s)
                .fold(f32::NEG_INFINITY, f32::max);
            best[i] = (bj, row[bj]);
            second[i] = s2;
        }
    }

    let mut matches = Vec::new();
    for i in 0..n {
        if gt.target[i].is_none() {
            continue;
        }
        let (j, s1) = best[i];
        if cfg.mutual && col_best[j].0 != i {
            continue;
        }
        let s1 = s1 as f64;
        let s2 = if second[i].is_finite() { second[i] as f64 } else { -1.0 };
        let ratio = ((1.0 - s1 + RATIO_EPS) / (1.0 - s2.min(s1) + RATIO_EPS)).clamp(f64::MIN_POSITIVE, 1.0);
        if ratio <= cfg.ratio {
            matches.push(Match {
                source: [i % width, i / width],
                target: [j % width, j / width],
                ratio,
            });
        }
    }
    matches.sort_by(|x, y| x.ratio.total_cmp(&y.ratio));
    matches.truncate(cfg.top_k);

    let correct = matches
        .iter()
        .filter(|m| {
            let t = gt.target[m.source[1] * width + m.source[0]].expect("filtered above");
            let (u, v) = (m.target[0] as f64 + 0.5, m.target[1] as f64 + 0.5);
            ((u - t[0]).powi(2) + (v - t[1]).powi(2)).sqrt() <= cfg.threshold_px
        })
        .count();
    let pck = if matches.is_empty() {
        0.0
    } else {
        100.0 * correct as f64 / matches.len() as f64
    };
    Ok(PckResult {
        pck,
        matches: MatchSet { matches },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn identity_flow(size: usize) -> Correspondence {
        Correspondence {
            width: size,
            height: size,
            target: (0..size * size)
                .map(|i| Some([(i % size) as f64 + 0.5, (i / size) as f64 + 0.5]))
                .collect(),
        }
    }

    fn gaussian_map(seed: u64, h: usize, w: usize, d: usize) -> Array<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Array::from_fn(&[h, w, d], |_| n.sample(&mut rng) as f32)
    }

    #[test]
    fn identical_maps_score_100() {
        let gt = identity_flow(32);
        let f = gaussian_map(1, 32, 32, 16);
        let r = pck_two_view(&f, &f, &gt, &MatchConfig::default()).unwrap();
        assert_eq!(r.pck, 100.0);
        assert_eq!(r.matches.matches.len(), 1000);
        // Coarse maps: one mutual match per cell, all exact.
        let coarse = gaussian_map(2, 4, 4, 16);
        let r = pck_two_view(&coarse, &coarse, &gt, &MatchConfig::default()).unwrap();
        assert_eq!(r.pck, 100.0);
        assert_eq!(r.matches.matches.len(), 16);
    }

    /// Share of uniformly random target pixels within the threshold of the
    /// true correspondence, estimated by sampling.
    fn chance_level(size: usize, threshold: f64, samples: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let hits = (0..samples)
            .filter(|_| {
                let s = [rng.random_range(0..size), rng.random_range(0..size)];
                let t = [rng.random_range(0..size), rng.random_range(0..size)];
                let d2 = (s[0] as f64 - t[0] as f64).powi(2) + (s[1] as f64 - t[1] as f64).powi(2);
                d2.sqrt() <= threshold
            })
            .count();
        100.0 * hits as f64 / samples as f64
    }

    #[test]
    fn independent_random_maps_are_near_chance() {
        let gt = identity_flow(64);
        let chance = chance_level(64, 10.0, 200_000);
        assert!(chance < 7.7, "{chance}");
        let mut total = 0.0;
        let runs = 4;
        for s in 0..runs {
            let a = gaussian_map(10 + s, 64, 64, 32);
            let b = gaussian_map(20 + s, 64, 64, 32);
            total += pck_two_view(&a, &b, &gt, &MatchConfig::default()).unwrap().pck;
        }
        let mean = total / runs as f64;
        assert!((mean - chance).abs() < 2.0 && mean < 7.7, "{mean} vs chance {chance}");
    }

    #[test]
    fn matches_are_ranked_and_bounded() {
        let gt = identity_flow(32);
        let a = gaussian_map(3, 32, 32, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Array::from_fn(a.shape(), |i| a.data()[i] + rng.random_range(-0.3..0.3));
        let r = pck_two_view(&a, &b, &gt, &MatchConfig::default()).unwrap();
        let m = &r.matches.matches;
        assert!(!m.is_empty() && m.len() <= 1000);
        assert!(m.windows(2).all(|w| w[0].ratio <= w[1].ratio));
        assert!(m.iter().all(|x| x.ratio > 0.0 && x.ratio <= 0.8));
    }

    #[test]
    fn orthonormal_transform_leaves_pck_unchanged() {
        let gt = identity_flow(32);
        let a = gaussian_map(5, 8, 8, 4);
        let b = gaussian_map(6, 8, 8, 4).map(|v| v * 0.3);
        let b = Array::from_fn(b.shape(), |i| a.data()[i] + b.data()[i]);
        // 90 degree rotation in the first plane plus a sign flip.
        let rot = |m: &Array<f32>| {
            Array::from_fn(m.shape(), |i| {
                let (base, k) = (i - i % 4, i % 4);
                match k {
                    0 => -m.data()[base + 1],
                    1 => m.data()[base],
                    2 => -m.data()[base + 2],
                    _ => m.data()[base + 3],
                }
            })
        };
        let cfg = MatchConfig::default();
        let p = pck_two_view(&a, &b, &gt, &cfg).unwrap();
        let q = pck_two_view(&rot(&a), &rot(&b), &gt, &cfg).unwrap();
        assert_eq!(p.pck, q.pck);
    }

    #[test]
    fn no_surviving_match_reports_zero() {
        let gt = identity_flow(16);
        let f = Array::full(&[4, 4, 3], 1.0f32);
        let r = pck_two_view(&f, &f, &gt, &MatchConfig::default()).unwrap();
        assert_eq!(r.pck, 0.0);
        assert!(r.matches.matches.is_empty());
    }
}
