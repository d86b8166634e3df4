use crate::real::Real;
use crate::tensor::Array;

use super::EvalError;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k = std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Luma plane of an `H x W x 3` image, or the image itself if `H x W`.
fn gray<T: Real>(img: &Array<T>) -> Result<(usize, usize, Vec<f64>), EvalError> {
    match img.shape() {
        [h, w, 3] => Ok((
            *h,
            *w,
            img.data()
                .chunks_exact(3)
                .map(|p| (0..3).map(|c| LUMA[c] * p[c].as_f64()).sum())
                .collect(),
        )),
        [h, w] => Ok((*h, *w, img.data().iter().map(|v| v.as_f64()).collect())),
        s => Err(EvalError::Shape(format!("expected an image, got {s:?}"))),
    }
}

/// Valid-mode separable filtering: `(h - 10) x (w - 10)` output.
fn filter(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|t| k[t] * x[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Adjoint of [`filter`]: scatter an `oh x ow` map back onto `h x w`.
fn filter_adjoint(y: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..oh {
        for c in 0..ow {
            for t in 0..SSIM_WINDOW {
                rows[(r + t) * ow + c] += k[t] * y[r * ow + c];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..ow {
            for t in 0..SSIM_WINDOW {
                out[r * w + c + t] += k[t] * rows[r * ow + c];
            }
        }
    }
    out
}

struct Stats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    saa: Vec<f64>,
    sbb: Vec<f64>,
    sab: Vec<f64>,
}

fn prepare<T: Real>(a: &Array<T>, b: &Array<T>) -> Result<(usize, usize, Vec<f64>, Vec<f64>), EvalError> {
    if a.shape() != b.shape() {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w, ga) = gray(a)?;
    let (_, _, gb) = gray(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::Shape(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    Ok((h, w, ga, gb))
}

fn stats(h: usize, w: usize, a: &[f64], b: &[f64], k: &[f64; SSIM_WINDOW]) -> Stats {
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter(a, h, w, k);
    let mu_b = filter(b, h, w, k);
    let ea = filter(&sq(a, a), h, w, k);
    let eb = filter(&sq(b, b), h, w, k);
    let eab = filter(&sq(a, b), h, w, k);
    let n = mu_a.len();
    Stats {
        saa: (0..n).map(|i| ea[i] - mu_a[i] * mu_a[i]).collect(),
        sbb: (0..n).map(|i| eb[i] - mu_b[i] * mu_b[i]).collect(),
        sab: (0..n).map(|i| eab[i] - mu_a[i] * mu_b[i]).collect(),
        mu_a,
        mu_b,
    }
}

/// Mean local SSIM of the luma planes (11x11 Gaussian window, sigma 1.5,
/// K1 = 0.01, K2 = 0.03, unit dynamic range).
pub fn ssim<T: Real>(a: &Array<T>, b: &Array<T>) -> Result<f64, EvalError> {
    let (h, w, ga, gb) = prepare(a, b)?;
    let s = stats(h, w, &ga, &gb, &taps());
    let n = s.mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
            (2.0 * ma * mb + C1) * (2.0 * s.sab[i] + C2) / ((ma * ma + mb * mb + C1) * (s.saa[i] + s.sbb[i] + C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// SSIM together with its gradient with respect to `a`.
pub fn ssim_with_grad<T: Real>(a: &Array<T>, b: &Array<T>) -> Result<(f64, Array<T>), EvalError> {
    let (h, w, ga, gb) = prepare(a, b)?;
    let k = taps();
    let s = stats(h, w, &ga, &gb, &k);
    let n = s.mu_a.len();
    let inv = 1.0 / n as f64;
    let (mut alpha, mut beta, mut gamma) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
        let a1 = 2.0 * ma * mb + C1;
        let a2 = 2.0 * s.sab[i] + C2;
        let b1 = ma * ma + mb * mb + C1;
        let b2 = s.saa[i] + s.sbb[i] + C2;
        let v = a1 * a2 / (b1 * b2);
        total += v;
        // d v / d a_k = w_k (alpha + beta b_k + gamma a_k)
        beta[i] = inv * 2.0 * v / a2;
        gamma[i] = -inv * 2.0 * v / b2;
        alpha[i] = inv * v * (2.0 * mb / a1 - 2.0 * mb / a2 - 2.0 * ma / b1 + 2.0 * ma / b2);
    }
    let ga_alpha = filter_adjoint(&alpha, h, w, &k);
    let ga_beta = filter_adjoint(&beta, h, w, &k);
    let ga_gamma = filter_adjoint(&gamma, h, w, &k);
    let dgray: Vec<f64> = (0..h * w)
        .map(|p| ga_alpha[p] + ga_beta[p] * gb[p] + ga_gamma[p] * ga[p])
        .collect();
    let grad = if a.rank() == 3 {
        Array::from_fn(a.shape(), |i| T::lit(dgray[i / 3] * LUMA[i % 3]))
    } else {
        Array::from_fn(a.shape(), |i| T::lit(dgray[i]))
    };
    Ok((total * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, shape: &[usize]) -> Array<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn identical_images_score_one() {
        let a = random(1, &[16, 20, 3]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_images_match_closed_form() {
        let a = Array::full(&[16, 16, 3], 0.2);
        let b = Array::full(&[16, 16, 3], 0.8);
        let want = (2.0 * 0.16 + 0.0001) * 0.0009 / ((0.04 + 0.64 + 0.0001) * 0.0009);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!((got - 0.470666).abs() < 1e-6);
    }

    #[test]
    fn symmetric_on_random_pairs() {
        for s in 0..5 {
            let a = random(10 + s, &[14, 17, 3]);
            let b = random(20 + s, &[14, 17, 3]);
            assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_small_or_mismatched_images() {
        assert!(ssim(&Array::<f64>::zeros(&[10, 20, 3]), &Array::zeros(&[10, 20, 3])).is_err());
        assert!(ssim(&Array::<f64>::zeros(&[12, 12, 3]), &Array::zeros(&[12, 13, 3])).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = random(3, &[13, 14, 3]);
        let b = random(4, &[13, 14, 3]);
        let (v, g) = ssim_with_grad(&a, &b).unwrap();
        assert!((v - ssim(&a, &b).unwrap()).abs() < 1e-14);
        let eps = 1e-6;
        for i in (0..a.len()).step_by(7) {
            let mut p = a.clone();
            p.data_mut()[i] += eps;
            let mut m = a.clone();
            m.data_mut()[i] -= eps;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * eps);
            let an = g.data()[i];
            assert!((an - fd).abs() <= 1e-5 * an.abs().max(fd.abs()) + 1e-9, "{i}: {an} vs {fd}");
        }
    }
}
