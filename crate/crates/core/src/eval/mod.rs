//! Image metrics, two-view correspondence scoring and metric reports.

mod matching;
mod report;
mod ssim;

pub use matching::{pck_two_view, Match, MatchConfig, MatchSet, PckResult};
pub use report::{MetricRow, Report};
pub use ssim::{ssim, ssim_with_grad, SSIM_SIGMA, SSIM_WINDOW};

use thiserror::Error;

use crate::real::Real;
use crate::scene::BACKGROUND;
use crate::splat::Camera;
use crate::tensor::Array;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Array<T>, b: &Array<T>) -> Result<f64, EvalError> {
    if a.shape() != b.shape() {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(EvalError::Empty("empty image".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    })
}

/// Share (percent) of masked pixels whose argmax over the first
/// `n_objects + 1` feature channels names the ground-truth object. Channel
/// `n_objects` stands for background.
pub fn feature_argmax_accuracy<T: Real>(
    rendered: &Array<T>,
    ids: &[u32],
    mask: &[bool],
    n_objects: usize,
) -> Result<f64, EvalError> {
    let [h, w, d] = *rendered.shape() else {
        return Err(EvalError::Shape(format!("expected H x W x d features, got {:?}", rendered.shape())));
    };
    if d < n_objects + 1 {
        return Err(EvalError::Shape(format!("{d} channels cannot hold {n_objects} objects plus background")));
    }
    if ids.len() != h * w || mask.len() != h * w {
        return Err(EvalError::Shape("id map or mask does not match the feature grid".into()));
    }
    let (mut total, mut correct) = (0usize, 0usize);
    for p in 0..h * w {
        if !mask[p] {
            continue;
        }
        total += 1;
        let f = &rendered.data()[p * d..p * d + n_objects + 1];
        let mut arg = 0;
        for k in 1..f.len() {
            if f[k] > f[arg] {
                arg = k;
            }
        }
        let want = if ids[p] == BACKGROUND { n_objects } else { ids[p] as usize };
        correct += usize::from(arg == want);
    }
    if total == 0 {
        return Err(EvalError::Empty("mask selects no pixel".into()));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Viewing-angle bins `[0, 15)`, `[15, 30)`, `[30, 60)` and `[60, 180]` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AngleBin {
    Deg0To15,
    Deg15To30,
    Deg30To60,
    Deg60To180,
}

impl AngleBin {
    pub const ALL: [AngleBin; 4] = [AngleBin::Deg0To15, AngleBin::Deg15To30, AngleBin::Deg30To60, AngleBin::Deg60To180];

    pub fn from_degrees(angle: f64) -> Self {
        if angle < 15.0 {
            AngleBin::Deg0To15
        } else if angle < 30.0 {
            AngleBin::Deg15To30
        } else if angle < 60.0 {
            AngleBin::Deg30To60
        } else {
            AngleBin::Deg60To180
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AngleBin::Deg0To15 => "0-15",
            AngleBin::Deg15To30 => "15-30",
            AngleBin::Deg30To60 => "30-60",
            AngleBin::Deg60To180 => "60-180",
        }
    }

    /// Range in degrees, right end exclusive except for the last bin.
    pub fn range(self) -> (f64, f64) {
        match self {
            AngleBin::Deg0To15 => (0.0, 15.0),
            AngleBin::Deg15To30 => (15.0, 30.0),
            AngleBin::Deg30To60 => (30.0, 60.0),
            AngleBin::Deg60To180 => (60.0, 180.0),
        }
    }
}

/// Angle in degrees between the viewing directions of two cameras.
pub fn view_angle(a: &Camera, b: &Camera) -> f64 {
    a.forward().dot(&b.forward()).clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn angle_bin(a: &Camera, b: &Camera) -> AngleBin {
    AngleBin::from_degrees(view_angle(a, b))
}
