use crate::real::Real;
use crate::tensor::{Array, Graph, ParamSet};

use super::TrainError;

/// Scalar loss and its gradient with respect to the rendered input.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss<T> {
    pub value: f64,
    pub grad: Array<T>,
}

fn same_shape<T: Real>(a: &Array<T>, b: &Array<T>) -> Result<(), TrainError> {
    if a.shape() != b.shape() {
        return Err(TrainError::Shape(format!("render {:?} vs target {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `lambda_mse * mean((render - target)^2)`. The perceptual term has no
/// backing network here and contributes nothing.
pub fn photometric_loss<T: Real>(render: &Array<T>, target: &Array<T>, lambda_mse: f64) -> Result<Loss<T>, TrainError> {
    same_shape(render, target)?;
    let n = render.len().max(1) as f64;
    let mut sum = 0.0;
    let scale = T::lit(2.0 * lambda_mse / n);
    let grad = Array::from_fn(render.shape(), |i| {
        let d = render.data()[i] - target.data()[i];
        sum += d.as_f64() * d.as_f64();
        scale * d
    });
    Ok(Loss {
        value: lambda_mse * sum / n,
        grad,
    })
}

/// `1 - cos(rendered, target)` averaged over spatial locations of `H x W x d` maps.
pub fn feature_loss<T: Real>(rendered: &Array<T>, target: &Array<T>) -> Result<Loss<T>, TrainError> {
    same_shape(rendered, target)?;
    if rendered.rank() < 2 {
        return Err(TrainError::Shape("feature maps need a channel axis".into()));
    }
    let mut g = Graph::new();
    let a = g.param("rendered", rendered.shape());
    let b = g.input("target", target.shape());
    let c = g.cosine(a, b)?;
    let m = g.mean(c);
    let mut bind = ParamSet::new();
    bind.insert("rendered", rendered.clone());
    bind.insert("target", target.clone());
    let ev = g.forward(&bind)?;
    let value = 1.0 - ev.value(m).item().as_f64();
    let seed = Array::scalar(-T::one());
    let grads = ev.backward(&g, &[(m, &seed)])?;
    Ok(Loss {
        value,
        grad: grads.get("rendered").expect("trainable leaf").clone(),
    })
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

    fn fd_check(f: impl Fn(&Array<f64>) -> Loss<f64>, x: &Array<f64>) {
        let analytic = f(x).grad;
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let fd = (f(&p).value - f(&m).value) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-4), "{i}: {a} vs {fd}");
        }
    }

    #[test]
    fn photometric_examples() {
        let t = random(1, &[4, 5, 3]);
        assert_eq!(photometric_loss(&t, &t, 1.0).unwrap().value, 0.0);
        let r = t.map(|v| v + 0.1);
        assert!((photometric_loss(&r, &t, 1.0).unwrap().value - 0.01).abs() < 1e-15);
        assert!((photometric_loss(&r, &t, 2.5).unwrap().value - 0.025).abs() < 1e-15);
        assert!(photometric_loss(&r, &random(2, &[4, 5, 1]), 1.0).is_err());
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let t = random(3, &[3, 4, 3]);
        let r = random(4, &[3, 4, 3]);
        let loss = photometric_loss(&r, &t, 1.0).unwrap();
        for i in 0..r.len() {
            let want = 2.0 * (r.data()[i] - t.data()[i]) / r.len() as f64;
            assert!((loss.grad.data()[i] - want).abs() < 1e-15);
        }
        fd_check(|x| photometric_loss(x, &t, 1.0).unwrap(), &r);
    }

    #[test]
    fn feature_loss_examples() {
        let a = Array::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let orth = Array::new(&[1, 2, 2], vec![0.0, 3.0, -1.0, 0.0]).unwrap();
        let anti = a.map(|v| -v);
        assert!(feature_loss(&a, &a).unwrap().value.abs() < 1e-15);
        assert!((feature_loss(&a, &orth).unwrap().value - 1.0).abs() < 1e-15);
        assert!((feature_loss(&a, &anti).unwrap().value - 2.0).abs() < 1e-15);
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let t = random(5, &[3, 3, 4]).map(|v| v - 0.5);
        let r = random(6, &[3, 3, 4]).map(|v| v - 0.5);
        fd_check(|x| feature_loss(x, &t).unwrap(), &r);
    }
}
