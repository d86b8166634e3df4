use indexmap::IndexMap;

use crate::real::Real;
use crate::tensor::{Array, ParamSet};

/// First and second moments of one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Moments<T> {
    pub fn new(len: usize) -> Self {
        Moments {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Keep the moments of the listed entries (each `width` values wide).
    pub fn select(&self, rows: &[usize], width: usize) -> Self {
        let pick = |src: &[T]| rows.iter().flat_map(|&r| src[r * width..(r + 1) * width].iter().copied()).collect();
        Moments {
            m: pick(&self.m),
            v: pick(&self.v),
        }
    }

    /// One bias-corrected Adam update at 1-based step `t`, with decoupled
    /// weight decay `wd`.
    #[allow(clippy::too_many_arguments)]
    pub fn update(&mut self, x: &mut [T], g: &[T], t: u64, lr: f64, beta1: f64, beta2: f64, eps: f64, wd: f64) {
        assert_eq!(x.len(), g.len());
        assert_eq!(x.len(), self.m.len());
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let c1 = 1.0 - beta1.powi(t as i32);
        let c2 = 1.0 - beta2.powi(t as i32);
        let step = T::lit(lr / c1);
        let c2s = T::lit(c2.sqrt());
        let e = T::lit(eps);
        let decay = T::lit(1.0 - lr * wd);
        for i in 0..x.len() {
            let gi = g[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * gi;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * gi * gi;
            let denom = self.v[i].sqrt() / c2s + e;
            x[i] = x[i] * decay - step * self.m[i] / denom;
        }
    }
}

/// Result of one optimizer call.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held a non-finite value; nothing was changed.
    Skipped { param: String },
}

/// AdamW over named parameter blocks.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: IndexMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            state: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Update every parameter that has a gradient. `lr` maps a parameter
    /// name to its rate; `decays` says whether weight decay applies.
    pub fn step<'g>(
        &mut self,
        params: &mut ParamSet<T>,
        grads: impl IntoIterator<Item = (&'g str, &'g Array<T>)>,
        lr: impl Fn(&str) -> f64,
        decays: impl Fn(&str) -> bool,
    ) -> StepOutcome
    where
        T: 'g,
    {
        let grads: Vec<(&str, &Array<T>)> = grads.into_iter().collect();
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return StepOutcome::Skipped { param: name.to_string() };
        }
        self.step += 1;
        for (name, g) in grads {
            let Some(x) = params.get_mut(name) else { continue };
            assert_eq!(x.shape(), g.shape(), "gradient shape for `{name}`");
            let st = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| Moments::new(g.len()));
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            st.update(x.data_mut(), g.data(), self.step, lr(name), self.beta1, self.beta2, self.eps, wd);
        }
        StepOutcome::Applied
    }
}
