use rand::seq::index::sample;
use rand::Rng;

use crate::scene::{SyntheticScene, ViewRecord};

use super::TrainError;

/// Ground-truth views of one scene with a fixed held-out subset.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub scene: SyntheticScene,
    pub views: Vec<ViewRecord>,
    /// Indices never used as inputs or targets during training.
    pub held_out: Vec<usize>,
}

/// `count` held-out indices spread evenly over the rig, never camera 0.
pub fn held_out_indices(n_views: usize, count: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..count)
        .map(|k| (n_views * (2 * k + 1) / (2 * count)).clamp(1, n_views - 1))
        .collect();
    out.dedup();
    out
}

impl TrainScene {
    pub fn new(scene: SyntheticScene, held_out: Vec<usize>) -> Result<Self, TrainError> {
        let views = scene.render_rig();
        if held_out.iter().any(|&i| i == 0 || i >= views.len()) {
            return Err(TrainError::Config("held-out views must be non-canonical rig cameras".into()));
        }
        Ok(TrainScene { scene, views, held_out })
    }

    /// Rig indices available to training, canonical camera first.
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|i| !self.held_out.contains(i)).collect()
    }

    /// Evaluation inputs: the first `v` training views.
    pub fn eval_inputs(&self, v: usize) -> Result<Vec<usize>, TrainError> {
        let train = self.train_indices();
        if train.len() < v {
            return Err(TrainError::Config(format!("{v} inputs requested, {} training views", train.len())));
        }
        Ok(train[..v].to_vec())
    }
}

/// One training sample: input view indices and target view indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Canonical view plus `v - 1` random training views as inputs; targets
/// drawn from the remaining training views.
pub fn draw_sample<R: Rng>(
    scenes: &[TrainScene],
    v: usize,
    targets: usize,
    rng: &mut R,
) -> Result<Sample, TrainError> {
    let s = rng.random_range(0..scenes.len());
    let train = scenes[s].train_indices();
    if train.len() < v + 1 {
        return Err(TrainError::Config(format!(
            "scene {s} has {} training views, {} needed",
            train.len(),
            v + 1
        )));
    }
    let rest = &train[1..];
    let picks = sample(rng, rest.len(), rest.len());
    let order: Vec<usize> = picks.iter().map(|i| rest[i]).collect();
    let mut inputs = vec![0];
    inputs.extend_from_slice(&order[..v - 1]);
    let pool = &order[v - 1..];
    let targets = (0..targets).map(|k| pool[k % pool.len()]).collect();
    Ok(Sample { scene: s, inputs, targets })
}
