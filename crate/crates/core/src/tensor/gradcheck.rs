use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Array, Graph, NodeId, ParamSet, TensorError};

const SEED_RNG: u64 = 0x5eed;

/// Compare reverse-mode gradients with central differences.
///
/// The scalar objective is `<seed, output>` for a fixed pseudo-random seed.
/// Every element of every trainable leaf is perturbed by `±eps`; the result
/// is the largest `|a - f| / max(|a|, |f|, 1e-8)` over all elements.
pub fn finite_diff_check(
    graph: &Graph,
    output: NodeId,
    bindings: &ParamSet<f64>,
    eps: f64,
) -> Result<f64, TensorError> {
    assert!(eps > 0.0 && eps <= 1e-3, "eps must lie in (0, 1e-3]");
    let mut rng = ChaCha8Rng::seed_from_u64(SEED_RNG);
    let shape = graph.shape(output).to_vec();
    let seed = Array::from_fn(&shape, |_| rng.random_range(-1.0..1.0));

    let objective = |b: &ParamSet<f64>| -> Result<f64, TensorError> {
        let ev = graph.forward(b)?;
        Ok(ev
            .value(output)
            .data()
            .iter()
            .zip(seed.data())
            .map(|(a, s)| a * s)
            .sum())
    };

    let analytic = {
        let ev = graph.forward(bindings)?;
        ev.backward(graph, &[(output, &seed)])?
    };

    let mut work = bindings.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = graph.trainable_leaves().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let grad = analytic.get(&name).expect("trainable leaf has a gradient").clone();
        let len = work.expect(&name).len();
        for i in 0..len {
            let orig = work.expect(&name).data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let plus = objective(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let minus = objective(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let f = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
