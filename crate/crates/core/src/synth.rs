//! Seeded random weights for a graph, for demos and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model_graph::ModelGraph;
use crate::weight_store::{expected_tensors, WeightContainer, WeightTensor};

/// Uniform weights in `[-1, 1)`; batch-norm scale and variance in `[0.5, 1.5)`.
pub fn random_weights(graph: &ModelGraph, seed: u64) -> WeightContainer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = WeightContainer::new();
    for layer in graph.layers() {
        for (name, dims) in expected_tensors(layer) {
            let numel = dims.iter().product();
            let (lo, hi) = if name.ends_with(".gamma") || name.ends_with(".var") {
                (0.5, 1.5)
            } else if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".mean") {
                (-0.1, 0.1)
            } else {
                (-1.0, 1.0)
            };
            let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
            c.insert(WeightTensor::new(name, dims, data).expect("dims match data"))
                .expect("layer tensor names are unique");
        }
    }
    c
}
