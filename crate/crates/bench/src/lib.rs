//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgaze_core::model::{ModelConfig, StGaze};
use stgaze_core::synth::{gen_sequence, SceneParams, SequenceSample};
use stgaze_core::{ParamStore, Real, Tensor};

/// Seeded model with its parameters.
pub fn model<T: Real>(config: ModelConfig, seed: u64) -> (ParamStore<T>, StGaze) {
    let mut store = ParamStore::new();
    let net = StGaze::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), config).expect("valid config");
    (store, net)
}

/// Synthetic clip of `len` frames.
pub fn clip(len: usize, seed: u64) -> SequenceSample {
    gen_sequence(len, &SceneParams::default(), seed, 0).expect("valid scene")
}

/// Uniform(−1, 1) tensor.
pub fn random<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-1.0..1.0))).expect("non-empty shape")
}
