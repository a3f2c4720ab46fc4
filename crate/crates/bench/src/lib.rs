//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hsdnet::graph::NetConfig;
use hsdnet::trainer::{synth_split, SynthSpec};
use hsdnet::{build_chain, Architecture, ChainNet, Dataset, IscvMatrix, IscvSet, Split, Tensor};

/// Desk-scale network: eight classes at 16x16.
pub fn desk_config() -> NetConfig {
    NetConfig { conv_widths: vec![16, 16, 32, 32], pool_after: vec![2, 4], num_classes: 8, input_shape: [3, 16, 16] }
}

pub fn desk_chain() -> ChainNet {
    build_chain(&desk_config(), None, 7).expect("desk network is valid")
}

pub fn desk_data(per_class: usize) -> Dataset {
    synth_split(SynthSpec { classes: 8, per_class, image_size: 16, seed: 7 }, Split::Train).expect("valid synth spec")
}

/// Uniform random score matrices for every conv layer of `arch`.
pub fn random_iscv(arch: &Architecture, seed: u64) -> IscvSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = arch.num_classes();
    (1..=arch.depth())
        .map(|l| {
            let k = arch.width(l);
            let t = Tensor::new(vec![c, k], (0..c * k).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("shape matches");
            (l, IscvMatrix::from_scores(l, t))
        })
        .collect()
}

/// `m` random vectors of length `k`.
pub fn random_vectors(m: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| (0..k).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
}
