//! Seeded fixtures shared by the benchmarks.

use atlasforge_core::{ClassId, EnsemblePrediction, VoxelGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A soft ensemble of `architectures` members over `classes` classes with
/// smooth, partly disagreeing probabilities.
pub fn ensemble(dims: [usize; 3], architectures: usize, classes: usize, seed: u64) -> EnsemblePrediction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voxels = dims.iter().product::<usize>();
    let class_ids = (1..=classes as u8).map(|c| ClassId::new(c).expect("class ids 1..=25")).collect();
    let probs = (0..architectures)
        .map(|_| {
            (0..classes)
                .map(|c| {
                    let shift = rng.random_range(0.0..0.2);
                    (0..voxels)
                        .map(|i| {
                            let base = ((i * (c + 3)) % 97) as f32 / 96.0;
                            (base + shift + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let names = (0..architectures).map(|a| format!("arch{a}")).collect();
    EnsemblePrediction::from_probabilities("bench", dims, [1.0, 1.0, 1.0], class_ids, names, probs)
        .expect("fixture ensemble is valid")
}

/// A random float32 volume.
pub fn float_grid(dims: [usize; 3], seed: u64) -> VoxelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voxels = dims.iter().product::<usize>();
    VoxelGrid::from_f32(dims, [0.8, 0.8, 2.5], (0..voxels).map(|_| rng.random()).collect()).expect("valid grid")
}

/// A random label volume with values in `0..=classes`.
pub fn label_grid(dims: [usize; 3], classes: u8, seed: u64) -> VoxelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voxels = dims.iter().product::<usize>();
    VoxelGrid::from_u8(dims, [0.8, 0.8, 2.5], (0..voxels).map(|_| rng.random_range(0..=classes)).collect())
        .expect("valid grid")
}

/// `(volume, size)` pairs with a few deliberate ties.
pub fn sizes(count: usize, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| (format!("ct{i:06}"), f64::from(rng.random_range(0..count as u32 / 2)))).collect()
}
