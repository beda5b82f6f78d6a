//! Fixtures shared by the criterion benches.

use fecil_core::backbone::BackboneConfig;
use fecil_core::data::{synth_gaussians, Split};
use fecil_core::Tensor;

/// Desk-scale backbone: 1 channel, 16×16 inputs, width 8.
pub fn desk_backbone() -> BackboneConfig {
    BackboneConfig::default()
}

/// First `n` synthetic desk images with their labels.
pub fn desk_batch(n: usize) -> (Tensor, Vec<usize>) {
    let ds = synth_gaussians(10, n.div_ceil(10), 16, 0, Split::Train).expect("synthetic data");
    let sub = ds.subset(&(0..n).collect::<Vec<_>>()).expect("subset");
    let labels = sub.labels.iter().map(|&y| y as usize).collect();
    (sub.images, labels)
}

/// Deterministic pseudo-random values in [-1, 1).
pub fn filled(shape: &[usize], salt: u32) -> Tensor {
    Tensor::from_fn(shape, |i| {
        let h = (i as u32 ^ salt)
            .wrapping_mul(0x9e37_79b9)
            .rotate_left(13)
            .wrapping_mul(0x85eb_ca6b);
        (h >> 8) as f32 / (1u32 << 23) as f32 - 1.0
    })
}
