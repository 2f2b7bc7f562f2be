//! Fixtures shared by the benchmarks.

use muse_core::distill::{DistillConfig, TrainerState};
use muse_core::model::init_params;
use muse_core::sampler::{multi_crop, ViewSet};
use muse_core::synth::generate_roi;
use muse_core::{ModelConfig, MultiCropConfig, Params, RoiPatch, SeededRng, SynthConfig};

pub fn small_model() -> ModelConfig {
    ModelConfig {
        dim: 32,
        depth: 4,
        heads: 2,
        reassemble_channels: 16,
        fused_channels: 8,
        head_hidden: 64,
        head_bottleneck: 32,
        proto_cls: 64,
        proto_nu: 64,
        point_hidden: 16,
        pos_grid: 6,
        ..ModelConfig::default()
    }
}

pub fn small_crops() -> MultiCropConfig {
    MultiCropConfig {
        global_side: 48,
        local_side: 16,
        n_local: 4,
        ..MultiCropConfig::default()
    }
}

pub fn roi(seed: u64) -> RoiPatch {
    let cfg = SynthConfig {
        roi_side: 128,
        nuclei_min: 12,
        nuclei_max: 24,
        ..SynthConfig::default()
    };
    generate_roi(&cfg, "bench", &mut SeededRng::new(seed)).expect("fixture ROI")
}

pub fn params(model: &ModelConfig) -> Params {
    init_params(model, &mut SeededRng::new(0)).expect("fixture params")
}

pub fn view_sets(n: usize) -> Vec<ViewSet> {
    let crops = small_crops();
    (0..n as u64)
        .map(|i| multi_crop(&roi(i), &crops, &mut SeededRng::new(100 + i)).expect("fixture views"))
        .collect()
}

pub fn trainer(model: &ModelConfig) -> (TrainerState, DistillConfig) {
    (TrainerState::new(model, params(model)), DistillConfig::default())
}

pub type Points = Vec<(f64, f64)>;

/// Two point clouds of `n` points with small offsets.
pub fn point_clouds(n: usize) -> (Points, Points) {
    let mut rng = SeededRng::new(5);
    let gt: Points = (0..n).map(|_| (rng.uniform_range(0.0, 256.0), rng.uniform_range(0.0, 256.0))).collect();
    let pred = gt
        .iter()
        .map(|&(x, y)| (x + rng.uniform_range(-4.0, 4.0), y + rng.uniform_range(-4.0, 4.0)))
        .collect();
    (pred, gt)
}
