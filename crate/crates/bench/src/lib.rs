//! Shared fixtures for the benchmarks.

use nfmm_core::{build_geometry, build_interaction_tables, InteractionTables, ModelConfig, Tensor, TreeGeometry};

pub fn tree(depth: usize) -> (TreeGeometry, InteractionTables) {
    let g = build_geometry(depth, 1.0).expect("valid depth");
    let t = build_interaction_tables(&g);
    (g, t)
}

/// Deterministic leaf input with a smooth pattern.
pub fn leaf_input(depth: usize, channels: usize) -> Tensor {
    let rows = 1usize << (2 * depth);
    let data = (0..rows * channels).map(|i| ((i as f64) * 0.37).sin()).collect();
    Tensor::new(vec![rows, channels], data).expect("shape")
}

pub fn model_config(depth: usize, width: usize, latent: usize) -> ModelConfig {
    ModelConfig {
        tree_depth: depth,
        hidden_width: width,
        latent,
        model_layers: 1,
        ..ModelConfig::default()
    }
}
