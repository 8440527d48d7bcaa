//! Benchmark inputs shared by the criterion targets.

use dagerc_core::daggraph::build_dag_from_speakers;
use dagerc_core::{ConvDag, Model, ModelConfig};

/// A conversation of `n` turns cycling through `n_speakers` speakers, with
/// deterministic features.
pub fn conversation(n: usize, n_speakers: usize, d_feat: usize, omega: usize) -> (Vec<Vec<f64>>, ConvDag, Vec<usize>) {
    let speakers: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % n_speakers).collect();
    let features = (0..n)
        .map(|i| (0..d_feat).map(|k| (((i * 31 + k * 17) % 23) as f64 - 11.0) / 11.0).collect())
        .collect();
    let labels = (0..n).map(|i| i % 3).collect();
    (features, build_dag_from_speakers(&speakers, omega).unwrap(), labels)
}

pub fn model(d_feat: usize, d_h: usize, n_layers: usize) -> Model {
    Model::new(ModelConfig {
        d_feat,
        d_h,
        n_layers,
        n_classes: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    })
    .unwrap()
}
