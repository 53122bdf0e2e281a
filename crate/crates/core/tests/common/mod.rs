#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rnnt::decoder::{JointConfig, PredictionConfig};
use rnnt::encoder::EncoderConfig;
use rnnt::model::{FloatModel, FrontendConfig, ModelConfig};
use rnnt::nn::{FeatureSequence, Tensor2D};

/// A small model with time reduction 2 after layer 2 and projections.
pub fn micro_config(vocab: usize, feature_dim: usize, units: usize) -> ModelConfig {
    ModelConfig {
        feature_dim,
        frontend: FrontendConfig { left_context: 1, downsample: 1 },
        encoder: EncoderConfig {
            input_dim: feature_dim * 2,
            num_layers: 3,
            units,
            projection_dim: 4,
            reduction_factor: 2,
            reduction_after_layer: 2,
            layer_norm: true,
        },
        prediction: PredictionConfig { embedding_dim: 4, num_layers: 1, units, projection_dim: 0, layer_norm: false },
        joint: JointConfig { hidden: units },
        vocabulary: (0..vocab).map(|i| format!("u{i}")).collect(),
    }
}

pub fn micro_model(vocab: usize, seed: u64) -> FloatModel {
    FloatModel::random(micro_config(vocab, 3, 6), seed).unwrap()
}

pub fn random_features(frames: usize, dim: usize, seed: u64) -> FeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    FeatureSequence::new(Tensor2D::from_vec(frames, dim, data).unwrap(), 0.01)
}
