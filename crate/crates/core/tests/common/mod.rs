#![allow(dead_code)]

use sdssl::config::ExperimentConfig;
use sdssl::data::synthetic::{generate, SyntheticConfig};
use sdssl::data::{AugmentationRecipe, ImageDataset, Split};
use sdssl::framework::Framework;
use sdssl::heads::HeadConfig;
use sdssl::vit::{EncoderConfig, ImageBatch};

/// Two layers, width 16, 8px images: small enough for finite differences.
pub fn tiny_config(fw: Framework) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.framework = fw;
    c.encoder = EncoderConfig {
        num_layers: 2,
        embed_dim: 16,
        num_heads: 2,
        patch_size: 4,
        image_size: 8,
        mlp_ratio: 2.0,
        channels: 3,
    };
    c.heads = HeadConfig {
        out_dim: 8,
        hidden_last_projector: 16,
        hidden_intermediate_projector: 12,
        hidden_predictor: 16,
        shared_predictor: false,
    };
    c.data.batch_size = 4;
    c.data.recipe = AugmentationRecipe {
        output_size: 8,
        ..Default::default()
    };
    c.data.synthetic = SyntheticConfig {
        num_samples: 16,
        num_classes: 2,
        size: 8,
        seed: 1,
    };
    c.data.synthetic_test_samples = 8;
    c.schedule.epochs = 2;
    c.schedule.lr = 1e-2;
    c.eval.metric_samples = 8;
    c.eval.knn_k = 3;
    c
}

pub fn train_set(c: &ExperimentConfig) -> ImageDataset {
    generate(&c.data.synthetic, Split::Train)
}

pub fn views(c: &ExperimentConfig, step: u64) -> (ImageBatch, ImageBatch) {
    let ds = train_set(c);
    ds.view_batches(&[0, 1, 2, 3], &c.data.recipe, c.seed, step)
        .unwrap()
}
