#![allow(dead_code)]

use std::path::Path;

use cvgl_harness::dataset::{gen_dataset, Dataset, DatasetConfig};
use cvgl_harness::TrainConfig;

/// Nine locations of 16-pixel images: six for training, three held out.
pub fn tiny_dataset_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        train_locations: 6,
        heldout_locations: 3,
        a_views: 2,
        b_views: 1,
        image_size: 16,
        seed,
        ..DatasetConfig::default()
    }
}

pub fn tiny_dataset(dir: &Path, seed: u64) -> Dataset {
    gen_dataset(&tiny_dataset_config(seed), dir).unwrap();
    Dataset::load(dir).unwrap()
}

pub fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 3,
        image_size: 16,
        num_queries: 4,
        seed,
        ..TrainConfig::default()
    }
}
