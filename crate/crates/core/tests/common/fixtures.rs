//! Small synthetic datasets for training tests.

use discseg::data::{
    generate_samples, localization_data, segmentation_data, Dataset, SyntheticSpec,
};
use discseg::model::ModelConfig;
use discseg::preprocess::PreprocessConfig;
use discseg::train::{LocalizationData, SegmentationData};

pub fn spec(size: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        size,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn preprocess(size: usize) -> PreprocessConfig {
    PreprocessConfig {
        size,
        ..PreprocessConfig::default()
    }
}

pub fn loc_data(count: usize, size: usize, seed: u64) -> LocalizationData {
    let samples = generate_samples(&spec(size, seed), 1, count).unwrap();
    localization_data(&Dataset::from_samples(samples, false), &preprocess(size)).unwrap()
}

pub fn seg_data(count: usize, size: usize, seed: u64) -> SegmentationData {
    let samples = generate_samples(&spec(size, seed), 2, count).unwrap();
    segmentation_data(&Dataset::from_samples(samples, true), &preprocess(size)).unwrap()
}

pub fn tiny_model(size: usize) -> ModelConfig {
    ModelConfig {
        input_size: size,
        levels: 2,
        base_filters: 4,
        dropout_rate: 0.2,
    }
}
