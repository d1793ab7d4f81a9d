#![allow(dead_code)]

use candle_core::{DType, Device};
use momentlight::feature_store::Sample;
use momentlight::synth::{SynthItem, SynthConfig, generate};
use momentlight::train::Item;

pub fn to_items(items: &[SynthItem], dtype: DType) -> Vec<Item> {
    items
        .iter()
        .map(|s| {
            let sample = Sample {
                annotation: s.annotation.clone(),
                features: s.features.clone(),
            };
            Item::from_sample(&sample, dtype, &Device::Cpu).unwrap()
        })
        .collect()
}

/// Train and validation items of a generated dataset.
pub fn split(cfg: &SynthConfig, dtype: DType) -> (Vec<Item>, Vec<Item>) {
    let data = generate(cfg).unwrap();
    (to_items(data.train(), dtype), to_items(data.val(), dtype))
}

/// A small dataset for fast end-to-end runs.
pub fn small_synth(num_items: usize, val_items: usize, dim: usize) -> SynthConfig {
    SynthConfig {
        num_items,
        val_items,
        num_clips: 16,
        video_dim: dim,
        text_dim: dim,
        num_tokens: 4,
        max_windows: 2,
        min_window_len: 2,
        max_window_len: 5,
        ..SynthConfig::default()
    }
}
