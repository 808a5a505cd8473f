//! Shared builders for the benchmark targets.

use melink_core::config::RunConfig;
use melink_core::encoders::{EncoderAdapter, ToyEncoder};
use melink_core::model::{EncodedObject, ModelParams};

/// Benchmark architecture on toy encodings: d=48, K=4, k=2.
pub fn bench_config() -> RunConfig {
    let mut cfg = RunConfig::with_seed(1);
    cfg.embed_dim = 48;
    cfg.experts_k = 4;
    cfg.top_k = 2;
    cfg.native_dim = 64;
    cfg.max_text_len = 16;
    cfg.num_patches = 8;
    cfg
}

pub fn bench_params(cfg: &RunConfig) -> ModelParams {
    ModelParams::init(cfg).expect("valid bench config")
}

pub fn bench_objects(cfg: &RunConfig, n: usize) -> Vec<EncodedObject> {
    let enc = ToyEncoder::new(cfg.native_dim, cfg.num_patches, cfg.seed);
    (0..n)
        .map(|i| EncodedObject {
            text: enc
                .encode_text(
                    &format!("object {i} with a handful of distinct tokens {i}"),
                    cfg.max_text_len,
                )
                .expect("toy text encodes"),
            visual: enc.encode_image(None).expect("placeholder encodes"),
        })
        .collect()
}
