//! Coarse and fine-grained feature extraction behind one adapter interface.
//!
//! The deterministic toy encoder makes the whole architecture testable
//! without pretrained weights: token and patch embeddings are pure functions
//! of (content, seed). A pretrained vision-language encoder plugs in through
//! [`EncoderAdapter`]; only the projection into the model dimension is
//! trainable either way.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::hash;
use crate::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Visual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Mention,
    Entity,
}

/// Coarse summary vector plus fine per-token/per-patch matrix for one
/// modality of one object. `mask[i]` is true for real content rows and false
/// for padding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub coarse: Array2<f64>,
    pub fine: Array2<f64>,
    pub mask: Vec<bool>,
    pub modality: Modality,
    pub side: Side,
}

impl FeatureBundle {
    pub fn new(
        coarse: Array2<f64>,
        fine: Array2<f64>,
        mask: Vec<bool>,
        modality: Modality,
        side: Side,
    ) -> Result<Self> {
        if coarse.nrows() != 1 {
            return Err(Error::Shape(format!(
                "coarse must be 1xd, got {:?}",
                coarse.dim()
            )));
        }
        if coarse.ncols() != fine.ncols() {
            return Err(Error::Shape(format!(
                "coarse dim {} != fine dim {}",
                coarse.ncols(),
                fine.ncols()
            )));
        }
        if mask.len() != fine.nrows() {
            return Err(Error::Shape(format!(
                "mask length {} != fine rows {}",
                mask.len(),
                fine.nrows()
            )));
        }
        Ok(FeatureBundle {
            coarse,
            fine,
            mask,
            modality,
            side,
        })
    }

    pub fn dim(&self) -> usize {
        self.coarse.ncols()
    }

    pub fn rows(&self) -> usize {
        self.fine.nrows()
    }

    pub fn content_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn with_side(mut self, side: Side) -> Self {
        self.side = side;
        self
    }
}

/// Pluggable feature extractor. Implementations must be deterministic for
/// fixed inputs and weights; the coarse vector of `encode_text` corresponds
/// to the sequence-summary token.
pub trait EncoderAdapter: Sync {
    fn encode_text(&self, text: &str, max_len: usize) -> Result<FeatureBundle>;
    fn encode_image(&self, image_ref: Option<&Path>) -> Result<FeatureBundle>;
    fn native_dim(&self) -> usize;
}

/// Deterministic seeded encoder used for tests and toy training runs.
/// Whitespace tokenization; the coarse summary is the masked mean of the
/// fine rows (a pretrained adapter would expose its native summary token
/// instead).
pub struct ToyEncoder {
    native_dim: usize,
    num_patches: usize,
    seed: u64,
}

const PLACEHOLDER_TAG: u64 = 0x706c616365686f6c; // "placehol"
const PATCH_STRIDE: u64 = 0x9e3779b97f4a7c15;

impl ToyEncoder {
    pub fn new(native_dim: usize, num_patches: usize, seed: u64) -> Self {
        assert!(native_dim >= 1 && num_patches >= 1);
        ToyEncoder {
            native_dim,
            num_patches,
            seed,
        }
    }

    fn embed_row(&self, row_seed: u64) -> Vec<f64> {
        let scale = 1.0 / (self.native_dim as f64).sqrt();
        let mut rng = seeded::rng(row_seed);
        (0..self.native_dim)
            .map(|_| seeded::uniform_sym(&mut rng, scale))
            .collect()
    }
}

impl EncoderAdapter for ToyEncoder {
    fn encode_text(&self, text: &str, max_len: usize) -> Result<FeatureBundle> {
        if max_len == 0 {
            return Err(Error::Argument("max_len must be >= 1".into()));
        }
        let tokens: Vec<&str> = text.split_whitespace().take(max_len).collect();
        let mut fine = Array2::zeros((max_len, self.native_dim));
        let mut mask = vec![false; max_len];
        for (i, tok) in tokens.iter().enumerate() {
            let row = self.embed_row(hash::fnv1a64(tok.as_bytes()) ^ self.seed);
            for (j, v) in row.into_iter().enumerate() {
                fine[[i, j]] = v;
            }
            mask[i] = true;
        }
        let coarse = masked_mean(&fine, &mask);
        FeatureBundle::new(coarse, fine, mask, Modality::Text, Side::Mention)
    }

    fn encode_image(&self, image_ref: Option<&Path>) -> Result<FeatureBundle> {
        let mut fine = Array2::zeros((self.num_patches, self.native_dim));
        let mut mask = vec![false; self.num_patches];
        match image_ref {
            Some(path) => {
                let bytes = std::fs::read(path)
                    .map_err(|e| Error::Encoding(format!("{}: {e}", path.display())))?;
                let digest = hash::fnv1a64(&bytes);
                for p in 0..self.num_patches {
                    let row_seed = digest ^ self.seed ^ (p as u64).wrapping_mul(PATCH_STRIDE);
                    let row = self.embed_row(row_seed);
                    for (j, v) in row.into_iter().enumerate() {
                        fine[[p, j]] = v;
                    }
                    mask[p] = true;
                }
            }
            None => {
                // missing image: a single seeded placeholder patch
                let row = self.embed_row(self.seed ^ PLACEHOLDER_TAG);
                for (j, v) in row.into_iter().enumerate() {
                    fine[[0, j]] = v;
                }
                mask[0] = true;
            }
        }
        let coarse = masked_mean(&fine, &mask);
        FeatureBundle::new(coarse, fine, mask, Modality::Visual, Side::Mention)
    }

    fn native_dim(&self) -> usize {
        self.native_dim
    }
}

fn masked_mean(fine: &Array2<f64>, mask: &[bool]) -> Array2<f64> {
    let d = fine.ncols();
    let mut out = Array2::zeros((1, d));
    let cnt = mask.iter().filter(|&&m| m).count();
    if cnt == 0 {
        return out; // empty input: zero coarse vector
    }
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for j in 0..d {
                out[[0, j]] += fine[[i, j]];
            }
        }
    }
    out.mapv_inplace(|x| x / cnt as f64);
    out
}

/// Linear map of coarse and every fine row into the model dimension;
/// the mask is preserved.
pub fn project_to_model_dim(
    bundle: &FeatureBundle,
    weights: &Array2<f64>,
) -> Result<FeatureBundle> {
    if weights.nrows() != bundle.dim() {
        return Err(Error::Shape(format!(
            "projection expects {}x? weights, got {:?}",
            bundle.dim(),
            weights.dim()
        )));
    }
    FeatureBundle::new(
        bundle.coarse.dot(weights),
        bundle.fine.dot(weights),
        bundle.mask.clone(),
        bundle.modality,
        bundle.side,
    )
}

/// Build the encoder selected by the config ("toy" is bundled; "pretrained"
/// must be supplied by the caller as an [`EncoderAdapter`] implementation).
pub fn encoder_from_config(cfg: &crate::config::RunConfig) -> Result<Box<dyn EncoderAdapter>> {
    match cfg.encoder.as_str() {
        "toy" => Ok(Box::new(ToyEncoder::new(
            cfg.native_dim,
            cfg.num_patches,
            cfg.seed,
        ))),
        "pretrained" => Err(Error::Argument(
            "no pretrained adapter is bundled; implement EncoderAdapter and pass it in".into(),
        )),
        other => Err(Error::Argument(format!("unknown encoder {other:?}"))),
    }
}
