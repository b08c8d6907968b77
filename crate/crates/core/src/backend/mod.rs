//! Abstract interfaces to the three external model roles: a text-to-image
//! diffusion backend with attention capture, a chat language model, and a
//! semantic image embedder. The [`synthetic`] module provides deterministic
//! implementations of all three for desk-scale runs and tests.

use image::RgbImage;
use ndarray::Array2;

use crate::datamodel::{AttentionStack, BoundingBox, TokenizedPrompt, Validate};
use crate::error::{AuditError, Result};

pub mod openai;
pub mod synthetic;

/// Temperature used for chat completions unless overridden.
pub const DEFAULT_CHAT_TEMPERATURE: f64 = 0.7;

/// Static facts about a diffusion backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffusionBackendDescriptor {
    pub name: String,
    pub num_cross_attention_layers: usize,
    /// (height, width) of the latent attention map per layer, in layer order.
    pub latent_map_resolutions: Vec<(usize, usize)>,
    pub max_tokens: usize,
}

impl DiffusionBackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.num_cross_attention_layers < 1 {
            return Err(AuditError::schema(
                "DiffusionBackendDescriptor.num_cross_attention_layers",
                "must be >= 1",
            ));
        }
        if self.latent_map_resolutions.len() != self.num_cross_attention_layers {
            return Err(AuditError::schema(
                "DiffusionBackendDescriptor.latent_map_resolutions",
                format!(
                    "{} resolutions for {} layers",
                    self.latent_map_resolutions.len(),
                    self.num_cross_attention_layers
                ),
            ));
        }
        Ok(())
    }
}

/// Descriptor for SD-1.x/2.x-class backends: 16 cross-attention layers
/// (6 down, 1 mid, 9 up) on a 64x64 latent.
pub fn sd2_class_descriptor(name: &str) -> DiffusionBackendDescriptor {
    let mut res = Vec::new();
    for side in [64, 64, 32, 32, 16, 16] {
        res.push((side, side));
    }
    res.push((8, 8)); // mid block
    for side in [16, 16, 16, 32, 32, 32, 64, 64, 64] {
        res.push((side, side));
    }
    DiffusionBackendDescriptor {
        name: name.to_string(),
        num_cross_attention_layers: 16,
        latent_map_resolutions: res,
        max_tokens: 77,
    }
}

/// Descriptor for SD-XL-class backends: 70 cross-attention layers on a
/// 128x128 latent (transformer depths 2/10 down, 10 mid, 10/2 up).
pub fn sdxl_class_descriptor(name: &str) -> DiffusionBackendDescriptor {
    let mut res = Vec::new();
    res.extend(std::iter::repeat((64, 64)).take(4));
    res.extend(std::iter::repeat((32, 32)).take(20));
    res.extend(std::iter::repeat((32, 32)).take(10)); // mid block
    res.extend(std::iter::repeat((32, 32)).take(30));
    res.extend(std::iter::repeat((64, 64)).take(6));
    DiffusionBackendDescriptor {
        name: name.to_string(),
        num_cross_attention_layers: 70,
        latent_map_resolutions: res,
        max_tokens: 77,
    }
}

/// One generated image plus the attention captured at the final reverse step.
#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub image: RgbImage,
    pub attention: AttentionStack,
    pub seed: u64,
    pub prompt: TokenizedPrompt,
}

impl GenerationResult {
    pub fn validate(&self) -> Result<()> {
        if self.image.width() < 1 || self.image.height() < 1 {
            return Err(AuditError::schema("GenerationResult.image", "degenerate image"));
        }
        if self.attention.prompt != self.prompt {
            return Err(AuditError::schema(
                "GenerationResult.attention",
                "attention prompt differs from generation prompt",
            ));
        }
        self.attention.validate()
    }
}

/// A frozen cross-attention module: hidden input captured once, after which
/// the output is a pure function of the text embedding.
pub trait AttentionProbe {
    fn layer_index(&self) -> usize;
    fn fixed_hidden_states(&self) -> &Array2<f32>;
    /// Maps a text embedding matrix (max_tokens x channels) to the attention
    /// output over the frozen spatial positions.
    fn attention_output(&self, embedding: &Array2<f32>) -> Array2<f32>;
}

/// Text-to-image backend with cross-attention capture.
pub trait DiffusionBackend {
    fn descriptor(&self) -> &DiffusionBackendDescriptor;

    fn tokenize(&self, text: &str) -> Result<TokenizedPrompt>;

    /// Text embedding matrix, padded to `descriptor().max_tokens` rows.
    fn encode_text(&self, prompt: &TokenizedPrompt) -> Result<Array2<f32>>;

    /// Deterministic for a fixed (backend, prompt, seed). Attention is
    /// captured at the final reverse step only.
    fn generate(&self, prompt: &str, seed: u64) -> Result<GenerationResult>;

    /// One probe per cross-attention layer, hidden states frozen from the
    /// final reverse step of a reference generation.
    fn probe_cross_attention(
        &self,
        reference_prompt: &str,
        seed: u64,
    ) -> Result<Vec<Box<dyn AttentionProbe>>>;
}

/// Chat language model used for phrase and sentence forging.
pub trait ChatClient {
    /// Returns `n` completions for `query`.
    fn complete(&self, query: &str, temperature: f64, n: usize) -> Result<Vec<String>>;
}

/// Semantic image embedder over rectangular chunks.
pub trait ImageEmbedder {
    /// Unit-L2-norm embedding of the chunk (zero vector for constant chunks,
    /// which carry no usable signal under a zero-mean embedding).
    fn embed_chunk(&self, image: &RgbImage, chunk: &BoundingBox) -> Result<Vec<f32>>;
}

/// Cosine similarity; zero-norm inputs compare as 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "embedding dimensions differ");
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na <= 0.0 || nb <= 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sd2_descriptor_reports_16_layers() {
        let d = sd2_class_descriptor("sd-2");
        d.validate().unwrap();
        assert_eq!(d.num_cross_attention_layers, 16);
    }

    #[test]
    fn sdxl_descriptor_reports_70_layers() {
        let d = sdxl_class_descriptor("sd-xl");
        d.validate().unwrap();
        assert_eq!(d.num_cross_attention_layers, 70);
    }

    #[test]
    fn cosine_conventions() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[0.0, 1.0])).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }
}
