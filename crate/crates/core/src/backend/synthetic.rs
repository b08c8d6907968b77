//! Deterministic synthetic backend: procedural images with planted feature
//! patches, attention stacks with planted per-token plateaus, a canned chat
//! client, and a pixel-space embedder. Every operation is a pure function of
//! its inputs, which gives downstream algorithms a known ground truth.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::collections::VecDeque;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{
    fnv1a64, AttentionStack, BoundingBox, LayerAttention, TokenRecord, TokenizedPrompt,
};
use crate::error::{AuditError, Result};

use super::{
    AttentionProbe, ChatClient, DiffusionBackend, DiffusionBackendDescriptor, GenerationResult,
    ImageEmbedder,
};

/// Axis-aligned rectangle in normalized [0, 1] image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl NormalizedRect {
    pub fn to_pixels(&self, image_size: u32) -> BoundingBox {
        let s = image_size as f64;
        BoundingBox {
            x: (self.x * s).round() as u32,
            y: (self.y * s).round() as u32,
            w: (self.w * s).round() as u32,
            h: (self.h * s).round() as u32,
        }
    }

    pub fn contains(&self, nx: f64, ny: f64) -> bool {
        nx >= self.x && nx < self.x + self.w && ny >= self.y && ny < self.y + self.h
    }
}

/// A token that triggers a high-attention plateau and, optionally, a feature
/// patch drawn into the generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedFeature {
    /// Lowercase token surface that triggers the plant.
    pub token: String,
    pub rect: NormalizedRect,
    /// When false, only attention is planted; the image stays clean.
    pub draw_patch: bool,
    pub pattern_seed: u64,
}

/// Fraction of the image side covered by a planted feature. At this size the
/// plateau occupies ~14% of the attention map, which keeps it above the hard
/// filter's tail threshold and within reach of the 90th percentile.
pub const FEATURE_SIDE: f64 = 0.375;

/// Default plateau slots, aligned to the coarsest attention grid.
pub fn feature_slot(slot: usize) -> NormalizedRect {
    let offsets = [
        (0.0625, 0.0625),
        (0.5625, 0.0625),
        (0.0625, 0.5625),
        (0.5625, 0.5625),
    ];
    let (x, y) = offsets[slot % offsets.len()];
    NormalizedRect {
        x,
        y,
        w: FEATURE_SIDE,
        h: FEATURE_SIDE,
    }
}

impl PlantedFeature {
    /// Feature for `token` in a deterministic slot keyed by the token itself.
    pub fn keyed(token: &str, draw_patch: bool) -> Self {
        let key = fnv1a64(token.as_bytes());
        PlantedFeature {
            token: token.to_lowercase(),
            rect: feature_slot(key as usize),
            draw_patch,
            pattern_seed: key,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub image_size: u32,
    pub layer_resolutions: Vec<(usize, usize)>,
    pub num_heads: usize,
    pub max_tokens: usize,
    pub embed_dim: usize,
    /// Uniform noise ceiling for non-planted token maps.
    pub noise_scale: f32,
    /// Plateau height for planted token maps.
    pub plateau_amplitude: f32,
    pub planted: Vec<PlantedFeature>,
    /// Reverse step index reported on captured stacks.
    pub final_step_index: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_size: 128,
            layer_resolutions: vec![(16, 16), (32, 32)],
            num_heads: 2,
            max_tokens: 32,
            embed_dim: 16,
            noise_scale: 0.2,
            plateau_amplitude: 10.0,
            planted: Vec::new(),
            final_step_index: 49,
        }
    }
}

pub struct SyntheticBackend {
    config: SyntheticConfig,
    descriptor: DiffusionBackendDescriptor,
}

impl SyntheticBackend {
    pub fn new(config: SyntheticConfig) -> Self {
        let descriptor = DiffusionBackendDescriptor {
            name: "synthetic".to_string(),
            num_cross_attention_layers: config.layer_resolutions.len(),
            latent_map_resolutions: config.layer_resolutions.clone(),
            max_tokens: config.max_tokens,
        };
        SyntheticBackend { config, descriptor }
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    fn feature_for(&self, surface: &str) -> Option<&PlantedFeature> {
        let lower = surface.to_lowercase();
        self.config.planted.iter().find(|f| f.token == lower)
    }

    fn plateau_map(&self, rect: &NormalizedRect, height: usize, width: usize) -> Array2<f32> {
        Array2::from_shape_fn((height, width), |(y, x)| {
            let nx = (x as f64 + 0.5) / width as f64;
            let ny = (y as f64 + 0.5) / height as f64;
            if rect.contains(nx, ny) {
                self.config.plateau_amplitude
            } else {
                0.0
            }
        })
    }
}

fn token_key(surface: &str) -> u64 {
    fnv1a64(format!("tok:{}", surface.to_lowercase()).as_bytes())
}

fn mix(a: u64, b: u64) -> u64 {
    fnv1a64(&[a.to_le_bytes(), b.to_le_bytes()].concat())
}

/// Procedural ring-pattern "logo" keyed by `seed`, used both for planted
/// patches in generated images and for target corpus fixtures.
pub fn feature_pattern(seed: u64, w: u32, h: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colors: Vec<[u8; 3]> = (0..3)
        .map(|_| [rng.gen_range(0..=255), rng.gen_range(0..=255), rng.gen_range(0..=255)])
        .collect();
    let mut img = RgbImage::new(w, h);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let scale = (w.min(h) as f64) / 2.0;
    for y in 0..h {
        for x in 0..w {
            let r = (((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() / scale).min(1.0);
            let band = ((r * 6.0) as usize) % 3;
            img.put_pixel(x, y, Rgb(colors[band]));
        }
    }
    img
}

impl DiffusionBackend for SyntheticBackend {
    fn descriptor(&self) -> &DiffusionBackendDescriptor {
        &self.descriptor
    }

    fn tokenize(&self, text: &str) -> Result<TokenizedPrompt> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Err(AuditError::Precondition(
                "prompt has no non-special tokens".to_string(),
            ));
        }
        if words.len() + 2 > self.config.max_tokens {
            return Err(AuditError::Precondition(format!(
                "prompt tokenizes to {} tokens, limit is {}",
                words.len() + 2,
                self.config.max_tokens
            )));
        }
        let mut tokens = vec![TokenRecord {
            token_id: 0,
            surface: "<s>".to_string(),
            is_special: true,
            word_index: None,
        }];
        let mut spans = BTreeMap::new();
        for (w, surface) in words.iter().enumerate() {
            spans.insert(w, (tokens.len(), tokens.len()));
            tokens.push(TokenRecord {
                token_id: token_key(surface) as u32,
                surface: (*surface).to_string(),
                is_special: false,
                word_index: Some(w),
            });
        }
        tokens.push(TokenRecord {
            token_id: 1,
            surface: "</s>".to_string(),
            is_special: true,
            word_index: None,
        });
        Ok(TokenizedPrompt {
            text: words.join(" "),
            tokens,
            word_spans: spans,
        })
    }

    fn encode_text(&self, prompt: &TokenizedPrompt) -> Result<Array2<f32>> {
        let (t_max, dim) = (self.config.max_tokens, self.config.embed_dim);
        if prompt.len() > t_max {
            return Err(AuditError::Precondition(format!(
                "prompt length {} exceeds encoder length {}",
                prompt.len(),
                t_max
            )));
        }
        let mut out = Array2::<f32>::zeros((t_max, dim));
        for row in 0..t_max {
            let key = match prompt.tokens.get(row) {
                Some(tok) => token_key(&tok.surface),
                None => token_key("<pad>"),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            for c in 0..dim {
                out[[row, c]] = rng.gen_range(-1.0..1.0);
            }
        }
        Ok(out)
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<GenerationResult> {
        let tokenized = self.tokenize(prompt)?;
        let gen_key = mix(fnv1a64(tokenized.text.as_bytes()), seed);
        let size = self.config.image_size;

        // constant background; features are the only structured content
        let mut bg_rng = ChaCha8Rng::seed_from_u64(mix(gen_key, fnv1a64(b"background")));
        let bg = Rgb([
            bg_rng.gen_range(60..=120u8),
            bg_rng.gen_range(60..=120u8),
            bg_rng.gen_range(60..=120u8),
        ]);
        let mut img = RgbImage::from_pixel(size, size, bg);

        let mut drawn: Vec<&PlantedFeature> = Vec::new();
        for tok in &tokenized.tokens {
            if tok.is_special {
                continue;
            }
            if let Some(feature) = self.feature_for(&tok.surface) {
                if feature.draw_patch && !drawn.iter().any(|f| f.token == feature.token) {
                    let rect = feature.rect.to_pixels(size);
                    let patch = feature_pattern(feature.pattern_seed, rect.w, rect.h);
                    for dy in 0..rect.h {
                        for dx in 0..rect.w {
                            img.put_pixel(rect.x + dx, rect.y + dy, *patch.get_pixel(dx, dy));
                        }
                    }
                    drawn.push(feature);
                }
            }
        }

        let mut layers = Vec::with_capacity(self.config.layer_resolutions.len());
        for (layer_index, &(h, w)) in self.config.layer_resolutions.iter().enumerate() {
            let heads = self.config.num_heads;
            let t = tokenized.len();
            let mut arr = ndarray::Array4::<f32>::zeros((heads, h, w, t));
            for (ti, tok) in tokenized.tokens.iter().enumerate() {
                let planted = if tok.is_special {
                    None
                } else {
                    self.feature_for(&tok.surface)
                };
                match planted {
                    Some(feature) => {
                        let map = self.plateau_map(&feature.rect, h, w);
                        for head in 0..heads {
                            for y in 0..h {
                                for x in 0..w {
                                    arr[[head, y, x, ti]] = map[[y, x]];
                                }
                            }
                        }
                    }
                    None => {
                        // One noise field shared by all heads, like the
                        // plateau: averaging independent fields would pull the
                        // head mean toward a bell shape whose tail beyond
                        // z = 1.96 rivals the hard filter's cut-off, letting
                        // pure noise masquerade as a keyword. A shared uniform
                        // field ends at z = sqrt(3), safely below it.
                        let key = mix(
                            gen_key,
                            fnv1a64(format!("attn:{layer_index}:{ti}").as_bytes()),
                        );
                        let mut rng = ChaCha8Rng::seed_from_u64(key);
                        for y in 0..h {
                            for x in 0..w {
                                let v = if self.config.noise_scale > 0.0 {
                                    rng.gen_range(0.0..self.config.noise_scale)
                                } else {
                                    0.0
                                };
                                for head in 0..heads {
                                    arr[[head, y, x, ti]] = v;
                                }
                            }
                        }
                    }
                }
            }
            layers.push(LayerAttention {
                layer_index,
                heads: arr,
            });
        }

        let result = GenerationResult {
            image: img,
            attention: AttentionStack {
                layers,
                step_index: self.config.final_step_index,
                prompt: tokenized.clone(),
            },
            seed,
            prompt: tokenized,
        };
        result.validate()?;
        Ok(result)
    }

    fn probe_cross_attention(
        &self,
        reference_prompt: &str,
        seed: u64,
    ) -> Result<Vec<Box<dyn AttentionProbe>>> {
        let tokenized = self.tokenize(reference_prompt)?;
        let base = mix(fnv1a64(tokenized.text.as_bytes()), mix(seed, fnv1a64(b"probe")));
        let mut probes: Vec<Box<dyn AttentionProbe>> = Vec::new();
        for (layer_index, &(h, w)) in self.config.layer_resolutions.iter().enumerate() {
            let spatial = h * w;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(base, layer_index as u64));
            let scale = 1.0 / (self.config.max_tokens as f32).sqrt();
            let hidden = Array2::from_shape_fn((spatial, self.config.max_tokens), |_| {
                rng.gen_range(-1.0f32..1.0) * scale
            });
            probes.push(Box::new(LinearProbe {
                layer_index,
                hidden,
            }));
        }
        Ok(probes)
    }
}

/// Linear frozen cross-attention stub: output = H . E.
pub struct LinearProbe {
    pub layer_index: usize,
    pub hidden: Array2<f32>,
}

impl AttentionProbe for LinearProbe {
    fn layer_index(&self) -> usize {
        self.layer_index
    }

    fn fixed_hidden_states(&self) -> &Array2<f32> {
        &self.hidden
    }

    fn attention_output(&self, embedding: &Array2<f32>) -> Array2<f32> {
        self.hidden.dot(embedding)
    }
}

/// Canned chat client. Completions are derived from the query itself (keyword
/// list and start phrase are parsed back out of the rendered template), keyed
/// by a hash of the query, so forging tests replay deterministically.
pub struct SyntheticChatClient;

const FILLERS: &[&str] = &[
    "quietly", "drifting", "beyond", "gentle", "morning", "harbor", "whisper", "amber", "woven",
    "distant", "lantern", "murmur", "velvet", "hollow", "gleam", "thread",
];

fn parse_after<'q>(query: &'q str, marker: &str) -> Option<&'q str> {
    let start = query.find(marker)? + marker.len();
    let rest = &query[start..];
    let end = rest.find('.').unwrap_or(rest.len());
    Some(rest[..end].trim())
}

impl ChatClient for SyntheticChatClient {
    fn complete(&self, query: &str, _temperature: f64, n: usize) -> Result<Vec<String>> {
        if n < 1 {
            return Err(AuditError::Precondition("n must be >= 1".to_string()));
        }
        let keywords: Vec<String> = parse_after(query, "exact order: ")
            .map(|s| s.split(", ").map(str::to_string).collect())
            .unwrap_or_default();
        let start_phrase = parse_after(query, "start with the phrase ")
            .or_else(|| parse_after(query, "Start the sentence with the exact "))
            .map(str::to_string);

        let base = fnv1a64(query.as_bytes()) as usize;
        let filler = |idx: usize| FILLERS[idx % FILLERS.len()];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let idx = base.wrapping_add(i);
            let f1 = filler(idx);
            let f2 = filler(idx / FILLERS.len() + 3);
            let f3 = filler(idx / (FILLERS.len() * FILLERS.len()) + 7);
            let kw = keywords.join(" ");
            let text = match (&start_phrase, keywords.is_empty()) {
                (Some(sp), false) => format!("{sp} {f1} {kw} {f2} {f3}"),
                (Some(sp), true) => format!("{sp} {f1} {f2} {f3}"),
                (None, false) => format!("{kw} {f1} {f2}"),
                (None, true) => format!("{f1} {f2} {f3}"),
            };
            out.push(text);
        }
        Ok(out)
    }
}

/// Test helper: replays scripted completion batches in order.
pub struct ScriptedChatClient {
    responses: RefCell<VecDeque<Vec<String>>>,
}

impl ScriptedChatClient {
    pub fn new(batches: Vec<Vec<String>>) -> Self {
        ScriptedChatClient {
            responses: RefCell::new(batches.into()),
        }
    }
}

impl ChatClient for ScriptedChatClient {
    fn complete(&self, _query: &str, _temperature: f64, n: usize) -> Result<Vec<String>> {
        if n < 1 {
            return Err(AuditError::Precondition("n must be >= 1".to_string()));
        }
        Ok(self.responses.borrow_mut().pop_front().unwrap_or_default())
    }
}

/// Embedder over zero-mean, downsampled pixel vectors. Constant chunks embed
/// to the zero vector.
pub struct PixelEmbedder {
    pub grid: usize,
}

impl Default for PixelEmbedder {
    fn default() -> Self {
        PixelEmbedder { grid: 8 }
    }
}

impl ImageEmbedder for PixelEmbedder {
    fn embed_chunk(&self, image: &RgbImage, chunk: &BoundingBox) -> Result<Vec<f32>> {
        chunk
            .validate_within(image.width(), image.height())
            .map_err(|e| AuditError::Precondition(e.to_string()))?;
        let g = self.grid as u32;
        let mut vec = Vec::with_capacity((self.grid * self.grid * 3) as usize);
        for gy in 0..g {
            for gx in 0..g {
                let y0 = chunk.y + gy * chunk.h / g;
                let y1 = (chunk.y + (gy + 1) * chunk.h / g).max(y0 + 1);
                let x0 = chunk.x + gx * chunk.w / g;
                let x1 = (chunk.x + (gx + 1) * chunk.w / g).max(x0 + 1);
                let mut acc = [0.0f64; 3];
                let mut count = 0u64;
                for y in y0..y1.min(chunk.bottom()) {
                    for x in x0..x1.min(chunk.right()) {
                        let p = image.get_pixel(x, y);
                        for c in 0..3 {
                            acc[c] += p.0[c] as f64;
                        }
                        count += 1;
                    }
                }
                let count = count.max(1);
                for c in 0..3 {
                    vec.push((acc[c] / count as f64 / 255.0) as f32);
                }
            }
        }
        let mean = vec.iter().map(|v| *v as f64).sum::<f64>() / vec.len() as f64;
        for v in vec.iter_mut() {
            *v = (*v as f64 - mean) as f32;
        }
        let norm = vec.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-9 {
            for v in vec.iter_mut() {
                *v = 0.0;
            }
        } else {
            for v in vec.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
        Ok(vec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::cosine;

    fn backend_with(features: Vec<PlantedFeature>) -> SyntheticBackend {
        SyntheticBackend::new(SyntheticConfig {
            planted: features,
            ..SyntheticConfig::default()
        })
    }

    #[test]
    fn generate_is_deterministic() {
        let b = backend_with(vec![PlantedFeature::keyed("zelda", true)]);
        let a = b.generate("a b c", 0).unwrap();
        let c = b.generate("a b c", 0).unwrap();
        assert_eq!(a.image.as_raw(), c.image.as_raw());
        assert_eq!(a.attention.raw_bytes(), c.attention.raw_bytes());
        let d = b.generate("a b c", 1).unwrap();
        assert_ne!(a.attention.raw_bytes(), d.attention.raw_bytes());
    }

    #[test]
    fn planted_token_attention_peaks_inside_rect() {
        let feature = PlantedFeature::keyed("zelda", true);
        let rect = feature.rect;
        let b = backend_with(vec![feature]);
        let result = b.generate("the legend of zelda", 0).unwrap();
        // token index of "zelda": specials offset by 1
        let token = 4;
        for layer in &result.attention.layers {
            let map = layer.head_mean_map(token);
            let (h, w) = map.dim();
            let mut max_pos = (0, 0);
            let mut max_val = f32::MIN;
            for y in 0..h {
                for x in 0..w {
                    if map[[y, x]] > max_val {
                        max_val = map[[y, x]];
                        max_pos = (y, x);
                    }
                }
            }
            let nx = (max_pos.1 as f64 + 0.5) / w as f64;
            let ny = (max_pos.0 as f64 + 0.5) / h as f64;
            assert!(rect.contains(nx, ny), "max at {nx},{ny} outside {rect:?}");
        }
    }

    #[test]
    fn token_limit_is_enforced() {
        let b = backend_with(vec![]);
        let long = vec!["word"; 40].join(" ");
        assert!(matches!(
            b.generate(&long, 0),
            Err(AuditError::Precondition(_))
        ));
    }

    #[test]
    fn probes_are_deterministic_and_linear() {
        let b = backend_with(vec![]);
        let p1 = b.probe_cross_attention("halo on the soldier", 3).unwrap();
        let p2 = b.probe_cross_attention("halo on the soldier", 3).unwrap();
        assert_eq!(p1.len(), b.descriptor().num_cross_attention_layers);
        for (a, c) in p1.iter().zip(&p2) {
            assert_eq!(a.fixed_hidden_states(), c.fixed_hidden_states());
        }
        // closed form: output = H . E
        let prompt = b.tokenize("a b").unwrap();
        let emb = b.encode_text(&prompt).unwrap();
        let out = p1[0].attention_output(&emb);
        let expected = p1[0].fixed_hidden_states().dot(&emb);
        assert_eq!(out, expected);
    }

    #[test]
    fn chat_client_is_deterministic_and_checks_n() {
        let c = SyntheticChatClient;
        let q = "Form 2 phrases using all of the exact words in the exact order: great, wave. The phrases should be similar to artwork great wave.";
        let a = c.complete(q, 0.7, 4).unwrap();
        let b = c.complete(q, 0.7, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for s in &a {
            assert!(s.contains("great wave"), "missing keywords in `{s}`");
        }
        assert!(matches!(
            c.complete(q, 0.7, 0),
            Err(AuditError::Precondition(_))
        ));
    }

    #[test]
    fn chat_client_honors_start_phrase() {
        let c = SyntheticChatClient;
        let q = "Form 3 sentences that start with the phrase a superhero. Do not make reference to the movie superman. Use words that are challenging to represent visually.";
        for s in c.complete(q, 0.7, 3).unwrap() {
            assert!(s.starts_with("a superhero "), "bad start in `{s}`");
            assert!(!s.contains("superman"));
        }
    }

    #[test]
    fn embedder_self_similarity_and_contrast() {
        let b = backend_with(vec![PlantedFeature::keyed("halo", true)]);
        let result = b.generate("halo above", 0).unwrap();
        let feature = PlantedFeature::keyed("halo", true);
        let rect = feature.rect.to_pixels(128);
        let embedder = PixelEmbedder::default();
        let e1 = embedder.embed_chunk(&result.image, &rect).unwrap();
        let e2 = embedder.embed_chunk(&result.image, &rect).unwrap();
        assert!((cosine(&e1, &e2) - 1.0).abs() < 1e-6);
        let norm: f64 = e1.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_chunks_compare_as_zero() {
        let white = RgbImage::from_pixel(16, 16, Rgb([255, 255, 255]));
        let black = RgbImage::from_pixel(16, 16, Rgb([0, 0, 0]));
        let whole = BoundingBox { x: 0, y: 0, w: 16, h: 16 };
        let embedder = PixelEmbedder::default();
        let ew = embedder.embed_chunk(&white, &whole).unwrap();
        let eb = embedder.embed_chunk(&black, &whole).unwrap();
        assert_eq!(cosine(&ew, &eb), 0.0);
    }

    #[test]
    fn degenerate_box_rejected() {
        let img = RgbImage::new(8, 8);
        let embedder = PixelEmbedder::default();
        let bad = BoundingBox { x: 0, y: 0, w: 0, h: 4 };
        assert!(embedder.embed_chunk(&img, &bad).is_err());
    }
}
