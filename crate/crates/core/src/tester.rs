//! Attention-guided partial-infringement testing: rank tokens by attention
//! mass, turn their reduced maps into binary masks, cut the generated image
//! into chunks, and compare each chunk against annotated target regions.

use std::collections::BTreeMap;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::{cosine, ImageEmbedder};
use crate::datamodel::{AttentionStack, BoundingBox, ChunkMatch};
use crate::error::{AuditError, Result};

/// Default number of top-attention tokens inspected per image.
pub const DEFAULT_TOP_TOKENS: usize = 3;

/// Connected components smaller than this fraction of the image are noise.
pub const MIN_CHUNK_AREA_FRACTION: f64 = 0.005;

/// Bilinear resampling with half-pixel centers, clamped at the borders.
pub fn resample_bilinear(map: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (sh, sw) = map.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = ((y as f64 + 0.5) * sh as f64 / out_h as f64 - 0.5)
            .clamp(0.0, (sh - 1) as f64);
        let sx = ((x as f64 + 0.5) * sw as f64 / out_w as f64 - 0.5)
            .clamp(0.0, (sw - 1) as f64);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let x1 = (x0 + 1).min(sw - 1);
        let ty = sy - y0 as f64;
        let tx = sx - x0 as f64;
        let top = map[[y0, x0]] as f64 * (1.0 - tx) + map[[y0, x1]] as f64 * tx;
        let bottom = map[[y1, x0]] as f64 * (1.0 - tx) + map[[y1, x1]] as f64 * tx;
        (top * (1.0 - ty) + bottom * ty) as f32
    })
}

/// Head-averaged maps for `token` from every layer, resampled to the largest
/// layer resolution and averaged across layers.
pub fn reduce_attention(stack: &AttentionStack, token: usize) -> Result<Array2<f32>> {
    if stack.layers.is_empty() {
        return Err(AuditError::Precondition("attention stack has no layers".into()));
    }
    let (out_h, out_w) = stack
        .layers
        .iter()
        .map(|l| (l.height(), l.width()))
        .max_by_key(|&(h, w)| h * w)
        .unwrap();
    let mut acc = Array2::<f32>::zeros((out_h, out_w));
    for layer in &stack.layers {
        if token >= layer.token_dim() {
            return Err(AuditError::Precondition(format!(
                "token index {token} out of range for layer {}",
                layer.layer_index
            )));
        }
        acc += &resample_bilinear(&layer.head_mean_map(token), out_h, out_w);
    }
    acc.mapv_inplace(|v| v / stack.layers.len() as f32);
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_index: usize,
    pub word: String,
    pub score: f64,
}

/// Scores each complete-word token by its peak attention, averaged over every
/// (layer, head) map, and returns the top `m` (ties favor the earlier token).
pub fn rank_tokens(stack: &AttentionStack, m: usize) -> Result<Vec<TokenScore>> {
    if m < 1 {
        return Err(AuditError::Precondition("m must be >= 1".into()));
    }
    let prompt = &stack.prompt;
    let mut scores = Vec::new();
    for token in prompt.non_special_indices() {
        if !prompt.is_complete_word_token(token) {
            continue;
        }
        let mut total = 0.0f64;
        let mut maps = 0usize;
        for layer in &stack.layers {
            for map in layer.head_maps(token) {
                total += map.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
                maps += 1;
            }
        }
        scores.push(TokenScore {
            token_index: token,
            word: prompt.word_of_token(token).unwrap_or_default(),
            score: total / maps as f64,
        });
    }
    scores.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.token_index.cmp(&b.token_index))
    });
    scores.truncate(m);
    Ok(scores)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).ceil().max(0.0) as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= sum;
    }
    kernel
}

fn mirror_index(i: i64, n: i64) -> usize {
    // half-sample symmetric reflection, applied until in range
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with reflective padding.
pub fn gaussian_blur(map: &Array2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return map.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = map.dim();

    let mut rows = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (k, weight) in kernel.iter().enumerate() {
                let sx = mirror_index(x as i64 + k as i64 - radius, w as i64);
                acc += map[[y, sx]] as f64 * weight;
            }
            rows[[y, x]] = acc as f32;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (k, weight) in kernel.iter().enumerate() {
                let sy = mirror_index(y as i64 + k as i64 - radius, h as i64);
                acc += rows[[sy, x]] as f64 * weight;
            }
            out[[y, x]] = acc as f32;
        }
    }
    out
}

/// Blur, min-max normalize to [0, 1], threshold at 0.5. `sigma` defaults to
/// 5% of the larger map side. Constant maps produce an empty mask.
pub fn mask_from_map(map: &Array2<f32>, sigma: Option<f64>) -> Array2<bool> {
    let (h, w) = map.dim();
    let sigma = sigma.unwrap_or(0.05 * h.max(w) as f64);
    let blurred = gaussian_blur(map, sigma);
    let min = blurred.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = blurred.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if max <= min {
        return Array2::from_elem((h, w), false);
    }
    blurred.mapv(|v| (v - min) / (max - min) > 0.5)
}

/// One mask-derived region of the generated image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub bounds: BoundingBox,
    /// component size in image pixels, not bounding-box area
    pub pixels: u64,
}

/// Upscales the mask to image resolution (nearest neighbor), finds
/// 8-connected components, and keeps those at least
/// [`MIN_CHUNK_AREA_FRACTION`] of the image, largest first.
pub fn extract_chunks(mask: &Array2<bool>, image_w: u32, image_h: u32) -> Vec<Chunk> {
    let (mh, mw) = mask.dim();
    let (w, h) = (image_w as usize, image_h as usize);
    let mut grid = vec![false; w * h];
    for y in 0..h {
        let sy = (y * mh / h).min(mh - 1);
        for x in 0..w {
            let sx = (x * mw / w).min(mw - 1);
            grid[y * w + x] = mask[[sy, sx]];
        }
    }

    let min_pixels = (MIN_CHUNK_AREA_FRACTION * (w * h) as f64).ceil() as u64;
    let mut seen = vec![false; w * h];
    let mut chunks = Vec::new();
    for start in 0..w * h {
        if !grid[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (w, h, 0usize, 0usize);
        let mut pixels = 0u64;
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % w, idx / w);
            pixels += 1;
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if grid[nidx] && !seen[nidx] {
                        seen[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        if pixels < min_pixels {
            continue;
        }
        chunks.push(Chunk {
            bounds: BoundingBox {
                x: min_x as u32,
                y: min_y as u32,
                w: (max_x - min_x + 1) as u32,
                h: (max_y - min_y + 1) as u32,
            },
            pixels,
        });
    }
    chunks.sort_by(|a, b| {
        b.pixels
            .cmp(&a.pixels)
            .then_with(|| (a.bounds.y, a.bounds.x).cmp(&(b.bounds.y, b.bounds.x)))
    });
    chunks
}

/// A pre-embedded annotated region of one target image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationEmbedding {
    pub image_id: String,
    pub annotation_index: usize,
    pub embedding: Vec<f32>,
}

/// Outcome of testing one generated image against a topic's target corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatchReport {
    pub image_id: String,
    pub ranked_tokens: Vec<TokenScore>,
    pub matches: Vec<ChunkMatch>,
    /// true when any chunk exceeds the similarity threshold
    pub flagged: bool,
}

/// Runs the full per-image test: rank tokens, mask their reduced attention,
/// extract chunks, embed each chunk, and score it against every annotation by
/// maximum cosine similarity. A chunk is flagged only when its best
/// similarity strictly exceeds `threshold`.
#[allow(clippy::too_many_arguments)]
pub fn test_image(
    image_id: &str,
    image: &RgbImage,
    stack: &AttentionStack,
    annotations: &[AnnotationEmbedding],
    embedder: &dyn ImageEmbedder,
    m: usize,
    sigma: Option<f64>,
    threshold: f64,
) -> Result<ImageMatchReport> {
    if annotations.is_empty() {
        return Err(AuditError::Precondition(
            "no annotated target regions to compare against".into(),
        ));
    }
    let ranked = rank_tokens(stack, m)?;

    // chunk -> contributing token indices; identical boxes from different
    // tokens collapse into one match
    let mut by_box: BTreeMap<(u32, u32, u32, u32), Vec<usize>> = BTreeMap::new();
    for token in &ranked {
        let map = reduce_attention(stack, token.token_index)?;
        let mask = mask_from_map(&map, sigma);
        for chunk in extract_chunks(&mask, image.width(), image.height()) {
            let b = chunk.bounds;
            by_box
                .entry((b.y, b.x, b.w, b.h))
                .or_default()
                .push(token.token_index);
        }
    }

    let mut matches = Vec::new();
    for ((y, x, w, h), mut tokens) in by_box {
        tokens.dedup();
        let bounds = BoundingBox { x, y, w, h };
        let embedding = embedder.embed_chunk(image, &bounds)?;
        let mut best = (f64::NEG_INFINITY, ("".to_string(), 0));
        for ann in annotations {
            let sim = cosine(&embedding, &ann.embedding);
            if sim > best.0 {
                best = (sim, (ann.image_id.clone(), ann.annotation_index));
            }
        }
        matches.push(ChunkMatch {
            image_id: image_id.to_string(),
            chunk_box: bounds,
            source_token_indices: tokens,
            best_target: best.1,
            similarity: best.0,
            flagged: best.0 > threshold,
        });
    }

    let flagged = matches.iter().any(|m| m.flagged);
    Ok(ImageMatchReport {
        image_id: image_id.to_string(),
        ranked_tokens: ranked,
        matches,
        flagged,
    })
}
