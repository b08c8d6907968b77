//! Shared value types and serialization contracts used by every pipeline stage.
//!
//! Registry, prompt, and match records are canonical JSON. Attention stacks are
//! stored as little-endian 32-bit floats in a raw binary file referenced by a
//! JSON manifest carrying shape, dtype, and layer ordering.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// Chunk similarity above this value flags a match (strict inequality).
pub const SIMILARITY_FLAG_THRESHOLD: f64 = 0.85;

/// Words excluded when deriving sensitive words from a topic string.
pub const STOP_WORDS: &[&str] = &["the", "of", "a", "an", "poster", "logo"];

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.contains(&word)
}

/// Lowercased alphanumeric words of a text; apostrophes stay inside words.
pub fn text_words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Stable 64-bit FNV-1a hash, used wherever a platform-independent key is needed.
pub fn fnv1a64(data: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in data {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Values that carry their own invariant checks, re-run on every load.
pub trait Validate {
    fn validate(&self) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Movie,
    Game,
    Logo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassFlag {
    I,
    II,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynonymStrategy {
    BroaderCategory,
    Polysemy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymEntry {
    pub phrase: String,
    pub strategy: SynonymStrategy,
}

/// An audit target: a potentially copyrighted subject plus its synonym phrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub id: String,
    pub display_name: String,
    pub category: Category,
    #[serde(default)]
    pub synonyms: Vec<SynonymEntry>,
    pub class_flag: ClassFlag,
}

impl Topic {
    /// Non-stop-words of the display name, lowercased, in order.
    pub fn display_words(&self) -> Vec<String> {
        text_words(&self.display_name)
            .into_iter()
            .filter(|w| !is_stop_word(w))
            .collect()
    }

    /// Sensitive words: display-name words (minus stop-words) that appear in
    /// none of the topic's synonym phrases. Synonym phrases substitute exactly
    /// these words, so any word a synonym reuses is by definition not the
    /// sensitive one.
    pub fn sensitive_words(&self) -> Vec<String> {
        let synonym_words: Vec<String> = self
            .synonyms
            .iter()
            .flat_map(|s| text_words(&s.phrase))
            .collect();
        self.display_words()
            .into_iter()
            .filter(|w| !synonym_words.contains(w))
            .collect()
    }
}

impl Validate for Topic {
    fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(AuditError::schema("Topic.id", "must be non-empty"));
        }
        if self.id != self.id.to_lowercase() {
            return Err(AuditError::schema(
                "Topic.id",
                format!("`{}` must be lowercase", self.id),
            ));
        }
        if self.class_flag == ClassFlag::I && self.synonyms.is_empty() {
            return Err(AuditError::schema(
                "Topic.synonyms",
                format!("Class I topic `{}` requires at least one synonym", self.id),
            ));
        }
        let sensitive = self.sensitive_words();
        for syn in &self.synonyms {
            if syn.phrase.is_empty() {
                return Err(AuditError::schema(
                    "SynonymEntry.phrase",
                    format!("empty synonym phrase on topic `{}`", self.id),
                ));
            }
            let phrase_words = text_words(&syn.phrase);
            if let Some(bad) = sensitive.iter().find(|w| phrase_words.contains(w)) {
                return Err(AuditError::schema(
                    "SynonymEntry.phrase",
                    format!(
                        "synonym `{}` of topic `{}` contains sensitive word `{}`",
                        syn.phrase, self.id, bad
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: u32,
    pub surface: String,
    pub is_special: bool,
    pub word_index: Option<usize>,
}

/// A prompt plus its token records and word span mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPrompt {
    pub text: String,
    pub tokens: Vec<TokenRecord>,
    /// word_index -> (first_token, last_token), inclusive.
    pub word_spans: BTreeMap<usize, (usize, usize)>,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Indices of tokens that are neither start, end, nor padding tokens.
    pub fn non_special_indices(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.is_special)
            .map(|(i, _)| i)
            .collect()
    }

    /// True when the token at `index` covers a complete word on its own.
    pub fn is_complete_word_token(&self, index: usize) -> bool {
        match self.tokens.get(index).and_then(|t| t.word_index) {
            Some(w) => self.word_spans.get(&w) == Some(&(index, index)),
            None => false,
        }
    }

    /// The full word a token belongs to, joining sub-word surfaces.
    pub fn word_of_token(&self, index: usize) -> Option<String> {
        let w = self.tokens.get(index)?.word_index?;
        let &(first, last) = self.word_spans.get(&w)?;
        Some(
            self.tokens[first..=last]
                .iter()
                .map(|t| t.surface.as_str())
                .collect::<String>(),
        )
    }

    fn detokenize(&self) -> String {
        let mut words: Vec<String> = Vec::new();
        for (&_, &(first, last)) in &self.word_spans {
            words.push(
                self.tokens[first..=last]
                    .iter()
                    .map(|t| t.surface.as_str())
                    .collect::<String>(),
            );
        }
        words.join(" ")
    }
}

impl Validate for TokenizedPrompt {
    fn validate(&self) -> Result<()> {
        for (i, tok) in self.tokens.iter().enumerate() {
            match (tok.is_special, tok.word_index) {
                (true, Some(_)) => {
                    return Err(AuditError::schema(
                        "TokenizedPrompt.tokens",
                        format!("special token {i} must not carry a word_index"),
                    ))
                }
                (false, None) => {
                    return Err(AuditError::schema(
                        "TokenizedPrompt.tokens",
                        format!("non-special token {i} must carry a word_index"),
                    ))
                }
                _ => {}
            }
        }
        for (&w, &(first, last)) in &self.word_spans {
            if first > last || last >= self.tokens.len() {
                return Err(AuditError::schema(
                    "TokenizedPrompt.word_spans",
                    format!("span {first}..={last} of word {w} out of range"),
                ));
            }
            for i in first..=last {
                if self.tokens[i].word_index != Some(w) {
                    return Err(AuditError::schema(
                        "TokenizedPrompt.word_spans",
                        format!("token {i} not assigned to word {w}"),
                    ));
                }
            }
        }
        if self.detokenize() != self.text {
            return Err(AuditError::schema(
                "TokenizedPrompt.text",
                format!(
                    "tokens do not reconstruct text: `{}` vs `{}`",
                    self.detokenize(),
                    self.text
                ),
            ));
        }
        Ok(())
    }
}

/// Raw per-head cross-attention of one layer: shape (heads, height, width, tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub layer_index: usize,
    pub heads: Array4<f32>,
}

impl LayerAttention {
    pub fn num_heads(&self) -> usize {
        self.heads.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.heads.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.heads.shape()[2]
    }

    pub fn token_dim(&self) -> usize {
        self.heads.shape()[3]
    }

    /// Head-averaged 2-D map for one token.
    pub fn head_mean_map(&self, token: usize) -> Array2<f32> {
        let (heads, h, w, _) = (
            self.num_heads(),
            self.height(),
            self.width(),
            self.token_dim(),
        );
        let mut out = Array2::<f32>::zeros((h, w));
        for head in 0..heads {
            for y in 0..h {
                for x in 0..w {
                    out[[y, x]] += self.heads[[head, y, x, token]];
                }
            }
        }
        out.mapv_inplace(|v| v / heads as f32);
        out
    }

    /// One 2-D map per head for one token.
    pub fn head_maps(&self, token: usize) -> Vec<Array2<f32>> {
        (0..self.num_heads())
            .map(|head| {
                Array2::from_shape_fn((self.height(), self.width()), |(y, x)| {
                    self.heads[[head, y, x, token]]
                })
            })
            .collect()
    }
}

impl Validate for LayerAttention {
    fn validate(&self) -> Result<()> {
        let s = self.heads.shape();
        if s[0] < 1 || s[1] < 1 || s[2] < 1 {
            return Err(AuditError::schema(
                "LayerAttention.heads",
                format!("degenerate shape {s:?}"),
            ));
        }
        if self.heads.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(AuditError::schema(
                "LayerAttention.heads",
                format!("layer {} contains negative or non-finite values", self.layer_index),
            ));
        }
        Ok(())
    }
}

/// Per-layer cross-attention captured at the final reverse diffusion step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub layers: Vec<LayerAttention>,
    pub step_index: usize,
    pub prompt: TokenizedPrompt,
}

impl Validate for AttentionStack {
    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(AuditError::schema("AttentionStack.layers", "no layers"));
        }
        let t = self.prompt.len();
        for layer in &self.layers {
            layer.validate()?;
            if layer.token_dim() != t {
                return Err(AuditError::schema(
                    "AttentionStack.layers",
                    format!(
                        "layer {} token dim {} != prompt length {}",
                        layer.layer_index,
                        layer.token_dim(),
                        t
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub layer_index: usize,
    pub num_heads: usize,
    pub height: usize,
    pub width: usize,
    pub tokens: usize,
}

/// JSON sidecar describing the raw float dump of an [`AttentionStack`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionManifest {
    pub dtype: String,
    pub byte_order: String,
    pub step_index: usize,
    pub prompt: TokenizedPrompt,
    pub layers: Vec<LayerShape>,
}

impl AttentionStack {
    pub fn manifest(&self) -> AttentionManifest {
        AttentionManifest {
            dtype: "f32".to_string(),
            byte_order: "little".to_string(),
            step_index: self.step_index,
            prompt: self.prompt.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerShape {
                    layer_index: l.layer_index,
                    num_heads: l.num_heads(),
                    height: l.height(),
                    width: l.width(),
                    tokens: l.token_dim(),
                })
                .collect(),
        }
    }

    /// Raw little-endian f32 dump, layers in manifest order, row-major.
    pub fn raw_bytes(&self) -> Vec<u8> {
        let total: usize = self.layers.iter().map(|l| l.heads.len()).sum();
        let mut out = Vec::with_capacity(total * 4);
        for layer in &self.layers {
            for v in layer.heads.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_parts(manifest: AttentionManifest, raw: &[u8]) -> Result<Self> {
        if manifest.dtype != "f32" || manifest.byte_order != "little" {
            return Err(AuditError::schema(
                "AttentionManifest.dtype",
                format!("unsupported dump format {}/{}", manifest.dtype, manifest.byte_order),
            ));
        }
        let expected: usize = manifest
            .layers
            .iter()
            .map(|l| l.num_heads * l.height * l.width * l.tokens)
            .sum();
        if raw.len() != expected * 4 {
            return Err(AuditError::schema(
                "AttentionStack.raw",
                format!("raw dump has {} bytes, expected {}", raw.len(), expected * 4),
            ));
        }
        let mut offset = 0usize;
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for shape in &manifest.layers {
            let n = shape.num_heads * shape.height * shape.width * shape.tokens;
            let mut values = Vec::with_capacity(n);
            for i in 0..n {
                let start = (offset + i) * 4;
                let bytes: [u8; 4] = raw[start..start + 4].try_into().unwrap();
                values.push(f32::from_le_bytes(bytes));
            }
            offset += n;
            let heads = Array4::from_shape_vec(
                (shape.num_heads, shape.height, shape.width, shape.tokens),
                values,
            )
            .map_err(|e| AuditError::schema("AttentionStack.raw", e.to_string()))?;
            layers.push(LayerAttention {
                layer_index: shape.layer_index,
                heads,
            });
        }
        let stack = AttentionStack {
            layers,
            step_index: manifest.step_index,
            prompt: manifest.prompt,
        };
        stack.validate()?;
        Ok(stack)
    }

    /// Writes `<stem>.manifest.json` and `<stem>.f32` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| AuditError::io(dir, e))?;
        let manifest_path = dir.join(format!("{stem}.manifest.json"));
        let raw_path = dir.join(format!("{stem}.f32"));
        write_json(&manifest_path, &self.manifest())?;
        fs::write(&raw_path, self.raw_bytes()).map_err(|e| AuditError::io(&raw_path, e))?;
        Ok(())
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let manifest_path = dir.join(format!("{stem}.manifest.json"));
        let raw_path = dir.join(format!("{stem}.f32"));
        let manifest: AttentionManifest = read_json(&manifest_path)?;
        let raw = fs::read(&raw_path).map_err(|e| AuditError::io(&raw_path, e))?;
        Self::from_parts(manifest, &raw)
    }
}

/// Axis-aligned pixel box, top-left corner plus extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn validate_within(&self, image_w: u32, image_h: u32) -> Result<()> {
        if self.w < 1 || self.h < 1 {
            return Err(AuditError::schema(
                "BoundingBox",
                format!("degenerate box {self:?}"),
            ));
        }
        if self.right() > image_w || self.bottom() > image_h {
            return Err(AuditError::schema(
                "BoundingBox",
                format!("box {self:?} exceeds image bounds {image_w}x{image_h}"),
            ));
        }
        Ok(())
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = self.x.max(other.x);
        let iy = self.y.max(other.y);
        let ir = self.right().min(other.right());
        let ib = self.bottom().min(other.bottom());
        if ir <= ix || ib <= iy {
            return 0.0;
        }
        let inter = (ir - ix) as u64 * (ib - iy) as u64;
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrigin {
    KeywordPath,
    SynonymPath,
}

/// A forged sentence with its keyword provenance and downstream scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePrompt {
    pub topic_id: String,
    pub text: String,
    pub keywords_used: Vec<String>,
    pub origin: PromptOrigin,
    pub prune_distance: Option<f64>,
    pub sensitivity_f1: Option<f64>,
}

impl Validate for CandidatePrompt {
    fn validate(&self) -> Result<()> {
        if self.origin == PromptOrigin::KeywordPath && self.keywords_used.is_empty() {
            return Err(AuditError::schema(
                "CandidatePrompt.keywords_used",
                "keyword-path prompt without keywords",
            ));
        }
        if let Some(d) = self.prune_distance {
            if !(d >= 0.0) {
                return Err(AuditError::schema(
                    "CandidatePrompt.prune_distance",
                    format!("negative or non-finite distance {d}"),
                ));
            }
        }
        if let Some(f1) = self.sensitivity_f1 {
            if !(0.0..=1.0).contains(&f1) {
                return Err(AuditError::schema(
                    "CandidatePrompt.sensitivity_f1",
                    format!("f1 {f1} outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

/// An identified region of a generated image plus its best corpus similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkMatch {
    pub image_id: String,
    #[serde(rename = "box")]
    pub chunk_box: BoundingBox,
    pub source_token_indices: Vec<usize>,
    /// (target image id, annotation index within that image)
    pub best_target: (String, usize),
    pub similarity: f64,
    pub flagged: bool,
}

impl Validate for ChunkMatch {
    fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.similarity) {
            return Err(AuditError::schema(
                "ChunkMatch.similarity",
                format!("similarity {} outside [-1, 1]", self.similarity),
            ));
        }
        if self.flagged != (self.similarity > SIMILARITY_FLAG_THRESHOLD) {
            return Err(AuditError::schema(
                "ChunkMatch.flagged",
                format!(
                    "flagged={} inconsistent with similarity {}",
                    self.flagged, self.similarity
                ),
            ));
        }
        Ok(())
    }
}

/// Canonical JSON bytes: pretty-printed, struct field order, trailing newline.
/// Equal values always produce equal bytes.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AuditError::io(parent, e))?;
    }
    fs::write(path, to_canonical_json(value)?).map_err(|e| AuditError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| AuditError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Load-and-validate in one step, for types with invariants.
pub fn read_json_validated<T: DeserializeOwned + Validate>(path: &Path) -> Result<T> {
    let value: T = read_json(path)?;
    value.validate()?;
    Ok(value)
}
