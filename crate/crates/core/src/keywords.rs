//! Keyword extraction from cross-attention: a lenient soft filter based on
//! percentile spread (union across layers) and a strict hard filter based on
//! standardized tail proportions (intersection across layers).

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::DiffusionBackend;
use crate::datamodel::Topic;
use crate::error::{AuditError, Result};

/// Default tail cut-off for the hard filter.
pub const DEFAULT_D: f64 = 1.96;

/// Linear-interpolation percentile between closest ranks of the sorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    assert!((0.0..=100.0).contains(&q), "percentile out of range");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (n as f64 - 1.0);
    let lower = rank.floor() as usize;
    let upper = rank.ceil() as usize;
    if lower == upper {
        sorted[lower]
    } else {
        let weight = rank - lower as f64;
        sorted[lower] * (1.0 - weight) + sorted[upper] * weight
    }
}

fn flatten(map: &Array2<f32>) -> Vec<f64> {
    map.iter().map(|&v| v as f64).collect()
}

/// Percentile spread of the flattened map: p90 - p50. Always >= 0.
pub fn soft_intensity(map: &Array2<f32>) -> Result<f64> {
    if map.is_empty() {
        return Err(AuditError::Precondition("empty attention map".to_string()));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(AuditError::Precondition(
            "attention map contains non-finite values".to_string(),
        ));
    }
    let flat = flatten(map);
    Ok(percentile(&flat, 90.0) - percentile(&flat, 50.0))
}

/// Fraction of z-scored values strictly greater than `d`, using the map's own
/// mean and population standard deviation. Zero-variance maps score 0.
pub fn hard_intensity(map: &Array2<f32>, d: f64) -> Result<f64> {
    if map.is_empty() {
        return Err(AuditError::Precondition("empty attention map".to_string()));
    }
    let flat = flatten(map);
    let n = flat.len() as f64;
    let mean = flat.iter().sum::<f64>() / n;
    let var = flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(0.0);
    }
    let count = flat.iter().filter(|&&v| (v - mean) / sd > d).count();
    Ok(count as f64 / n)
}

/// Upper-tail probability P(Z > d) of the standard normal.
pub fn normal_tail(d: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(d / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenIntensity {
    pub soft: f64,
    pub hard: f64,
}

/// Words that dominate cross-attention for a topic, plus raw intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordReport {
    pub topic_id: String,
    pub soft_keywords: BTreeSet<String>,
    pub hard_keywords: BTreeSet<String>,
    /// layer index -> token index -> intensities, from the first seed's run.
    pub per_layer_intensities: BTreeMap<usize, BTreeMap<usize, TokenIntensity>>,
}

/// Runs the soft and hard filters on head-averaged attention of the raw topic
/// text. Soft keywords are unioned across layers, hard keywords intersected
/// across layers; with multiple seeds both sets are intersected across seeds.
pub fn extract_keywords(
    topic: &Topic,
    backend: &dyn DiffusionBackend,
    seeds: &[u64],
    d: f64,
) -> Result<KeywordReport> {
    if seeds.is_empty() {
        return Err(AuditError::Precondition(
            "at least one seed is required".to_string(),
        ));
    }
    let tail = normal_tail(d);

    let mut soft_across_seeds: Option<BTreeSet<String>> = None;
    let mut hard_across_seeds: Option<BTreeSet<String>> = None;
    let mut intensities = BTreeMap::new();

    for (seed_pos, &seed) in seeds.iter().enumerate() {
        let result = backend.generate(&topic.display_name, seed)?;
        let prompt = &result.prompt;
        let candidates: Vec<usize> = prompt
            .non_special_indices()
            .into_iter()
            .filter(|&i| prompt.is_complete_word_token(i))
            .collect();
        if prompt.non_special_indices().is_empty() {
            return Err(AuditError::Precondition(format!(
                "topic `{}` yields no non-special tokens",
                topic.id
            )));
        }

        let mut soft_union: BTreeSet<String> = BTreeSet::new();
        let mut hard_intersection: Option<BTreeSet<String>> = None;

        for layer in &result.attention.layers {
            let mut layer_intensities = BTreeMap::new();
            let mut soft_values = BTreeMap::new();
            for &i in &prompt.non_special_indices() {
                let map = layer.head_mean_map(i);
                let soft = soft_intensity(&map)?;
                let hard = hard_intensity(&map, d)?;
                soft_values.insert(i, soft);
                layer_intensities.insert(i, TokenIntensity { soft, hard });
            }
            let mean_soft =
                soft_values.values().sum::<f64>() / soft_values.len() as f64;

            let mut hard_layer = BTreeSet::new();
            for &i in &candidates {
                let word = prompt.word_of_token(i).unwrap().to_lowercase();
                let ti = layer_intensities[&i];
                if ti.soft > mean_soft {
                    soft_union.insert(word.clone());
                }
                if ti.hard > tail {
                    hard_layer.insert(word);
                }
            }
            hard_intersection = Some(match hard_intersection {
                None => hard_layer,
                Some(prev) => prev.intersection(&hard_layer).cloned().collect(),
            });

            if seed_pos == 0 {
                intensities.insert(layer.layer_index, layer_intensities);
            }
        }

        let hard_set = hard_intersection.unwrap_or_default();
        soft_across_seeds = Some(match soft_across_seeds {
            None => soft_union,
            Some(prev) => prev.intersection(&soft_union).cloned().collect(),
        });
        hard_across_seeds = Some(match hard_across_seeds {
            None => hard_set,
            Some(prev) => prev.intersection(&hard_set).cloned().collect(),
        });
    }

    Ok(KeywordReport {
        topic_id: topic.id.clone(),
        soft_keywords: soft_across_seeds.unwrap_or_default(),
        hard_keywords: hard_across_seeds.unwrap_or_default(),
        per_layer_intensities: intensities,
    })
}
