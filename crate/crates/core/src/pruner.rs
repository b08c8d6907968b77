//! Ranks forged prompts by how close their frozen cross-attention output is
//! to the raw topic's, keeping the K nearest.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::{AttentionProbe, DiffusionBackend};
use crate::datamodel::{CandidatePrompt, Topic};
use crate::error::{AuditError, Result};

/// Default number of prompts to keep.
pub const DEFAULT_KEEP: usize = 10;

/// Sum over probes of the Frobenius norm of the attention-output difference
/// between the target embedding and the candidate embedding.
pub fn prune_distance(
    probes: &[Box<dyn AttentionProbe>],
    target: &Array2<f32>,
    candidate: &Array2<f32>,
) -> f64 {
    let mut total = 0.0f64;
    for probe in probes {
        let out_t = probe.attention_output(target);
        let out_c = probe.attention_output(candidate);
        let sq: f64 = out_t
            .iter()
            .zip(out_c.iter())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        total += sq.sqrt();
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub topic_id: String,
    pub seed: u64,
    /// Candidates closest to the topic, ascending by distance; every record
    /// carries its `prune_distance`.
    pub kept: Vec<CandidatePrompt>,
    pub discarded: Vec<CandidatePrompt>,
}

/// Scores every candidate against the topic under attention probes frozen
/// from one reference generation, then keeps the `k` nearest. Ties in
/// distance break lexicographically by prompt text.
pub fn prune(
    topic: &Topic,
    candidates: &[CandidatePrompt],
    backend: &dyn DiffusionBackend,
    seed: u64,
    k: usize,
) -> Result<PruneOutcome> {
    if candidates.is_empty() {
        return Err(AuditError::Precondition(
            "no candidates to prune".to_string(),
        ));
    }
    if k < 1 {
        return Err(AuditError::Precondition("k must be >= 1".to_string()));
    }
    let probes = backend.probe_cross_attention(&topic.display_name, seed)?;
    let target_prompt = backend.tokenize(&topic.display_name)?;
    let target = backend.encode_text(&target_prompt)?;

    let mut scored: Vec<CandidatePrompt> = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let prompt = backend.tokenize(&candidate.text)?;
        let embedding = backend.encode_text(&prompt)?;
        let mut record = candidate.clone();
        record.prune_distance = Some(prune_distance(&probes, &target, &embedding));
        scored.push(record);
    }
    scored.sort_by(|a, b| {
        let da = a.prune_distance.unwrap();
        let db = b.prune_distance.unwrap();
        da.partial_cmp(&db)
            .unwrap()
            .then_with(|| a.text.cmp(&b.text))
    });

    let cut = k.min(scored.len());
    let discarded = scored.split_off(cut);
    Ok(PruneOutcome {
        topic_id: topic.id.clone(),
        seed,
        kept: scored,
        discarded,
    })
}
