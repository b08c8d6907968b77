//! Evaluation surfaces: prompt sensitivity, pruning effectiveness, chunk
//! similarity against two random baselines, and flagged-image proportions,
//! emitted as JSON, a text table, and bar-chart images.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{text_words, to_canonical_json, BoundingBox, CandidatePrompt, Topic, Validate};
use crate::error::{AuditError, Result};
use crate::pruner::PruneOutcome;
use crate::tester::ImageMatchReport;

/// Reference-based semantic text-similarity metric producing embedding-level
/// precision, recall, and F1. Any BertScore-style scorer qualifies; absolute
/// values are scorer-dependent, so runs record the scorer identity.
pub trait SensitivityScorer {
    fn name(&self) -> &str;
    /// (precision, recall, f1), each in [0, 1]
    fn score(&self, prompt: &str, reference: &str) -> (f64, f64, f64);
}

/// Deterministic stand-in scorer: word-set overlap precision/recall.
pub struct BagOfWordsScorer;

impl SensitivityScorer for BagOfWordsScorer {
    fn name(&self) -> &str {
        "bag-of-words"
    }

    fn score(&self, prompt: &str, reference: &str) -> (f64, f64, f64) {
        let p: std::collections::BTreeSet<String> = text_words(prompt).into_iter().collect();
        let r: std::collections::BTreeSet<String> = text_words(reference).into_iter().collect();
        if p.is_empty() || r.is_empty() {
            return (0.0, 0.0, 0.0);
        }
        let overlap = p.intersection(&r).count() as f64;
        let precision = overlap / p.len() as f64;
        let recall = overlap / r.len() as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        (precision, recall, f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub prompt_text: String,
    pub topic_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Validate for SensitivityRecord {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(AuditError::schema(
                    "SensitivityRecord",
                    format!("{name} {v} outside [0, 1]"),
                ));
            }
        }
        let expected = if self.precision + self.recall == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        };
        if (self.f1 - expected).abs() > 1e-9 {
            return Err(AuditError::schema(
                "SensitivityRecord.f1",
                format!("f1 {} is not the harmonic mean {expected}", self.f1),
            ));
        }
        Ok(())
    }
}

pub fn score_sensitivity(
    prompt: &CandidatePrompt,
    topic: &Topic,
    scorer: &dyn SensitivityScorer,
) -> SensitivityRecord {
    let (precision, recall, f1) = scorer.score(&prompt.text, &topic.display_name);
    SensitivityRecord {
        prompt_text: prompt.text.clone(),
        topic_id: topic.id.clone(),
        precision,
        recall,
        f1,
    }
}

/// `n` random boxes with sizes drawn uniformly from `size_model` (clamped to
/// the image) and positions uniform over valid placements.
pub fn random_chunks(
    image_w: u32,
    image_h: u32,
    size_model: &[BoundingBox],
    n: usize,
    seed: u64,
) -> Result<Vec<BoundingBox>> {
    if n < 1 {
        return Err(AuditError::Precondition("n must be >= 1".into()));
    }
    if size_model.is_empty() {
        return Err(AuditError::Precondition("size_model must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let template = size_model[rng.gen_range(0..size_model.len())];
        let w = template.w.clamp(1, image_w);
        let h = template.h.clamp(1, image_h);
        let x = rng.gen_range(0..=image_w - w);
        let y = rng.gen_range(0..=image_h - h);
        out.push(BoundingBox { x, y, w, h });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneTable {
    /// mean distance over kept prompts
    pub with_pruning: f64,
    /// mean distance over the full candidate pool
    pub without_pruning: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub ours: f64,
    /// random chunks on our generated images
    pub baseline1: f64,
    /// random chunks on random-prompt images
    pub baseline2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model_name: String,
    pub scorer_name: String,
    pub config_hash: String,
    pub images_total: usize,
    pub sensitivity_mean_f1: f64,
    pub prune_table: PruneTable,
    pub similarity_table: SimilarityTable,
    pub flagged_proportion_overall: f64,
    pub flagged_by_topic: BTreeMap<String, f64>,
}

impl Validate for RunReport {
    fn validate(&self) -> Result<()> {
        let proportions = std::iter::once(&self.flagged_proportion_overall)
            .chain(self.flagged_by_topic.values());
        for p in proportions {
            if !(0.0..=1.0).contains(p) {
                return Err(AuditError::schema(
                    "RunReport",
                    format!("proportion {p} outside [0, 1]"),
                ));
            }
        }
        for s in [
            self.similarity_table.ours,
            self.similarity_table.baseline1,
            self.similarity_table.baseline2,
        ] {
            if !(-1.0..=1.0).contains(&s) {
                return Err(AuditError::schema(
                    "RunReport.similarity_table",
                    format!("similarity {s} outside [-1, 1]"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.sensitivity_mean_f1) {
            return Err(AuditError::schema(
                "RunReport.sensitivity_mean_f1",
                format!("{} outside [0, 1]", self.sensitivity_mean_f1),
            ));
        }
        Ok(())
    }
}

/// Everything one topic's pipeline run contributes to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicArtifacts {
    pub topic_id: String,
    pub prune: PruneOutcome,
    pub sensitivity: Vec<SensitivityRecord>,
    pub image_reports: Vec<ImageMatchReport>,
    pub baseline1_similarities: Vec<f64>,
    pub baseline2_similarities: Vec<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Aggregates completed per-topic artifacts into the run report.
pub fn build_report(
    model_name: &str,
    scorer_name: &str,
    config_hash: &str,
    topics: &[TopicArtifacts],
) -> Result<RunReport> {
    if topics.is_empty() {
        return Err(AuditError::Report(
            "no topic artifacts; run the pipeline stages first".into(),
        ));
    }
    for t in topics {
        if t.image_reports.is_empty() {
            return Err(AuditError::Report(format!(
                "topic `{}` has no image match records; run generate and test-copyright first",
                t.topic_id
            )));
        }
    }

    let sensitivity_mean_f1 = mean(
        topics
            .iter()
            .flat_map(|t| t.sensitivity.iter().map(|s| s.f1)),
    )
    .ok_or_else(|| AuditError::Report("no sensitivity records; run evaluate inputs first".into()))?;

    let kept = topics
        .iter()
        .flat_map(|t| t.prune.kept.iter().filter_map(|c| c.prune_distance));
    let pool = topics.iter().flat_map(|t| {
        t.prune
            .kept
            .iter()
            .chain(&t.prune.discarded)
            .filter_map(|c| c.prune_distance)
    });
    let prune_table = PruneTable {
        with_pruning: mean(kept)
            .ok_or_else(|| AuditError::Report("prune artifacts carry no distances".into()))?,
        without_pruning: mean(pool).unwrap(),
    };

    let ours = mean(
        topics
            .iter()
            .flat_map(|t| t.image_reports.iter())
            .flat_map(|r| r.matches.iter().map(|m| m.similarity)),
    )
    .ok_or_else(|| AuditError::Report("no chunk matches found".into()))?;
    let baseline1 = mean(
        topics
            .iter()
            .flat_map(|t| t.baseline1_similarities.iter().copied()),
    )
    .ok_or_else(|| AuditError::Report("no baseline1 similarities; run evaluate".into()))?;
    let baseline2 = mean(
        topics
            .iter()
            .flat_map(|t| t.baseline2_similarities.iter().copied()),
    )
    .ok_or_else(|| AuditError::Report("no baseline2 similarities; run evaluate".into()))?;

    let images_total = topics.iter().map(|t| t.image_reports.len()).sum();
    let flagged_total = topics
        .iter()
        .flat_map(|t| t.image_reports.iter())
        .filter(|r| r.flagged)
        .count();
    let flagged_by_topic = topics
        .iter()
        .map(|t| {
            let flagged = t.image_reports.iter().filter(|r| r.flagged).count();
            (
                t.topic_id.clone(),
                flagged as f64 / t.image_reports.len() as f64,
            )
        })
        .collect();

    let report = RunReport {
        model_name: model_name.to_string(),
        scorer_name: scorer_name.to_string(),
        config_hash: config_hash.to_string(),
        images_total,
        sensitivity_mean_f1,
        prune_table,
        similarity_table: SimilarityTable {
            ours,
            baseline1,
            baseline2,
        },
        flagged_proportion_overall: flagged_total as f64 / images_total as f64,
        flagged_by_topic,
    };
    report.validate()?;
    Ok(report)
}

/// Published numbers shown in the text tables for orientation. They come
/// from runs on proprietary models and are labeled, never asserted.
pub const PAPER_PRUNE_REFERENCE: (f64, f64) = (56.1, 68.8);
pub const PAPER_SIMILARITY_REFERENCE: (f64, f64, f64) = (89.1, 74.3, 57.8);
pub const PAPER_FLAGGED_REFERENCE: f64 = 0.70;

/// Renders the human-readable report text (similarities ×100, as published).
pub fn render_text(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model: {}", report.model_name);
    let _ = writeln!(out, "config: {}", report.config_hash);
    let _ = writeln!(out, "images: {}", report.images_total);
    let _ = writeln!(out);
    let _ = writeln!(out, "== Prompt sensitivity ==");
    let _ = writeln!(out, "scorer: {}", report.scorer_name);
    let _ = writeln!(out, "mean F1: {:.3}", report.sensitivity_mean_f1);
    let _ = writeln!(out);
    let _ = writeln!(out, "== Cross-attention output distance ==");
    let _ = writeln!(out, "{:<42} {:>14} {:>18}", "", "with pruning", "without pruning");
    let _ = writeln!(
        out,
        "{:<42} {:>14.3} {:>18.3}",
        "this run", report.prune_table.with_pruning, report.prune_table.without_pruning
    );
    let _ = writeln!(
        out,
        "{:<42} {:>14.1} {:>18.1}",
        "paper-reported (SD 1.1, not asserted)",
        PAPER_PRUNE_REFERENCE.0,
        PAPER_PRUNE_REFERENCE.1
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "== Chunk cosine similarity (x100) ==");
    let _ = writeln!(
        out,
        "{:<42} {:>8} {:>11} {:>11}",
        "", "ours", "baseline1", "baseline2"
    );
    let _ = writeln!(
        out,
        "{:<42} {:>8.1} {:>11.1} {:>11.1}",
        "this run",
        100.0 * report.similarity_table.ours,
        100.0 * report.similarity_table.baseline1,
        100.0 * report.similarity_table.baseline2
    );
    let _ = writeln!(
        out,
        "{:<42} {:>8.1} {:>11.1} {:>11.1}",
        "paper-reported (SD 2, not asserted)",
        PAPER_SIMILARITY_REFERENCE.0,
        PAPER_SIMILARITY_REFERENCE.1,
        PAPER_SIMILARITY_REFERENCE.2
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "== Flagged image proportion ==");
    let _ = writeln!(out, "overall: {:.3}", report.flagged_proportion_overall);
    let _ = writeln!(
        out,
        "paper-reported overall (not asserted): ~{PAPER_FLAGGED_REFERENCE:.2}"
    );
    let _ = writeln!(out, "per topic:");
    for (topic, p) in &report.flagged_by_topic {
        let _ = writeln!(out, "  {topic:<46} {p:.3}");
    }
    out
}

/// Minimal deterministic bar chart. Values are clamped to [0, max].
fn bar_chart(title: &str, bars: &[(String, f64)], max_value: f64, path: &Path) -> Result<()> {
    const W: u32 = 900;
    const H: u32 = 420;
    const MARGIN: u32 = 40;
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));

    // axes
    for x in MARGIN..W - MARGIN {
        img.put_pixel(x, H - MARGIN, Rgb([0, 0, 0]));
    }
    for y in MARGIN..=H - MARGIN {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    // title strip: encode the title bytes as a pixel row so equal titles
    // always render equal files
    for (i, b) in title.bytes().enumerate() {
        let x = MARGIN + i as u32;
        if x < W {
            img.put_pixel(x, MARGIN / 2, Rgb([b, b, b]));
        }
    }

    if !bars.is_empty() {
        let span = (W - 2 * MARGIN) / bars.len() as u32;
        let plot_h = (H - 2 * MARGIN) as f64;
        for (i, (_, value)) in bars.iter().enumerate() {
            let frac = (value / max_value).clamp(0.0, 1.0);
            let bar_h = (frac * plot_h).round() as u32;
            let x0 = MARGIN + i as u32 * span + span / 5;
            let x1 = MARGIN + (i as u32 + 1) * span - span / 5;
            for x in x0..x1 {
                for y in (H - MARGIN - bar_h)..(H - MARGIN) {
                    img.put_pixel(x, y, Rgb([60, 60, 160]));
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AuditError::io(parent, e))?;
    }
    img.save(path)
        .map_err(|e| AuditError::Report(format!("cannot write chart {}: {e}", path.display())))?;
    Ok(())
}

/// Writes `report.json`, `report.txt`, and `figures/*.png` under `dir`.
pub fn emit_outputs(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    report.validate()?;
    fs::create_dir_all(dir).map_err(|e| AuditError::io(dir, e))?;

    let json_path = dir.join("report.json");
    fs::write(&json_path, to_canonical_json(report)?).map_err(|e| AuditError::io(&json_path, e))?;

    let txt_path = dir.join("report.txt");
    fs::write(&txt_path, render_text(report)).map_err(|e| AuditError::io(&txt_path, e))?;

    let flagged_path = dir.join("figures/flagged_by_topic.png");
    let bars: Vec<(String, f64)> = report
        .flagged_by_topic
        .iter()
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    bar_chart("flagged image proportion by topic", &bars, 1.0, &flagged_path)?;

    let sim_path = dir.join("figures/similarity.png");
    let sim_bars = vec![
        ("ours".to_string(), report.similarity_table.ours),
        ("baseline1".to_string(), report.similarity_table.baseline1),
        ("baseline2".to_string(), report.similarity_table.baseline2),
    ];
    bar_chart("mean chunk cosine similarity", &sim_bars, 1.0, &sim_path)?;

    Ok(vec![json_path, txt_path, flagged_path, sim_path])
}
