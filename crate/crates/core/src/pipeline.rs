//! Orchestration: configuration, seeding, content-addressed stage caching,
//! and the end-to-end audit flow (extract, forge, prune, generate, test,
//! evaluate) over a run directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::synthetic::{PixelEmbedder, SyntheticBackend, SyntheticChatClient};
use crate::backend::{ChatClient, DiffusionBackend, ImageEmbedder};
use crate::datamodel::{
    fnv1a64, read_json, to_canonical_json, write_json, CandidatePrompt, ClassFlag, Topic,
};
use crate::error::{AuditError, Result};
use crate::fixture::{fixture_synthetic_config, random_prompt_pool};
use crate::forge::{forge_prompts, TemplateSet};
use crate::keywords::{extract_keywords, KeywordReport};
use crate::pruner::{prune, PruneOutcome};
use crate::registry::{annotation_chunks, annotation_embeddings, load_registry, Registry};
use crate::report::{
    build_report, emit_outputs, random_chunks, score_sensitivity, BagOfWordsScorer, RunReport,
    SensitivityRecord, SensitivityScorer, TopicArtifacts,
};
use crate::tester::{test_image, ImageMatchReport};

fn default_backend() -> String {
    "synthetic".to_string()
}
fn default_n_prompts() -> usize {
    10
}
fn default_images_per_prompt() -> usize {
    10
}
fn default_k() -> usize {
    10
}
fn default_m() -> usize {
    3
}
fn default_d() -> f64 {
    1.96
}
fn default_threshold() -> f64 {
    0.85
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_scorer() -> String {
    "bag-of-words".to_string()
}
fn default_llm() -> String {
    "synthetic".to_string()
}
fn default_workers() -> usize {
    1
}

/// Full run configuration. Defaults follow the published experiment setup:
/// 10 prompts per topic, 10 images per prompt, keep K=10, top m=3 tokens,
/// d=1.96, similarity threshold 0.85.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_backend")]
    pub backend_name: String,
    pub registry_path: PathBuf,
    #[serde(default)]
    pub topics_filter: Option<Vec<String>>,
    #[serde(default = "default_n_prompts")]
    pub n_prompts: usize,
    #[serde(default = "default_images_per_prompt")]
    pub images_per_prompt: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_d")]
    pub d: f64,
    #[serde(default = "default_threshold")]
    pub similarity_threshold: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_scorer")]
    pub scorer_name: String,
    #[serde(default = "default_llm")]
    pub llm_client_name: String,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn for_registry(registry_path: impl Into<PathBuf>) -> Self {
        RunConfig {
            backend_name: default_backend(),
            registry_path: registry_path.into(),
            topics_filter: None,
            n_prompts: default_n_prompts(),
            images_per_prompt: default_images_per_prompt(),
            k: default_k(),
            m: default_m(),
            d: default_d(),
            similarity_threshold: default_threshold(),
            seed: 0,
            output_dir: default_output_dir(),
            scorer_name: default_scorer(),
            llm_client_name: default_llm(),
            workers: default_workers(),
            templates_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_prompts", self.n_prompts),
            ("images_per_prompt", self.images_per_prompt),
            ("K", self.k),
            ("m", self.m),
            ("workers", self.workers),
        ] {
            if v < 1 {
                return Err(AuditError::Config(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(AuditError::Config(
                "similarity_threshold must be in [0, 1]".to_string(),
            ));
        }
        Ok(())
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(sha_hex(
        &fs::read(path).map_err(|e| AuditError::io(path, e))?,
    ))
}

/// One generated image record in a topic's `images.json` manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub prompt_index: usize,
    pub prompt_text: String,
    pub seed: u64,
    /// path relative to the topic directory
    pub image_path: PathBuf,
    pub sha256: String,
}

/// A loaded run context: config, registry, backend, and templates.
pub struct Pipeline {
    pub config: RunConfig,
    pub registry: Registry,
    pub backend: SyntheticBackend,
    pub templates: TemplateSet,
    pub config_hash: String,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let registry = load_registry(&config.registry_path)?;
        if config.backend_name != "synthetic" {
            return Err(AuditError::Capability(format!(
                "backend `{}` is not runnable in this build; only `synthetic` ships with weights",
                config.backend_name
            )));
        }
        let backend = SyntheticBackend::new(fixture_synthetic_config(&registry.topics)?);
        let templates = match &config.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::builtin(),
        };
        // The hash covers audit parameters only: where artifacts live (and how
        // many workers produced them) must not change results, so equal-config
        // runs in different directories stay byte-identical.
        let mut hashed = config.clone();
        hashed.registry_path = PathBuf::new();
        hashed.output_dir = PathBuf::new();
        hashed.workers = 1;
        let config_hash = sha_hex(&to_canonical_json(&hashed)?);
        Ok(Pipeline {
            config,
            registry,
            backend,
            templates,
            config_hash,
        })
    }

    pub fn chat_client(&self) -> Result<Box<dyn ChatClient + Send + Sync>> {
        match self.config.llm_client_name.as_str() {
            "synthetic" => Ok(Box::new(SyntheticChatClient)),
            name => match name.strip_prefix("openai:") {
                Some(model) => Ok(Box::new(crate::backend::openai::OpenAiChatClient::from_env(
                    model,
                )?)),
                None => Err(AuditError::Capability(format!(
                    "unknown chat client `{name}`; use `synthetic` or `openai:<model>`"
                ))),
            },
        }
    }

    pub fn scorer(&self) -> Result<Box<dyn SensitivityScorer>> {
        match self.config.scorer_name.as_str() {
            "bag-of-words" => Ok(Box::new(BagOfWordsScorer)),
            name => Err(AuditError::Capability(format!(
                "unknown sensitivity scorer `{name}`"
            ))),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.config.output_dir.join(&self.config.backend_name)
    }

    pub fn topic_dir(&self, topic_id: &str) -> PathBuf {
        self.run_dir().join(topic_id)
    }

    /// Topics selected by the filter, in registry order.
    pub fn selected_topics(&self) -> Result<Vec<Topic>> {
        match &self.config.topics_filter {
            None => Ok(self.registry.topics.clone()),
            Some(filter) => {
                let wanted: BTreeSet<&String> = filter.iter().collect();
                for id in filter {
                    self.registry.topic(id)?;
                }
                Ok(self
                    .registry
                    .topics
                    .iter()
                    .filter(|t| wanted.contains(&t.id))
                    .cloned()
                    .collect())
            }
        }
    }

    fn stage_seed(&self, parts: &[&str]) -> u64 {
        fnv1a64(format!("{}:{}", self.config.seed, parts.join(":")).as_bytes())
    }

    fn stage_fresh(&self, dir: &Path, stage: &str, inputs: &str, artifacts: &[&Path]) -> bool {
        let recorded = fs::read_to_string(dir.join(format!("{stage}.hash"))).ok();
        recorded.as_deref() == Some(inputs) && artifacts.iter().all(|p| p.exists())
    }

    fn mark_stage(&self, dir: &Path, stage: &str, inputs: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| AuditError::io(dir, e))?;
        let path = dir.join(format!("{stage}.hash"));
        fs::write(&path, inputs).map_err(|e| AuditError::io(&path, e))
    }

    fn require(&self, path: &Path, prerequisite: &str) -> Result<String> {
        if !path.exists() {
            return Err(AuditError::MissingArtifact {
                artifact: path.display().to_string(),
                prerequisite: prerequisite.to_string(),
            });
        }
        file_sha(path)
    }

    /// Keyword extraction over two seeds (intersected). Class I topics are
    /// skipped: their keywords are sensitive by definition.
    pub fn stage_keywords(&self, topic: &Topic) -> Result<Option<KeywordReport>> {
        if topic.class_flag == ClassFlag::I {
            return Ok(None);
        }
        let dir = self.topic_dir(&topic.id);
        let out = dir.join("keywords.json");
        let inputs = format!("keywords:{}", self.config_hash);
        if self.stage_fresh(&dir, "keywords", &inputs, &[&out]) {
            return Ok(Some(read_json(&out)?));
        }
        let seeds = [self.config.seed, self.config.seed.wrapping_add(1)];
        let report = extract_keywords(topic, &self.backend, &seeds, self.config.d)?;
        write_json(&out, &report)?;
        self.mark_stage(&dir, "keywords", &inputs)?;
        Ok(Some(report))
    }

    /// Forges the candidate pool (twice the kept count, so pruning has
    /// something to discard).
    pub fn stage_forge(&self, topic: &Topic, client: &dyn ChatClient) -> Result<Vec<CandidatePrompt>> {
        let dir = self.topic_dir(&topic.id);
        let out = dir.join("prompts.json");
        let report = if topic.class_flag == ClassFlag::II {
            let path = dir.join("keywords.json");
            self.require(&path, "extract-keywords")?;
            Some(read_json::<KeywordReport>(&path)?)
        } else {
            None
        };
        let upstream = report
            .as_ref()
            .map(|_| file_sha(&dir.join("keywords.json")))
            .transpose()?
            .unwrap_or_default();
        let inputs = format!("forge:{}:{upstream}", self.config_hash);
        if self.stage_fresh(&dir, "forge", &inputs, &[&out]) {
            return read_json(&out);
        }
        let pool = 2 * self.config.k.max(self.config.n_prompts);
        let prompts = forge_prompts(topic, report.as_ref(), pool, client, &self.templates)?;
        write_json(&out, &prompts)?;
        self.mark_stage(&dir, "forge", &inputs)?;
        Ok(prompts)
    }

    pub fn stage_prune(&self, topic: &Topic) -> Result<PruneOutcome> {
        let dir = self.topic_dir(&topic.id);
        let prompts_path = dir.join("prompts.json");
        let upstream = self.require(&prompts_path, "forge-prompts")?;
        let out = dir.join("prune.json");
        let inputs = format!("prune:{}:{upstream}", self.config_hash);
        if self.stage_fresh(&dir, "prune", &inputs, &[&out]) {
            return read_json(&out);
        }
        let candidates: Vec<CandidatePrompt> = read_json(&prompts_path)?;
        let outcome = prune(
            topic,
            &candidates,
            &self.backend,
            self.stage_seed(&["prune", &topic.id]),
            self.config.k,
        )?;
        write_json(&out, &outcome)?;
        self.mark_stage(&dir, "prune", &inputs)?;
        Ok(outcome)
    }

    pub fn stage_generate(&self, topic: &Topic) -> Result<Vec<ImageRecord>> {
        let dir = self.topic_dir(&topic.id);
        let prune_path = dir.join("prune.json");
        let upstream = self.require(&prune_path, "prune")?;
        let out = dir.join("images.json");
        let inputs = format!("generate:{}:{upstream}", self.config_hash);
        if self.stage_fresh(&dir, "generate", &inputs, &[&out]) {
            return read_json(&out);
        }
        let outcome: PruneOutcome = read_json(&prune_path)?;
        let kept: Vec<&CandidatePrompt> =
            outcome.kept.iter().take(self.config.n_prompts).collect();

        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir).map_err(|e| AuditError::io(&images_dir, e))?;
        let mut records = Vec::new();
        for (p, prompt) in kept.iter().enumerate() {
            for i in 0..self.config.images_per_prompt {
                let seed = self.stage_seed(&[
                    "generate",
                    &topic.id,
                    &p.to_string(),
                    &i.to_string(),
                ]);
                let result = self.backend.generate(&prompt.text, seed)?;
                let rel = PathBuf::from(format!("images/p{p:02}_i{i:02}.png"));
                let full = dir.join(&rel);
                result.image.save(&full).map_err(|e| {
                    AuditError::Precondition(format!("cannot write {}: {e}", full.display()))
                })?;
                if p == 0 && i == 0 {
                    result.attention.write(&dir.join("attn"), "sample")?;
                }
                records.push(ImageRecord {
                    prompt_index: p,
                    prompt_text: prompt.text.clone(),
                    seed,
                    image_path: rel.clone(),
                    sha256: file_sha(&full)?,
                });
            }
        }
        write_json(&out, &records)?;
        self.mark_stage(&dir, "generate", &inputs)?;
        Ok(records)
    }

    /// Re-derives each image's attention (generation is deterministic) and
    /// runs the chunk test against the topic's annotated corpus.
    pub fn stage_test(&self, topic: &Topic) -> Result<Vec<ImageMatchReport>> {
        let dir = self.topic_dir(&topic.id);
        let manifest_path = dir.join("images.json");
        let upstream = self.require(&manifest_path, "generate")?;
        let out = dir.join("matches.json");
        let inputs = format!("test:{}:{upstream}", self.config_hash);
        if self.stage_fresh(&dir, "test", &inputs, &[&out]) {
            return read_json(&out);
        }
        let records: Vec<ImageRecord> = read_json(&manifest_path)?;
        let embedder = PixelEmbedder::default();
        let annotations = annotation_embeddings(&self.registry, &topic.id, &embedder)?;
        let mut reports = Vec::with_capacity(records.len());
        for record in &records {
            let result = self.backend.generate(&record.prompt_text, record.seed)?;
            let full = dir.join(&record.image_path);
            if file_sha(&full)? != record.sha256 {
                return Err(AuditError::Precondition(format!(
                    "image {} does not match its manifest hash; rerun generate",
                    record.image_path.display()
                )));
            }
            let saved = image::open(&full).map_err(AuditError::Image)?.to_rgb8();
            if saved != result.image {
                return Err(AuditError::Precondition(format!(
                    "image {} was produced by a different config; rerun generate",
                    record.image_path.display()
                )));
            }
            reports.push(test_image(
                &record.image_path.display().to_string(),
                &result.image,
                &result.attention,
                &annotations,
                &embedder,
                self.config.m,
                None,
                self.config.similarity_threshold,
            )?);
        }
        write_json(&out, &reports)?;
        self.mark_stage(&dir, "test", &inputs)?;
        Ok(reports)
    }

    /// Sensitivity records plus the two random-chunk baselines for one topic.
    pub fn topic_artifacts(&self, topic: &Topic) -> Result<TopicArtifacts> {
        let dir = self.topic_dir(&topic.id);
        let prune_path = dir.join("prune.json");
        self.require(&prune_path, "prune")?;
        let matches_path = dir.join("matches.json");
        self.require(&matches_path, "test-copyright")?;
        let manifest_path = dir.join("images.json");
        self.require(&manifest_path, "generate")?;

        let prune_outcome: PruneOutcome = read_json(&prune_path)?;
        let image_reports: Vec<ImageMatchReport> = read_json(&matches_path)?;
        let records: Vec<ImageRecord> = read_json(&manifest_path)?;

        let scorer = self.scorer()?;
        let sensitivity: Vec<SensitivityRecord> = prune_outcome
            .kept
            .iter()
            .take(self.config.n_prompts)
            .map(|c| score_sensitivity(c, topic, scorer.as_ref()))
            .collect();

        let embedder = PixelEmbedder::default();
        let annotations = annotation_embeddings(&self.registry, &topic.id, &embedder)?;
        let size_model: Vec<crate::datamodel::BoundingBox> =
            annotation_chunks(&self.registry, &topic.id)?
                .into_iter()
                .map(|(_, b)| b)
                .collect();

        let sim_of = |img: &image::RgbImage, b: &crate::datamodel::BoundingBox| -> Result<f64> {
            let emb = embedder.embed_chunk(img, b)?;
            Ok(annotations
                .iter()
                .map(|a| crate::backend::cosine(&emb, &a.embedding))
                .fold(f64::NEG_INFINITY, f64::max))
        };

        // baseline1: random chunks on our generated images
        let mut baseline1 = Vec::with_capacity(records.len());
        for record in &records {
            let full = dir.join(&record.image_path);
            let img = image::open(&full)
                .map_err(AuditError::Image)?
                .to_rgb8();
            let seed = self.stage_seed(&["baseline1", &topic.id, &record.image_path.display().to_string()]);
            let chunk = random_chunks(img.width(), img.height(), &size_model, 1, seed)?[0];
            baseline1.push(sim_of(&img, &chunk)?);
        }

        // baseline2: random chunks on random-prompt images
        let pool = random_prompt_pool();
        let mut baseline2 = Vec::with_capacity(self.config.images_per_prompt);
        for i in 0..self.config.images_per_prompt {
            let seed = self.stage_seed(&["baseline2", &topic.id, &i.to_string()]);
            let prompt = &pool[(seed % pool.len() as u64) as usize];
            let result = self.backend.generate(prompt, seed)?;
            let chunk = random_chunks(
                result.image.width(),
                result.image.height(),
                &size_model,
                1,
                seed.wrapping_add(1),
            )?[0];
            baseline2.push(sim_of(&result.image, &chunk)?);
        }

        Ok(TopicArtifacts {
            topic_id: topic.id.clone(),
            prune: prune_outcome,
            sensitivity,
            image_reports,
            baseline1_similarities: baseline1,
            baseline2_similarities: baseline2,
        })
    }

    /// Aggregates every selected topic and writes report files into the run
    /// directory.
    pub fn stage_evaluate(&self) -> Result<RunReport> {
        let topics = self.selected_topics()?;
        let mut artifacts = Vec::with_capacity(topics.len());
        for topic in &topics {
            artifacts.push(self.topic_artifacts(topic)?);
        }
        let scorer = self.scorer()?;
        let report = build_report(
            &self.config.backend_name,
            scorer.name(),
            &self.config_hash,
            &artifacts,
        )?;
        emit_outputs(&report, &self.run_dir())?;
        Ok(report)
    }

    fn process_topic(&self, topic: &Topic, client: &dyn ChatClient) -> Result<()> {
        self.stage_keywords(topic)?;
        self.stage_forge(topic, client)?;
        self.stage_prune(topic)?;
        self.stage_generate(topic)?;
        self.stage_test(topic)?;
        Ok(())
    }

    /// Runs every stage for every selected topic, then evaluates. Completed
    /// stages are skipped via content-addressed caching, so a rerun after a
    /// failure resumes where it stopped.
    pub fn run_all(&self) -> Result<RunReport> {
        let topics = self.selected_topics()?;
        if self.config.workers <= 1 {
            let client = self.chat_client()?;
            for topic in &topics {
                self.process_topic(topic, client.as_ref())?;
            }
        } else {
            let chunk = topics.len().div_ceil(self.config.workers);
            std::thread::scope(|scope| -> Result<()> {
                let mut handles = Vec::new();
                for batch in topics.chunks(chunk.max(1)) {
                    handles.push(scope.spawn(move || -> Result<()> {
                        let client = self.chat_client()?;
                        for topic in batch {
                            self.process_topic(topic, client.as_ref())?;
                        }
                        Ok(())
                    }));
                }
                for h in handles {
                    h.join().expect("worker panicked")?;
                }
                Ok(())
            })?;
        }
        let report = self.stage_evaluate()?;

        // timestamps live only here, outside every cached artifact
        let log_path = self.run_dir().join("log.txt");
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs().to_string())
            .unwrap_or_default();
        let mut log = fs::read_to_string(&log_path).unwrap_or_default();
        log.push_str(&format!("run completed at {stamp}\n"));
        fs::write(&log_path, log).map_err(|e| AuditError::io(&log_path, e))?;
        Ok(report)
    }
}
