//! Audit corpus: topics, target images, and their annotated regions, loaded
//! from a JSON manifest plus an image directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backend::ImageEmbedder;
use crate::datamodel::{read_json, to_canonical_json, BoundingBox, Topic, Validate};
use crate::error::{AuditError, Result};
use crate::tester::AnnotationEmbedding;

/// One reference image for a topic, with human bounding-box annotations
/// marking the distinctive features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetImage {
    pub topic_id: String,
    /// path relative to the registry root
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<BoundingBox>,
}

impl TargetImage {
    pub fn validate(&self) -> Result<()> {
        if self.annotations.is_empty() {
            return Err(AuditError::schema(
                "TargetImage.annotations",
                format!("target image {} has no annotations", self.image_path.display()),
            ));
        }
        for (i, b) in self.annotations.iter().enumerate() {
            b.validate_within(self.width, self.height).map_err(|_| {
                AuditError::schema(
                    "TargetImage.annotations",
                    format!(
                        "box {i} {b:?} of {} exceeds {}x{}",
                        self.image_path.display(),
                        self.width,
                        self.height
                    ),
                )
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RegistryManifest {
    topics: Vec<Topic>,
    images: BTreeMap<String, Vec<TargetImage>>,
}

/// Validated, immutable corpus. Image paths resolve against `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    pub root: PathBuf,
    pub topics: Vec<Topic>,
    pub images: BTreeMap<String, Vec<TargetImage>>,
}

/// Headline counts reported after a successful load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrySummary {
    pub topic_count: usize,
    pub by_category: BTreeMap<String, usize>,
    pub image_counts: BTreeMap<String, usize>,
}

impl Registry {
    pub fn topic(&self, id: &str) -> Result<&Topic> {
        self.topics.iter().find(|t| t.id == id).ok_or_else(|| AuditError::Lookup {
            kind: "topic",
            key: id.to_string(),
        })
    }

    pub fn targets(&self, topic_id: &str) -> Result<&[TargetImage]> {
        self.topic(topic_id)?;
        Ok(self
            .images
            .get(topic_id)
            .map(|v| v.as_slice())
            .unwrap_or(&[]))
    }

    pub fn summary(&self) -> RegistrySummary {
        let mut by_category = BTreeMap::new();
        for t in &self.topics {
            let label = format!("{:?}", t.category).to_lowercase();
            *by_category.entry(label).or_insert(0) += 1;
        }
        RegistrySummary {
            topic_count: self.topics.len(),
            by_category,
            image_counts: self
                .images
                .iter()
                .map(|(k, v)| (k.clone(), v.len()))
                .collect(),
        }
    }

    fn validate(&self, check_files: bool) -> Result<()> {
        let mut ids = BTreeSet::new();
        for topic in &self.topics {
            topic.validate()?;
            if !ids.insert(topic.id.clone()) {
                return Err(AuditError::schema(
                    "Registry.topics",
                    format!("duplicate topic id `{}`", topic.id),
                ));
            }
        }
        for (topic_id, targets) in &self.images {
            if !ids.contains(topic_id) {
                return Err(AuditError::Lookup {
                    kind: "topic",
                    key: topic_id.clone(),
                });
            }
            let mut paths = BTreeSet::new();
            for target in targets {
                if target.topic_id != *topic_id {
                    return Err(AuditError::schema(
                        "TargetImage.topic_id",
                        format!(
                            "image {} filed under `{topic_id}` but labeled `{}`",
                            target.image_path.display(),
                            target.topic_id
                        ),
                    ));
                }
                target.validate()?;
                if !paths.insert(target.image_path.clone()) {
                    return Err(AuditError::schema(
                        "Registry.images",
                        format!("duplicate image path {}", target.image_path.display()),
                    ));
                }
                if check_files {
                    let full = self.root.join(&target.image_path);
                    let img = image::open(&full)
                        .map_err(|e| {
                            AuditError::schema(
                                "TargetImage.image_path",
                                format!("{} does not decode: {e}", full.display()),
                            )
                        })?
                        .to_rgb8();
                    if (img.width(), img.height()) != (target.width, target.height) {
                        return Err(AuditError::schema(
                            "TargetImage",
                            format!(
                                "{} is {}x{}, manifest says {}x{}",
                                full.display(),
                                img.width(),
                                img.height(),
                                target.width,
                                target.height
                            ),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = RegistryManifest {
            topics: self.topics.clone(),
            images: self.images.clone(),
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| AuditError::io(parent, e))?;
        }
        fs::write(path, to_canonical_json(&manifest)?).map_err(|e| AuditError::io(path, e))
    }

    pub fn load_image(&self, target: &TargetImage) -> Result<RgbImage> {
        let full = self.root.join(&target.image_path);
        Ok(image::open(&full)
            .map_err(|e| {
                AuditError::schema(
                    "TargetImage.image_path",
                    format!("{} does not decode: {e}", full.display()),
                )
            })?
            .to_rgb8())
    }
}

/// Loads and fully validates `registry.json`; image files are opened and
/// dimension-checked. The registry root is the manifest's directory.
pub fn load_registry(path: &Path) -> Result<Registry> {
    let manifest: RegistryManifest = read_json(path)?;
    let registry = Registry {
        root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        topics: manifest.topics,
        images: manifest.images,
    };
    registry.validate(true)?;
    Ok(registry)
}

/// All annotated chunks of a topic, flattened in registry order.
pub fn annotation_chunks<'r>(
    registry: &'r Registry,
    topic_id: &str,
) -> Result<Vec<(&'r TargetImage, BoundingBox)>> {
    let mut out = Vec::new();
    for target in registry.targets(topic_id)? {
        for b in &target.annotations {
            out.push((target, *b));
        }
    }
    Ok(out)
}

/// Embeds every annotated chunk of a topic. Annotation ids are the image
/// path strings; indices follow annotation order within each image.
pub fn annotation_embeddings(
    registry: &Registry,
    topic_id: &str,
    embedder: &dyn ImageEmbedder,
) -> Result<Vec<AnnotationEmbedding>> {
    let mut out = Vec::new();
    for target in registry.targets(topic_id)? {
        let img = registry.load_image(target)?;
        for (i, b) in target.annotations.iter().enumerate() {
            out.push(AnnotationEmbedding {
                image_id: target.image_path.display().to_string(),
                annotation_index: i,
                embedding: embedder.embed_chunk(&img, b)?,
            });
        }
    }
    Ok(out)
}

/// One entry of the annotation sidecar: an image plus its boxes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSidecarEntry {
    pub image: PathBuf,
    pub boxes: Vec<BoundingBox>,
}

/// Merges a sidecar annotation file into the registry under `topic_id`.
/// Duplicate (image, box) pairs collapse; unknown image files are errors.
pub fn ingest_annotations(
    registry: &mut Registry,
    topic_id: &str,
    sidecar_path: &Path,
) -> Result<()> {
    registry.topic(topic_id)?;
    let entries: Vec<AnnotationSidecarEntry> = read_json(sidecar_path)?;
    for entry in entries {
        let full = registry.root.join(&entry.image);
        let img = image::open(&full)
            .map_err(|e| {
                AuditError::schema(
                    "annotations.image",
                    format!("sidecar names {}: {e}", full.display()),
                )
            })?
            .to_rgb8();
        let targets = registry.images.entry(topic_id.to_string()).or_default();
        let record = match targets.iter_mut().find(|t| t.image_path == entry.image) {
            Some(existing) => existing,
            None => {
                targets.push(TargetImage {
                    topic_id: topic_id.to_string(),
                    image_path: entry.image.clone(),
                    width: img.width(),
                    height: img.height(),
                    annotations: Vec::new(),
                });
                targets.last_mut().unwrap()
            }
        };
        for b in entry.boxes {
            b.validate_within(record.width, record.height)?;
            if !record.annotations.contains(&b) {
                record.annotations.push(b);
            }
        }
    }
    let snapshot = registry.clone();
    snapshot.validate(false)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::synthetic::feature_pattern;
    use crate::datamodel::{write_json, Category, ClassFlag};

    fn topic(id: &str) -> Topic {
        Topic {
            id: id.to_string(),
            display_name: id.to_string(),
            category: Category::Game,
            synonyms: vec![],
            class_flag: ClassFlag::II,
        }
    }

    fn write_corpus(root: &Path, topic_id: &str, n: usize) -> Vec<TargetImage> {
        let dir = root.join("corpus").join(topic_id);
        fs::create_dir_all(&dir).unwrap();
        (0..n)
            .map(|i| {
                let rel = PathBuf::from(format!("corpus/{topic_id}/{i}.png"));
                feature_pattern(i as u64, 64, 64).save(root.join(&rel)).unwrap();
                TargetImage {
                    topic_id: topic_id.to_string(),
                    image_path: rel,
                    width: 64,
                    height: 64,
                    annotations: vec![
                        BoundingBox { x: 0, y: 0, w: 32, h: 32 },
                        BoundingBox { x: 32, y: 32, w: 32, h: 32 },
                    ],
                }
            })
            .collect()
    }

    fn sample_registry(root: &Path) -> Registry {
        let targets = write_corpus(root, "halo", 5);
        Registry {
            root: root.to_path_buf(),
            topics: vec![topic("halo"), topic("empty_topic")],
            images: [("halo".to_string(), targets)].into_iter().collect(),
        }
    }

    #[test]
    fn round_trip_preserves_structure() {
        let dir = tempfile::tempdir().unwrap();
        let registry = sample_registry(dir.path());
        let manifest = dir.path().join("registry.json");
        registry.save(&manifest).unwrap();
        let loaded = load_registry(&manifest).unwrap();
        assert_eq!(loaded.topics, registry.topics);
        assert_eq!(loaded.images, registry.images);

        let summary = loaded.summary();
        assert_eq!(summary.topic_count, 2);
        assert_eq!(summary.image_counts["halo"], 5);
    }

    #[test]
    fn out_of_bounds_box_names_the_box() {
        let dir = tempfile::tempdir().unwrap();
        let mut registry = sample_registry(dir.path());
        registry.images.get_mut("halo").unwrap()[0].annotations[0] =
            BoundingBox { x: 50, y: 0, w: 32, h: 8 };
        let manifest = dir.path().join("registry.json");
        registry.save(&manifest).unwrap();
        let err = load_registry(&manifest).unwrap_err().to_string();
        assert!(err.contains("box 0"), "{err}");
    }

    #[test]
    fn chunks_flatten_in_order_and_empty_topic_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let registry = sample_registry(dir.path());
        let chunks = annotation_chunks(&registry, "halo").unwrap();
        assert_eq!(chunks.len(), 10);
        assert!(annotation_chunks(&registry, "empty_topic").unwrap().is_empty());
        assert!(matches!(
            annotation_chunks(&registry, "nope"),
            Err(AuditError::Lookup { .. })
        ));
    }

    #[test]
    fn ingest_merges_and_dedupes() {
        let dir = tempfile::tempdir().unwrap();
        let mut registry = sample_registry(dir.path());
        let rel = PathBuf::from("corpus/halo/9.png");
        feature_pattern(9, 64, 64).save(dir.path().join(&rel)).unwrap();
        let b = BoundingBox { x: 10, y: 10, w: 50, h: 50 };
        let sidecar = dir.path().join("annotations.json");
        write_json(
            &sidecar,
            &vec![
                AnnotationSidecarEntry { image: rel.clone(), boxes: vec![b, b] },
                AnnotationSidecarEntry { image: rel.clone(), boxes: vec![b] },
            ],
        )
        .unwrap();
        ingest_annotations(&mut registry, "halo", &sidecar).unwrap();
        let added = registry.images["halo"]
            .iter()
            .find(|t| t.image_path == rel)
            .unwrap();
        assert_eq!(added.annotations, vec![b]);
    }

    #[test]
    fn ingest_orphan_image_lists_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut registry = sample_registry(dir.path());
        let sidecar = dir.path().join("annotations.json");
        write_json(
            &sidecar,
            &vec![AnnotationSidecarEntry {
                image: PathBuf::from("corpus/halo/missing.png"),
                boxes: vec![BoundingBox { x: 0, y: 0, w: 8, h: 8 }],
            }],
        )
        .unwrap();
        let err = ingest_annotations(&mut registry, "halo", &sidecar)
            .unwrap_err()
            .to_string();
        assert!(err.contains("missing.png"), "{err}");
    }
}
