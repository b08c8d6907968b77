//! Acceptance suite. Each test covers one release criterion and carries an
//! independent oracle where the criterion demands one; the harness prints a
//! pass/fail line per criterion.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use copyaudit::backend::synthetic::{
    feature_pattern, PixelEmbedder, PlantedFeature, SyntheticBackend, SyntheticConfig,
};
use copyaudit::backend::{DiffusionBackend, ImageEmbedder};
use copyaudit::datamodel::{
    read_json, BoundingBox, Category, ChunkMatch, ClassFlag, Topic, Validate,
};
use copyaudit::fixture::{control_topic_ids, write_fixture_registry};
use copyaudit::keywords::{extract_keywords, hard_intensity, normal_tail, soft_intensity};
use copyaudit::pipeline::{ImageRecord, Pipeline, RunConfig};
use copyaudit::pruner::{prune, prune_distance};
use copyaudit::report::{render_text, PruneTable, RunReport, SimilarityTable};
use copyaudit::tester::{extract_chunks, mask_from_map, test_image, AnnotationEmbedding};

fn random_map(rng: &mut ChaCha8Rng) -> Array2<f32> {
    let h = rng.gen_range(1..=40);
    let w = rng.gen_range(1..=40);
    Array2::from_shape_fn((h, w), |_| rng.gen_range(-50.0f32..50.0))
}

// -- criterion 1: filter oracle equivalence ---------------------------------

fn oracle_soft(map: &Array2<f32>) -> f64 {
    let mut v: Vec<f64> = map.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let pick = |q: f64| -> f64 {
        if v.len() == 1 {
            return v[0];
        }
        let pos = q / 100.0 * (v.len() as f64 - 1.0);
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    pick(90.0) - pick(50.0)
}

fn oracle_hard(map: &Array2<f32>, d: f64) -> f64 {
    let v: Vec<f64> = map.iter().map(|&x| x as f64).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return 0.0;
    }
    v.iter().filter(|&&x| (x - mean) / sd > d).count() as f64 / n
}

fn close_rel(a: f64, b: f64, tol: f64) -> bool {
    let scale = a.abs().max(b.abs()).max(1.0);
    (a - b).abs() <= tol * scale
}

#[test]
fn criterion_1_filter_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..1000 {
        let map = random_map(&mut rng);
        let soft = soft_intensity(&map).unwrap();
        assert!(close_rel(soft, oracle_soft(&map), 1e-12));
        for d in [0.5, 1.0, 1.96] {
            let hard = hard_intensity(&map, d).unwrap();
            assert!(close_rel(hard, oracle_hard(&map, d), 1e-12));
        }
    }
    assert!(start.elapsed() < Duration::from_secs(10), "{:?}", start.elapsed());
    println!("criterion 1 (filter oracle equivalence): pass");
}

// -- criterion 2: normal tail against numerical integration -----------------

#[test]
fn criterion_2_normal_tail_reference() {
    let d = 1.96f64;
    let tail = normal_tail(d);
    assert!((0.0249..=0.0251).contains(&tail), "tail = {tail}");

    // Simpson's rule over [d, 12]; the remaining tail is below 1e-30
    let pdf = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let steps = 2_000_000usize;
    let h = (12.0 - d) / steps as f64;
    let mut acc = pdf(d) + pdf(12.0);
    for i in 1..steps {
        let x = d + i as f64 * h;
        acc += pdf(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let oracle = acc * h / 3.0;
    assert!((tail - oracle).abs() < 1e-10, "{tail} vs {oracle}");
    println!("criterion 2 (normal tail vs integration oracle): pass");
}

// -- criterion 3: keyword recovery on planted fixtures ----------------------

#[test]
fn criterion_3_keyword_recovery() {
    let vocab = [
        "falcon", "ember", "quartz", "willow", "cobalt", "maple", "onyx", "cedar", "ivory",
        "slate", "raven", "birch", "opal", "aspen", "flint", "heron", "basalt", "tulip",
        "garnet", "alder", "plume", "moss", "crag", "fjord",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut soft_superset = 0usize;
    let fixtures = 24usize;
    for fixture in 0..fixtures {
        let mut words: Vec<&str> = vocab.to_vec();
        for i in (1..words.len()).rev() {
            words.swap(i, rng.gen_range(0..=i));
        }
        let planted_count = 1 + fixture % 3;
        let planted: Vec<&str> = words[..planted_count].to_vec();
        let prompt_words: Vec<&str> = words[..planted_count + 5].to_vec();

        let backend = SyntheticBackend::new(SyntheticConfig {
            planted: planted
                .iter()
                .map(|w| PlantedFeature::keyed(w, false))
                .collect(),
            ..SyntheticConfig::default()
        });
        let topic = Topic {
            id: "fixture".into(),
            display_name: prompt_words.join(" "),
            category: Category::Game,
            synonyms: vec![],
            class_flag: ClassFlag::II,
        };
        let report =
            extract_keywords(&topic, &backend, &[rng.gen::<u64>()], 1.96).unwrap();

        let expected: BTreeSet<String> = planted.iter().map(|w| w.to_string()).collect();
        assert_eq!(report.hard_keywords, expected, "fixture {fixture}");
        if expected.is_subset(&report.soft_keywords) {
            soft_superset += 1;
        }
    }
    assert!(
        soft_superset as f64 / fixtures as f64 >= 0.95,
        "soft superset rate {soft_superset}/{fixtures}"
    );
    println!("criterion 3 (keyword recovery): pass");
}

// -- criterion 4: pruning exactness -----------------------------------------

#[test]
fn criterion_4_pruning_exactness() {
    let backend = SyntheticBackend::new(SyntheticConfig::default());
    let topic = Topic {
        id: "target".into(),
        display_name: "target topic words".into(),
        category: Category::Game,
        synonyms: vec![],
        class_flag: ClassFlag::II,
    };
    let candidates: Vec<copyaudit::datamodel::CandidatePrompt> = (0..50)
        .map(|i| copyaudit::datamodel::CandidatePrompt {
            topic_id: topic.id.clone(),
            text: format!("candidate sentence number{i} drifting"),
            keywords_used: vec![],
            origin: copyaudit::datamodel::PromptOrigin::KeywordPath,
            prune_distance: None,
            sensitivity_f1: None,
        })
        .collect();

    for seed in 0..25u64 {
        let outcome = prune(&topic, &candidates, &backend, seed, 10).unwrap();

        let probes = backend
            .probe_cross_attention(&topic.display_name, seed)
            .unwrap();
        let target = backend
            .encode_text(&backend.tokenize(&topic.display_name).unwrap())
            .unwrap();
        let mut oracle: Vec<(f64, String)> = candidates
            .iter()
            .map(|c| {
                let emb = backend
                    .encode_text(&backend.tokenize(&c.text).unwrap())
                    .unwrap();
                let mut total = 0.0f64;
                for p in &probes {
                    let a = p.attention_output(&target);
                    let b = p.attention_output(&emb);
                    let mut sq = 0.0f64;
                    for (x, y) in a.iter().zip(b.iter()) {
                        let diff = *x as f64 - *y as f64;
                        sq += diff * diff;
                    }
                    total += sq.sqrt();
                }
                (total, c.text.clone())
            })
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

        let kept: Vec<&str> = outcome.kept.iter().map(|c| c.text.as_str()).collect();
        let expected: Vec<&str> = oracle[..10].iter().map(|(_, t)| t.as_str()).collect();
        assert_eq!(kept, expected, "seed {seed}");

        // self-distance is exactly zero
        let emb = backend
            .encode_text(&backend.tokenize(&topic.display_name).unwrap())
            .unwrap();
        assert_eq!(prune_distance(&probes, &emb, &emb), 0.0);
    }
    println!("criterion 4 (pruning exactness): pass");
}

// -- criterion 5: region recovery -------------------------------------------

#[test]
fn criterion_5_region_recovery() {
    let triggers = [
        "falcon", "ember", "quartz", "willow", "cobalt", "maple", "onyx", "cedar", "ivory",
        "slate", "raven", "birch", "opal", "aspen", "flint", "heron", "basalt", "tulip",
        "garnet", "alder",
    ];
    let embedder = PixelEmbedder::default();
    for (i, trigger) in triggers.iter().enumerate() {
        let feature = PlantedFeature::keyed(trigger, true);
        let backend = SyntheticBackend::new(SyntheticConfig {
            planted: vec![feature.clone()],
            ..SyntheticConfig::default()
        });
        let prompt = format!("quiet morning {trigger} over the harbor");
        let result = backend.generate(&prompt, i as u64).unwrap();

        let rect = feature.rect.to_pixels(128);
        let target = feature_pattern(feature.pattern_seed, rect.w, rect.h);
        let whole = BoundingBox { x: 0, y: 0, w: rect.w, h: rect.h };
        let annotations = vec![AnnotationEmbedding {
            image_id: format!("target-{trigger}"),
            annotation_index: 0,
            embedding: embedder.embed_chunk(&target, &whole).unwrap(),
        }];

        let report = test_image(
            "img",
            &result.image,
            &result.attention,
            &annotations,
            &embedder,
            3,
            None,
            0.85,
        )
        .unwrap();

        assert_eq!(report.ranked_tokens[0].word, *trigger, "fixture {i}");
        assert!(report.flagged);
        let best = report
            .matches
            .iter()
            .filter(|m| m.flagged)
            .max_by(|a, b| a.similarity.total_cmp(&b.similarity))
            .unwrap();
        assert!((best.similarity - 1.0).abs() <= 1e-6, "{}", best.similarity);
        assert!(best.chunk_box.iou(&rect) >= 0.8, "iou {}", best.chunk_box.iou(&rect));
    }

    // a similarity of exactly the threshold is not an infringement flag
    let boundary = ChunkMatch {
        image_id: "img".into(),
        chunk_box: BoundingBox { x: 0, y: 0, w: 4, h: 4 },
        source_token_indices: vec![1],
        best_target: ("t".into(), 0),
        similarity: 0.85,
        flagged: false,
    };
    boundary.validate().unwrap();
    let wrongly_flagged = ChunkMatch { flagged: true, ..boundary };
    assert!(wrongly_flagged.validate().is_err());
    println!("criterion 5 (region recovery): pass");
}

// -- criterion 6: mask invariance and tight boxes ---------------------------

fn oracle_components(mask: &Array2<bool>, image_w: u32, image_h: u32) -> Vec<(BoundingBox, u64)> {
    // independent flood fill: upscale, then repeated scans growing regions
    let (mh, mw) = mask.dim();
    let (w, h) = (image_w as usize, image_h as usize);
    let on = |x: usize, y: usize| mask[[(y * mh / h).min(mh - 1), (x * mw / w).min(mw - 1)]];
    let mut label = vec![0usize; w * h];
    let mut next = 0usize;
    let mut out = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !on(sx, sy) || label[sy * w + sx] != 0 {
                continue;
            }
            next += 1;
            let mut frontier = vec![(sx, sy)];
            label[sy * w + sx] = next;
            let (mut min_x, mut min_y, mut max_x, mut max_y) = (sx, sy, sx, sy);
            let mut count = 0u64;
            while let Some((x, y)) = frontier.pop() {
                count += 1;
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let nx = x as i64 + dx;
                        let ny = y as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if on(nx, ny) && label[ny * w + nx] == 0 {
                            label[ny * w + nx] = next;
                            frontier.push((nx, ny));
                        }
                    }
                }
            }
            out.push((
                BoundingBox {
                    x: min_x as u32,
                    y: min_y as u32,
                    w: (max_x - min_x + 1) as u32,
                    h: (max_y - min_y + 1) as u32,
                },
                count,
            ));
        }
    }
    out
}

#[test]
fn criterion_6_mask_invariance_and_tight_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for _ in 0..200 {
        let map = random_map(&mut rng);
        let a = rng.gen_range(0.1f32..10.0);
        let b = rng.gen_range(-20.0f32..20.0);
        let base = mask_from_map(&map, None);
        let transformed = mask_from_map(&map.mapv(|v| a * v + b), None);
        assert_eq!(base, transformed);
    }
    for c in [-3.0f32, 0.0, 42.5] {
        let constant = Array2::from_elem((17, 9), c);
        assert!(!mask_from_map(&constant, None).iter().any(|&b| b));
    }

    // boxes are flood-fill tight
    let min_fraction = copyaudit::tester::MIN_CHUNK_AREA_FRACTION;
    for i in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + i);
        let mask = Array2::from_shape_fn((16, 16), |_| rng.gen_bool(0.3));
        let chunks = extract_chunks(&mask, 64, 64);
        let oracle: Vec<(BoundingBox, u64)> = oracle_components(&mask, 64, 64)
            .into_iter()
            .filter(|(_, count)| *count as f64 >= (min_fraction * 64.0 * 64.0).ceil())
            .collect();
        assert_eq!(chunks.len(), oracle.len());
        for chunk in &chunks {
            assert!(
                oracle
                    .iter()
                    .any(|(b, count)| *b == chunk.bounds && *count == chunk.pixels),
                "no oracle component for {chunk:?}"
            );
        }
    }
    println!("criterion 6 (mask invariance, tight boxes): pass");
}

// -- criteria 7 and 9: full synthetic run -----------------------------------

struct FullRun {
    _dirs: (tempfile::TempDir, tempfile::TempDir),
    report: RunReport,
    second_report_bytes: Vec<u8>,
    first_report_bytes: Vec<u8>,
    first_text_bytes: Vec<u8>,
    second_text_bytes: Vec<u8>,
    image_records: usize,
    elapsed: Duration,
}

fn full_run() -> &'static FullRun {
    static RUN: OnceLock<FullRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let fixture_dir = tempfile::tempdir().unwrap();
        let manifest = write_fixture_registry(fixture_dir.path()).unwrap();

        let run_once = |out: &Path| -> (RunReport, Duration) {
            let mut config = RunConfig::for_registry(&manifest);
            config.output_dir = out.to_path_buf();
            let pipeline = Pipeline::new(config).unwrap();
            let start = Instant::now();
            let report = pipeline.run_all().unwrap();
            (report, start.elapsed())
        };

        let out_dir = tempfile::tempdir().unwrap();
        let first_out = out_dir.path().join("first");
        let second_out = out_dir.path().join("second");
        let (report, elapsed) = run_once(&first_out);
        let (_, _) = run_once(&second_out);

        let first_run_dir = first_out.join("synthetic");
        let second_run_dir = second_out.join("synthetic");
        let mut image_records = 0usize;
        for entry in fs::read_dir(&first_run_dir).unwrap() {
            let path = entry.unwrap().path();
            let manifest = path.join("images.json");
            if manifest.exists() {
                let records: Vec<ImageRecord> = read_json(&manifest).unwrap();
                image_records += records.len();
            }
        }

        FullRun {
            report,
            first_report_bytes: fs::read(first_run_dir.join("report.json")).unwrap(),
            second_report_bytes: fs::read(second_run_dir.join("report.json")).unwrap(),
            first_text_bytes: fs::read(first_run_dir.join("report.txt")).unwrap(),
            second_text_bytes: fs::read(second_run_dir.join("report.txt")).unwrap(),
            image_records,
            elapsed,
            _dirs: (fixture_dir, out_dir),
        }
    })
}

#[test]
fn criterion_7_end_to_end_synthetic_audit() {
    let run = full_run();
    assert!(run.elapsed < Duration::from_secs(300), "{:?}", run.elapsed);
    assert_eq!(run.image_records, 2500);
    assert_eq!(run.report.images_total, 2500);
    assert_eq!(run.report.flagged_by_topic.len(), 25);

    let controls = control_topic_ids();
    for (topic, proportion) in &run.report.flagged_by_topic {
        if controls.contains(topic) {
            assert_eq!(*proportion, 0.0, "control topic {topic}");
        } else {
            assert_eq!(*proportion, 1.0, "planted topic {topic}");
        }
    }
    assert_eq!(run.first_report_bytes, run.second_report_bytes);
    assert_eq!(run.first_text_bytes, run.second_text_bytes);
    println!("criterion 7 (end-to-end synthetic audit): pass");
}

#[test]
fn criterion_9_directional_properties() {
    let run = full_run();
    assert!(run.report.prune_table.with_pruning <= run.report.prune_table.without_pruning);
    assert!(run.report.similarity_table.ours > run.report.similarity_table.baseline1);
    assert!(run.report.similarity_table.ours > run.report.similarity_table.baseline2);
    println!("criterion 9 (directional properties): pass");
}

// -- criterion 8: schema fidelity via golden files --------------------------

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn reference_report() -> RunReport {
    RunReport {
        model_name: "synthetic".into(),
        scorer_name: "bag-of-words".into(),
        config_hash: "0000000000000000".into(),
        images_total: 100,
        sensitivity_mean_f1: 0.125,
        prune_table: PruneTable {
            with_pruning: 12.5,
            without_pruning: 17.25,
        },
        similarity_table: SimilarityTable {
            ours: 0.64,
            baseline1: 0.031,
            baseline2: 0.008,
        },
        flagged_proportion_overall: 0.64,
        flagged_by_topic: [("halo".to_string(), 1.0), ("toy_story".to_string(), 0.0)]
            .into_iter()
            .collect(),
    }
}

fn check_golden(name: &str, actual: &[u8]) {
    let path = golden_dir().join(name);
    if std::env::var("BLESS_GOLDEN").is_ok() {
        fs::create_dir_all(golden_dir()).unwrap();
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read(&path)
        .unwrap_or_else(|e| panic!("missing golden file {}: {e}", path.display()));
    assert_eq!(actual, expected.as_slice(), "golden mismatch for {name}");
}

#[test]
fn criterion_8_schema_fidelity() {
    let report = reference_report();
    let text = render_text(&report);

    // published values appear as labeled reference rows only
    for fragment in ["56.1", "68.8", "89.1", "74.3", "57.8", "~0.70"] {
        assert!(text.contains(fragment), "missing reference value {fragment}");
    }
    assert_eq!(text.matches("paper-reported").count(), 3);
    assert!(text.contains("not asserted"));
    assert!(text.contains("with pruning"));
    assert!(text.contains("without pruning"));
    assert!(text.contains("ours"));
    assert!(text.contains("baseline1"));
    assert!(text.contains("baseline2"));
    assert!(text.contains("(x100)"));
    check_golden("report.txt", text.as_bytes());

    let dir = tempfile::tempdir().unwrap();
    copyaudit::report::emit_outputs(&report, dir.path()).unwrap();
    check_golden(
        "flagged_by_topic.png",
        &fs::read(dir.path().join("figures/flagged_by_topic.png")).unwrap(),
    );
    check_golden(
        "similarity.png",
        &fs::read(dir.path().join("figures/similarity.png")).unwrap(),
    );

    let json_bytes = fs::read(dir.path().join("report.json")).unwrap();
    let loaded: RunReport = serde_json::from_slice(&json_bytes).unwrap();
    assert_eq!(loaded, report);
    println!("criterion 8 (schema fidelity): pass");
}
