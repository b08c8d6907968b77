//! Turns extracted keywords (or synonyms, for Class I topics) into candidate
//! prompts via templated chat-LLM queries, with hard validation that required
//! keywords are present and sensitive words are not.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{ChatClient, DEFAULT_CHAT_TEMPERATURE};
use crate::datamodel::{
    text_words, CandidatePrompt, Category, ClassFlag, PromptOrigin, Topic,
};
use crate::error::{AuditError, Result};
use crate::keywords::KeywordReport;

/// Rounds of over-requesting before forging gives up.
pub const RETRY_ROUNDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    PhraseFromKeywords,
    SentenceFromStartphrase,
    SentenceFromKeywords,
}

impl TemplateId {
    pub fn file_stem(&self) -> &'static str {
        match self {
            TemplateId::PhraseFromKeywords => "phrase_from_keywords",
            TemplateId::SentenceFromStartphrase => "sentence_from_startphrase",
            TemplateId::SentenceFromKeywords => "sentence_from_keywords",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTemplate {
    pub template_id: TemplateId,
    pub body: String,
}

const PLACEHOLDERS: &[&str] = &["{N}", "{TOPIC}", "{CATEGORY}", "{KEYWORD_LIST}", "{STARTPHRASE}"];

fn builtin_body(id: TemplateId) -> &'static str {
    match id {
        TemplateId::PhraseFromKeywords => {
            "Form {N} phrases using all of the exact words in the exact order: {KEYWORD_LIST}. \
             The phrases should be similar to {CATEGORY} {TOPIC}."
        }
        TemplateId::SentenceFromStartphrase => {
            "Form {N} sentences that start with the phrase {STARTPHRASE}. \
             Do not make reference to the {CATEGORY} {TOPIC}. \
             Use words that are challenging to represent visually."
        }
        TemplateId::SentenceFromKeywords => {
            "Form {N} sentences that uses all of the exact words in the exact order: {KEYWORD_LIST}. \
             Use the words continuously wherever possible. \
             Ensure grammatical correctness. \
             Start the sentence with the exact {STARTPHRASE}. \
             Do not make reference to the {CATEGORY} {TOPIC}. \
             Use words that are challenging to represent visually."
        }
    }
}

/// The three query templates, either builtin or overridden by text files.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub phrase_from_keywords: QueryTemplate,
    pub sentence_from_startphrase: QueryTemplate,
    pub sentence_from_keywords: QueryTemplate,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let mk = |id| QueryTemplate {
            template_id: id,
            body: builtin_body(id).to_string(),
        };
        TemplateSet {
            phrase_from_keywords: mk(TemplateId::PhraseFromKeywords),
            sentence_from_startphrase: mk(TemplateId::SentenceFromStartphrase),
            sentence_from_keywords: mk(TemplateId::SentenceFromKeywords),
        }
    }

    /// Loads `<stem>.txt` files from `dir`, falling back to the builtin body
    /// for any missing file.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut set = Self::builtin();
        for template in [
            &mut set.phrase_from_keywords,
            &mut set.sentence_from_startphrase,
            &mut set.sentence_from_keywords,
        ] {
            let path = dir.join(format!("{}.txt", template.template_id.file_stem()));
            if path.exists() {
                template.body = fs::read_to_string(&path)
                    .map_err(|e| AuditError::io(&path, e))?
                    .trim()
                    .to_string();
            }
        }
        Ok(set)
    }

    /// Writes the builtin template bodies as editable text files.
    pub fn write_defaults(dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| AuditError::io(dir, e))?;
        for template in [
            TemplateId::PhraseFromKeywords,
            TemplateId::SentenceFromStartphrase,
            TemplateId::SentenceFromKeywords,
        ] {
            let path = dir.join(format!("{}.txt", template.file_stem()));
            fs::write(&path, builtin_body(template)).map_err(|e| AuditError::io(&path, e))?;
        }
        Ok(())
    }
}

/// Values substituted into a template.
#[derive(Debug, Clone, Default)]
pub struct TemplateBindings {
    pub n: Option<usize>,
    pub topic: Option<String>,
    pub category: Option<String>,
    pub keywords: Option<Vec<String>>,
    pub start_phrase: Option<String>,
}

/// Verbatim placeholder substitution; keyword lists join as "K0, K1, ...".
pub fn render_template(template: &QueryTemplate, bindings: &TemplateBindings) -> Result<String> {
    let mut text = template.body.clone();
    let subs: Vec<(&str, Option<String>)> = vec![
        ("{N}", bindings.n.map(|n| n.to_string())),
        ("{TOPIC}", bindings.topic.clone()),
        ("{CATEGORY}", bindings.category.clone()),
        ("{KEYWORD_LIST}", bindings.keywords.as_ref().map(|k| k.join(", "))),
        ("{STARTPHRASE}", bindings.start_phrase.clone()),
    ];
    for (marker, value) in subs {
        if text.contains(marker) {
            match value {
                Some(v) => text = text.replace(marker, &v),
                None => {
                    return Err(AuditError::MissingBinding(
                        marker.trim_matches(['{', '}']).to_string(),
                    ))
                }
            }
        }
    }
    debug_assert!(PLACEHOLDERS.iter().all(|p| !text.contains(p)));
    Ok(text)
}

pub fn category_label(category: Category) -> &'static str {
    match category {
        Category::Movie => "movie",
        Category::Game => "video game",
        Category::Logo => "logo",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptValidation {
    pub valid: bool,
    pub reasons: Vec<String>,
}

fn contains_word(words: &[String], needle: &str) -> bool {
    let needle = needle.to_lowercase();
    words.iter().any(|w| *w == needle)
}

fn starts_with_phrase(text: &str, phrase: &str) -> bool {
    let text = text.to_lowercase();
    let phrase = phrase.to_lowercase();
    text == phrase || text.starts_with(&format!("{phrase} "))
}

/// Checks keyword/synonym inclusion and sensitive-word exclusion.
///
/// Words a Class II extraction already surfaced as keywords, or words a
/// synonym phrase deliberately reuses, are not treated as sensitive: the
/// whole point of both paths is that those words may appear.
pub fn validate_prompt(candidate: &CandidatePrompt, topic: &Topic) -> PromptValidation {
    let mut reasons = Vec::new();
    let words = text_words(&candidate.text);

    let allowed: Vec<String> = match candidate.origin {
        PromptOrigin::KeywordPath => {
            for kw in &candidate.keywords_used {
                if !contains_word(&words, kw) {
                    reasons.push(format!("missing keyword `{kw}`"));
                }
            }
            candidate
                .keywords_used
                .iter()
                .map(|k| k.to_lowercase())
                .collect()
        }
        PromptOrigin::SynonymPath => {
            let phrase = candidate
                .keywords_used
                .first()
                .cloned()
                .or_else(|| {
                    topic
                        .synonyms
                        .iter()
                        .map(|s| s.phrase.clone())
                        .find(|p| starts_with_phrase(&candidate.text, p))
                });
            match phrase {
                Some(p) if starts_with_phrase(&candidate.text, &p) => text_words(&p),
                Some(p) => {
                    reasons.push(format!("does not start with synonym phrase `{p}`"));
                    text_words(&p)
                }
                None => {
                    reasons.push("no synonym phrase to match".to_string());
                    Vec::new()
                }
            }
        }
    };

    for sensitive in topic.display_words() {
        if allowed.contains(&sensitive) {
            continue;
        }
        if contains_word(&words, &sensitive) {
            reasons.push(format!("sensitive word present: `{sensitive}`"));
        }
    }

    PromptValidation {
        valid: reasons.is_empty(),
        reasons,
    }
}

/// Keywords a Class II forge must include, in display-name order.
fn ordered_hard_keywords(topic: &Topic, report: &KeywordReport) -> Vec<String> {
    let order = text_words(&topic.display_name);
    let mut keywords: Vec<String> = order
        .iter()
        .filter(|w| report.hard_keywords.contains(*w))
        .cloned()
        .collect();
    // hard keywords not traceable to the display text go last, alphabetically
    for kw in &report.hard_keywords {
        if !keywords.contains(kw) {
            keywords.push(kw.clone());
        }
    }
    keywords
}

/// Soft-only keywords that cannot collide with the sensitive-word check.
fn safe_supplements(topic: &Topic, report: &KeywordReport) -> Vec<String> {
    let display = topic.display_words();
    report
        .soft_keywords
        .iter()
        .filter(|w| !report.hard_keywords.contains(*w) && !display.contains(w))
        .cloned()
        .collect()
}

/// Forges up to `n` validated candidate prompts. Class II topics run the
/// keyword path (phrases, then sentences); Class I topics run the synonym
/// path. Generation over-requests in bounded rounds until `n` valid unique
/// prompts accumulate.
pub fn forge_prompts(
    topic: &Topic,
    report: Option<&KeywordReport>,
    n: usize,
    client: &dyn ChatClient,
    templates: &TemplateSet,
) -> Result<Vec<CandidatePrompt>> {
    if n < 1 {
        return Err(AuditError::Precondition("n must be >= 1".to_string()));
    }
    let category = category_label(topic.category).to_string();
    let mut accepted: Vec<CandidatePrompt> = Vec::new();

    match topic.class_flag {
        ClassFlag::I => {
            if topic.synonyms.is_empty() {
                return Err(AuditError::Precondition(format!(
                    "Class I topic `{}` has no synonyms",
                    topic.id
                )));
            }
            for round in 0..RETRY_ROUNDS {
                if accepted.len() >= n {
                    break;
                }
                let synonym = &topic.synonyms[round % topic.synonyms.len()];
                let query = render_template(
                    &templates.sentence_from_startphrase,
                    &TemplateBindings {
                        n: Some(2 * n),
                        topic: Some(topic.display_name.clone()),
                        category: Some(category.clone()),
                        start_phrase: Some(synonym.phrase.clone()),
                        ..TemplateBindings::default()
                    },
                )?;
                let completions = client.complete(&query, DEFAULT_CHAT_TEMPERATURE, 2 * n)?;
                accept_valid(
                    topic,
                    &mut accepted,
                    completions,
                    vec![synonym.phrase.clone()],
                    PromptOrigin::SynonymPath,
                    n,
                );
            }
        }
        ClassFlag::II => {
            let report = report.ok_or_else(|| {
                AuditError::Precondition(format!(
                    "Class II topic `{}` requires a keyword report",
                    topic.id
                ))
            })?;
            if report.hard_keywords.is_empty() {
                return Err(AuditError::Precondition(format!(
                    "Class II topic `{}` has no hard keywords",
                    topic.id
                )));
            }
            let required = ordered_hard_keywords(topic, report);
            let mut query_keywords = required.clone();
            query_keywords.extend(safe_supplements(topic, report));

            for round in 0..RETRY_ROUNDS {
                if accepted.len() >= n {
                    break;
                }
                let phrase_query = render_template(
                    &templates.phrase_from_keywords,
                    &TemplateBindings {
                        n: Some(2 * n),
                        topic: Some(topic.display_name.clone()),
                        category: Some(category.clone()),
                        keywords: Some(query_keywords.clone()),
                        ..TemplateBindings::default()
                    },
                )?;
                let phrases = client.complete(&phrase_query, DEFAULT_CHAT_TEMPERATURE, 2 * n)?;
                if phrases.is_empty() {
                    continue;
                }
                let phrase = phrases[round % phrases.len()].clone();
                let sentence_query = render_template(
                    &templates.sentence_from_keywords,
                    &TemplateBindings {
                        n: Some(2 * n),
                        topic: Some(topic.display_name.clone()),
                        category: Some(category.clone()),
                        keywords: Some(query_keywords.clone()),
                        start_phrase: Some(phrase),
                        ..TemplateBindings::default()
                    },
                )?;
                let sentences =
                    client.complete(&sentence_query, DEFAULT_CHAT_TEMPERATURE, 2 * n)?;
                accept_valid(
                    topic,
                    &mut accepted,
                    sentences,
                    required.clone(),
                    PromptOrigin::KeywordPath,
                    n,
                );
            }
        }
    }

    if accepted.len() < n {
        return Err(AuditError::ForgeExhausted {
            want: n,
            got: accepted.len(),
            partial: accepted,
        });
    }
    Ok(accepted)
}

fn accept_valid(
    topic: &Topic,
    accepted: &mut Vec<CandidatePrompt>,
    completions: Vec<String>,
    keywords_used: Vec<String>,
    origin: PromptOrigin,
    n: usize,
) {
    for text in completions {
        if accepted.len() >= n {
            break;
        }
        let text = text.trim().to_string();
        if text.is_empty() || accepted.iter().any(|c| c.text == text) {
            continue;
        }
        let candidate = CandidatePrompt {
            topic_id: topic.id.clone(),
            text,
            keywords_used: keywords_used.clone(),
            origin,
            prune_distance: None,
            sensitivity_f1: None,
        };
        if validate_prompt(&candidate, topic).valid {
            accepted.push(candidate);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::synthetic::{ScriptedChatClient, SyntheticChatClient};
    use crate::datamodel::{SynonymEntry, SynonymStrategy};
    use std::collections::BTreeMap;

    fn bitcoin_topic() -> Topic {
        Topic {
            id: "bitcoin_logo".into(),
            display_name: "bitcoin logo".into(),
            category: Category::Logo,
            synonyms: vec![SynonymEntry {
                phrase: "cryptocurrency".into(),
                strategy: SynonymStrategy::BroaderCategory,
            }],
            class_flag: ClassFlag::I,
        }
    }

    fn zelda_topic() -> Topic {
        Topic {
            id: "zelda".into(),
            display_name: "the legend of zelda breath of the wild poster".into(),
            category: Category::Game,
            synonyms: vec![],
            class_flag: ClassFlag::II,
        }
    }

    fn zelda_report(hard: &[&str]) -> KeywordReport {
        KeywordReport {
            topic_id: "zelda".into(),
            soft_keywords: hard.iter().map(|s| s.to_string()).collect(),
            hard_keywords: hard.iter().map(|s| s.to_string()).collect(),
            per_layer_intensities: BTreeMap::new(),
        }
    }

    #[test]
    fn render_phrase_template() {
        let set = TemplateSet::builtin();
        let text = render_template(
            &set.phrase_from_keywords,
            &TemplateBindings {
                n: Some(2),
                topic: Some("great wave".into()),
                category: Some("artwork".into()),
                keywords: Some(vec!["great".into(), "wave".into()]),
                ..TemplateBindings::default()
            },
        )
        .unwrap();
        assert!(text.starts_with(
            "Form 2 phrases using all of the exact words in the exact order: great, wave."
        ));
    }

    #[test]
    fn render_startphrase_template() {
        let set = TemplateSet::builtin();
        let text = render_template(
            &set.sentence_from_startphrase,
            &TemplateBindings {
                n: Some(3),
                topic: Some("superman".into()),
                category: Some("movie".into()),
                start_phrase: Some("a superhero".into()),
                ..TemplateBindings::default()
            },
        )
        .unwrap();
        assert!(text.contains("start with the phrase a superhero"));
        assert!(text.contains("Do not make reference"));
    }

    #[test]
    fn missing_binding_names_placeholder() {
        let set = TemplateSet::builtin();
        let err = render_template(
            &set.phrase_from_keywords,
            &TemplateBindings {
                n: Some(2),
                topic: Some("t".into()),
                category: Some("c".into()),
                ..TemplateBindings::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, AuditError::MissingBinding(p) if p == "KEYWORD_LIST"));
    }

    fn candidate(topic: &Topic, text: &str, keywords: &[&str], origin: PromptOrigin) -> CandidatePrompt {
        CandidatePrompt {
            topic_id: topic.id.clone(),
            text: text.into(),
            keywords_used: keywords.iter().map(|s| s.to_string()).collect(),
            origin,
            prune_distance: None,
            sensitivity_f1: None,
        }
    }

    #[test]
    fn synonym_path_validation() {
        let topic = Topic {
            id: "superman".into(),
            display_name: "superman".into(),
            category: Category::Movie,
            synonyms: vec![SynonymEntry {
                phrase: "a superhero".into(),
                strategy: SynonymStrategy::BroaderCategory,
            }],
            class_flag: ClassFlag::I,
        };
        let good = candidate(
            &topic,
            "a superhero soared above the city",
            &["a superhero"],
            PromptOrigin::SynonymPath,
        );
        assert!(validate_prompt(&good, &topic).valid);

        let bad = candidate(
            &topic,
            "a superhero like superman soared",
            &["a superhero"],
            PromptOrigin::SynonymPath,
        );
        let outcome = validate_prompt(&bad, &topic);
        assert!(!outcome.valid);
        assert!(outcome.reasons.iter().any(|r| r.contains("sensitive word")));
    }

    #[test]
    fn keyword_path_requires_all_keywords() {
        let topic = zelda_topic();
        let missing = candidate(
            &topic,
            "breath over quiet fields",
            &["breath", "wild"],
            PromptOrigin::KeywordPath,
        );
        let outcome = validate_prompt(&missing, &topic);
        assert!(!outcome.valid);
        assert!(outcome.reasons.iter().any(|r| r.contains("wild")));

        let good = candidate(
            &topic,
            "breath of the wild morning drifted past",
            &["breath", "wild"],
            PromptOrigin::KeywordPath,
        );
        assert!(validate_prompt(&good, &topic).valid);

        // display words outside the keyword set stay forbidden
        let leak = candidate(
            &topic,
            "breath wild zelda morning",
            &["breath", "wild"],
            PromptOrigin::KeywordPath,
        );
        assert!(!validate_prompt(&leak, &topic).valid);
    }

    #[test]
    fn forge_synonym_path_uses_synonym_and_avoids_sensitive_word() {
        let topic = bitcoin_topic();
        let prompts =
            forge_prompts(&topic, None, 4, &SyntheticChatClient, &TemplateSet::builtin())
                .unwrap();
        assert_eq!(prompts.len(), 4);
        for p in &prompts {
            assert!(p.text.starts_with("cryptocurrency"));
            assert!(!p.text.contains("bitcoin"));
            assert_eq!(p.origin, PromptOrigin::SynonymPath);
        }
    }

    #[test]
    fn forge_rejects_and_retries_invalid_completions() {
        let topic = zelda_topic();
        let report = zelda_report(&["breath", "wild"]);
        // round 1: phrase batch, then sentences where one misses "wild";
        // round 2 supplies enough valid material
        let client = ScriptedChatClient::new(vec![
            vec!["breath wild upon".into()],
            vec![
                "breath wild beyond the morning".into(),
                "breath alone in the hollow".into(),
            ],
            vec!["breath wild upon".into()],
            vec![
                "breath wild beside a lantern".into(),
                "breath wild beneath amber skies".into(),
            ],
        ]);
        let prompts = forge_prompts(&topic, Some(&report), 2, &client, &TemplateSet::builtin())
            .unwrap();
        assert_eq!(prompts.len(), 2);
        assert!(prompts.iter().all(|p| {
            let words = text_words(&p.text);
            words.contains(&"breath".to_string()) && words.contains(&"wild".to_string())
        }));
    }

    #[test]
    fn forge_returns_exactly_n_in_client_order() {
        let topic = bitcoin_topic();
        let sentences: Vec<String> = (0..12)
            .map(|i| format!("cryptocurrency drifting number{i} beyond"))
            .collect();
        let client = ScriptedChatClient::new(vec![sentences.clone()]);
        let prompts = forge_prompts(&topic, None, 10, &client, &TemplateSet::builtin()).unwrap();
        assert_eq!(prompts.len(), 10);
        let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(texts, &sentences[..10].iter().map(|s| s.as_str()).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn forge_budget_exhaustion_carries_partial() {
        let topic = bitcoin_topic();
        let client = ScriptedChatClient::new(vec![vec![
            "cryptocurrency gentle harbor".into(),
        ]]);
        let err = forge_prompts(&topic, None, 3, &client, &TemplateSet::builtin()).unwrap_err();
        match err {
            AuditError::ForgeExhausted { want, got, partial } => {
                assert_eq!(want, 3);
                assert_eq!(got, 1);
                assert_eq!(partial.len(), 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn template_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        TemplateSet::write_defaults(dir.path()).unwrap();
        let loaded = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(loaded, TemplateSet::builtin());
    }
}
