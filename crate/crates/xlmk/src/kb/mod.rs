//! Knowledge base and corpus model.
//!
//! A [`KnowledgeBase`] holds entities with per-language labels and
//! descriptions, a dense relation table, `<subject, relation, object>`
//! triplets, and a mention-annotated corpus. Construction goes through
//! [`parse::parse_dump`] (JSONL dumps) or [`world::generate_synthetic_world`]
//! (seeded synthetic worlds); after construction the KB is immutable and safe
//! to share across threads.

mod parse;
mod validate;
mod world;

pub use parse::{parse_dump, parse_dump_files, ParseMode, ParseReport};
pub use validate::{validate_kb, ValidationReport, Violation};
pub use world::{generate_synthetic_world, SyntheticWorld, WorldConfig};

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XlmkError};

/// Descriptions are clipped to this many tokens when a KB is built.
pub const MAX_DESCRIPTION_TOKENS: usize = 256;

/// Lowercase ASCII language tag, at most 8 chars.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageCode(String);

impl LanguageCode {
    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        let ok = !code.is_empty()
            && code.len() <= 8
            && code
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit());
        if ok {
            Ok(LanguageCode(code))
        } else {
            Err(XlmkError::InvalidLanguageCode(code))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for LanguageCode {
    type Error = XlmkError;
    fn try_from(s: String) -> Result<Self> {
        LanguageCode::new(s)
    }
}

impl From<LanguageCode> for String {
    fn from(l: LanguageCode) -> String {
        l.0
    }
}

impl std::fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// An entity with per-language surface labels and descriptions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    #[serde(default)]
    pub labels: BTreeMap<LanguageCode, Vec<String>>,
    pub descriptions: BTreeMap<LanguageCode, Vec<String>>,
}

/// A relation with its dense table index (order of first appearance).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: String,
    pub index: usize,
}

/// A `<subject, relation, object>` fact; all three ids must resolve.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// Token span `[s, t]` (inclusive) within one sentence, linked to an entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub s: usize,
    pub t: usize,
    pub entity: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub mentions: Vec<Mention>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub lang: LanguageCode,
    pub sentences: Vec<Sentence>,
}

/// A fully resolved mention with its location in the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionSite {
    pub doc_index: usize,
    pub sentence_index: usize,
    pub mention_index: usize,
    pub lang: LanguageCode,
    pub entity: String,
}

/// The immutable knowledge base: entities, relations, triplets, corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entities: IndexMap<String, Entity>,
    relations: IndexMap<String, Relation>,
    triplets: Vec<Triplet>,
    corpus: Vec<Document>,
}

impl KnowledgeBase {
    pub(crate) fn from_parts(
        entities: IndexMap<String, Entity>,
        relations: IndexMap<String, Relation>,
        triplets: Vec<Triplet>,
        corpus: Vec<Document>,
    ) -> Self {
        KnowledgeBase {
            entities,
            relations,
            triplets,
            corpus,
        }
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn relation(&self, id: &str) -> Option<&Relation> {
        self.relations.get(id)
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.values()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn corpus(&self) -> &[Document] {
        &self.corpus
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Every mention in the corpus, flattened with its location.
    pub fn mention_sites(&self) -> Vec<MentionSite> {
        let mut sites = Vec::new();
        for (di, doc) in self.corpus.iter().enumerate() {
            for (si, sentence) in doc.sentences.iter().enumerate() {
                for (mi, mention) in sentence.mentions.iter().enumerate() {
                    sites.push(MentionSite {
                        doc_index: di,
                        sentence_index: si,
                        mention_index: mi,
                        lang: doc.lang.clone(),
                        entity: mention.entity.clone(),
                    });
                }
            }
        }
        sites
    }

    pub fn sentence(&self, site: &MentionSite) -> (&Sentence, &Mention) {
        let sentence = &self.corpus[site.doc_index].sentences[site.sentence_index];
        (sentence, &sentence.mentions[site.mention_index])
    }

    /// Serialize back to the dump format: `(corpus.jsonl, kb.jsonl)` contents.
    pub fn serialize(&self) -> (String, String) {
        parse::serialize_kb(self)
    }
}

/// First `MAX_DESCRIPTION_TOKENS` tokens of a description, order preserved.
pub fn truncate_description(tokens: &[String]) -> Result<Vec<String>> {
    if tokens.is_empty() {
        return Err(XlmkError::EmptyDescription);
    }
    Ok(tokens[..tokens.len().min(MAX_DESCRIPTION_TOKENS)].to_vec())
}

/// Pick a description for `entity_id`, preferring languages other than
/// `query_lang`; falls back to `query_lang` only when nothing else exists.
/// Uniform over the eligible languages, deterministic given the rng state.
pub fn resolve_description<'kb>(
    kb: &'kb KnowledgeBase,
    entity_id: &str,
    query_lang: &LanguageCode,
    rng: &mut impl Rng,
) -> Result<(LanguageCode, &'kb [String])> {
    let entity = kb
        .entity(entity_id)
        .ok_or_else(|| XlmkError::UnresolvedEntityId {
            id: entity_id.to_string(),
            context: "resolve_description".to_string(),
        })?;
    if entity.descriptions.is_empty() {
        return Err(XlmkError::NoDescription(entity_id.to_string()));
    }
    let foreign: Vec<&LanguageCode> = entity
        .descriptions
        .keys()
        .filter(|l| *l != query_lang)
        .collect();
    let lang = if foreign.is_empty() {
        query_lang.clone()
    } else {
        foreign[rng.gen_range(0..foreign.len())].clone()
    };
    let tokens = entity
        .descriptions
        .get(&lang)
        .ok_or_else(|| XlmkError::NoDescription(entity_id.to_string()))?;
    Ok((lang, tokens.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn kb_with_descriptions(langs: &[&str]) -> KnowledgeBase {
        let mut entities = IndexMap::new();
        let mut descriptions = BTreeMap::new();
        for l in langs {
            descriptions.insert(
                LanguageCode::new(*l).unwrap(),
                vec![format!("{l}_tok0"), format!("{l}_tok1")],
            );
        }
        entities.insert(
            "Q1".to_string(),
            Entity {
                id: "Q1".to_string(),
                labels: BTreeMap::new(),
                descriptions,
            },
        );
        KnowledgeBase::from_parts(entities, IndexMap::new(), vec![], vec![])
    }

    #[test]
    fn language_code_rejects_bad_input() {
        assert!(LanguageCode::new("en").is_ok());
        assert!(LanguageCode::new("").is_err());
        assert!(LanguageCode::new("EN").is_err());
        assert!(LanguageCode::new("waytoolong1").is_err());
    }

    #[test]
    fn truncate_keeps_first_256() {
        let toks: Vec<String> = (0..300).map(|i| format!("t{i}")).collect();
        let out = truncate_description(&toks).unwrap();
        assert_eq!(out.len(), 256);
        assert_eq!(out[0], "t0");
        assert_eq!(out[255], "t255");

        let short: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        assert_eq!(truncate_description(&short).unwrap(), short);

        let exact: Vec<String> = (0..256).map(|i| format!("t{i}")).collect();
        assert_eq!(truncate_description(&exact).unwrap(), exact);

        assert!(matches!(
            truncate_description(&[]),
            Err(XlmkError::EmptyDescription)
        ));
    }

    #[test]
    fn resolve_prefers_foreign_language() {
        let kb = kb_with_descriptions(&["en", "ar"]);
        let en = LanguageCode::new("en").unwrap();
        let mut rng = substream(1, "test");
        for _ in 0..20 {
            let (lang, toks) = resolve_description(&kb, "Q1", &en, &mut rng).unwrap();
            assert_eq!(lang.as_str(), "ar");
            assert_eq!(toks[0], "ar_tok0");
        }
    }

    #[test]
    fn resolve_falls_back_to_query_language() {
        let kb = kb_with_descriptions(&["en"]);
        let en = LanguageCode::new("en").unwrap();
        let mut rng = substream(1, "test");
        let (lang, _) = resolve_description(&kb, "Q1", &en, &mut rng).unwrap();
        assert_eq!(lang.as_str(), "en");
    }

    #[test]
    fn resolve_samples_foreign_languages_uniformly() {
        // Two foreign options; over 10k draws each should land within 50% +/- 2%.
        let kb = kb_with_descriptions(&["en", "ar", "hi"]);
        let en = LanguageCode::new("en").unwrap();
        let mut rng = substream(7, "resolve");
        let mut counts = BTreeMap::new();
        let n = 10_000usize;
        for _ in 0..n {
            let (lang, _) = resolve_description(&kb, "Q1", &en, &mut rng).unwrap();
            assert_ne!(lang.as_str(), "en");
            *counts.entry(lang.as_str().to_string()).or_insert(0usize) += 1;
        }
        for (_, c) in counts {
            let frac = c as f64 / n as f64;
            assert!((frac - 0.5).abs() < 0.02, "split off balance: {frac}");
        }
    }

    #[test]
    fn resolve_errors_without_descriptions() {
        let mut entities = IndexMap::new();
        entities.insert(
            "Q9".to_string(),
            Entity {
                id: "Q9".to_string(),
                labels: BTreeMap::new(),
                descriptions: BTreeMap::new(),
            },
        );
        let kb = KnowledgeBase::from_parts(entities, IndexMap::new(), vec![], vec![]);
        let en = LanguageCode::new("en").unwrap();
        let mut rng = substream(1, "test");
        assert!(matches!(
            resolve_description(&kb, "Q9", &en, &mut rng),
            Err(XlmkError::NoDescription(_))
        ));
    }
}
