//! JSONL dump parsing and serialization.
//!
//! Two streams build a KB: a corpus stream (one document per line) and a KB
//! stream (entity / relation / triplet records, discriminated by `"type"`).
//! Strict mode aborts on the first defect; lenient mode drops defective
//! records (first-wins for overlapping mentions) and counts them in the
//! [`ParseReport`].

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{
    truncate_description, Document, Entity, KnowledgeBase, LanguageCode, Mention, Relation,
    Sentence, Triplet,
};
use crate::error::{Result, XlmkError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    Strict,
    Lenient,
}

/// Defect counts from a lenient parse; all zero after a clean one.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseReport {
    pub malformed_lines: usize,
    pub duplicate_entities: usize,
    pub unresolved_mentions: usize,
    pub unresolved_triplets: usize,
    pub overlapping_mentions: usize,
    pub invalid_mentions: usize,
}

impl ParseReport {
    pub fn total_defects(&self) -> usize {
        self.malformed_lines
            + self.duplicate_entities
            + self.unresolved_mentions
            + self.unresolved_triplets
            + self.overlapping_mentions
            + self.invalid_mentions
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type")]
enum KbRecord {
    #[serde(rename = "entity")]
    Entity {
        id: String,
        #[serde(default)]
        labels: BTreeMap<LanguageCode, Vec<String>>,
        descriptions: BTreeMap<LanguageCode, Vec<String>>,
    },
    #[serde(rename = "relation")]
    Relation { id: String },
    #[serde(rename = "triplet")]
    Triplet { s: String, r: String, o: String },
}

/// Parse corpus + KB streams into a linked [`KnowledgeBase`].
pub fn parse_dump(
    corpus_stream: impl BufRead,
    kb_stream: impl BufRead,
    mode: ParseMode,
) -> Result<(KnowledgeBase, ParseReport)> {
    let mut report = ParseReport::default();
    let mut entities: IndexMap<String, Entity> = IndexMap::new();
    let mut relations: IndexMap<String, Relation> = IndexMap::new();
    let mut triplets_raw: Vec<Triplet> = Vec::new();

    for (lineno, line) in kb_stream.lines().enumerate() {
        let line = line.map_err(|e| XlmkError::io("<kb stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: KbRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                if mode == ParseMode::Strict {
                    return Err(XlmkError::MalformedRecord {
                        path: "<kb stream>".to_string(),
                        line: lineno + 1,
                        detail: e.to_string(),
                    });
                }
                report.malformed_lines += 1;
                continue;
            }
        };
        match record {
            KbRecord::Entity {
                id,
                labels,
                descriptions,
            } => {
                if entities.contains_key(&id) {
                    if mode == ParseMode::Strict {
                        return Err(XlmkError::DuplicateEntityId(id));
                    }
                    report.duplicate_entities += 1;
                    continue;
                }
                let mut truncated = BTreeMap::new();
                let mut bad = false;
                for (lang, tokens) in descriptions {
                    match truncate_description(&tokens) {
                        Ok(t) => {
                            truncated.insert(lang, t);
                        }
                        Err(e) => {
                            if mode == ParseMode::Strict {
                                return Err(e);
                            }
                            bad = true;
                        }
                    }
                }
                if bad && truncated.is_empty() {
                    report.malformed_lines += 1;
                    continue;
                }
                if truncated.is_empty() {
                    let err = XlmkError::NoDescription(id.clone());
                    if mode == ParseMode::Strict {
                        return Err(err);
                    }
                    report.malformed_lines += 1;
                    continue;
                }
                entities.insert(
                    id.clone(),
                    Entity {
                        id,
                        labels,
                        descriptions: truncated,
                    },
                );
            }
            KbRecord::Relation { id } => {
                let index = relations.len();
                relations.entry(id.clone()).or_insert(Relation { id, index });
            }
            KbRecord::Triplet { s, r, o } => triplets_raw.push(Triplet {
                subject: s,
                relation: r,
                object: o,
            }),
        }
    }

    // Link triplets once all entities/relations are known.
    let mut triplets = Vec::with_capacity(triplets_raw.len());
    for t in triplets_raw {
        let missing = if !entities.contains_key(&t.subject) {
            Some(&t.subject)
        } else if !entities.contains_key(&t.object) {
            Some(&t.object)
        } else if !relations.contains_key(&t.relation) {
            Some(&t.relation)
        } else {
            None
        };
        if let Some(id) = missing {
            if mode == ParseMode::Strict {
                return Err(XlmkError::UnresolvedEntityId {
                    id: id.clone(),
                    context: format!(
                        "triplet <{}, {}, {}>",
                        t.subject, t.relation, t.object
                    ),
                });
            }
            report.unresolved_triplets += 1;
            continue;
        }
        triplets.push(t);
    }

    let mut corpus = Vec::new();
    for (lineno, line) in corpus_stream.lines().enumerate() {
        let line = line.map_err(|e| XlmkError::io("<corpus stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut doc: Document = match serde_json::from_str(&line) {
            Ok(d) => d,
            Err(e) => {
                if mode == ParseMode::Strict {
                    return Err(XlmkError::MalformedRecord {
                        path: "<corpus stream>".to_string(),
                        line: lineno + 1,
                        detail: e.to_string(),
                    });
                }
                report.malformed_lines += 1;
                continue;
            }
        };
        let mut doc_ok = true;
        for sentence in &mut doc.sentences {
            if sentence.tokens.is_empty() {
                if mode == ParseMode::Strict {
                    return Err(XlmkError::MalformedRecord {
                        path: "<corpus stream>".to_string(),
                        line: lineno + 1,
                        detail: "sentence with no tokens".to_string(),
                    });
                }
                report.malformed_lines += 1;
                doc_ok = false;
                break;
            }
            link_sentence(sentence, &entities, mode, &mut report)?;
        }
        if doc_ok {
            corpus.push(doc);
        }
    }

    Ok((
        KnowledgeBase::from_parts(entities, relations, triplets, corpus),
        report,
    ))
}

/// Validate, resolve and order the mentions of one sentence in place.
fn link_sentence(
    sentence: &mut Sentence,
    entities: &IndexMap<String, Entity>,
    mode: ParseMode,
    report: &mut ParseReport,
) -> Result<()> {
    let len = sentence.tokens.len();
    let mut kept: Vec<Mention> = Vec::with_capacity(sentence.mentions.len());
    let mut mentions = std::mem::take(&mut sentence.mentions);
    mentions.sort_by_key(|m| (m.s, m.t));
    for m in mentions {
        if m.s > m.t || m.t >= len {
            if mode == ParseMode::Strict {
                return Err(XlmkError::InvalidMention {
                    s: m.s,
                    t: m.t,
                    len,
                });
            }
            report.invalid_mentions += 1;
            continue;
        }
        if !entities.contains_key(&m.entity) {
            if mode == ParseMode::Strict {
                return Err(XlmkError::UnresolvedEntityId {
                    id: m.entity.clone(),
                    context: "mention".to_string(),
                });
            }
            report.unresolved_mentions += 1;
            continue;
        }
        if let Some(prev) = kept.last() {
            if m.s <= prev.t {
                if mode == ParseMode::Strict {
                    return Err(XlmkError::InvalidMention {
                        s: m.s,
                        t: m.t,
                        len,
                    });
                }
                // first-wins on overlap
                report.overlapping_mentions += 1;
                continue;
            }
        }
        kept.push(m);
    }
    sentence.mentions = kept;
    Ok(())
}

/// Parse from files on disk.
pub fn parse_dump_files(
    corpus_path: &Path,
    kb_path: &Path,
    mode: ParseMode,
) -> Result<(KnowledgeBase, ParseReport)> {
    let corpus = std::fs::File::open(corpus_path)
        .map_err(|e| XlmkError::io(corpus_path.display().to_string(), e))?;
    let kb = std::fs::File::open(kb_path)
        .map_err(|e| XlmkError::io(kb_path.display().to_string(), e))?;
    parse_dump(
        std::io::BufReader::new(corpus),
        std::io::BufReader::new(kb),
        mode,
    )
}

/// Serialize a KB back into `(corpus.jsonl, kb.jsonl)` strings.
pub(super) fn serialize_kb(kb: &KnowledgeBase) -> (String, String) {
    let mut kb_out = String::new();
    for entity in kb.entities() {
        let rec = KbRecord::Entity {
            id: entity.id.clone(),
            labels: entity.labels.clone(),
            descriptions: entity.descriptions.clone(),
        };
        kb_out.push_str(&serde_json::to_string(&rec).expect("kb record serializes"));
        kb_out.push('\n');
    }
    for relation in kb.relations() {
        let rec = KbRecord::Relation {
            id: relation.id.clone(),
        };
        kb_out.push_str(&serde_json::to_string(&rec).expect("kb record serializes"));
        kb_out.push('\n');
    }
    for t in kb.triplets() {
        let rec = KbRecord::Triplet {
            s: t.subject.clone(),
            r: t.relation.clone(),
            o: t.object.clone(),
        };
        kb_out.push_str(&serde_json::to_string(&rec).expect("kb record serializes"));
        kb_out.push('\n');
    }

    let mut corpus_out = String::new();
    for doc in kb.corpus() {
        corpus_out.push_str(&serde_json::to_string(doc).expect("document serializes"));
        corpus_out.push('\n');
    }
    (corpus_out, kb_out)
}
