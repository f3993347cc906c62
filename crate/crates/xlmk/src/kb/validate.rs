//! KB invariant checking.
//!
//! Reports every violation instead of stopping at the first; an empty report
//! is the definition of a well-formed KB.

use std::collections::HashSet;

use super::{KnowledgeBase, MAX_DESCRIPTION_TOKENS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DanglingMentionEntity { doc: String, entity: String },
    DanglingTripletId { triplet: usize, id: String },
    MentionOutOfBounds { doc: String, s: usize, t: usize, len: usize },
    OverlappingMentions { doc: String, sentence: usize },
    UnsortedMentions { doc: String, sentence: usize },
    OverlongDescription { entity: String, lang: String, len: usize },
    MissingDescription { entity: String },
    NonDenseRelationIndex { relation: String, index: usize, expected: usize },
    EmptySentence { doc: String, sentence: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        use Violation::*;
        match self {
            DanglingMentionEntity { doc, entity } => {
                write!(f, "doc {doc}: mention references unknown entity {entity}")
            }
            DanglingTripletId { triplet, id } => {
                write!(f, "triplet #{triplet}: unknown id {id}")
            }
            MentionOutOfBounds { doc, s, t, len } => {
                write!(f, "doc {doc}: mention [{s}, {t}] outside sentence of length {len}")
            }
            OverlappingMentions { doc, sentence } => {
                write!(f, "doc {doc} sentence {sentence}: overlapping mentions")
            }
            UnsortedMentions { doc, sentence } => {
                write!(f, "doc {doc} sentence {sentence}: mentions not sorted by start")
            }
            OverlongDescription { entity, lang, len } => {
                write!(f, "entity {entity} [{lang}]: description of {len} tokens exceeds {MAX_DESCRIPTION_TOKENS}")
            }
            MissingDescription { entity } => {
                write!(f, "entity {entity} has no description")
            }
            NonDenseRelationIndex { relation, index, expected } => {
                write!(f, "relation {relation}: index {index}, expected {expected}")
            }
            EmptySentence { doc, sentence } => {
                write!(f, "doc {doc} sentence {sentence}: empty token list")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            writeln!(f, "ok: all invariants hold")
        } else {
            for v in &self.violations {
                writeln!(f, "violation: {v}")?;
            }
            Ok(())
        }
    }
}

/// Check referential integrity, mention ordering, description lengths and
/// relation index density.
pub fn validate_kb(kb: &KnowledgeBase) -> ValidationReport {
    let mut report = ValidationReport::default();
    let ids: HashSet<&str> = kb.entities().map(|e| e.id.as_str()).collect();

    for entity in kb.entities() {
        if entity.descriptions.is_empty() {
            report.violations.push(Violation::MissingDescription {
                entity: entity.id.clone(),
            });
        }
        for (lang, tokens) in &entity.descriptions {
            if tokens.len() > MAX_DESCRIPTION_TOKENS {
                report.violations.push(Violation::OverlongDescription {
                    entity: entity.id.clone(),
                    lang: lang.as_str().to_string(),
                    len: tokens.len(),
                });
            }
        }
    }

    for (expected, relation) in kb.relations().enumerate() {
        if relation.index != expected {
            report.violations.push(Violation::NonDenseRelationIndex {
                relation: relation.id.clone(),
                index: relation.index,
                expected,
            });
        }
    }

    for (ti, t) in kb.triplets().iter().enumerate() {
        for id in [&t.subject, &t.object] {
            if !ids.contains(id.as_str()) {
                report.violations.push(Violation::DanglingTripletId {
                    triplet: ti,
                    id: id.clone(),
                });
            }
        }
        if kb.relation(&t.relation).is_none() {
            report.violations.push(Violation::DanglingTripletId {
                triplet: ti,
                id: t.relation.clone(),
            });
        }
    }

    for doc in kb.corpus() {
        for (si, sentence) in doc.sentences.iter().enumerate() {
            if sentence.tokens.is_empty() {
                report.violations.push(Violation::EmptySentence {
                    doc: doc.id.clone(),
                    sentence: si,
                });
                continue;
            }
            let len = sentence.tokens.len();
            let mut prev_end: Option<usize> = None;
            let mut prev_start: Option<usize> = None;
            for m in &sentence.mentions {
                if m.s > m.t || m.t >= len {
                    report.violations.push(Violation::MentionOutOfBounds {
                        doc: doc.id.clone(),
                        s: m.s,
                        t: m.t,
                        len,
                    });
                    continue;
                }
                if let Some(ps) = prev_start {
                    if m.s < ps {
                        report.violations.push(Violation::UnsortedMentions {
                            doc: doc.id.clone(),
                            sentence: si,
                        });
                    }
                }
                if let Some(pe) = prev_end {
                    if m.s <= pe {
                        report.violations.push(Violation::OverlappingMentions {
                            doc: doc.id.clone(),
                            sentence: si,
                        });
                    }
                }
                if !ids.contains(m.entity.as_str()) {
                    report.violations.push(Violation::DanglingMentionEntity {
                        doc: doc.id.clone(),
                        entity: m.entity.clone(),
                    });
                }
                prev_start = Some(m.s);
                prev_end = Some(m.t);
            }
        }
    }

    report
}
