//! Vocabulary and training-instance construction.
//!
//! The vocabulary is a frequency-built word table over every corpus,
//! description and label token in the KB, with five reserved specials.
//! Instance builders turn (sentence, mention) pairs, triplets, and raw
//! sentences into the tokenized inputs consumed by the three objectives.
//! All builders are pure functions of their inputs plus the rng state.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XlmkError};
use crate::kb::{
    resolve_description, truncate_description, KnowledgeBase, LanguageCode, Mention, Sentence,
};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Content-token budget for the knowledge tasks (before the [CLS] prefix).
pub const KNOWLEDGE_MAX_TOKENS: usize = 256;
/// Content-token budget for MLM instances.
pub const MLM_MAX_TOKENS: usize = 512;

/// Token table with dense ids; the five specials always occupy ids 0..5.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl Vocab {
    /// Frequency-built vocabulary: all tokens with count >= `min_count`,
    /// ordered by (count desc, token asc) after the specials.
    pub fn build(kb: &KnowledgeBase, min_count: usize) -> Result<Vocab> {
        if kb.corpus().is_empty() && kb.num_entities() == 0 {
            return Err(XlmkError::EmptyCorpus);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in kb.corpus() {
            for sentence in &doc.sentences {
                for tok in &sentence.tokens {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        for entity in kb.entities() {
            for tokens in entity.descriptions.values().chain(entity.labels.values()) {
                for tok in tokens {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(
            ranked
                .into_iter()
                .map(|(t, _)| t.to_string())
                .filter(|t| !is_special(t)),
        );
        Ok(Vocab::from_tokens(tokens))
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, lookup }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const CLS_ID: usize = 2;
    pub const SEP_ID: usize = 3;
    pub const MASK_ID: usize = 4;

    pub fn is_special_id(id: usize) -> bool {
        id < 5
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    /// [CLS]-prefixed, truncated encoding of a description.
    pub fn encode_description(&self, tokens: &[String]) -> Result<Vec<usize>> {
        let truncated = truncate_description(tokens)?;
        let mut ids = Vec::with_capacity(truncated.len() + 1);
        ids.push(Self::CLS_ID);
        ids.extend(truncated.iter().map(|t| self.id_or_unk(t)));
        Ok(ids)
    }
}

fn is_special(tok: &str) -> bool {
    matches!(tok, PAD | UNK | CLS | SEP | MASK)
}

/// How a mention span is masked for MEP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MepMaskMode {
    /// The whole span becomes one [MASK] token.
    #[default]
    Collapse,
    /// Every span token becomes its own [MASK]; the query reads position s.
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MepInstance {
    pub input_ids: Vec<usize>,
    pub query_pos: usize,
    pub query_lang: LanguageCode,
    pub pos_entity: String,
    pub pos_desc_ids: Vec<usize>,
    pub desc_lang: LanguageCode,
    /// Original span tokens, kept for reconstruction checks.
    pub gold_span: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OeInstance {
    pub subject_desc_ids: Vec<usize>,
    pub subj_lang: LanguageCode,
    pub relation_index: usize,
    pub pos_entity: String,
    pub object_desc_ids: Vec<usize>,
    pub obj_lang: LanguageCode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmInstance {
    pub input_ids: Vec<usize>,
    pub masked_positions: Vec<usize>,
    pub gold_ids: Vec<usize>,
}

/// [CLS]-prefixed ids with the mention span masked; returns the query
/// position (the first [MASK]).
pub fn mask_sentence(
    sentence: &Sentence,
    mention: &Mention,
    vocab: &Vocab,
    mode: MepMaskMode,
) -> Result<(Vec<usize>, usize)> {
    let len = sentence.tokens.len();
    if mention.s > mention.t || mention.t >= len {
        return Err(XlmkError::InvalidMention {
            s: mention.s,
            t: mention.t,
            len,
        });
    }
    let mut input_ids = Vec::with_capacity(len + 2);
    input_ids.push(Vocab::CLS_ID);
    for tok in &sentence.tokens[..mention.s] {
        input_ids.push(vocab.id_or_unk(tok));
    }
    let query_pos = input_ids.len();
    match mode {
        MepMaskMode::Collapse => input_ids.push(Vocab::MASK_ID),
        MepMaskMode::PerToken => {
            for _ in mention.s..=mention.t {
                input_ids.push(Vocab::MASK_ID);
            }
        }
    }
    for tok in &sentence.tokens[mention.t + 1..] {
        input_ids.push(vocab.id_or_unk(tok));
    }
    if input_ids.len() > KNOWLEDGE_MAX_TOKENS {
        if query_pos >= KNOWLEDGE_MAX_TOKENS {
            return Err(XlmkError::SequenceTooLong {
                len: query_pos + 1,
                max_len: KNOWLEDGE_MAX_TOKENS,
            });
        }
        input_ids.truncate(KNOWLEDGE_MAX_TOKENS);
    }
    Ok((input_ids, query_pos))
}

/// Build a MEP instance from a mention inside a sentence.
///
/// The span `[s, t]` collapses into a single [MASK] (default mode), [CLS] is
/// prepended, and the positive description is resolved cross-lingually
/// whenever the entity has a description outside the sentence language.
pub fn make_mep_instance(
    sentence: &Sentence,
    mention: &Mention,
    lang: &LanguageCode,
    kb: &KnowledgeBase,
    vocab: &Vocab,
    mode: MepMaskMode,
    rng: &mut impl Rng,
) -> Result<MepInstance> {
    let (input_ids, query_pos) = mask_sentence(sentence, mention, vocab, mode)?;
    let (desc_lang, desc_tokens) = resolve_description(kb, &mention.entity, lang, rng)?;
    let pos_desc_ids = vocab.encode_description(desc_tokens)?;
    Ok(MepInstance {
        input_ids,
        query_pos,
        query_lang: lang.clone(),
        pos_entity: mention.entity.clone(),
        pos_desc_ids,
        desc_lang,
        gold_span: sentence.tokens[mention.s..=mention.t].to_vec(),
    })
}

/// Build an OE instance from a triplet. Subject and object description
/// languages differ whenever the two entities jointly permit it.
pub fn make_oe_instance(
    triplet: &crate::kb::Triplet,
    kb: &KnowledgeBase,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<OeInstance> {
    let subject = kb
        .entity(&triplet.subject)
        .ok_or_else(|| XlmkError::UnresolvedEntityId {
            id: triplet.subject.clone(),
            context: "oe subject".to_string(),
        })?;
    let object = kb
        .entity(&triplet.object)
        .ok_or_else(|| XlmkError::UnresolvedEntityId {
            id: triplet.object.clone(),
            context: "oe object".to_string(),
        })?;
    let relation =
        kb.relation(&triplet.relation)
            .ok_or_else(|| XlmkError::UnresolvedEntityId {
                id: triplet.relation.clone(),
                context: "oe relation".to_string(),
            })?;
    if subject.descriptions.is_empty() {
        return Err(XlmkError::NoDescription(subject.id.clone()));
    }
    if object.descriptions.is_empty() {
        return Err(XlmkError::NoDescription(object.id.clone()));
    }

    let subj_langs: Vec<&LanguageCode> = subject.descriptions.keys().collect();
    let obj_langs: Vec<&LanguageCode> = object.descriptions.keys().collect();
    let mut cross: Vec<(&LanguageCode, &LanguageCode)> = Vec::new();
    for a in &subj_langs {
        for b in &obj_langs {
            if a != b {
                cross.push((a, b));
            }
        }
    }
    let (subj_lang, obj_lang) = if cross.is_empty() {
        (
            subj_langs[rng.gen_range(0..subj_langs.len())].clone(),
            obj_langs[rng.gen_range(0..obj_langs.len())].clone(),
        )
    } else {
        let (a, b) = cross[rng.gen_range(0..cross.len())];
        (a.clone(), b.clone())
    };

    Ok(OeInstance {
        subject_desc_ids: vocab.encode_description(&subject.descriptions[&subj_lang])?,
        subj_lang,
        relation_index: relation.index,
        pos_entity: object.id.clone(),
        object_desc_ids: vocab.encode_description(&object.descriptions[&obj_lang])?,
        obj_lang,
    })
}

/// Build an MLM instance with BERT-style 80/10/10 corruption.
///
/// With `force_mask`, every selected position becomes [MASK] (disables the
/// 80/10/10 split; used by tests and calibration runs).
pub fn make_mlm_instance(
    sentence: &Sentence,
    vocab: &Vocab,
    mask_prob: f64,
    force_mask: bool,
    rng: &mut impl Rng,
) -> Result<MlmInstance> {
    if sentence.tokens.is_empty() {
        return Err(XlmkError::EmptyMask);
    }
    let mut input_ids = Vec::with_capacity(sentence.tokens.len() + 1);
    input_ids.push(Vocab::CLS_ID);
    input_ids.extend(sentence.tokens.iter().map(|t| vocab.id_or_unk(t)));
    input_ids.truncate(MLM_MAX_TOKENS);

    let mut masked_positions = Vec::new();
    let mut gold_ids = Vec::new();
    #[allow(clippy::needless_range_loop)]
    for pos in 1..input_ids.len() {
        let gold = input_ids[pos];
        if Vocab::is_special_id(gold) && gold != Vocab::UNK_ID {
            continue;
        }
        if mask_prob <= 0.0 || !rng.gen_bool(mask_prob.min(1.0)) {
            continue;
        }
        masked_positions.push(pos);
        gold_ids.push(gold);
        if force_mask {
            input_ids[pos] = Vocab::MASK_ID;
            continue;
        }
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            input_ids[pos] = Vocab::MASK_ID;
        } else if roll < 0.9 {
            input_ids[pos] = rng.gen_range(5..vocab.len().max(6));
        }
        // else keep the original token
    }
    Ok(MlmInstance {
        input_ids,
        masked_positions,
        gold_ids,
    })
}
