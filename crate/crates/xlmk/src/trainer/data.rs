//! Training pools and deterministic batch assembly.
//!
//! Each task draws from its own pool (mention sites, triplets, sentences)
//! through an epoch cursor. The visit order within an epoch is a seeded
//! permutation derived from (seed, pool name, epoch), so any position in the
//! stream is reconstructible from the cursor alone — resume never needs to
//! replay data.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, XlmkError};
use crate::kb::{KnowledgeBase, MentionSite};
use crate::objectives::TaskInstance;
use crate::rng::substream;
use crate::text::{
    make_mep_instance, make_mlm_instance, make_oe_instance, MepMaskMode, Vocab,
};

/// Index pools for the three tasks. MEP mentions may be split so a held-out
/// subset never enters training.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub mention_sites: Vec<MentionSite>,
    pub triplet_indices: Vec<usize>,
    /// (doc index, sentence index) pairs for MLM.
    pub sentences: Vec<(usize, usize)>,
}

impl TrainData {
    /// All mentions/triplets/sentences of the KB, no holdout.
    pub fn full(kb: &KnowledgeBase) -> TrainData {
        let (data, _) = TrainData::with_holdout(kb, 0.0, 0);
        data
    }

    /// Split mention sites into train/held-out with a seeded shuffle.
    /// Triplets and sentences always train in full.
    pub fn with_holdout(
        kb: &KnowledgeBase,
        holdout_fraction: f64,
        seed: u64,
    ) -> (TrainData, Vec<MentionSite>) {
        let mut sites = kb.mention_sites();
        let mut rng = substream(seed, "data.holdout");
        sites.shuffle(&mut rng);
        let n_holdout = ((sites.len() as f64) * holdout_fraction.clamp(0.0, 1.0)) as usize;
        let holdout = sites.split_off(sites.len() - n_holdout);
        let sentences = kb
            .corpus()
            .iter()
            .enumerate()
            .flat_map(|(di, doc)| (0..doc.sentences.len()).map(move |si| (di, si)))
            .collect();
        (
            TrainData {
                mention_sites: sites,
                triplet_indices: (0..kb.triplets().len()).collect(),
                sentences,
            },
            holdout,
        )
    }
}

/// Position of one pool in its shuffled epoch stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Cursor {
    pub epoch: u64,
    pub pos: usize,
}

/// Cursors for the three pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DataState {
    pub mep: Cursor,
    pub oe: Cursor,
    pub mlm: Cursor,
}

/// The epoch-`epoch` visit order of a pool of `len` items.
fn epoch_order(seed: u64, pool: &str, epoch: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = substream(seed, &format!("data.order.{pool}.{epoch}"));
    order.shuffle(&mut rng);
    order
}

/// Draw the next `n` indices from a pool, advancing the cursor and
/// reshuffling at epoch boundaries. `strict` errors instead of wrapping.
fn draw(
    seed: u64,
    pool: &'static str,
    cursor: &mut Cursor,
    len: usize,
    n: usize,
    strict: bool,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if len == 0 {
        return Err(XlmkError::DataExhausted(pool));
    }
    let mut order = epoch_order(seed, pool, cursor.epoch, len);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        if cursor.pos >= len {
            if strict {
                return Err(XlmkError::DataExhausted(pool));
            }
            cursor.epoch += 1;
            cursor.pos = 0;
            order = epoch_order(seed, pool, cursor.epoch, len);
        }
        out.push(order[cursor.pos]);
        cursor.pos += 1;
    }
    Ok(out)
}

/// One instance plus the seed that drives its dropout masks.
pub struct BatchItem {
    pub instance: TaskInstance,
    pub dropout_seed: u64,
}

pub struct AssembledBatch {
    pub items: Vec<BatchItem>,
    pub mep_count: usize,
    pub oe_count: usize,
    pub mlm_count: usize,
}

pub struct AssemblyContext<'a> {
    pub kb: &'a KnowledgeBase,
    pub vocab: &'a Vocab,
    pub data: &'a TrainData,
    pub seed: u64,
    pub mep_mask_mode: MepMaskMode,
    pub mlm_mask_prob: f64,
    pub strict: bool,
}

/// Assemble one step's batch: MEP then OE then MLM, in draw order. All
/// randomness (description language, corruption, dropout) flows through
/// `data_rng`, which the caller persists across steps.
pub fn assemble_batch(
    ctx: &AssemblyContext<'_>,
    counts: (usize, usize, usize),
    state: &mut DataState,
    data_rng: &mut ChaCha8Rng,
) -> Result<AssembledBatch> {
    let (n_mep, n_oe, n_mlm) = counts;
    let mut items = Vec::with_capacity(n_mep + n_oe + n_mlm);

    let mep_idx = draw(
        ctx.seed,
        "mep",
        &mut state.mep,
        ctx.data.mention_sites.len(),
        n_mep,
        ctx.strict,
    )?;
    for i in mep_idx {
        let site = &ctx.data.mention_sites[i];
        let (sentence, mention) = ctx.kb.sentence(site);
        let mut inst_rng = ChaCha8Rng::seed_from_u64(data_rng.gen());
        let inst = make_mep_instance(
            sentence,
            mention,
            &site.lang,
            ctx.kb,
            ctx.vocab,
            ctx.mep_mask_mode,
            &mut inst_rng,
        )?;
        items.push(BatchItem {
            instance: TaskInstance::Mep(inst),
            dropout_seed: data_rng.gen(),
        });
    }

    let oe_idx = draw(
        ctx.seed,
        "oe",
        &mut state.oe,
        ctx.data.triplet_indices.len(),
        n_oe,
        ctx.strict,
    )?;
    for i in oe_idx {
        let triplet = &ctx.kb.triplets()[ctx.data.triplet_indices[i]];
        let mut inst_rng = ChaCha8Rng::seed_from_u64(data_rng.gen());
        let inst = make_oe_instance(triplet, ctx.kb, ctx.vocab, &mut inst_rng)?;
        items.push(BatchItem {
            instance: TaskInstance::Oe(inst),
            dropout_seed: data_rng.gen(),
        });
    }

    let mlm_idx = draw(
        ctx.seed,
        "mlm",
        &mut state.mlm,
        ctx.data.sentences.len(),
        n_mlm,
        ctx.strict,
    )?;
    for i in mlm_idx {
        let (di, si) = ctx.data.sentences[i];
        let sentence = &ctx.kb.corpus()[di].sentences[si];
        let mut inst_rng = ChaCha8Rng::seed_from_u64(data_rng.gen());
        let inst = make_mlm_instance(sentence, ctx.vocab, ctx.mlm_mask_prob, false, &mut inst_rng)?;
        items.push(BatchItem {
            instance: TaskInstance::Mlm(inst),
            dropout_seed: data_rng.gen(),
        });
    }

    Ok(AssembledBatch {
        items,
        mep_count: n_mep,
        oe_count: n_oe,
        mlm_count: n_mlm,
    })
}
