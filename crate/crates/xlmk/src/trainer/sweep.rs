//! Queue-size sweep: independent runs from identical seeds that differ only
//! in candidate-list capacity, compared on final losses and probe accuracy.

use serde::Serialize;

use super::{worker_pool, TrainData, TrainEnv, TrainSetup, Trainer};
use crate::error::{Result, XlmkError};
use crate::kb::KnowledgeBase;
use crate::probe::{build_xep_tasks, build_xor_tasks, eval_rank, PoolLang, RankOptions};
use crate::text::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub queue_size: usize,
    pub final_l: f64,
    pub final_l_e: f64,
    pub final_l_o: f64,
    pub final_l_mlm: f64,
    pub xep_p1: f64,
    pub xor_p1: f64,
}

/// One training run per queue size, everything else held fixed. Probe
/// accuracies are measured on the full description pool.
pub fn sweep_queue(
    base: &TrainSetup,
    sizes: &[usize],
    kb: &KnowledgeBase,
    vocab: &Vocab,
    workers: usize,
) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() {
        return Err(XlmkError::ConfigInvalid("sweep sizes are empty".into()));
    }
    let pool = worker_pool(workers);
    let (data, holdout) =
        TrainData::with_holdout(kb, base.train.holdout_fraction, base.train.seed);
    let env = TrainEnv {
        kb,
        vocab,
        data: &data,
        pool: &pool,
    };
    let probe_sites = if holdout.is_empty() {
        kb.mention_sites()
    } else {
        holdout
    };

    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut setup = base.clone();
        setup.train.queue_size = size;
        let mut trainer = Trainer::new(setup, "sweep")?;
        let metrics = trainer.run(&env, None)?;
        let last = metrics.last().cloned();

        let langs: Vec<_> = kb
            .entities()
            .flat_map(|e| e.descriptions.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let query_lang = langs.first().cloned().ok_or(XlmkError::EmptyPool)?;
        let pool_lang = langs.get(1).cloned().unwrap_or_else(|| query_lang.clone());

        let xep_tasks = build_xep_tasks(
            kb,
            vocab,
            &probe_sites,
            PoolLang::Fixed(pool_lang.clone()),
            None,
            trainer.setup.mep_mask_mode,
            trainer.setup.train.seed,
        )?;
        let xep = eval_rank(&trainer.params, &xep_tasks, RankOptions::default())?;
        let xor_tasks = build_xor_tasks(
            kb,
            vocab,
            &query_lang,
            &pool_lang,
            None,
            trainer.setup.train.seed,
        )?;
        let xor = eval_rank(&trainer.params, &xor_tasks, RankOptions::default())?;

        rows.push(SweepRow {
            queue_size: size,
            final_l: last.as_ref().map(|m| m.l).unwrap_or(0.0),
            final_l_e: last.as_ref().map(|m| m.l_e).unwrap_or(0.0),
            final_l_o: last.as_ref().map(|m| m.l_o).unwrap_or(0.0),
            final_l_mlm: last.as_ref().map(|m| m.l_mlm).unwrap_or(0.0),
            xep_p1: xep.accuracy,
            xor_p1: xor.accuracy,
        });
    }
    Ok(rows)
}

/// Render rows as a TSV table (header + one line per size).
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("queue_size\tL\tL_e\tL_o\tL_mlm\txep_p1\txor_p1\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\n",
            r.queue_size, r.final_l, r.final_l_e, r.final_l_o, r.final_l_mlm, r.xep_p1, r.xor_p1
        ));
    }
    out
}
