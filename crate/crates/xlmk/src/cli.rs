//! Command-line entry point.
//!
//! Subcommands: build-kb, gen-world, gen-data, train, probe, eval-rank,
//! inspect. Results go to stdout, diagnostics to stderr, and every failure
//! exits non-zero after one machine-parsable `xlmk-error: <kind>` line.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Result, XlmkError};
use crate::kb::{
    generate_synthetic_world, parse_dump_files, validate_kb, KnowledgeBase, LanguageCode,
    ParseMode, WorldConfig,
};
use crate::objectives::TaskInstance;
use crate::probe::{
    build_xep_tasks, build_xor_tasks, eval_cloze, eval_rank, load_cloze_items, PoolLang,
    RankKind, RankOptions,
};
use crate::rng::substream;
use crate::text::{make_mep_instance, make_mlm_instance, make_oe_instance, Vocab};
use crate::trainer::{
    load_checkpoint, peek_checkpoint, sweep_queue, sweep_tsv, worker_pool, TrainData, TrainEnv,
    Trainer,
};

#[derive(Parser)]
#[command(
    name = "xlmk",
    about = "Desk-scale knowledge-grounded cross-lingual pre-training lab",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct KbDirArg {
    /// Directory containing corpus.jsonl and kb.jsonl.
    #[arg(long = "kb")]
    kb: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Parse dump files into a validated knowledge base.
    BuildKb {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Abort on the first malformed or unresolved record.
        #[arg(long)]
        strict: bool,
    },
    /// Generate a synthetic multilingual world.
    GenWorld {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the world config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump training instances as JSONL shards for inspection.
    GenData {
        #[command(flatten)]
        kb: KbDirArg,
        #[arg(long)]
        out: PathBuf,
        /// Instances per task.
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "shard-size", default_value_t = 1000)]
        shard_size: usize,
        /// Optional run config (vocabulary and masking settings).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on a knowledge base.
    Train {
        #[command(flatten)]
        kb: KbDirArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated queue sizes; runs the sweep instead of one run.
        #[arg(long = "sweep-queue")]
        sweep_queue: Option<String>,
        /// Data-pipeline worker threads (0 = one per core).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Overrides the master seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cloze probing of a trained checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloze: PathBuf,
    },
    /// Ranking probes (XEP or XOR) over a description pool.
    EvalRank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kind: String,
        #[command(flatten)]
        kb: KbDirArg,
        #[arg(long = "pool-size")]
        pool_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a KB directory, checkpoint, or metrics log.
    Inspect { path: PathBuf },
}

/// Parse argv and run. Returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout with exit 0, usage errors
            // to stderr with exit 2.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("xlmk-error: {}: {e}", e.kind());
            1
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildKb {
            corpus,
            kb,
            out,
            strict,
        } => build_kb(&corpus, &kb, &out, strict),
        Command::GenWorld { config, out, seed } => gen_world(&config, &out, seed),
        Command::GenData {
            kb,
            out,
            count,
            seed,
            shard_size,
            config,
        } => gen_data(&kb.kb, &out, count, seed, shard_size, config.as_deref()),
        Command::Train {
            kb,
            config,
            out,
            sweep_queue,
            workers,
            seed,
        } => train(&kb.kb, &config, &out, sweep_queue, workers, seed),
        Command::Probe { checkpoint, cloze } => probe(&checkpoint, &cloze),
        Command::EvalRank {
            checkpoint,
            kind,
            kb,
            pool_size,
            seed,
        } => eval_rank_cmd(&checkpoint, &kind, &kb.kb, pool_size, seed),
        Command::Inspect { path } => inspect(&path),
    }
}

fn load_kb_dir(dir: &Path, mode: ParseMode) -> Result<KnowledgeBase> {
    let corpus = dir.join("corpus.jsonl");
    let kb = dir.join("kb.jsonl");
    if !kb.exists() {
        return Err(XlmkError::UnrecognizedArtifact {
            path: dir.display().to_string(),
            detail: "no kb.jsonl in directory".to_string(),
        });
    }
    let (kb, report) = parse_dump_files(&corpus, &kb, mode)?;
    if report.total_defects() > 0 {
        eprintln!("kb: skipped {} defective records", report.total_defects());
    }
    Ok(kb)
}

fn kb_summary(kb: &KnowledgeBase) -> serde_json::Value {
    serde_json::json!({
        "entities": kb.num_entities(),
        "relations": kb.num_relations(),
        "triplets": kb.triplets().len(),
        "documents": kb.corpus().len(),
        "mentions": kb.mention_sites().len(),
    })
}

fn build_kb(corpus: &Path, kb_path: &Path, out: &Path, strict: bool) -> Result<()> {
    let mode = if strict {
        ParseMode::Strict
    } else {
        ParseMode::Lenient
    };
    let (kb, report) = parse_dump_files(corpus, kb_path, mode)?;
    let validation = validate_kb(&kb);
    if !validation.is_empty() {
        for v in &validation.violations {
            eprintln!("violation: {v}");
        }
        if strict {
            return Err(XlmkError::ConfigInvalid(format!(
                "{} invariant violations",
                validation.len()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| XlmkError::io(out.display().to_string(), e))?;
    let (corpus_s, kb_s) = kb.serialize();
    std::fs::write(out.join("corpus.jsonl"), corpus_s)
        .map_err(|e| XlmkError::io("corpus.jsonl", e))?;
    std::fs::write(out.join("kb.jsonl"), kb_s).map_err(|e| XlmkError::io("kb.jsonl", e))?;
    let mut summary = kb_summary(&kb);
    summary["defects_skipped"] = serde_json::json!(report.total_defects());
    println!("{summary}");
    Ok(())
}

fn gen_world(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(config_path).map_err(|e| {
        XlmkError::ConfigInvalid(format!("cannot read {}: {e}", config_path.display()))
    })?;
    let mut config: WorldConfig = serde_json::from_str(&text)
        .map_err(|e| XlmkError::ConfigInvalid(format!("{}: {e}", config_path.display())))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let world = generate_synthetic_world(&config)?;
    world.write_to_dir(out)?;
    let kb = world.parse()?;
    println!("{}", kb_summary(&kb));
    Ok(())
}

fn gen_data(
    kb_dir: &Path,
    out: &Path,
    count: usize,
    seed: u64,
    shard_size: usize,
    config: Option<&Path>,
) -> Result<()> {
    let run_config = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let kb = load_kb_dir(kb_dir, ParseMode::Strict)?;
    let vocab = Vocab::build(&kb, run_config.data.min_count)?;
    let mut rng = substream(seed, "gen-data");

    let mut instances: Vec<TaskInstance> = Vec::with_capacity(count * 3);
    let sites = kb.mention_sites();
    for i in 0..count.min(sites.len() * 4) {
        let site = &sites[i % sites.len()];
        let (sentence, mention) = kb.sentence(site);
        instances.push(TaskInstance::Mep(make_mep_instance(
            sentence,
            mention,
            &site.lang,
            &kb,
            &vocab,
            run_config.data.mep_mask_mode,
            &mut rng,
        )?));
    }
    let triplets = kb.triplets();
    for i in 0..count.min(triplets.len() * 4) {
        instances.push(TaskInstance::Oe(make_oe_instance(
            &triplets[i % triplets.len()],
            &kb,
            &vocab,
            &mut rng,
        )?));
    }
    let sentences: Vec<(usize, usize)> = kb
        .corpus()
        .iter()
        .enumerate()
        .flat_map(|(di, d)| (0..d.sentences.len()).map(move |si| (di, si)))
        .collect();
    for i in 0..count.min(sentences.len() * 4) {
        let (di, si) = sentences[i % sentences.len()];
        instances.push(TaskInstance::Mlm(make_mlm_instance(
            &kb.corpus()[di].sentences[si],
            &vocab,
            run_config.train.mlm_mask_prob,
            false,
            &mut rng,
        )?));
    }

    std::fs::create_dir_all(out).map_err(|e| XlmkError::io(out.display().to_string(), e))?;
    let shard_size = shard_size.max(1);
    let mut written = 0usize;
    for (shard_idx, chunk) in instances.chunks(shard_size).enumerate() {
        let path = out.join(format!("instances-{shard_idx:05}.jsonl"));
        let mut body = String::new();
        for inst in chunk {
            body.push_str(&serde_json::to_string(inst).expect("instance serializes"));
            body.push('\n');
        }
        std::fs::write(&path, body).map_err(|e| XlmkError::io(path.display().to_string(), e))?;
        written += chunk.len();
    }
    println!(
        "{}",
        serde_json::json!({"instances": written, "shards": instances.len().div_ceil(shard_size)})
    );
    Ok(())
}

fn train(
    kb_dir: &Path,
    config_path: &Path,
    out: &Path,
    sweep: Option<String>,
    workers: usize,
    seed: Option<u64>,
) -> Result<()> {
    let mut run_config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        run_config.seed = Some(seed);
    }
    let kb = load_kb_dir(kb_dir, ParseMode::Strict)?;
    let vocab = Vocab::build(&kb, run_config.data.min_count)?;
    let setup = run_config.resolve(&kb, &vocab)?;
    let hash = run_config.hash();

    std::fs::create_dir_all(out).map_err(|e| XlmkError::io(out.display().to_string(), e))?;
    std::fs::write(out.join("config.lock.json"), run_config.lock_json(&setup))
        .map_err(|e| XlmkError::io("config.lock.json", e))?;
    // Canonical copy of the KB the run saw.
    let kb_out = out.join("kb");
    std::fs::create_dir_all(&kb_out).map_err(|e| XlmkError::io(kb_out.display().to_string(), e))?;
    let (corpus_s, kb_s) = kb.serialize();
    std::fs::write(kb_out.join("corpus.jsonl"), corpus_s)
        .map_err(|e| XlmkError::io("kb/corpus.jsonl", e))?;
    std::fs::write(kb_out.join("kb.jsonl"), kb_s).map_err(|e| XlmkError::io("kb/kb.jsonl", e))?;

    if let Some(sizes_csv) = sweep {
        let sizes: Vec<usize> = sizes_csv
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| XlmkError::ConfigInvalid(format!("bad sweep size {s:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        let rows = sweep_queue(&setup, &sizes, &kb, &vocab, workers)?;
        let tsv = sweep_tsv(&rows);
        std::fs::write(out.join("sweep.tsv"), &tsv).map_err(|e| XlmkError::io("sweep.tsv", e))?;
        print!("{tsv}");
        return Ok(());
    }

    let relations: Vec<String> = kb.relations().map(|r| r.id.clone()).collect();
    let mut trainer = Trainer::new(setup, hash)?;
    trainer.attach_artifacts(vocab.clone(), relations);
    let (data, holdout) = TrainData::with_holdout(
        &kb,
        trainer.setup.train.holdout_fraction,
        trainer.setup.train.seed,
    );
    eprintln!(
        "training: {} mention sites ({} held out), {} triplets, {} sentences",
        data.mention_sites.len(),
        holdout.len(),
        data.triplet_indices.len(),
        data.sentences.len()
    );
    let pool = worker_pool(workers);
    let env = TrainEnv {
        kb: &kb,
        vocab: &vocab,
        data: &data,
        pool: &pool,
    };
    let metrics = trainer.run(&env, Some(out))?;
    if let Some(last) = metrics.last() {
        println!(
            "{}",
            serde_json::json!({
                "steps": metrics.len(),
                "final": last,
                "checkpoint": format!("checkpoints/checkpoint-{}.xlmk", trainer.step),
            })
        );
    } else {
        println!(
            "{}",
            serde_json::json!({"steps": 0, "checkpoint": "checkpoints/checkpoint-0.xlmk"})
        );
    }
    Ok(())
}

fn probe(checkpoint: &Path, cloze: &Path) -> Result<()> {
    let loaded = load_checkpoint(checkpoint)?;
    let file =
        std::fs::File::open(cloze).map_err(|e| XlmkError::io(cloze.display().to_string(), e))?;
    let (items, dropped) = load_cloze_items(std::io::BufReader::new(file), &loaded.vocab)?;
    if dropped > 0 {
        eprintln!("probe: dropped {dropped} unusable items");
    }
    let report = eval_cloze(&loaded.trainer.params, &items)?;
    println!("relation\tfacts\tp_at_1");
    for (relation, n, p) in &report.per_relation {
        println!("{relation}\t{n}\t{p:.4}");
    }
    println!("Total\t{}\t{:.4}", report.n_items, report.p_at_1);
    Ok(())
}

fn kb_languages(kb: &KnowledgeBase) -> Vec<LanguageCode> {
    kb.entities()
        .flat_map(|e| e.descriptions.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn eval_rank_cmd(
    checkpoint: &Path,
    kind: &str,
    kb_dir: &Path,
    pool_size: Option<usize>,
    seed: u64,
) -> Result<()> {
    let kind: RankKind = kind.parse()?;
    let loaded = load_checkpoint(checkpoint)?;
    let kb = load_kb_dir(kb_dir, ParseMode::Strict)?;
    let langs = kb_languages(&kb);
    let lang_a = langs.first().cloned().ok_or(XlmkError::EmptyPool)?;
    let lang_b = langs.get(1).cloned().unwrap_or_else(|| lang_a.clone());

    let tasks = match kind {
        RankKind::Xep => build_xep_tasks(
            &kb,
            &loaded.vocab,
            &kb.mention_sites(),
            PoolLang::Fixed(lang_b),
            pool_size,
            loaded.trainer.setup.mep_mask_mode,
            seed,
        )?,
        RankKind::Xor => build_xor_tasks(
            &kb,
            &loaded.vocab,
            &lang_a,
            &lang_b,
            pool_size,
            seed,
        )?,
    };
    let report = eval_rank(&loaded.trainer.params, &tasks, RankOptions::default())?;
    println!("kind\ttasks\taccuracy");
    println!("{kind}\t{}\t{:.4}", report.n_tasks, report.accuracy);
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        let kb = load_kb_dir(path, ParseMode::Lenient)?;
        let validation = validate_kb(&kb);
        let mut summary = kb_summary(&kb);
        summary["violations"] = serde_json::json!(validation.len());
        println!("{summary}");
        return Ok(());
    }
    let bytes_head = {
        let mut f = std::fs::File::open(path)
            .map_err(|e| XlmkError::io(path.display().to_string(), e))?;
        let mut head = [0u8; 4];
        use std::io::Read;
        let n = f.read(&mut head).map_err(|e| XlmkError::io("inspect", e))?;
        head[..n].to_vec()
    };
    if bytes_head == b"XLMK" {
        let header = peek_checkpoint(path)?;
        println!("{header}");
        return Ok(());
    }
    if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        let file = std::fs::File::open(path)
            .map_err(|e| XlmkError::io(path.display().to_string(), e))?;
        let mut count = 0usize;
        let mut last = None;
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| XlmkError::io("inspect", e))?;
            if line.trim().is_empty() {
                continue;
            }
            count += 1;
            last = Some(line);
        }
        let tail: serde_json::Value = match &last {
            Some(line) => serde_json::from_str(line).unwrap_or(serde_json::Value::Null),
            None => serde_json::Value::Null,
        };
        println!("{}", serde_json::json!({"lines": count, "last": tail}));
        return Ok(());
    }
    Err(XlmkError::UnrecognizedArtifact {
        path: path.display().to_string(),
        detail: "not a KB directory, checkpoint, or JSONL log".to_string(),
    })
}

// Used by gen_data's deterministic sampling.
#[allow(dead_code)]
fn noop_rng_guard(rng: &mut impl Rng) -> u64 {
    rng.gen()
}
