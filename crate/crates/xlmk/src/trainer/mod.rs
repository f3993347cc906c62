//! The optimization loop: batch assembly, joint loss, Adam with warmup,
//! queue maintenance, checkpointing, and the queue-size sweep.
//!
//! Determinism contract: (config, seed, data) fully determine the metrics
//! log and the final checkpoint, independent of the worker count. Batch
//! items are evaluated in parallel but reduced in item order, and every
//! random draw (data order, instance construction, dropout) comes from
//! named streams that are snapshotted into checkpoints.

mod adam;
mod checkpoint;
mod data;
mod sweep;

pub use adam::{clip_global_norm, lr_schedule, AdamState};
pub use checkpoint::{load_checkpoint, peek_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use data::{assemble_batch, AssembledBatch, AssemblyContext, BatchItem, Cursor, DataState, TrainData};
pub use sweep::{sweep_queue, sweep_tsv, SweepRow};

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{init_parameters, EncoderConfig, ForwardMode, Gradients, Parameters};
use crate::error::{Result, XlmkError};
use crate::kb::KnowledgeBase;
use crate::objectives::{compute_instance, is_skippable, Component, ObjectiveConfig, TaskQueues};
use crate::queue::CandidateQueue;
use crate::rng::substream;
use crate::text::{MepMaskMode, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskMix {
    /// Every step sums all three losses over separate mini-batches.
    #[default]
    Sum,
    /// Steps alternate over the active tasks.
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub mep_batch: usize,
    pub oe_batch: usize,
    pub mlm_batch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Candidate-queue capacity N (one queue per contrastive task).
    pub queue_size: usize,
    pub seed: u64,
    pub task_mix: TaskMix,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub mlm_mask_prob: f64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    /// Fraction of mention sites held out of training.
    pub holdout_fraction: f64,
    /// Error on pool exhaustion instead of cycling.
    pub strict_data: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-5,
            warmup_steps: 100,
            total_steps: 1000,
            mep_batch: 8,
            oe_batch: 8,
            mlm_batch: 4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            queue_size: 1024,
            seed: 0,
            task_mix: TaskMix::Sum,
            checkpoint_interval: 0,
            mlm_mask_prob: 0.15,
            grad_clip: 1.0,
            holdout_fraction: 0.0,
            strict_data: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(XlmkError::ConfigInvalid(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.mep_batch == 0 && self.oe_batch == 0 && self.mlm_batch == 0 {
            return Err(XlmkError::ConfigInvalid(
                "all task batch sizes are zero".to_string(),
            ));
        }
        if self.queue_size == 0 {
            return Err(XlmkError::ConfigInvalid("queue_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mlm_mask_prob) {
            return Err(XlmkError::ConfigInvalid(format!(
                "mlm_mask_prob {} outside [0, 1]",
                self.mlm_mask_prob
            )));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(XlmkError::ConfigInvalid(format!(
                "holdout_fraction {} outside [0, 1)",
                self.holdout_fraction
            )));
        }
        if self.peak_lr <= 0.0 {
            return Err(XlmkError::ConfigInvalid("peak_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a training run is parameterized by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub objectives: ObjectiveConfig,
    #[serde(default)]
    pub mep_mask_mode: MepMaskMode,
}

/// One metrics line, serialized verbatim into metrics.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_mlm")]
    pub l_mlm: f64,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    #[serde(rename = "L_o")]
    pub l_o: f64,
    pub lr: f64,
    pub skipped: usize,
}

/// Shared, immutable inputs for stepping.
pub struct TrainEnv<'a> {
    pub kb: &'a KnowledgeBase,
    pub vocab: &'a Vocab,
    pub data: &'a TrainData,
    pub pool: &'a rayon::ThreadPool,
}

/// Mutable training state: parameters, moments, queues, rng streams, step.
pub struct Trainer {
    pub params: Parameters<f32>,
    pub adam: AdamState<f32>,
    pub mep_queue: CandidateQueue<f32>,
    pub oe_queue: CandidateQueue<f32>,
    pub step: u64,
    pub setup: TrainSetup,
    pub data_state: DataState,
    pub config_hash: String,
    data_rng: ChaCha8Rng,
    /// Vocab tokens and relation ids, persisted into checkpoints so probes
    /// can interpret the model without the original KB.
    artifacts: Option<(Vocab, Vec<String>)>,
}

impl Trainer {
    pub fn new(setup: TrainSetup, config_hash: impl Into<String>) -> Result<Trainer> {
        setup.train.validate()?;
        let params: Parameters<f32> = init_parameters(&setup.encoder)?;
        let adam = AdamState::new(&params);
        let d_w = setup.encoder.d_w;
        let n = setup.train.queue_size;
        let mep_queue = CandidateQueue::init_random(
            n,
            d_w,
            &mut substream(setup.train.seed, "queue.mep"),
        )?;
        let oe_queue = CandidateQueue::init_random(
            n,
            d_w,
            &mut substream(setup.train.seed, "queue.oe"),
        )?;
        let data_rng = substream(setup.train.seed, "data");
        Ok(Trainer {
            params,
            adam,
            mep_queue,
            oe_queue,
            step: 0,
            setup,
            data_state: DataState::default(),
            config_hash: config_hash.into(),
            data_rng,
            artifacts: None,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        params: Parameters<f32>,
        adam: AdamState<f32>,
        mep_queue: CandidateQueue<f32>,
        oe_queue: CandidateQueue<f32>,
        step: u64,
        setup: TrainSetup,
        data_state: DataState,
        config_hash: String,
        data_rng: ChaCha8Rng,
    ) -> Trainer {
        Trainer {
            params,
            adam,
            mep_queue,
            oe_queue,
            step,
            setup,
            data_state,
            config_hash,
            data_rng,
            artifacts: None,
        }
    }

    pub(crate) fn data_rng(&self) -> &ChaCha8Rng {
        &self.data_rng
    }

    /// Attach the vocab and relation table needed to checkpoint this run.
    pub fn attach_artifacts(&mut self, vocab: Vocab, relations: Vec<String>) {
        self.artifacts = Some((vocab, relations));
    }

    pub fn artifacts(&self) -> Option<(&Vocab, &[String])> {
        self.artifacts.as_ref().map(|(v, r)| (v, r.as_slice()))
    }

    /// Write a checkpoint of the current state.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self, path)
    }

    /// Batch sizes for this step under the configured task mix.
    fn step_counts(&self) -> (usize, usize, usize) {
        let t = &self.setup.train;
        match t.task_mix {
            TaskMix::Sum => (t.mep_batch, t.oe_batch, t.mlm_batch),
            TaskMix::RoundRobin => {
                let mut active: Vec<Component> = Vec::new();
                if t.mep_batch > 0 {
                    active.push(Component::E);
                }
                if t.oe_batch > 0 {
                    active.push(Component::O);
                }
                if t.mlm_batch > 0 {
                    active.push(Component::Mlm);
                }
                let pick = active[(self.step as usize) % active.len()];
                match pick {
                    Component::E => (t.mep_batch, 0, 0),
                    Component::O => (0, t.oe_batch, 0),
                    Component::Mlm => (0, 0, t.mlm_batch),
                    Component::Joint => unreachable!(),
                }
            }
        }
    }

    /// One optimization step: draw batches, joint loss, backward, Adam,
    /// then enqueue this batch's detached positives.
    pub fn train_step(&mut self, env: &TrainEnv<'_>) -> Result<StepMetrics> {
        let counts = self.step_counts();
        let ctx = AssemblyContext {
            kb: env.kb,
            vocab: env.vocab,
            data: env.data,
            seed: self.setup.train.seed,
            mep_mask_mode: self.setup.mep_mask_mode,
            mlm_mask_prob: self.setup.train.mlm_mask_prob,
            strict: self.setup.train.strict_data,
        };
        let batch = assemble_batch(&ctx, counts, &mut self.data_state, &mut self.data_rng)?;
        let lr = lr_schedule(self.step, &self.setup.train);

        let ocfg = &self.setup.objectives;
        let queues = TaskQueues {
            mep: &self.mep_queue,
            oe: &self.oe_queue,
        };

        // Count computable items per task first so each item's gradient seed
        // is its exact share of the batch mean.
        let mut skipped = 0usize;
        let mut computable: Vec<&BatchItem> = Vec::with_capacity(batch.items.len());
        let (mut n_mep, mut n_oe, mut n_mlm) = (0usize, 0usize, 0usize);
        for item in &batch.items {
            if is_skippable(&item.instance, queues, ocfg) {
                skipped += 1;
                continue;
            }
            match item.instance.component() {
                Component::E => n_mep += 1,
                Component::O => n_oe += 1,
                Component::Mlm => n_mlm += 1,
                Component::Joint => {}
            }
            computable.push(item);
        }

        let weights = ocfg.loss_weights;
        let seed_for = |c: Component| -> f32 {
            match c {
                Component::E => (weights.0 / n_mep.max(1) as f64) as f32,
                Component::O => (weights.1 / n_oe.max(1) as f64) as f32,
                Component::Mlm => (weights.2 / n_mlm.max(1) as f64) as f32,
                Component::Joint => 1.0,
            }
        };

        let params = &self.params;
        let dropout_rate = self.setup.encoder.dropout_rate;
        let outcomes: Vec<Result<crate::objectives::InstanceOutcome<f32>>> = env.pool.install(|| {
            use rayon::prelude::*;
            computable
                .par_iter()
                .map(|item| {
                    let mode = ForwardMode::train(
                        dropout_rate,
                        ChaCha8Rng::seed_from_u64(item.dropout_seed),
                    );
                    compute_instance(
                        params,
                        &item.instance,
                        queues,
                        ocfg,
                        mode,
                        Some(seed_for(item.instance.component())),
                    )
                })
                .collect()
        });

        // Ordered reduction keeps f32 sums bitwise stable across worker counts.
        let mut grads: Gradients<f32> = Gradients::empty();
        let mut sums = [0.0f64; 3];
        let mut enqueues: Vec<(Component, ndarray::Array1<f32>, String)> = Vec::new();
        for outcome in outcomes {
            let outcome = outcome?;
            let idx = match outcome.component {
                Component::E => 0,
                Component::O => 1,
                Component::Mlm => 2,
                Component::Joint => unreachable!(),
            };
            sums[idx] += outcome.loss as f64;
            if let Some(g) = &outcome.grads {
                grads.accumulate(g);
            }
            if let Some((z, entity)) = outcome.enqueue {
                enqueues.push((outcome.component, z, entity));
            }
        }

        let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
        let l_e = mean(sums[0], n_mep);
        let l_o = mean(sums[1], n_oe);
        let l_mlm = mean(sums[2], n_mlm);
        let l = weights.0 * l_e + weights.1 * l_o + weights.2 * l_mlm;

        let mut grads = grads.materialize(&self.params);
        clip_global_norm(&mut grads, self.setup.train.grad_clip);
        match self.adam.step(&mut self.params, &grads, lr, &self.setup.train) {
            Ok(()) => {
                // Queue updates happen only after the optimizer step, so a
                // step never sees its own positives as negatives.
                for (component, z, entity) in enqueues {
                    match component {
                        Component::E => self.mep_queue.enqueue(z, Some(entity))?,
                        Component::O => self.oe_queue.enqueue(z, Some(entity))?,
                        _ => {}
                    }
                }
            }
            Err(XlmkError::NonFiniteGradient(name)) => {
                // Abort the update: parameters, moments and queues stay put.
                eprintln!(
                    "step {}: non-finite gradient in {name}; update skipped",
                    self.step
                );
            }
            Err(e) => return Err(e),
        }

        let metrics = StepMetrics {
            step: self.step,
            l,
            l_mlm,
            l_e,
            l_o,
            lr,
            skipped,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Run to `total_steps`, streaming metrics and periodic checkpoints into
    /// `out_dir` when given. Returns every metrics line.
    pub fn run(
        &mut self,
        env: &TrainEnv<'_>,
        out_dir: Option<&Path>,
    ) -> Result<Vec<StepMetrics>> {
        let mut lines = Vec::new();
        let mut metrics_file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)
                    .map_err(|e| XlmkError::io(dir.display().to_string(), e))?;
                let path = dir.join("metrics.jsonl");
                Some(
                    std::fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .map_err(|e| XlmkError::io(path.display().to_string(), e))?,
                )
            }
            None => None,
        };
        let checkpoint_dir = match out_dir {
            Some(dir) => {
                let ck = dir.join("checkpoints");
                std::fs::create_dir_all(&ck)
                    .map_err(|e| XlmkError::io(ck.display().to_string(), e))?;
                Some(ck)
            }
            None => None,
        };
        let interval = self.setup.train.checkpoint_interval;
        while self.step < self.setup.train.total_steps {
            let metrics = self.train_step(env)?;
            if let Some(f) = metrics_file.as_mut() {
                let line = serde_json::to_string(&metrics).expect("metrics serialize");
                writeln!(f, "{line}").map_err(|e| XlmkError::io("metrics.jsonl", e))?;
            }
            lines.push(metrics);
            if interval > 0 && self.step.is_multiple_of(interval) && self.step < self.setup.train.total_steps
            {
                if let Some(dir) = &checkpoint_dir {
                    save_checkpoint(self, &dir.join(format!("checkpoint-{}.xlmk", self.step)))?;
                }
            }
        }
        if let Some(dir) = &checkpoint_dir {
            save_checkpoint(self, &dir.join(format!("checkpoint-{}.xlmk", self.step)))?;
        }
        Ok(lines)
    }
}

use rand_chacha::rand_core::SeedableRng;

/// Build a rayon pool with `workers` threads (0 = one per core).
pub fn worker_pool(workers: usize) -> rayon::ThreadPool {
    let mut b = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        b = b.num_threads(workers);
    }
    b.build().expect("thread pool")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{generate_synthetic_world, WorldConfig};

    pub(crate) fn tiny_setup(kb: &KnowledgeBase, vocab: &Vocab, steps: u64) -> TrainSetup {
        TrainSetup {
            encoder: EncoderConfig {
                d_w: 16,
                d_p: 8,
                n_layers: 1,
                n_heads: 2,
                max_len: 257,
                dropout_rate: 0.1,
                activation: "gelu".into(),
                vocab_size: vocab.len(),
                n_relations: kb.num_relations(),
                seed: 5,
            },
            train: TrainConfig {
                peak_lr: 1e-3,
                warmup_steps: steps.min(5),
                total_steps: steps,
                mep_batch: 3,
                oe_batch: 3,
                mlm_batch: 2,
                queue_size: 16,
                seed: 9,
                ..TrainConfig::default()
            },
            objectives: ObjectiveConfig::default(),
            mep_mask_mode: MepMaskMode::Collapse,
        }
    }

    pub(crate) fn tiny_world() -> KnowledgeBase {
        generate_synthetic_world(&WorldConfig {
            num_entities: 10,
            num_relations: 2,
            num_languages: 2,
            vocab_per_lang: 30,
            docs: 4,
            mentions_per_doc: 3,
            triplets: 12,
            seed: 2,
            fact_sentence_fraction: 0.25,
        })
        .unwrap()
        .parse()
        .unwrap()
    }

    #[test]
    fn config_validation_catches_bad_setups() {
        let c = TrainConfig {
            warmup_steps: 10,
            total_steps: 5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            mep_batch: 0,
            oe_batch: 0,
            mlm_batch: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn train_step_updates_queues_with_batch_positives_in_order() {
        let kb = tiny_world();
        let vocab = Vocab::build(&kb, 1).unwrap();
        let setup = tiny_setup(&kb, &vocab, 4);
        let mut trainer = Trainer::new(setup, "testhash").unwrap();
        let data = TrainData::full(&kb);
        let pool = worker_pool(2);
        let env = TrainEnv {
            kb: &kb,
            vocab: &vocab,
            data: &data,
            pool: &pool,
        };
        let metrics = trainer.train_step(&env).unwrap();
        assert_eq!(metrics.step, 0);
        assert_eq!(metrics.lr, 0.0, "warmup starts at zero");
        assert!(metrics.l.is_finite());
        assert!(metrics.l_e > 0.0 && metrics.l_o > 0.0 && metrics.l_mlm > 0.0);

        // The newest MEP-queue entries are exactly this batch's positives.
        let tags: Vec<_> = trainer
            .mep_queue
            .entries()
            .filter_map(|(_, t)| t.clone())
            .collect();
        assert_eq!(tags.len(), 3, "three MEP positives enqueued");
        let oe_tags: Vec<_> = trainer
            .oe_queue
            .entries()
            .filter_map(|(_, t)| t.clone())
            .collect();
        assert_eq!(oe_tags.len(), 3);
    }

    #[test]
    fn identical_runs_produce_identical_metrics() {
        let kb = tiny_world();
        let vocab = Vocab::build(&kb, 1).unwrap();
        let data = TrainData::full(&kb);
        let run = |workers: usize| {
            let mut trainer =
                Trainer::new(tiny_setup(&kb, &vocab, 6), "testhash").unwrap();
            let pool = worker_pool(workers);
            let env = TrainEnv {
                kb: &kb,
                vocab: &vocab,
                data: &data,
                pool: &pool,
            };
            let metrics = trainer.run(&env, None).unwrap();
            (metrics, trainer.params)
        };
        let (m1, p1) = run(1);
        let (m4, p4) = run(4);
        assert_eq!(m1, m4, "metrics identical across worker counts");
        assert_eq!(p1, p4, "parameters identical across worker counts");
    }

    #[test]
    fn losses_stay_finite_over_a_short_run() {
        let kb = tiny_world();
        let vocab = Vocab::build(&kb, 1).unwrap();
        let data = TrainData::full(&kb);
        let mut trainer = Trainer::new(tiny_setup(&kb, &vocab, 30), "testhash").unwrap();
        let pool = worker_pool(2);
        let env = TrainEnv {
            kb: &kb,
            vocab: &vocab,
            data: &data,
            pool: &pool,
        };
        let metrics = trainer.run(&env, None).unwrap();
        assert_eq!(metrics.len(), 30);
        for m in &metrics {
            assert!(m.l.is_finite());
        }
        assert!(trainer.params.all_finite());
    }

    #[test]
    fn round_robin_alternates_tasks() {
        let kb = tiny_world();
        let vocab = Vocab::build(&kb, 1).unwrap();
        let data = TrainData::full(&kb);
        let mut setup = tiny_setup(&kb, &vocab, 3);
        setup.train.task_mix = TaskMix::RoundRobin;
        let mut trainer = Trainer::new(setup, "testhash").unwrap();
        let pool = worker_pool(1);
        let env = TrainEnv {
            kb: &kb,
            vocab: &vocab,
            data: &data,
            pool: &pool,
        };
        let m0 = trainer.train_step(&env).unwrap();
        let m1 = trainer.train_step(&env).unwrap();
        let m2 = trainer.train_step(&env).unwrap();
        assert!(m0.l_e > 0.0 && m0.l_o == 0.0 && m0.l_mlm == 0.0);
        assert!(m1.l_e == 0.0 && m1.l_o > 0.0 && m1.l_mlm == 0.0);
        assert!(m2.l_e == 0.0 && m2.l_o == 0.0 && m2.l_mlm > 0.0);
    }

    #[test]
    fn zero_total_steps_only_writes_the_initial_checkpoint() {
        let kb = tiny_world();
        let vocab = Vocab::build(&kb, 1).unwrap();
        let data = TrainData::full(&kb);
        let mut setup = tiny_setup(&kb, &vocab, 0);
        setup.train.warmup_steps = 0;
        let mut trainer = Trainer::new(setup, "testhash").unwrap();
        let relations: Vec<String> = kb.relations().map(|r| r.id.clone()).collect();
        trainer.attach_artifacts(vocab.clone(), relations);
        let pool = worker_pool(1);
        let env = TrainEnv {
            kb: &kb,
            vocab: &vocab,
            data: &data,
            pool: &pool,
        };
        let dir = tempfile::tempdir().unwrap();
        let metrics = trainer.run(&env, Some(dir.path())).unwrap();
        assert!(metrics.is_empty());
        assert!(dir.path().join("checkpoints/checkpoint-0.xlmk").exists());
    }

    #[test]
    fn metrics_line_schema_is_stable() {
        let m = StepMetrics {
            step: 3,
            l: 1.5,
            l_mlm: 0.5,
            l_e: 0.6,
            l_o: 0.4,
            lr: 1e-4,
            skipped: 1,
        };
        let line = serde_json::to_string(&m).unwrap();
        assert_eq!(
            line,
            "{\"step\":3,\"L\":1.5,\"L_mlm\":0.5,\"L_e\":0.6,\"L_o\":0.4,\"lr\":0.0001,\"skipped\":1}"
        );
    }
}
