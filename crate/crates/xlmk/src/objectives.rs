//! The three pre-training losses and their joint sum.
//!
//! MEP and OE are contrastive: a projected query is scored by raw dot
//! product against its positive candidate (index 0) plus the queue's
//! negatives, and the loss is the stabilized softmax cross-entropy at index
//! 0. MLM is mean token cross-entropy at the corrupted positions. The joint
//! objective is the unweighted sum of the three per-batch means.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Scalar, Tape};
use crate::encoder::{
    encode_on_tape, mlm_logits_on_tape, project_on_tape, Binder, ForwardMode, Gradients,
    Parameters, ProjectionHead,
};
use crate::error::{Result, XlmkError};
use crate::queue::CandidateQueue;
use crate::text::{MepInstance, MlmInstance, OeInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    E,
    O,
    Mlm,
    Joint,
}

/// A finite, tagged loss scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue<F: Scalar> {
    pub value: F,
    pub component: Component,
}

impl<F: Scalar> LossValue<F> {
    fn checked(value: F, component: Component) -> Result<Self> {
        if !value.is_finite() {
            return Err(XlmkError::NonFinite("loss"));
        }
        Ok(LossValue { value, component })
    }
}

/// Loss-shape knobs. Defaults follow the plain formulation: raw dot
/// products, no temperature, stale positives excluded from the negatives.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub exclude_same_entity: bool,
    pub temperature: Option<f64>,
    pub l2_normalize: bool,
    /// (mep, oe, mlm) weights; kept at 1:1:1 unless experimenting.
    pub loss_weights: (f64, f64, f64),
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            exclude_same_entity: true,
            temperature: None,
            l2_normalize: false,
            loss_weights: (1.0, 1.0, 1.0),
        }
    }
}

/// Stabilized softmax cross-entropy with the positive at index 0.
pub fn contrastive_loss<F: Scalar>(logits: &[F]) -> Result<F> {
    if logits.len() < 2 {
        return Err(XlmkError::SkippedInstance);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(XlmkError::NonFinite("contrastive logits"));
    }
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let sum = logits
        .iter()
        .fold(F::zero(), |acc, &v| acc + (v - max).exp());
    let loss = max + sum.ln() - logits[0];
    if !loss.is_finite() {
        return Err(XlmkError::NonFinite("contrastive loss"));
    }
    Ok(loss)
}

/// One instance of any task, as handed to the trainer. Serializes with a
/// `"task"` discriminator for offline instance dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum TaskInstance {
    Mep(MepInstance),
    Oe(OeInstance),
    Mlm(MlmInstance),
}

impl TaskInstance {
    pub fn component(&self) -> Component {
        match self {
            TaskInstance::Mep(_) => Component::E,
            TaskInstance::Oe(_) => Component::O,
            TaskInstance::Mlm(_) => Component::Mlm,
        }
    }
}

/// Queue handles for the two contrastive tasks.
#[derive(Clone, Copy)]
pub struct TaskQueues<'q, F: Scalar> {
    pub mep: &'q CandidateQueue<F>,
    pub oe: &'q CandidateQueue<F>,
}

/// Result of evaluating one instance, with optional gradients and the
/// detached positive embedding to enqueue after the step.
pub struct InstanceOutcome<F: Scalar> {
    pub component: Component,
    pub loss: F,
    pub grads: Option<Gradients<F>>,
    pub enqueue: Option<(Array1<F>, String)>,
}

/// Would this instance be skipped because same-entity exclusion leaves the
/// candidate list without a single negative?
pub fn is_skippable<F: Scalar>(
    instance: &TaskInstance,
    queues: TaskQueues<'_, F>,
    ocfg: &ObjectiveConfig,
) -> bool {
    let (queue, entity) = match instance {
        TaskInstance::Mep(i) => (queues.mep, &i.pos_entity),
        TaskInstance::Oe(i) => (queues.oe, &i.pos_entity),
        TaskInstance::Mlm(i) => return i.masked_positions.is_empty(),
    };
    if !ocfg.exclude_same_entity {
        return false;
    }
    queue
        .entries()
        .all(|(_, tag)| tag.as_deref() == Some(entity.as_str()))
}

/// Evaluate one instance: forward pass, optionally seeded backward.
///
/// `grad_seed` of `Some(w)` backpropagates `w * loss`; the trainer passes
/// the per-item weight `task_weight / batch_size` so summed item gradients
/// equal the joint-loss gradient.
pub fn compute_instance<F: Scalar>(
    params: &Parameters<F>,
    instance: &TaskInstance,
    queues: TaskQueues<'_, F>,
    ocfg: &ObjectiveConfig,
    mut mode: ForwardMode,
    grad_seed: Option<F>,
) -> Result<InstanceOutcome<F>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(params);
    let (loss_node, enqueue) = match instance {
        TaskInstance::Mep(inst) => {
            let (loss, z_pos) =
                mep_graph(&mut tape, &mut binder, inst, queues.mep, ocfg, &mut mode)?;
            let z = tape.value(z_pos).row(0).to_owned();
            (loss, Some((z, inst.pos_entity.clone())))
        }
        TaskInstance::Oe(inst) => {
            let (loss, z_pos) =
                oe_graph(&mut tape, &mut binder, inst, queues.oe, ocfg, &mut mode)?;
            let z = tape.value(z_pos).row(0).to_owned();
            (loss, Some((z, inst.pos_entity.clone())))
        }
        TaskInstance::Mlm(inst) => (mlm_graph(&mut tape, &mut binder, inst, &mut mode)?, None),
    };
    let loss = tape.scalar(loss_node);
    if !loss.is_finite() {
        return Err(XlmkError::NonFinite("instance loss"));
    }
    let grads = match grad_seed {
        Some(seed) => {
            let raw = tape.backward_seeded(loss_node, seed)?;
            Some(Gradients::from_backward(&binder, &raw))
        }
        None => None,
    };
    Ok(InstanceOutcome {
        component: instance.component(),
        loss,
        grads,
        enqueue,
    })
}

fn contrastive_graph<F: Scalar>(
    tape: &mut Tape<F>,
    z_q: NodeId,
    z_pos: NodeId,
    queue: &CandidateQueue<F>,
    pos_entity: &str,
    ocfg: &ObjectiveConfig,
) -> Result<NodeId> {
    let (z_q, z_pos) = if ocfg.l2_normalize {
        (tape.l2_normalize_rows(z_q), tape.l2_normalize_rows(z_pos))
    } else {
        (z_q, z_pos)
    };
    let negatives = queue.negatives(pos_entity, ocfg.exclude_same_entity);
    if negatives.nrows() == 0 {
        return Err(XlmkError::SkippedInstance);
    }
    let pos_logit = tape.matmul_nt(z_q, z_pos);
    let neg_logits = tape.matmul_const_nt(z_q, negatives);
    let mut logits = tape.concat_cols(vec![pos_logit, neg_logits]);
    if let Some(t) = ocfg.temperature {
        logits = tape.scale(logits, F::from_f64(1.0 / t));
    }
    Ok(tape.cross_entropy_rows(logits, vec![0]))
}

/// MEP graph; returns (loss node, projected-positive node).
fn mep_graph<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut Binder<'_, F>,
    inst: &MepInstance,
    queue: &CandidateQueue<F>,
    ocfg: &ObjectiveConfig,
    mode: &mut ForwardMode,
) -> Result<(NodeId, NodeId)> {
    let sentence = encode_on_tape(tape, binder, &inst.input_ids, mode)?;
    let query_hidden = tape.gather(sentence.hidden, vec![inst.query_pos]);
    let z_q = project_on_tape(tape, binder, ProjectionHead::QueryMep, query_hidden);

    let desc = encode_on_tape(tape, binder, &inst.pos_desc_ids, mode)?;
    let z_pos = project_on_tape(tape, binder, ProjectionHead::CandidateMep, desc.cls);

    let loss = contrastive_graph(tape, z_q, z_pos, queue, &inst.pos_entity, ocfg)?;
    Ok((loss, z_pos))
}

/// OE graph; returns (loss node, projected-positive node).
fn oe_graph<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut Binder<'_, F>,
    inst: &OeInstance,
    queue: &CandidateQueue<F>,
    ocfg: &ObjectiveConfig,
    mode: &mut ForwardMode,
) -> Result<(NodeId, NodeId)> {
    let n_relations = binder.config().n_relations;
    if inst.relation_index >= n_relations {
        return Err(XlmkError::IndexOutOfRange {
            index: inst.relation_index,
            n_relations,
        });
    }
    let subject = encode_on_tape(tape, binder, &inst.subject_desc_ids, mode)?;
    let table = binder.get(tape, "relation_table");
    let relation = tape.gather(table, vec![inst.relation_index]);
    let joint = tape.add(subject.cls, relation);
    let z_q = project_on_tape(tape, binder, ProjectionHead::QueryOe, joint);

    let object = encode_on_tape(tape, binder, &inst.object_desc_ids, mode)?;
    let z_pos = project_on_tape(tape, binder, ProjectionHead::CandidateOe, object.cls);

    let loss = contrastive_graph(tape, z_q, z_pos, queue, &inst.pos_entity, ocfg)?;
    Ok((loss, z_pos))
}

fn mlm_graph<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut Binder<'_, F>,
    inst: &MlmInstance,
    mode: &mut ForwardMode,
) -> Result<NodeId> {
    if inst.masked_positions.is_empty() {
        return Err(XlmkError::EmptyMask);
    }
    let encoded = encode_on_tape(tape, binder, &inst.input_ids, mode)?;
    let logits = mlm_logits_on_tape(tape, binder, encoded.hidden, inst.masked_positions.clone());
    Ok(tape.cross_entropy_rows(logits, inst.gold_ids.clone()))
}

/// Forward-only MEP loss; also returns the detached positive embedding.
pub fn mep_loss<F: Scalar>(
    params: &Parameters<F>,
    inst: &MepInstance,
    queue: &CandidateQueue<F>,
    ocfg: &ObjectiveConfig,
) -> Result<(LossValue<F>, Array1<F>)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(params);
    let (loss, z_pos) = mep_graph(
        &mut tape,
        &mut binder,
        inst,
        queue,
        ocfg,
        &mut ForwardMode::eval(),
    )?;
    Ok((
        LossValue::checked(tape.scalar(loss), Component::E)?,
        tape.value(z_pos).row(0).to_owned(),
    ))
}

/// Forward-only OE loss; also returns the detached positive embedding.
pub fn oe_loss<F: Scalar>(
    params: &Parameters<F>,
    inst: &OeInstance,
    queue: &CandidateQueue<F>,
    ocfg: &ObjectiveConfig,
) -> Result<(LossValue<F>, Array1<F>)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(params);
    let (loss, z_pos) = oe_graph(
        &mut tape,
        &mut binder,
        inst,
        queue,
        ocfg,
        &mut ForwardMode::eval(),
    )?;
    Ok((
        LossValue::checked(tape.scalar(loss), Component::O)?,
        tape.value(z_pos).row(0).to_owned(),
    ))
}

/// Forward-only MLM loss.
pub fn mlm_loss<F: Scalar>(params: &Parameters<F>, inst: &MlmInstance) -> Result<LossValue<F>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(params);
    let loss = mlm_graph(&mut tape, &mut binder, inst, &mut ForwardMode::eval())?;
    LossValue::checked(tape.scalar(loss), Component::Mlm)
}

/// Per-component batch means plus their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLoss<F: Scalar> {
    pub joint: F,
    pub mep: F,
    pub oe: F,
    pub mlm: F,
    pub skipped: usize,
}

/// Weighted sum of present components (absent ones contribute zero).
pub fn combine_components<F: Scalar>(
    mep: Option<F>,
    oe: Option<F>,
    mlm: Option<F>,
    weights: (f64, f64, f64),
) -> F {
    let w = |x: Option<F>, k: f64| x.unwrap_or(F::zero()) * F::from_f64(k);
    w(mep, weights.0) + w(oe, weights.1) + w(mlm, weights.2)
}

/// Forward-only joint loss over three batches. Skippable contrastive
/// instances are excluded from their component mean and counted; an
/// instance set that is empty contributes zero.
pub fn joint_loss<F: Scalar>(
    params: &Parameters<F>,
    mep_batch: &[MepInstance],
    oe_batch: &[OeInstance],
    mlm_batch: &[MlmInstance],
    queues: TaskQueues<'_, F>,
    ocfg: &ObjectiveConfig,
) -> Result<JointLoss<F>> {
    if mep_batch.is_empty() && oe_batch.is_empty() && mlm_batch.is_empty() {
        return Err(XlmkError::AllBatchesEmpty);
    }
    let mut skipped = 0usize;
    let mean_of = |losses: Vec<F>| -> Option<F> {
        if losses.is_empty() {
            None
        } else {
            let n = F::from_f64(losses.len() as f64);
            Some(losses.into_iter().fold(F::zero(), |a, v| a + v) / n)
        }
    };

    let mut mep_losses = Vec::new();
    for inst in mep_batch {
        match mep_loss(params, inst, queues.mep, ocfg) {
            Ok((l, _)) => mep_losses.push(l.value),
            Err(XlmkError::SkippedInstance) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let mut oe_losses = Vec::new();
    for inst in oe_batch {
        match oe_loss(params, inst, queues.oe, ocfg) {
            Ok((l, _)) => oe_losses.push(l.value),
            Err(XlmkError::SkippedInstance) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let mut mlm_losses = Vec::new();
    for inst in mlm_batch {
        match mlm_loss(params, inst) {
            Ok(l) => mlm_losses.push(l.value),
            Err(XlmkError::EmptyMask) => skipped += 1,
            Err(e) => return Err(e),
        }
    }

    let mep = mean_of(mep_losses);
    let oe = mean_of(oe_losses);
    let mlm = mean_of(mlm_losses);
    let joint = combine_components(mep, oe, mlm, ocfg.loss_weights);
    Ok(JointLoss {
        joint,
        mep: mep.unwrap_or(F::zero()),
        oe: oe.unwrap_or(F::zero()),
        mlm: mlm.unwrap_or(F::zero()),
        skipped,
    })
}
