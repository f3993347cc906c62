//! Fixed-capacity FIFO candidate list of detached embeddings.
//!
//! The queue always holds exactly `capacity` entries. It starts from random
//! unit-scale vectors tagged with a sentinel id, and every enqueue evicts
//! the oldest entry. Entries are plain values: nothing in here participates
//! in gradient computation.

use std::collections::VecDeque;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Scalar;
use crate::error::{Result, XlmkError};

/// Entity tag for a queue slot; `None` marks a random-init entry.
pub type EntityTag = Option<String>;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateQueue<F: Scalar> {
    capacity: usize,
    width: usize,
    entries: VecDeque<(Array1<F>, EntityTag)>,
}

impl<F: Scalar> CandidateQueue<F> {
    /// `capacity` i.i.d. normal vectors scaled by 1/sqrt(width), oldest
    /// first, all tagged with the sentinel.
    pub fn init_random(capacity: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if capacity == 0 {
            return Err(XlmkError::InvalidCapacity);
        }
        let scale = F::from_f64(1.0 / (width as f64).sqrt());
        let entries = (0..capacity)
            .map(|_| {
                let v =
                    Array1::from_shape_fn(width, |_| F::from_f64(standard_normal(rng)) * scale);
                (v, None)
            })
            .collect();
        Ok(CandidateQueue {
            capacity,
            width,
            entries,
        })
    }

    /// Rebuild from checkpointed entries.
    pub fn from_entries(
        capacity: usize,
        width: usize,
        entries: Vec<(Array1<F>, EntityTag)>,
    ) -> Result<Self> {
        if capacity == 0 || entries.len() != capacity {
            return Err(XlmkError::InvalidCapacity);
        }
        if entries.iter().any(|(v, _)| v.len() != width) {
            return Err(XlmkError::WidthMismatch {
                got: entries.iter().map(|(v, _)| v.len()).max().unwrap_or(0),
                want: width,
            });
        }
        Ok(CandidateQueue {
            capacity,
            width,
            entries: entries.into(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Oldest-first view of the current entries.
    pub fn entries(&self) -> impl Iterator<Item = (&Array1<F>, &EntityTag)> {
        self.entries.iter().map(|(v, t)| (v, t))
    }

    /// Evict the oldest entry and append `(vector, entity)` as newest.
    pub fn enqueue(&mut self, vector: Array1<F>, entity: impl Into<EntityTag>) -> Result<()> {
        if vector.len() != self.width {
            return Err(XlmkError::WidthMismatch {
                got: vector.len(),
                want: self.width,
            });
        }
        self.entries.pop_front();
        self.entries.push_back((vector, entity.into()));
        debug_assert_eq!(self.entries.len(), self.capacity);
        Ok(())
    }

    /// Negatives surviving the same-entity exclusion, as one matrix in queue
    /// order, shareable across loss graphs without copying.
    pub fn negatives(&self, pos_entity: &str, exclude_same_entity: bool) -> Arc<Array2<F>> {
        let rows: Vec<&Array1<F>> = self
            .entries
            .iter()
            .filter(|(_, tag)| !exclude_same_entity || tag.as_deref() != Some(pos_entity))
            .map(|(v, _)| v)
            .collect();
        let mut m = Array2::zeros((rows.len(), self.width));
        for (mut out, row) in m.rows_mut().into_iter().zip(rows) {
            out.assign(&row.view());
        }
        Arc::new(m)
    }

    /// Raw contrastive logits: index 0 is `z_q . z_pos`, the rest are
    /// `z_q . z_k` over surviving queue entries in order. No temperature,
    /// no normalization.
    pub fn score(
        &self,
        z_q: &Array1<F>,
        z_pos: &Array1<F>,
        pos_entity: &str,
        exclude_same_entity: bool,
    ) -> Result<Vec<F>> {
        if z_q.len() != self.width || z_pos.len() != self.width {
            return Err(XlmkError::WidthMismatch {
                got: z_q.len().max(z_pos.len()),
                want: self.width,
            });
        }
        let mut logits = Vec::with_capacity(self.capacity + 1);
        logits.push(z_q.dot(z_pos));
        for (v, tag) in &self.entries {
            if exclude_same_entity && tag.as_deref() == Some(pos_entity) {
                continue;
            }
            logits.push(z_q.dot(v));
        }
        Ok(logits)
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}
