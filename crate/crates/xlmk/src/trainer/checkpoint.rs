//! Binary checkpoint container.
//!
//! Layout: magic `XLMK`, version u32, a length-prefixed JSON header (step,
//! config, vocab, relation ids, queue tags, rng/data cursors), then named
//! f32 tensors (little-endian) covering parameters, Adam moments, and both
//! queues' vectors. Serialization is canonical, so equal trainer states
//! produce byte-identical files and reloads resume bit-exactly.

use std::io::Read;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{AdamState, DataState, TrainSetup, Trainer};
use crate::encoder::Parameters;
use crate::error::{Result, XlmkError};
use crate::queue::CandidateQueue;
use crate::rng::RngState;
use crate::text::Vocab;

pub const MAGIC: &[u8; 4] = b"XLMK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    config_hash: String,
    setup: TrainSetup,
    vocab: Vec<String>,
    relations: Vec<String>,
    mep_tags: Vec<Option<String>>,
    oe_tags: Vec<Option<String>>,
    data_rng: RngState,
    data_state: DataState,
    adam_t: u64,
}

/// A checkpoint plus the artifacts needed to interpret it.
pub struct LoadedCheckpoint {
    pub trainer: Trainer,
    pub vocab: Vocab,
    /// Relation ids in table order.
    pub relations: Vec<String>,
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, tensor: &Array2<f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(tensor.ncols() as u32).to_le_bytes());
    for &v in tensor.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn queue_matrix(queue: &CandidateQueue<f32>) -> Array2<f32> {
    let mut m = Array2::zeros((queue.capacity(), queue.width()));
    for (mut row, (v, _)) in m.rows_mut().into_iter().zip(queue.entries()) {
        row.assign(&v.view());
    }
    m
}

/// Serialize the full trainer state; equal states yield equal bytes.
pub fn checkpoint_bytes(trainer: &Trainer, vocab: &Vocab, relations: &[String]) -> Vec<u8> {
    let header = Header {
        version: VERSION,
        step: trainer.step,
        config_hash: trainer.config_hash.clone(),
        setup: trainer.setup.clone(),
        vocab: vocab.tokens().to_vec(),
        relations: relations.to_vec(),
        mep_tags: trainer.mep_queue.entries().map(|(_, t)| t.clone()).collect(),
        oe_tags: trainer.oe_queue.entries().map(|(_, t)| t.clone()).collect(),
        data_rng: RngState::capture(trainer.data_rng()),
        data_state: trainer.data_state,
        adam_t: trainer.adam.t,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);

    let n_tensors = trainer.params.iter().count() * 3 + 2;
    buf.extend_from_slice(&(n_tensors as u32).to_le_bytes());
    for (name, tensor) in trainer.params.iter() {
        push_tensor(&mut buf, name, tensor);
    }
    for (name, tensor) in &trainer.adam.m {
        push_tensor(&mut buf, &format!("adam.m.{name}"), tensor);
    }
    for (name, tensor) in &trainer.adam.v {
        push_tensor(&mut buf, &format!("adam.v.{name}"), tensor);
    }
    push_tensor(&mut buf, "queue.mep.vectors", &queue_matrix(&trainer.mep_queue));
    push_tensor(&mut buf, "queue.oe.vectors", &queue_matrix(&trainer.oe_queue));
    buf
}

/// Write the trainer's state to `path` using its attached vocab/relations.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let (vocab, relations) = trainer
        .artifacts()
        .ok_or_else(|| XlmkError::ConfigInvalid("trainer has no vocab attached".into()))?;
    let bytes = checkpoint_bytes(trainer, vocab, relations);
    std::fs::write(path, bytes).map_err(|e| XlmkError::io(path.display().to_string(), e))
}

struct TensorReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> TensorReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(XlmkError::UnrecognizedArtifact {
                path: "<checkpoint>".into(),
                detail: "truncated tensor section".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Array2<f32>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec()).map_err(|_| {
            XlmkError::UnrecognizedArtifact {
                path: "<checkpoint>".into(),
                detail: "tensor name is not utf-8".into(),
            }
        })?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let data = self.take(rows * cols * 4)?;
        let mut values = Vec::with_capacity(rows * cols);
        for chunk in data.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let arr = Array2::from_shape_vec((rows, cols), values).map_err(|_| {
            XlmkError::UnrecognizedArtifact {
                path: "<checkpoint>".into(),
                detail: "bad tensor shape".into(),
            }
        })?;
        Ok((name, arr))
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(Header, usize)> {
    let fail = |detail: &str| XlmkError::UnrecognizedArtifact {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(fail("missing XLMK magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| fail(&format!("bad header json: {e}")))?;
    Ok((header, 16 + header_len))
}

/// Header-only view, for `inspect`.
pub fn peek_checkpoint(path: &Path) -> Result<serde_json::Value> {
    let mut file =
        std::fs::File::open(path).map_err(|e| XlmkError::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| XlmkError::io(path.display().to_string(), e))?;
    let (header, _) = parse_header(path, &bytes)?;
    Ok(serde_json::json!({
        "step": header.step,
        "config_hash": header.config_hash,
        "vocab_size": header.vocab.len(),
        "n_relations": header.relations.len(),
        "queue_size": header.setup.train.queue_size,
        "d_w": header.setup.encoder.d_w,
        "n_layers": header.setup.encoder.n_layers,
    }))
}

/// Reload a checkpoint into a resumable trainer.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes =
        std::fs::read(path).map_err(|e| XlmkError::io(path.display().to_string(), e))?;
    let (header, offset) = parse_header(path, &bytes)?;

    let mut reader = TensorReader {
        bytes: &bytes,
        pos: offset,
    };
    let n_tensors = reader.u32()? as usize;
    let mut tensors: IndexMap<String, Array2<f32>> = IndexMap::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let (name, arr) = reader.tensor()?;
        tensors.insert(name, arr);
    }

    let mut params_map = IndexMap::new();
    let mut m = IndexMap::new();
    let mut v = IndexMap::new();
    let mut mep_vectors = None;
    let mut oe_vectors = None;
    for (name, arr) in tensors {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            m.insert(rest.to_string(), arr);
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            v.insert(rest.to_string(), arr);
        } else if name == "queue.mep.vectors" {
            mep_vectors = Some(arr);
        } else if name == "queue.oe.vectors" {
            oe_vectors = Some(arr);
        } else {
            params_map.insert(name, arr);
        }
    }
    let missing = |what: &str| XlmkError::UnrecognizedArtifact {
        path: path.display().to_string(),
        detail: format!("missing {what}"),
    };

    let params = Parameters::from_named_tensors(header.setup.encoder.clone(), params_map);
    let adam = AdamState {
        m,
        v,
        t: header.adam_t,
    };
    let rebuild_queue = |vectors: Option<Array2<f32>>,
                         tags: &[Option<String>]|
     -> Result<CandidateQueue<f32>> {
        let vectors = vectors.ok_or_else(|| missing("queue vectors"))?;
        let entries: Vec<(Array1<f32>, Option<String>)> = vectors
            .rows()
            .into_iter()
            .zip(tags.iter())
            .map(|(r, t)| (r.to_owned(), t.clone()))
            .collect();
        CandidateQueue::from_entries(entries.len(), header.setup.encoder.d_w, entries)
    };
    let mep_queue = rebuild_queue(mep_vectors, &header.mep_tags)?;
    let oe_queue = rebuild_queue(oe_vectors, &header.oe_tags)?;

    let vocab = Vocab::from_tokens(header.vocab.clone());
    let mut trainer = Trainer::from_parts(
        params,
        adam,
        mep_queue,
        oe_queue,
        header.step,
        header.setup,
        header.data_state,
        header.config_hash,
        header.data_rng.restore(),
    );
    trainer.attach_artifacts(vocab.clone(), header.relations.clone());
    Ok(LoadedCheckpoint {
        trainer,
        vocab,
        relations: header.relations,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_setup, tiny_world};
    use super::super::{worker_pool, TrainData, TrainEnv, Trainer};
    use super::*;
    use crate::text::Vocab;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let kb = tiny_world();
        let vocab = Vocab::build(&kb, 1).unwrap();
        let relations: Vec<String> = kb.relations().map(|r| r.id.clone()).collect();
        let data = TrainData::full(&kb);
        let mut trainer = Trainer::new(tiny_setup(&kb, &vocab, 8), "h").unwrap();
        trainer.attach_artifacts(vocab.clone(), relations.clone());
        let pool = worker_pool(2);
        let env = TrainEnv {
            kb: &kb,
            vocab: &vocab,
            data: &data,
            pool: &pool,
        };
        for _ in 0..5 {
            trainer.train_step(&env).unwrap();
        }
        let bytes = checkpoint_bytes(&trainer, &vocab, &relations);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.xlmk");
        std::fs::write(&path, &bytes).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let bytes2 = checkpoint_bytes(&loaded.trainer, &loaded.vocab, &loaded.relations);
        assert_eq!(bytes, bytes2, "serialize(load(x)) == x");
        assert_eq!(loaded.trainer.step, 5);
    }

    #[test]
    fn resume_matches_uninterrupted_run_bitwise() {
        let kb = tiny_world();
        let vocab = Vocab::build(&kb, 1).unwrap();
        let relations: Vec<String> = kb.relations().map(|r| r.id.clone()).collect();
        let data = TrainData::full(&kb);
        let pool = worker_pool(2);
        let env = TrainEnv {
            kb: &kb,
            vocab: &vocab,
            data: &data,
            pool: &pool,
        };

        // Uninterrupted run to step 10.
        let mut straight = Trainer::new(tiny_setup(&kb, &vocab, 10), "h").unwrap();
        straight.attach_artifacts(vocab.clone(), relations.clone());
        for _ in 0..10 {
            straight.train_step(&env).unwrap();
        }

        // Interrupted at 5, checkpointed, reloaded, run to 10.
        let mut first = Trainer::new(tiny_setup(&kb, &vocab, 10), "h").unwrap();
        first.attach_artifacts(vocab.clone(), relations.clone());
        for _ in 0..5 {
            first.train_step(&env).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.xlmk");
        first.save(&path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap().trainer;
        for _ in 0..5 {
            resumed.train_step(&env).unwrap();
        }

        let a = checkpoint_bytes(&straight, &vocab, &relations);
        let b = checkpoint_bytes(&resumed, &vocab, &relations);
        assert_eq!(a, b, "resumed trajectory equals the straight one");
    }

    #[test]
    fn corrupted_magic_is_unrecognized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xlmk");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(XlmkError::UnrecognizedArtifact { .. })
        ));
        assert!(peek_checkpoint(&path).is_err());
    }
}
