//! Forward graphs: encoder stack, projection heads, relation lookup, MLM
//! head. Each builder has a tape form (for training) and an eval form that
//! runs the same graph and extracts plain arrays.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Binder, EncoderOutput, Parameters};
use crate::autodiff::{NodeId, Scalar, Tape};
use crate::error::{Result, XlmkError};
use crate::text::Vocab;

/// Additive attention-mask value for [PAD] keys; exp() underflows to zero.
const MASK_NEG: f64 = -1e9;

/// Dropout / determinism context for one forward build.
pub struct ForwardMode {
    train: bool,
    dropout_rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl ForwardMode {
    pub fn eval() -> Self {
        ForwardMode {
            train: false,
            dropout_rate: 0.0,
            rng: None,
        }
    }

    /// Training mode; `rng` drives the dropout masks.
    pub fn train(dropout_rate: f64, rng: ChaCha8Rng) -> Self {
        ForwardMode {
            train: dropout_rate > 0.0,
            dropout_rate,
            rng: if dropout_rate > 0.0 { Some(rng) } else { None },
        }
    }

    fn mask<F: Scalar>(&mut self, rows: usize, cols: usize) -> Option<Array2<F>> {
        if !self.train {
            return None;
        }
        let rate = self.dropout_rate;
        let keep = 1.0 - rate;
        let rng = self.rng.as_mut().expect("train mode carries an rng");
        let inv = F::from_f64(1.0 / keep);
        Some(Array2::from_shape_fn((rows, cols), |_| {
            if rng.gen_bool(keep) {
                inv
            } else {
                F::zero()
            }
        }))
    }
}

fn maybe_dropout<F: Scalar>(tape: &mut Tape<F>, mode: &mut ForwardMode, x: NodeId) -> NodeId {
    let (r, c) = tape.value(x).dim();
    match mode.mask::<F>(r, c) {
        Some(m) => tape.dropout(x, m),
        None => x,
    }
}

/// Node handles produced by one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncodeNodes {
    /// seq_len x d_w final hidden states.
    pub hidden: NodeId,
    /// 1 x d_w pooled [CLS] row (row 0 of `hidden`).
    pub cls: NodeId,
}

/// Record the encoder forward pass for `ids` on the tape.
pub fn encode_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut Binder<'_, F>,
    ids: &[usize],
    mode: &mut ForwardMode,
) -> Result<EncodeNodes> {
    let cfg = binder.config().clone();
    if ids.is_empty() {
        return Err(XlmkError::SequenceTooLong {
            len: 0,
            max_len: cfg.max_len,
        });
    }
    if ids.len() > cfg.max_len {
        return Err(XlmkError::SequenceTooLong {
            len: ids.len(),
            max_len: cfg.max_len,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(XlmkError::IdOutOfRange {
            id: bad,
            vocab: cfg.vocab_size,
        });
    }

    let len = ids.len();
    let token_emb = binder.get(tape, "token_emb");
    let pos_emb = binder.get(tape, "pos_emb");
    let tok = tape.gather(token_emb, ids.to_vec());
    let pos = tape.gather(pos_emb, (0..len).collect());
    let mut h = tape.add(tok, pos);
    h = maybe_dropout(tape, mode, h);

    // [PAD] keys are masked out of attention for every query row.
    let pad_mask: Option<NodeId> = if ids.contains(&Vocab::PAD_ID) {
        let mut m = Array2::zeros((len, len));
        for (j, &id) in ids.iter().enumerate() {
            if id == Vocab::PAD_ID {
                for i in 0..len {
                    m[[i, j]] = F::from_f64(MASK_NEG);
                }
            }
        }
        Some(tape.constant(m))
    } else {
        None
    };

    let dh = cfg.head_dim();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    for layer in 0..cfg.n_layers {
        let lp = format!("layer{layer}");
        let ln1_g = binder.get(tape, &format!("{lp}.ln1.gamma"));
        let ln1_b = binder.get(tape, &format!("{lp}.ln1.beta"));
        let normed = tape.layer_norm(h, ln1_g, ln1_b);

        let mut qkv = Vec::with_capacity(3);
        for w in ["wq", "wk", "wv"] {
            let wn = binder.get(tape, &format!("{lp}.attn.{w}"));
            let bn = binder.get(tape, &format!("{lp}.attn.{}", w.replace('w', "b")));
            let prod = tape.matmul(normed, wn);
            qkv.push(tape.add_row(prod, bn));
        }
        let (q, k, v) = (qkv[0], qkv[1], qkv[2]);

        let mut head_outputs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let (start, end) = (head * dh, (head + 1) * dh);
            let qh = tape.col_slice(q, start, end);
            let kh = tape.col_slice(k, start, end);
            let vh = tape.col_slice(v, start, end);
            let scores = tape.matmul_nt(qh, kh);
            let mut scores = tape.scale(scores, scale);
            if let Some(mask) = pad_mask {
                scores = tape.add(scores, mask);
            }
            let probs = tape.softmax_rows(scores);
            let probs = maybe_dropout(tape, mode, probs);
            head_outputs.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(head_outputs);
        let wo = binder.get(tape, &format!("{lp}.attn.wo"));
        let bo = binder.get(tape, &format!("{lp}.attn.bo"));
        let attn_out = tape.matmul(ctx, wo);
        let attn_out = tape.add_row(attn_out, bo);
        let attn_out = maybe_dropout(tape, mode, attn_out);
        h = tape.add(h, attn_out);

        let ln2_g = binder.get(tape, &format!("{lp}.ln2.gamma"));
        let ln2_b = binder.get(tape, &format!("{lp}.ln2.beta"));
        let normed2 = tape.layer_norm(h, ln2_g, ln2_b);
        let w1 = binder.get(tape, &format!("{lp}.ffn.w1"));
        let b1 = binder.get(tape, &format!("{lp}.ffn.b1"));
        let w2 = binder.get(tape, &format!("{lp}.ffn.w2"));
        let b2 = binder.get(tape, &format!("{lp}.ffn.b2"));
        let f = tape.matmul(normed2, w1);
        let f = tape.add_row(f, b1);
        let f = if cfg.activation == "relu" {
            tape.relu(f)
        } else {
            tape.gelu(f)
        };
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, b2);
        let f = maybe_dropout(tape, mode, f);
        h = tape.add(h, f);
    }

    let lnf_g = binder.get(tape, "ln_f.gamma");
    let lnf_b = binder.get(tape, "ln_f.beta");
    let hidden = tape.layer_norm(h, lnf_g, lnf_b);
    let cls = tape.gather(hidden, vec![0]);
    Ok(EncodeNodes { hidden, cls })
}

/// Which query/candidate projection pair to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionHead {
    /// Masked-token query for MEP.
    QueryMep,
    /// Candidate description for MEP.
    CandidateMep,
    /// Subject-plus-relation query for OE.
    QueryOe,
    /// Candidate description for OE.
    CandidateOe,
}

impl ProjectionHead {
    fn weights(self) -> (&'static str, &'static str) {
        match self {
            ProjectionHead::QueryMep => ("w1", "w2"),
            ProjectionHead::CandidateMep => ("w3", "w4"),
            ProjectionHead::QueryOe => ("w5", "w6"),
            ProjectionHead::CandidateOe => ("w7", "w8"),
        }
    }
}

/// `secondW . relu(firstW . x)`, no bias terms.
pub fn project_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut Binder<'_, F>,
    head: ProjectionHead,
    input: NodeId,
) -> NodeId {
    let (first, second) = head.weights();
    let w_first = binder.get(tape, first);
    let w_second = binder.get(tape, second);
    let pre = tape.matmul(input, w_first);
    let act = tape.relu(pre);
    tape.matmul(act, w_second)
}

fn project_eval<F: Scalar>(params: &Parameters<F>, head: ProjectionHead, x: &Array1<F>) -> Array1<F> {
    let (first, second) = head.weights();
    let row = x.view().insert_axis(ndarray::Axis(0));
    let pre = row.dot(params.get(first));
    let act = pre.mapv(|v| v.max(F::zero()));
    act.dot(params.get(second)).row(0).to_owned()
}

/// Eq.-style query projection from a masked-token hidden state.
pub fn project_query_mep<F: Scalar>(params: &Parameters<F>, h_s: &Array1<F>) -> Array1<F> {
    project_eval(params, ProjectionHead::QueryMep, h_s)
}

/// Candidate projection of a description's [CLS] vector.
pub fn project_candidate_mep<F: Scalar>(params: &Parameters<F>, cls: &Array1<F>) -> Array1<F> {
    project_eval(params, ProjectionHead::CandidateMep, cls)
}

/// Query projection of the elementwise sum of subject [CLS] and relation
/// embedding.
pub fn project_query_oe<F: Scalar>(
    params: &Parameters<F>,
    s_cls: &Array1<F>,
    r_vec: &Array1<F>,
) -> Array1<F> {
    let joint = s_cls + r_vec;
    project_eval(params, ProjectionHead::QueryOe, &joint)
}

/// Candidate projection for OE.
pub fn project_candidate_oe<F: Scalar>(params: &Parameters<F>, cls: &Array1<F>) -> Array1<F> {
    project_eval(params, ProjectionHead::CandidateOe, cls)
}

/// Row `index` of the relation table.
pub fn relation_embed<F: Scalar>(params: &Parameters<F>, index: usize) -> Result<Array1<F>> {
    let table = params.get("relation_table");
    let n = params.config().n_relations;
    if index >= n {
        return Err(XlmkError::IndexOutOfRange {
            index,
            n_relations: n,
        });
    }
    Ok(table.row(index).to_owned())
}

/// Run the encoder without recording gradients.
pub fn encode<F: Scalar>(
    params: &Parameters<F>,
    ids: &[usize],
    mode: &mut ForwardMode,
) -> Result<EncoderOutput<F>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(params);
    let nodes = encode_on_tape(&mut tape, &mut binder, ids, mode)?;
    let hidden = tape.value(nodes.hidden).clone();
    let cls = hidden.row(0).to_owned();
    Ok(EncoderOutput { hidden, cls })
}

/// Weight-tied MLM head: `hidden . token_emb^T + bias`.
pub fn mlm_logits<F: Scalar>(params: &Parameters<F>, hidden: &Array2<F>) -> Array2<F> {
    let emb = params.get("token_emb");
    let bias = params.get("mlm_bias");
    hidden.dot(&emb.t()) + bias
}

/// MLM logits on the tape for a subset of hidden rows.
pub fn mlm_logits_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    binder: &mut Binder<'_, F>,
    hidden: NodeId,
    rows: Vec<usize>,
) -> NodeId {
    let selected = tape.gather(hidden, rows);
    let emb = binder.get(tape, "token_emb");
    let bias = binder.get(tape, "mlm_bias");
    let prod = tape.matmul_nt(selected, emb);
    tape.add_row(prod, bias)
}

#[cfg(test)]
mod tests {
    use super::super::tests::test_config;
    use super::super::{init_parameters, Parameters};
    use super::*;
    use crate::rng::substream;
    use ndarray::array;
    use rand::Rng;

    fn params_f64() -> Parameters<f64> {
        init_parameters(&test_config(50, 4)).unwrap()
    }

    #[test]
    fn encode_shape_contract() {
        let params = params_f64();
        let out = encode(&params, &[2, 10, 11, 12, 13, 14, 15], &mut ForwardMode::eval()).unwrap();
        assert_eq!(out.hidden.dim(), (7, 16));
        assert_eq!(out.cls, out.hidden.row(0).to_owned());
        assert!(out.hidden.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_eval_is_deterministic() {
        let params = params_f64();
        let a = encode(&params, &[2, 7, 8, 9], &mut ForwardMode::eval()).unwrap();
        let b = encode(&params, &[2, 7, 8, 9], &mut ForwardMode::eval()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let params = params_f64();
        let long: Vec<usize> = vec![2; 300];
        assert!(matches!(
            encode(&params, &long, &mut ForwardMode::eval()),
            Err(XlmkError::SequenceTooLong { .. })
        ));
        assert!(matches!(
            encode(&params, &[2, 99], &mut ForwardMode::eval()),
            Err(XlmkError::IdOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn cls_is_permutation_invariant_without_positions() {
        // Zero positional embeddings make the [CLS] row a function of the
        // token multiset only.
        let mut params = params_f64();
        params.get_mut("pos_emb").fill(0.0);
        let a = encode(&params, &[2, 10, 11, 12], &mut ForwardMode::eval()).unwrap();
        let b = encode(&params, &[2, 11, 10, 12], &mut ForwardMode::eval()).unwrap();
        for (x, y) in a.cls.iter().zip(b.cls.iter()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        // Hidden rows themselves do move.
        assert!(a
            .hidden
            .row(1)
            .iter()
            .zip(b.hidden.row(1).iter())
            .any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn pad_rows_never_reach_cls() {
        let mut params = params_f64();
        let ids = [2usize, 10, 11, 0, 0];
        let before = encode(&params, &ids, &mut ForwardMode::eval()).unwrap();
        // Corrupt the [PAD] embedding row; the pooled row must not move.
        let mut rng = substream(3, "pad");
        for v in params.get_mut("token_emb").row_mut(0).iter_mut() {
            *v = rng.gen_range(-5.0..5.0);
        }
        let after = encode(&params, &ids, &mut ForwardMode::eval()).unwrap();
        for (x, y) in before.cls.iter().zip(after.cls.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_only_fires_in_train_mode() {
        let params = params_f64();
        let eval_out = encode(&params, &[2, 10, 11], &mut ForwardMode::eval()).unwrap();
        let mut cfg = params.config().clone();
        cfg.dropout_rate = 0.5;
        let mut mode = ForwardMode::train(0.5, substream(5, "drop"));
        let train_out = encode(&params, &[2, 10, 11], &mut mode).unwrap();
        assert_ne!(eval_out, train_out);
        // Same rng seed reproduces the same masks.
        let mut mode2 = ForwardMode::train(0.5, substream(5, "drop"));
        let train_out2 = encode(&params, &[2, 10, 11], &mut mode2).unwrap();
        assert_eq!(train_out, train_out2);
    }

    #[test]
    fn projection_zero_weights_give_zero() {
        let mut params = params_f64();
        params.get_mut("w1").fill(0.0);
        params.get_mut("w2").fill(0.0);
        let h = Array1::from_elem(16, 0.3);
        let z = project_query_mep(&params, &h);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_identity_passes_nonnegative_input() {
        let mut cfg = test_config(50, 4);
        cfg.d_p = 16; // square so identity weights are possible
        let mut params: Parameters<f64> = init_parameters(&cfg).unwrap();
        params.get_mut("w1").assign(&ndarray::Array2::eye(16));
        params.get_mut("w2").assign(&ndarray::Array2::eye(16));
        let h = Array1::from_shape_fn(16, |i| i as f64 * 0.1);
        let z = project_query_mep(&params, &h);
        for (a, b) in z.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projections_match_naive_triple_loop_oracle() {
        let params = params_f64();
        let mut rng = substream(8, "proj");
        for head in [
            ProjectionHead::QueryMep,
            ProjectionHead::CandidateMep,
            ProjectionHead::CandidateOe,
        ] {
            let x = Array1::from_shape_fn(16, |_| rng.gen_range(-2.0..2.0));
            let got = project_eval(&params, head, &x);
            let (w1n, w2n) = head.weights();
            let (w1, w2) = (params.get(w1n), params.get(w2n));
            // naive: z[j] = sum_k relu(sum_i x[i] w1[i][k]) w2[k][j]
            let mut pre = [0.0f64; 8];
            for k in 0..8 {
                for i in 0..16 {
                    pre[k] += x[i] * w1[[i, k]];
                }
                pre[k] = pre[k].max(0.0);
            }
            for j in 0..16 {
                let mut z = 0.0;
                for k in 0..8 {
                    z += pre[k] * w2[[k, j]];
                }
                assert!((z - got[j]).abs() < 1e-6, "head {head:?} col {j}");
            }
        }
    }

    #[test]
    fn oe_query_sums_before_projecting() {
        let params = params_f64();
        let mut rng = substream(9, "oe");
        let s: Array1<f64> = Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0));
        // r = -s cancels to the zero vector before projection.
        let z = project_query_oe(&params, &s, &(-s.clone()));
        assert!(z.iter().all(|&v| v == 0.0));
        // r = 0 reduces to projecting s alone.
        let z0 = project_query_oe(&params, &s, &Array1::zeros(16));
        let direct = project_eval(&params, ProjectionHead::QueryOe, &s);
        assert_eq!(z0, direct);
    }

    #[test]
    fn relation_embed_bounds() {
        let params = params_f64();
        let r0 = relation_embed(&params, 0).unwrap();
        assert_eq!(r0, params.get("relation_table").row(0).to_owned());
        assert!(matches!(
            relation_embed(&params, 4),
            Err(XlmkError::IndexOutOfRange { index: 4, .. })
        ));
    }

    #[test]
    fn mlm_logits_shape_and_oracle() {
        let params = params_f64();
        let out = encode(&params, &[2, 10, 11, 12, 13, 14, 15], &mut ForwardMode::eval()).unwrap();
        let logits = mlm_logits(&params, &out.hidden);
        assert_eq!(logits.dim(), (7, 50));
        let emb = params.get("token_emb");
        let bias = params.get("mlm_bias");
        for i in 0..7 {
            for j in 0..50 {
                let mut acc = 0.0f64;
                for k in 0..16 {
                    acc += out.hidden[[i, k]] * emb[[j, k]];
                }
                acc += bias[[0, j]];
                assert!((acc - logits[[i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_hidden_and_bias_give_uniform_softmax() {
        let params = params_f64();
        let hidden = Array2::zeros((3, 16));
        let logits = mlm_logits(&params, &hidden);
        for row in logits.rows() {
            for &v in row.iter() {
                assert!((v - row[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_parameters_value_serves_all_roles() {
        // Sentence, description, and candidate encodes all read the same
        // tensors; nothing is cloned per role.
        let params = params_f64();
        let p1: *const f64 = params.get("token_emb").as_ptr();
        let _sentence = encode(&params, &[2, 10, 11], &mut ForwardMode::eval()).unwrap();
        let _description = encode(&params, &[2, 12, 13], &mut ForwardMode::eval()).unwrap();
        let p2: *const f64 = params.get("token_emb").as_ptr();
        assert!(std::ptr::eq(p1, p2));
    }

    #[test]
    fn gradients_flow_sparsely_into_relation_table() {
        let params = params_f64();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let table = binder.get(&mut tape, "relation_table");
        let row = tape.gather(table, vec![3]);
        let loss = tape.sum_all(row);
        let grads = tape.backward(loss).unwrap();
        let dt = grads[table].clone().unwrap();
        for r in 0..4 {
            let expected = if r == 3 { 1.0 } else { 0.0 };
            assert!(dt.row(r).iter().all(|&v| v == expected));
        }
        let _ = array![[0.0]]; // keep ndarray macro import used
    }
}
