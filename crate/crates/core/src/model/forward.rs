//! Decoder forward passes.
//!
//! Every path (full prefill, sparse reuse prefill, KV-substituted probes)
//! goes through [`ToyVlm::forward`], which runs each layer over a chosen set of
//! query positions while a [`KvSource`] may substitute stored pre-RoPE K/V
//! for any position. Sharing one kernel keeps the accumulation order
//! identical across paths.

use crate::error::{Error, Result};
use crate::model::{DecoderLayer, KvTensors, ToyVlm, NORM_EPS};
use crate::sequence::TokenSequence;
use crate::tensor::{argmax, dot, rms_norm, silu, softmax_in_place, Matrix};

/// Supplies stored pre-RoPE K/V for a `(layer, position)`, or `None` to compute it fresh.
pub trait KvSource {
    fn cached(&self, layer: usize, position: usize) -> Option<(&[f32], &[f32])>;
}

/// Computes everything fresh.
pub struct NoCache;

impl KvSource for NoCache {
    fn cached(&self, _layer: usize, _position: usize) -> Option<(&[f32], &[f32])> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    /// `[seq_len, vocab]`
    pub logits: Matrix,
    pub kv: KvTensors,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// `[tokens.len(), vocab]`; row `i` is the distribution token `i` was picked from.
    pub logits: Matrix,
}

/// Result of one [`ToyVlm::forward`] call.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Pre-RoPE K/V actually attended to at each layer, for every position.
    pub kv: KvTensors,
    /// Query positions per layer, ascending.
    pub queries: Vec<Vec<usize>>,
    /// Logits for the final layer's query positions, in the same order.
    pub logits: Matrix,
    /// Per layer, the concatenated head outputs (before the output projection)
    /// for that layer's queries. Only filled when requested.
    pub attention: Option<Vec<Matrix>>,
}

impl ForwardTrace {
    pub fn logit_positions(&self) -> &[usize] {
        self.queries.last().map_or(&[], Vec::as_slice)
    }

    /// Logits row for `position`, if it was computed at the final layer.
    pub fn logits_at(&self, position: usize) -> Option<&[f32]> {
        let idx = self.logit_positions().binary_search(&position).ok()?;
        Some(self.logits.row(idx))
    }
}

impl DecoderLayer {
    fn mlp_residual(&self, h: &mut [f32]) {
        let xn = rms_norm(h, &self.mlp_norm, NORM_EPS);
        let gate = self.w_gate.forward(&xn);
        let up = self.w_up.forward(&xn);
        let act: Vec<f32> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        let down = self.w_down.forward(&act);
        for (x, o) in h.iter_mut().zip(&down) {
            *x += o;
        }
    }
}

impl ToyVlm {
    /// Causal attention of one rotated query over rotated keys `0..=upto`.
    fn attend(&self, q_rot: &[f32], keys_rot: &Matrix, values: &Matrix, upto: usize, scores: &mut Vec<f32>, ctx: &mut [f32]) {
        let hd = self.config().head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        ctx.fill(0.0);
        scores.resize(upto + 1, 0.0);
        for h in 0..self.config().num_heads {
            let lo = h * hd;
            let qh = &q_rot[lo..lo + hd];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qh, &keys_rot.row(j)[lo..lo + hd]) * scale;
            }
            softmax_in_place(scores);
            let ch = &mut ctx[lo..lo + hd];
            for (j, &a) in scores.iter().enumerate() {
                for (c, v) in ch.iter_mut().zip(&values.row(j)[lo..lo + hd]) {
                    *c += a * v;
                }
            }
        }
    }

    /// Runs the decoder with `queries[layer]` as the positions processed at each
    /// layer. A position may be a query at layer `l` only if it was a query at
    /// `l - 1` (its hidden state must exist). Every position that is not a
    /// fresh query at a layer must be supplied by `source`.
    pub fn forward(&self, input: &Matrix, queries: &[Vec<usize>], source: &dyn KvSource, capture_attention: bool) -> Result<ForwardTrace> {
        let cfg = self.config();
        let n = input.rows();
        let kv_dim = cfg.kv_dim;
        if queries.len() != cfg.num_layers {
            return Err(Error::Input(format!(
                "query schedule covers {} layers, model has {}",
                queries.len(),
                cfg.num_layers
            )));
        }

        let mut hidden = input.clone();
        let mut live = vec![true; n];
        let mut kv = KvTensors {
            keys: Vec::with_capacity(cfg.num_layers),
            values: Vec::with_capacity(cfg.num_layers),
        };
        let mut attention = capture_attention.then(Vec::new);
        let mut scores = Vec::with_capacity(n);
        let mut ctx = vec![0.0f32; kv_dim];
        let mut proj = vec![0.0f32; cfg.model_dim];

        for (l, (layer, qs)) in self.layers.iter().zip(queries).enumerate() {
            let mut keys = Matrix::zeros(n, kv_dim);
            let mut values = Matrix::zeros(n, kv_dim);
            let mut have = vec![false; n];
            let mut q_rows = Matrix::zeros(qs.len(), kv_dim);
            for (qi, &p) in qs.iter().enumerate() {
                if p >= n || !live[p] {
                    return Err(Error::Input(format!(
                        "position {p} is queried at layer {l} without a hidden state"
                    )));
                }
                let xn = rms_norm(hidden.row(p), &layer.attn_norm, NORM_EPS);
                layer.wq.forward_into(&xn, q_rows.row_mut(qi));
                if source.cached(l, p).is_none() {
                    layer.wk.forward_into(&xn, keys.row_mut(p));
                    layer.wv.forward_into(&xn, values.row_mut(p));
                    have[p] = true;
                }
            }
            for p in 0..n {
                if have[p] {
                    continue;
                }
                let (k, v) = source.cached(l, p).ok_or_else(|| {
                    Error::Input(format!("position {p} is neither computed nor cached at layer {l}"))
                })?;
                keys.row_mut(p).copy_from_slice(k);
                values.row_mut(p).copy_from_slice(v);
            }

            let mut keys_rot = keys.clone();
            for p in 0..n {
                self.rope().rotate_in_place(keys_rot.row_mut(p), p);
            }

            let mut captured = capture_attention.then(|| Matrix::zeros(qs.len(), kv_dim));
            let mut next_live = vec![false; n];
            for (qi, &p) in qs.iter().enumerate() {
                let q_rot = self.rope().rotate(q_rows.row(qi), p);
                self.attend(&q_rot, &keys_rot, &values, p, &mut scores, &mut ctx);
                if let Some(c) = captured.as_mut() {
                    c.row_mut(qi).copy_from_slice(&ctx);
                }
                layer.wo.forward_into(&ctx, &mut proj);
                let h = hidden.row_mut(p);
                for (x, o) in h.iter_mut().zip(&proj) {
                    *x += o;
                }
                layer.mlp_residual(h);
                next_live[p] = true;
            }
            live = next_live;
            kv.keys.push(keys);
            kv.values.push(values);
            if let (Some(a), Some(c)) = (attention.as_mut(), captured) {
                a.push(c);
            }
        }

        let last = queries.last().map_or(&[][..], Vec::as_slice);
        let mut logits = Matrix::zeros(last.len(), cfg.vocab_size);
        for (i, &p) in last.iter().enumerate() {
            let xn = rms_norm(hidden.row(p), &self.final_norm, NORM_EPS);
            self.lm_head.forward_into(&xn, logits.row_mut(i));
        }

        Ok(ForwardTrace {
            kv,
            queries: queries.to_vec(),
            logits,
            attention,
        })
    }

    /// Full-compute causal prefill; the baseline every reuse path is measured against.
    pub fn prefill_full(&self, seq: &TokenSequence, image_embeds: &[Matrix]) -> Result<PrefillOutput> {
        let input = self.embed(seq, image_embeds)?;
        let all: Vec<usize> = (0..seq.len()).collect();
        let queries = vec![all; self.config().num_layers];
        let trace = self.forward(&input, &queries, &NoCache, false)?;
        Ok(PrefillOutput {
            logits: trace.logits,
            kv: trace.kv,
        })
    }

    /// Greedy decoding after a full prefill.
    pub fn generate(&self, seq: &TokenSequence, image_embeds: &[Matrix], max_new: usize) -> Result<Generation> {
        let out = self.prefill_full(seq, image_embeds)?;
        if max_new == 0 {
            return Ok(Generation {
                tokens: Vec::new(),
                logits: Matrix::zeros(0, self.config().vocab_size),
            });
        }
        if seq.is_empty() {
            return Err(Error::Input("cannot decode from an empty prompt".into()));
        }
        let first = out.logits.row(seq.len() - 1).to_vec();
        let mut state = DecodeState::new(self, &out.kv)?;
        state.greedy(first, max_new)
    }
}

/// Incremental decoding over a pre-RoPE KV cache.
pub struct DecodeState<'m> {
    model: &'m ToyVlm,
    keys: Vec<Vec<f32>>,
    keys_rot: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl<'m> DecodeState<'m> {
    pub fn new(model: &'m ToyVlm, kv: &KvTensors) -> Result<Self> {
        let cfg = model.config();
        if kv.num_layers() != cfg.num_layers || kv.keys.iter().chain(&kv.values).any(|m| m.cols() != cfg.kv_dim) {
            return Err(Error::Shape("KV tensors do not match the model".into()));
        }
        let len = kv.seq_len();
        let mut keys_rot = Vec::with_capacity(cfg.num_layers);
        for k in &kv.keys {
            let mut rot = k.as_slice().to_vec();
            for (p, row) in rot.chunks_exact_mut(cfg.kv_dim).enumerate() {
                model.rope().rotate_in_place(row, p);
            }
            keys_rot.push(rot);
        }
        Ok(Self {
            model,
            keys: kv.keys.iter().map(|m| m.as_slice().to_vec()).collect(),
            keys_rot,
            values: kv.values.iter().map(|m| m.as_slice().to_vec()).collect(),
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one text token at the next position and returns its logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<f32>> {
        let model = self.model;
        let cfg = model.config();
        if token as usize >= cfg.vocab_size {
            return Err(Error::Input(format!("token id {token} is outside the vocabulary")));
        }
        let kv_dim = cfg.kv_dim;
        let pos = self.len;
        let mut h = model.token_embed.row(token as usize).to_vec();
        let mut scores = Vec::with_capacity(pos + 1);
        let mut ctx = vec![0.0f32; kv_dim];
        let mut proj = vec![0.0f32; cfg.model_dim];
        for (l, layer) in model.layers.iter().enumerate() {
            let xn = rms_norm(&h, &layer.attn_norm, NORM_EPS);
            let q = layer.wq.forward(&xn);
            let k = layer.wk.forward(&xn);
            let v = layer.wv.forward(&xn);
            self.keys[l].extend_from_slice(&k);
            self.keys_rot[l].extend_from_slice(&model.rope().rotate(&k, pos));
            self.values[l].extend_from_slice(&v);
            let keys_rot = Matrix::from_vec(pos + 1, kv_dim, std::mem::take(&mut self.keys_rot[l]));
            let values = Matrix::from_vec(pos + 1, kv_dim, std::mem::take(&mut self.values[l]));
            let q_rot = model.rope().rotate(&q, pos);
            model.attend(&q_rot, &keys_rot, &values, pos, &mut scores, &mut ctx);
            self.keys_rot[l] = keys_rot.into_vec();
            self.values[l] = values.into_vec();
            layer.wo.forward_into(&ctx, &mut proj);
            for (x, o) in h.iter_mut().zip(&proj) {
                *x += o;
            }
            layer.mlp_residual(&mut h);
        }
        self.len += 1;
        let xn = rms_norm(&h, &model.final_norm, NORM_EPS);
        Ok(model.lm_head.forward(&xn))
    }

    /// Greedy loop starting from the logits of the last prefilled position.
    pub fn greedy(&mut self, first_logits: Vec<f32>, max_new: usize) -> Result<Generation> {
        let vocab = self.model.config().vocab_size;
        let mut tokens = Vec::with_capacity(max_new);
        let mut rows = Vec::with_capacity(max_new);
        let mut logits = first_logits;
        for i in 0..max_new {
            let tok = argmax(&logits) as u32;
            tokens.push(tok);
            let next = if i + 1 < max_new { Some(self.step(tok)?) } else { None };
            rows.push(logits);
            match next {
                Some(l) => logits = l,
                None => break,
            }
        }
        Ok(Generation {
            tokens,
            logits: if rows.is_empty() { Matrix::zeros(0, vocab) } else { Matrix::from_rows(vocab, &rows) },
        })
    }

    /// Current pre-RoPE cache contents.
    pub fn kv(&self) -> KvTensors {
        let kv_dim = self.model.config().kv_dim;
        KvTensors {
            keys: self.keys.iter().map(|k| Matrix::from_vec(self.len, kv_dim, k.clone())).collect(),
            values: self.values.iter().map(|v| Matrix::from_vec(self.len, kv_dim, v.clone())).collect(),
        }
    }
}
