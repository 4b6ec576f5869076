//! Deterministic toy vision-language transformer.
//!
//! A patch encoder (patchify, linear projection with learned positions, one
//! bidirectional attention block) feeds a pre-norm causal decoder with RMS
//! normalization, rotary keys and a gated SiLU MLP. All weights come from a
//! ChaCha stream seeded by [`ModelConfig::seed`], so `(config, seed)` fully
//! determines the model.
//!
//! Keys are exposed pre-rotation everywhere outside the attention kernel.

mod forward;
mod rope;
mod weights;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use forward::{DecodeState, ForwardTrace, Generation, KvSource, NoCache, PrefillOutput};
pub use rope::Rope;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::sequence::{Image, SegmentKind, TokenSequence};
use crate::tensor::{dot, rms_norm, softmax_in_place, Linear, Matrix};

pub(crate) const NORM_EPS: f32 = 1e-6;

/// Per-layer pre-RoPE keys and values, each `[seq_len, kv_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvTensors {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

impl KvTensors {
    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn seq_len(&self) -> usize {
        self.keys.first().map_or(0, Matrix::rows)
    }

    /// Rows `start..start + len` of every layer.
    pub fn slice(&self, start: usize, len: usize) -> KvTensors {
        KvTensors {
            keys: self.keys.iter().map(|m| m.slice_rows(start, len)).collect(),
            values: self.values.iter().map(|m| m.slice_rows(start, len)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.keys.iter().chain(&self.values).all(Matrix::is_finite)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderWeights {
    pub patch_proj: Linear,
    pub pos_embed: Matrix,
    pub norm: Vec<f32>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    pub attn_norm: Vec<f32>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
}

#[derive(Debug, Clone)]
pub struct ToyVlm {
    config: ModelConfig,
    pub(crate) token_embed: Matrix,
    pub(crate) encoder: EncoderWeights,
    pub(crate) layers: Vec<DecoderLayer>,
    pub(crate) final_norm: Vec<f32>,
    pub(crate) lm_head: Linear,
    rope: Rope,
    fingerprint: u64,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn gaussian(&mut self, n: usize, scale: f64) -> Vec<f32> {
        (0..n)
            .map(|_| (self.normal.sample(&mut self.rng) * scale) as f32)
            .collect()
    }

    fn linear(&mut self, in_dim: usize, out_dim: usize, bias: bool) -> Linear {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weight = self.gaussian(in_dim * out_dim, scale);
        let bias = bias.then(|| self.gaussian(out_dim, scale));
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }
}

impl ToyVlm {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let kv = config.kv_dim;
        let t = config.tokens_per_image;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            normal: Normal::new(0.0, 1.0).expect("unit normal"),
        };

        let token_embed = Matrix::from_vec(config.vocab_size, d, init.gaussian(config.vocab_size * d, 1.0));
        let encoder = EncoderWeights {
            patch_proj: init.linear(config.patch_dim(), d, true),
            pos_embed: Matrix::from_vec(t, d, init.gaussian(t * d, 1.0)),
            norm: vec![1.0; d],
            wq: init.linear(d, d, false),
            wk: init.linear(d, d, false),
            wv: init.linear(d, d, false),
            wo: init.linear(d, d, false),
        };
        let layers = (0..config.num_layers)
            .map(|_| DecoderLayer {
                attn_norm: vec![1.0; d],
                wq: init.linear(d, kv, false),
                wk: init.linear(d, kv, false),
                wv: init.linear(d, kv, false),
                wo: init.linear(kv, d, false),
                mlp_norm: vec![1.0; d],
                w_gate: init.linear(d, config.mlp_dim(), false),
                w_up: init.linear(d, config.mlp_dim(), false),
                w_down: init.linear(config.mlp_dim(), d, false),
            })
            .collect();
        let lm_head = init.linear(d, config.vocab_size, false);

        Ok(Self::assemble(config, token_embed, encoder, layers, vec![1.0; d], lm_head))
    }

    fn assemble(
        config: ModelConfig,
        token_embed: Matrix,
        encoder: EncoderWeights,
        layers: Vec<DecoderLayer>,
        final_norm: Vec<f32>,
        lm_head: Linear,
    ) -> Self {
        let rope = Rope::new(config.num_heads, config.head_dim(), config.rope_base);
        let mut model = Self {
            config,
            token_embed,
            encoder,
            layers,
            final_norm,
            lm_head,
            rope,
            fingerprint: 0,
        };
        model.fingerprint = model.compute_fingerprint();
        model
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.config.to_toml_string().as_bytes());
        self.for_each_param(|p| {
            for x in p {
                h.update(x.to_le_bytes());
            }
        });
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Visits every parameter tensor in a fixed order (shared by hashing and persistence).
    pub(crate) fn for_each_param(&self, mut f: impl FnMut(&[f32])) {
        f(self.token_embed.as_slice());
        let e = &self.encoder;
        f(&e.patch_proj.weight);
        f(e.patch_proj.bias.as_deref().unwrap_or(&[]));
        f(e.pos_embed.as_slice());
        f(&e.norm);
        for lin in [&e.wq, &e.wk, &e.wv, &e.wo] {
            f(&lin.weight);
        }
        for l in &self.layers {
            f(&l.attn_norm);
            for lin in [&l.wq, &l.wk, &l.wv, &l.wo] {
                f(&lin.weight);
            }
            f(&l.mlp_norm);
            for lin in [&l.w_gate, &l.w_up, &l.w_down] {
                f(&lin.weight);
            }
        }
        f(&self.final_norm);
        f(&self.lm_head.weight);
    }

    pub(crate) fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut [f32])) {
        f(self.token_embed.as_mut_slice());
        let e = &mut self.encoder;
        f(&mut e.patch_proj.weight);
        f(e.patch_proj.bias.as_deref_mut().unwrap_or(&mut []));
        f(e.pos_embed.as_mut_slice());
        f(&mut e.norm);
        for lin in [&mut e.wq, &mut e.wk, &mut e.wv, &mut e.wo] {
            f(&mut lin.weight);
        }
        for l in &mut self.layers {
            f(&mut l.attn_norm);
            for lin in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo] {
                f(&mut lin.weight);
            }
            f(&mut l.mlp_norm);
            for lin in [&mut l.w_gate, &mut l.w_up, &mut l.w_down] {
                f(&mut lin.weight);
            }
        }
        f(&mut self.final_norm);
        f(&mut self.lm_head.weight);
    }

    pub(crate) fn refresh_fingerprint(&mut self) {
        self.fingerprint = self.compute_fingerprint();
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// 64-bit identity of `(config, weights)`; cache entries are tagged with it.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn rope(&self) -> &Rope {
        &self.rope
    }

    pub fn apply_rope(&self, key: &[f32], position: usize) -> Vec<f32> {
        self.rope.rotate(key, position)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        weights::save(self, path)
    }

    pub fn load_weights(config: ModelConfig, path: &Path) -> Result<Self> {
        weights::load(config, path)
    }

    /// Patch encoder: `[image_side, image_side]` pixels to `[T, d]` embeddings.
    pub fn encode_image(&self, image: &Image) -> Result<Matrix> {
        let cfg = &self.config;
        let p = cfg.patch_size;
        if image.width() % p != 0 || image.height() % p != 0 {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible into {p}x{p} patches",
                image.width(),
                image.height()
            )));
        }
        let (nx, ny) = (image.width() / p, image.height() / p);
        if nx * ny != cfg.tokens_per_image {
            return Err(Error::Shape(format!(
                "{}x{} image yields {} patches, model expects {}",
                image.width(),
                image.height(),
                nx * ny,
                cfg.tokens_per_image
            )));
        }
        let d = cfg.model_dim;
        let enc = &self.encoder;
        let mut x = Matrix::zeros(nx * ny, d);
        let mut patch = vec![0.0f32; p * p];
        for py in 0..ny {
            for px in 0..nx {
                for dy in 0..p {
                    for dx in 0..p {
                        let pix = image.pixels()[(py * p + dy) * image.width() + px * p + dx];
                        patch[dy * p + dx] = f32::from(pix) / 255.0;
                    }
                }
                let t = py * nx + px;
                let row = x.row_mut(t);
                enc.patch_proj.forward_into(&patch, row);
                for (v, pe) in row.iter_mut().zip(enc.pos_embed.row(t)) {
                    *v += pe;
                }
            }
        }

        // One bidirectional pre-norm attention block with a residual connection.
        let n = x.rows();
        let heads = cfg.num_heads;
        let hd = cfg.encoder_head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut q = Matrix::zeros(n, d);
        let mut k = Matrix::zeros(n, d);
        let mut v = Matrix::zeros(n, d);
        for t in 0..n {
            let xn = rms_norm(x.row(t), &enc.norm, NORM_EPS);
            enc.wq.forward_into(&xn, q.row_mut(t));
            enc.wk.forward_into(&xn, k.row_mut(t));
            enc.wv.forward_into(&xn, v.row_mut(t));
        }
        let mut scores = vec![0.0f32; n];
        let mut ctx = vec![0.0f32; d];
        let mut out = vec![0.0f32; d];
        for t in 0..n {
            ctx.fill(0.0);
            for h in 0..heads {
                let qh = &q.row(t)[h * hd..(h + 1) * hd];
                for (s, j) in scores.iter_mut().zip(0..n) {
                    *s = dot(qh, &k.row(j)[h * hd..(h + 1) * hd]) * scale;
                }
                softmax_in_place(&mut scores);
                let ch = &mut ctx[h * hd..(h + 1) * hd];
                for (j, &a) in scores.iter().enumerate() {
                    for (c, vv) in ch.iter_mut().zip(&v.row(j)[h * hd..(h + 1) * hd]) {
                        *c += a * vv;
                    }
                }
            }
            enc.wo.forward_into(&ctx, &mut out);
            for (xv, o) in x.row_mut(t).iter_mut().zip(&out) {
                *xv += o;
            }
        }
        Ok(x)
    }

    /// Input rows for every position: token embeddings for text, encoder output for images.
    pub fn embed(&self, seq: &TokenSequence, image_embeds: &[Matrix]) -> Result<Matrix> {
        self.check_inputs(seq, image_embeds)?;
        let d = self.config.model_dim;
        let mut x = Matrix::zeros(seq.len(), d);
        for seg in seq.segments() {
            match seg.kind {
                SegmentKind::Text => {
                    for p in seg.range() {
                        let id = seq.ids()[p] as usize;
                        x.row_mut(p).copy_from_slice(self.token_embed.row(id));
                    }
                }
                SegmentKind::Image => {
                    let emb = &image_embeds[seg.image_index.expect("image index")];
                    for (off, p) in seg.range().enumerate() {
                        x.row_mut(p).copy_from_slice(emb.row(off));
                    }
                }
            }
        }
        Ok(x)
    }

    pub(crate) fn check_inputs(&self, seq: &TokenSequence, image_embeds: &[Matrix]) -> Result<()> {
        seq.validate(self.config.tokens_per_image)?;
        if seq.num_images() != image_embeds.len() {
            return Err(Error::Input(format!(
                "sequence has {} image segments but {} embedding blocks were supplied",
                seq.num_images(),
                image_embeds.len()
            )));
        }
        for (i, e) in image_embeds.iter().enumerate() {
            if e.shape() != (self.config.tokens_per_image, self.config.model_dim) {
                return Err(Error::Shape(format!(
                    "image {i} embeddings are {:?}, expected [{}, {}]",
                    e.shape(),
                    self.config.tokens_per_image,
                    self.config.model_dim
                )));
            }
        }
        for seg in seq.segments().iter().filter(|s| s.kind == SegmentKind::Text) {
            if let Some(&bad) = seq.ids()[seg.range()]
                .iter()
                .find(|&&id| id as usize >= self.config.vocab_size)
            {
                return Err(Error::Input(format!(
                    "token id {bad} is outside the vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
