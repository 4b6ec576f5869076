//! Reuse-error measurements: per-token attention-output error under stale
//! KV, its self/propagated decomposition, and earlier-vs-later recomputation.
//!
//! Everything here goes through a dense probe: every position is processed at
//! every layer, but chosen `(layer, image token)` pairs attend with the KV
//! cached under another prefix. That gives each image token an attention
//! output to compare even when a real reuse prefill would skip it.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KvSource, KvTensors, NoCache, ToyVlm};
use crate::plan::{recompute_count, RecomputePlan};
use crate::sequence::{Image, TokenSequence};
use crate::tensor::{l2_distance, Matrix};

/// Which layer's attention output an error is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLayer {
    /// 0-based decoder layer.
    Layer(usize),
    Final,
    /// Mean over all layers.
    Mean,
}

impl Default for ErrorLayer {
    fn default() -> Self {
        Self::Final
    }
}

impl fmt::Display for ErrorLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Layer(l) => write!(f, "layer{l}"),
            Self::Final => f.write_str("final"),
            Self::Mean => f.write_str("mean"),
        }
    }
}

/// One image reused under a different text prefix.
#[derive(Debug, Clone)]
pub struct ErrorCase {
    pub image: Image,
    /// Prefix the image's KV was cached under.
    pub cache_prefix: Vec<u32>,
    /// Prefix of the new request.
    pub new_prefix: Vec<u32>,
    /// Text after the image in the new request; where downstream error is read.
    pub suffix: Vec<u32>,
}

/// Per-position error norms for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProfile {
    pub label: String,
    pub layer: ErrorLayer,
    /// Absolute positions in the new request: the image tokens, then the suffix.
    pub positions: Vec<usize>,
    pub errors: Vec<f64>,
    /// How many leading entries of `errors` belong to image tokens.
    pub image_tokens: usize,
}

impl ErrorProfile {
    pub fn image_errors(&self) -> &[f64] {
        &self.errors[..self.image_tokens]
    }

    pub fn suffix_errors(&self) -> &[f64] {
        &self.errors[self.image_tokens..]
    }

    /// Summed error over the text that follows the image.
    pub fn downstream(&self) -> f64 {
        self.suffix_errors().iter().sum()
    }

    /// Mean error over the first and last quarter of the image tokens.
    pub fn quartile_means(&self) -> (f64, f64) {
        let img = self.image_errors();
        let q = (img.len() / 4).max(1);
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        (mean(&img[..q]), mean(&img[img.len() - q..]))
    }

    pub fn max(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

/// One row of the self/propagated decomposition, for image token `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionRow {
    /// Offset of the token within the image.
    pub k: usize,
    pub e_self: f64,
    /// `e_prop[i]` for image offsets `i < k`.
    pub e_prop: Vec<f64>,
    pub e_total: f64,
    /// `|e_total - e_self - sum(e_prop)|`, reported as data.
    pub residual: f64,
}

/// Full decomposition: row `k` for every image token.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDecomposition {
    pub e_self: Vec<f64>,
    /// `[source i][target k]`, zero unless `i < k`.
    pub e_prop: Vec<Vec<f64>>,
    pub e_total: Vec<f64>,
}

impl ErrorDecomposition {
    pub fn row(&self, k: usize) -> DecompositionRow {
        let e_prop: Vec<f64> = (0..k).map(|i| self.e_prop[i][k]).collect();
        let sum: f64 = e_prop.iter().sum();
        DecompositionRow {
            k,
            e_self: self.e_self[k],
            residual: (self.e_total[k] - self.e_self[k] - sum).abs(),
            e_total: self.e_total[k],
            e_prop,
        }
    }
}

/// Everything needed to probe one case: the new request, its inputs, and the
/// cached image KV laid out at the new request's positions.
pub struct Probe<'m> {
    model: &'m ToyVlm,
    seq: TokenSequence,
    input: Matrix,
    /// Cached KV at new-request positions; only image rows are meaningful.
    stale_kv: KvTensors,
    image_start: usize,
    fresh: Vec<Matrix>,
}

struct StaleSource<'a> {
    kv: &'a KvTensors,
    /// `[layer][position]`
    stale: &'a [Vec<bool>],
}

impl KvSource for StaleSource<'_> {
    fn cached(&self, layer: usize, position: usize) -> Option<(&[f32], &[f32])> {
        self.stale[layer][position].then(|| (self.kv.keys[layer].row(position), self.kv.values[layer].row(position)))
    }
}

impl<'m> Probe<'m> {
    pub fn new(model: &'m ToyVlm, case: &ErrorCase) -> Result<Self> {
        let cfg = model.config();
        let t = cfg.tokens_per_image;
        let emb = model.encode_image(&case.image)?;

        let cache_seq = TokenSequence::prompt(&case.cache_prefix, 1, &[], t);
        let cached = model.prefill_full(&cache_seq, std::slice::from_ref(&emb))?.kv;
        let cached = cached.slice(case.cache_prefix.len(), t);

        let seq = TokenSequence::prompt(&case.new_prefix, 1, &case.suffix, t);
        let n = seq.len();
        let image_start = case.new_prefix.len();
        let mut stale_kv = KvTensors {
            keys: vec![Matrix::zeros(n, cfg.kv_dim); cfg.num_layers],
            values: vec![Matrix::zeros(n, cfg.kv_dim); cfg.num_layers],
        };
        for l in 0..cfg.num_layers {
            for r in 0..t {
                stale_kv.keys[l].row_mut(image_start + r).copy_from_slice(cached.keys[l].row(r));
                stale_kv.values[l].row_mut(image_start + r).copy_from_slice(cached.values[l].row(r));
            }
        }
        let input = model.embed(&seq, &[emb])?;
        let all: Vec<usize> = (0..n).collect();
        let fresh = model
            .forward(&input, &vec![all; cfg.num_layers], &NoCache, true)?
            .attention
            .expect("attention captured");
        Ok(Self {
            model,
            seq,
            input,
            stale_kv,
            image_start,
            fresh,
        })
    }

    pub fn tokens_per_image(&self) -> usize {
        self.model.config().tokens_per_image
    }

    fn num_layers(&self) -> usize {
        self.model.config().num_layers
    }

    /// Per-layer stale flags over sequence positions, from per-layer image-offset flags.
    fn stale_mask(&self, stale_offsets: &[Vec<bool>]) -> Vec<Vec<bool>> {
        let n = self.seq.len();
        stale_offsets
            .iter()
            .map(|offs| {
                let mut m = vec![false; n];
                for (r, &s) in offs.iter().enumerate() {
                    m[self.image_start + r] = s;
                }
                m
            })
            .collect()
    }

    /// Error at every image and suffix position, given per-layer stale image offsets.
    pub fn measure(&self, stale_offsets: &[Vec<bool>], layer: ErrorLayer) -> Result<Vec<f64>> {
        let errs = self.measure_all_layers(stale_offsets)?;
        let lcount = self.num_layers();
        let pick = |l: usize| errs[l].clone();
        Ok(match layer {
            ErrorLayer::Layer(l) if l >= lcount => {
                return Err(Error::Input(format!("layer {l} is outside a {lcount}-layer model")));
            }
            ErrorLayer::Layer(l) => pick(l),
            ErrorLayer::Final => pick(lcount - 1),
            ErrorLayer::Mean => {
                let w = errs[0].len();
                (0..w)
                    .map(|i| errs.iter().map(|row| row[i]).sum::<f64>() / lcount as f64)
                    .collect()
            }
        })
    }

    fn measure_all_layers(&self, stale_offsets: &[Vec<bool>]) -> Result<Vec<Vec<f64>>> {
        let stale = self.stale_mask(stale_offsets);
        let n = self.seq.len();
        let all: Vec<usize> = (0..n).collect();
        let source = StaleSource {
            kv: &self.stale_kv,
            stale: &stale,
        };
        let reused = self
            .model
            .forward(&self.input, &vec![all; self.num_layers()], &source, true)?
            .attention
            .expect("attention captured");
        Ok(reused
            .iter()
            .zip(&self.fresh)
            .map(|(r, f)| (self.image_start..n).map(|p| l2_distance(r.row(p), f.row(p))).collect())
            .collect())
    }

    pub fn positions(&self) -> Vec<usize> {
        (self.image_start..self.seq.len()).collect()
    }

    fn profile(&self, label: String, stale_offsets: &[Vec<bool>], layer: ErrorLayer) -> Result<ErrorProfile> {
        Ok(ErrorProfile {
            label,
            layer,
            positions: self.positions(),
            errors: self.measure(stale_offsets, layer)?,
            image_tokens: self.tokens_per_image(),
        })
    }

    /// Stale offsets for a plan: at layer `l`, every image token past the first `floor(r_l * T)`.
    pub fn plan_offsets(&self, plan: &RecomputePlan) -> Vec<Vec<bool>> {
        let t = self.tokens_per_image();
        plan.ratios
            .iter()
            .map(|&r| {
                let keep = recompute_count(r, t);
                (0..t).map(|i| i >= keep).collect()
            })
            .collect()
    }

    /// Same stale offsets at every layer.
    pub fn uniform_offsets(&self, stale: impl Fn(usize) -> bool) -> Vec<Vec<bool>> {
        let t = self.tokens_per_image();
        vec![(0..t).map(stale).collect(); self.num_layers()]
    }
}

pub fn reuse_error_profile(model: &ToyVlm, case: &ErrorCase, plan: &RecomputePlan, layer: ErrorLayer) -> Result<ErrorProfile> {
    plan.validate_for(model.config().num_layers)?;
    let probe = Probe::new(model, case)?;
    probe.profile(format!("r={:.3}", plan.mean_ratio()), &probe.plan_offsets(plan), layer)
}

/// Self, propagated and total error for every image token.
pub fn decompose_error(model: &ToyVlm, case: &ErrorCase, layer: ErrorLayer) -> Result<ErrorDecomposition> {
    let probe = Probe::new(model, case)?;
    let t = probe.tokens_per_image();
    let total = probe.measure(&probe.uniform_offsets(|_| true), layer)?;
    let mut e_self = vec![0.0; t];
    let mut e_prop = vec![vec![0.0; t]; t];
    for i in 0..t {
        let errs = probe.measure(&probe.uniform_offsets(|j| j == i), layer)?;
        e_self[i] = errs[i];
        for k in i + 1..t {
            e_prop[i][k] = errs[k];
        }
    }
    Ok(ErrorDecomposition {
        e_self,
        e_prop,
        e_total: total[..t].to_vec(),
    })
}

/// Recompute the first versus the last `floor(b * T)` image tokens, at every layer.
pub fn head_vs_tail(model: &ToyVlm, case: &ErrorCase, budget: f64, layer: ErrorLayer) -> Result<(ErrorProfile, ErrorProfile)> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(Error::Input(format!("budget fraction {budget} is outside [0, 1]")));
    }
    let probe = Probe::new(model, case)?;
    let t = probe.tokens_per_image();
    let n = recompute_count(budget, t);
    let head = probe.profile(format!("head{budget}"), &probe.uniform_offsets(|i| i >= n), layer)?;
    let tail = probe.profile(format!("tail{budget}"), &probe.uniform_offsets(|i| i < t - n), layer)?;
    Ok((head, tail))
}

/// One row per position; a `position` column then one column per profile.
pub fn emit_profile_csv(profiles: &[ErrorProfile], path: &Path) -> Result<()> {
    if let Some(first) = profiles.first() {
        if let Some(bad) = profiles.iter().find(|p| p.positions != first.positions) {
            return Err(Error::Input(format!(
                "profile '{}' covers different positions than '{}'",
                bad.label, first.label
            )));
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let header: Vec<String> = std::iter::once("position".to_string())
        .chain(profiles.iter().map(|p| p.label.clone()))
        .collect();
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    if let Some(first) = profiles.first() {
        for (i, pos) in first.positions.iter().enumerate() {
            let row: Vec<String> = std::iter::once(pos.to_string())
                .chain(profiles.iter().map(|p| format!("{:e}", p.errors[i])))
                .collect();
            w.write_record(&row).map_err(|e| csv_io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parses a file written by [`emit_profile_csv`] into `(labels, positions, columns)`.
pub fn read_profile_csv(path: &Path) -> Result<(Vec<String>, Vec<usize>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header = r.headers().map_err(|e| csv_io(path, e))?.clone();
    let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut positions = Vec::new();
    let mut cols = vec![Vec::new(); labels.len()];
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = i + 2;
        let bad = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if rec.len() != labels.len() + 1 {
            return Err(bad(format!("expected {} fields, found {}", labels.len() + 1, rec.len())));
        }
        positions.push(rec[0].parse().map_err(|e| bad(format!("position: {e}")))?);
        for (c, field) in cols.iter_mut().zip(rec.iter().skip(1)) {
            c.push(field.parse().map_err(|e| bad(format!("value '{field}': {e}")))?);
        }
    }
    Ok((labels, positions, cols))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    let kind = e.kind();
    match kind {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        _ => Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        },
    }
}
