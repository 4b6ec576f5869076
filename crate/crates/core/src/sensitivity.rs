//! Layer sensitivity: how much decode logits move when an image's KV is
//! cached under a neutral prompt and reused at every layer, with only one
//! layer recomputing the first `floor(r * T)` image tokens.
//!
//! Requests are laid out as `prompt ++ image ++ [ANSWER_MARKER]`, so the
//! prompt precedes the image and its mismatch reaches the image KV.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{KvSource, KvTensors, ToyVlm};
use crate::plan::{ratio_to_units, recompute_count, GRID_MAX_UNITS};
use crate::sequence::{Image, TokenSequence};
use crate::store::{hash_image, KvCacheEntry};
use crate::tensor::{mse, Matrix};

/// Token closing every prompt layout, after the image.
pub const ANSWER_MARKER: u32 = 1;
/// Toy stand-in for "please describe this image".
pub const NEUTRAL_PROMPT: [u32; 6] = [2, 3, 4, 5, 6, 7];

#[derive(Debug, Clone, PartialEq)]
pub struct ProxySample {
    pub image: Image,
    pub original_prompt: Vec<u32>,
    pub neutral_prompt: Vec<u32>,
}

impl ProxySample {
    pub fn new(image: Image, original_prompt: Vec<u32>, neutral_prompt: Vec<u32>) -> Result<Self> {
        if original_prompt.is_empty() || neutral_prompt.is_empty() {
            return Err(Error::Input("proxy sample prompts must be non-empty".into()));
        }
        Ok(Self {
            image,
            original_prompt,
            neutral_prompt,
        })
    }

    /// Seeded sample: synthetic image, random task prompt, the fixed neutral prompt.
    pub fn synthetic(cfg: &ModelConfig, seed: u64, prompt_len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let original = random_prompt(&mut rng, cfg.vocab_size, prompt_len.max(1));
        Self {
            image: Image::synthetic(cfg.image_side, seed),
            original_prompt: original,
            neutral_prompt: NEUTRAL_PROMPT.iter().map(|&t| t % cfg.vocab_size as u32).collect(),
        }
    }

    /// The control: the image cached under its own prompt.
    pub fn control(&self) -> Self {
        Self {
            neutral_prompt: self.original_prompt.clone(),
            ..self.clone()
        }
    }

    fn layout(prompt: &[u32], t: usize) -> TokenSequence {
        TokenSequence::prompt(prompt, 1, &[ANSWER_MARKER], t)
    }
}

/// Task-prompt tokens drawn from the vocabulary, avoiding the placeholder and marker ids.
pub fn random_prompt(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<u32> {
    let lo = (ANSWER_MARKER + 1).min(vocab as u32 - 1);
    (0..len).map(|_| rng.random_range(lo..vocab as u32)).collect()
}

/// Full prefill of `neutral_prompt ++ image` and the image's slice of the KV.
pub fn build_mismatched_kv(model: &ToyVlm, sample: &ProxySample) -> Result<KvCacheEntry> {
    let t = model.config().tokens_per_image;
    let emb = model.encode_image(&sample.image)?;
    let seq = ProxySample::layout(&sample.neutral_prompt, t);
    let kv = model.prefill_full(&seq, &[emb])?.kv;
    Ok(KvCacheEntry {
        hash: hash_image(&sample.image)?,
        kv: kv.slice(sample.neutral_prompt.len(), t),
        origin_position: sample.neutral_prompt.len(),
        model_fingerprint: model.fingerprint(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineDecode {
    pub tokens: Vec<u32>,
    /// `[tokens.len(), vocab]`
    pub logits: Matrix,
}

/// Greedy decode of the original layout with correct KV.
pub fn baseline_decode(model: &ToyVlm, sample: &ProxySample, max_new: usize) -> Result<BaselineDecode> {
    if max_new == 0 {
        return Err(Error::Input("baseline decode needs at least one token".into()));
    }
    let emb = model.encode_image(&sample.image)?;
    let seq = ProxySample::layout(&sample.original_prompt, model.config().tokens_per_image);
    let g = model.generate(&seq, &[emb], max_new)?;
    Ok(BaselineDecode {
        tokens: g.tokens,
        logits: g.logits,
    })
}

struct InjectedKv<'a> {
    kv: &'a KvTensors,
    image_start: usize,
    t: usize,
    layer: usize,
    fresh: usize,
}

impl KvSource for InjectedKv<'_> {
    fn cached(&self, layer: usize, position: usize) -> Option<(&[f32], &[f32])> {
        let off = position.checked_sub(self.image_start).filter(|&o| o < self.t)?;
        if layer == self.layer && off < self.fresh {
            return None;
        }
        Some((self.kv.keys[layer].row(off), self.kv.values[layer].row(off)))
    }
}

/// Teacher-forced logits at the baseline text positions with the mismatched
/// image KV injected at every layer, except that `layer` (0-based) recomputes
/// the first `floor(ratio * T)` image tokens.
pub fn reuse_logits(model: &ToyVlm, sample: &ProxySample, mismatched: &KvCacheEntry, layer: usize, ratio: f64, baseline: &[u32]) -> Result<Matrix> {
    let cfg = model.config();
    if layer >= cfg.num_layers {
        return Err(Error::Input(format!("layer {layer} is outside a {}-layer model", cfg.num_layers)));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Input(format!("ratio {ratio} is outside [0, 1]")));
    }
    if baseline.is_empty() {
        return Err(Error::Input("baseline text is empty".into()));
    }
    let t = cfg.tokens_per_image;
    let emb = model.encode_image(&sample.image)?;
    let prompt = ProxySample::layout(&sample.original_prompt, t);
    let seq = prompt.extended(&baseline[..baseline.len() - 1]);
    let input = model.embed(&seq, &[emb])?;
    let all: Vec<usize> = (0..seq.len()).collect();
    let source = InjectedKv {
        kv: &mismatched.kv,
        image_start: sample.original_prompt.len(),
        t,
        layer,
        fresh: recompute_count(ratio, t),
    };
    let trace = model.forward(&input, &vec![all; cfg.num_layers], &source, false)?;
    let first = prompt.len() - 1;
    Ok(trace.logits.slice_rows(first, baseline.len()))
}

/// Per-layer sensitivity scores over a ratio grid, plus the no-recompute column.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTable {
    /// Strictly increasing, each on the plan grid.
    pub grid: Vec<f64>,
    /// `S_i(0)` per layer.
    pub at_zero: Vec<f64>,
    /// `[layer][grid index]`
    pub scores: Vec<Vec<f64>>,
    pub sample_count: usize,
    pub model_fingerprint: u64,
}

impl SensitivityTable {
    pub fn num_layers(&self) -> usize {
        self.scores.len()
    }

    /// Step-function lookup: the score at the largest measured ratio `<= r`.
    pub fn score(&self, layer: usize, r: f64) -> f64 {
        let idx = self.grid.partition_point(|&g| g <= r + 1e-12);
        if idx == 0 {
            self.at_zero[layer]
        } else {
            self.scores[layer][idx - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Input(m));
        if self.grid.is_empty() {
            return err("sensitivity grid is empty".into());
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return err("sensitivity grid is not strictly increasing".into());
        }
        if let Some(g) = self.grid.iter().find(|&&g| !matches!(ratio_to_units(g), Some(u) if (1..=GRID_MAX_UNITS).contains(&u))) {
            return err(format!("grid ratio {g} is not on the plan grid"));
        }
        if self.at_zero.len() != self.scores.len() || self.scores.iter().any(|row| row.len() != self.grid.len()) {
            return err("sensitivity table rows do not match the grid".into());
        }
        if self.at_zero.iter().chain(self.scores.iter().flatten()).any(|s| !(s.is_finite() && *s >= 0.0)) {
            return err("sensitivity scores must be finite and non-negative".into());
        }
        Ok(())
    }

    /// A warning when the table was profiled on a different model.
    pub fn fingerprint_warning(&self, model: &ToyVlm) -> Option<String> {
        (self.model_fingerprint != model.fingerprint()).then(|| {
            format!(
                "sensitivity table was profiled on model {:016x}, live model is {:016x}",
                self.model_fingerprint,
                model.fingerprint()
            )
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# vlcache sensitivity table\n");
        let _ = writeln!(s, "layers {}", self.num_layers());
        let grid: Vec<String> = self.grid.iter().map(|g| g.to_string()).collect();
        let _ = writeln!(s, "grid {}", grid.join(" "));
        let _ = writeln!(s, "sample_count {}", self.sample_count);
        let _ = writeln!(s, "fingerprint {:016x}", self.model_fingerprint);
        let _ = writeln!(s, "# layer r=0 then one column per grid ratio");
        for (l, (z, row)) in self.at_zero.iter().zip(&self.scores).enumerate() {
            let cells: Vec<String> = std::iter::once(z).chain(row).map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{} {}", l + 1, cells.join(" "));
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut layers = None;
        let mut grid: Option<Vec<f64>> = None;
        let mut sample_count = None;
        let mut fingerprint = None;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let mut parts = content.split_whitespace();
            let head = parts.next().expect("non-empty line");
            let rest: Vec<&str> = parts.collect();
            let single = |what: &str| -> Result<&str> {
                match rest.as_slice() {
                    [v] => Ok(v),
                    _ => Err(bad(line, format!("'{what}' takes exactly one value"))),
                }
            };
            match head {
                "layers" => layers = Some(single("layers")?.parse::<usize>().map_err(|e| bad(line, format!("layers: {e}")))?),
                "sample_count" => {
                    sample_count = Some(single("sample_count")?.parse::<usize>().map_err(|e| bad(line, format!("sample_count: {e}")))?)
                }
                "fingerprint" => {
                    fingerprint = Some(u64::from_str_radix(single("fingerprint")?, 16).map_err(|e| bad(line, format!("fingerprint: {e}")))?)
                }
                "grid" => {
                    grid = Some(
                        rest.iter()
                            .map(|v| v.parse::<f64>().map_err(|e| bad(line, format!("grid value '{v}': {e}"))))
                            .collect::<Result<_>>()?,
                    )
                }
                idx => {
                    let layer: usize = idx.parse().map_err(|_| bad(line, format!("unexpected entry '{idx}'")))?;
                    let width = grid.as_ref().ok_or_else(|| bad(line, "score row before the grid line".into()))?.len() + 1;
                    if rest.len() != width {
                        return Err(bad(line, format!("layer {layer} has {} scores, expected {width}", rest.len())));
                    }
                    if layer != rows.len() + 1 {
                        return Err(bad(line, format!("expected layer {}, found {layer}", rows.len() + 1)));
                    }
                    let vals = rest
                        .iter()
                        .map(|v| v.parse::<f64>().map_err(|e| bad(line, format!("score '{v}': {e}"))))
                        .collect::<Result<Vec<_>>>()?;
                    rows.push((line, vals));
                }
            }
        }
        let last = text.lines().count().max(1);
        let missing = |what: &str| bad(last, format!("missing '{what}' line"));
        let layers = layers.ok_or_else(|| missing("layers"))?;
        let grid = grid.ok_or_else(|| missing("grid"))?;
        if rows.len() != layers {
            return Err(bad(last, format!("header declares {layers} layers, found {} rows", rows.len())));
        }
        let table = Self {
            grid,
            at_zero: rows.iter().map(|(_, r)| r[0]).collect(),
            scores: rows.iter().map(|(_, r)| r[1..].to_vec()).collect(),
            sample_count: sample_count.ok_or_else(|| missing("sample_count"))?,
            model_fingerprint: fingerprint.ok_or_else(|| missing("fingerprint"))?,
        };
        table.validate().map_err(|e| bad(last, e.to_string()))?;
        Ok(table)
    }
}

pub fn emit_table(table: &SensitivityTable, path: &Path) -> Result<()> {
    std::fs::write(path, table.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_table(path: &Path) -> Result<SensitivityTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SensitivityTable::from_text(&text, path)
}

/// Mean over samples of the per-position MSE between baseline and reuse logits.
pub fn profile(model: &ToyVlm, dataset: &[ProxySample], grid: &[f64], max_new: usize) -> Result<SensitivityTable> {
    if dataset.is_empty() {
        return Err(Error::Input("sensitivity profiling needs at least one sample".into()));
    }
    let layers = model.config().num_layers;
    let mut at_zero = vec![0.0; layers];
    let mut scores = vec![vec![0.0; grid.len()]; layers];
    for sample in dataset {
        let mismatched = build_mismatched_kv(model, sample)?;
        let base = baseline_decode(model, sample, max_new)?;
        let mse_at = |l: usize, r: f64| -> Result<f64> {
            let z = reuse_logits(model, sample, &mismatched, l, r, &base.tokens)?;
            Ok(mean_row_mse(&base.logits, &z))
        };
        for l in 0..layers {
            at_zero[l] += mse_at(l, 0.0)?;
            for (j, &r) in grid.iter().enumerate() {
                scores[l][j] += mse_at(l, r)?;
            }
        }
    }
    let n = dataset.len() as f64;
    at_zero.iter_mut().chain(scores.iter_mut().flatten()).for_each(|s| *s /= n);
    let table = SensitivityTable {
        grid: grid.to_vec(),
        at_zero,
        scores,
        sample_count: dataset.len(),
        model_fingerprint: model.fingerprint(),
    };
    table.validate()?;
    Ok(table)
}

/// Mean over rows of the full-vocabulary MSE.
pub fn mean_row_mse(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "logit shapes differ");
    if a.rows() == 0 {
        return 0.0;
    }
    (0..a.rows()).map(|i| mse(a.row(i), b.row(i))).sum::<f64>() / a.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ToyVlm {
        ToyVlm::init(ModelConfig::tiny(4, 31)).unwrap()
    }

    fn sample(m: &ToyVlm, seed: u64) -> ProxySample {
        ProxySample::synthetic(m.config(), seed, 8)
    }

    #[test]
    fn sample_validation() {
        let img = Image::synthetic(16, 1);
        assert!(ProxySample::new(img.clone(), vec![], vec![1]).is_err());
        assert!(ProxySample::new(img, vec![9], vec![1]).is_ok());
    }

    #[test]
    fn mismatched_kv_shape_and_control() {
        let m = model();
        let s = sample(&m, 1);
        let e = build_mismatched_kv(&m, &s).unwrap();
        assert_eq!(e.kv.num_layers(), 4);
        assert!(e.kv.keys.iter().all(|k| k.shape() == (16, 32)));

        // with the original prompt the cached KV is the correct KV
        let ctl = build_mismatched_kv(&m, &s.control()).unwrap();
        let emb = m.encode_image(&s.image).unwrap();
        let seq = ProxySample::layout(&s.original_prompt, 16);
        let full = m.prefill_full(&seq, &[emb]).unwrap().kv.slice(8, 16);
        assert_eq!(ctl.kv, full);
    }

    #[test]
    fn neutral_prompts_agree_only_at_layer_zero() {
        let m = model();
        let s = sample(&m, 2);
        let mut other = s.clone();
        other.neutral_prompt = vec![40, 41, 42];
        let a = build_mismatched_kv(&m, &s).unwrap();
        let b = build_mismatched_kv(&m, &other).unwrap();
        assert_eq!(a.kv.keys[0], b.kv.keys[0]);
        assert_eq!(a.kv.values[0], b.kv.values[0]);
        for l in 1..4 {
            assert_ne!(a.kv.keys[l], b.kv.keys[l], "layer {l}");
        }
    }

    #[test]
    fn baseline_is_deterministic() {
        let m = model();
        let s = sample(&m, 3);
        let a = baseline_decode(&m, &s, 6).unwrap();
        assert_eq!(a, baseline_decode(&m, &s, 6).unwrap());
        assert_eq!(a.logits.shape(), (6, 64));
        assert!(baseline_decode(&m, &s, 0).is_err());
    }

    #[test]
    fn baseline_golden_text() {
        let m = model();
        let b = baseline_decode(&m, &sample(&m, 3), 6).unwrap();
        assert_eq!(b.tokens, BASELINE_GOLDEN);
    }

    // Frozen from the first run of the test above.
    const BASELINE_GOLDEN: [u32; 6] = [4, 23, 10, 9, 2, 53];

    #[test]
    fn reuse_logits_shape_and_zero_ratio() {
        let m = model();
        let s = sample(&m, 4);
        let e = build_mismatched_kv(&m, &s).unwrap();
        let b = baseline_decode(&m, &s, 5).unwrap();
        let z0 = reuse_logits(&m, &s, &e, 2, 0.0, &b.tokens).unwrap();
        assert_eq!(z0.shape(), b.logits.shape());
        // r = 0 at any layer is plain all-layer reuse
        for l in [0, 1, 3] {
            assert_eq!(reuse_logits(&m, &s, &e, l, 0.0, &b.tokens).unwrap(), z0);
        }
        assert!(reuse_logits(&m, &s, &e, 4, 0.1, &b.tokens).is_err());
    }

    #[test]
    fn control_reuse_reproduces_baseline() {
        let m = model();
        let s = sample(&m, 5).control();
        let e = build_mismatched_kv(&m, &s).unwrap();
        let b = baseline_decode(&m, &s, 5).unwrap();
        let z = reuse_logits(&m, &s, &e, 1, 0.3, &b.tokens).unwrap();
        assert!(mean_row_mse(&b.logits, &z) <= 1e-10);
        assert_eq!(mean_row_mse(&z, &z), 0.0);
    }

    #[test]
    fn single_sample_profile_is_that_sample() {
        let m = model();
        let s = sample(&m, 6);
        let t = profile(&m, std::slice::from_ref(&s), &[0.1, 0.3], 4).unwrap();
        let e = build_mismatched_kv(&m, &s).unwrap();
        let b = baseline_decode(&m, &s, 4).unwrap();
        let z = reuse_logits(&m, &s, &e, 2, 0.3, &b.tokens).unwrap();
        assert_eq!(t.scores[2][1], mean_row_mse(&b.logits, &z));
        assert_eq!(t.sample_count, 1);
        assert!(profile(&m, &[], &[0.1], 4).is_err());
    }

    #[test]
    fn control_profile_is_null() {
        let m = model();
        let data: Vec<_> = (0..3).map(|i| sample(&m, 10 + i).control()).collect();
        let t = profile(&m, &data, &[0.1, 0.2, 0.3], 4).unwrap();
        assert!(t.at_zero.iter().chain(t.scores.iter().flatten()).all(|&s| s <= 1e-6));
    }

    #[test]
    fn pinned_toy_table() {
        let m = model();
        let data: Vec<_> = (0..5).map(|i| sample(&m, 100 + i)).collect();
        let t = profile(&m, &data, &[0.1, 0.2, 0.3], 4).unwrap();
        for (l, row) in PINNED_TABLE.iter().enumerate() {
            let got = std::iter::once(t.at_zero[l]).chain(t.scores[l].iter().copied());
            for (g, w) in got.zip(row) {
                assert!((g - w).abs() <= 1e-9 * w.abs().max(1e-3), "layer {l}: {g} vs {w}");
            }
        }
    }

    // Frozen from the first run of the test above: r = 0, 0.1, 0.2, 0.3.
    const PINNED_TABLE: [[f64; 4]; 4] = [
        [0.159_428_754_317_381_3, 0.159_428_754_317_381_3, 0.159_428_754_317_381_3, 0.159_428_754_317_381_3],
        [0.159_428_754_317_381_3, 0.152_107_987_978_455_93, 0.139_526_160_112_501_02, 0.125_962_646_068_550_15],
        [0.159_428_754_317_381_3, 0.150_396_040_016_137_88, 0.135_440_005_069_093_6, 0.128_021_605_269_970_9],
        [0.159_428_754_317_381_3, 0.152_121_463_162_437_3, 0.146_413_449_655_511_92, 0.143_886_252_040_459_18],
    ];

    #[test]
    fn table_text_round_trip() {
        let t = SensitivityTable {
            grid: vec![0.1, 0.2],
            at_zero: vec![0.5, 1.0 / 3.0],
            scores: vec![vec![0.25, 0.125], vec![1e-7, 0.0]],
            sample_count: 5,
            model_fingerprint: 0xdead_beef_0123_4567,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        emit_table(&t, &path).unwrap();
        assert_eq!(load_table(&path).unwrap(), t);
    }

    #[test]
    fn hand_written_table_parses() {
        let text = "\
# a 2x2 table
layers 2
grid 0.1 0.2
sample_count 3
fingerprint 00000000000000ff
1 0.9 0.5 0.25
2 0.4 0.3 0.3
";
        let t = SensitivityTable::from_text(text, Path::new("fixture.txt")).unwrap();
        assert_eq!(t.grid, vec![0.1, 0.2]);
        assert_eq!(t.at_zero, vec![0.9, 0.4]);
        assert_eq!(t.scores, vec![vec![0.5, 0.25], vec![0.3, 0.3]]);
        assert_eq!(t.model_fingerprint, 255);
        assert_eq!(t.score(0, 0.15), 0.5);
        assert_eq!(t.score(0, 0.05), 0.9);
        assert_eq!(t.score(1, 0.3), 0.3);
    }

    #[test]
    fn malformed_table_reports_line() {
        let text = "layers 2\ngrid 0.1 0.2\nsample_count 3\nfingerprint ff\n1 0.9 0.5 0.25\n2 0.4 oops 0.3\n";
        match SensitivityTable::from_text(text, Path::new("t")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
        let short = "layers 2\ngrid 0.1\nsample_count 1\nfingerprint 1\n1 0.1\n";
        assert!(matches!(SensitivityTable::from_text(short, Path::new("t")), Err(Error::Parse { line: 5, .. })));
    }

    #[test]
    fn fingerprint_mismatch_warns() {
        let m = model();
        let mut t = profile(&m, &[sample(&m, 1)], &[0.1], 2).unwrap();
        assert!(t.fingerprint_warning(&m).is_none());
        t.model_fingerprint ^= 1;
        assert!(t.fingerprint_warning(&m).unwrap().contains("live model"));
    }
}
