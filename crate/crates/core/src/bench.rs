//! Prefill latency and analytic FLOPs across origin, encoder-reuse,
//! static-ratio and planned-ratio configurations.
//!
//! Requests are `prefix ++ images ++ question`, with a quarter of the text
//! tokens before the images. A setup pass fills the store with each image
//! under a different prefix, so reuse configurations face a real prefix
//! mismatch. Timings cover the prefill call only; speedups are compute-path
//! analogs of time-to-first-token, not serving-stack measurements.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ToyVlm;
use crate::plan::RecomputePlan;
use crate::reuse::{fill_store, full_prefill_flops, prefill_with_reuse, ReuseRequest};
use crate::sensitivity::random_prompt;
use crate::sequence::{Image, TokenSequence};
use crate::store::{hash_image, CacheStore};

pub const MIN_REPETITIONS: usize = 3;
pub const DEFAULT_REPETITIONS: usize = 5;
pub const DEFAULT_WARMUP: usize = 2;
pub const DEFAULT_TEXT_TOKENS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioKind {
    /// Full compute, encoder included; never touches the store.
    Origin,
    /// Cached encoder output, every decoder layer recomputed.
    NoVit,
    Static(f64),
    Dynamic(RecomputePlan),
}

impl ScenarioKind {
    pub fn name(&self) -> String {
        match self {
            Self::Origin => "origin".into(),
            Self::NoVit => "no_vit".into(),
            Self::Static(r) => format!("static({r})"),
            Self::Dynamic(p) => format!("dynamic({:.4})", p.mean_ratio()),
        }
    }

    pub fn plan(&self, layers: usize) -> Option<RecomputePlan> {
        match self {
            Self::Origin => None,
            Self::NoVit => Some(RecomputePlan::full(layers)),
            Self::Static(r) => Some(RecomputePlan::uniform(*r, layers)),
            Self::Dynamic(p) => Some(p.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchScenario {
    pub kind: ScenarioKind,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Seeds the images and text of the request.
    pub seed: u64,
}

impl BenchScenario {
    pub fn new(kind: ScenarioKind, image_tokens: usize) -> Self {
        Self {
            kind,
            image_tokens,
            text_tokens: DEFAULT_TEXT_TOKENS,
            repetitions: DEFAULT_REPETITIONS,
            warmup: DEFAULT_WARMUP,
            seed: 0,
        }
    }

    pub fn validate(&self, tokens_per_image: usize) -> Result<()> {
        if self.repetitions < MIN_REPETITIONS {
            return Err(Error::Input(format!(
                "{} repetitions requested, at least {MIN_REPETITIONS} are needed",
                self.repetitions
            )));
        }
        if self.image_tokens % tokens_per_image != 0 {
            return Err(Error::Input(format!(
                "{} image tokens is not a multiple of {tokens_per_image} tokens per image",
                self.image_tokens
            )));
        }
        if self.text_tokens == 0 {
            return Err(Error::Input("bench requests need at least one text token".into()));
        }
        Ok(())
    }

    /// The request inputs, plus the prefix used when the store was filled.
    pub fn inputs(&self, model: &ToyVlm) -> (TokenSequence, Vec<Image>, TokenSequence) {
        let cfg = model.config();
        let t = cfg.tokens_per_image;
        let n = self.image_tokens / t;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let pre = self.text_tokens / 4;
        let prefix = random_prompt(&mut rng, cfg.vocab_size, pre);
        let question = random_prompt(&mut rng, cfg.vocab_size, self.text_tokens - pre);
        let fill_prefix = random_prompt(&mut rng, cfg.vocab_size, pre.max(1) + 3);
        let images = (0..n as u64)
            .map(|i| Image::synthetic(cfg.image_side, self.seed.wrapping_mul(1_000_003).wrapping_add(i)))
            .collect();
        (
            TokenSequence::prompt(&prefix, n, &question, t),
            images,
            TokenSequence::prompt(&fill_prefix, n, &[], t),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scenario: String,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub median_ms: f64,
    /// Image hashing time, reported apart from the prefill.
    pub hash_ms: f64,
    pub flops: u64,
    /// `None` until compared against an origin row.
    pub speedup: Option<f64>,
    pub fallbacks: usize,
    pub mean_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

const COLUMNS: [&str; 9] = [
    "scenario",
    "image_tokens",
    "text_tokens",
    "median_ms",
    "hash_ms",
    "flops",
    "speedup",
    "fallbacks",
    "mean_ratio",
];

/// Columns whose values depend on wall-clock timing.
pub const TIMING_COLUMNS: [&str; 3] = ["median_ms", "hash_ms", "speedup"];

impl MetricsReport {
    fn cells(row: &MetricsRow) -> [String; 9] {
        [
            row.scenario.clone(),
            row.image_tokens.to_string(),
            row.text_tokens.to_string(),
            format!("{:.6}", row.median_ms),
            format!("{:.6}", row.hash_ms),
            row.flops.to_string(),
            row.speedup.map_or(String::new(), |s| format!("{s:.6}")),
            row.fallbacks.to_string(),
            row.mean_ratio.to_string(),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS).expect("in-memory write");
        for row in &self.rows {
            w.write_record(Self::cells(row)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let bad = |line: usize, reason: String| Error::Parse {
            path: "<metrics csv>".into(),
            line,
            reason,
        };
        let header = r.headers().map_err(|e| bad(1, e.to_string()))?;
        if header.iter().ne(COLUMNS) {
            return Err(bad(1, "unexpected metrics header".into()));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| bad(line, e.to_string()))?;
            let f = |j: usize| rec.get(j).unwrap_or_default();
            let num = |j: usize| f(j).parse::<f64>().map_err(|e| bad(line, format!("{}: {e}", COLUMNS[j])));
            let int = |j: usize| f(j).parse::<u64>().map_err(|e| bad(line, format!("{}: {e}", COLUMNS[j])));
            rows.push(MetricsRow {
                scenario: f(0).to_string(),
                image_tokens: int(1)? as usize,
                text_tokens: int(2)? as usize,
                median_ms: num(3)?,
                hash_ms: num(4)?,
                flops: int(5)?,
                speedup: if f(6).is_empty() { None } else { Some(num(6)?) },
                fallbacks: int(7)? as usize,
                mean_ratio: num(8)?,
            });
        }
        Ok(Self { rows })
    }

    /// Right-aligned columns for terminals.
    pub fn to_text(&self) -> String {
        let body: Vec<[String; 9]> = self.rows.iter().map(Self::cells).collect();
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|j| body.iter().map(|r| r[j].len()).chain([COLUMNS[j].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |cells: &[&str], out: &mut String| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&COLUMNS, &mut out);
        for r in &body {
            line(&r.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
        }
        out
    }

    /// Sets each row's speedup against the origin row with the same input lengths.
    pub fn fill_speedups(&mut self) {
        let origins: Vec<(usize, usize, f64)> = self
            .rows
            .iter()
            .filter(|r| r.scenario == "origin")
            .map(|r| (r.image_tokens, r.text_tokens, r.median_ms))
            .collect();
        for row in &mut self.rows {
            if row.scenario == "origin" {
                row.speedup = Some(1.0);
                continue;
            }
            row.speedup = origins
                .iter()
                .find(|(i, t, _)| *i == row.image_tokens && *t == row.text_tokens)
                .map(|(_, _, ms)| ms / row.median_ms.max(1e-9));
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Cache-miss pass for a scenario's images (untimed).
pub fn setup_fill(model: &ToyVlm, store: &CacheStore, scenario: &BenchScenario) -> Result<()> {
    scenario.validate(model.config().tokens_per_image)?;
    if scenario.kind == ScenarioKind::Origin {
        return Ok(());
    }
    let (_, images, fill_seq) = scenario.inputs(model);
    fill_store(model, store, &fill_seq, &images)?;
    Ok(())
}

/// Runs one scenario. Reuse configurations need a store already filled by
/// [`setup_fill`]; a cold store is a setup error.
pub fn run_scenario(model: &ToyVlm, store: &CacheStore, scenario: &BenchScenario) -> Result<MetricsRow> {
    let cfg = model.config();
    scenario.validate(cfg.tokens_per_image)?;
    let (seq, images, _) = scenario.inputs(model);

    let hash_start = Instant::now();
    let hashes = images.iter().map(hash_image).collect::<Result<Vec<_>>>()?;
    let hash_ms = hash_start.elapsed().as_secs_f64() * 1e3;

    let mut times = Vec::with_capacity(scenario.repetitions);
    let (flops, fallbacks, mean_ratio) = match scenario.kind.plan(cfg.num_layers) {
        None => {
            for i in 0..scenario.warmup + scenario.repetitions {
                let start = Instant::now();
                let embeds = images.iter().map(|img| model.encode_image(img)).collect::<Result<Vec<_>>>()?;
                let out = model.prefill_full(&seq, &embeds)?;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                std::hint::black_box(&out);
                if i >= scenario.warmup {
                    times.push(ms);
                }
            }
            (full_prefill_flops(&seq, cfg).total(), 0, 1.0)
        }
        Some(plan) => {
            let stamp = model.stamp();
            for h in &hashes {
                let warm = store.get_encoder(h, &stamp)?.is_some() && store.get_kv(h, &stamp)?.is_some();
                if !warm {
                    return Err(Error::Setup(format!(
                        "store has no cache entries for image {h}; run the setup fill first"
                    )));
                }
            }
            let request = ReuseRequest {
                seq: seq.clone(),
                images: images.clone(),
                image_hashes: hashes,
                plan: plan.clone(),
            };
            let mut last = None;
            for i in 0..scenario.warmup + scenario.repetitions {
                let start = Instant::now();
                let out = prefill_with_reuse(model, &request, store)?;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                if i >= scenario.warmup {
                    times.push(ms);
                }
                last = Some(out);
            }
            let out = last.expect("at least one run");
            (out.metrics.flops.total(), out.metrics.fallbacks.len(), plan.mean_ratio())
        }
    };

    Ok(MetricsRow {
        scenario: scenario.kind.name(),
        image_tokens: scenario.image_tokens,
        text_tokens: scenario.text_tokens,
        median_ms: median(times),
        hash_ms,
        flops,
        speedup: (scenario.kind == ScenarioKind::Origin).then_some(1.0),
        fallbacks,
        mean_ratio,
    })
}

/// Fills, then runs every scenario in order, sequentially.
pub fn run_matrix(model: &ToyVlm, store: &CacheStore, scenarios: &[BenchScenario]) -> Result<MetricsReport> {
    for s in scenarios {
        setup_fill(model, store, s)?;
    }
    let mut report = MetricsReport::default();
    for s in scenarios {
        report.rows.push(run_scenario(model, store, s)?);
    }
    report.fill_speedups();
    Ok(report)
}

/// Throughput with `threads` concurrent copies of one reuse request.
/// Timings interfere with each other, so this is noisy by design.
pub fn run_concurrent(model: &ToyVlm, store: &CacheStore, scenario: &BenchScenario, threads: usize) -> Result<f64> {
    let cfg = model.config();
    let plan = scenario
        .kind
        .plan(cfg.num_layers)
        .ok_or_else(|| Error::Input("concurrent runs need a reuse configuration".into()))?;
    setup_fill(model, store, scenario)?;
    let (seq, images, _) = scenario.inputs(model);
    let request = ReuseRequest::new(seq, images, plan)?;
    let start = Instant::now();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads.max(1))
            .map(|_| {
                s.spawn(|| {
                    for _ in 0..scenario.repetitions {
                        prefill_with_reuse(model, &request, store)?;
                    }
                    Ok::<_, Error>(())
                })
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("bench thread panicked"))
    })?;
    let secs = start.elapsed().as_secs_f64();
    Ok((threads.max(1) * scenario.repetitions) as f64 / secs.max(1e-9))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::reuse::encoder_flops;

    fn model() -> ToyVlm {
        ToyVlm::init(ModelConfig::tiny(2, 41)).unwrap()
    }

    fn scenario(kind: ScenarioKind, tokens: usize) -> BenchScenario {
        BenchScenario {
            repetitions: 3,
            warmup: 1,
            ..BenchScenario::new(kind, tokens)
        }
    }

    #[test]
    fn scenario_validation() {
        let mut s = scenario(ScenarioKind::Origin, 48);
        assert!(s.validate(16).is_ok());
        s.repetitions = 2;
        assert!(s.validate(16).is_err());
        s.repetitions = 3;
        s.image_tokens = 40;
        assert!(s.validate(16).is_err());
    }

    #[test]
    fn cold_store_is_setup_error() {
        let m = model();
        let r = run_scenario(&m, &CacheStore::new(), &scenario(ScenarioKind::Static(0.0), 32));
        assert!(matches!(r, Err(Error::Setup(_))));
        assert!(run_scenario(&m, &CacheStore::new(), &scenario(ScenarioKind::Origin, 32)).is_ok());
    }

    #[test]
    fn flops_ordering_and_identities() {
        let m = model();
        let store = CacheStore::new();
        let kinds = [
            ScenarioKind::Origin,
            ScenarioKind::NoVit,
            ScenarioKind::Static(0.3),
            ScenarioKind::Static(0.0),
        ];
        let scenarios: Vec<_> = kinds.iter().map(|k| scenario(k.clone(), 48)).collect();
        let report = run_matrix(&m, &store, &scenarios).unwrap();
        let f: Vec<u64> = report.rows.iter().map(|r| r.flops).collect();
        assert_eq!(f[0] - f[1], 3 * encoder_flops(m.config()));
        assert!(f[3] < f[2] && f[2] < f[1]);
        assert_eq!(report.rows[0].speedup, Some(1.0));
        assert!(report.rows.iter().all(|r| r.speedup.is_some() && r.fallbacks == 0));

        // origin FLOPs do not depend on what the store holds
        let cold = run_scenario(&m, &CacheStore::new(), &scenarios[0]).unwrap();
        assert_eq!(cold.flops, f[0]);
    }

    #[test]
    fn empty_matrix_is_header_only() {
        let r = run_matrix(&model(), &CacheStore::new(), &[]).unwrap();
        assert_eq!(r.to_csv(), format!("{}\n", COLUMNS.join(",")));
        assert_eq!(r.to_text().lines().count(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let m = model();
        let store = CacheStore::new();
        let scenarios = vec![scenario(ScenarioKind::Origin, 16), scenario(ScenarioKind::Static(0.1), 16)];
        let report = run_matrix(&m, &store, &scenarios).unwrap();
        assert_eq!(report.rows.len(), 2);
        let back = MetricsReport::from_csv(&report.to_csv()).unwrap();
        for (a, b) in back.rows.iter().zip(&report.rows) {
            assert_eq!(a.scenario, b.scenario);
            assert_eq!(a.flops, b.flops);
            assert!((a.median_ms - b.median_ms).abs() <= 1e-6);
            assert!((a.mean_ratio - b.mean_ratio).abs() <= 1e-9);
            assert!((a.speedup.unwrap() - b.speedup.unwrap()).abs() <= 1e-6);
        }
        assert!(MetricsReport::from_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn concurrent_runs_complete() {
        let m = model();
        let rps = run_concurrent(&m, &CacheStore::new(), &scenario(ScenarioKind::Static(0.0), 32), 3).unwrap();
        assert!(rps > 0.0);
    }
}
