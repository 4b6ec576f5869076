//! Subcommand bodies. Only `fill` writes to the store; everything else loads
//! it read-only or works on a private in-memory store.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vlcache_core::bench::{self, BenchScenario, ScenarioKind};
use vlcache_core::error_lab::{self, ErrorCase};
use vlcache_core::plan::RecomputePlan;
use vlcache_core::planner::{self, BudgetSpec};
use vlcache_core::reuse::{self, ReuseRequest};
use vlcache_core::sensitivity::{self, random_prompt};
use vlcache_core::store::{self, CacheStore, DirLock};
use vlcache_core::{Error, Image, Result, ToyVlm};

use crate::config::{fill_sequence, load_dataset, load_request, GlobalConfig};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

fn say(line: impl AsRef<str>) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", line.as_ref());
}

pub fn load_model(gc: &GlobalConfig) -> Result<ToyVlm> {
    let cfg = gc.model_config()?;
    if !gc.weights.exists() {
        return Err(Error::Io {
            path: gc.weights.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no weights; run `vlcache init` first"),
        });
    }
    ToyVlm::load_weights(cfg, &gc.weights)
}

fn load_store(gc: &GlobalConfig) -> Result<CacheStore> {
    CacheStore::load(&gc.store_dir)
}

pub fn init(gc: &GlobalConfig) -> Result<()> {
    let model = ToyVlm::init(gc.model_config()?)?;
    if let Some(dir) = gc.weights.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    model.save_weights(&gc.weights)?;
    say(format!("weights {} fingerprint {:016x}", gc.weights.display(), model.fingerprint()));
    Ok(())
}

pub fn fill(gc: &GlobalConfig) -> Result<()> {
    let model = load_model(gc)?;
    let cfg = model.config();
    let dataset = load_dataset(gc.dataset_path()?, cfg, gc.seed)?;
    std::fs::create_dir_all(&gc.store_dir).map_err(io_err(&gc.store_dir))?;
    let lock = DirLock::acquire(&gc.store_dir)?;
    let store = load_store(gc)?;
    let (mut enc, mut kv, mut cached) = (0, 0, 0);
    for sample in &dataset {
        let seq = fill_sequence(sample, cfg.tokens_per_image);
        let report = reuse::fill_store(&model, &store, &seq, std::slice::from_ref(&sample.image))?;
        enc += report.encoder_added;
        kv += report.kv_added;
        cached += report.already_cached;
    }
    store.persist_locked(&gc.store_dir, &lock)?;
    let summary = store::summary(&store);
    say(format!(
        "filled {} samples: {enc} encoder and {kv} kv entries added, {cached} already cached; store holds {} encoder, {} kv",
        dataset.len(),
        summary["encoder"],
        summary["kv"]
    ));
    Ok(())
}

pub fn profile(gc: &GlobalConfig, grid: Option<Vec<f64>>, out: Option<PathBuf>) -> Result<()> {
    let model = load_model(gc)?;
    let dataset = load_dataset(gc.dataset_path()?, model.config(), gc.seed)?;
    let grid = grid.unwrap_or_else(|| gc.profile.grid.clone());
    let table = sensitivity::profile(&model, &dataset, &grid, gc.profile.max_new)?;
    let path = match out {
        Some(p) => p,
        None => gc.output("sensitivity.txt")?,
    };
    sensitivity::emit_table(&table, &path)?;
    say(format!("sensitivity table {} ({} samples)", path.display(), table.sample_count));
    Ok(())
}

pub enum Budget {
    Total(f64),
    Mean(f64),
}

pub fn plan(gc: &GlobalConfig, table: Option<PathBuf>, budget: Budget, grid: Option<Vec<f64>>, out: Option<PathBuf>) -> Result<()> {
    let model = load_model(gc)?;
    let table_path = match table {
        Some(p) => p,
        None => gc.output_dir.join("sensitivity.txt"),
    };
    let table = sensitivity::load_table(&table_path)?;
    if table.model_fingerprint != model.fingerprint() {
        return Err(Error::StaleCache {
            key: table_path.display().to_string(),
            stored: table.model_fingerprint,
            live: model.fingerprint(),
        });
    }
    let grid = grid.unwrap_or_else(|| table.grid.clone());
    let layers = table.num_layers();
    let spec = match budget {
        Budget::Total(p) => BudgetSpec::new(p, &grid, layers)?,
        Budget::Mean(r) => BudgetSpec::from_mean_ratio(r, &grid, layers)?,
    };
    let plan = planner::plan_greedy(&table, &spec)?;
    let path = out.unwrap_or_else(|| gc.plan.clone());
    write_file(&path, &plan.to_file_string())?;
    say(format!(
        "plan {} mean_ratio {} objective {} ratios {:?}",
        path.display(),
        plan.mean_ratio(),
        planner::objective(&table, &plan),
        plan.ratios
    ));
    Ok(())
}

#[derive(Serialize)]
struct FlopsJson {
    encoder: u64,
    decoder: u64,
    lm_head: u64,
    total: u64,
}

impl From<reuse::FlopCount> for FlopsJson {
    fn from(f: reuse::FlopCount) -> Self {
        Self {
            encoder: f.encoder,
            decoder: f.decoder,
            lm_head: f.lm_head,
            total: f.total(),
        }
    }
}

#[derive(Serialize)]
struct RunReport {
    model_fingerprint: String,
    sequence_len: usize,
    images: usize,
    plan: Vec<f64>,
    mean_ratio: f64,
    tokens: Vec<u32>,
    encoder_hits: usize,
    encoder_runs: usize,
    kv_hits: usize,
    fallbacks: Vec<usize>,
    computed_per_layer: Vec<usize>,
    flops: FlopsJson,
    full_prefill_flops: FlopsJson,
}

pub fn run(gc: &GlobalConfig, plan_path: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let model = load_model(gc)?;
    let cfg = model.config();
    let plan = RecomputePlan::load(plan_path.as_deref().unwrap_or(&gc.plan))?;
    plan.validate_for(cfg.num_layers)?;
    let input = load_request(gc.request_path()?, cfg)?;
    let store = load_store(gc)?;
    let request = ReuseRequest::new(input.seq.clone(), input.images, plan.clone())?;
    let (prefill, generation) = reuse::generate_with_reuse(&model, &request, &store, input.max_new)?;
    let m = prefill.metrics;
    let report = RunReport {
        model_fingerprint: format!("{:016x}", model.fingerprint()),
        sequence_len: input.seq.len(),
        images: input.seq.num_images(),
        mean_ratio: plan.mean_ratio(),
        plan: plan.ratios,
        tokens: generation.tokens,
        encoder_hits: m.encoder_hits,
        encoder_runs: m.encoder_runs,
        kv_hits: m.kv_hits,
        fallbacks: m.fallbacks,
        computed_per_layer: m.computed,
        flops: m.flops.into(),
        full_prefill_flops: reuse::full_prefill_flops(&input.seq, cfg).into(),
    };
    let json = serde_json::to_string_pretty(&report).expect("run report serializes") + "\n";
    let path = match out {
        Some(p) => p,
        None => gc.output("run.json")?,
    };
    write_file(&path, &json)?;
    say(json.trim_end());
    Ok(())
}

pub fn parse_scenario(name: &str, gc: &GlobalConfig, plan_path: Option<&Path>) -> Result<ScenarioKind> {
    let name = name.trim();
    let kind = match name {
        "origin" => ScenarioKind::Origin,
        "no_vit" => ScenarioKind::NoVit,
        "dynamic" => ScenarioKind::Dynamic(RecomputePlan::load(plan_path.unwrap_or(&gc.plan))?),
        _ => {
            let r = name
                .strip_prefix("static(")
                .and_then(|s| s.strip_suffix(')'))
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Config(format!("unknown bench configuration {name:?}")))?;
            ScenarioKind::Static(r)
        }
    };
    Ok(kind)
}

pub fn bench(gc: &GlobalConfig, plan_path: Option<PathBuf>, out: Option<PathBuf>, concurrency: usize) -> Result<()> {
    let model = load_model(gc)?;
    let cfg = model.config();
    let b = &gc.bench;
    let kinds = b
        .configs
        .iter()
        .map(|c| parse_scenario(c, gc, plan_path.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    for plan in kinds.iter().filter_map(|k| k.plan(cfg.num_layers)) {
        plan.validate_for(cfg.num_layers)?;
    }
    let lengths = if b.image_tokens.is_empty() {
        vec![cfg.tokens_per_image]
    } else {
        b.image_tokens.clone()
    };
    let mut scenarios = Vec::new();
    for &n in &lengths {
        for k in &kinds {
            scenarios.push(BenchScenario {
                kind: k.clone(),
                image_tokens: n,
                text_tokens: b.text_tokens,
                repetitions: b.repetitions,
                warmup: b.warmup,
                seed: gc.seed,
            });
        }
    }
    // A private store: the harness fills it itself and it is never persisted.
    let store = CacheStore::new();
    let report = bench::run_matrix(&model, &store, &scenarios)?;
    let csv_path = match out {
        Some(p) => p,
        None => gc.output("bench.csv")?,
    };
    write_file(&csv_path, &report.to_csv())?;
    let text = report.to_text();
    write_file(&csv_path.with_extension("txt"), &text)?;
    say(text.trim_end());
    say("speedups are compute-path analogs of time-to-first-token on the toy model");
    if concurrency > 0 {
        if let Some(s) = scenarios.iter().find(|s| s.kind != ScenarioKind::Origin) {
            let rps = bench::run_concurrent(&model, &CacheStore::new(), s, concurrency)?;
            say(format!("concurrent {} x{concurrency}: {rps:.2} requests/s (noisy)", s.kind.name()));
        }
    }
    Ok(())
}

fn error_case(gc: &GlobalConfig, model: &ToyVlm, i: usize) -> ErrorCase {
    let cfg = model.config();
    let e = &gc.error;
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed.wrapping_add(i as u64));
    ErrorCase {
        image: Image::synthetic(cfg.image_side, gc.seed.wrapping_mul(7919).wrapping_add(i as u64)),
        cache_prefix: random_prompt(&mut rng, cfg.vocab_size, e.prefix_len),
        new_prefix: random_prompt(&mut rng, cfg.vocab_size, e.prefix_len),
        suffix: random_prompt(&mut rng, cfg.vocab_size, e.suffix_len),
    }
}

pub fn error(gc: &GlobalConfig, out: Option<PathBuf>) -> Result<()> {
    let model = load_model(gc)?;
    let layers = model.config().num_layers;
    let e = &gc.error;
    if e.cases == 0 {
        return Err(Error::Input("error experiments need at least one case".into()));
    }
    let dir = match out {
        Some(d) => d,
        None => gc.output_dir.clone(),
    };
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let mut header = vec!["case".to_string(), "q1_mean".into(), "q4_mean".into(), "downstream_r0".into()];
    for b in &e.budgets {
        header.push(format!("downstream_head{b}"));
        header.push(format!("downstream_tail{b}"));
    }
    let summary_path = dir.join("error_summary.csv");
    let mut summary = csv::Writer::from_path(&summary_path).map_err(|err| Error::Config(err.to_string()))?;
    let csv_err = |err: csv::Error| Error::Config(format!("{}: {err}", summary_path.display()));
    summary.write_record(&header).map_err(csv_err)?;

    for i in 0..e.cases {
        let case = error_case(gc, &model, i);
        let mut zero = error_lab::reuse_error_profile(&model, &case, &RecomputePlan::zero(layers), e.layer)?;
        zero.label = "r0".into();
        let (q1, q4) = zero.quartile_means();
        let mut row = vec![i.to_string(), q1.to_string(), q4.to_string(), zero.downstream().to_string()];
        let mut profiles = vec![zero];
        for &b in &e.budgets {
            let (head, tail) = error_lab::head_vs_tail(&model, &case, b, e.layer)?;
            row.push(head.downstream().to_string());
            row.push(tail.downstream().to_string());
            profiles.push(head);
            profiles.push(tail);
        }
        summary.write_record(&row).map_err(csv_err)?;
        if i == 0 {
            error_lab::emit_profile_csv(&profiles, &dir.join("error_profile.csv"))?;
            if e.decompose {
                let d = error_lab::decompose_error(&model, &case, e.layer)?;
                let mut text = String::from("k,e_self,e_prop_sum,e_total,residual\n");
                for k in 0..d.e_total.len() {
                    let r = d.row(k);
                    let prop: f64 = r.e_prop.iter().sum();
                    text.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", r.k, r.e_self, prop, r.e_total, r.residual));
                }
                write_file(&dir.join("error_decomposition.csv"), &text)?;
            }
        }
    }
    summary.flush().map_err(io_err(&summary_path))?;
    say(format!("error experiments ({} cases, {} layer) written to {}", e.cases, e.layer, dir.display()));
    Ok(())
}
