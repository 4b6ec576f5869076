//! Pipeline configuration, dataset and request files.
//!
//! Relative paths in the global config resolve against the config file's
//! directory. The global seed replaces the seed in the model config and seeds
//! every synthetic input.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use vlcache_core::sensitivity::{ProxySample, ANSWER_MARKER, NEUTRAL_PROMPT};
use vlcache_core::sequence::SequenceBuilder;
use vlcache_core::{Error, Image, ModelConfig, Result, TokenSequence};

pub const STORE_DIR_ENV: &str = "VLCACHE_STORE_DIR";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGlobal {
    seed: u64,
    model: PathBuf,
    #[serde(default = "default_weights")]
    weights: PathBuf,
    #[serde(default = "default_store")]
    store_dir: PathBuf,
    #[serde(default = "default_plan")]
    plan: PathBuf,
    dataset: Option<PathBuf>,
    request: Option<PathBuf>,
    #[serde(default = "default_out")]
    output_dir: PathBuf,
    #[serde(default)]
    profile: ProfileSection,
    #[serde(default)]
    bench: BenchSection,
    #[serde(default)]
    error: ErrorSection,
}

fn default_weights() -> PathBuf {
    "weights.bin".into()
}
fn default_store() -> PathBuf {
    "store".into()
}
fn default_plan() -> PathBuf {
    "plan.toml".into()
}
fn default_out() -> PathBuf {
    "out".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub grid: Vec<f64>,
    /// Baseline decode length per sample.
    pub max_new: usize,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            grid: vec![0.1, 0.2, 0.3],
            max_new: 6,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub image_tokens: Vec<usize>,
    pub text_tokens: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// `origin`, `no_vit`, `static(r)` or `dynamic` (reads the plan file).
    pub configs: Vec<String>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            image_tokens: vec![],
            text_tokens: vlcache_core::bench::DEFAULT_TEXT_TOKENS,
            repetitions: vlcache_core::bench::DEFAULT_REPETITIONS,
            warmup: vlcache_core::bench::DEFAULT_WARMUP,
            configs: vec!["origin".into(), "no_vit".into(), "static(0)".into(), "static(0.3)".into()],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorSection {
    pub cases: usize,
    pub prefix_len: usize,
    pub suffix_len: usize,
    pub layer: vlcache_core::error_lab::ErrorLayer,
    /// Head/tail recompute fractions, each also run as a head-only profile.
    pub budgets: Vec<f64>,
    /// Also write the self/propagated decomposition for the first case.
    pub decompose: bool,
}

impl Default for ErrorSection {
    fn default() -> Self {
        Self {
            cases: 4,
            prefix_len: 8,
            suffix_len: 8,
            layer: Default::default(),
            budgets: vec![0.1, 0.3],
            decompose: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlobalConfig {
    pub seed: u64,
    pub model: PathBuf,
    pub weights: PathBuf,
    pub store_dir: PathBuf,
    pub plan: PathBuf,
    pub dataset: Option<PathBuf>,
    pub request: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub profile: ProfileSection,
    pub bench: BenchSection,
    pub error: ErrorSection,
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::Config(format!("{what} {}: {}", path.display(), e.message())))
}

impl GlobalConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw: RawGlobal = parse_toml(path, "config")?;
        let base = path.parent().unwrap_or(Path::new("."));
        let at = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let store_dir = match std::env::var_os(STORE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => at(raw.store_dir),
        };
        Ok(Self {
            seed: raw.seed,
            model: at(raw.model),
            weights: at(raw.weights),
            store_dir,
            plan: at(raw.plan),
            dataset: raw.dataset.map(&at),
            request: raw.request.map(&at),
            output_dir: at(raw.output_dir),
            profile: raw.profile,
            bench: raw.bench,
            error: raw.error,
        })
    }

    /// The model config with the global seed applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::load(&self.model)?;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("the config names no dataset file".into()))
    }

    pub fn request_path(&self) -> Result<&Path> {
        self.request
            .as_deref()
            .ok_or_else(|| Error::Config("the config names no request file".into()))
    }

    pub fn output(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir).map_err(|source| Error::Io {
            path: self.output_dir.clone(),
            source,
        })?;
        Ok(self.output_dir.join(name))
    }
}

/// Either a seeded synthetic image or a raw file of `side * side` grayscale bytes.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub image_seed: Option<u64>,
    pub image_file: Option<PathBuf>,
}

impl ImageSpec {
    fn load(&self, base: &Path, side: usize) -> Result<Image> {
        match (&self.image_seed, &self.image_file) {
            (Some(seed), None) => Ok(Image::synthetic(side, *seed)),
            (None, Some(file)) => {
                let path = base.join(file);
                let bytes = std::fs::read(&path).map_err(|source| Error::Io { path, source })?;
                Image::new(side, side, bytes)
            }
            _ => Err(Error::Config("an image needs exactly one of image_seed or image_file".into())),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleSpec {
    #[serde(flatten)]
    image: ImageSpec,
    prompt: Vec<u32>,
    neutral_prompt: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticSpec {
    count: usize,
    prompt_len: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    #[serde(default)]
    sample: Vec<SampleSpec>,
    synthetic: Option<SyntheticSpec>,
}

/// Explicit samples first, then synthetic ones seeded from `seed + i`.
pub fn load_dataset(path: &Path, cfg: &ModelConfig, seed: u64) -> Result<Vec<ProxySample>> {
    let file: DatasetFile = parse_toml(path, "dataset")?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for s in &file.sample {
        let neutral = s.neutral_prompt.clone().unwrap_or_else(|| NEUTRAL_PROMPT.to_vec());
        out.push(ProxySample::new(s.image.load(base, cfg.image_side)?, s.prompt.clone(), neutral)?);
    }
    if let Some(syn) = &file.synthetic {
        for i in 0..syn.count as u64 {
            out.push(ProxySample::synthetic(cfg, seed.wrapping_add(i), syn.prompt_len));
        }
    }
    if out.is_empty() {
        return Err(Error::Input(format!("dataset {} holds no samples", path.display())));
    }
    Ok(out)
}

/// The sequence a sample's image was cached under.
pub fn fill_sequence(sample: &ProxySample, tokens_per_image: usize) -> TokenSequence {
    TokenSequence::prompt(&sample.original_prompt, 1, &[ANSWER_MARKER], tokens_per_image)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentSpec {
    text: Option<Vec<u32>>,
    #[serde(flatten)]
    image: ImageSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestFile {
    #[serde(default = "default_max_new")]
    max_new: usize,
    segment: Vec<SegmentSpec>,
}

fn default_max_new() -> usize {
    8
}

#[derive(Debug, Clone)]
pub struct RequestInput {
    pub seq: TokenSequence,
    pub images: Vec<Image>,
    pub max_new: usize,
}

pub fn load_request(path: &Path, cfg: &ModelConfig) -> Result<RequestInput> {
    let file: RequestFile = parse_toml(path, "request")?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut builder: SequenceBuilder = TokenSequence::builder(cfg.tokens_per_image);
    let mut images = Vec::new();
    for seg in &file.segment {
        let is_image = seg.image.image_seed.is_some() || seg.image.image_file.is_some();
        match (&seg.text, is_image) {
            (Some(ids), false) => builder = builder.text(ids),
            (None, true) => {
                images.push(seg.image.load(base, cfg.image_side)?);
                builder = builder.image();
            }
            _ => return Err(Error::Config("a request segment is either text or an image".into())),
        }
    }
    let seq = builder.build();
    if seq.is_empty() {
        return Err(Error::Input(format!("request {} is empty", path.display())));
    }
    if let Some(&bad) = seq.ids().iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("token {bad} is outside the vocabulary of {}", cfg.vocab_size)));
    }
    Ok(RequestInput {
        seq,
        images,
        max_new: file.max_new,
    })
}
