//! Line-oriented `key = value` configuration with `#` comments and dotted
//! section keys. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::Normalize;
use crate::model::{ModelConfig, ModelKind, Preset};
use crate::optim::AdamWConfig;
use crate::ssm::ScanMode;
use crate::synth::augment::{AugmentOp, AugmentSpec};
use crate::synth::dataset::DatasetConfig;
use crate::vision::{Activation, NormKind};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
    path: PathBuf,
}

impl KeyValues {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(err(format!("invalid key {k:?}")));
            }
            if entries.insert(k.to_string(), (v.to_string(), i + 1)).is_some() {
                return Err(err(format!("duplicate key {k}")));
            }
        }
        Ok(KeyValues { entries, path: path.to_path_buf() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn err(&self, key: &str, msg: String) -> Error {
        let line = self.entries.get(key).map_or(0, |e| e.1);
        Error::Parse { path: self.path.clone(), line, msg: format!("{key}: {msg}") }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.get(key).map(|e| e.0.clone())
    }

    fn get<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = v.parse().map_err(|_| self.err(key, format!("cannot parse {v:?}")))?;
        }
        Ok(())
    }

    fn get_with<T>(&mut self, key: &str, slot: &mut T, f: impl Fn(&str) -> Result<T>) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = f(&v).map_err(|e| self.err(key, e.to_string()))?;
        }
        Ok(())
    }

    fn get_path(&mut self, key: &str) -> Option<PathBuf> {
        let base = self.path.parent().unwrap_or(Path::new("")).to_path_buf();
        self.take(key).map(|v| base.join(v))
    }

    fn get_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| self.err(key, format!("cannot parse list {v:?}")))?;
        }
        Ok(())
    }

    fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(self.err(k, "unknown configuration key".into()).rename_unknown(k)),
            None => Ok(()),
        }
    }
}

impl Error {
    fn rename_unknown(self, key: &str) -> Error {
        match self {
            Error::Parse { path, line, .. } => Error::Parse { path, line, msg: format!("unknown configuration key {key:?}") },
            e => e,
        }
    }
}

pub const KNOWN_KEYS: &[&str] = &[
    "model.kind",
    "model.preset",
    "model.d_model",
    "model.d_state",
    "model.expand",
    "model.layers",
    "model.t_max",
    "model.max_len",
    "model.scan",
    "model.attn_heads",
    "model.attn_max_context",
    "encoder.channels",
    "encoder.pooling",
    "encoder.kernel",
    "encoder.norm",
    "encoder.activation",
    "encoder.min_height",
    "encoder.min_width",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.weight_decay",
    "optim.clip",
    "train.batch_size",
    "train.max_steps",
    "train.eval_every",
    "train.target_cer",
    "train.seed",
    "train.manifest",
    "train.eval_manifest",
    "train.out_dir",
    "curriculum.enabled",
    "curriculum.max_lines",
    "curriculum.ramp_steps",
    "curriculum.synthetic_mix",
    "augment.ops",
    "augment.probability",
    "augment.train",
    "data.out_dir",
    "data.samples",
    "data.split",
    "data.seed",
    "data.glyph_scale",
    "data.line_height",
    "data.min_chars",
    "data.max_chars",
    "data.max_lines",
    "data.line_spacing",
    "data.corpus",
    "data.augment",
    "bench.lengths",
    "bench.prefill",
    "bench.repeats",
    "bench.warmup",
    "bench.latency_steps",
    "bench.image_width",
    "bench.out_dir",
    "eval.lowercase",
    "eval.collapse_whitespace",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub optim: AdamWConfig,
    pub clip: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub target_cer: Option<f64>,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Apply the augmentation spec to training images.
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumSettings {
    pub max_lines: usize,
    pub ramp_steps: u64,
    /// Fraction of each batch replaced by freshly rendered paragraphs.
    pub synthetic_mix: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSettings {
    pub lengths: Vec<usize>,
    pub prefill: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub latency_steps: usize,
    pub image_width: usize,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub curriculum: Option<CurriculumSettings>,
    pub augment: AugmentSpec,
    pub data: DatasetConfig,
    pub data_augment: bool,
    pub bench: BenchSettings,
    pub eval: Normalize,
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("expected a boolean, got {s:?}"))),
    }
}

fn parse_scan(s: &str) -> Result<ScanMode> {
    match s {
        "sequential" => Ok(ScanMode::Sequential),
        "parallel" => Ok(ScanMode::Parallel),
        _ => Err(Error::Config(format!("unknown scan mode {s:?}"))),
    }
}

fn scan_name(m: ScanMode) -> &'static str {
    match m {
        ScanMode::Sequential => "sequential",
        ScanMode::Parallel => "parallel",
    }
}

fn parse_pooling(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|p| {
            let (h, w) = p.trim().split_once('x').ok_or_else(|| Error::Config(format!("pooling entry {p:?} is not HxW")))?;
            let n = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("bad pooling entry {p:?}")));
            Ok((n(h)?, n(w)?))
        })
        .collect()
}

fn parse_split(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split('/')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("split {s:?} is not a/b/c")))?;
    match parts[..] {
        [a, b, c] => {
            let t = a + b + c;
            if t <= 0.0 {
                return Err(Error::Config(format!("split {s:?} sums to zero")));
            }
            Ok((a / t, b / t, c / t))
        }
        _ => Err(Error::Config(format!("split {s:?} needs three parts"))),
    }
}

impl RunConfig {
    pub fn defaults(kind: ModelKind, preset: Preset) -> Self {
        let desk = preset == Preset::Desk;
        let mut data = DatasetConfig::new("data");
        data.samples = 40;
        data.split = (0.8, 0.1, 0.1);
        RunConfig {
            preset,
            model: ModelConfig::preset(kind, preset),
            train: TrainSettings {
                optim: AdamWConfig { lr: if desk { 2e-3 } else { 1e-4 }, ..AdamWConfig::default() },
                clip: 1.0,
                batch_size: 4,
                max_steps: 2000,
                eval_every: 200,
                target_cer: None,
                seed: 0,
                manifest: None,
                eval_manifest: None,
                out_dir: PathBuf::from("run"),
                augment: false,
            },
            curriculum: None,
            augment: AugmentSpec::all(0.5, 0),
            data,
            data_augment: false,
            bench: BenchSettings {
                lengths: vec![100, 300, 600, 1000],
                prefill: 200,
                repeats: 5,
                warmup: 2,
                latency_steps: 500,
                image_width: 512,
                out_dir: PathBuf::from("bench"),
            },
            eval: Normalize::default(),
        }
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::parse(text, path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::load(path)?)
    }

    fn from_kv(mut kv: KeyValues) -> Result<Self> {
        kv.reject_unknown(KNOWN_KEYS)?;
        let mut kind = ModelKind::MambaCtc;
        let mut preset = Preset::Desk;
        kv.get_with("model.kind", &mut kind, ModelKind::parse)?;
        kv.get_with("model.preset", &mut preset, Preset::parse)?;
        let mut c = RunConfig::defaults(kind, preset);

        let m = &mut c.model;
        kv.get("model.d_model", &mut m.d_model)?;
        kv.get("model.d_state", &mut m.d_state)?;
        kv.get("model.expand", &mut m.expand)?;
        kv.get("model.layers", &mut m.layers)?;
        kv.get("model.t_max", &mut m.t_max)?;
        kv.get("model.max_len", &mut m.max_len)?;
        kv.get_with("model.scan", &mut m.scan_mode, parse_scan)?;
        kv.get("model.attn_heads", &mut m.attn_heads)?;
        kv.get("model.attn_max_context", &mut m.attn_max_context)?;
        let e = &mut m.encoder;
        if kv.take("model.d_model").is_some() && kv.take("encoder.channels").is_none() {
            // keep the last stage in step with the model width
            if let Some(last) = e.channels.last_mut() {
                *last = m.d_model;
            }
        }
        kv.get_list("encoder.channels", &mut e.channels)?;
        kv.get_with("encoder.pooling", &mut e.pooling, parse_pooling)?;
        kv.get("encoder.kernel", &mut e.kernel)?;
        kv.get_with("encoder.norm", &mut e.norm, |s| match s {
            "batch" => Ok(NormKind::Batch),
            "none" => Ok(NormKind::None),
            _ => Err(Error::Config(format!("unknown norm {s:?}"))),
        })?;
        kv.get_with("encoder.activation", &mut e.activation, |s| match s {
            "gelu" => Ok(Activation::Gelu),
            "silu" => Ok(Activation::Silu),
            _ => Err(Error::Config(format!("unknown activation {s:?}"))),
        })?;
        kv.get("encoder.min_height", &mut e.min_height)?;
        kv.get("encoder.min_width", &mut e.min_width)?;

        let t = &mut c.train;
        kv.get("optim.lr", &mut t.optim.lr)?;
        kv.get("optim.beta1", &mut t.optim.beta1)?;
        kv.get("optim.beta2", &mut t.optim.beta2)?;
        kv.get("optim.eps", &mut t.optim.eps)?;
        kv.get("optim.weight_decay", &mut t.optim.weight_decay)?;
        kv.get("optim.clip", &mut t.clip)?;
        kv.get("train.batch_size", &mut t.batch_size)?;
        kv.get("train.max_steps", &mut t.max_steps)?;
        kv.get("train.eval_every", &mut t.eval_every)?;
        if let Some(v) = kv.take("train.target_cer") {
            t.target_cer = Some(v.parse().map_err(|_| kv.err("train.target_cer", format!("cannot parse {v:?}")))?);
        }
        kv.get("train.seed", &mut t.seed)?;
        t.manifest = kv.get_path("train.manifest").or(t.manifest.take());
        t.eval_manifest = kv.get_path("train.eval_manifest").or(t.eval_manifest.take());
        if let Some(p) = kv.get_path("train.out_dir") {
            t.out_dir = p;
        }
        kv.get_with("augment.train", &mut t.augment, parse_bool)?;

        let mut curriculum = false;
        kv.get_with("curriculum.enabled", &mut curriculum, parse_bool)?;
        let mut cur = CurriculumSettings { max_lines: 10, ramp_steps: 1000, synthetic_mix: 0.1 };
        kv.get("curriculum.max_lines", &mut cur.max_lines)?;
        kv.get("curriculum.ramp_steps", &mut cur.ramp_steps)?;
        kv.get("curriculum.synthetic_mix", &mut cur.synthetic_mix)?;
        c.curriculum = curriculum.then_some(cur);

        if let Some(v) = kv.take("augment.ops") {
            let ops: Vec<AugmentOp> = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(AugmentOp::parse)
                .collect::<Result<_>>()
                .map_err(|e| kv.err("augment.ops", e.to_string()))?;
            c.augment.ops = ops.into_iter().map(|op| (op, 0.5)).collect();
        }
        let mut prob = 0.5;
        kv.get("augment.probability", &mut prob)?;
        c.augment.ops.iter_mut().for_each(|o| o.1 = prob);

        let d = &mut c.data;
        if let Some(p) = kv.get_path("data.out_dir") {
            d.out_dir = p;
        }
        kv.get("data.samples", &mut d.samples)?;
        kv.get_with("data.split", &mut d.split, parse_split)?;
        kv.get("data.seed", &mut d.seed)?;
        kv.get("data.glyph_scale", &mut d.glyph_scale)?;
        kv.get("data.line_height", &mut d.line_height)?;
        kv.get("data.min_chars", &mut d.min_chars)?;
        kv.get("data.max_chars", &mut d.max_chars)?;
        kv.get("data.max_lines", &mut d.max_lines)?;
        kv.get("data.line_spacing", &mut d.line_spacing)?;
        d.corpus = kv.get_path("data.corpus");
        kv.get_with("data.augment", &mut c.data_augment, parse_bool)?;
        c.augment.seed = d.seed;
        if c.data_augment {
            d.augment = Some(c.augment.clone());
        }

        let b = &mut c.bench;
        kv.get_list("bench.lengths", &mut b.lengths)?;
        kv.get("bench.prefill", &mut b.prefill)?;
        kv.get("bench.repeats", &mut b.repeats)?;
        kv.get("bench.warmup", &mut b.warmup)?;
        kv.get("bench.latency_steps", &mut b.latency_steps)?;
        kv.get("bench.image_width", &mut b.image_width)?;
        if let Some(p) = kv.get_path("bench.out_dir") {
            b.out_dir = p;
        }
        kv.get_with("eval.lowercase", &mut c.eval.lowercase, parse_bool)?;
        kv.get_with("eval.collapse_whitespace", &mut c.eval.collapse_whitespace, parse_bool)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.eval_every == 0 {
            return Err(Error::Config("train.batch_size and train.eval_every must be positive".into()));
        }
        if !(t.optim.lr > 0.0) || !(0.0..1.0).contains(&t.optim.beta1) || !(0.0..1.0).contains(&t.optim.beta2) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if self.data.max_lines > 1 && !self.model.kind.supports_paragraphs() {
            return Err(Error::Config(format!(
                "{} reads single lines only; set data.max_lines = 1",
                self.model.kind
            )));
        }
        if let Some(c) = &self.curriculum {
            if !self.model.kind.supports_paragraphs() {
                return Err(Error::Config(format!("curriculum needs a paragraph-capable head, not {}", self.model.kind)));
            }
            if c.max_lines == 0 || !(0.0..=1.0).contains(&c.synthetic_mix) {
                return Err(Error::Config("curriculum settings out of range".into()));
            }
        }
        let b = &self.bench;
        if b.lengths.is_empty() || b.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bench.lengths must be non-empty and strictly increasing".into()));
        }
        if b.repeats < 3 {
            return Err(Error::Config("bench.repeats must be at least 3".into()));
        }
        Ok(())
    }
}

/// Canonical text of the model section, used as the checkpoint echo.
pub fn model_config_text(m: &ModelConfig) -> String {
    let e = &m.encoder;
    let mut s = String::new();
    let _ = writeln!(s, "model.kind = {}", m.kind.name());
    let _ = writeln!(s, "model.d_model = {}", m.d_model);
    let _ = writeln!(s, "model.d_state = {}", m.d_state);
    let _ = writeln!(s, "model.expand = {}", m.expand);
    let _ = writeln!(s, "model.layers = {}", m.layers);
    let _ = writeln!(s, "model.t_max = {}", m.t_max);
    let _ = writeln!(s, "model.max_len = {}", m.max_len);
    let _ = writeln!(s, "model.scan = {}", scan_name(m.scan_mode));
    let _ = writeln!(s, "model.attn_heads = {}", m.attn_heads);
    let _ = writeln!(s, "model.attn_max_context = {}", m.attn_max_context);
    let ch: Vec<String> = e.channels.iter().map(|c| c.to_string()).collect();
    let _ = writeln!(s, "encoder.channels = {}", ch.join(","));
    let pool: Vec<String> = e.pooling.iter().map(|(h, w)| format!("{h}x{w}")).collect();
    let _ = writeln!(s, "encoder.pooling = {}", pool.join(","));
    let _ = writeln!(s, "encoder.kernel = {}", e.kernel);
    let _ = writeln!(s, "encoder.norm = {}", if e.norm == NormKind::Batch { "batch" } else { "none" });
    let _ = writeln!(s, "encoder.activation = {}", if e.activation == Activation::Gelu { "gelu" } else { "silu" });
    let _ = writeln!(s, "encoder.min_height = {}", e.min_height);
    let _ = writeln!(s, "encoder.min_width = {}", e.min_width);
    s
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    Ok(RunConfig::from_text(text, Path::new("<checkpoint>"))?.model)
}
