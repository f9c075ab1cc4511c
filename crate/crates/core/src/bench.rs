//! Inference-memory and latency measurements for the AR decoders.
//!
//! Cache sizes come from exact byte accounting of decoder state, never from
//! sampled process memory. Timings run strictly serially on one thread.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoders::{ArDecoder, AttnDecoder, KvCache};
use crate::error::{Error, Result};
use crate::model::{Head, ModelConfig, ModelKind, OcrModel};
use crate::nn::ParamStore;
use crate::parallel;
use crate::ssm::RecurrentState;
use crate::tensor::{Float, Tensor};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static BASE: AtomicUsize = AtomicUsize::new(0);
static RUNNING: AtomicBool = AtomicBool::new(false);

/// System allocator wrapper that tracks live and peak heap bytes. Install
/// with `#[global_allocator]` to enable [`peak_bytes`].
pub struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

/// Starts a new peak window at the current live size.
pub fn reset_peak() {
    let now = CURRENT.load(Ordering::Relaxed);
    BASE.store(now, Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
}

/// Peak heap growth since [`reset_peak`]; zero when the tracking
/// allocator is not installed.
pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed).saturating_sub(BASE.load(Ordering::Relaxed))
}

/// Exclusive, single-threaded benchmark section.
pub struct BenchGuard(());

impl BenchGuard {
    pub fn acquire() -> Result<Self> {
        if let Some(n) = parallel::env_threads().filter(|&n| n > 1) {
            return Err(Error::BenchRefused(format!(
                "{}={n} conflicts with single-thread timing",
                parallel::THREADS_ENV
            )));
        }
        if RUNNING.swap(true, Ordering::AcqRel) {
            return Err(Error::BenchRefused("another benchmark is already running".into()));
        }
        parallel::pin_single_thread();
        Ok(BenchGuard(()))
    }
}

impl Drop for BenchGuard {
    fn drop(&mut self) {
        parallel::clear_override();
        RUNNING.store(false, Ordering::Release);
    }
}

/// Incremental decoding state of an AR head.
#[derive(Clone)]
pub enum Session<'a> {
    Mamba { dec: &'a ArDecoder, states: Vec<RecurrentState<f32>> },
    Attn { dec: &'a AttnDecoder, cache: KvCache<f32> },
}

impl<'a> Session<'a> {
    pub fn start(model: &'a OcrModel<f32>, h: &Tensor<f32>) -> Result<Self> {
        match &model.head {
            Head::Ar(dec) => Ok(Session::Mamba { dec, states: dec.prefill(&model.store, h)? }),
            Head::Attn(dec) => Ok(Session::Attn { dec, cache: dec.prefill(&model.store, h)? }),
            _ => Err(Error::Usage(format!("{} has no incremental decoder", model.cfg.kind))),
        }
    }

    pub fn step(&mut self, store: &ParamStore<f32>, token: usize) -> Result<Vec<f32>> {
        match self {
            Session::Mamba { dec, states } => Ok(dec.step_logits(store, token, states)),
            Session::Attn { dec, cache } => dec.step(store, cache, token),
        }
    }

    /// Bytes currently held by the decoder cache.
    pub fn cache_bytes(&self) -> usize {
        match self {
            Session::Mamba { states, .. } => states.iter().map(RecurrentState::byte_size).sum(),
            Session::Attn { cache, .. } => cache.byte_size(),
        }
    }
}

/// Closed-form decoder cache size after `output_len` generated tokens with
/// `prefill` visual positions.
pub fn measure_cache_bytes<T: Float>(cfg: &ModelConfig, prefill: usize, output_len: usize) -> Result<usize> {
    if output_len == 0 {
        return Err(Error::Argument("output length must be at least 1".into()));
    }
    match cfg.kind {
        ModelKind::MambaAr => Ok(cfg.layers * cfg.mamba().state_bytes::<T>()),
        ModelKind::AttnArBaseline => Ok(cfg.attention().cache_bytes::<T>(prefill, output_len)),
        k => Err(Error::Usage(format!("{k} has no decoding cache"))),
    }
}

/// Random visual sequence standing in for encoder output.
pub fn synthetic_memory(cfg: &ModelConfig, len: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([len, cfg.d_model], |_| rng.random_range(-1.0..1.0))
}

fn forced_token(model: &OcrModel<f32>, t: usize) -> usize {
    1 + t % model.vocab.num_chars()
}

/// Cache bytes observed after stepping `output_len` forced tokens.
pub fn runtime_cache_bytes(model: &OcrModel<f32>, prefill: usize, output_len: usize) -> Result<usize> {
    let h = synthetic_memory(&model.cfg, prefill, 0);
    let mut s = Session::start(model, &h)?;
    for t in 0..output_len {
        s.step(&model.store, forced_token(model, t))?;
    }
    Ok(s.cache_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrowthRow {
    pub model: String,
    pub length: usize,
    pub bytes: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrowthTable {
    pub base: usize,
    pub lengths: Vec<usize>,
    pub rows: Vec<GrowthRow>,
}

pub fn growth_table(models: &[ModelConfig], prefill: usize, lengths: &[usize]) -> Result<GrowthTable> {
    if models.is_empty() {
        return Err(Error::Argument("growth table needs at least one model".into()));
    }
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument("lengths must be non-empty and strictly increasing".into()));
    }
    let mut rows = Vec::new();
    for cfg in models {
        let base = measure_cache_bytes::<f32>(cfg, prefill, lengths[0])?;
        for &length in lengths {
            let bytes = measure_cache_bytes::<f32>(cfg, prefill, length)?;
            rows.push(GrowthRow { model: cfg.kind.name().into(), length, bytes, factor: bytes as f64 / base as f64 });
        }
    }
    Ok(GrowthTable { base: lengths[0], lengths: lengths.to_vec(), rows })
}

impl GrowthTable {
    pub fn factor(&self, model: &str, length: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.model == model && r.length == length).map(|r| r.factor)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,length,bytes,factor\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.4}", r.model, r.length, r.bytes, r.factor);
        }
        s
    }

    /// Gnuplot data: one two-column block per model, blocks separated by
    /// two blank lines so `index` selects a series.
    pub fn to_plot_data(&self) -> String {
        let mut s = String::new();
        let mut last: Option<&str> = None;
        for r in &self.rows {
            if last != Some(r.model.as_str()) {
                if last.is_some() {
                    s.push_str("\n\n");
                }
                let _ = writeln!(s, "# {}", r.model);
                last = Some(&r.model);
            }
            let _ = writeln!(s, "{} {}", r.length, r.bytes);
        }
        s
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median absolute deviation from the median.
pub fn mad(xs: &[f64]) -> f64 {
    let m = median(xs);
    median(&xs.iter().map(|x| (x - m).abs()).collect::<Vec<_>>())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares `y = slope·x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Argument("linear fit needs two or more paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Argument("linear fit needs distinct x values".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(LinearFit { slope, intercept: my - slope * mx })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub model: String,
    /// Mean output length in characters.
    pub length: f64,
    pub latency_ms: f64,
    pub mad_ms: f64,
    pub throughput: f64,
    pub cache_bytes: usize,
    pub peak_bytes: usize,
}

pub const LATENCY_CSV_HEADER: &str = "model,length,latency_ms,mad_ms,throughput,cache_bytes,peak_bytes";

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.1},{:.4},{:.4},{:.3},{},{}",
            self.model, self.length, self.latency_ms, self.mad_ms, self.throughput, self.cache_bytes, self.peak_bytes
        )
    }
}

/// Times full recognition of `inputs` (ink tensors). Warmup runs are
/// discarded; latency is the per-item median over `repeats` runs.
pub fn measure_latency(model: &OcrModel<f32>, inputs: &[Tensor<f32>], warmup: usize, repeats: usize) -> Result<BenchRecord> {
    if repeats < 3 {
        return Err(Error::Argument(format!("repeats must be at least 3, got {repeats}")));
    }
    if inputs.is_empty() {
        return Err(Error::Argument("no benchmark inputs".into()));
    }
    let _guard = BenchGuard::acquire()?;
    for _ in 0..warmup {
        for x in inputs {
            model.decode(x)?;
        }
    }
    let mut times = Vec::with_capacity(repeats);
    let mut chars = 0usize;
    let mut cache = 0usize;
    reset_peak();
    for _ in 0..repeats {
        let start = Instant::now();
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            out.push(model.decode(x)?);
        }
        times.push(start.elapsed().as_secs_f64() * 1e3 / inputs.len() as f64);
        chars = out.iter().map(|d| d.ids.len()).sum();
        if matches!(model.cfg.kind, ModelKind::MambaAr | ModelKind::AttnArBaseline) {
            let frames = inputs.iter().map(|x| {
                let (h, w) = x.dims2().unwrap_or((0, 0));
                model.frames(h, w)
            });
            cache = frames
                .zip(&out)
                .map(|(l, d)| measure_cache_bytes::<f32>(&model.cfg, l, d.ids.len().max(1)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .max()
                .unwrap_or(0);
        }
    }
    let latency_ms = median(&times);
    Ok(BenchRecord {
        model: model.cfg.kind.name().into(),
        length: chars as f64 / inputs.len() as f64,
        latency_ms,
        mad_ms: mad(&times),
        throughput: 1e3 / latency_ms,
        cache_bytes: cache,
        peak_bytes: peak_bytes(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLatency {
    pub model: String,
    /// Median per-step latency in microseconds, index `t − 1`.
    pub micros: Vec<f64>,
    pub fit: LinearFit,
}

impl StepLatency {
    /// Latency change across the whole window relative to the intercept.
    pub fn relative_drift(&self) -> f64 {
        self.fit.slope * self.micros.len() as f64 / self.fit.intercept
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (t, us) in self.micros.iter().enumerate() {
            let _ = writeln!(s, "{},{},{:.3}", self.model, t + 1, us);
        }
        s
    }
}

pub const STEP_CSV_HEADER: &str = "model,step,latency_us";

/// Per-token step latency for `t ∈ [1, steps]` after a fixed prefill.
/// Each position takes the median over `repeats` independent sessions; the
/// fit is over those medians.
pub fn step_latency(model: &OcrModel<f32>, prefill: usize, steps: usize, warmup: usize, repeats: usize) -> Result<StepLatency> {
    if repeats < 3 {
        return Err(Error::Argument(format!("repeats must be at least 3, got {repeats}")));
    }
    let _guard = BenchGuard::acquire()?;
    let h = synthetic_memory(&model.cfg, prefill, 0);
    let mut runs = vec![Vec::with_capacity(repeats); steps];
    for r in 0..warmup + repeats {
        let mut s = Session::start(model, &h)?;
        for (t, slot) in runs.iter_mut().enumerate() {
            let token = forced_token(model, t);
            let start = Instant::now();
            std::hint::black_box(s.step(&model.store, token)?);
            let us = start.elapsed().as_secs_f64() * 1e6;
            if r >= warmup {
                slot.push(us);
            }
        }
    }
    let micros: Vec<f64> = runs.iter().map(|v| median(v)).collect();
    let xs: Vec<f64> = (1..=steps).map(|t| t as f64).collect();
    let fit = linear_fit(&xs, &micros)?;
    Ok(StepLatency { model: model.cfg.kind.name().into(), micros, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::Vocabulary;
    use crate::model::Preset;

    fn desk(kind: ModelKind) -> ModelConfig {
        let mut cfg = ModelConfig::preset(kind, Preset::Desk);
        cfg.attn_max_context = 2048;
        cfg
    }

    #[test]
    fn desk_mamba_cache_is_constant() {
        let cfg = desk(ModelKind::MambaAr);
        let a = measure_cache_bytes::<f32>(&cfg, 200, 100).unwrap();
        // 4 layers × (128·16 + 3·128) × 4 bytes
        assert_eq!(a, 4 * (128 * 16 + 3 * 128) * 4);
        assert_eq!(measure_cache_bytes::<f32>(&cfg, 200, 1000).unwrap(), a);
        assert!(measure_cache_bytes::<f32>(&cfg, 200, 1).unwrap() > 0);
        assert!(measure_cache_bytes::<f32>(&cfg, 200, 0).is_err());
    }

    #[test]
    fn attention_factor_follows_affine_formula() {
        let cfg = desk(ModelKind::AttnArBaseline);
        let t = growth_table(&[cfg], 200, &[100, 1000]).unwrap();
        assert!((t.factor("attn-ar-baseline", 1000).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn runtime_accounting_matches_formula() {
        let vocab = Vocabulary::default_latin();
        for kind in [ModelKind::MambaAr, ModelKind::AttnArBaseline] {
            let mut cfg = desk(kind);
            cfg.layers = 2;
            let model = OcrModel::<f32>::new(cfg.clone(), vocab.clone(), 0).unwrap();
            for len in [1, 7, 30] {
                assert_eq!(runtime_cache_bytes(&model, 12, len).unwrap(), measure_cache_bytes::<f32>(&cfg, 12, len).unwrap());
            }
        }
    }

    #[test]
    fn growth_table_shape_and_outputs() {
        let models = [desk(ModelKind::MambaAr), desk(ModelKind::AttnArBaseline)];
        let t = growth_table(&models, 200, &[100, 300, 600, 1000]).unwrap();
        assert_eq!(t.rows.len(), 8);
        let attn: Vec<f64> = t.rows.iter().filter(|r| r.model == "attn-ar-baseline").map(|r| r.factor).collect();
        assert!(attn.windows(2).all(|w| w[0] < w[1]));
        assert!(t.rows.iter().filter(|r| r.model == "mamba-ar").all(|r| r.factor <= 1.05));
        assert!(t.rows.iter().filter(|r| r.length == 100).all(|r| r.factor == 1.0));
        let csv = t.to_csv();
        assert!(csv.starts_with("model,length,bytes,factor\nmamba-ar,100,"));
        assert_eq!(csv.lines().count(), 9);
        let plot = t.to_plot_data();
        assert_eq!(plot.matches('#').count(), 2);
        assert!(plot.contains("\n\n\n# attn-ar-baseline\n100 "));
        assert!(growth_table(&[], 1, &[1]).is_err());
        assert!(growth_table(&models, 1, &[5, 3]).is_err());
        let single = growth_table(&models[..1], 10, &[42]).unwrap();
        assert_eq!(single.rows[0].factor, 1.0);
    }

    #[test]
    fn statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1.0);
        let f = linear_fit(&[1.0, 2.0, 3.0], &[5.0, 7.0, 9.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 3.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn guard_is_exclusive_and_repeats_are_checked() {
        let model = OcrModel::<f32>::new(desk(ModelKind::MambaCtc), Vocabulary::default_latin(), 0).unwrap();
        assert!(matches!(measure_latency(&model, &[Tensor::zeros([32, 64])], 0, 2), Err(Error::Argument(_))));
        let g = BenchGuard::acquire();
        if let Ok(_g) = g {
            assert!(matches!(BenchGuard::acquire(), Err(Error::BenchRefused(_))));
        }
    }
}
