//! Fixtures shared by the criterion benchmarks.

use ssmocr_core::decoders::Vocabulary;
use ssmocr_core::model::{ModelConfig, ModelKind, OcrModel, Preset};
use ssmocr_core::ssm::scan::discretize_zoh;
use ssmocr_core::Tensor;

/// Randomly initialized desk-preset model whose attention context covers
/// `context` positions.
pub fn desk_model(kind: ModelKind, context: usize) -> OcrModel<f32> {
    let mut cfg = ModelConfig::preset(kind, Preset::Desk);
    cfg.attn_max_context = cfg.attn_max_context.max(context);
    OcrModel::new(cfg, Vocabulary::default_latin(), 0).expect("desk preset is valid")
}

/// Discretized scan inputs `(ā, b̄·x, C, x, D)` for a length-`l` sequence,
/// filled with a deterministic pattern.
pub struct ScanInputs {
    pub a_bar: Tensor<f32>,
    pub bx: Tensor<f32>,
    pub c: Tensor<f32>,
    pub x: Tensor<f32>,
    pub d: Vec<f32>,
}

fn wave(i: usize, k: f32) -> f32 {
    (i as f32 * k).sin()
}

pub fn scan_inputs(l: usize, d_inner: usize, n: usize) -> ScanInputs {
    let a = Tensor::from_fn([d_inner, n], |i| -0.5 - wave(i, 0.37).abs());
    let delta = Tensor::from_fn([l, d_inner], |i| 0.05 + 0.1 * wave(i, 0.11).abs());
    let b = Tensor::from_fn([l, n], |i| wave(i, 0.23));
    let (a_bar, b_bar) = discretize_zoh(&a, &delta, &b).expect("shapes agree");
    let x = Tensor::from_fn([l, d_inner], |i| wave(i, 0.71));
    let bx = Tensor::from_fn([l, d_inner, n], |i| b_bar.data()[i] * x.data()[i / n]);
    ScanInputs { a_bar, bx, c: Tensor::from_fn([l, n], |i| wave(i, 0.53)), x, d: vec![1.0; d_inner] }
}
