//! Finite-difference checks for every differentiable operation and for the
//! composite layers, in f64.

use super::{check_module, check_op, rand_tensor, rng, KINKED_STEP, SMOOTH_STEP};
use ssmocr_core::decoders::{ArDecoder, CtcDecoder, NarDecoder, Vocabulary};
use ssmocr_core::nn::{Binder, Init, LayerNorm, Linear, ParamStore};
use ssmocr_core::ssm::{BiMambaConnector, MambaBlock, MambaConfig, ScanMode};
use ssmocr_core::vision::{Activation, EncoderConfig, NormKind, VisionEncoder};
use ssmocr_core::{Result, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-5;

pub type Check = fn(u64) -> Result<f64>;

fn op(seed: u64, shapes: &[&[usize]], f: &dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    op_with(seed, SMOOTH_STEP, shapes, f)
}

fn op_with(seed: u64, step: f64, shapes: &[&[usize]], f: &dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut r = rng(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut r, s, -1.5, 1.5)).collect();
    check_op(seed, step, &inputs, f)
}

fn mamba_cfg(mode: ScanMode) -> MambaConfig {
    MambaConfig { d_model: 4, d_state: 3, expand: 2, scan_mode: mode }
}

fn scan_inputs(seed: u64, a: (f64, f64)) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    vec![
        rand_tensor(&mut r, &[5, 4], -1.0, 1.0),
        rand_tensor(&mut r, &[5, 4], 0.05, 1.0),
        rand_tensor(&mut r, &[4, 3], a.0, a.1),
        rand_tensor(&mut r, &[5, 3], -1.0, 1.0),
        rand_tensor(&mut r, &[5, 3], -1.0, 1.0),
        rand_tensor(&mut r, &[4], -1.0, 1.0),
    ]
}

fn scan_check(seed: u64, mode: ScanMode, a: (f64, f64)) -> Result<f64> {
    check_op(seed, SMOOTH_STEP, &scan_inputs(seed, a), &|t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], mode))
}

fn module(
    seed: u64,
    step: f64,
    build: &dyn Fn(&mut ParamStore<f64>, &mut Init),
    inputs: &[&[usize]],
    f: &dyn Fn(&Binder<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    build(&mut store, &mut init);
    // Evaluate at a generic point: every parameter is jittered, and the
    // step-size bias is redrawn so Δ = softplus(·) is O(1). At the initial
    // Δ ≈ 1e-3 the SSM gradients sit below central-difference resolution.
    let mut r = rng(seed ^ 77);
    store.map_values(|name, v| {
        let dt = name.ends_with("dt_bias");
        Tensor::from_fn(v.shape().to_vec(), |i| {
            let j: f64 = rand::Rng::random_range(&mut r, -0.1..0.1);
            if dt { 10.0 * j } else { v.data()[i] + j }
        })
    });
    let mut r = rng(seed ^ 99);
    let xs: Vec<Tensor<f64>> = inputs.iter().map(|s| rand_tensor(&mut r, s, -1.0, 1.0)).collect();
    check_module(seed, step, &store, &xs, f)
}

fn vocab() -> Vocabulary {
    Vocabulary::new("ab".chars()).unwrap()
}

fn mamba_block(seed: u64, mode: ScanMode) -> Result<f64> {
    let cell = std::cell::OnceCell::new();
    module(
        seed,
        SMOOTH_STEP,
        &|s, i| {
            let _ = cell.set(MambaBlock::new(s, i, "m", mamba_cfg(mode)));
        },
        &[&[5, 4]],
        &|bx, v| cell.get().unwrap().forward(bx, v[0]),
    )
}

fn connector(seed: u64, mode: ScanMode) -> Result<f64> {
    let cell = std::cell::OnceCell::new();
    module(
        seed,
        SMOOTH_STEP,
        &|s, i| {
            let _ = cell.set(BiMambaConnector::new(s, i, "c", mamba_cfg(mode)));
        },
        &[&[5, 4]],
        &|bx, v| cell.get().unwrap().forward(bx, v[0]),
    )
}

fn encoder(seed: u64) -> Result<f64> {
    let cfg = EncoderConfig {
        channels: vec![2, 2, 3, 3, 4],
        kernel: 3,
        pooling: vec![(2, 2), (2, 1), (1, 2), (1, 1), (1, 1)],
        norm: NormKind::Batch,
        activation: Activation::Gelu,
        min_height: 4,
        min_width: 4,
    };
    let mut r = rng(seed ^ 5);
    let image = rand_tensor(&mut r, &[8, 12], 0.0, 1.0);
    let cell = std::cell::OnceCell::new();
    module(
        seed,
        KINKED_STEP,
        &|s, i| {
            let _ = cell.set(VisionEncoder::new(s, i, "e", cfg.clone()).unwrap());
        },
        &[],
        &|bx, _| Ok(cell.get().unwrap().forward(bx, &image)?.0),
    )
}

fn ctc_head(seed: u64) -> Result<f64> {
    let cell = std::cell::OnceCell::new();
    module(
        seed,
        SMOOTH_STEP,
        &|s, i| {
            let _ = cell.set(CtcDecoder::new(s, i, mamba_cfg(ScanMode::Sequential), 1, &vocab()));
        },
        &[&[6, 4]],
        &|bx, v| cell.get().unwrap().loss(bx, v[0], &[1, 2, 2]),
    )
}

fn ar_head(seed: u64) -> Result<f64> {
    let cell = std::cell::OnceCell::new();
    module(
        seed,
        SMOOTH_STEP,
        &|s, i| {
            let _ = cell.set(ArDecoder::new(s, i, mamba_cfg(ScanMode::Sequential), 1, &vocab(), 8));
        },
        &[&[4, 4]],
        &|bx, v| cell.get().unwrap().loss(bx, v[0], &[2, 1, 2]),
    )
}

fn nar_head(seed: u64) -> Result<f64> {
    let cell = std::cell::OnceCell::new();
    module(
        seed,
        SMOOTH_STEP,
        &|s, i| {
            let _ = cell.set(NarDecoder::new(s, i, mamba_cfg(ScanMode::Sequential), 1, &vocab(), 5));
        },
        &[&[4, 4]],
        &|bx, v| cell.get().unwrap().loss(bx, v[0], &[1, 2]),
    )
}

fn linear_layer(seed: u64) -> Result<f64> {
    let cell = std::cell::OnceCell::new();
    module(
        seed,
        SMOOTH_STEP,
        &|s, i| {
            let _ = cell.set((Linear::new(s, i, "l", 4, 3, true), LayerNorm::new(s, "n", 3)));
        },
        &[&[5, 4]],
        &|bx, v| {
            let (l, n) = cell.get().unwrap();
            let y = l.forward(bx, v[0])?;
            n.forward(bx, y)
        },
    )
}

pub fn suite() -> Vec<(&'static str, Check)> {
    vec![
        ("matmul", |s| op(s, &[&[3, 4], &[4, 2]], &|t, v| t.matmul(v[0], v[1]))),
        ("add", |s| op(s, &[&[3, 4], &[3, 4]], &|t, v| t.add(v[0], v[1]))),
        ("sub", |s| op(s, &[&[3, 4], &[3, 4]], &|t, v| t.sub(v[0], v[1]))),
        ("mul", |s| op(s, &[&[3, 4], &[3, 4]], &|t, v| t.mul(v[0], v[1]))),
        ("scale", |s| op(s, &[&[3, 4]], &|t, v| t.scale(v[0], 0.7))),
        ("add_bias", |s| op(s, &[&[3, 4], &[4]], &|t, v| t.add_bias(v[0], v[1]))),
        ("gelu", |s| op(s, &[&[3, 4]], &|t, v| t.gelu(v[0]))),
        ("silu", |s| op(s, &[&[3, 4]], &|t, v| t.silu(v[0]))),
        ("softplus", |s| op(s, &[&[3, 4]], &|t, v| t.softplus(v[0]))),
        ("exp", |s| op(s, &[&[3, 4]], &|t, v| t.exp(v[0]))),
        ("softmax", |s| op(s, &[&[3, 5]], &|t, v| t.softmax(v[0]))),
        ("layernorm", |s| op(s, &[&[3, 5], &[5], &[5]], &|t, v| t.layernorm(v[0], v[1], v[2]))),
        ("conv2d", |s| op(s, &[&[2, 5, 6], &[3, 2, 3, 3], &[3]], &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1))),
        ("conv2d_strided", |s| op(s, &[&[2, 5, 6], &[3, 2, 3, 3]], &|t, v| t.conv2d(v[0], v[1], None, 2, 0))),
        ("maxpool2d", |s| op_with(s, KINKED_STEP, &[&[2, 4, 6]], &|t, v| t.maxpool2d(v[0], 2, 2))),
        ("maxpool2d_ragged", |s| op_with(s, KINKED_STEP, &[&[2, 5, 5]], &|t, v| t.maxpool2d(v[0], 2, 1))),
        ("channel_norm", |s| {
            op(s, &[&[2, 3, 3], &[2], &[2]], &|t, v| t.channel_norm(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5))
        }),
        ("transpose", |s| op(s, &[&[3, 4]], &|t, v| t.transpose(v[0]))),
        ("reshape", |s| op(s, &[&[3, 4]], &|t, v| t.reshape(v[0], &[2, 6]))),
        ("slice_cols", |s| op(s, &[&[3, 5]], &|t, v| t.slice_cols(v[0], 1, 3))),
        ("slice_rows", |s| op(s, &[&[5, 3]], &|t, v| t.slice_rows(v[0], 2, 2))),
        ("concat_rows", |s| op(s, &[&[2, 3], &[3, 3]], &|t, v| t.concat_rows(&[v[0], v[1], v[0]]))),
        ("flip_rows", |s| op(s, &[&[4, 3]], &|t, v| t.flip_rows(v[0]))),
        ("repeat_cols", |s| op(s, &[&[3, 1]], &|t, v| t.repeat_cols(v[0], 3))),
        ("causal_conv1d", |s| op(s, &[&[6, 3], &[3, 4], &[3]], &|t, v| t.causal_conv1d(v[0], v[1], v[2]))),
        ("selective_scan_sequential", |s| scan_check(s, ScanMode::Sequential, (-2.0, -0.1))),
        ("selective_scan_parallel", |s| scan_check(s, ScanMode::Parallel, (-2.0, -0.1))),
        // |Δ·a| inside the Taylor region of the gain derivative
        ("selective_scan_small_rate", |s| scan_check(s, ScanMode::Sequential, (-1e-3, -1e-5))),
        // |Δ·a| inside the series branch of the gain itself
        ("selective_scan_tiny_rate", |s| scan_check(s, ScanMode::Parallel, (-1e-6, -1e-8))),
        ("embedding", |s| op(s, &[&[5, 3]], &|t, v| t.embedding(v[0], &[0, 2, 2, 4]))),
        ("cross_entropy", |s| op(s, &[&[4, 5]], &|t, v| t.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)]))),
        ("ctc_loss", |s| op(s, &[&[6, 4]], &|t, v| t.ctc_loss(v[0], &[1, 2, 2], 0))),
        ("sum", |s| op(s, &[&[3, 4]], &|t, v| t.sum(v[0]))),
        ("mean", |s| op(s, &[&[3, 4]], &|t, v| t.mean(v[0]))),
        ("linear_layernorm", linear_layer),
        ("mamba_block", |s| mamba_block(s, ScanMode::Sequential)),
        ("mamba_block_parallel", |s| mamba_block(s, ScanMode::Parallel)),
        ("bimamba_connector", |s| connector(s, ScanMode::Sequential)),
        ("bimamba_connector_parallel", |s| connector(s, ScanMode::Parallel)),
        ("vision_encoder", encoder),
        ("ctc_head", ctc_head),
        ("ar_head", ar_head),
        ("nar_head", nar_head),
    ]
}

/// Worst error of each check over `seeds` seeds.
pub fn run(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    suite()
        .into_iter()
        .map(|(name, f)| {
            let worst = (0..seeds).map(f).try_fold(0.0f64, |w, e| e.map(|e| w.max(e)))?;
            Ok((name, worst))
        })
        .collect()
}
