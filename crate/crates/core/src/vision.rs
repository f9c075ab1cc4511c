//! CNN feature extractor, 2-D positional encoding and grid flattening.
//!
//! Images enter as ink density in `[0, 1]` (0 = white paper), so padding
//! with white is padding with zeros.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Binder, Init, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per-channel affine normalization with running statistics.
    Batch,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub pooling: Vec<(usize, usize)>,
    pub norm: NormKind,
    pub activation: Activation,
    /// Images are padded with white up to these extents.
    pub min_height: usize,
    pub min_width: usize,
}

impl EncoderConfig {
    pub fn new(d_model: usize) -> Self {
        EncoderConfig {
            channels: vec![16, 32, 64, 128, d_model],
            kernel: 3,
            pooling: vec![(2, 2), (2, 2), (2, 2), (2, 2), (2, 1)],
            norm: NormKind::Batch,
            activation: Activation::Gelu,
            min_height: 100,
            min_width: 1000,
        }
    }

    pub fn d_model(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    /// `(Π ph, Π pw)`.
    pub fn downsample(&self) -> (usize, usize) {
        self.pooling.iter().fold((1, 1), |(a, b), &(ph, pw)| (a * ph, b * pw))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 5 || self.pooling.len() != 5 {
            return Err(Error::Config(format!(
                "encoder needs 5 stages, got {} channel entries and {} pooling entries",
                self.channels.len(),
                self.pooling.len()
            )));
        }
        if self.channels.contains(&0) || self.pooling.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Config("encoder channels and pooling must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("encoder kernel {} must be odd", self.kernel)));
        }
        if !self.d_model().is_multiple_of(4) {
            return Err(Error::Config(format!(
                "model dimension {} must be divisible by 4 for 2-D positional encoding",
                self.d_model()
            )));
        }
        Ok(())
    }

    /// Grid extents for an `h × w` input after padding.
    pub fn grid_shape(&self, h: usize, w: usize) -> (usize, usize) {
        let (h, w) = (h.max(self.min_height), w.max(self.min_width));
        let (fh, fw) = self.downsample();
        (h.div_ceil(fh), w.div_ceil(fw))
    }
}

/// `H′ × W′ × D` features in row-major cell order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<T>,
    /// Extents of the image the grid was computed from, before padding.
    pub origin: (usize, usize),
}

impl<T: Float> FeatureGrid<T> {
    pub fn cell(&self, r: usize, c: usize) -> &[T] {
        let i = (r * self.width + c) * self.dim;
        &self.data[i..i + self.dim]
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv_w: ParamId,
    conv_b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    pool: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub cfg: EncoderConfig,
    stages: Vec<Stage>,
}

/// Pads `image` (`H × W`) with zeros on the bottom and right.
pub fn pad_image<T: Float>(image: &Tensor<T>, min_h: usize, min_w: usize) -> Result<Tensor<T>> {
    let (h, w) = image.dims2()?;
    let (ph, pw) = (h.max(min_h), w.max(min_w));
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let mut out = vec![T::zero(); ph * pw];
    for r in 0..h {
        out[r * pw..r * pw + w].copy_from_slice(image.row(r));
    }
    Tensor::new([ph, pw], out)
}

/// Sinusoidal code for cell `(r, c)` with `dim` channels.
pub fn positional_code(r: usize, c: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for (offset, pos) in [(0, r as f64), (half, c as f64)] {
        for i in 0..half / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / half as f64);
            out[offset + 2 * i] = (pos * freq).sin();
            out[offset + 2 * i + 1] = (pos * freq).cos();
        }
    }
    out
}

/// Flattened `(H′·W′) × D` encoding table.
pub fn positional_table<T: Float>(height: usize, width: usize, dim: usize) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "model dimension {dim} must be divisible by 4 for 2-D positional encoding"
        )));
    }
    let mut data = Vec::with_capacity(height * width * dim);
    for r in 0..height {
        for c in 0..width {
            data.extend(positional_code(r, c, dim).into_iter().map(T::of));
        }
    }
    Tensor::new([height * width, dim], data)
}

pub fn positional_encode_2d<T: Float>(grid: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
    let table = positional_table::<T>(grid.height, grid.width, grid.dim)?;
    let mut out = grid.clone();
    for (v, &p) in out.data.iter_mut().zip(table.data()) {
        *v += p;
    }
    Ok(out)
}

/// Row-major flattening: cell `(r, c)` becomes row `r·W′ + c`.
pub fn flatten_grid<T: Float>(grid: &FeatureGrid<T>) -> Tensor<T> {
    Tensor::new([grid.height * grid.width, grid.dim], grid.data.clone()).expect("grid buffer matches its extents")
}

pub fn unflatten_grid<T: Float>(seq: &Tensor<T>, height: usize, width: usize, origin: (usize, usize)) -> Result<FeatureGrid<T>> {
    let (l, dim) = seq.dims2()?;
    if l != height * width {
        return Err(Error::dim("unflatten_grid", format!("{l} rows for a {height}×{width} grid")));
    }
    Ok(FeatureGrid { height, width, dim, data: seq.data().to_vec(), origin })
}

impl VisionEncoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let mut c_in = 1;
        let mut stages = Vec::with_capacity(5);
        for (i, (&c_out, &pool)) in cfg.channels.iter().zip(&cfg.pooling).enumerate() {
            let bound = (6.0 / (c_in * k * k) as f64).sqrt();
            let p = format!("{name}.conv{i}");
            stages.push(Stage {
                conv_w: store.add(format!("{p}.w"), init.uniform([c_out, c_in, k, k], bound), true),
                conv_b: store.add(format!("{p}.b"), Tensor::zeros([c_out]), false),
                gamma: store.add(format!("{p}.bn.gamma"), Tensor::full([c_out], T::one()), false),
                beta: store.add(format!("{p}.bn.beta"), Tensor::zeros([c_out]), false),
                running_mean: store.add_buffer(format!("{p}.bn.running_mean"), Tensor::zeros([c_out])),
                running_var: store.add_buffer(format!("{p}.bn.running_var"), Tensor::full([c_out], T::one())),
                pool,
            });
            c_in = c_out;
        }
        Ok(VisionEncoder { cfg, stages })
    }

    fn prepare<T: Float>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = image.dims2()?;
        let padded = pad_image(image, self.cfg.min_height, self.cfg.min_width)?;
        let (fh, fw) = self.cfg.downsample();
        let (ph, pw) = padded.dims2()?;
        if h == 0 || w == 0 || ph < fh || pw < fw {
            return Err(Error::ImageTooSmall {
                height: ph,
                width: pw,
                min_height: fh,
                min_width: fw,
            });
        }
        Ok(padded)
    }

    /// Conv stages only; returns the `D × H′ × W′` map.
    pub fn feature_map<T: Float>(&self, bx: &Binder<'_, T>, image: &Tensor<T>) -> Result<Var> {
        let t = bx.tape;
        let padded = self.prepare(image)?;
        let (h, w) = padded.dims2()?;
        let mut x = t.constant(padded.reshape([1, h, w])?);
        let pad = self.cfg.kernel / 2;
        for s in &self.stages {
            x = t.conv2d(x, bx.p(s.conv_w), Some(bx.p(s.conv_b)), 1, pad)?;
            if self.cfg.norm == NormKind::Batch {
                let mean = bx.store.get(s.running_mean).data().to_vec();
                let var = bx.store.get(s.running_var).data().to_vec();
                x = t.channel_norm(x, bx.p(s.gamma), bx.p(s.beta), &mean, &var, T::of(BN_EPS))?;
            }
            x = match self.cfg.activation {
                Activation::Gelu => t.gelu(x)?,
                Activation::Silu => t.silu(x)?,
            };
            x = t.maxpool2d(x, s.pool.0, s.pool.1)?;
        }
        Ok(x)
    }

    /// Visual sequence `L × D` with positional encoding, plus the grid
    /// extents `(H′, W′)`.
    pub fn forward<T: Float>(&self, bx: &Binder<'_, T>, image: &Tensor<T>) -> Result<(Var, (usize, usize))> {
        let t = bx.tape;
        let map = self.feature_map(bx, image)?;
        let shape = t.shape(map);
        let (d, gh, gw) = (shape[0], shape[1], shape[2]);
        let seq = t.reshape(map, &[d, gh * gw])?;
        let seq = t.transpose(seq)?;
        let pe = t.constant(positional_table::<T>(gh, gw, d)?);
        Ok((t.add(seq, pe)?, (gh, gw)))
    }

    /// Conv features without positional encoding.
    pub fn encode_image<T: Float>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<FeatureGrid<T>> {
        let tape = crate::autodiff::Tape::new();
        let bx = Binder::new(&tape, store, false);
        let map = tape.value(self.feature_map(&bx, image)?);
        let (d, gh, gw) = map.dims3()?;
        let mut data = vec![T::zero(); d * gh * gw];
        for ch in 0..d {
            for cell in 0..gh * gw {
                data[cell * d + ch] = map.data()[ch * gh * gw + cell];
            }
        }
        let (h, w) = image.dims2()?;
        Ok(FeatureGrid { height: gh, width: gw, dim: d, data, origin: (h, w) })
    }
}
