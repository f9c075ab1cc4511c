use image::{GrayImage, ImageBuffer, Luma};
use imageproc::geometric_transformations::{warp, Interpolation, Projection};
use imageproc::morphology::{dilate, erode};
use imageproc::distance_transform::Norm;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AugmentOp {
    Blur,
    Noise,
    Elastic,
    Perspective,
    Morphology,
    Contrast,
    Sharpen,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 7] = [
        AugmentOp::Blur,
        AugmentOp::Noise,
        AugmentOp::Elastic,
        AugmentOp::Perspective,
        AugmentOp::Morphology,
        AugmentOp::Contrast,
        AugmentOp::Sharpen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::Blur => "blur",
            AugmentOp::Noise => "noise",
            AugmentOp::Elastic => "elastic",
            AugmentOp::Perspective => "perspective",
            AugmentOp::Morphology => "morphology",
            AugmentOp::Contrast => "contrast",
            AugmentOp::Sharpen => "sharpen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation {s:?}")))
    }
}

/// Parameter ranges each op samples from uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRanges {
    pub blur_sigma: (f32, f32),
    pub noise_sigma: (f64, f64),
    pub elastic_alpha: (f32, f32),
    pub elastic_smoothing: f32,
    /// Corner displacement as a fraction of the image extent.
    pub perspective: f32,
    pub contrast_gain: (f32, f32),
    pub contrast_shift: (f32, f32),
    pub sharpen_sigma: (f32, f32),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            blur_sigma: (0.3, 1.2),
            noise_sigma: (2.0, 10.0),
            elastic_alpha: (1.0, 4.0),
            elastic_smoothing: 4.0,
            perspective: 0.04,
            contrast_gain: (0.6, 1.0),
            contrast_shift: (-20.0, 20.0),
            sharpen_sigma: (0.5, 1.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    /// Enabled ops with their firing probability.
    pub ops: Vec<(AugmentOp, f64)>,
    pub ranges: AugmentRanges,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn all(probability: f64, seed: u64) -> Self {
        AugmentSpec {
            ops: AugmentOp::ALL.iter().map(|&op| (op, probability)).collect(),
            ranges: AugmentRanges::default(),
            seed,
        }
    }

    pub fn none() -> Self {
        AugmentSpec { ops: Vec::new(), ranges: AugmentRanges::default(), seed: 0 }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        AugmentSpec { seed, ..self.clone() }
    }
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo { rng.random_range(lo..hi) } else { lo }
}

/// Each enabled op fires independently; firing ops run in an order
/// shuffled by the seeded generator.
pub fn augment(img: &GrayImage, spec: &AugmentSpec) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order = spec.ops.clone();
    order.shuffle(&mut rng);
    let mut out = img.clone();
    for (op, p) in order {
        if rng.random::<f64>() >= p {
            continue;
        }
        let r = &spec.ranges;
        out = match op {
            AugmentOp::Blur => imageproc::filter::gaussian_blur_f32(&out, sample(&mut rng, r.blur_sigma)),
            AugmentOp::Noise => {
                let (lo, hi) = r.noise_sigma;
                let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
                gaussian_noise(&out, sigma, rng.random())
            }
            AugmentOp::Elastic => {
                let alpha = sample(&mut rng, r.elastic_alpha);
                elastic(&out, alpha, r.elastic_smoothing, &mut rng)
            }
            AugmentOp::Perspective => perspective(&out, r.perspective, &mut rng),
            AugmentOp::Morphology => {
                // ink is dark: eroding the bright ground thickens strokes
                if rng.random::<bool>() {
                    erode(&out, Norm::LInf, 1)
                } else {
                    dilate(&out, Norm::LInf, 1)
                }
            }
            AugmentOp::Contrast => {
                let gain = sample(&mut rng, r.contrast_gain);
                let shift = sample(&mut rng, r.contrast_shift);
                contrast(&out, gain, shift)
            }
            AugmentOp::Sharpen => image::imageops::unsharpen(&out, sample(&mut rng, r.sharpen_sigma), 0),
        };
    }
    out
}

pub fn gaussian_noise(img: &GrayImage, sigma: f64, seed: u64) -> GrayImage {
    imageproc::noise::gaussian_noise(img, 0.0, sigma, seed)
}

pub fn contrast(img: &GrayImage, gain: f32, shift: f32) -> GrayImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let v = (p.0[0] as f32 - 128.0) * gain + 128.0 + shift;
        p.0[0] = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn bilinear(img: &GrayImage, x: f32, y: f32) -> f32 {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let at = |xi: i64, yi: i64| -> f32 {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            255.0
        } else {
            img.get_pixel(xi as u32, yi as u32).0[0] as f32
        }
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as i64, y0 as i64);
    let top = at(xi, yi) * (1.0 - fx) + at(xi + 1, yi) * fx;
    let bottom = at(xi, yi + 1) * (1.0 - fx) + at(xi + 1, yi + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Smoothed random displacement field scaled to at most `alpha` pixels.
pub fn elastic(img: &GrayImage, alpha: f32, smoothing: f32, rng: &mut ChaCha8Rng) -> GrayImage {
    let (w, h) = img.dimensions();
    let mut field = || {
        let raw: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_fn(w, h, |_, _| Luma([rng.random_range(-1.0f32..1.0)]));
        let smooth = imageproc::filter::gaussian_blur_f32(&raw, smoothing);
        let peak = smooth.pixels().map(|p| p.0[0].abs()).fold(0.0f32, f32::max);
        let k = if peak > 0.0 { alpha / peak } else { 0.0 };
        smooth.pixels().map(|p| p.0[0] * k).collect::<Vec<f32>>()
    };
    let dx = field();
    let dy = field();
    GrayImage::from_fn(w, h, |x, y| {
        let i = (y * w + x) as usize;
        let v = bilinear(img, x as f32 + dx[i], y as f32 + dy[i]);
        Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}

/// Random corner jitter mapped through a homography.
pub fn perspective(img: &GrayImage, amount: f32, rng: &mut ChaCha8Rng) -> GrayImage {
    let (w, h) = (img.width() as f32, img.height() as f32);
    let corners = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)];
    let mut moved = corners;
    for c in &mut moved {
        c.0 += rng.random_range(-1.0f32..=1.0) * amount * w;
        c.1 += rng.random_range(-1.0f32..=1.0) * amount * h;
    }
    match Projection::from_control_points(corners, moved) {
        Some(p) => warp(img, &p, Interpolation::Bilinear, Luma([255])),
        None => img.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::glyphs::GlyphSet;
    use crate::synth::render::render_line;

    fn sample_image() -> GrayImage {
        render_line("Augmenté", &GlyphSet::builtin(3), 32).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let img = sample_image();
        assert_eq!(augment(&img, &AugmentSpec::all(0.0, 9)), img);
        assert_eq!(augment(&img, &AugmentSpec::none()), img);
    }

    #[test]
    fn seeded_output_is_reproducible() {
        let img = sample_image();
        let spec = AugmentSpec::all(0.5, 1234);
        assert_eq!(augment(&img, &spec), augment(&img, &spec));
        let always = AugmentSpec::all(1.0, 5);
        assert_ne!(augment(&img, &always), img);
    }

    #[test]
    fn noise_statistics() {
        let img = GrayImage::from_pixel(1000, 1000, Luma([128]));
        let out = gaussian_noise(&img, 10.0, 77);
        let n = 1e6;
        let mean = out.pixels().map(|p| p.0[0] as f64).sum::<f64>() / n;
        let var = out.pixels().map(|p| (p.0[0] as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 128.0).abs() <= 1.0, "mean {mean}");
        assert!((var.sqrt() - 10.0).abs() <= 1.0, "std {}", var.sqrt());
    }

    #[test]
    fn every_op_preserves_extents() {
        let img = sample_image();
        for op in AugmentOp::ALL {
            let spec = AugmentSpec { ops: vec![(op, 1.0)], ranges: AugmentRanges::default(), seed: 3 };
            assert_eq!(augment(&img, &spec).dimensions(), img.dimensions(), "{}", op.name());
            assert_eq!(AugmentOp::parse(op.name()).unwrap(), op);
        }
    }
}
