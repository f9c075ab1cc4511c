use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, GrayImage, ImageEncoder};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Reads a PGM (P2 or P5). Colour inputs are reduced by the channel mean.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(match img {
        DynamicImage::ImageLuma8(g) => g,
        other if other.color().has_color() => {
            let rgb = other.to_rgb8();
            GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| {
                let p = rgb.get_pixel(x, y).0;
                image::Luma([((p[0] as u32 + p[1] as u32 + p[2] as u32 + 1) / 3) as u8])
            })
        }
        other => other.to_luma8(),
    })
}

/// Writes a binary (P5) PGM.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::L8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Ink density `1 − v/255`, so white paper is zero.
pub fn to_ink<T: Float>(img: &GrayImage) -> Tensor<T> {
    let data = img.as_raw().iter().map(|&v| T::of(1.0 - v as f64 / 255.0)).collect();
    Tensor::new([img.height() as usize, img.width() as usize], data).expect("buffer matches extents")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: PathBuf,
    pub transcript: String,
}

impl Sample {
    pub fn line_count(&self) -> usize {
        self.transcript.split('\n').count()
    }
}

pub fn escape_transcript(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_transcript(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some(o) => return Err(format!("unknown escape \\{o}")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

/// Image paths are resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (img, tr) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(i + 1, "expected <image>TAB<transcript>".into()))?;
        if img.is_empty() {
            return Err(parse_err(i + 1, "empty image path".into()));
        }
        if tr.contains('\t') {
            return Err(parse_err(i + 1, "unescaped TAB in transcript".into()));
        }
        let transcript = unescape_transcript(tr).map_err(|m| parse_err(i + 1, m))?;
        out.push(Sample { image: base.join(img), transcript });
    }
    Ok(out)
}

/// Writes image paths relative to the manifest directory when possible.
pub fn write_manifest(path: &Path, samples: &[Sample]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for s in samples {
        let rel = s.image.strip_prefix(base).unwrap_or(&s.image);
        text.push_str(&rel.to_string_lossy());
        text.push('\t');
        text.push_str(&escape_transcript(&s.transcript));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
