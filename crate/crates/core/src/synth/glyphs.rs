use std::collections::BTreeMap;

use crate::decoders::vocab::ACCENTED;
use crate::error::{Error, Result};

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

/// Printable ASCII `' '..='~'`, five column bytes per glyph, bit 0 = top row.
#[rustfmt::skip]
const ASCII_5X7: [[u8; 5]; 95] = [
    [0x00, 0x00, 0x00, 0x00, 0x00], [0x00, 0x00, 0x5F, 0x00, 0x00], [0x00, 0x07, 0x00, 0x07, 0x00],
    [0x14, 0x7F, 0x14, 0x7F, 0x14], [0x24, 0x2A, 0x7F, 0x2A, 0x12], [0x23, 0x13, 0x08, 0x64, 0x62],
    [0x36, 0x49, 0x55, 0x22, 0x50], [0x00, 0x05, 0x03, 0x00, 0x00], [0x00, 0x1C, 0x22, 0x41, 0x00],
    [0x00, 0x41, 0x22, 0x1C, 0x00], [0x14, 0x08, 0x3E, 0x08, 0x14], [0x08, 0x08, 0x3E, 0x08, 0x08],
    [0x00, 0x50, 0x30, 0x00, 0x00], [0x08, 0x08, 0x08, 0x08, 0x08], [0x00, 0x60, 0x60, 0x00, 0x00],
    [0x20, 0x10, 0x08, 0x04, 0x02], [0x3E, 0x51, 0x49, 0x45, 0x3E], [0x00, 0x42, 0x7F, 0x40, 0x00],
    [0x42, 0x61, 0x51, 0x49, 0x46], [0x21, 0x41, 0x45, 0x4B, 0x31], [0x18, 0x14, 0x12, 0x7F, 0x10],
    [0x27, 0x45, 0x45, 0x45, 0x39], [0x3C, 0x4A, 0x49, 0x49, 0x30], [0x01, 0x71, 0x09, 0x05, 0x03],
    [0x36, 0x49, 0x49, 0x49, 0x36], [0x06, 0x49, 0x49, 0x29, 0x1E], [0x00, 0x36, 0x36, 0x00, 0x00],
    [0x00, 0x56, 0x36, 0x00, 0x00], [0x08, 0x14, 0x22, 0x41, 0x00], [0x14, 0x14, 0x14, 0x14, 0x14],
    [0x00, 0x41, 0x22, 0x14, 0x08], [0x02, 0x01, 0x51, 0x09, 0x06], [0x32, 0x49, 0x79, 0x41, 0x3E],
    [0x7E, 0x11, 0x11, 0x11, 0x7E], [0x7F, 0x49, 0x49, 0x49, 0x36], [0x3E, 0x41, 0x41, 0x41, 0x22],
    [0x7F, 0x41, 0x41, 0x22, 0x1C], [0x7F, 0x49, 0x49, 0x49, 0x41], [0x7F, 0x09, 0x09, 0x09, 0x01],
    [0x3E, 0x41, 0x49, 0x49, 0x7A], [0x7F, 0x08, 0x08, 0x08, 0x7F], [0x00, 0x41, 0x7F, 0x41, 0x00],
    [0x20, 0x40, 0x41, 0x3F, 0x01], [0x7F, 0x08, 0x14, 0x22, 0x41], [0x7F, 0x40, 0x40, 0x40, 0x40],
    [0x7F, 0x02, 0x0C, 0x02, 0x7F], [0x7F, 0x04, 0x08, 0x10, 0x7F], [0x3E, 0x41, 0x41, 0x41, 0x3E],
    [0x7F, 0x09, 0x09, 0x09, 0x06], [0x3E, 0x41, 0x51, 0x21, 0x5E], [0x7F, 0x09, 0x19, 0x29, 0x46],
    [0x46, 0x49, 0x49, 0x49, 0x31], [0x01, 0x01, 0x7F, 0x01, 0x01], [0x3F, 0x40, 0x40, 0x40, 0x3F],
    [0x1F, 0x20, 0x40, 0x20, 0x1F], [0x3F, 0x40, 0x38, 0x40, 0x3F], [0x63, 0x14, 0x08, 0x14, 0x63],
    [0x07, 0x08, 0x70, 0x08, 0x07], [0x61, 0x51, 0x49, 0x45, 0x43], [0x00, 0x7F, 0x41, 0x41, 0x00],
    [0x02, 0x04, 0x08, 0x10, 0x20], [0x00, 0x41, 0x41, 0x7F, 0x00], [0x04, 0x02, 0x01, 0x02, 0x04],
    [0x40, 0x40, 0x40, 0x40, 0x40], [0x00, 0x01, 0x02, 0x04, 0x00], [0x20, 0x54, 0x54, 0x54, 0x78],
    [0x7F, 0x48, 0x44, 0x44, 0x38], [0x38, 0x44, 0x44, 0x44, 0x20], [0x38, 0x44, 0x44, 0x48, 0x7F],
    [0x38, 0x54, 0x54, 0x54, 0x18], [0x08, 0x7E, 0x09, 0x01, 0x02], [0x0C, 0x52, 0x52, 0x52, 0x3E],
    [0x7F, 0x08, 0x04, 0x04, 0x78], [0x00, 0x44, 0x7D, 0x40, 0x00], [0x20, 0x40, 0x44, 0x3D, 0x00],
    [0x7F, 0x10, 0x28, 0x44, 0x00], [0x00, 0x41, 0x7F, 0x40, 0x00], [0x7C, 0x04, 0x18, 0x04, 0x78],
    [0x7C, 0x08, 0x04, 0x04, 0x78], [0x38, 0x44, 0x44, 0x44, 0x38], [0x7C, 0x14, 0x14, 0x14, 0x08],
    [0x08, 0x14, 0x14, 0x18, 0x7C], [0x7C, 0x08, 0x04, 0x04, 0x08], [0x48, 0x54, 0x54, 0x54, 0x20],
    [0x04, 0x3F, 0x44, 0x40, 0x20], [0x3C, 0x40, 0x40, 0x20, 0x7C], [0x1C, 0x20, 0x40, 0x20, 0x1C],
    [0x3C, 0x40, 0x30, 0x40, 0x3C], [0x44, 0x28, 0x10, 0x28, 0x44], [0x0C, 0x50, 0x50, 0x50, 0x3C],
    [0x44, 0x64, 0x54, 0x4C, 0x44], [0x00, 0x08, 0x36, 0x41, 0x00], [0x00, 0x00, 0x7F, 0x00, 0x00],
    [0x00, 0x41, 0x36, 0x08, 0x00], [0x10, 0x08, 0x08, 0x10, 0x08],
];

// Diacritics live in the two top rows, which the plain lowercase bases
// leave empty.
const GRAVE: [u8; 5] = [0x00, 0x01, 0x02, 0x00, 0x00];
const ACUTE: [u8; 5] = [0x00, 0x00, 0x02, 0x01, 0x00];
const CIRCUMFLEX: [u8; 5] = [0x00, 0x02, 0x01, 0x02, 0x00];
const DIAERESIS: [u8; 5] = [0x00, 0x01, 0x00, 0x01, 0x00];
const DOTLESS_I: [u8; 5] = [0x00, 0x44, 0x7C, 0x40, 0x00];
const C_CEDILLA: [u8; 5] = [0x1C, 0x22, 0x62, 0x22, 0x10];
/// Drawn for characters without a glyph when a fallback is allowed.
const FALLBACK_BOX: [u8; 5] = [0x7F, 0x41, 0x41, 0x41, 0x7F];

fn ascii(c: char) -> [u8; 5] {
    ASCII_5X7[c as usize - ' ' as usize]
}

fn overlay(base: [u8; 5], mark: [u8; 5]) -> [u8; 5] {
    std::array::from_fn(|i| base[i] | mark[i])
}

fn accented(c: char) -> Option<[u8; 5]> {
    let (base, mark) = match c {
        'à' => ('a', GRAVE),
        'â' => ('a', CIRCUMFLEX),
        'ä' => ('a', DIAERESIS),
        'é' => ('e', ACUTE),
        'è' => ('e', GRAVE),
        'ê' => ('e', CIRCUMFLEX),
        'ë' => ('e', DIAERESIS),
        'î' => return Some(overlay(DOTLESS_I, CIRCUMFLEX)),
        'ï' => return Some(overlay(DOTLESS_I, DIAERESIS)),
        'ô' => ('o', CIRCUMFLEX),
        'ö' => ('o', DIAERESIS),
        'ù' => ('u', GRAVE),
        'û' => ('u', CIRCUMFLEX),
        'ü' => ('u', DIAERESIS),
        'ç' => return Some(C_CEDILLA),
        _ => return None,
    };
    Some(overlay(ascii(base), mark))
}

/// Bitmap font at an integer scale.
#[derive(Clone, Debug)]
pub struct GlyphSet {
    glyphs: BTreeMap<char, [u8; 5]>,
    pub scale: usize,
    /// Blank columns between glyphs, in unscaled pixels.
    pub spacing: usize,
    /// Draw a box for unknown characters instead of failing.
    pub fallback: bool,
}

impl GlyphSet {
    pub fn builtin(scale: usize) -> Self {
        let mut glyphs: BTreeMap<char, [u8; 5]> = (' '..='~').map(|c| (c, ascii(c))).collect();
        for c in ACCENTED.chars() {
            glyphs.insert(c, accented(c).expect("every accented form has a glyph"));
        }
        GlyphSet { glyphs, scale: scale.max(1), spacing: 1, fallback: false }
    }

    pub fn contains(&self, c: char) -> bool {
        self.glyphs.contains_key(&c)
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.glyphs.keys().copied()
    }

    pub fn columns(&self, c: char) -> Result<[u8; 5]> {
        match self.glyphs.get(&c) {
            Some(g) => Ok(*g),
            None if self.fallback => Ok(FALLBACK_BOX),
            None => Err(Error::Render(c)),
        }
    }

    /// Whether unscaled pixel `(row, col)` of `c` is ink.
    pub fn pixel(cols: &[u8; 5], row: usize, col: usize) -> bool {
        cols[col] >> row & 1 == 1
    }

    pub fn popcount(&self, c: char) -> Result<usize> {
        Ok(self.columns(c)?.iter().map(|b| b.count_ones() as usize).sum())
    }

    /// Horizontal advance per character in output pixels.
    pub fn advance(&self) -> usize {
        (GLYPH_W + self.spacing) * self.scale
    }

    pub fn glyph_height(&self) -> usize {
        GLYPH_H * self.scale
    }
}
