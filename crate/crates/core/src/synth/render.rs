use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::synth::glyphs::{GlyphSet, GLYPH_H, GLYPH_W};

pub const WHITE: u8 = 255;
pub const INK: u8 = 0;
/// Paragraph length limit of the training corpus.
pub const MAX_PARAGRAPH_LINES: usize = 10;

/// Horizontal margin on each side of a rendered line.
pub fn line_margin(glyphs: &GlyphSet) -> usize {
    2 * glyphs.scale
}

pub fn line_width(chars: usize, glyphs: &GlyphSet) -> usize {
    let body = if chars == 0 { 0 } else { chars * glyphs.advance() - glyphs.spacing * glyphs.scale };
    body + 2 * line_margin(glyphs)
}

/// Dark glyphs on white, vertically centered in `height` rows.
pub fn render_line(text: &str, glyphs: &GlyphSet, height: usize) -> Result<GrayImage> {
    if height < glyphs.glyph_height() {
        return Err(Error::Range(format!(
            "line height {height} below glyph height {}",
            glyphs.glyph_height()
        )));
    }
    if text.contains('\n') {
        return Err(Error::Argument("line text contains a line break".into()));
    }
    let chars: Vec<char> = text.chars().collect();
    let cols: Vec<[u8; 5]> = chars.iter().map(|&c| glyphs.columns(c)).collect::<Result<_>>()?;
    let width = line_width(chars.len(), glyphs);
    let mut img = GrayImage::from_pixel(width as u32, height as u32, Luma([WHITE]));
    let s = glyphs.scale;
    let top = (height - glyphs.glyph_height()) / 2;
    for (i, g) in cols.iter().enumerate() {
        let left = line_margin(glyphs) + i * glyphs.advance();
        for row in 0..GLYPH_H {
            for col in 0..GLYPH_W {
                if !GlyphSet::pixel(g, row, col) {
                    continue;
                }
                for dy in 0..s {
                    for dx in 0..s {
                        img.put_pixel((left + col * s + dx) as u32, (top + row * s + dy) as u32, Luma([INK]));
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Lines stacked top to bottom with `spacing` blank rows between them;
/// shorter lines are padded on the right.
pub fn render_paragraph(
    lines: &[&str],
    glyphs: &GlyphSet,
    line_height: usize,
    spacing: usize,
    max_lines: usize,
) -> Result<GrayImage> {
    if lines.is_empty() || lines.len() > max_lines {
        return Err(Error::Range(format!(
            "paragraph has {} lines, allowed 1..={max_lines}",
            lines.len()
        )));
    }
    let rendered: Vec<GrayImage> = lines.iter().map(|l| render_line(l, glyphs, line_height)).collect::<Result<_>>()?;
    let width = rendered.iter().map(|r| r.width()).max().unwrap_or(0);
    let height = lines.len() * line_height + (lines.len() - 1) * spacing;
    let mut img = GrayImage::from_pixel(width, height as u32, Luma([WHITE]));
    for (i, r) in rendered.iter().enumerate() {
        let y0 = (i * (line_height + spacing)) as u32;
        image::imageops::replace(&mut img, r, 0, y0 as i64);
    }
    Ok(img)
}

pub fn ink_pixels(img: &GrayImage) -> usize {
    img.pixels().filter(|p| p.0[0] < 128).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_line_is_blank() {
        let g = GlyphSet::builtin(3);
        let img = render_line("", &g, 32).unwrap();
        assert_eq!((img.width() as usize, img.height()), (line_width(0, &g), 32));
        assert_eq!(ink_pixels(&img), 0);
    }

    #[test]
    fn ink_equals_scaled_popcount() {
        for scale in 1..5 {
            let g = GlyphSet::builtin(scale);
            let img = render_line("I", &g, 40).unwrap();
            assert_eq!(ink_pixels(&img), g.popcount('I').unwrap() * scale * scale);
        }
        let g = GlyphSet::builtin(2);
        let text = "Où ça? Déjà vu!";
        let want: usize = text.chars().map(|c| g.popcount(c).unwrap() * 4).sum();
        assert_eq!(ink_pixels(&render_line(text, &g, 20).unwrap()), want);
    }

    #[test]
    fn deterministic_and_monotone() {
        let g = GlyphSet::builtin(2);
        let a = render_line("abc", &g, 20).unwrap();
        assert_eq!(a, render_line("abc", &g, 20).unwrap());
        let mut prev = 0;
        for n in 0..12 {
            let ink = ink_pixels(&render_line(&"a.b ".repeat(3)[..n], &g, 20).unwrap());
            assert!(ink >= prev);
            prev = ink;
        }
    }

    #[test]
    fn paragraph_layout() {
        let g = GlyphSet::builtin(2);
        let one = render_paragraph(&["hello"], &g, 20, 4, 10).unwrap();
        assert_eq!(one, render_line("hello", &g, 20).unwrap());
        let three = render_paragraph(&["a", "bcd", "ef"], &g, 20, 4, 10).unwrap();
        assert_eq!(three.height(), 3 * 20 + 2 * 4);
        assert_eq!(three.width() as usize, line_width(3, &g));
        let lines = vec!["x"; 11];
        assert!(matches!(render_paragraph(&lines, &g, 20, 4, 10), Err(Error::Range(_))));
    }

    #[test]
    fn unknown_char_is_named() {
        let g = GlyphSet::builtin(1);
        assert!(matches!(render_line("aΩ", &g, 10), Err(Error::Render('Ω'))));
    }
}
