//! Levenshtein-based CER and WER.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub distance: usize,
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl std::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.distance += o.distance;
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
    }
}

/// Unit-cost alignment of `hyp` against `reference`. Counts come from one
/// optimal backtrace that prefers substitution (or match), then deletion,
/// then insertion.
pub fn edit_distance<S: PartialEq>(reference: &[S], hyp: &[S]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut c = EditCounts { distance: dp[n * w + m], ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let differ = reference[i - 1] != hyp[j - 1];
            if dp[(i - 1) * w + j - 1] + usize::from(differ) == here {
                c.sub += usize::from(differ);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            c.del += 1;
            i -= 1;
        } else {
            c.ins += 1;
            j -= 1;
        }
    }
    c
}

/// Text preprocessing applied to both sides before scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Normalize {
    pub lowercase: bool,
    pub collapse_whitespace: bool,
}

impl Normalize {
    pub fn apply(&self, s: &str) -> String {
        let s = if self.lowercase { s.to_lowercase() } else { s.to_string() };
        if self.collapse_whitespace {
            s.split_whitespace().collect::<Vec<_>>().join(" ")
        } else {
            s
        }
    }
}

pub fn char_counts(reference: &str, hyp: &str) -> Result<(EditCounts, usize)> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::UndefinedMetric("CER of an empty reference".into()));
    }
    let h: Vec<char> = hyp.chars().collect();
    Ok((edit_distance(&r, &h), r.len()))
}

pub fn word_counts(reference: &str, hyp: &str) -> Result<(EditCounts, usize)> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::UndefinedMetric("WER of a reference without words".into()));
    }
    let h: Vec<&str> = hyp.split_whitespace().collect();
    Ok((edit_distance(&r, &h), r.len()))
}

/// Character error rate in percent.
pub fn cer(reference: &str, hyp: &str) -> Result<f64> {
    let (c, n) = char_counts(reference, hyp)?;
    Ok(percent(c.distance, n))
}

/// Word error rate in percent; words are runs of non-whitespace.
pub fn wer(reference: &str, hyp: &str) -> Result<f64> {
    let (c, n) = word_counts(reference, hyp)?;
    Ok(percent(c.distance, n))
}

fn percent(errors: usize, n: usize) -> f64 {
    errors as f64 / n as f64 * 100.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRow {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub chars: EditCounts,
    pub ref_chars: usize,
    pub words: EditCounts,
    pub ref_words: usize,
}

impl SampleRow {
    pub fn cer(&self) -> f64 {
        percent(self.chars.distance, self.ref_chars)
    }
}

/// Corpus-level report; rates come from summed counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub chars: EditCounts,
    pub ref_chars: usize,
    pub words: EditCounts,
    pub ref_words: usize,
    pub rows: Vec<SampleRow>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scores one sample. A reference without words contributes to CER only.
    pub fn add(&mut self, id: impl Into<String>, reference: &str, hyp: &str, norm: Normalize) -> Result<()> {
        let (r, h) = (norm.apply(reference), norm.apply(hyp));
        let (chars, ref_chars) = char_counts(&r, &h)?;
        let (words, ref_words) = match word_counts(&r, &h) {
            Ok(v) => v,
            Err(Error::UndefinedMetric(_)) => (EditCounts { distance: 0, ..Default::default() }, 0),
            Err(e) => return Err(e),
        };
        self.chars += chars;
        self.ref_chars += ref_chars;
        self.words += words;
        self.ref_words += ref_words;
        self.rows.push(SampleRow {
            id: id.into(),
            reference: r,
            hypothesis: h,
            chars,
            ref_chars,
            words,
            ref_words,
        });
        Ok(())
    }

    pub fn cer(&self) -> Result<f64> {
        if self.ref_chars == 0 {
            return Err(Error::UndefinedMetric("CER over an empty corpus".into()));
        }
        Ok(percent(self.chars.distance, self.ref_chars))
    }

    pub fn wer(&self) -> Result<f64> {
        if self.ref_words == 0 {
            return Err(Error::UndefinedMetric("WER over a corpus without words".into()));
        }
        Ok(percent(self.words.distance, self.ref_words))
    }

    /// Per-sample CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,reference,hypothesis,S,D,I,N,S_w,D_w,I_w,N_w,cer\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{:.4}",
                csv_field(&r.id),
                csv_field(&r.reference),
                csv_field(&r.hypothesis),
                r.chars.sub,
                r.chars.del,
                r.chars.ins,
                r.ref_chars,
                r.words.sub,
                r.words.del,
                r.words.ins,
                r.ref_words,
                r.cer()
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let fmt = |v: Result<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|_| "undefined".into());
        format!(
            "samples: {}\ncer: {}\nwer: {}\nS: {}\nD: {}\nI: {}\nN: {}\nS_w: {}\nD_w: {}\nI_w: {}\nN_w: {}\n",
            self.rows.len(),
            fmt(self.cer()),
            fmt(self.wer()),
            self.chars.sub,
            self.chars.del,
            self.chars.ins,
            self.ref_chars,
            self.words.sub,
            self.words.del,
            self.words.ins,
            self.ref_words
        )
    }
}

/// RFC 4180 quoting.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(edit_distance(&chars("abc"), &chars("abc")), EditCounts::default());
        let c = edit_distance(&chars("kitten"), &chars("sitting"));
        assert_eq!((c.distance, c.sub, c.del, c.ins), (3, 2, 0, 1));
        let c = edit_distance(&chars(""), &chars("ab"));
        assert_eq!((c.distance, c.ins), (2, 2));
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("kitten", "sitting").unwrap(), 50.0);
        assert_eq!(cer("kitten", "kitten").unwrap(), 0.0);
        assert_eq!(cer("a", "").unwrap(), 100.0);
        assert!(matches!(cer("", "x"), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn wer_examples() {
        assert!((wer("the cat sat", "the cat").unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer("the cat", "the  cat").unwrap(), 0.0);
        assert_eq!(wer("a b", "b a").unwrap(), 100.0);
        assert!(matches!(wer(" \t", "x"), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn corpus_rates_use_summed_counts() {
        let mut r = EvalReport::new();
        r.add("0", "ab", "ab", Normalize::default()).unwrap();
        r.add("1", "abcdefgh", "", Normalize::default()).unwrap();
        // per-sample mean would be 50%
        assert_eq!(r.cer().unwrap(), 80.0);
        assert!(r.to_csv().lines().count() == 3);
        assert!(r.summary().contains("cer: 80.0000"));
    }

    #[test]
    fn normalization_flags() {
        let n = Normalize { lowercase: true, collapse_whitespace: true };
        assert_eq!(n.apply("  Été  Là "), "été là");
        assert_eq!(Normalize::default().apply(" A "), " A ");
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
