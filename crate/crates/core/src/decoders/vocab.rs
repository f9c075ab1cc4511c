use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Character inventory shared by every head.
///
/// Id layout: `0` is the CTC blank, `1..=n` are characters, then pad, sos
/// and eos. The CTC head uses the first `n + 1` ids (`V ∪ {blank}`); the
/// AR and NAR heads use all `n + 4`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

pub const BLANK: usize = 0;

/// Accented lowercase forms covered by the built-in glyph set.
pub const ACCENTED: &str = "àâäçéèêëîïôöùûü";

impl Vocabulary {
    pub const BLANK_ID: usize = BLANK;

    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        let mut index = BTreeMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i + 1).is_some() {
                return Err(Error::Vocabulary(format!("duplicate character {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(Error::Vocabulary("empty vocabulary".into()));
        }
        Ok(Vocabulary { chars, index })
    }

    /// Printable ASCII, the accented lowercase set, and the line separator
    /// used in paragraph transcripts.
    pub fn default_latin() -> Self {
        let chars = (' '..='~').chain(ACCENTED.chars()).chain(['\n']);
        Vocabulary::new(chars).expect("built-in vocabulary is valid")
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    /// `|V′| = |V| + 1`.
    pub fn ctc_size(&self) -> usize {
        self.chars.len() + 1
    }

    /// Characters plus blank, pad, sos and eos.
    pub fn size(&self) -> usize {
        self.chars.len() + 4
    }

    pub fn blank(&self) -> usize {
        BLANK
    }

    pub fn pad(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn sos(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn eos(&self) -> usize {
        self.chars.len() + 3
    }

    pub fn is_char_id(&self, id: usize) -> bool {
        (1..=self.chars.len()).contains(&id)
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Vocabulary(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Characters of `text` missing from the vocabulary, in first-seen order.
    pub fn missing(&self, text: &str) -> Vec<char> {
        let mut out = Vec::new();
        for c in text.chars() {
            if !self.contains(c) && !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    /// Maps ids back to text, dropping every control id.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| self.is_char_id(id))
            .map(|&id| self.chars[id - 1])
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.chars.iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_roundtrip() {
        let v = Vocabulary::default_latin();
        assert_eq!(v.ctc_size(), v.num_chars() + 1);
        assert_eq!(v.blank(), 0);
        assert!(v.pad() > v.num_chars() && v.sos() > v.pad() && v.eos() > v.sos());
        let ids = v.encode("Été? été!").unwrap_err();
        assert!(ids.to_string().contains('É'));
        let ids = v.encode("été, déjà").unwrap();
        assert_eq!(v.decode(&ids), "été, déjà");
        assert_eq!(v.decode(&[0, v.sos(), ids[0], v.eos(), v.pad()]), "é");
    }

    #[test]
    fn rejects_duplicates() {
        assert!(Vocabulary::new("abca".chars()).is_err());
    }
}
