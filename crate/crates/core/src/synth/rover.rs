//! Character-level weighted voting over aligned transcriptions.

use crate::error::{Error, Result};

/// One competing symbol in a slot; `None` is epsilon.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub symbol: Option<char>,
    /// Indices of the engines that voted for this symbol.
    pub engines: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Slot {
    pub candidates: Vec<Candidate>,
}

impl Slot {
    fn has(&self, symbol: Option<char>) -> bool {
        self.candidates.iter().any(|c| c.symbol == symbol)
    }

    fn vote(&mut self, symbol: Option<char>, engine: usize) {
        match self.candidates.iter_mut().find(|c| c.symbol == symbol) {
            Some(c) => c.engines.push(engine),
            None => self.candidates.push(Candidate { symbol, engines: vec![engine] }),
        }
    }
}

/// Linear sequence of slots built by aligning hypotheses one at a time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfusionNetwork {
    pub slots: Vec<Slot>,
    engines: usize,
}

enum Move {
    Diag,
    Skip,
    Insert,
}

impl ConfusionNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    /// Aligns `hyp` against the current slots with unit costs: a character
    /// already present in a slot matches for free, skipping a slot is free
    /// when it already holds epsilon, everything else costs one.
    pub fn add(&mut self, hyp: &str) {
        let engine = self.engines;
        self.engines += 1;
        let h: Vec<char> = hyp.chars().collect();
        let (n, m) = (self.slots.len(), h.len());
        let w = m + 1;
        let sub = |i: usize, j: usize| usize::from(!self.slots[i].has(Some(h[j])));
        let skip = |i: usize| usize::from(!self.slots[i].has(None));
        let mut dp = vec![0usize; (n + 1) * w];
        for i in 1..=n {
            dp[i * w] = dp[(i - 1) * w] + skip(i - 1);
        }
        for j in 1..=m {
            dp[j] = j;
        }
        for i in 1..=n {
            for j in 1..=m {
                let d = dp[(i - 1) * w + j - 1] + sub(i - 1, j - 1);
                let s = dp[(i - 1) * w + j] + skip(i - 1);
                let ins = dp[i * w + j - 1] + 1;
                dp[i * w + j] = d.min(s).min(ins);
            }
        }
        let mut moves = Vec::with_capacity(n + m);
        let (mut i, mut j) = (n, m);
        while i > 0 || j > 0 {
            let here = dp[i * w + j];
            if i > 0 && j > 0 && dp[(i - 1) * w + j - 1] + sub(i - 1, j - 1) == here {
                moves.push(Move::Diag);
                i -= 1;
                j -= 1;
            } else if i > 0 && dp[(i - 1) * w + j] + skip(i - 1) == here {
                moves.push(Move::Skip);
                i -= 1;
            } else {
                moves.push(Move::Insert);
                j -= 1;
            }
        }
        moves.reverse();
        let old = std::mem::take(&mut self.slots);
        let mut old = old.into_iter();
        let mut chars = h.into_iter();
        for mv in moves {
            match mv {
                Move::Diag => {
                    let mut s = old.next().expect("backtrace stays in bounds");
                    s.vote(chars.next(), engine);
                    self.slots.push(s);
                }
                Move::Skip => {
                    let mut s = old.next().expect("backtrace stays in bounds");
                    s.vote(None, engine);
                    self.slots.push(s);
                }
                Move::Insert => {
                    let mut s = Slot::default();
                    if engine > 0 {
                        s.candidates.push(Candidate { symbol: None, engines: (0..engine).collect() });
                    }
                    s.vote(chars.next(), engine);
                    self.slots.push(s);
                }
            }
        }
    }

    /// Per-slot winner by summed weight; ties go to the candidate backed by
    /// the heaviest single engine, then to the earliest engine.
    pub fn vote(&self, weights: &[f64]) -> String {
        let mut out = String::new();
        for slot in &self.slots {
            let key = |c: &Candidate| {
                let total: f64 = c.engines.iter().map(|&e| weights[e]).sum();
                let heaviest = c.engines.iter().map(|&e| weights[e]).fold(f64::MIN, f64::max);
                let first = c.engines.iter().copied().min().unwrap_or(usize::MAX);
                (total, heaviest, first)
            };
            let best = slot.candidates.iter().reduce(|a, b| {
                let (ka, kb) = (key(a), key(b));
                let b_wins = kb.0 > ka.0 || (kb.0 == ka.0 && (kb.1 > ka.1 || (kb.1 == ka.1 && kb.2 < ka.2)));
                if b_wins { b } else { a }
            });
            if let Some(Candidate { symbol: Some(c), .. }) = best {
                out.push(*c);
            }
        }
        out
    }
}

/// Combines transcriptions of one line by weighted character voting.
pub fn rover_combine(hypotheses: &[&str], weights: &[f64]) -> Result<String> {
    if hypotheses.is_empty() {
        return Err(Error::Argument("ROVER needs at least one hypothesis".into()));
    }
    if weights.len() != hypotheses.len() {
        return Err(Error::Argument(format!(
            "{} weights for {} hypotheses",
            weights.len(),
            hypotheses.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::Argument(format!("ROVER weights must be positive, got {w}")));
    }
    let mut net = ConfusionNetwork::new();
    for h in hypotheses {
        net.add(h);
    }
    Ok(net.vote(weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_and_unanimous() {
        assert_eq!(rover_combine(&["déjà vu"], &[2.0]).unwrap(), "déjà vu");
        assert_eq!(rover_combine(&["ab", "ab"], &[0.1, 7.0]).unwrap(), "ab");
        assert_eq!(rover_combine(&["", ""], &[1.0, 1.0]).unwrap(), "");
    }

    #[test]
    fn weighted_majority() {
        assert_eq!(rover_combine(&["abc", "abc", "abd"], &[5.0, 3.0, 3.0]).unwrap(), "abc");
        assert_eq!(rover_combine(&["abd", "abc", "abc"], &[5.0, 3.0, 3.0]).unwrap(), "abc");
        assert_eq!(rover_combine(&["abd", "abc", "abe"], &[5.0, 3.0, 3.0]).unwrap(), "abd");
    }

    #[test]
    fn tie_rules() {
        // equal totals: heaviest single engine wins
        assert_eq!(rover_combine(&["x", "y", "y"], &[4.0, 2.0, 2.0]).unwrap(), "x");
        // full tie: earliest engine
        assert_eq!(rover_combine(&["x", "y"], &[1.0, 1.0]).unwrap(), "x");
        assert_eq!(rover_combine(&["y", "x"], &[1.0, 1.0]).unwrap(), "y");
    }

    #[test]
    fn insertions_and_deletions_vote() {
        assert_eq!(rover_combine(&["abc", "abxc", "abc"], &[1.0, 1.0, 1.0]).unwrap(), "abc");
        assert_eq!(rover_combine(&["abc", "ac", "ac"], &[1.0, 1.0, 1.0]).unwrap(), "ac");
        assert_eq!(rover_combine(&["abc", "ac", "ac"], &[5.0, 1.0, 1.0]).unwrap(), "abc");
    }

    #[test]
    fn argument_errors() {
        assert!(matches!(rover_combine(&[], &[]), Err(Error::Argument(_))));
        assert!(rover_combine(&["a"], &[1.0, 2.0]).is_err());
        assert!(rover_combine(&["a"], &[0.0]).is_err());
    }
}
