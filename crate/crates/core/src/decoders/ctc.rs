//! Connectionist temporal classification: log-space forward-backward loss
//! and greedy best-path decoding.

use crate::error::{Error, Result};
use crate::tensor::{self, Float, Tensor};

/// Frames needed to emit `target`: one per label plus a blank between
/// each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Negative log-likelihood and its gradient with respect to the logits.
///
/// `logits` is row-major `frames × classes`. Computation runs in `f64`
/// regardless of `T`.
pub fn ctc_forward_backward<T: Float>(
    logits: &[T],
    frames: usize,
    classes: usize,
    target: &[usize],
    blank: usize,
) -> Result<(T, Vec<T>)> {
    if let Some(&bad) = target.iter().find(|&&t| t >= classes || t == blank) {
        return Err(Error::Vocabulary(format!(
            "CTC target id {bad} invalid for {classes} classes with blank {blank}"
        )));
    }
    let required = min_frames(target);
    if frames < required {
        return Err(Error::InfeasibleAlignment {
            frames,
            required,
            target_len: target.len(),
        });
    }
    if frames == 0 {
        return Ok((T::zero(), Vec::new()));
    }
    let x: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    let logp = tensor::log_softmax_rows(&x, classes);
    let lp = |t: usize, k: usize| logp[t * classes + k];

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = (t - 1) * s_len;
            let a = alpha[prev + s];
            let b = if s >= 1 { alpha[prev + s - 1] } else { ninf };
            let c = if skip_ok(s) { alpha[prev + s - 2] } else { ninf };
            let m = lse3(a, b, c);
            if m != ninf {
                alpha[t * s_len + s] = m + lp(t, ext[s]);
            }
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Err(Error::InfeasibleAlignment {
            frames,
            required,
            target_len: target.len(),
        });
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let next = (t + 1) * s_len;
        for s in 0..s_len {
            let mut acc = beta[next + s] + lp(t + 1, ext[s]);
            if s + 1 < s_len {
                acc = lse2(acc, beta[next + s + 1] + lp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = lse2(acc, beta[next + s + 2] + lp(t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![T::zero(); frames * classes];
    let mut occupancy = vec![ninf; classes];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|v| *v = ninf);
        for s in 0..s_len {
            let g = alpha[t * s_len + s] + beta[t * s_len + s];
            occupancy[ext[s]] = lse2(occupancy[ext[s]], g);
        }
        for k in 0..classes {
            let p = lp(t, k).exp();
            let post = if occupancy[k] == ninf { 0.0 } else { (occupancy[k] - log_p).exp() };
            grad[t * classes + k] = T::of(p - post);
        }
    }
    Ok((T::of(-log_p), grad))
}

/// Loss only, for callers outside the tape.
pub fn ctc_loss<T: Float>(logits: &Tensor<T>, target: &[usize], blank: usize) -> Result<T> {
    let (l, k) = logits.dims2()?;
    Ok(ctc_forward_backward(logits.data(), l, k, target, blank)?.0)
}

/// Per-frame argmax (lowest id on ties), merge repeats, drop blanks.
pub fn greedy_path<T: Float>(logits: &Tensor<T>, blank: usize) -> Result<Vec<usize>> {
    let (l, _) = logits.dims2()?;
    let path: Vec<usize> = (0..l).map(|t| tensor::argmax(logits.row(t))).collect();
    Ok(collapse(&path, blank))
}

pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_to_logits(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    #[test]
    fn single_frame_single_label() {
        // classes: blank, a, b
        let logits = probs_to_logits(&[0.2, 0.7, 0.1]);
        let (loss, _) = ctc_forward_backward(&logits, 1, 3, &[1], 0).unwrap();
        assert!((loss - 0.356_674_943_938_732_4).abs() < 1e-12);
    }

    #[test]
    fn two_uniform_frames() {
        let logits = vec![0.0f64; 6];
        let (loss, _) = ctc_forward_backward(&logits, 2, 3, &[1], 0).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let p = [[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.25, 0.25, 0.5]];
        let logits: Vec<f64> = p.iter().flat_map(|r| probs_to_logits(r)).collect();
        let (loss, _) = ctc_forward_backward(&logits, 3, 3, &[], 0).unwrap();
        let want = -(0.5f64.ln() + 0.1f64.ln() + 0.25f64.ln());
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn infeasible_alignment_is_an_error() {
        let logits = vec![0.0f64; 6];
        let err = ctc_forward_backward(&logits, 2, 3, &[1, 1], 0).unwrap_err();
        assert!(matches!(err, Error::InfeasibleAlignment { frames: 2, required: 3, .. }));
        assert!(ctc_forward_backward(&[0.0f64; 9], 3, 3, &[1, 1], 0).is_ok());
    }

    #[test]
    fn greedy_collapse_rules() {
        // a=1, b=2
        assert_eq!(collapse(&[1, 1, 0, 1, 2, 2], 0), vec![1, 1, 2]);
        assert_eq!(collapse(&[0, 1, 0], 0), vec![1]);
        assert!(collapse(&[0, 0, 0], 0).is_empty());
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let (_, g) = ctc_forward_backward(&logits, 5, 4, &[1, 2], 0).unwrap();
        for row in g.chunks(4) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
