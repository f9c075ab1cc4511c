//! Reference implementations and checking helpers shared by the
//! integration tests. Everything here is written independently of the
//! library code it is compared against.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmocr_core::nn::{Binder, ParamStore};
use ssmocr_core::{Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; exact zeros on both sides count as agreement.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = norm(a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(a.iter().copied()).max(norm(n.iter().copied()));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Step for smooth functions.
pub const SMOOTH_STEP: f64 = 1e-3;
/// Step for piecewise-smooth functions (max pooling), small enough not to
/// cross a kink at generic points.
pub const KINKED_STEP: f64 = 1e-6;

/// Fourth-order central difference of `f` at 0 along one coordinate:
/// truncation `O(h⁴)`, roundoff `O(ε·|f|/h)`.
fn derivative(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((-f(2.0 * h)? + 8.0 * f(h)? - 8.0 * f(-h)? + f(-2.0 * h)?) / (12.0 * h))
}

/// Contracts `out` against a fixed random tensor so every output element
/// contributes to the scalar being differentiated.
fn contract(tape: &Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out);
    let mut r = rng(seed ^ 0xC0FFEE);
    let w = tape.constant(Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0)));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Worst per-tensor relative error between analytic and central-difference
/// gradients of `f` with respect to each of `inputs`.
pub fn check_op(
    seed: u64,
    step: f64,
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&tape, &vars)?;
        let loss = contract(&tape, out, seed)?;
        Ok(tape.value(loss).item())
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    let loss = contract(&tape, out, seed)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[k]) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; x.len()],
        };
        let mut numeric = Vec::with_capacity(x.len());
        let mut xs = inputs.to_vec();
        for i in 0..x.len() {
            let orig = x.data()[i];
            numeric.push(derivative(step, |dx| {
                xs[k].data_mut()[i] = orig + dx;
                eval(&xs)
            })?);
            xs[k].data_mut()[i] = orig;
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

/// Like [`check_op`] for a module: gradients with respect to every
/// trainable parameter in `store` and every input.
pub fn check_module(
    seed: u64,
    step: f64,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&Binder<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |s: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let bx = Binder::new(&tape, s, false);
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&bx, &vars)?;
        let loss = contract(&tape, out, seed)?;
        Ok(tape.value(loss).item())
    };
    let tape = Tape::new();
    let bx = Binder::new(&tape, store, true);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&bx, &vars)?;
    let loss = contract(&tape, out, seed)?;
    let mut grads = tape.backward(loss)?;
    let input_grads: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| grads.get(v).cloned()).collect();
    let param_grads = bx.param_grads(&mut grads);
    let mut worst: f64 = 0.0;

    let mut s = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for (id, analytic) in ids.into_iter().zip(param_grads) {
        let p = &store.params()[id.index()];
        if !p.trainable {
            continue;
        }
        let base = (*p.value).clone();
        let analytic = analytic.map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; base.len()]);
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            numeric.push(derivative(step, |dx| {
                let mut t = base.clone();
                t.data_mut()[i] += dx;
                s.set(id, t)?;
                eval(&s, inputs)
            })?);
        }
        s.set(id, base)?;
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    for (k, x) in inputs.iter().enumerate() {
        let analytic = input_grads[k].as_ref().map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
        let mut xs = inputs.to_vec();
        let mut numeric = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let orig = x.data()[i];
            numeric.push(derivative(step, |dx| {
                xs[k].data_mut()[i] = orig + dx;
                eval(store, &xs)
            })?);
            xs[k].data_mut()[i] = orig;
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

/// CTC negative log-likelihood by summing over every frame path.
/// `None` when no path collapses to `target`.
pub fn ctc_brute_force(logits: &[Vec<f64>], target: &[usize], blank: usize) -> Option<f64> {
    let frames = logits.len();
    let k = logits.first().map_or(0, Vec::len);
    let logp: Vec<Vec<f64>> = logits
        .iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            row.iter().map(|v| v - z).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut any = false;
    let mut path = vec![0usize; frames];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &p in &path {
            if Some(p) != prev && p != blank {
                collapsed.push(p);
            }
            prev = Some(p);
        }
        if collapsed == target {
            any = true;
            total += path.iter().enumerate().map(|(t, &p)| logp[t][p]).sum::<f64>().exp();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == frames {
                return any.then(|| -total.ln());
            }
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Levenshtein distance by memoized recursion over suffixes.
pub fn levenshtein<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    fn go<S: PartialEq>(a: &[S], b: &[S], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else {
            let skip = if a[i] == b[j] { go(a, b, i + 1, j + 1, memo) } else { 1 + go(a, b, i + 1, j + 1, memo) };
            skip.min(1 + go(a, b, i + 1, j, memo)).min(1 + go(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

/// A ROVER case with a known slot structure: a base string of distinct
/// characters, edit sites far enough apart that alignment is unambiguous,
/// and per-hypothesis choices of whether to apply each edit.
pub struct RoverCase {
    pub hyps: Vec<String>,
    pub weights: Vec<f64>,
    pub expected: String,
}

#[derive(Clone, Copy)]
enum Site {
    Sub(usize),
    Del(usize),
    Ins(usize),
}

/// Winner of one slot: highest total weight, then heaviest single engine,
/// then earliest engine. `votes[e]` is engine `e`'s symbol.
pub fn slot_winner(votes: &[Option<char>], weights: &[f64]) -> Option<char> {
    let mut symbols: Vec<Option<char>> = Vec::new();
    for v in votes {
        if !symbols.contains(v) {
            symbols.push(*v);
        }
    }
    let score = |s: &Option<char>| {
        let engines: Vec<usize> = (0..votes.len()).filter(|&e| votes[e] == *s).collect();
        let total: f64 = engines.iter().map(|&e| weights[e]).sum();
        let heaviest = engines.iter().map(|&e| weights[e]).fold(f64::MIN, f64::max);
        (total, heaviest, engines[0])
    };
    let mut best = symbols[0];
    for s in &symbols[1..] {
        let (a, b) = (score(&best), score(s));
        if b.0 > a.0 || (b.0 == a.0 && (b.1 > a.1 || (b.1 == a.1 && b.2 < a.2))) {
            best = *s;
        }
    }
    best
}

pub fn rover_case(seed: u64) -> RoverCase {
    let mut r = rng(seed);
    let letters: Vec<char> = ('a'..='z').collect();
    let n = r.random_range(3..=10);
    let mut pool = letters.clone();
    let base: Vec<char> = (0..n).map(|_| pool.remove(r.random_range(0..pool.len()))).collect();
    // interleaved positions: even = gap before char i/2, odd = char (i-1)/2
    let mut sites = Vec::new();
    let mut pos = r.random_range(0..3);
    while pos <= 2 * n {
        let site = if pos % 2 == 0 {
            Site::Ins(pos / 2)
        } else if r.random_bool(0.5) {
            Site::Sub(pos / 2)
        } else {
            Site::Del(pos / 2)
        };
        sites.push(site);
        pos += r.random_range(3..6);
    }
    let mut fresh = ('A'..='Z').chain('0'..='9');
    let engines = 3;
    let weights: Vec<f64> = (0..engines).map(|_| r.random_range(1..=5) as f64).collect();
    // choice[site][engine]: the symbol this engine shows at the site
    let mut choice: Vec<Vec<Option<char>>> = Vec::new();
    for &site in &sites {
        let row = (0..engines)
            .map(|_| {
                let apply = r.random_bool(0.5);
                match site {
                    Site::Sub(i) if !apply => Some(base[i]),
                    Site::Sub(_) => fresh.next(),
                    Site::Del(i) => (!apply).then_some(base[i]),
                    Site::Ins(_) => if apply { fresh.next() } else { None },
                }
            })
            .collect();
        choice.push(row);
    }
    let site_at = |gap: bool, i: usize| {
        sites.iter().position(|s| match (s, gap) {
            (Site::Ins(g), true) => *g == i,
            (Site::Sub(c) | Site::Del(c), false) => *c == i,
            _ => false,
        })
    };
    let mut hyps = vec![String::new(); engines];
    let mut expected = String::new();
    for i in 0..=n {
        if let Some(s) = site_at(true, i) {
            for (e, h) in hyps.iter_mut().enumerate() {
                h.extend(choice[s][e]);
            }
            if choice[s].iter().any(Option::is_some) {
                expected.extend(slot_winner(&choice[s], &weights));
            }
        }
        if i == n {
            break;
        }
        match site_at(false, i) {
            Some(s) => {
                for (e, h) in hyps.iter_mut().enumerate() {
                    h.extend(choice[s][e]);
                }
                if choice[s].iter().any(Option::is_some) {
                    expected.extend(slot_winner(&choice[s], &weights));
                }
            }
            None => {
                hyps.iter_mut().for_each(|h| h.push(base[i]));
                expected.push(base[i]);
            }
        }
    }
    RoverCase { hyps, weights, expected }
}

pub mod grad_suite;
