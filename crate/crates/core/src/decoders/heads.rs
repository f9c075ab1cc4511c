//! The three Mamba heads that turn a visual sequence `h` (`L × D`) into
//! text.

use crate::autodiff::Var;
use crate::decoders::ctc;
use crate::decoders::stack::MambaStack;
use crate::decoders::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{Binder, Init, Linear, ParamId, ParamStore};
use crate::ssm::MambaConfig;
use crate::tensor::{self, Float, Tensor};

/// Decoded token ids, control ids already removed.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Decoded {
    pub ids: Vec<usize>,
    /// Generation stopped at the length limit instead of at eos.
    pub truncated: bool,
}

impl Decoded {
    pub fn text(&self, vocab: &Vocabulary) -> String {
        vocab.decode(&self.ids)
    }
}

fn check_ids(ids: &[usize], size: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= size) {
        Some(id) => Err(Error::Vocabulary(format!("token id {id} outside vocabulary of {size}"))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug)]
pub struct CtcDecoder {
    pub stack: MambaStack,
    pub proj: Linear,
}

impl CtcDecoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, cfg: MambaConfig, depth: usize, vocab: &Vocabulary) -> Self {
        CtcDecoder {
            stack: MambaStack::new(store, init, "ctc.stack", cfg, depth),
            proj: Linear::new(store, init, "ctc.proj", cfg.d_model, vocab.ctc_size(), true),
        }
    }

    /// Frame logits `L × |V′|`.
    pub fn logits<T: Float>(&self, bx: &Binder<'_, T>, h: Var) -> Result<Var> {
        let y = self.stack.forward(bx, h)?;
        self.proj.forward(bx, y)
    }

    pub fn loss<T: Float>(&self, bx: &Binder<'_, T>, h: Var, target: &[usize]) -> Result<Var> {
        let logits = self.logits(bx, h)?;
        bx.tape.ctc_loss(logits, target, Vocabulary::BLANK_ID)
    }
}

/// Greedy CTC decoding of `L × |V′|` frame logits.
pub fn ctc_greedy_decode<T: Float>(logits: &Tensor<T>, vocab: &Vocabulary) -> Result<String> {
    Ok(vocab.decode(&ctc::greedy_path(logits, vocab.blank())?))
}

/// Input-concatenation AR head over the stream `[h; e(sos), e(y₁..y_T)]`.
#[derive(Clone, Debug)]
pub struct ArDecoder {
    pub embed: ParamId,
    pub stack: MambaStack,
    pub proj: Linear,
    pub max_len: usize,
    vocab_size: usize,
    sos: usize,
    eos: usize,
    blocked: Vec<usize>,
}

impl ArDecoder {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        cfg: MambaConfig,
        depth: usize,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Self {
        let v = vocab.size();
        ArDecoder {
            embed: store.add("ar.embed", init.uniform([v, cfg.d_model], 1.0), false),
            stack: MambaStack::new(store, init, "ar.stack", cfg, depth),
            proj: Linear::new(store, init, "ar.proj", cfg.d_model, v, true),
            max_len,
            vocab_size: v,
            sos: vocab.sos(),
            eos: vocab.eos(),
            blocked: vec![vocab.blank(), vocab.pad(), vocab.sos()],
        }
    }

    /// Teacher-forced logits, `(T + 1) × |V|`; row `t` predicts `y_{t+1}`
    /// (the last row predicts eos).
    pub fn teacher_logits<T: Float>(&self, bx: &Binder<'_, T>, h: Var, target: &[usize]) -> Result<Var> {
        let t = bx.tape;
        if target.len() > self.max_len {
            return Err(Error::TargetTooLong { len: target.len(), capacity: self.max_len });
        }
        check_ids(target, self.vocab_size)?;
        let mut inputs = Vec::with_capacity(target.len() + 1);
        inputs.push(self.sos);
        inputs.extend_from_slice(target);
        let e = t.embedding(bx.p(self.embed), &inputs)?;
        let l = t.shape(h)[0];
        let stream = t.concat_rows(&[h, e])?;
        let y = self.stack.forward(bx, stream)?;
        let y = t.slice_rows(y, l, inputs.len())?;
        self.proj.forward(bx, y)
    }

    pub fn loss<T: Float>(&self, bx: &Binder<'_, T>, h: Var, target: &[usize]) -> Result<Var> {
        let logits = self.teacher_logits(bx, h, target)?;
        let gold: Vec<Option<usize>> = target.iter().copied().chain([self.eos]).map(Some).collect();
        bx.tape.cross_entropy(logits, &gold)
    }

    /// Recurrent states after consuming the visual sequence.
    pub fn prefill<T: Float>(&self, store: &ParamStore<T>, h: &Tensor<T>) -> Result<Vec<crate::ssm::RecurrentState<T>>> {
        let (l, d) = h.dims2()?;
        if d != self.stack.cfg.d_model {
            return Err(Error::dim("ar_generate", format!("visual sequence {:?}", h.shape())));
        }
        let mut states = self.stack.new_states();
        for r in 0..l {
            self.stack.step(store, h.row(r), &mut states);
        }
        Ok(states)
    }

    pub fn step_logits<T: Float>(&self, store: &ParamStore<T>, token: usize, states: &mut [crate::ssm::RecurrentState<T>]) -> Vec<T> {
        let e = store.get(self.embed).row(token).to_vec();
        let y = self.stack.step(store, &e, states);
        self.proj.apply_row(store, &y)
    }

    /// Greedy generation with a constant-size recurrent cache.
    pub fn generate<T: Float>(&self, store: &ParamStore<T>, h: &Tensor<T>, max_len: usize) -> Result<Decoded> {
        if max_len > self.max_len {
            return Err(Error::TargetTooLong { len: max_len, capacity: self.max_len });
        }
        let mut states = self.prefill(store, h)?;
        let mut out = Decoded::default();
        let mut token = self.sos;
        loop {
            let mut logits = self.step_logits(store, token, &mut states);
            for &b in &self.blocked {
                logits[b] = T::neg_infinity();
            }
            let next = tensor::argmax(&logits);
            if next == self.eos {
                return Ok(out);
            }
            if out.ids.len() == max_len {
                out.truncated = true;
                return Ok(out);
            }
            out.ids.push(next);
            token = next;
        }
    }

    /// Incremental logits when generation is forced along `target`; one row
    /// per step, `T + 1` rows. Same layout as [`ArDecoder::teacher_logits`].
    pub fn forced_logits<T: Float>(&self, store: &ParamStore<T>, h: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
        check_ids(target, self.vocab_size)?;
        let mut states = self.prefill(store, h)?;
        let mut data = Vec::with_capacity((target.len() + 1) * self.vocab_size);
        for &token in [self.sos].iter().chain(target) {
            data.extend(self.step_logits(store, token, &mut states));
        }
        Tensor::new([target.len() + 1, self.vocab_size], data)
    }
}

/// Learned-query NAR head over the stream `[h; Q]`.
#[derive(Clone, Debug)]
pub struct NarDecoder {
    pub queries: ParamId,
    pub stack: MambaStack,
    pub proj: Linear,
    pub t_max: usize,
    eos: usize,
}

impl NarDecoder {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        cfg: MambaConfig,
        depth: usize,
        vocab: &Vocabulary,
        t_max: usize,
    ) -> Self {
        NarDecoder {
            queries: store.add("nar.queries", init.uniform([t_max, cfg.d_model], 1.0), false),
            stack: MambaStack::new(store, init, "nar.stack", cfg, depth),
            proj: Linear::new(store, init, "nar.proj", cfg.d_model, vocab.size(), true),
            t_max,
            eos: vocab.eos(),
        }
    }

    /// Slot logits `T_max × |V|`.
    pub fn logits<T: Float>(&self, bx: &Binder<'_, T>, h: Var) -> Result<Var> {
        let t = bx.tape;
        let l = t.shape(h)[0];
        let stream = t.concat_rows(&[h, bx.p(self.queries)])?;
        let y = self.stack.forward(bx, stream)?;
        let y = t.slice_rows(y, l, self.t_max)?;
        self.proj.forward(bx, y)
    }

    pub fn loss<T: Float>(&self, bx: &Binder<'_, T>, h: Var, target: &[usize]) -> Result<Var> {
        let logits = self.logits(bx, h)?;
        masked_ce_loss(bx, logits, target, self.eos)
    }
}

/// Slot targets for a NAR head: gold characters, then eos, then nothing.
pub fn masked_targets(t_max: usize, target: &[usize], eos: usize) -> Result<Vec<Option<usize>>> {
    if target.len() + 1 > t_max {
        return Err(Error::TargetTooLong { len: target.len(), capacity: t_max.saturating_sub(1) });
    }
    let mut out: Vec<Option<usize>> = target.iter().copied().map(Some).collect();
    out.push(Some(eos));
    out.resize(t_max, None);
    Ok(out)
}

/// Cross-entropy over the first `T + 1` slots of `T_max × |V|` logits.
pub fn masked_ce_loss<T: Float>(bx: &Binder<'_, T>, logits: Var, target: &[usize], eos: usize) -> Result<Var> {
    let t_max = bx.tape.shape(logits)[0];
    bx.tape.cross_entropy(logits, &masked_targets(t_max, target, eos)?)
}

/// Per-slot argmax, cut at the first eos.
pub fn nar_decode<T: Float>(logits: &Tensor<T>, vocab: &Vocabulary) -> Result<Decoded> {
    let (slots, _) = logits.dims2()?;
    let mut out = Decoded { ids: Vec::new(), truncated: true };
    for s in 0..slots {
        let id = tensor::argmax(logits.row(s));
        if id == vocab.eos() {
            out.truncated = false;
            break;
        }
        if vocab.is_char_id(id) {
            out.ids.push(id);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::ssm::ScanMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> MambaConfig {
        MambaConfig { d_model: 8, d_state: 4, expand: 2, scan_mode: ScanMode::Sequential }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new("abc".chars()).unwrap()
    }

    fn rand_h(seed: u64, l: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([l, 8], |_| rng.random_range(-1.0..1.0))
    }

    fn one_hot_logits(ids: &[usize], k: usize) -> Tensor<f64> {
        Tensor::from_fn([ids.len(), k], |i| if i % k == ids[i / k] { 1.0 } else { 0.0 })
    }

    #[test]
    fn ctc_greedy_examples() {
        let v = vocab();
        let k = v.ctc_size();
        assert_eq!(ctc_greedy_decode(&one_hot_logits(&[0, 0, 0], k), &v).unwrap(), "");
        assert_eq!(ctc_greedy_decode(&one_hot_logits(&[1, 1, 0, 1, 2, 2], k), &v).unwrap(), "aab");
        assert_eq!(ctc_greedy_decode(&one_hot_logits(&[0, 1, 0], k), &v).unwrap(), "a");
    }

    #[test]
    fn ctc_head_frames_equal_sequence_length() {
        let v = vocab();
        let mut store = ParamStore::new();
        let head = CtcDecoder::new(&mut store, &mut Init::new(1), cfg(), 2, &v);
        let tape = Tape::new();
        let bx = Binder::new(&tape, &store, false);
        let h = tape.constant(rand_h(1, 13));
        assert_eq!(tape.shape(head.logits(&bx, h).unwrap()), vec![13, v.ctc_size()]);
    }

    fn ar(seed: u64) -> (ParamStore<f64>, ArDecoder) {
        let mut store = ParamStore::new();
        let head = ArDecoder::new(&mut store, &mut Init::new(seed), cfg(), 2, &vocab(), 32);
        (store, head)
    }

    fn teacher(store: &ParamStore<f64>, head: &ArDecoder, h: &Tensor<f64>, y: &[usize]) -> Tensor<f64> {
        let tape = Tape::new();
        let bx = Binder::new(&tape, store, false);
        let hv = tape.constant(h.clone());
        (*tape.value(head.teacher_logits(&bx, hv, y).unwrap())).clone()
    }

    #[test]
    fn ar_teacher_is_causal() {
        let (store, head) = ar(2);
        let h = rand_h(3, 6);
        let y = [1, 2, 3, 1, 2];
        let base = teacher(&store, &head, &h, &y);
        for t in 0..y.len() {
            let mut y2 = y;
            y2[t] = if y[t] == 1 { 2 } else { 1 };
            let other = teacher(&store, &head, &h, &y2);
            // row r predicts y_{r+1} and saw y_1..y_r
            assert_eq!(&base.data()[..(t + 1) * base.shape()[1]], &other.data()[..(t + 1) * base.shape()[1]]);
            assert_ne!(base.row(t + 1), other.row(t + 1));
        }
    }

    #[test]
    fn ar_teacher_matches_forced_generation() {
        let (store, head) = ar(4);
        let h = rand_h(5, 9);
        let y = [3, 1, 1, 2];
        let a = teacher(&store, &head, &h, &y);
        let b = head.forced_logits(&store, &h, &y).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn ar_empty_target_supervises_eos() {
        let (store, head) = ar(6);
        let tape = Tape::new();
        let bx = Binder::new(&tape, &store, false);
        let hv = tape.constant(rand_h(1, 4));
        let logits = head.teacher_logits(&bx, hv, &[]).unwrap();
        assert_eq!(tape.shape(logits), vec![1, vocab().size()]);
        let loss = head.loss(&bx, hv, &[]).unwrap();
        let lp = tensor::log_softmax_rows(tape.value(logits).data(), vocab().size());
        assert!((tape.value(loss).item() + lp[vocab().eos()]).abs() < 1e-12);
    }

    #[test]
    fn ar_immediate_eos_and_masking() {
        let v = vocab();
        let (mut store, head) = ar(7);
        let w = head.proj.w;
        store.set(w, Tensor::zeros(store.get(w).shape())).unwrap();
        let mut bias = vec![0.0; v.size()];
        bias[v.eos()] = 5.0;
        store.set(head.proj.b.unwrap(), Tensor::new([v.size()], bias.clone()).unwrap()).unwrap();
        let out = head.generate(&store, &rand_h(1, 3), 10).unwrap();
        assert_eq!(out, Decoded::default());

        // controls win the raw argmax but must never be emitted
        bias = vec![0.0; v.size()];
        bias[v.blank()] = 9.0;
        bias[v.pad()] = 9.0;
        bias[v.sos()] = 9.0;
        bias[2] = 1.0;
        store.set(head.proj.b.unwrap(), Tensor::new([v.size()], bias).unwrap()).unwrap();
        let out = head.generate(&store, &rand_h(1, 3), 5).unwrap();
        assert_eq!(out.ids, vec![2; 5]);
        assert!(out.truncated);
    }

    #[test]
    fn ar_rejects_unknown_ids() {
        let (store, head) = ar(8);
        let tape = Tape::new();
        let bx = Binder::new(&tape, &store, false);
        let hv = tape.constant(rand_h(1, 2));
        assert!(matches!(head.teacher_logits(&bx, hv, &[99]), Err(Error::Vocabulary(_))));
    }

    fn nar(seed: u64, t_max: usize) -> (ParamStore<f64>, NarDecoder) {
        let mut store = ParamStore::new();
        let head = NarDecoder::new(&mut store, &mut Init::new(seed), cfg(), 2, &vocab(), t_max);
        (store, head)
    }

    fn nar_logits(store: &ParamStore<f64>, head: &NarDecoder, h: &Tensor<f64>) -> Tensor<f64> {
        let tape = Tape::new();
        let bx = Binder::new(&tape, store, false);
        let hv = tape.constant(h.clone());
        (*tape.value(head.logits(&bx, hv).unwrap())).clone()
    }

    #[test]
    fn nar_shape_and_sensitivity() {
        let (store, head) = nar(1, 6);
        let a = nar_logits(&store, &head, &rand_h(1, 3));
        let b = nar_logits(&store, &head, &rand_h(2, 11));
        assert_eq!(a.shape(), &[6, vocab().size()]);
        assert_eq!(b.shape(), a.shape());
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn nar_degenerate_head_is_uniform() {
        let (mut store, head) = nar(2, 4);
        store.map_values(|name, v| if name.starts_with("nar.proj") { Tensor::zeros(v.shape()) } else { v.clone() });
        let logits = nar_logits(&store, &head, &rand_h(3, 5));
        let p = tensor::softmax_rows(logits.data(), vocab().size());
        let k = vocab().size() as f64;
        assert!(p.iter().all(|&v| (v - 1.0 / k).abs() < 1e-15));
    }

    #[test]
    fn masked_ce_contract() {
        let v = vocab();
        let k = v.size();
        let run = |logits: Tensor<f64>, target: &[usize]| -> Result<f64> {
            let tape = Tape::new();
            let store = ParamStore::new();
            let bx = Binder::new(&tape, &store, false);
            let l = tape.leaf(logits, true);
            Ok(tape.value(masked_ce_loss(&bx, l, target, v.eos())?).item())
        };
        // uniform logits
        let loss = run(Tensor::zeros([5, k]), &[1, 2]).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);
        // boundary: T = T_max − 1 supervises every slot
        assert_eq!(masked_targets(5, &[1, 2, 3, 1], v.eos()).unwrap().iter().filter(|t| t.is_some()).count(), 5);
        assert!(matches!(run(Tensor::zeros([5, k]), &[1; 5]), Err(Error::TargetTooLong { len: 5, capacity: 4 })));
        // masked slots do not matter
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Tensor::from_fn([6, k], |_| rng.random_range(-2.0..2.0));
        let mut other = base.clone();
        for x in &mut other.data_mut()[3 * k..] {
            *x += 3.0;
        }
        assert_eq!(run(base, &[1, 2]).unwrap(), run(other, &[1, 2]).unwrap());
    }

    #[test]
    fn nar_decode_rules() {
        let v = vocab();
        let k = v.size();
        let out = nar_decode(&one_hot_logits(&[v.eos(), 1, 2], k), &v).unwrap();
        assert_eq!((out.text(&v).as_str(), out.truncated), ("", false));
        let out = nar_decode(&one_hot_logits(&[1, 2, v.eos(), 3], k), &v).unwrap();
        assert_eq!((out.text(&v).as_str(), out.truncated), ("ab", false));
        let out = nar_decode(&one_hot_logits(&[1, v.pad(), 3, 2], k), &v).unwrap();
        assert_eq!((out.text(&v).as_str(), out.truncated), ("acb", true));
    }
}
