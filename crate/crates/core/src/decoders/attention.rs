//! Causal-attention AR decoder with a KV cache. Inference only; it exists
//! as the memory and latency counterpart of the recurrent Mamba head.

use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{self, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Upper bound on cached positions (visual plus generated).
    pub max_context: usize,
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention width {} not divisible into {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Cache bytes with `memory` visual positions and `tokens` generated.
    pub fn cache_bytes<T: Float>(&self, memory: usize, tokens: usize) -> usize {
        2 * (memory + tokens) * self.d_model * self.layers * T::DTYPE.size_of()
    }
}

#[derive(Clone, Debug)]
struct AttnLayer {
    ln_self: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_cross: LayerNorm,
    cq: Linear,
    ck: Linear,
    cv: Linear,
    co: Linear,
    ln_ffn: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
pub struct AttnDecoder {
    pub cfg: AttnConfig,
    embed: ParamId,
    layers: Vec<AttnLayer>,
    norm_f: LayerNorm,
    proj: Linear,
    vocab_size: usize,
}

#[derive(Clone, Debug, Default)]
struct LayerCache<T> {
    self_k: Vec<T>,
    self_v: Vec<T>,
    cross_k: Vec<T>,
    cross_v: Vec<T>,
}

/// Per-layer keys and values: cross-attention entries for the visual
/// sequence plus one self-attention entry per consumed token.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    layers: Vec<LayerCache<T>>,
    memory: usize,
    tokens: usize,
}

impl<T: Float> KvCache<T> {
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn memory_len(&self) -> usize {
        self.memory
    }

    pub fn byte_size(&self) -> usize {
        let elems: usize = self
            .layers
            .iter()
            .map(|c| c.self_k.len() + c.self_v.len() + c.cross_k.len() + c.cross_v.len())
            .sum();
        elems * T::DTYPE.size_of()
    }
}

fn token_position<T: Float>(pos: usize, d: usize) -> impl Iterator<Item = T> {
    (0..d).map(move |k| {
        let freq = 10000f64.powf(-((k / 2 * 2) as f64) / d as f64);
        let a = pos as f64 * freq;
        T::of(if k % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Multi-head attention of one query over `n` cached rows.
fn attend_one<T: Float>(q: &[T], keys: &[T], values: &[T], heads: usize) -> Vec<T> {
    let d = q.len();
    let dh = d / heads;
    let n = keys.len() / d;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); d];
    let mut scores = vec![T::zero(); n];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            let k = &keys[j * d..(j + 1) * d];
            *s = cols.clone().map(|c| q[c] * k[c]).sum::<T>() * scale;
        }
        let p = tensor::softmax_rows(&scores, n);
        for (j, &w) in p.iter().enumerate() {
            for c in cols.clone() {
                out[c] += w * values[j * d + c];
            }
        }
    }
    out
}

fn add_into<T: Float>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

impl AttnDecoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, cfg: AttnConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("attn.{i}");
                let mut lin = |n: &str, a, b| Linear::new(store, init, &format!("{p}.{n}"), a, b, true);
                let (q, k, v, o) = (lin("q", d, d), lin("k", d, d), lin("v", d, d), lin("o", d, d));
                let (cq, ck, cv, co) = (lin("cq", d, d), lin("ck", d, d), lin("cv", d, d), lin("co", d, d));
                let (ff1, ff2) = (lin("ff1", d, 4 * d), lin("ff2", 4 * d, d));
                AttnLayer {
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d),
                    q,
                    k,
                    v,
                    o,
                    ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d),
                    cq,
                    ck,
                    cv,
                    co,
                    ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d),
                    ff1,
                    ff2,
                }
            })
            .collect();
        Ok(AttnDecoder {
            cfg,
            embed: store.add("attn.embed", init.uniform([vocab_size, d], 1.0), false),
            layers,
            norm_f: LayerNorm::new(store, "attn.norm_f", d),
            proj: Linear::new(store, init, "attn.proj", d, vocab_size, true),
            vocab_size,
        })
    }

    /// Cross-attention keys and values for the visual sequence `h`.
    pub fn prefill<T: Float>(&self, store: &ParamStore<T>, h: &Tensor<T>) -> Result<KvCache<T>> {
        let (l, d) = h.dims2()?;
        if d != self.cfg.d_model {
            return Err(Error::dim("attn_prefill", format!("visual sequence {:?}", h.shape())));
        }
        if l > self.cfg.max_context {
            return Err(Error::Capacity { len: l, capacity: self.cfg.max_context });
        }
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let mut c = LayerCache::default();
                for r in 0..l {
                    c.cross_k.extend(layer.ck.apply_row(store, h.row(r)));
                    c.cross_v.extend(layer.cv.apply_row(store, h.row(r)));
                }
                c
            })
            .collect();
        Ok(KvCache { layers, memory: l, tokens: 0 })
    }

    /// Consumes `token`, appends one key/value pair per layer and returns
    /// the next-token logits.
    pub fn step<T: Float>(&self, store: &ParamStore<T>, cache: &mut KvCache<T>, token: usize) -> Result<Vec<T>> {
        if cache.memory + cache.tokens >= self.cfg.max_context {
            return Err(Error::Capacity { len: cache.memory + cache.tokens + 1, capacity: self.cfg.max_context });
        }
        if token >= self.vocab_size {
            return Err(Error::Vocabulary(format!("token id {token} outside vocabulary of {}", self.vocab_size)));
        }
        let d = self.cfg.d_model;
        let mut x: Vec<T> = store
            .get(self.embed)
            .row(token)
            .iter()
            .zip(token_position::<T>(cache.tokens, d))
            .map(|(&e, p)| e + p)
            .collect();
        for (layer, c) in self.layers.iter().zip(&mut cache.layers) {
            let a = layer.ln_self.apply_row(store, &x);
            let q = layer.q.apply_row(store, &a);
            c.self_k.extend(layer.k.apply_row(store, &a));
            c.self_v.extend(layer.v.apply_row(store, &a));
            let att = attend_one(&q, &c.self_k, &c.self_v, self.cfg.heads);
            add_into(&mut x, &layer.o.apply_row(store, &att));

            let a = layer.ln_cross.apply_row(store, &x);
            let q = layer.cq.apply_row(store, &a);
            let att = attend_one(&q, &c.cross_k, &c.cross_v, self.cfg.heads);
            add_into(&mut x, &layer.co.apply_row(store, &att));

            let a = layer.ln_ffn.apply_row(store, &x);
            let f: Vec<T> = layer.ff1.apply_row(store, &a).into_iter().map(tensor::gelu).collect();
            add_into(&mut x, &layer.ff2.apply_row(store, &f));
        }
        cache.tokens += 1;
        let y = self.norm_f.apply_row(store, &x);
        Ok(self.proj.apply_row(store, &y))
    }

    /// Greedy generation; ids in `blocked` are never emitted.
    pub fn generate<T: Float>(
        &self,
        store: &ParamStore<T>,
        h: &Tensor<T>,
        sos: usize,
        eos: usize,
        blocked: &[usize],
        max_len: usize,
    ) -> Result<(Vec<usize>, bool)> {
        let mut cache = self.prefill(store, h)?;
        let mut out = Vec::new();
        let mut token = sos;
        loop {
            let mut logits = self.step(store, &mut cache, token)?;
            for &b in blocked {
                logits[b] = T::neg_infinity();
            }
            let next = tensor::argmax(&logits);
            if next == eos {
                return Ok((out, false));
            }
            if out.len() == max_len {
                return Ok((out, true));
            }
            out.push(next);
            token = next;
        }
    }

    /// Whole-sequence causal forward in matrix form: logits `T × |V|` for
    /// the input tokens.
    pub fn forward<T: Float>(&self, store: &ParamStore<T>, h: &Tensor<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        let d = self.cfg.d_model;
        let n = tokens.len();
        let rows = |f: &dyn Fn(&[T]) -> Vec<T>, x: &Tensor<T>| -> Result<Tensor<T>> {
            let (r, _) = x.dims2()?;
            let data: Vec<T> = (0..r).flat_map(|i| f(x.row(i))).collect();
            let cols = data.len() / r.max(1);
            Tensor::new([r, cols], data)
        };
        let emb = store.get(self.embed);
        let mut x = Tensor::new(
            [n, d],
            tokens
                .iter()
                .enumerate()
                .flat_map(|(t, &id)| emb.row(id).iter().zip(token_position::<T>(t, d)).map(|(&e, p)| e + p).collect::<Vec<_>>())
                .collect(),
        )?;
        for layer in &self.layers {
            let a = rows(&|r| layer.ln_self.apply_row(store, r), &x)?;
            let q = rows(&|r| layer.q.apply_row(store, r), &a)?;
            let k = rows(&|r| layer.k.apply_row(store, r), &a)?;
            let v = rows(&|r| layer.v.apply_row(store, r), &a)?;
            let att = self.mha(&q, &k, &v, true)?;
            let o = rows(&|r| layer.o.apply_row(store, r), &att)?;
            add_into(x.data_mut(), o.data());

            let a = rows(&|r| layer.ln_cross.apply_row(store, r), &x)?;
            let q = rows(&|r| layer.cq.apply_row(store, r), &a)?;
            let k = rows(&|r| layer.ck.apply_row(store, r), h)?;
            let v = rows(&|r| layer.cv.apply_row(store, r), h)?;
            let att = self.mha(&q, &k, &v, false)?;
            let o = rows(&|r| layer.co.apply_row(store, r), &att)?;
            add_into(x.data_mut(), o.data());

            let a = rows(&|r| layer.ln_ffn.apply_row(store, r), &x)?;
            let f = rows(&|r| layer.ff1.apply_row(store, r).into_iter().map(tensor::gelu).collect(), &a)?;
            let o = rows(&|r| layer.ff2.apply_row(store, r), &f)?;
            add_into(x.data_mut(), o.data());
        }
        let y = rows(&|r| self.norm_f.apply_row(store, r), &x)?;
        rows(&|r| self.proj.apply_row(store, r), &y)
    }

    /// Scores as `Q Kᵀ / √d_h` per head, optional causal mask.
    fn mha<T: Float>(&self, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, causal: bool) -> Result<Tensor<T>> {
        let (nq, d) = q.dims2()?;
        let (nk, _) = k.dims2()?;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = Tensor::zeros([nq, d]);
        for hd in 0..heads {
            let slice = |t: &Tensor<T>, rows: usize| -> Vec<T> {
                (0..rows).flat_map(|r| t.row(r)[hd * dh..(hd + 1) * dh].to_vec()).collect()
            };
            let (qh, kh, vh) = (slice(q, nq), slice(k, nk), slice(v, nk));
            let mut scores = tensor::matmul_bt(&qh, &kh, nq, nk, dh);
            for i in 0..nq {
                for j in 0..nk {
                    let s = &mut scores[i * nk + j];
                    *s = if causal && j > i { T::neg_infinity() } else { *s * scale };
                }
            }
            let p = tensor::softmax_rows(&scores, nk);
            let ctx = tensor::matmul(&p, &vh, nq, nk, dh);
            for i in 0..nq {
                out.data_mut()[i * d + hd * dh..i * d + (hd + 1) * dh].copy_from_slice(&ctx[i * dh..(i + 1) * dh]);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup<T: Float>(max_context: usize) -> (ParamStore<T>, AttnDecoder) {
        let mut store = ParamStore::new();
        let cfg = AttnConfig { d_model: 8, heads: 4, layers: 2, max_context };
        let dec = AttnDecoder::new(&mut store, &mut Init::new(3), cfg, 7).unwrap();
        (store, dec)
    }

    fn h<T: Float>(l: usize) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(l as u64);
        Tensor::from_fn([l, 8], |_| T::of(rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn cache_bytes_follow_formula() {
        let (store, dec) = setup::<f32>(1000);
        let mut cache = dec.prefill(&store, &h(5)).unwrap();
        let base = dec.cfg.cache_bytes::<f32>(5, 0);
        assert_eq!(cache.byte_size(), base);
        assert_eq!(base, 2 * 5 * 8 * 2 * 4);
        for t in 1..=20 {
            dec.step(&store, &mut cache, t % 7).unwrap();
            assert_eq!(cache.byte_size(), base + t * (2 * 8 * 2 * 4));
        }
    }

    #[test]
    fn steps_match_batch_forward() {
        let (store, dec) = setup::<f64>(1000);
        let mem = h(6);
        let tokens = [0, 3, 1, 6, 6, 2, 5];
        let full = dec.forward(&store, &mem, &tokens).unwrap();
        let mut cache = dec.prefill(&store, &mem).unwrap();
        for (t, &tok) in tokens.iter().enumerate() {
            let row = dec.step(&store, &mut cache, tok).unwrap();
            for (a, b) in row.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-12, "step {t}");
            }
        }
    }

    #[test]
    fn context_overflow_is_capacity_error() {
        let (store, dec) = setup::<f32>(7);
        let mut cache = dec.prefill(&store, &h(5)).unwrap();
        dec.step(&store, &mut cache, 1).unwrap();
        dec.step(&store, &mut cache, 1).unwrap();
        assert!(matches!(dec.step(&store, &mut cache, 1), Err(Error::Capacity { len: 8, capacity: 7 })));
    }
}
