use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Binder, Init, Linear, ParamId, ParamStore};
use crate::ssm::scan::{self, ScanMode};
use crate::tensor::{self, Float, Tensor};

/// Taps of the depthwise causal convolution in front of the scan.
pub const CONV_WIDTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub scan_mode: ScanMode,
}

impl MambaConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Bytes held by one [`RecurrentState`] of element type `T`.
    pub fn state_bytes<T: Float>(&self) -> usize {
        let di = self.d_inner();
        (di * self.d_state + (CONV_WIDTH - 1) * di) * T::DTYPE.size_of()
    }
}

/// Selective SSM parameters: diagonal `A = −exp(A_log)`, input-dependent
/// `B`, `C`, `Δ` projections and the per-channel skip gain.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a_log: ParamId,
    pub proj_b: Linear,
    pub proj_c: Linear,
    /// Rank-1 `Δ` projection, broadcast across channels.
    pub proj_dt: Linear,
    pub dt_bias: ParamId,
    pub d_skip: ParamId,
}

/// Canonical Mamba block: input projection into main and gate branches,
/// causal depthwise conv, SiLU, selective scan, gating, output projection.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: MambaConfig,
    pub in_proj: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ssm: SsmParams,
    pub out_proj: Linear,
}

/// Constant-size per-layer inference state: the SSM hidden state and the
/// last `CONV_WIDTH − 1` conv inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    /// `D_inner × N`.
    pub h: Vec<T>,
    /// `(CONV_WIDTH − 1) × D_inner`, oldest row first.
    pub conv: Vec<T>,
}

impl<T: Float> RecurrentState<T> {
    pub fn new(cfg: &MambaConfig) -> Self {
        let di = cfg.d_inner();
        RecurrentState {
            h: vec![T::zero(); di * cfg.d_state],
            conv: vec![T::zero(); (CONV_WIDTH - 1) * di],
        }
    }

    pub fn byte_size(&self) -> usize {
        (self.h.len() + self.conv.len()) * T::DTYPE.size_of()
    }
}

/// Outputs of [`MambaBlock::selective_project`].
pub struct Projections {
    pub b: Var,
    pub c: Var,
    pub delta: Var,
}

impl MambaBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: MambaConfig) -> Self {
        let (d, di, n) = (cfg.d_model, cfg.d_inner(), cfg.d_state);
        let in_proj = Linear::new(store, init, &format!("{name}.in_proj"), d, 2 * di, false);
        let cb = 1.0 / (CONV_WIDTH as f64).sqrt();
        let conv_w = store.add(format!("{name}.conv.w"), init.uniform([di, CONV_WIDTH], cb), true);
        let conv_b = store.add(format!("{name}.conv.b"), init.uniform([di], cb), false);
        let proj_b = Linear::new(store, init, &format!("{name}.x_b"), di, n, true);
        let proj_c = Linear::new(store, init, &format!("{name}.x_c"), di, n, true);
        let proj_dt = Linear::new(store, init, &format!("{name}.x_dt"), di, 1, false);
        // softplus(bias) log-uniform in [1e-3, 1e-1]
        let dt_bias = {
            let u = init.uniform::<f64>([di], 1.0);
            let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
            let data = u
                .data()
                .iter()
                .map(|&v| T::of(tensor::softplus_inv((lo + (v + 1.0) * 0.5 * (hi - lo)).exp())))
                .collect();
            store.add(format!("{name}.dt_bias"), Tensor::new([di], data).unwrap(), false)
        };
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::from_fn([di, n], |i| T::of(((i % n) as f64 + 1.0).ln())),
            false,
        );
        let d_skip = store.add(format!("{name}.d_skip"), Tensor::full([di], T::one()), false);
        let out_proj = Linear::new(store, init, &format!("{name}.out_proj"), di, d, false);
        MambaBlock {
            cfg,
            in_proj,
            conv_w,
            conv_b,
            ssm: SsmParams { a_log, proj_b, proj_c, proj_dt, dt_bias, d_skip },
            out_proj,
        }
    }

    /// `B = Linear_B(x)`, `C = Linear_C(x)`, `Δ = softplus(Linear_Δ(x))`
    /// for `x` of shape `L × D_inner`.
    pub fn selective_project<T: Float>(&self, bx: &Binder<'_, T>, x: Var) -> Result<Projections> {
        let t = bx.tape;
        let b = self.ssm.proj_b.forward(bx, x)?;
        let c = self.ssm.proj_c.forward(bx, x)?;
        let s = self.ssm.proj_dt.forward(bx, x)?;
        let s = t.repeat_cols(s, self.cfg.d_inner())?;
        let s = t.add_bias(s, bx.p(self.ssm.dt_bias))?;
        let delta = t.softplus(s)?;
        Ok(Projections { b, c, delta })
    }

    pub fn forward<T: Float>(&self, bx: &Binder<'_, T>, x: Var) -> Result<Var> {
        let t = bx.tape;
        let shape = t.shape(x);
        if shape.len() != 2 || shape[1] != self.cfg.d_model || shape[0] == 0 {
            return Err(Error::dim("mamba_block", format!("input {shape:?}")));
        }
        let di = self.cfg.d_inner();
        let xz = self.in_proj.forward(bx, x)?;
        let main = t.slice_cols(xz, 0, di)?;
        let gate = t.slice_cols(xz, di, di)?;
        let conv = t.causal_conv1d(main, bx.p(self.conv_w), bx.p(self.conv_b))?;
        let u = t.silu(conv)?;
        let proj = self.selective_project(bx, u)?;
        let a = t.exp(bx.p(self.ssm.a_log))?;
        let a = t.scale(a, -T::one())?;
        let y = t.selective_scan(u, proj.delta, a, proj.b, proj.c, bx.p(self.ssm.d_skip), self.cfg.scan_mode)?;
        let g = t.silu(gate)?;
        let y = t.mul(y, g)?;
        self.out_proj.forward(bx, y)
    }

    /// Advances `state` by one position and returns the block output.
    pub fn step<T: Float>(&self, store: &ParamStore<T>, x: &[T], state: &mut RecurrentState<T>) -> Vec<T> {
        let (di, n) = (self.cfg.d_inner(), self.cfg.d_state);
        let xz = self.in_proj.apply_row(store, x);
        let (main, gate) = xz.split_at(di);
        let w = store.get(self.conv_w).data();
        let cb = store.get(self.conv_b).data();
        let mut u = vec![T::zero(); di];
        for ch in 0..di {
            let mut acc = cb[ch];
            for j in 0..CONV_WIDTH {
                let input = if j + 1 < CONV_WIDTH { state.conv[j * di + ch] } else { main[ch] };
                acc += w[ch * CONV_WIDTH + j] * input;
            }
            u[ch] = tensor::silu(acc);
        }
        state.conv.copy_within(di.., 0);
        let tail = state.conv.len() - di;
        state.conv[tail..].copy_from_slice(main);

        let bproj = self.ssm.proj_b.apply_row(store, &u);
        let cproj = self.ssm.proj_c.apply_row(store, &u);
        let s = self.ssm.proj_dt.apply_row(store, &u)[0];
        let dt_bias = store.get(self.ssm.dt_bias).data();
        let a_log = store.get(self.ssm.a_log).data();
        let d_skip = store.get(self.ssm.d_skip).data();
        let mut y = vec![T::zero(); di];
        for d in 0..di {
            let dt = tensor::softplus(s + dt_bias[d]);
            let x = u[d];
            let hs = &mut state.h[d * n..(d + 1) * n];
            let mut acc = T::zero();
            for k in 0..n {
                let a = a_log[d * n + k].exp() * -T::one();
                let (a_bar, gain) = scan::zoh_coeff(dt, a);
                hs[k] = a_bar * hs[k] + gain * bproj[k] * x;
                acc += cproj[k] * hs[k];
            }
            y[d] = (acc + d_skip[d] * x) * tensor::silu(gate[d]);
        }
        self.out_proj.apply_row(store, &y)
    }

    /// Full-sequence output computed by stepping, plus the final state.
    pub fn run_steps<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, RecurrentState<T>)> {
        let (l, d) = x.dims2()?;
        if d != self.cfg.d_model {
            return Err(Error::dim("mamba_block", format!("input {:?}", x.shape())));
        }
        let mut state = RecurrentState::new(&self.cfg);
        let mut out = Vec::with_capacity(l * d);
        for t in 0..l {
            out.extend(self.step(store, x.row(t), &mut state));
        }
        Ok((Tensor::new([l, d], out)?, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block<T: Float>(seed: u64, scan_mode: ScanMode) -> (ParamStore<T>, MambaBlock) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let cfg = MambaConfig { d_model: 6, d_state: 4, expand: 2, scan_mode };
        let b = MambaBlock::new(&mut store, &mut init, "m", cfg);
        (store, b)
    }

    fn forward<T: Float>(store: &ParamStore<T>, b: &MambaBlock, x: &Tensor<T>) -> Tensor<T> {
        let tape = Tape::new();
        let bx = Binder::new(&tape, store, false);
        let xv = tape.constant(x.clone());
        let y = b.forward(&bx, xv).unwrap();
        (*tape.value(y)).clone()
    }

    fn random_input(seed: u64, l: usize, d: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([l, d], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn causal_prefix_is_bit_identical() {
        for seed in 0..50 {
            let (store, b) = block::<f64>(seed, ScanMode::Sequential);
            let x = random_input(seed + 100, 12, 6);
            let y = forward(&store, &b, &x);
            let t = (seed as usize) % 12;
            let mut x2 = x.clone();
            x2.data_mut()[t * 6 + 2] += 0.5;
            let y2 = forward(&store, &b, &x2);
            assert_eq!(&y.data()[..t * 6], &y2.data()[..t * 6]);
            assert_ne!(&y.data()[t * 6..], &y2.data()[t * 6..]);
        }
    }

    #[test]
    fn zero_input_zero_biases_gives_zero() {
        let (mut store, b) = block::<f64>(3, ScanMode::Sequential);
        store.map_values(|name, v| {
            if name.ends_with(".b") {
                Tensor::zeros(v.shape())
            } else {
                v.clone()
            }
        });
        let y = forward(&store, &b, &Tensor::zeros([5, 6]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stepping_matches_full_sequence() {
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            let (store, b) = block::<f64>(9, mode);
            let x = random_input(1, 64, 6);
            let full = forward(&store, &b, &x);
            let (stepped, state) = b.run_steps(&store, &x).unwrap();
            assert!(full.max_abs_diff(&stepped) < 1e-12);
            assert_eq!(state.byte_size(), b.cfg.state_bytes::<f64>());
        }
    }

    #[test]
    fn selective_project_degenerate_weights() {
        let (mut store, b) = block::<f64>(4, ScanMode::Sequential);
        store.map_values(|name, v| {
            if name.contains(".x_") || name.ends_with("dt_bias") {
                Tensor::zeros(v.shape())
            } else {
                v.clone()
            }
        });
        let tape = Tape::new();
        let bx = Binder::new(&tape, &store, false);
        let x = tape.constant(random_input(2, 3, 12));
        let p = b.selective_project(&bx, x).unwrap();
        assert!(tape.value(p.b).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(p.c).data().iter().all(|&v| v == 0.0));
        assert!(tape
            .value(p.delta)
            .data()
            .iter()
            .all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-15));
    }

    #[test]
    fn selective_project_affine_at_origin() {
        let (store, b) = block::<f64>(5, ScanMode::Sequential);
        let tape = Tape::new();
        let bx = Binder::new(&tape, &store, false);
        let x = tape.constant(Tensor::zeros([2, 12]));
        let p = b.selective_project(&bx, x).unwrap();
        let bias_b = store.get(b.ssm.proj_b.b.unwrap()).data();
        let bias_c = store.get(b.ssm.proj_c.b.unwrap()).data();
        assert_eq!(tape.value(p.b).row(1), bias_b);
        assert_eq!(tape.value(p.c).row(0), bias_c);
        let dt_bias = store.get(b.ssm.dt_bias).data();
        for (d, &v) in tape.value(p.delta).row(0).iter().enumerate() {
            assert!((v - tensor::softplus(dt_bias[d])).abs() < 1e-15);
        }
    }

    #[test]
    fn delta_strictly_positive() {
        let (store, b) = block::<f32>(6, ScanMode::Sequential);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let tape = Tape::new();
            let bx = Binder::new(&tape, &store, false);
            let scale = rng.random_range(0.1f32..20.0);
            let x = tape.constant(Tensor::from_fn([2, 12], |_| rng.random_range(-scale..scale)));
            let p = b.selective_project(&bx, x).unwrap();
            assert!(tape.value(p.delta).data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn state_stays_bounded_over_long_inputs() {
        let (store, b) = block::<f32>(8, ScanMode::Sequential);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut state = RecurrentState::new(&b.cfg);
        let mut peak = 0.0f32;
        for _ in 0..10_000 {
            let x: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            b.step(&store, &x, &mut state);
            let norm = state.h.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(norm.is_finite());
            peak = peak.max(norm);
        }
        // |ā| < 1 and bounded inputs keep every state entry below
        // max|b̄x| / (1 − max|ā|); in practice far smaller.
        assert!(peak < 1e3, "state norm {peak}");
    }
}
