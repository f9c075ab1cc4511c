use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{Binder, Init, LayerNorm, Linear, ParamStore};
use crate::ssm::block::{MambaBlock, MambaConfig};
use crate::tensor::Float;

/// Bidirectional context layer over the visual sequence.
///
/// ```text
/// x̃     = GELU(Linear₁(LayerNorm₁(x)))
/// fused = x + Mamba(x̃) + flip(Mamba(flip(x̃)))
/// out   = fused + FFN(LayerNorm₂(fused))
/// ```
///
/// Both directions run through the same [`MambaBlock`] weights and are
/// fused by addition.
#[derive(Clone, Debug)]
pub struct BiMambaConnector {
    pub norm1: LayerNorm,
    pub lin1: Linear,
    pub mamba: MambaBlock,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl BiMambaConnector {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: MambaConfig) -> Self {
        let d = cfg.d_model;
        BiMambaConnector {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            lin1: Linear::new(store, init, &format!("{name}.lin1"), d, d, true),
            mamba: MambaBlock::new(store, init, &format!("{name}.mamba"), cfg),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ffn_in: Linear::new(store, init, &format!("{name}.ffn_in"), d, 4 * d, true),
            ffn_out: Linear::new(store, init, &format!("{name}.ffn_out"), 4 * d, d, true),
        }
    }

    /// Forward and backward branch outputs before fusion.
    pub fn branches<T: Float>(&self, bx: &Binder<'_, T>, x: Var) -> Result<(Var, Var)> {
        let t = bx.tape;
        let xt = self.norm1.forward(bx, x)?;
        let xt = self.lin1.forward(bx, xt)?;
        let xt = t.gelu(xt)?;
        let fwd = self.mamba.forward(bx, xt)?;
        let rev = t.flip_rows(xt)?;
        let bwd = self.mamba.forward(bx, rev)?;
        let bwd = t.flip_rows(bwd)?;
        Ok((fwd, bwd))
    }

    pub fn forward<T: Float>(&self, bx: &Binder<'_, T>, x: Var) -> Result<Var> {
        let t = bx.tape;
        let (fwd, bwd) = self.branches(bx, x)?;
        let fused = t.add(fwd, bwd)?;
        let fused = t.add(x, fused)?;
        let f = self.norm2.forward(bx, fused)?;
        let f = self.ffn_in.forward(bx, f)?;
        let f = t.gelu(f)?;
        let f = self.ffn_out.forward(bx, f)?;
        t.add(fused, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::ssm::scan::ScanMode;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore<f64>, BiMambaConnector) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let cfg = MambaConfig { d_model: 8, d_state: 4, expand: 2, scan_mode: ScanMode::Sequential };
        let c = BiMambaConnector::new(&mut store, &mut init, "bi", cfg);
        (store, c)
    }

    fn run(store: &ParamStore<f64>, c: &BiMambaConnector, x: &Tensor<f64>) -> Tensor<f64> {
        let tape = Tape::new();
        let bx = Binder::new(&tape, store, false);
        let v = tape.constant(x.clone());
        (*tape.value(c.forward(&bx, v).unwrap())).clone()
    }

    #[test]
    fn singleton_sequence_branches_coincide() {
        let (store, c) = setup(1);
        let tape = Tape::new();
        let bx = Binder::new(&tape, &store, false);
        let x = tape.constant(Tensor::from_fn([1, 8], |i| i as f64 * 0.1 - 0.3));
        let (f, b) = c.branches(&bx, x).unwrap();
        assert_eq!(tape.value(f).data(), tape.value(b).data());
    }

    #[test]
    fn last_position_reaches_first_output() {
        let (store, c) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn([10, 8], |_| rng.random_range(-1.0..1.0));
        let y = run(&store, &c, &x);
        let mut x2 = x.clone();
        x2.data_mut()[9 * 8 + 3] += 0.5;
        let y2 = run(&store, &c, &x2);
        let diff: f64 = y.row(0).iter().zip(y2.row(0)).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-9, "first output insensitive to last input");
    }
}
