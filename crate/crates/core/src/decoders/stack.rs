use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{Binder, Init, LayerNorm, ParamStore};
use crate::ssm::{MambaBlock, MambaConfig, RecurrentState};
use crate::tensor::Float;

#[derive(Clone, Debug)]
pub struct StackLayer {
    pub norm: LayerNorm,
    pub block: MambaBlock,
}

/// Unidirectional pre-norm residual stack: `x ← x + Mamba(LN(x))` per
/// layer, then a final LayerNorm.
#[derive(Clone, Debug)]
pub struct MambaStack {
    pub cfg: MambaConfig,
    pub layers: Vec<StackLayer>,
    pub norm_f: LayerNorm,
}

impl MambaStack {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: MambaConfig, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|i| StackLayer {
                norm: LayerNorm::new(store, &format!("{name}.{i}.norm"), cfg.d_model),
                block: MambaBlock::new(store, init, &format!("{name}.{i}.mamba"), cfg),
            })
            .collect();
        let norm_f = LayerNorm::new(store, &format!("{name}.norm_f"), cfg.d_model);
        MambaStack { cfg, layers, norm_f }
    }

    pub fn forward<T: Float>(&self, bx: &Binder<'_, T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            let y = layer.norm.forward(bx, x)?;
            let y = layer.block.forward(bx, y)?;
            x = bx.tape.add(x, y)?;
        }
        self.norm_f.forward(bx, x)
    }

    pub fn new_states<T: Float>(&self) -> Vec<RecurrentState<T>> {
        self.layers.iter().map(|_| RecurrentState::new(&self.cfg)).collect()
    }

    /// Bytes of the per-stream inference state, independent of position.
    pub fn state_bytes<T: Float>(&self) -> usize {
        self.layers.len() * self.cfg.state_bytes::<T>()
    }

    /// One position through every layer, mirroring [`MambaStack::forward`].
    pub fn step<T: Float>(&self, store: &ParamStore<T>, x: &[T], states: &mut [RecurrentState<T>]) -> Vec<T> {
        let mut x = x.to_vec();
        for (layer, state) in self.layers.iter().zip(states.iter_mut()) {
            let y = layer.norm.apply_row(store, &x);
            let y = layer.block.step(store, &y, state);
            for (a, b) in x.iter_mut().zip(y) {
                *a += b;
            }
        }
        self.norm_f.apply_row(store, &x)
    }
}
