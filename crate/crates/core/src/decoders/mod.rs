//! Decoding heads, their losses and greedy decoders.

pub mod attention;
pub mod ctc;
pub mod heads;
pub mod stack;
pub mod vocab;

pub use attention::{AttnConfig, AttnDecoder, KvCache};
pub use heads::{ctc_greedy_decode, masked_ce_loss, nar_decode, ArDecoder, CtcDecoder, Decoded, NarDecoder};
pub use stack::MambaStack;
pub use vocab::Vocabulary;
