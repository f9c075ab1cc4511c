//! Synthetic line and paragraph images, augmentation, manifests and
//! transcript combination.

pub mod augment;
pub mod dataset;
pub mod glyphs;
pub mod io;
pub mod render;
pub mod rover;

pub use augment::{augment, AugmentOp, AugmentSpec};
pub use dataset::{make_dataset, DatasetConfig, DatasetSummary};
pub use glyphs::GlyphSet;
pub use io::{load_manifest, read_pgm, to_ink, write_manifest, write_pgm, Sample};
pub use render::{render_line, render_paragraph};
pub use rover::rover_combine;
