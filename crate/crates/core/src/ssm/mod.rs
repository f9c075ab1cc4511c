//! Selective state-space machinery.

pub mod block;
pub mod connector;
pub mod scan;

pub use block::{MambaBlock, MambaConfig, RecurrentState, SsmParams, CONV_WIDTH};
pub use connector::BiMambaConnector;
pub use scan::{discretize_zoh, selective_scan, ScanMode};
