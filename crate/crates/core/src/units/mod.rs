//! The four attention fusion units.
//!
//! Each unit is a parameterized transform on feature maps with three entry
//! points: `*_forward` (inference), `*_forward_cached` (keeps the
//! intermediates a backward pass needs), and `*_backward`. The plain
//! forward delegates to the cached one so there is exactly one numeric
//! code path.

pub mod ceu;
pub mod cmeu;
pub mod seu;

pub use ceu::{ceu_backward, ceu_forward, ceu_forward_cached, CeuCache, CeuParams};
pub use cmeu::{cmeu_backward, cmeu_forward, cmeu_forward_cached, CmeuCache, CmeuParams};
pub use seu::{seu_backward, seu_forward, seu_forward_cached, SeuCache, SeuParams};
