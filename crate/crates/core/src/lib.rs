//! Controllable object-centric learning: query-conditioned Slot Attention,
//! a conditioned broadcast decoder, a control contrastive loss, grounding and
//! object-discovery metrics, and a procedural scene generator to train them on.

pub mod diffcore;
mod error;

pub use error::{Error, Result};
pub mod grounding;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod slotattn;
pub mod synthscene;
