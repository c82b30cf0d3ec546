//! Minimal reverse-mode automatic differentiation over scalar computation
//! graphs.
//!
//! The engine is a flat tape: every node carries one value, the indices of
//! its parents, and the local partials recorded at forward time. Because a
//! node's parents must exist before the node is pushed, indices are strictly
//! increasing and the graph is acyclic by construction; the backward sweep is
//! a single reverse pass that accumulates gradients additively, so shared
//! subexpressions are handled naturally.
//!
//! A tape is confined to one thread while it is being built and swept.
//! Distinct tapes may run on distinct threads concurrently, and
//! [`ParameterStore`] snapshots are immutable values that can be shared
//! freely.

mod adam;
mod checkpoint;
mod params;
mod tape;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{read_checkpoint, write_checkpoint, write_checkpoint_string, Checkpoint};
pub use params::{ParamBinding, ParameterStore};
pub use tape::{Gradients, Tape, TapeMark, Var};
