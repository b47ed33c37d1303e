//! Reverse-mode differentiation over a per-step tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in
//! a [`ParamStore`] outside the tape; [`Tape::param`] copies a parameter onto
//! the tape as a leaf and [`Tape::backward`] adds the resulting gradients
//! back into the store. Dropping the tape frees the graph.

mod checkpoint;
mod param;
mod tape;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use param::{ParamId, Parameter, ParamStore};
pub use tape::{Gradients, Tape, Unary, Var};
