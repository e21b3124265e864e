//! Minimal neural-network stack: a reverse-mode tape, transformer
//! blocks, and an Adam optimizer. Everything runs single-threaded on the
//! CPU with fixed evaluation order, so training and inference are
//! reproducible bit-for-bit for a given seed.

pub mod layers;
pub mod tape;

pub use layers::{Adam, Binder, ParamSet, Seq2SeqIdx};
pub use tape::{Arr, Gradients, Id, Tape};
