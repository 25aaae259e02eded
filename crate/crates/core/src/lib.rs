//! Object-centric masked image modeling on procedurally generated toy scenes.
//!
//! The crate covers the full pipeline: scene generation ([`scenegen`]),
//! tokenization and mask planning ([`objtok`]), a small masked autoencoder with
//! hand-written gradients ([`net`]), reconstruction losses ([`losses`]),
//! two-stage training ([`trainer`]) and evaluation ([`eval`]).

pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod net;
pub mod objtok;
pub mod par;
pub mod scenegen;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
