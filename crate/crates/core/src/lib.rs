//! Agreement-gated audio-visual enrichment at desk scale.
//!
//! The crate is self-contained: a small f64 autodiff engine ([`tensor`]),
//! shared network building blocks ([`nn`]), the two enrichment modules
//! ([`caste`] and [`case`]), the auxiliary objectives ([`losses`]), the
//! end-to-end toy model over frozen transformer blocks ([`model`]), and a
//! deterministic synthetic-episode generator with ground-truth alignment
//! labels ([`synth`]).

pub mod case;
pub mod caste;
pub mod checkpoint;
pub mod nn;
pub mod rng;
pub mod tensor;
