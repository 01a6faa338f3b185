//! Causal trajectory prediction for road agents.
//!
//! The crate decomposes a driving scene into spatial (map polylines), temporal
//! (agent tracks) and bird's-eye-view modalities, encodes each into token
//! form, and removes spurious map/context correlations with two causal
//! mechanisms before decoding multimodal futures:
//!
//! * **Backdoor adjustment** — a diffusion model over spatial tokens draws a
//!   set of map strata `{s_1..s_n}`; predictions are averaged over the set
//!   with uniform weight `1/n`.
//! * **Counterfactual subtraction** — the pipeline is re-run with the target
//!   history replaced by the zero sequence, and the factual composite token
//!   minus the counterfactual one feeds the decoder.
//!
//! Everything here is pure math over explicit seeds: no files, no clocks, no
//! global state. The companion `ctraj` crate adds dataset files, checkpoints
//! and the command line. The crate is `no_std`-compatible (alloc required)
//! when built without the `std` feature.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
mod mathx;
pub mod decoder;
pub mod diffusion;
pub mod encoders;
pub mod metrics;
pub mod model;
pub mod multi_view;
pub mod nn;
pub mod perturb;
pub mod rng;
pub mod scene;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod util;

pub use config::Config;
pub use error::CoreError;
pub use tensor::Tensor;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, CoreError>;
