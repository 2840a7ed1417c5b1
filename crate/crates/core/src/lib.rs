#![cfg_attr(not(feature = "std"), no_std)]

//! Intent estimation and role allocation for physical human-robot
//! collaboration.
//!
//! The crate is split along the data flow of the controller:
//!
//! - [`trajectory`]: sampled end-effector trajectories and observation windows.
//! - [`nn`]: a small reverse-mode tape with attention, norm and feedforward
//!   blocks plus the Adam optimizer.
//! - [`intent`]: the dual-branch Transformer CVAE that predicts future motion
//!   from past motion (and, on the human branch, interaction force).
//! - [`control`]: the cooperative-game role allocator (admittance state space,
//!   cost blending, Riccati solve, LQR effort).
//! - [`sim`]: the closed-loop admittance simulator, scripted human partner and
//!   the collaboration metrics.
//! - [`datagen`]: synthetic corpora for both training regimes.
//!
//! Everything here is `no_std` + `alloc`; file formats, the CLI and the
//! realtime bridge live in the companion `phrc` crate.

extern crate alloc;

pub mod control;
pub mod datagen;
pub mod error;
pub mod intent;
pub mod nn;
pub mod profile;
pub mod sim;
pub mod trajectory;

pub use error::{Error, Result};

/// Task-space 3-vector (m, m/s or N depending on context).
pub type Vec3 = nalgebra::Vector3<f64>;

/// Derive a child seed from a parent seed and a stream index (splitmix64).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
