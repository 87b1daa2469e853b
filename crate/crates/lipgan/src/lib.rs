//! Lipschitz-constrained critic training with an exact optimal-transport
//! oracle.
//!
//! The crate provides a reverse-mode autodiff tape whose backward pass is
//! itself differentiable ([`tape`]), small dense networks with Adam, weight
//! clipping and spectral normalization ([`nn`]), the gradient-penalty family
//! of Lipschitz regularizers ([`reg`]), an exact 1-Wasserstein solver with
//! alignment diagnostics ([`ot`]), adversarial training loops ([`gan`]), and
//! a config-driven experiment runner ([`experiments`]).

#![forbid(unsafe_code)]

pub mod tensor;
pub mod tape;
pub mod nn;
pub mod reg;
pub mod ot;
pub mod gan;
pub mod metrics;
pub mod experiments;
