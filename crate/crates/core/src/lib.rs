//! Latent Exploration Score (LES) for softmax decoders, plus
//! LES-constrained latent-space Bayesian optimization, demonstrated on an
//! arithmetic-expressions symbolic-regression task with an in-repo ReLU-MLP
//! beta-VAE.
//!
//! Modules:
//!
//! - [`linalg`]: dense factorizations, eigensolver, pseudo-inverse
//! - [`grammar`]: the expressions domain (tokens, parsing, objective)
//! - [`nn`]: ReLU MLPs, exact Jacobians, extended softmax, Adam
//! - [`vae`]: beta-VAE assembly, training, encode/decode
//! - [`scores`]: LES (two routes), gradients, baseline scores, AUROC
//! - [`bo`]: GP surrogate, log-EI, acquisition optimizers, the LSO loop
//! - [`cli`]: the `les` command-line front end

pub mod bench;
pub mod bo;
pub mod cli;
pub mod grammar;
pub mod linalg;
pub mod nn;
pub mod scores;
pub mod vae;
