//! Files, checkpoints and the `latent-align` command line on top of
//! [`latent_align_core`].

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod io;
