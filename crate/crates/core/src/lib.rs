#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diffusivity;
pub mod ensemble;
pub mod eulerian;
pub mod error;
pub mod flows;
pub mod integrators;
pub mod kernel;
pub mod krylov;
pub mod rng;
