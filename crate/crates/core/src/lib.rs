//! Gaussian-mixture diffusion laboratory: closed-form denoisers, training of
//! partially memorizing mixtures, DDIM sampling, memorization metrics and a
//! predictor for the memorization phase transition.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod denoisers;
pub mod error;
pub mod gmm_data;
pub mod lab;
pub mod losses;
pub mod lowrank;
pub mod points;
pub mod predictor;
pub mod sampling_eval;
pub mod schedule;
pub mod seeding;
pub mod theory_checks;
pub mod training;

pub use error::{LabError, Result};
