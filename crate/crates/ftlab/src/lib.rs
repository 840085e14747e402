//! ftlab: a desk-scale testbed for studying how fine-tuning alters
//! transformer capabilities.
//!
//! The crate covers the full experimental loop:
//!
//! - [`grammar`] / [`data`]: probabilistic context-free grammars, task
//!   encoding, sampling priors, and controlled spurious-correlation
//!   injection;
//! - [`rasp`] / [`compile`]: a mini-RASP interpreter and a compiler that
//!   turns the counter and k-th-largest programs into exact transformer
//!   weights;
//! - [`tensor`] / [`tape`] / [`model`] / [`optim`]: a from-scratch
//!   reverse-mode autodiff engine with the two transformer shapes, losses,
//!   optimizers and learning-rate schedules;
//! - [`train`]: pretraining, fine-tuning, reverse fine-tuning, randFT,
//!   data mixing, and jailbreak protocols;
//! - [`interp`]: saliency pruning, linear probes, attention maps,
//!   accuracy evaluation and prediction histograms.

pub mod checkpoint;
pub mod compile;
pub mod config;
pub mod data;
pub mod dataset_io;
pub mod grammar;
pub mod interp;
pub mod model;
pub mod optim;
pub mod rasp;
pub mod report;
pub mod rng;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use rng::Rng;
