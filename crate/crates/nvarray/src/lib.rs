//! Desk-scale simulator and analysis toolkit for laser-written 3D arrays of
//! nitrogen-vacancy centres (NVCs) in diamond.
//!
//! The crate covers the full fabricate-and-characterise loop:
//!
//! - [`geometry`] — array planning and qubit-capacity arithmetic;
//! - [`fabrication`] — Monte-Carlo nitrogen doping, vacancy writing,
//!   annealing into NVCs, yield statistics and repeat-until-success rewriting;
//! - [`photonstats`] — two-detector photon streams, g2(tau) histograms and
//!   emitter-multiplicity classification;
//! - [`imaging`] — synthetic confocal scans and 3D Gaussian localisation;
//! - [`coherence`] — spin-echo / CPMG / XY8 decoherence under an
//!   Ornstein-Uhlenbeck bath, synthetic decay curves and stretched-exponential
//!   fits;
//! - [`fit`] — the shared damped least-squares engine;
//! - [`aberration`] — depth-dependent spherical aberration of the write focus
//!   and its correction, with scalar focal metrics;
//! - [`config`] / [`pipeline`] / [`report`] — seeded, config-driven experiment
//!   runs with manifests and plot-ready CSV output.
//!
//! Conventions: positions in micrometres (um) unless a name says nm, times in
//! seconds unless a name says ns, rates in s^-1, energies in nJ. Every
//! stochastic routine takes either an explicit RNG or a master seed from which
//! per-site streams are derived; equal seeds give bit-identical results
//! regardless of parallelism.

pub mod aberration;
pub mod coherence;
pub mod config;
pub mod error;
pub mod export;
pub mod fabrication;
pub mod fit;
pub mod geometry;
pub mod imaging;
pub mod numeric;
pub mod photonstats;
pub mod pipeline;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
