//! Kinetic-theory toolkit for hard-sphere gases at desk scale.
//!
//! The crate is organized around six subsystems:
//!
//! - [`dynamics`]: exact event-driven dynamics of n hard spheres (free flight,
//!   pair collision prediction, the elastic collision transform).
//! - [`cluster`]: set-partition enumeration and the signed cumulant operators
//!   built from sub-system flows, including scattering cumulants and the
//!   first two generating evolution operators.
//! - [`hierarchy`]: truncated-series evaluation of marginal distribution
//!   functions, marginal observables, mean-value pairings and the scaling-limit
//!   collision functionals.
//! - [`solver`]: stochastic-particle (DSMC) integration of the hard-sphere
//!   Boltzmann equation, the displaced-collision Enskog variant, and the
//!   one-dimensional hard-rod collision integral.
//! - [`harness`]: scaling experiments at constant N*eps^2: chaos-state
//!   sampling, marginal histograms, convergence and factorization reports.
//! - [`config`] / [`manifest`]: declarative experiment configs and
//!   reproducibility records for the CLI front end.

pub mod cluster;
pub mod config;
pub mod dynamics;
pub mod harness;
pub mod hierarchy;
pub mod manifest;
pub mod sampling;
pub mod solver;
pub mod stats;
pub mod vec3;

pub use vec3::Vec3;
