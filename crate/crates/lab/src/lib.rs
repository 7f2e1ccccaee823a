//! Wigner ensembles, spectral evaluation of resolvent chains and the Monte
//! Carlo experiment harness built on `ethlab-core`.

pub mod ensembles;
pub mod harness;
pub mod observables;
pub mod spectral;
