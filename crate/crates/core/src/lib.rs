//! Numerical core for multi-resolvent Wigner chain experiments.
//!
//! Everything in this crate is a pure function of its inputs and runs
//! without the standard library (a global allocator is required):
//!
//! * [`semicircle`]: the Stieltjes transform of the semicircle law, its
//!   density and quantiles, iterated divided differences (plain and with
//!   imaginary-part kernels) and the `eta(E)` resolution solver.
//! * [`nc`]: non-crossing partitions, Kreweras complements, Catalan
//!   numbers and the free-cumulant (Möbius) transform.
//! * [`det_approx`]: the deterministic approximation of resolvent chains
//!   together with its leading term and size bounds.
//! * [`characteristics`]: the semicircular characteristic flow.
//! * [`moments`]: atomic laws with prescribed low-order complex moments.
//!
//! IO, random sampling and eigendecompositions live in the `ethlab` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod characteristics;
pub mod det_approx;
pub mod matrix;
pub mod moments;
pub mod nc;
pub mod quadrature;
pub mod semicircle;

mod math;

pub use num_complex::Complex64;
