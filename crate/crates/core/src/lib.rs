//! Masked block completion: given `X = [A C; B D]` with `D` hidden, recover
//! the Nyström completion `D* = B A^T (A A^T)^+ C` by the EAGLE iteration.
//!
//! Regimes: centralized ([`eagle`]), distributed over machines ([`dist`]) and
//! column-sketched ([`sketch`]). Baselines and the direct oracle live in
//! [`reference`].

pub mod matcore;
pub mod problemgen;
pub mod rng;
pub mod eagle;
pub mod dist;
pub mod sketch;
pub mod reference;
