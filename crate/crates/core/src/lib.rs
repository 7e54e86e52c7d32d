//! Trust-region method for risk-averse optimization with inexact oracles.

pub mod convex_terms;
pub mod dual_prox;
pub mod hilbert;
pub mod support_sets;
pub mod problems;
pub mod tr_engine;
