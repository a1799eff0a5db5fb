//! Probabilistic verification and simulation of the ECo-MAC contention
//! backoff procedure with hidden senders.

pub mod automata;
pub mod backoff;
pub mod cli;
pub mod dtmc;
pub mod monte_carlo;
pub mod numfmt;
pub mod properties;
