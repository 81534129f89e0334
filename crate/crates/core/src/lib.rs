//! Converse (rate-cost / entropy-cost) bounds for linear stochastic control
//! with a rate-limited link between observer and controller, and a closed-loop
//! simulator of the DPCM lattice-quantizer scheme that approaches them.
//!
//! All information quantities are in nats unless a name says otherwise.

mod linalg;

pub mod bounds;
pub mod quantizer;
pub mod riccati;
pub mod simloop;
pub mod sysmodel;

pub use riccati::{b_min, solve_control, solve_filter, ControlRiccati, FilterRiccati, RiccatiError, SolvedPlant};
pub use sysmodel::{validate, LinearPlant, NoiseFamily, NoiseModel, Regularity, ValidationReport};

/// Converts a quantity in nats to bits.
pub fn nats_to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

/// Converts a quantity in bits to nats.
pub fn bits_to_nats(bits: f64) -> f64 {
    bits * std::f64::consts::LN_2
}
