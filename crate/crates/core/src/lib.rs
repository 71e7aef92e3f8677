//! Progressive stochastic binarization (PSB) inference engine.
//!
//! Network weights are stored as sign/exponent/probability triples
//! `w ~ s * 2^e * (B_p + 1)`, where `B_p` is a Bernoulli bit selecting between
//! two adjacent power-of-two shifts. Multiplications become randomized shifts;
//! capacitor units average `n` such samples in a wide integer lane before the
//! non-linearity, so precision grows with the sample budget at run time.
//!
//! The crate ships the number system ([`encoding`]), deterministic splittable
//! random streams and samplers ([`sampling`]), saturating Q5.10 fixed-point
//! arithmetic ([`fixedpoint`]), the stochastic MAC kernels ([`capacitor`]),
//! the layer graph with batch-norm folding, pruning and conversion
//! ([`graph`]), entropy-driven two-pass adaptive sampling ([`attention`]),
//! model/dataset persistence ([`modelio`]) and the float/brute-force reference
//! oracles everything is validated against ([`oracle`]).

pub mod attention;
pub mod capacitor;
pub mod encoding;
mod error;
pub mod fixedpoint;
pub mod graph;
pub mod modelio;
pub mod oracle;
pub mod sampling;

pub use error::{FormatError, PsbError, Result};
