//! Semi-discrete transport-relaxed Schrödinger bridges.
//!
//! Discrete marginals `μ = Σ aᵢ δ_{xᵢ}`, `ν = Σ bⱼ δ_{yⱼ}` and a correlated Gaussian
//! reference `γ`. The dual problem is a finite-dimensional concave maximization over
//! `(α, β) ∈ ℝⁿ⁺ᵐ`, solved here by Monte Carlo gradient ascent or by a smoothed
//! Sinkhorn-type fixed-point iteration. As the transport penalty `ε⁻¹` grows, the optimal
//! value behaves like `-d ln ε + H(π⁰|σ)` where `π⁰` is a classical discrete Schrödinger
//! bridge, computed by [`discrete_bridge`].

pub mod discrete_bridge;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod measures;
pub mod potentials;
pub mod problem;
pub mod solvers;

pub use error::{Error, Result};
pub use measures::{DiscreteMeasure, GaussianReference, SampleBatch};
pub use potentials::DualPotentials;
pub use problem::{Problem, ProblemSeeds};
