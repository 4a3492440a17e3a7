//! A semi-discrete problem instance and its JSON file format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{generate_marginals, DiscreteMeasure, GaussianReference};

/// Reference mean of the `x` block used by the synthetic benchmark.
pub const BENCH_MEAN_X: [f64; 2] = [1.0, -0.5];
/// Reference mean of the `y` block used by the synthetic benchmark.
pub const BENCH_MEAN_Y: [f64; 2] = [-1.0, 0.8];
pub const BENCH_CORR: f64 = -0.4;
pub const BENCH_SIZE: usize = 10;

/// Seeds recorded alongside a problem so that every derived artifact is reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSeeds {
    /// Seed used to draw the support points.
    pub marginals: u64,
    /// Default seed for Monte Carlo batches.
    pub batch: u64,
}

impl Default for ProblemSeeds {
    fn default() -> Self {
        Self {
            marginals: 0,
            batch: 1,
        }
    }
}

/// Marginals `μ`, `ν` and the reference `γ` with quadratic costs on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub mu: DiscreteMeasure,
    pub nu: DiscreteMeasure,
    pub reference: GaussianReference,
    pub seeds: ProblemSeeds,
}

impl Problem {
    pub fn new(
        mu: DiscreteMeasure,
        nu: DiscreteMeasure,
        reference: GaussianReference,
        seeds: ProblemSeeds,
    ) -> Result<Self> {
        let d = reference.dim();
        for got in [mu.dim(), nu.dim()] {
            if got != d {
                return Err(Error::DimensionMismatch { expected: d, got });
            }
        }
        Ok(Self {
            mu,
            nu,
            reference,
            seeds,
        })
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn m(&self) -> usize {
        self.nu.len()
    }

    pub fn dim(&self) -> usize {
        self.reference.dim()
    }

    /// Random instance with box-uniform support points.
    pub fn generate(
        n: usize,
        m: usize,
        reference: GaussianReference,
        seeds: ProblemSeeds,
    ) -> Result<Self> {
        let (mu, nu) = generate_marginals(n, m, reference.dim(), seeds.marginals)?;
        Self::new(mu, nu, reference, seeds)
    }

    /// The 2-d, 10 + 10 point benchmark with the correlated reference.
    pub fn benchmark(seeds: ProblemSeeds) -> Self {
        let reference =
            GaussianReference::new(BENCH_MEAN_X.to_vec(), BENCH_MEAN_Y.to_vec(), BENCH_CORR)
                .expect("benchmark reference is valid");
        Self::generate(BENCH_SIZE, BENCH_SIZE, reference, seeds).expect("benchmark sizes are valid")
    }

    /// One atom at the origin on each side against `N(0, I) ⊗ N(0, I)`.
    /// The dual optimum satisfies `α + β = d ln 2`.
    pub fn single_atom(dim: usize) -> Self {
        let atom = || DiscreteMeasure::uniform(vec![vec![0.0; dim]]).expect("one atom");
        Self::new(
            atom(),
            atom(),
            GaussianReference::standard(dim),
            ProblemSeeds::default(),
        )
        .expect("consistent dimensions")
    }

    pub fn to_file_format(&self) -> ProblemFile {
        ProblemFile {
            dim: self.dim(),
            points_x: self.mu.points(),
            weights_a: self.mu.weights().to_vec(),
            points_y: self.nu.points(),
            weights_b: self.nu.weights().to_vec(),
            mean_x: self.reference.mean_x().to_vec(),
            mean_y: self.reference.mean_y().to_vec(),
            corr: self.reference.corr(),
            seeds: self.seeds,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        let file: ProblemFile = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_owned(),
            source,
        })?;
        file.into_problem()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_file_format())
    }
}

/// On-disk problem schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub dim: usize,
    pub points_x: Vec<Vec<f64>>,
    pub weights_a: Vec<f64>,
    pub points_y: Vec<Vec<f64>>,
    pub weights_b: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    pub corr: f64,
    #[serde(default)]
    pub seeds: ProblemSeeds,
}

impl ProblemFile {
    pub fn into_problem(self) -> Result<Problem> {
        let mu = DiscreteMeasure::new(self.points_x, self.weights_a)?;
        let nu = DiscreteMeasure::new(self.points_y, self.weights_b)?;
        let reference = GaussianReference::new(self.mean_x, self.mean_y, self.corr)?;
        if reference.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: reference.dim(),
            });
        }
        Problem::new(mu, nu, reference, self.seeds)
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}
