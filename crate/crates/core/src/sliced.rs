//! Monte-Carlo sliced Wasserstein distance.
//!
//! Directions are drawn uniformly on the unit sphere by normalizing standard
//! Gaussian vectors, and each slice is an exact 1D problem solved by
//! [`crate::transport`].

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;
use crate::transport::w2_squared;

/// `k` unit directions in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    dim: usize,
    directions: Vec<Vec<f64>>,
    seed: Option<u64>,
}

impl ProjectionSet {
    /// Wraps explicit directions, normalizing each one.
    pub fn from_directions(directions: Vec<Vec<f64>>) -> Result<Self> {
        let dim = directions.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(invalid("projection set needs at least one non-empty direction"));
        }
        let mut out = Vec::with_capacity(directions.len());
        for d in directions {
            if d.len() != dim {
                return Err(invalid("directions must share one dimension"));
            }
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(invalid("direction must be finite and non-zero"));
            }
            out.push(d.into_iter().map(|x| x / norm).collect());
        }
        Ok(Self {
            dim,
            directions: out,
            seed: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

pub fn sample_directions(d: usize, k: usize, seed: u64) -> Result<ProjectionSet> {
    draw(d, k, seed, rng::stream(seed, rng::streams::DIRECTIONS))
}

/// Fresh directions for step `step` of a run, independent across steps.
pub fn sample_directions_at_step(d: usize, k: usize, seed: u64, step: u64) -> Result<ProjectionSet> {
    draw(d, k, seed, rng::step_stream(seed, rng::streams::DIRECTIONS, step))
}

fn draw(d: usize, k: usize, seed: u64, mut rng: rand_chacha::ChaCha20Rng) -> Result<ProjectionSet> {
    if d == 0 || k == 0 {
        return Err(invalid(format!("need d >= 1 and k >= 1, got d={d}, k={k}")));
    }
    let mut directions = Vec::with_capacity(k);
    while directions.len() < k {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            directions.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Ok(ProjectionSet {
        dim: d,
        directions,
        seed: Some(seed),
    })
}

/// Points in `R^d` with uniform weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSampleD {
    dim: usize,
    points: Vec<Vec<f64>>,
}

impl EmpiricalSampleD {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        if points.is_empty() || dim == 0 {
            return Err(invalid("sample must contain at least one point of dimension >= 1"));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(invalid(format!("point {i} has dimension {}, expected {dim}", p.len())));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("point {i} has a non-finite coordinate")));
            }
        }
        Ok(Self { dim, points })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn project(points: &[Vec<f64>], direction: &[f64]) -> Vec<f64> {
    points.iter().map(|p| dot(p, direction)).collect()
}

/// `(1/k) Σ_l W_2^2(<θ_l, A>, <θ_l, B>)`.
pub fn sw2_squared_mc(a: &EmpiricalSampleD, b: &EmpiricalSampleD, dirs: &ProjectionSet) -> Result<f64> {
    Ok(sw2_slices(a, b, dirs)?.iter().sum::<f64>() / dirs.len() as f64)
}

/// Per-direction `W_2^2` terms, in direction order.
pub fn sw2_slices(a: &EmpiricalSampleD, b: &EmpiricalSampleD, dirs: &ProjectionSet) -> Result<Vec<f64>> {
    if a.dim() != dirs.dim() || b.dim() != dirs.dim() {
        return Err(invalid(format!(
            "dimension mismatch: samples {} and {}, directions {}",
            a.dim(),
            b.dim(),
            dirs.dim()
        )));
    }
    dirs.directions()
        .par_iter()
        .map(|theta| w2_squared(&project(a.points(), theta), &project(b.points(), theta)))
        .collect()
}
