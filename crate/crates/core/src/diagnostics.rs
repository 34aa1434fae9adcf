//! Global and local spatial autocorrelation statistics.
//!
//! [`morans_i`] evaluates the global statistic, [`morans_test`] attaches a
//! permutation pseudo p-value, and [`lisa`] decomposes the statistic into
//! per-region local values with cluster quadrant labels. Permutation loops
//! derive one seed per permutation (global test) or per region (local test)
//! so the outcome does not depend on how work is split across threads.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{derive_seed, rng_from_seed};
use crate::weights::SpatialWeights;
use crate::Alternative;

/// Outcome of the global permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MoranResult {
    pub i_statistic: f64,
    /// Expectation under spatial randomness, -1/(N-1).
    pub expected_i: f64,
    pub pseudo_p: f64,
    pub n_permutations: usize,
    pub seed: u64,
}

/// Cluster quadrant from the signs of a region's value and its neighborhood
/// average (both centered). Zero counts as high.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Quadrant {
    /// High value among high neighbors.
    HH,
    /// Low value among low neighbors.
    LL,
    /// High value among low neighbors.
    HL,
    /// Low value among high neighbors.
    LH,
}

impl std::fmt::Display for Quadrant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Quadrant::HH => "HH",
            Quadrant::LL => "LL",
            Quadrant::HL => "HL",
            Quadrant::LH => "LH",
        })
    }
}

/// Per-region local analysis. `labels[i]` is `Some(quadrant)` exactly when
/// `pseudo_p_local[i] <= alpha`; `None` reads as not significant.
#[derive(Debug, Clone)]
pub struct LisaResult {
    pub local_i: Vec<f64>,
    pub quadrant: Vec<Quadrant>,
    pub pseudo_p_local: Vec<f64>,
    pub labels: Vec<Option<Quadrant>>,
    pub n_permutations: usize,
    pub seed: u64,
    pub alpha: f64,
}

struct Centered {
    z: Vec<f64>,
    /// Second moment sum(z^2)/N.
    m2: f64,
    n: usize,
}

fn center(x: &[f64], w: &SpatialWeights) -> Result<Centered> {
    let n = x.len();
    if w.n() != n {
        return Err(Error::DimensionError {
            expected: w.n(),
            got: n,
        });
    }
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 regions, got {n}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite value in input".into()));
    }
    if w.s0() == 0.0 {
        return Err(Error::Degenerate("weights have no edges".into()));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let z: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let m2 = z.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if m2 == 0.0 {
        return Err(Error::ZeroVariance("input vector is constant".into()));
    }
    Ok(Centered { z, m2, n })
}

/// Cross product sum_i sum_j w_ij z_i z_j over the sparse weight rows.
fn cross_product(z: &[f64], w: &SpatialWeights) -> f64 {
    let mut total = 0.0;
    for i in 0..z.len() {
        let mut lag = 0.0;
        for &(j, wij) in w.neighbors(i) {
            lag += wij * z[j];
        }
        total += z[i] * lag;
    }
    total
}

fn i_from_z(z: &[f64], m2: f64, w: &SpatialWeights) -> f64 {
    (cross_product(z, w) / w.s0()) / m2
}

/// Global Moran's I: `[sum_ij w_ij z_i z_j / S0] / [sum_i z_i^2 / N]` with
/// `z = x - mean(x)`. Regions without neighbors contribute zero on top.
pub fn morans_i(x: &[f64], w: &SpatialWeights) -> Result<f64> {
    let c = center(x, w)?;
    Ok(i_from_z(&c.z, c.m2, w))
}

const MIN_PERMUTATIONS: usize = 99;

/// Permutation test against the clustering (greater) alternative.
pub fn morans_test(
    x: &[f64],
    w: &SpatialWeights,
    n_permutations: usize,
    seed: u64,
) -> Result<MoranResult> {
    morans_test_with(x, w, n_permutations, seed, Alternative::Greater)
}

/// [`morans_test`] with an explicit alternative hypothesis.
pub fn morans_test_with(
    x: &[f64],
    w: &SpatialWeights,
    n_permutations: usize,
    seed: u64,
    alternative: Alternative,
) -> Result<MoranResult> {
    moran_test_impl(x, w, n_permutations, seed, alternative, false)
}

/// Single-threaded variant of [`morans_test`]; same result bit for bit.
pub fn morans_test_serial(
    x: &[f64],
    w: &SpatialWeights,
    n_permutations: usize,
    seed: u64,
) -> Result<MoranResult> {
    moran_test_impl(x, w, n_permutations, seed, Alternative::Greater, true)
}

fn moran_test_impl(
    x: &[f64],
    w: &SpatialWeights,
    n_permutations: usize,
    seed: u64,
    alternative: Alternative,
    sequential: bool,
) -> Result<MoranResult> {
    if n_permutations < MIN_PERMUTATIONS {
        return Err(Error::InvalidArgument(format!(
            "n_permutations must be at least {MIN_PERMUTATIONS}, got {n_permutations}"
        )));
    }
    let c = center(x, w)?;
    let observed = i_from_z(&c.z, c.m2, w);
    let expected = -1.0 / (c.n as f64 - 1.0);

    // Shuffling x and then centering equals centering and then shuffling, so
    // the permuted statistic can reuse z and m2.
    let z = c.z;
    let m2 = c.m2;
    let sims = par::map_indexed_mode(n_permutations, sequential, |p: usize| {
        let mut rng = rng_from_seed(derive_seed(seed, p as u64));
        let mut perm = z.clone();
        perm.shuffle(&mut rng);
        i_from_z(&perm, m2, w)
    });

    let exceed = match alternative {
        Alternative::Greater => sims.iter().filter(|&&v| v >= observed).count(),
        Alternative::TwoSided => {
            let dist = (observed - expected).abs();
            sims.iter()
                .filter(|&&v| (v - expected).abs() >= dist)
                .count()
        }
    };
    Ok(MoranResult {
        i_statistic: observed,
        expected_i: expected,
        pseudo_p: (exceed + 1) as f64 / (n_permutations + 1) as f64,
        n_permutations,
        seed,
    })
}

/// Local Moran statistics with conditional-permutation significance.
pub fn lisa(
    x: &[f64],
    w: &SpatialWeights,
    n_permutations: usize,
    seed: u64,
    alpha: f64,
) -> Result<LisaResult> {
    lisa_impl(x, w, n_permutations, seed, alpha, false)
}

/// Single-threaded variant of [`lisa`]; same result bit for bit.
pub fn lisa_serial(
    x: &[f64],
    w: &SpatialWeights,
    n_permutations: usize,
    seed: u64,
    alpha: f64,
) -> Result<LisaResult> {
    lisa_impl(x, w, n_permutations, seed, alpha, true)
}

fn quadrant_of(zi: f64, lag: f64) -> Quadrant {
    match (zi >= 0.0, lag >= 0.0) {
        (true, true) => Quadrant::HH,
        (false, false) => Quadrant::LL,
        (true, false) => Quadrant::HL,
        (false, true) => Quadrant::LH,
    }
}

fn lisa_impl(
    x: &[f64],
    w: &SpatialWeights,
    n_permutations: usize,
    seed: u64,
    alpha: f64,
    sequential: bool,
) -> Result<LisaResult> {
    if n_permutations < MIN_PERMUTATIONS {
        return Err(Error::InvalidArgument(format!(
            "n_permutations must be at least {MIN_PERMUTATIONS}, got {n_permutations}"
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let c = center(x, w)?;
    let z = c.z;
    let m2 = c.m2;
    let n = c.n;

    // Each region runs its own permutation stream: hold z_i fixed, draw the
    // neighborhood values from the remaining regions.
    let per_region = par::map_indexed_mode(n, sequential, |i: usize| {
        let deg = w.neighbors(i).len();
        let zi = z[i];
        let lag: f64 = w.neighbors(i).iter().map(|&(j, wij)| wij * z[j]).sum();
        let local = zi / m2 * lag;
        if deg == 0 {
            // Isolated region: the statistic is identically zero.
            return (local, 1.0);
        }
        let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| z[j]).collect();
        let mut rng = rng_from_seed(derive_seed(seed, i as u64));
        let mut as_extreme = 0usize;
        for _ in 0..n_permutations {
            let (drawn, _) = others.partial_shuffle(&mut rng, deg);
            let lag_sim: f64 = w
                .neighbors(i)
                .iter()
                .zip(drawn.iter())
                .map(|(&(_, wij), &v)| wij * v)
                .sum();
            if zi / m2 * lag_sim >= local {
                as_extreme += 1;
            }
        }
        // One-sided in the direction of the observed statistic.
        let tail = as_extreme.min(n_permutations - as_extreme);
        (local, (tail + 1) as f64 / (n_permutations + 1) as f64)
    });

    let mut local_i = Vec::with_capacity(n);
    let mut pseudo_p_local = Vec::with_capacity(n);
    let mut quadrant = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, &(local, p)) in per_region.iter().enumerate() {
        let lag: f64 = w.neighbors(i).iter().map(|&(j, wij)| wij * z[j]).sum();
        let q = quadrant_of(z[i], lag);
        local_i.push(local);
        pseudo_p_local.push(p);
        quadrant.push(q);
        labels.push(if p <= alpha { Some(q) } else { None });
    }
    Ok(LisaResult {
        local_i,
        quadrant,
        pseudo_p_local,
        labels,
        n_permutations,
        seed,
        alpha,
    })
}
