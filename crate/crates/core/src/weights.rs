//! Spatial weights over patch-grid coordinates.
//!
//! A [`SpatialWeights`] matrix encodes which grid cells count as neighbors of
//! which, with one weight per directed pair. All constructors row-standardize,
//! so each non-empty row sums to one and the spatial lag of a variable is the
//! average of its values over the neighbors. Weights are stored as sparse
//! neighbor lists; images can reach tens of thousands of patches and a dense
//! matrix is never materialized outside of test oracles.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// Integer patch-grid positions, one per region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridCoords {
    positions: Vec<(u32, u32)>,
}

impl GridCoords {
    /// Validates that positions are non-empty and pairwise distinct.
    pub fn new(positions: Vec<(u32, u32)>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidGrid("no coordinates".into()));
        }
        let mut seen = HashSet::with_capacity(positions.len());
        for &(r, c) in &positions {
            if !seen.insert((r, c)) {
                return Err(Error::InvalidGrid(format!(
                    "duplicate coordinate ({r}, {c})"
                )));
            }
        }
        Ok(GridCoords { positions })
    }

    /// Full `rows x cols` lattice in row-major order.
    pub fn full_grid(rows: u32, cols: u32) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidGrid("empty lattice".into()));
        }
        let mut positions = Vec::with_capacity(rows as usize * cols as usize);
        for r in 0..rows {
            for c in 0..cols {
                positions.push((r, c));
            }
        }
        Ok(GridCoords { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[(u32, u32)] {
        &self.positions
    }
}

/// How a weights matrix was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightsKind {
    Knn(usize),
    Queen,
    Rook,
}

/// Sparse row-standardized spatial weights.
#[derive(Debug, Clone)]
pub struct SpatialWeights {
    n: usize,
    /// Per region: `(neighbor index, weight)` sorted by neighbor index.
    rows: Vec<Vec<(usize, f64)>>,
    standardized: bool,
    kind: WeightsKind,
}

impl SpatialWeights {
    /// k-nearest-neighbor weights under Euclidean distance on the grid.
    ///
    /// Distance ties are broken by ascending region index, so the neighbor
    /// sets are deterministic. Rows are standardized to weight `1/k`.
    pub fn knn(coords: &GridCoords, k: usize) -> Result<Self> {
        let n = coords.len();
        if n < 2 {
            return Err(Error::InvalidNeighborhood(format!(
                "need at least 2 regions, got {n}"
            )));
        }
        if k == 0 {
            return Err(Error::InvalidNeighborhood("k must be positive".into()));
        }
        if k >= n {
            return Err(Error::InvalidNeighborhood(format!(
                "k = {k} but only {} other regions exist",
                n - 1
            )));
        }
        let pts = coords.positions();
        let mut rows = Vec::with_capacity(n);
        let mut cand: Vec<(u64, usize)> = Vec::with_capacity(n - 1);
        for i in 0..n {
            cand.clear();
            let (ri, ci) = pts[i];
            for (j, &(rj, cj)) in pts.iter().enumerate() {
                if j == i {
                    continue;
                }
                let dr = i64::from(ri) - i64::from(rj);
                let dc = i64::from(ci) - i64::from(cj);
                cand.push(((dr * dr + dc * dc) as u64, j));
            }
            // (distance, index) keys are distinct, so the k smallest form a
            // unique set and ties at equal distance resolve to lower indices.
            if cand.len() > k {
                cand.select_nth_unstable(k - 1);
                cand.truncate(k);
            }
            let mut chosen: Vec<(usize, f64)> = cand.iter().map(|&(_, j)| (j, 1.0)).collect();
            chosen.sort_unstable_by_key(|&(j, _)| j);
            rows.push(chosen);
        }
        let mut w = SpatialWeights {
            n,
            rows,
            standardized: false,
            kind: WeightsKind::Knn(k),
        };
        w.row_standardize();
        Ok(w)
    }

    /// Queen contiguity: neighbors are cells at Chebyshev distance 1
    /// (8-connectivity). Cells without contact keep an empty row.
    pub fn queen(coords: &GridCoords) -> Result<Self> {
        Self::contiguity(coords, WeightsKind::Queen)
    }

    /// Rook contiguity: neighbors are cells at Manhattan distance 1
    /// (4-connectivity). Cells without contact keep an empty row.
    pub fn rook(coords: &GridCoords) -> Result<Self> {
        Self::contiguity(coords, WeightsKind::Rook)
    }

    fn contiguity(coords: &GridCoords, kind: WeightsKind) -> Result<Self> {
        let n = coords.len();
        if n < 2 {
            return Err(Error::InvalidNeighborhood(format!(
                "need at least 2 regions, got {n}"
            )));
        }
        let pts = coords.positions();
        let index: HashMap<(u32, u32), usize> =
            pts.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let offsets: &[(i64, i64)] = match kind {
            WeightsKind::Rook => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            WeightsKind::Queen => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
            WeightsKind::Knn(_) => unreachable!(),
        };
        let mut rows = Vec::with_capacity(n);
        for &(r, c) in pts {
            let mut row: Vec<(usize, f64)> = Vec::new();
            for &(dr, dc) in offsets {
                let nr = i64::from(r) + dr;
                let nc = i64::from(c) + dc;
                if nr < 0 || nc < 0 {
                    continue;
                }
                if let Some(&j) = index.get(&(nr as u32, nc as u32)) {
                    row.push((j, 1.0));
                }
            }
            row.sort_unstable_by_key(|&(j, _)| j);
            rows.push(row);
        }
        let mut w = SpatialWeights {
            n,
            rows,
            standardized: false,
            kind,
        };
        w.row_standardize();
        Ok(w)
    }

    fn row_standardize(&mut self) {
        for row in &mut self.rows {
            let sum: f64 = row.iter().map(|&(_, w)| w).sum();
            if sum > 0.0 {
                for entry in row.iter_mut() {
                    entry.1 /= sum;
                }
            }
        }
        self.standardized = true;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn construction(&self) -> WeightsKind {
        self.kind
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    /// Neighbors of region `i` as `(index, weight)` pairs sorted by index.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Neighbor index set of region `i` (weights ignored).
    pub fn neighbor_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows[i].iter().map(|&(j, _)| j)
    }

    /// Sum of all weights. Equals the number of non-isolate rows for a
    /// standardized matrix.
    pub fn s0(&self) -> f64 {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(_, w)| w).sum::<f64>())
            .sum()
    }

    /// Trace of `W^T W`, i.e. the sum of squared weights.
    pub fn tr_wtw(&self) -> f64 {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(_, w)| w * w).sum::<f64>())
            .sum()
    }

    /// Spatially lagged vector: `(Wx)_i = sum_j w_ij x_j`.
    ///
    /// Isolate rows lag to 0.
    pub fn lag(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::DimensionError {
                expected: self.n,
                got: x.len(),
            });
        }
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * x[j]).sum())
            .collect())
    }

    /// Lag applied column-wise to an `n x p` matrix.
    pub fn lag_matrix(&self, x: &nalgebra::DMatrix<f64>) -> Result<nalgebra::DMatrix<f64>> {
        if x.nrows() != self.n {
            return Err(Error::DimensionError {
                expected: self.n,
                got: x.nrows(),
            });
        }
        let mut out = nalgebra::DMatrix::zeros(x.nrows(), x.ncols());
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                for c in 0..x.ncols() {
                    out[(i, c)] += w * x[(j, c)];
                }
            }
        }
        Ok(out)
    }

    /// Solve `(I - rho W) x = b` by fixed-point iteration.
    ///
    /// Converges geometrically for `|rho| < 1` because the standardized
    /// weights have unit row sums. The iteration stops when the system
    /// residual drops below `tol * max(1, ||b||_inf)`.
    pub fn solve_spatial_filter(&self, rho: f64, b: &[f64], tol: f64) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::DimensionError {
                expected: self.n,
                got: b.len(),
            });
        }
        if rho.abs() >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "spatial parameter {rho} outside (-1, 1)"
            )));
        }
        if rho == 0.0 {
            return Ok(b.to_vec());
        }
        let scale = b.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let mut x = b.to_vec();
        const MAX_ITER: usize = 100_000;
        for _ in 0..MAX_ITER {
            let wx = self.lag(&x)?;
            let mut max_resid = 0.0_f64;
            for i in 0..self.n {
                let next = b[i] + rho * wx[i];
                max_resid = max_resid.max((next - x[i]).abs());
                x[i] = next;
            }
            if max_resid <= tol * scale {
                return Ok(x);
            }
        }
        Err(Error::NumericalFailure(format!(
            "spatial filter solve did not reach tolerance {tol} in {MAX_ITER} iterations"
        )))
    }
}
