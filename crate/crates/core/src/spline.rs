//! B-splines on uniform knot grids.
//!
//! A [`KnotGrid`] covers `[range_min, range_max]` with `G` intervals and
//! extends `k` further knots past each end at the same spacing, so a degree-`k`
//! spline has `G + k` basis functions and fades smoothly to zero outside the
//! range instead of being clamped.
//!
//! The derivative at an exact knot is the right limit, following the
//! half-open `[t_j, t_{j+1})` span convention used throughout.

use nalgebra::DMatrix;

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest supported spline order (degree + 1).
pub const MAX_ORDER: usize = 8;

/// Uniform knot vector shared by a bank of splines.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotGrid {
    range_min: f64,
    range_max: f64,
    grid_size: usize,
    degree: usize,
    knots: Vec<f64>,
}

impl KnotGrid {
    pub fn uniform(range_min: f64, range_max: f64, grid_size: usize, degree: usize) -> Result<Self> {
        if grid_size == 0 {
            return Err(Error::Config("grid size must be at least 1".into()));
        }
        if !range_min.is_finite() || !range_max.is_finite() || range_min >= range_max {
            return Err(Error::Config(format!(
                "grid range [{range_min}, {range_max}] must be finite and increasing"
            )));
        }
        if degree + 1 > MAX_ORDER {
            return Err(Error::Config(format!(
                "spline degree {degree} exceeds the supported maximum {}",
                MAX_ORDER - 1
            )));
        }
        let mut grid = Self {
            range_min,
            range_max,
            grid_size,
            degree,
            knots: Vec::new(),
        };
        grid.knots = (0..grid_size + 2 * degree + 1).map(|j| grid.knot(j as isize)).collect();
        Ok(grid)
    }

    pub fn range_min(&self) -> f64 {
        self.range_min
    }

    pub fn range_max(&self) -> f64 {
        self.range_max
    }

    pub fn range(&self) -> (f64, f64) {
        (self.range_min, self.range_max)
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// `G + k`.
    pub fn basis_count(&self) -> usize {
        self.grid_size + self.degree
    }

    pub fn spacing(&self) -> f64 {
        (self.range_max - self.range_min) / self.grid_size as f64
    }

    /// Knot `j` of the infinite uniform sequence; `0..=G+2k` are the stored knots.
    pub fn knot(&self, j: isize) -> f64 {
        let offset = (j - self.degree as isize) as f64;
        self.range_min + (self.range_max - self.range_min) * offset / self.grid_size as f64
    }

    /// Half-open interval outside of which every basis function vanishes.
    pub fn support(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    pub fn in_support(&self, x: f64) -> bool {
        let (lo, hi) = self.support();
        x >= lo && x < hi
    }

    /// The `k + 1` possibly-nonzero basis values (and derivatives) at `x`.
    /// Returns `None` outside the support.
    pub fn local_basis(&self, x: f64) -> Option<LocalBasis> {
        if !self.in_support(x) {
            return None;
        }
        let k = self.degree;
        let h = self.spacing();
        let mut span = ((x - self.range_min) / h).floor() as isize + k as isize;
        while self.knot(span) > x {
            span -= 1;
        }
        while self.knot(span + 1) <= x {
            span += 1;
        }

        // Cox–de Boor recursion, evaluated on the k+1 functions alive in the span.
        let mut n = [0.0; MAX_ORDER];
        let mut lower = [0.0; MAX_ORDER];
        let mut left = [0.0; MAX_ORDER];
        let mut right = [0.0; MAX_ORDER];
        n[0] = 1.0;
        for j in 1..=k {
            if j == k {
                lower[..k].copy_from_slice(&n[..k]);
            }
            left[j] = x - self.knot(span + 1 - j as isize);
            right[j] = self.knot(span + j as isize) - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }

        let mut derivs = [0.0; MAX_ORDER];
        if k > 0 {
            for (r, d) in derivs.iter_mut().enumerate().take(k + 1) {
                let a = if r >= 1 { lower[r - 1] } else { 0.0 };
                let b = if r < k { lower[r] } else { 0.0 };
                *d = (a - b) / h;
            }
        }

        let mut local = LocalBasis {
            first: span - k as isize,
            order: k + 1,
            values: n,
            derivs,
        };
        // Functions indexed outside 0..G+k are not part of this grid.
        let count = self.basis_count() as isize;
        for r in 0..=k {
            let idx = local.first + r as isize;
            if idx < 0 || idx >= count {
                local.values[r] = 0.0;
                local.derivs[r] = 0.0;
            }
        }
        Some(local)
    }
}

/// Basis functions `first ..= first + k` evaluated at one point.
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis {
    pub first: isize,
    order: usize,
    pub values: [f64; MAX_ORDER],
    pub derivs: [f64; MAX_ORDER],
}

impl LocalBasis {
    pub fn order(&self) -> usize {
        self.order
    }

    /// `(basis index, value, derivative)` for entries that belong to a grid
    /// with `count` basis functions.
    pub fn entries(&self, count: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (0..self.order).filter_map(move |r| {
            let idx = self.first + r as isize;
            (idx >= 0 && (idx as usize) < count).then(|| (idx as usize, self.values[r], self.derivs[r]))
        })
    }
}

/// Spline coefficients `c_i`, one per basis function.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineCoeffs(pub Vec<f64>);

impl SplineCoeffs {
    pub fn zeros(grid: &KnotGrid) -> Self {
        Self(vec![0.0; grid.basis_count()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn check(&self, grid: &KnotGrid) -> Result<()> {
        if self.0.len() != grid.basis_count() {
            return Err(Error::Contract(format!(
                "{} spline coefficients for a grid with {} basis functions",
                self.0.len(),
                grid.basis_count()
            )));
        }
        Ok(())
    }
}

/// All `G + k` basis values `B_i(x)`.
pub fn bspline_basis(grid: &KnotGrid, x: f64) -> Vec<f64> {
    let count = grid.basis_count();
    let mut out = vec![0.0; count];
    if let Some(local) = grid.local_basis(x) {
        for (i, v, _) in local.entries(count) {
            out[i] = v;
        }
    }
    out
}

/// `Σ c_i B_i(x)` for a single point; no length check on `coeffs`.
pub fn spline_value(coeffs: &[f64], grid: &KnotGrid, x: f64) -> f64 {
    grid.local_basis(x).map_or(0.0, |local| {
        local.entries(coeffs.len()).map(|(i, v, _)| coeffs[i] * v).sum()
    })
}

/// `d/dx Σ c_i B_i(x)`.
pub fn spline_derivative(coeffs: &[f64], grid: &KnotGrid, x: f64) -> f64 {
    grid.local_basis(x).map_or(0.0, |local| {
        local.entries(coeffs.len()).map(|(i, _, d)| coeffs[i] * d).sum()
    })
}

/// Elementwise spline evaluation.
pub fn spline_eval(coeffs: &SplineCoeffs, grid: &KnotGrid, x: &Tensor) -> Result<Tensor> {
    coeffs.check(grid)?;
    Ok(x.map(|v| spline_value(&coeffs.0, grid, v)))
}

impl Tape {
    /// Differentiable `Σ c_i B_i(x)` applied elementwise to `x`; `coeffs` is a
    /// 1-D tensor of length `G + k`.
    pub fn spline(&mut self, coeffs: Var, grid: &KnotGrid, x: Var) -> Result<Var> {
        let c = self.value(coeffs);
        if c.len() != grid.basis_count() {
            return Err(Error::Contract(format!(
                "{} spline coefficients for a grid with {} basis functions",
                c.len(),
                grid.basis_count()
            )));
        }
        let out = self.value(x).map(|v| spline_value(c.data(), grid, v));
        Ok(self.push(Box::new(SplineOp { grid: grid.clone() }), &[coeffs, x], out))
    }
}

struct SplineOp {
    grid: KnotGrid,
}

impl Op for SplineOp {
    fn name(&self) -> &'static str {
        "spline"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (c, x) = (inputs[0].data(), inputs[1].data());
        let count = c.len();
        let mut gc = vec![0.0; count];
        let mut gx = vec![0.0; x.len()];
        for (j, (&xv, &gv)) in x.iter().zip(g).enumerate() {
            if let Some(local) = self.grid.local_basis(xv) {
                for (i, b, d) in local.entries(count) {
                    gc[i] += gv * b;
                    gx[j] += gv * c[i] * d;
                }
            }
        }
        vec![needs[0].then_some(gc), needs[1].then_some(gx)]
    }
}

/// Dense design matrix `A[j, i] = B_i(x_j)`.
fn design_matrix(grid: &KnotGrid, xs: &[f64]) -> DMatrix<f64> {
    let count = grid.basis_count();
    let mut a = DMatrix::zeros(xs.len(), count);
    for (row, &x) in xs.iter().enumerate() {
        if let Some(local) = grid.local_basis(x) {
            for (i, v, _) in local.entries(count) {
                a[(row, i)] = v;
            }
        }
    }
    a
}

const RANK_RTOL: f64 = 1e-10;

/// Least-squares solve via SVD; fails if `a` lacks full column rank.
fn solve_full_rank(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cols = a.ncols();
    if a.nrows() < cols {
        return Err(Error::Singular { rank: a.nrows(), cols });
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * RANK_RTOL;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < cols || smax == 0.0 {
        return Err(Error::Singular { rank, cols });
    }
    svd.solve(&b, tol)
        .map_err(|e| Error::Contract(format!("svd solve: {e}")))
}

/// Coefficients minimizing `Σ (spline(x_j) − y_j)²`.
pub fn fit_spline_to_function(grid: &KnotGrid, samples: &[(f64, f64)]) -> Result<SplineCoeffs> {
    let xs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let a = design_matrix(grid, &xs);
    let b = DMatrix::from_iterator(samples.len(), 1, samples.iter().map(|s| s.1));
    let c = solve_full_rank(a, b)?;
    Ok(SplineCoeffs(c.iter().copied().collect()))
}

/// Refits a spline onto a wider grid.
///
/// The new coefficients minimize `Σ_j (spline_new(x_j) − spline_old(x_j))²`
/// over `sample_xs`, the empirical stand-in for the input distribution. Basis
/// functions that no sample touches are left at zero; the remaining columns
/// must have full rank.
pub fn extend_grid(
    old_grid: &KnotGrid,
    old_coeffs: &SplineCoeffs,
    new_range: (f64, f64),
    new_grid_size: usize,
    sample_xs: &[f64],
) -> Result<(KnotGrid, SplineCoeffs)> {
    let (grid, mut coeffs) =
        extend_grid_batch(old_grid, &[old_coeffs.as_slice()], new_range, new_grid_size, sample_xs)?;
    Ok((grid, coeffs.remove(0)))
}

/// [`extend_grid`] for many splines sharing one grid; the least-squares
/// system is factored once.
pub fn extend_grid_batch(
    old_grid: &KnotGrid,
    old_coeffs: &[&[f64]],
    new_range: (f64, f64),
    new_grid_size: usize,
    sample_xs: &[f64],
) -> Result<(KnotGrid, Vec<SplineCoeffs>)> {
    let old_count = old_grid.basis_count();
    for c in old_coeffs {
        if c.len() != old_count {
            return Err(Error::Contract(format!(
                "{} spline coefficients for a grid with {old_count} basis functions",
                c.len()
            )));
        }
    }
    let (lo, hi) = new_range;
    if lo > old_grid.range_min() || hi < old_grid.range_max() {
        return Err(Error::Config(format!(
            "new range [{lo}, {hi}] does not contain the old range [{}, {}]",
            old_grid.range_min(),
            old_grid.range_max()
        )));
    }
    let new_grid = KnotGrid::uniform(lo, hi, new_grid_size, old_grid.degree())?;
    if sample_xs.is_empty() {
        return Err(Error::Singular {
            rank: 0,
            cols: new_grid.basis_count(),
        });
    }

    let a = design_matrix(&new_grid, sample_xs);
    let masses: Vec<f64> = a.column_iter().map(|col| col.norm_squared()).collect();
    let max_mass = masses.iter().copied().fold(0.0, f64::max);
    let active: Vec<usize> = (0..masses.len()).filter(|&i| masses[i] > max_mass * 1e-12).collect();
    if active.is_empty() {
        return Err(Error::Singular {
            rank: 0,
            cols: new_grid.basis_count(),
        });
    }
    let reduced = a.select_columns(active.iter());
    let old_basis = design_matrix(old_grid, sample_xs);
    let old = DMatrix::from_fn(old_count, old_coeffs.len(), |i, s| old_coeffs[s][i]);
    let targets = old_basis * old;
    let solution = solve_full_rank(reduced, targets)?;

    let fitted = (0..old_coeffs.len())
        .map(|s| {
            let mut coeffs = vec![0.0; new_grid.basis_count()];
            for (slot, &i) in active.iter().enumerate() {
                coeffs[i] = solution[(slot, s)];
            }
            SplineCoeffs(coeffs)
        })
        .collect();
    Ok((new_grid, fitted))
}
