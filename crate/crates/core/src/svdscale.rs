//! Scale separation by truncated SVD of the folded sample matrix.
//!
//! The fine-grid samples are folded into an `n × m` matrix (rows: position
//! inside a macro element, columns: macro element). Left singular vectors
//! are micro profiles over the element-local coordinate; the right singular
//! vectors scaled by their singular value are macro amplitudes over the
//! elements.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, numeric_err, shape_err, Error, Result};
use crate::linalg::DenseMatrix;
use crate::mesh::MultiscaleMesh;
use crate::scalar::Real;

/// Relative off-diagonal Gram tolerance for the Jacobi sweeps.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 60;

/// Thin SVD `A = left · diag(σ) · rightᵀ` with `r = min(rows, cols)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SvdDecomposition<T> {
    /// `rows × r`, orthonormal columns.
    pub left: DenseMatrix<T>,
    /// Nonincreasing, nonnegative.
    pub singular_values: Vec<T>,
    /// `cols × r`, orthonormal columns.
    pub right: DenseMatrix<T>,
}

impl<T: Real> SvdDecomposition<T> {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn left_vector(&self, k: usize) -> Vec<T> {
        self.left.column(k)
    }

    pub fn right_vector(&self, k: usize) -> Vec<T> {
        self.right.column(k)
    }

    /// Keeps the leading `t` triplets.
    pub fn truncate(&self, t: usize) -> Result<Self> {
        if t < 1 || t > self.rank() {
            return Err(domain_err!("truncation rank {t} outside 1..={}", self.rank()));
        }
        let take = |m: &DenseMatrix<T>| DenseMatrix::from_fn(m.rows(), t, |i, j| m[(i, j)]);
        Ok(Self {
            left: take(&self.left),
            singular_values: self.singular_values[..t].to_vec(),
            right: take(&self.right),
        })
    }

    /// `left · diag(σ) · rightᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix<T> {
        let (rows, cols) = (self.left.rows(), self.right.rows());
        let mut out = DenseMatrix::zeros(rows, cols);
        for k in 0..self.rank() {
            add_outer(&mut out, self.singular_values[k], &self.left, &self.right, k);
        }
        out
    }
}

fn add_outer<T: Real>(out: &mut DenseMatrix<T>, sigma: T, left: &DenseMatrix<T>, right: &DenseMatrix<T>, k: usize) {
    if sigma == T::zero() {
        return;
    }
    for i in 0..out.rows() {
        let u = sigma * left[(i, k)];
        for j in 0..out.cols() {
            out[(i, j)] += u * right[(j, k)];
        }
    }
}

/// Full thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Sweeps until every column pair satisfies
/// `|a_p·a_q| ≤ 1e-12 · ‖a_p‖‖a_q‖`. Each left singular vector is
/// sign-normalized so that its first nonzero entry is positive.
pub fn svd<T: Real>(matrix: &DenseMatrix<T>) -> Result<SvdDecomposition<T>> {
    let (rows, cols) = matrix.shape();
    if rows == 0 || cols == 0 {
        return Err(domain_err!("svd of an empty {rows}x{cols} matrix"));
    }
    if !matrix.is_finite() {
        return Err(numeric_err!("svd input contains non-finite entries"));
    }
    if rows >= cols {
        jacobi_tall(matrix)
    } else {
        let t = jacobi_tall(&matrix.transpose())?;
        let mut dec = SvdDecomposition { left: t.right, singular_values: t.singular_values, right: t.left };
        canonicalize_signs(&mut dec);
        Ok(dec)
    }
}

/// One-sided Jacobi on a matrix with `rows ≥ cols`, orthogonalizing columns.
fn jacobi_tall<T: Real>(matrix: &DenseMatrix<T>) -> Result<SvdDecomposition<T>> {
    let (rows, cols) = matrix.shape();
    let mut a: Vec<Vec<T>> = (0..cols).map(|j| matrix.column(j)).collect();
    let mut v: Vec<Vec<T>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let tol = T::lit(JACOBI_TOLERANCE);
    let dot = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>();

    // Columns below this squared norm are numerically zero and never rotated.
    let floor = a.iter().map(|c| dot(c, c)).sum::<T>() * T::epsilon() * T::epsilon();
    let mut converged = cols < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha <= floor || beta <= floor {
                    continue;
                }
                if gamma.abs() <= tol * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(numeric_err!("one-sided Jacobi did not converge within {JACOBI_MAX_SWEEPS} sweeps"));
    }

    let mut sigma: Vec<T> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap_or(std::cmp::Ordering::Equal));
    let smax = sigma[order[0]];
    let negligible = smax * T::count(rows.max(cols)) * T::epsilon();

    let mut left_cols: Vec<Vec<T>> = Vec::with_capacity(cols);
    let mut right_cols: Vec<Vec<T>> = Vec::with_capacity(cols);
    let mut sorted_sigma = Vec::with_capacity(cols);
    for &j in &order {
        let s = sigma[j];
        let u = if s > negligible && s > T::zero() {
            a[j].iter().map(|&x| x / s).collect()
        } else {
            complete_basis(&left_cols, &a[j], rows)
        };
        left_cols.push(u);
        right_cols.push(v[j].clone());
        sorted_sigma.push(s);
    }
    sigma.clear();

    let left = DenseMatrix::from_fn(rows, cols, |i, k| left_cols[k][i]);
    let right = DenseMatrix::from_fn(cols, cols, |i, k| right_cols[k][i]);
    let mut dec = SvdDecomposition { left, singular_values: sorted_sigma, right };
    canonicalize_signs(&mut dec);
    Ok(dec)
}

#[inline]
fn rotate<T: Real>(x: &mut [T], y: &mut [T], c: T, s: T) {
    for (p, q) in x.iter_mut().zip(y.iter_mut()) {
        let (xp, yq) = (*p, *q);
        *p = c * xp - s * yq;
        *q = s * xp + c * yq;
    }
}

/// Unit vector orthogonal to `basis`, starting from `hint` and falling back
/// to coordinate axes.
fn complete_basis<T: Real>(basis: &[Vec<T>], hint: &[T], rows: usize) -> Vec<T> {
    let dot = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>();
    let project_out = |mut w: Vec<T>| {
        for _ in 0..2 {
            for b in basis {
                let d = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(wi, &bi)| *wi -= d * bi);
            }
        }
        w
    };
    let hint_norm = dot(hint, hint).sqrt();
    let mut candidates: Vec<Vec<T>> = Vec::new();
    if hint_norm > T::zero() {
        candidates.push(hint.iter().map(|&x| x / hint_norm).collect());
    }
    candidates.extend((0..rows).map(|i| (0..rows).map(|k| if k == i { T::one() } else { T::zero() }).collect()));
    for c in candidates {
        let w = project_out(c);
        let n = dot(&w, &w).sqrt();
        if n > T::lit(0.5) {
            return w.into_iter().map(|x| x / n).collect();
        }
    }
    unreachable!("fewer basis vectors than dimensions always leaves an axis to complete with")
}

/// Flips each triplet so the first nonzero entry of its left vector is positive.
fn canonicalize_signs<T: Real>(dec: &mut SvdDecomposition<T>) {
    for k in 0..dec.rank() {
        let first = (0..dec.left.rows()).map(|i| dec.left[(i, k)]).find(|&x| x != T::zero());
        if first.is_some_and(|x| x < T::zero()) {
            for i in 0..dec.left.rows() {
                dec.left[(i, k)] = -dec.left[(i, k)];
            }
            for i in 0..dec.right.rows() {
                dec.right[(i, k)] = -dec.right[(i, k)];
            }
        }
    }
}

/// Mode-selected decomposition of a fine-grid function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MultiscaleDecomposition<T> {
    /// Decomposition truncated to the selected number of modes.
    pub decomposition: SvdDecomposition<T>,
    /// Selected number of modes `T`.
    pub modes: usize,
    /// Fine-grid reconstruction MSE for truncation ranks `1..=modes`.
    pub mse_by_rank: Vec<T>,
    /// `false` when even the full rank misses the threshold.
    pub threshold_reached: bool,
    /// Element-local offsets of the fine nodes (row coordinate of the folded matrix).
    pub local_coordinates: Vec<T>,
    /// Centers of the macro elements (column coordinate).
    pub macro_centers: Vec<T>,
}

impl<T: Real> MultiscaleDecomposition<T> {
    /// Micro profile of mode `k`: left singular vector `k` over the local coordinate.
    pub fn micro_component(&self, k: usize) -> Vec<T> {
        self.decomposition.left_vector(k)
    }

    /// Macro amplitude of mode `k`: `σ_k` times right singular vector `k`.
    pub fn macro_component(&self, k: usize) -> Vec<T> {
        let s = self.decomposition.singular_values[k];
        self.decomposition.right_vector(k).into_iter().map(|v| v * s).collect()
    }

    pub fn final_mse(&self) -> T {
        *self.mse_by_rank.last().expect("at least one mode")
    }
}

/// Folds `fine_values`, decomposes, and keeps the smallest number of modes
/// whose fine-grid reconstruction MSE is below `mse_threshold`.
pub fn multiscale_decompose<T: Real>(
    fine_values: &[T],
    mesh: &MultiscaleMesh<T>,
    mse_threshold: T,
) -> Result<MultiscaleDecomposition<T>> {
    let folded = mesh.fold(fine_values)?;
    let full = svd(&folded)?;
    let count = T::count(mesh.fine_count());
    let mut approx = DenseMatrix::zeros(folded.rows(), folded.cols());
    let mut mse_by_rank = Vec::new();
    let mut selected = full.rank();
    let mut reached = false;
    for k in 0..full.rank() {
        add_outer(&mut approx, full.singular_values[k], &full.left, &full.right, k);
        let err = folded.sub(&approx)?.as_slice().iter().map(|&d| d * d).sum::<T>() / count;
        mse_by_rank.push(err);
        if err < mse_threshold {
            selected = k + 1;
            reached = true;
            break;
        }
    }
    Ok(MultiscaleDecomposition {
        decomposition: full.truncate(selected)?,
        modes: selected,
        mse_by_rank,
        threshold_reached: reached,
        local_coordinates: mesh.local_offsets(),
        macro_centers: mesh.element_centers(),
    })
}

/// Linear interpolation of scattered samples onto the mesh's fine nodes.
/// Samples sharing an `x` are averaged.
pub fn interpolate_to_grid<T: Real>(samples: &[(T, T)], mesh: &MultiscaleMesh<T>) -> Result<Vec<T>> {
    if samples.iter().any(|(x, v)| !x.is_finite() || !v.is_finite()) {
        return Err(numeric_err!("non-finite sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
    let mut merged: Vec<(T, T)> = Vec::with_capacity(sorted.len());
    let mut i = 0;
    while i < sorted.len() {
        let x = sorted[i].0;
        let mut sum = T::zero();
        let mut count = 0usize;
        while i < sorted.len() && sorted[i].0 == x {
            sum += sorted[i].1;
            count += 1;
            i += 1;
        }
        merged.push((x, sum / T::count(count)));
    }
    if merged.len() < 2 {
        return Err(domain_err!("need samples at two or more distinct positions"));
    }
    let (lo, hi) = (merged[0].0, merged[merged.len() - 1].0);
    mesh.fine_nodes()
        .iter()
        .map(|&x| {
            if x < lo || x > hi {
                return Err(Error::Domain(format!("fine node {x} requires extrapolation outside [{lo}, {hi}]")));
            }
            let k = merged.partition_point(|&(sx, _)| sx <= x);
            if k == 0 {
                return Ok(merged[0].1);
            }
            let (x0, v0) = merged[k - 1];
            if x0 == x || k == merged.len() {
                return Ok(v0);
            }
            let (x1, v1) = merged[k];
            let w = (x - x0) / (x1 - x0);
            Ok(v0 + (v1 - v0) * w)
        })
        .collect()
}

/// Maximum entry of `|QᵀQ − I|`.
pub fn orthonormality_defect<T: Real>(q: &DenseMatrix<T>) -> Result<T> {
    let g = q.transpose().matmul(q)?;
    let id = DenseMatrix::identity(g.rows());
    Ok(g.sub(&id)?.max_abs())
}

/// Checks the structural invariants of a decomposition against its source.
pub fn check_decomposition<T: Real>(source: &DenseMatrix<T>, dec: &SvdDecomposition<T>) -> Result<()> {
    if dec.left.rows() != source.rows() || dec.right.rows() != source.cols() {
        return Err(shape_err!("decomposition does not match a {:?} matrix", source.shape()));
    }
    if dec.singular_values.windows(2).any(|w| w[1] > w[0]) || dec.singular_values.iter().any(|&s| s < T::zero()) {
        return Err(numeric_err!("singular values not sorted nonincreasing and nonnegative"));
    }
    Ok(())
}
