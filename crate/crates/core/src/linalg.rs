//! Dense complex linear algebra on small tensor-product spaces.
//!
//! Matrices are [`nalgebra::DMatrix`] over `Complex64`. Tensor products use
//! the big-endian convention: in `kron(a, b)` the index of `a` varies slowest,
//! and a multi-index `(i_0, .., i_{k-1})` over subsystems with dimensions
//! `dims` maps to `sum_j i_j * stride_j` with `stride_j = prod_{l>j} dims[l]`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[inline]
pub fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn identity(dim: usize) -> CMatrix {
    CMatrix::identity(dim, dim)
}

pub fn pauli_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
}

pub fn pauli_y() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, c64(0.0, -1.0), c64(0.0, 1.0), ZERO])
}

pub fn pauli_z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE])
}

/// Real diagonal matrix.
pub fn diag(values: &[f64]) -> CMatrix {
    CMatrix::from_diagonal(&DVector::from_iterator(
        values.len(),
        values.iter().map(|&v| c64(v, 0.0)),
    ))
}

/// Build a matrix from row-major entries, checking the entry count.
pub fn from_row_major(rows: usize, cols: usize, entries: &[Complex64]) -> Result<CMatrix> {
    if rows * cols != entries.len() {
        return Err(Error::DimensionMismatch(format!(
            "{rows}x{cols} matrix needs {} entries, got {}",
            rows * cols,
            entries.len()
        )));
    }
    Ok(CMatrix::from_row_slice(rows, cols, entries))
}

/// Kronecker product, first factor slowest.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// Kronecker product of a list of factors; the empty product is the 1x1 identity.
pub fn kron_all<'a>(factors: impl IntoIterator<Item = &'a CMatrix>) -> CMatrix {
    factors
        .into_iter()
        .fold(identity(1), |acc, f| kron(&acc, f))
}

/// Projector |v><v| onto a (not necessarily normalized) vector.
pub fn outer(v: &DVector<Complex64>) -> CMatrix {
    v * v.adjoint()
}

pub fn trace(m: &CMatrix) -> Complex64 {
    m.trace()
}

/// `tr(a b)` without forming the product.
pub fn trace_of_product(a: &CMatrix, b: &CMatrix) -> Complex64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = ZERO;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Largest elementwise deviation from Hermiticity, `max |M - M^dagger|`.
pub fn hermiticity_error(m: &CMatrix) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).scale(0.5)
}

/// Ascending eigenvalues of the Hermitian part of `m`.
pub fn eigenvalues_hermitian(m: &CMatrix) -> Vec<f64> {
    let mut ev: Vec<f64> = hermitian_part(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(m: &CMatrix) -> f64 {
    eigenvalues_hermitian(m)
        .first()
        .copied()
        .unwrap_or(f64::INFINITY)
}

/// Schatten 1-norm: the sum of singular values.
pub fn trace_norm(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().iter().sum()
}

/// Index bookkeeping for a tensor product of subsystems.
#[derive(Debug, Clone)]
pub struct Layout {
    dims: Vec<usize>,
    strides: Vec<usize>,
    total: usize,
}

impl Layout {
    pub fn new(dims: &[usize]) -> Self {
        let mut strides = vec![1; dims.len()];
        for j in (0..dims.len().saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * dims[j + 1];
        }
        Layout {
            dims: dims.to_vec(),
            strides,
            total: dims.iter().product(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Offsets of every target multi-index (targets in the given order, first
    /// slowest) and the flat indices of all configurations of the remaining
    /// subsystems with the targets set to zero.
    fn split(&self, targets: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut offsets = vec![0usize];
        for &t in targets {
            let mut next = Vec::with_capacity(offsets.len() * self.dims[t]);
            for &o in &offsets {
                for digit in 0..self.dims[t] {
                    next.push(o + digit * self.strides[t]);
                }
            }
            offsets = next;
        }
        let rest: Vec<usize> = (0..self.dims.len())
            .filter(|j| !targets.contains(j))
            .collect();
        let mut bases = vec![0usize];
        for &r in &rest {
            let mut next = Vec::with_capacity(bases.len() * self.dims[r]);
            for &b in &bases {
                for digit in 0..self.dims[r] {
                    next.push(b + digit * self.strides[r]);
                }
            }
            bases = next;
        }
        (offsets, bases)
    }

    fn check_targets(&self, targets: &[usize], op_dim: usize) -> Result<()> {
        let mut seen = vec![false; self.dims.len()];
        let mut expect = 1usize;
        for &t in targets {
            if t >= self.dims.len() || seen[t] {
                return Err(Error::DimensionMismatch(format!(
                    "invalid subsystem target list {targets:?}"
                )));
            }
            seen[t] = true;
            expect *= self.dims[t];
        }
        if expect != op_dim {
            return Err(Error::DimensionMismatch(format!(
                "operator of dimension {op_dim} applied to subsystems of total dimension {expect}"
            )));
        }
        Ok(())
    }
}

/// `(op on targets, identity elsewhere) * m`.
pub fn apply_local(m: &CMatrix, layout: &Layout, targets: &[usize], op: &CMatrix) -> Result<CMatrix> {
    if m.nrows() != layout.total() {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} rows, layout has dimension {}",
            m.nrows(),
            layout.total()
        )));
    }
    if !op.is_square() {
        return Err(Error::DimensionMismatch("local operator is not square".into()));
    }
    layout.check_targets(targets, op.nrows())?;
    let (offsets, bases) = layout.split(targets);
    let k = offsets.len();
    let rows = m.nrows();
    let src = m.as_slice();
    let mut out = CMatrix::zeros(rows, m.ncols());
    let dst = out.as_mut_slice();
    let mut gathered = vec![ZERO; k];
    for col in 0..m.ncols() {
        let base_col = col * rows;
        for &b in &bases {
            for (u, &o) in offsets.iter().enumerate() {
                gathered[u] = src[base_col + b + o];
            }
            for (u, &o) in offsets.iter().enumerate() {
                let mut acc = ZERO;
                for (v, g) in gathered.iter().enumerate() {
                    acc += op[(u, v)] * g;
                }
                dst[base_col + b + o] = acc;
            }
        }
    }
    Ok(out)
}

/// Partial trace keeping only `targets` (in the given order).
pub fn reduce_to(m: &CMatrix, layout: &Layout, targets: &[usize]) -> Result<CMatrix> {
    if m.nrows() != layout.total() || m.ncols() != layout.total() {
        return Err(Error::DimensionMismatch(
            "matrix does not match layout".into(),
        ));
    }
    let dim: usize = targets.iter().map(|&t| layout.dims[t]).product();
    layout.check_targets(targets, dim)?;
    let (offsets, bases) = layout.split(targets);
    let mut out = CMatrix::zeros(dim, dim);
    for (u, &ou) in offsets.iter().enumerate() {
        for (v, &ov) in offsets.iter().enumerate() {
            let mut acc = ZERO;
            for &b in &bases {
                acc += m[(b + ou, b + ov)];
            }
            out[(u, v)] = acc;
        }
    }
    Ok(out)
}

/// Trace out a trailing factor of dimension `last`, keeping the leading part.
pub fn trace_out_last(m: &CMatrix, last: usize) -> CMatrix {
    let lead = m.nrows() / last;
    CMatrix::from_fn(lead, lead, |i, j| {
        (0..last).map(|e| m[(i * last + e, j * last + e)]).sum()
    })
}

/// Trace out the leading part, keeping a trailing factor of dimension `last`.
pub fn keep_last(m: &CMatrix, last: usize) -> CMatrix {
    let lead = m.nrows() / last;
    CMatrix::from_fn(last, last, |e, f| {
        (0..lead).map(|i| m[(i * last + e, i * last + f)]).sum()
    })
}

/// Reorder tensor factors: subsystem `order[j]` of the input becomes factor `j`
/// of the output.
pub fn permute_subsystems(m: &CMatrix, dims: &[usize], order: &[usize]) -> Result<CMatrix> {
    let layout = Layout::new(dims);
    if m.nrows() != layout.total() || m.ncols() != layout.total() {
        return Err(Error::DimensionMismatch("matrix does not match layout".into()));
    }
    let mut seen = vec![false; dims.len()];
    if order.len() != dims.len() || order.iter().any(|&o| o >= dims.len() || std::mem::replace(&mut seen[o], true)) {
        return Err(Error::DimensionMismatch(format!("{order:?} is not a permutation")));
    }
    let new_dims: Vec<usize> = order.iter().map(|&o| dims[o]).collect();
    let new_layout = Layout::new(&new_dims);
    // map[new index] = old index
    let mut map = vec![0usize; layout.total()];
    let mut digits = vec![0usize; dims.len()];
    for (new_idx, slot) in map.iter_mut().enumerate() {
        let mut rem = new_idx;
        for j in 0..dims.len() {
            digits[j] = rem / new_layout.strides[j];
            rem %= new_layout.strides[j];
        }
        *slot = order
            .iter()
            .zip(&digits)
            .map(|(&o, &d)| d * layout.strides[o])
            .sum();
    }
    Ok(CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(map[i], map[j])]))
}

fn gaussian_complex<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    c64(re, im)
}

/// `rows x cols` matrix of i.i.d. standard complex Gaussians.
pub fn ginibre<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    // Row-major fill keeps the draw order independent of storage layout.
    let entries: Vec<Complex64> = (0..rows * cols).map(|_| gaussian_complex(rng)).collect();
    CMatrix::from_row_slice(rows, cols, &entries)
}

/// Ginibre-induced density matrix `G G^dagger / tr(G G^dagger)` with `G` of shape `dim x rank`.
pub fn random_density<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> CMatrix {
    let g = ginibre(dim, rank.max(1), rng);
    let rho = &g * g.adjoint();
    let tr = rho.trace().re;
    rho.unscale(tr)
}

/// Haar-random unitary from the QR decomposition of a Ginibre matrix, with
/// the phases of `R`'s diagonal absorbed into `Q`.
pub fn random_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
    let qr = ginibre(dim, dim, rng).qr();
    let (mut q, r) = qr.unpack();
    for j in 0..dim {
        let d = r[(j, j)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { ONE };
        for i in 0..dim {
            q[(i, j)] *= phase;
        }
    }
    q
}

/// Random Hermitian matrix `U diag(lambda) U^dagger` with eigenvalues uniform in `[lo, hi]`.
pub fn random_hermitian<R: Rng + ?Sized>(dim: usize, lo: f64, hi: f64, rng: &mut R) -> CMatrix {
    let spectrum: Vec<f64> = (0..dim).map(|_| rng.random_range(lo..=hi)).collect();
    let u = random_unitary(dim, rng);
    let h = &u * diag(&spectrum) * u.adjoint();
    hermitian_part(&h)
}
