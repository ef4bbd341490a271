//! Block-tridiagonal operators and finite-difference helpers.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("singular pivot block at index {0}")]
    SingularBlock(usize),
    #[error("singular matrix")]
    Singular,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Symmetric block-tridiagonal operator
/// `v_i = B_{i−1} u_{i−1} + A_i u_i + B_iᵀ u_{i+1}`.
///
/// `lower[i]` is `B_i`, the block in row `i+1`, column `i`. When `cyclic` is
/// set there is one extra `B` coupling the last block back to the first.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonal {
    pub diag: Vec<DMatrix<f64>>,
    pub lower: Vec<DMatrix<f64>>,
    pub cyclic: bool,
}

impl BlockTridiagonal {
    pub fn new(diag: Vec<DMatrix<f64>>, lower: Vec<DMatrix<f64>>, cyclic: bool) -> Result<Self, LinalgError> {
        let n = diag.len();
        let expected = if cyclic { n } else { n.saturating_sub(1) };
        if lower.len() != expected {
            return Err(LinalgError::Dimension(format!("expected {expected} off-diagonal blocks, got {}", lower.len())));
        }
        for (i, b) in lower.iter().enumerate() {
            let (r, c) = (diag[(i + 1) % n].nrows(), diag[i].nrows());
            if b.shape() != (r, c) {
                return Err(LinalgError::Dimension(format!("block B_{i} has shape {:?}, expected {:?}", b.shape(), (r, c))));
            }
        }
        Ok(Self { diag, lower, cyclic })
    }

    pub fn blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.diag.iter().map(|a| a.nrows()).collect()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.diag.len() + 1);
        let mut acc = 0;
        off.push(0);
        for a in &self.diag {
            acc += a.nrows();
            off.push(acc);
        }
        off
    }

    pub fn dim(&self) -> usize {
        self.diag.iter().map(|a| a.nrows()).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let off = self.offsets();
        let n = self.blocks();
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for (i, a) in self.diag.iter().enumerate() {
            let mut view = m.view_mut((off[i], off[i]), a.shape());
            view += a;
        }
        for (i, b) in self.lower.iter().enumerate() {
            let j = (i + 1) % n;
            {
                let mut view = m.view_mut((off[j], off[i]), b.shape());
                view += b;
            }
            let bt = b.transpose();
            let mut view = m.view_mut((off[i], off[j]), bt.shape());
            view += &bt;
        }
        m
    }

    pub fn apply(&self, u: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let n = self.blocks();
        let mut v: Vec<DVector<f64>> = self.diag.iter().zip(u).map(|(a, ui)| a * ui).collect();
        for (i, b) in self.lower.iter().enumerate() {
            let j = (i + 1) % n;
            v[j] += b * &u[i];
            v[i] += b.transpose() * &u[j];
        }
        v
    }

    pub fn split(&self, flat: &DVector<f64>) -> Vec<DVector<f64>> {
        let off = self.offsets();
        (0..self.blocks()).map(|i| flat.rows(off[i], off[i + 1] - off[i]).into_owned()).collect()
    }

    pub fn join(parts: &[DVector<f64>]) -> DVector<f64> {
        let total: usize = parts.iter().map(|p| p.len()).sum();
        DVector::from_iterator(total, parts.iter().flat_map(|p| p.iter().copied()))
    }

    /// Largest asymmetry of the assembled matrix, relative to its max entry.
    pub fn asymmetry(&self) -> f64 {
        let d = self.to_dense();
        let scale = d.amax().max(f64::MIN_POSITIVE);
        (&d - d.transpose()).amax() / scale
    }

    /// Solve `H u = rhs`. Open chains use block LU (block Thomas) and fall
    /// back to dense LU if a pivot block is singular; cyclic chains are
    /// solved densely.
    pub fn solve(&self, rhs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>, LinalgError> {
        if self.dim() == 0 {
            return Ok(rhs.to_vec());
        }
        if !self.cyclic {
            if let Ok(u) = self.thomas(rhs) {
                return Ok(u);
            }
        }
        let flat = Self::join(rhs);
        let x = self.to_dense().lu().solve(&flat).ok_or(LinalgError::Singular)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::Singular);
        }
        Ok(self.split(&x))
    }

    fn thomas(&self, rhs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>, LinalgError> {
        let n = self.blocks();
        let mut pivots = Vec::with_capacity(n);
        let mut y: Vec<DVector<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut d = self.diag[i].clone();
            let mut r = rhs[i].clone();
            if i > 0 {
                let b = &self.lower[i - 1];
                let lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn> = &pivots[i - 1];
                let upper = b.transpose();
                let x = lu.solve(&upper).ok_or(LinalgError::SingularBlock(i - 1))?;
                d -= b * x;
                let z = lu.solve(&y[i - 1]).ok_or(LinalgError::SingularBlock(i - 1))?;
                r -= b * z;
            }
            let lu = d.lu();
            if d_is_singular(&lu, &self.diag[i]) {
                return Err(LinalgError::SingularBlock(i));
            }
            pivots.push(lu);
            y.push(r);
        }
        let mut u = vec![DVector::zeros(0); n];
        for i in (0..n).rev() {
            let mut r = y[i].clone();
            if i + 1 < n {
                r -= self.lower[i].transpose() * &u[i + 1];
            }
            u[i] = pivots[i].solve(&r).ok_or(LinalgError::SingularBlock(i))?;
        }
        Ok(u)
    }

    /// Upper bound on `‖H⁻¹‖` in the block sup norm `sup_i ‖u_i‖₂`:
    /// `max_i Σ_j ‖G_ij‖₂` with `G = H⁻¹`.
    pub fn inverse_sup_norm_bound(&self) -> Result<f64, LinalgError> {
        let g = self.inverse_blocks()?;
        Ok(g.iter()
            .map(|row| row.iter().map(|b| spectral_norm(b)).sum::<f64>())
            .fold(0.0, f64::max))
    }

    /// Blocks `G_ij` of the inverse.
    pub fn inverse_blocks(&self) -> Result<Vec<Vec<DMatrix<f64>>>, LinalgError> {
        let dims = self.block_dims();
        let off = self.offsets();
        let n = self.blocks();
        let dense = self.to_dense();
        let inv = dense.clone().try_inverse().ok_or(LinalgError::Singular)?;
        if inv.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::Singular);
        }
        Ok((0..n)
            .map(|i| (0..n).map(|j| inv.view((off[i], off[j]), (dims[i], dims[j])).into_owned()).collect())
            .collect())
    }

    pub fn singular_values(&self) -> DVector<f64> {
        if self.dim() == 0 {
            return DVector::zeros(0);
        }
        self.to_dense().singular_values()
    }

    pub fn smallest_singular_value(&self) -> f64 {
        let s = self.singular_values();
        if s.is_empty() {
            f64::INFINITY
        } else {
            s.min()
        }
    }

    /// Max-row-sum norm of the assembled matrix.
    pub fn inf_norm(&self) -> f64 {
        let d = self.to_dense();
        d.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
    }
}

fn d_is_singular(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, reference: &DMatrix<f64>) -> bool {
    if reference.nrows() == 0 {
        return false;
    }
    let u = lu.u();
    let scale = reference.amax().max(1e-300);
    u.diagonal().iter().any(|d| d.abs() <= 1e-14 * scale || !d.is_finite())
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.ncols() == 1 || m.nrows() == 1 {
        return m.norm();
    }
    m.clone().singular_values().max()
}

/// Central difference gradient of a scalar function.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut y = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        y[i] = xi + h;
        let fp = f(&y);
        y[i] = xi - h;
        let fm = f(&y);
        y[i] = xi;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central difference Jacobian `J[a][i] = ∂f_a/∂x_i`.
pub fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let mut cols = Vec::with_capacity(x.len());
    let mut y = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        y[i] = xi + h;
        let fp = f(&y);
        y[i] = xi - h;
        let fm = f(&y);
        y[i] = xi;
        cols.push((fp - fm) / (2.0 * h));
    }
    if cols.is_empty() {
        return DMatrix::zeros(f(x).len(), 0);
    }
    DMatrix::from_columns(&cols)
}

/// Central difference Jacobian with one Richardson extrapolation step
/// (`(4 D(h/2) − D(h)) / 3`, fourth order).
pub fn richardson_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let coarse = fd_jacobian(&f, x, h);
    let fine = fd_jacobian(&f, x, 0.5 * h);
    (fine * 4.0 - coarse) / 3.0
}

/// Relative error `‖a − b‖_max / max(‖b‖_max, floor)`.
pub fn rel_error(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    (a - b).amax() / b.amax().max(floor)
}
