//! Small dense helpers shared by the numeric modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance used for row-stochasticity checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Singular value decomposition with values sorted non-increasing and the
/// columns of `u` and `v` permuted to match.
#[derive(Debug, Clone)]
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl SortedSvd {
    pub fn compute(m: &DMatrix<f64>) -> Result<Self> {
        let f = to_faer(m)?;
        let svd = f.thin_svd().map_err(|_| Error::SvdConvergence)?;
        let rank = m.nrows().min(m.ncols());
        let s = svd.S().column_vector();
        let (u, v) = (svd.U(), svd.V());
        Ok(SortedSvd {
            u: DMatrix::from_fn(m.nrows(), rank, |i, j| u[(i, j)]),
            singular_values: (0..rank).map(|i| s[i].max(0.0)).collect(),
            v: DMatrix::from_fn(m.ncols(), rank, |i, j| v[(i, j)]),
        })
    }

    /// `U_d · diag(σ_1..σ_d) · V_dᵀ` for the leading `d` triplets.
    pub fn reconstruct(&self, d: usize) -> DMatrix<f64> {
        let d = d.min(self.singular_values.len());
        let mut us = self.u.columns(0, d).into_owned();
        for (j, s) in self.singular_values.iter().take(d).enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.columns(0, d).transpose()
    }
}

/// Copies into faer, which runs the SVDs: nalgebra's SVD produces NaN on
/// matrices with many exactly-zero columns, as repeat operators often have.
fn to_faer(m: &DMatrix<f64>) -> Result<faer::Mat<f64>> {
    ensure_finite(m)?;
    if m.is_empty() {
        return Err(Error::Dimension("empty matrix".into()));
    }
    Ok(faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]))
}

/// Singular values only, sorted non-increasing.
pub fn singular_values_only(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let values = to_faer(m)?.singular_values().map_err(|_| Error::SvdConvergence)?;
    Ok(values.into_iter().map(|s| s.max(0.0)).collect())
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(singular_values_only(m)?.first().copied().unwrap_or(0.0))
}

pub fn ensure_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Checks entries are non-negative and rows sum to one within `tol`.
pub fn check_row_stochastic(m: &DMatrix<f64>, tol: f64, what: &str) -> Result<()> {
    for (i, row) in m.row_iter().enumerate() {
        if let Some(x) = row.iter().find(|x| !x.is_finite() || **x < -tol) {
            return Err(Error::NotStochastic(format!(
                "{what}: row {i} has entry {x}"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::NotStochastic(format!(
                "{what}: row {i} sums to {sum}"
            )));
        }
    }
    Ok(())
}

/// `‖AᵀA − AAᵀ‖_max`; zero for normal matrices.
pub fn normality_defect(a: &DMatrix<f64>) -> f64 {
    let ata = a.transpose() * a;
    let aat = a * a.transpose();
    max_abs_diff(&ata, &aat)
}
