//! Null linear model and covariate projection.
//!
//! The null model regresses the trait on the covariates only. Its thin QR
//! factor is kept so that `P_Z = I - Q Qᵀ` can be applied to the transformed
//! response and to every genotype block without refitting.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative threshold on the diagonal of the triangular factor below which the
/// covariate matrix is treated as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Covariate matrix `Z` (n × q) whose first column is the intercept.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let (n, q) = values.shape();
        if q == 0 {
            return Err(Error::DimensionMismatch("design matrix has no columns".into()));
        }
        if n <= q {
            return Err(Error::DimensionMismatch(format!(
                "need more samples than covariates (n = {n}, q = {q})"
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(format!(
                "design matrix entry ({}, {})",
                pos % n,
                pos / n
            )));
        }
        Ok(Self { values })
    }

    /// Prepends an all-ones intercept column to `covariates` (n × k, k may be 0).
    pub fn with_intercept(covariates: &DMatrix<f64>) -> Result<Self> {
        let n = covariates.nrows();
        let mut values = DMatrix::from_element(n, covariates.ncols() + 1, 1.0);
        values.columns_mut(1, covariates.ncols()).copy_from(covariates);
        Self::new(values)
    }

    pub fn intercept_only(n: usize) -> Result<Self> {
        Self::new(DMatrix::from_element(n, 1, 1.0))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn q(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// Genotype matrix for one variant set.
#[derive(Debug, Clone)]
pub struct GenotypeBlock {
    pub values: DMatrix<f64>,
    pub snp_ids: Vec<String>,
    pub mafs: Vec<f64>,
}

impl GenotypeBlock {
    pub fn new(values: DMatrix<f64>, snp_ids: Vec<String>, mafs: Vec<f64>) -> Result<Self> {
        let p = values.ncols();
        if p == 0 {
            return Err(Error::DimensionMismatch("genotype block has no SNPs".into()));
        }
        if snp_ids.len() != p || mafs.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "{p} genotype columns but {} SNP ids and {} MAFs",
                snp_ids.len(),
                mafs.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("genotype block".into()));
        }
        Ok(Self {
            values,
            snp_ids,
            mafs,
        })
    }

    /// Wraps a bare matrix with generated ids and MAFs estimated from the codes.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows() as f64;
        let mafs = values
            .column_iter()
            .map(|c| {
                let freq = c.sum() / (2.0 * n);
                freq.min(1.0 - freq)
            })
            .collect();
        let ids = (0..values.ncols()).map(|j| format!("snp{}", j + 1)).collect();
        Self::new(values, ids, mafs)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }
}

/// Fitted null model `Y = Zα + ε`.
#[derive(Debug, Clone)]
pub struct NullFit {
    alpha_hat: DVector<f64>,
    residuals: DVector<f64>,
    /// Thin orthonormal basis of the column space of `Z` (n × q).
    basis: DMatrix<f64>,
}

/// Thin QR of `Z` with the rank check applied.
fn orthonormal_basis(z: &DesignMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let qr = z.values().clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = r.diagonal().iter().map(|d| d.abs()).collect();
    let largest = diag.iter().cloned().fold(0.0_f64, f64::max);
    let threshold = RANK_TOLERANCE * largest;
    if let Some((column, &d)) = diag.iter().enumerate().find(|(_, &d)| d <= threshold || largest == 0.0) {
        return Err(Error::RankDeficient {
            column,
            diag: d,
            threshold,
        });
    }
    Ok((qr.q(), r))
}

pub fn fit_null(y: &DVector<f64>, z: &DesignMatrix) -> Result<NullFit> {
    if y.len() != z.n() {
        return Err(Error::DimensionMismatch(format!(
            "phenotype has {} entries, design matrix {} rows",
            y.len(),
            z.n()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("phenotype vector".into()));
    }
    let (basis, r) = orthonormal_basis(z)?;
    let qty = basis.tr_mul(y);
    let alpha_hat = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::NumericalFailure("triangular solve failed".into()))?;
    let residuals = y - &basis * qty;
    Ok(NullFit {
        alpha_hat,
        residuals,
        basis,
    })
}

impl NullFit {
    /// Builds the projector for `Z` without a response, for callers that
    /// only need `P_Z` (e.g. simulations that redraw `Y` many times).
    pub fn projector_only(z: &DesignMatrix) -> Result<Self> {
        let (basis, _) = orthonormal_basis(z)?;
        Ok(NullFit {
            alpha_hat: DVector::zeros(z.q()),
            residuals: DVector::zeros(z.n()),
            basis,
        })
    }

    pub fn n(&self) -> usize {
        self.basis.nrows()
    }

    pub fn q(&self) -> usize {
        self.basis.ncols()
    }

    pub fn alpha_hat(&self) -> &DVector<f64> {
        &self.alpha_hat
    }

    pub fn residuals(&self) -> &DVector<f64> {
        &self.residuals
    }

    /// `P_Z v`.
    pub fn project_vector(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} against n = {}",
                v.len(),
                self.n()
            )));
        }
        let coef = self.basis.tr_mul(v);
        Ok(v - &self.basis * coef)
    }

    /// `P_Z M` for an n × p block.
    pub fn project_matrix(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m.nrows() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "block has {} rows against n = {}",
                m.nrows(),
                self.n()
            )));
        }
        let coef = self.basis.tr_mul(m);
        Ok(m - &self.basis * coef)
    }

    /// Residualizes a genotype block on the covariates (`G̃ = P_Z G`).
    pub fn project_block(&self, g: &GenotypeBlock) -> Result<DMatrix<f64>> {
        self.project_matrix(&g.values)
    }

    /// `σ̂²_ψ = Yψᵀ P_Z Yψ / (n − q)`.
    pub fn residual_variance(&self, y_psi: &DVector<f64>) -> Result<f64> {
        if y_psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("transformed response".into()));
        }
        let projected = self.project_vector(y_psi)?;
        let n = self.n();
        let sigma2 = projected.norm_squared() / (n - self.q()) as f64;
        let scale = y_psi.norm_squared() / n as f64;
        if !(sigma2 > 1e-12 * scale) {
            return Err(Error::DegenerateVariance(sigma2));
        }
        Ok(sigma2)
    }
}
