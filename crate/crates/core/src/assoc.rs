//! Burden, SKAT and weighted quadratic-form statistics on transformed
//! residuals, with their asymptotic null p-values.
//!
//! All statistics only touch the data through `s = G̃ᵀYψ`:
//!
//! * Burden: `T = wᵀs / (√n σ̂ψ)`, reported studentized as `T / √(wᵀΣ̂w)`
//!   and referred to `N(0, 1)`;
//! * SKAT: `Q = ‖s‖² / (n σ̂²ψ)`, referred to `Σ λ_j χ²₁` with `λ` the
//!   eigenvalues of `Σ̂ = G̃ᵀG̃ / n`;
//! * quadratic form: `Q_A = sᵀAs / (n σ̂²ψ)`, referred to the eigenvalues of
//!   `A^{1/2} Σ̂ A^{1/2}`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GenotypeBlock, NullFit};
use crate::normal;
use crate::quadform::{self, ChiSquareMixture};
use crate::transforms::{TransformOutput, TransformTag};

/// Which statistic to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestKind {
    Burden,
    Skat,
    /// Ridge-type quadratic form `A = (Σ̂ + γI)⁻¹`.
    Ridge,
}

impl TestKind {
    pub const ALL: [TestKind; 3] = [TestKind::Burden, TestKind::Skat, TestKind::Ridge];

    pub fn label(self) -> TestLabel {
        match self {
            TestKind::Burden => TestLabel::Burden,
            TestKind::Skat => TestLabel::Skat,
            TestKind::Ridge => TestLabel::QuadForm("ridge".into()),
        }
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.label().fmt(f)
    }
}

impl FromStr for TestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "burden" => Ok(TestKind::Burden),
            "skat" => Ok(TestKind::Skat),
            "ridge" | "quadform" | "quadform(ridge)" => Ok(TestKind::Ridge),
            _ => Err(Error::InvalidArgument(format!("unknown test {s:?}"))),
        }
    }
}

/// Test name as reported in results.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestLabel {
    Burden,
    Skat,
    QuadForm(String),
}

impl fmt::Display for TestLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestLabel::Burden => f.write_str("Burden"),
            TestLabel::Skat => f.write_str("SKAT"),
            TestLabel::QuadForm(name) => write!(f, "QuadForm({name})"),
        }
    }
}

impl FromStr for TestLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Burden" => Ok(TestLabel::Burden),
            "SKAT" => Ok(TestLabel::Skat),
            _ => s
                .strip_prefix("QuadForm(")
                .and_then(|r| r.strip_suffix(')'))
                .map(|name| TestLabel::QuadForm(name.to_string()))
                .ok_or_else(|| Error::InvalidArgument(format!("unknown test label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub dropped_zero_variance: bool,
    pub degenerate_gene: bool,
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.dropped_zero_variance {
            parts.push("DroppedZeroVarianceColumns");
        }
        if self.degenerate_gene {
            parts.push("DegenerateGene");
        }
        if parts.is_empty() {
            f.write_str("-")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

impl FromStr for Flags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = Flags::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "-") {
            match part {
                "DroppedZeroVarianceColumns" => flags.dropped_zero_variance = true,
                "DegenerateGene" => flags.degenerate_gene = true,
                other => return Err(Error::InvalidArgument(format!("unknown flag {other:?}"))),
            }
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub pvalue: f64,
    pub test: TestLabel,
    pub transform: Option<TransformTag>,
    pub p_used: usize,
    pub flags: Flags,
}

impl TestResult {
    fn new(test: TestLabel, statistic: f64, pvalue: f64, p_used: usize) -> Self {
        TestResult {
            statistic,
            pvalue: pvalue.clamp(0.0, 1.0),
            test,
            transform: None,
            p_used,
            flags: Flags::default(),
        }
    }

    fn degenerate(test: TestLabel, p_used: usize) -> Self {
        TestResult {
            statistic: f64::NAN,
            pvalue: 1.0,
            test,
            transform: None,
            p_used,
            flags: Flags {
                dropped_zero_variance: false,
                degenerate_gene: true,
            },
        }
    }
}

fn check_inputs(gtilde: &DMatrix<f64>, y_psi: &DVector<f64>, sigma2_psi: f64) -> Result<()> {
    if gtilde.nrows() != y_psi.len() {
        return Err(Error::DimensionMismatch(format!(
            "genotype block has {} rows, response {}",
            gtilde.nrows(),
            y_psi.len()
        )));
    }
    if gtilde.ncols() == 0 {
        return Err(Error::DimensionMismatch("genotype block has no columns".into()));
    }
    if !(sigma2_psi > 0.0) || !sigma2_psi.is_finite() {
        return Err(Error::DegenerateVariance(sigma2_psi));
    }
    Ok(())
}

/// Ridge weight `(Σ̂ + γI)⁻¹`; `gamma = None` uses the mean eigenvalue `trace(Σ̂)/p`.
pub fn ridge_weight(sigma_hat: &DMatrix<f64>, gamma: Option<f64>) -> Result<DMatrix<f64>> {
    let p = sigma_hat.nrows();
    let gamma = gamma.unwrap_or_else(|| sigma_hat.trace() / p as f64);
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge gamma must be positive, got {gamma}")));
    }
    let shifted = sigma_hat + DMatrix::identity(p, p) * gamma;
    let inv = shifted
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure("ridge matrix is not positive definite".into()))?
        .inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Per-gene quantities that do not depend on the response: `G̃`, `Σ̂` and the
/// null mixtures. Built once per gene and reused for every transform.
#[derive(Debug, Clone)]
pub struct PreparedGene {
    gtilde: DMatrix<f64>,
    sigma_hat: DMatrix<f64>,
    weights: DVector<f64>,
    burden_variance: f64,
    skat_mixture: Option<ChiSquareMixture>,
    ridge: Option<(DMatrix<f64>, ChiSquareMixture)>,
    flags: Flags,
}

impl PreparedGene {
    /// `weights = None` means `w = 1_p`; `gamma = None` the default ridge penalty.
    pub fn new(
        gtilde: DMatrix<f64>,
        weights: Option<&[f64]>,
        tests: &[TestKind],
        gamma: Option<f64>,
    ) -> Result<Self> {
        let p = gtilde.ncols();
        if p == 0 {
            return Err(Error::DimensionMismatch("genotype block has no columns".into()));
        }
        let weights = match weights {
            Some(w) if w.len() != p => {
                return Err(Error::DimensionMismatch(format!(
                    "{} weights for {p} SNPs",
                    w.len()
                )))
            }
            Some(w) => DVector::from_column_slice(w),
            None => DVector::from_element(p, 1.0),
        };
        let sigma_hat = quadform::gram(&gtilde);
        let burden_variance = (weights.transpose() * &sigma_hat * &weights)[(0, 0)];
        let needs_skat = tests.contains(&TestKind::Skat);
        let skat_mixture = if needs_skat {
            match quadform::mixture_from_covariance(&sigma_hat) {
                Ok(m) => Some(m),
                Err(Error::AllZero) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let ridge = if tests.contains(&TestKind::Ridge) && sigma_hat.trace() > 0.0 {
            let a = ridge_weight(&sigma_hat, gamma)?;
            match quadform::weighted_mixture_from_covariance(&sigma_hat, &a) {
                Ok(m) => Some((a, m)),
                Err(Error::AllZero) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        Ok(PreparedGene {
            gtilde,
            sigma_hat,
            weights,
            burden_variance,
            skat_mixture,
            ridge,
            flags: Flags::default(),
        })
    }

    pub fn p(&self) -> usize {
        self.gtilde.ncols()
    }

    pub fn gtilde(&self) -> &DMatrix<f64> {
        &self.gtilde
    }

    pub fn sigma_hat(&self) -> &DMatrix<f64> {
        &self.sigma_hat
    }

    /// Burden z-score from a precomputed `s = G̃ᵀYψ`.
    fn burden_from_score(&self, s: &DVector<f64>, sigma2_psi: f64) -> TestResult {
        let label = TestLabel::Burden;
        let norm = self.sigma_hat.amax();
        if !(self.burden_variance > 1e-12 * norm) {
            return TestResult::degenerate(label, self.p());
        }
        let n = self.gtilde.nrows() as f64;
        let t = self.weights.dot(s) / (n.sqrt() * sigma2_psi.sqrt());
        let z = t / self.burden_variance.sqrt();
        TestResult::new(label, z, normal::two_sided(z), self.p())
    }

    fn quad_from_score(
        &self,
        label: TestLabel,
        value: f64,
        mixture: Option<&ChiSquareMixture>,
        sigma2_psi: f64,
    ) -> TestResult {
        match mixture {
            Some(m) if !m.is_empty() => {
                let n = self.gtilde.nrows() as f64;
                let q = value / (n * sigma2_psi);
                TestResult::new(label, q, quadform::pvalue_mixture(m, q), self.p())
            }
            _ => TestResult::degenerate(label, self.p()),
        }
    }

    /// Runs `tests` (in the given order) on one transformed response.
    pub fn run(
        &self,
        y_psi: &DVector<f64>,
        sigma2_psi: f64,
        tests: &[TestKind],
    ) -> Result<Vec<TestResult>> {
        check_inputs(&self.gtilde, y_psi, sigma2_psi)?;
        let s = self.gtilde.tr_mul(y_psi);
        tests
            .iter()
            .map(|test| {
                let mut res = match test {
                    TestKind::Burden => self.burden_from_score(&s, sigma2_psi),
                    TestKind::Skat => self.quad_from_score(
                        TestLabel::Skat,
                        s.norm_squared(),
                        self.skat_mixture.as_ref(),
                        sigma2_psi,
                    ),
                    TestKind::Ridge => match &self.ridge {
                        Some((a, m)) => {
                            let value = (s.transpose() * a * &s)[(0, 0)];
                            self.quad_from_score(test.label(), value, Some(m), sigma2_psi)
                        }
                        None => TestResult::degenerate(test.label(), self.p()),
                    },
                };
                res.flags.dropped_zero_variance |= self.flags.dropped_zero_variance;
                Ok(res)
            })
            .collect()
    }
}

pub fn burden_test(
    gtilde: &DMatrix<f64>,
    y_psi: &DVector<f64>,
    sigma2_psi: f64,
    w: &[f64],
) -> Result<TestResult> {
    check_inputs(gtilde, y_psi, sigma2_psi)?;
    if w.iter().any(|v| !v.is_finite()) || w.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument("weights must be finite and not all zero".into()));
    }
    let prepared = PreparedGene::new(gtilde.clone(), Some(w), &[TestKind::Burden], None)?;
    let res = prepared.run(y_psi, sigma2_psi, &[TestKind::Burden])?.remove(0);
    if res.flags.degenerate_gene {
        return Err(Error::DegenerateGene("wᵀΣ̂w is numerically zero".into()));
    }
    Ok(res)
}

pub fn skat_test(gtilde: &DMatrix<f64>, y_psi: &DVector<f64>, sigma2_psi: f64) -> Result<TestResult> {
    check_inputs(gtilde, y_psi, sigma2_psi)?;
    let prepared = PreparedGene::new(gtilde.clone(), None, &[TestKind::Skat], None)?;
    let res = prepared.run(y_psi, sigma2_psi, &[TestKind::Skat])?.remove(0);
    if res.flags.degenerate_gene {
        return Err(Error::DegenerateGene("all eigenvalues of Σ̂ vanish".into()));
    }
    Ok(res)
}

/// Generic `Q_A = (G̃ᵀYψ)ᵀ A (G̃ᵀYψ) / (n σ̂²ψ)`.
pub fn quadform_test(
    gtilde: &DMatrix<f64>,
    y_psi: &DVector<f64>,
    sigma2_psi: f64,
    a: &DMatrix<f64>,
    name: &str,
) -> Result<TestResult> {
    check_inputs(gtilde, y_psi, sigma2_psi)?;
    let mixture = quadform::weighted_mixture(gtilde, a).map_err(|e| match e {
        Error::AllZero => Error::DegenerateGene("all weighted eigenvalues vanish".into()),
        other => other,
    })?;
    let s = gtilde.tr_mul(y_psi);
    let n = gtilde.nrows() as f64;
    let q = (s.transpose() * a * &s)[(0, 0)] / (n * sigma2_psi);
    Ok(TestResult::new(
        TestLabel::QuadForm(name.to_string()),
        q,
        quadform::pvalue_mixture(&mixture, q),
        gtilde.ncols(),
    ))
}

/// A transform applied once per analysis, with its `σ̂²ψ`.
#[derive(Debug, Clone)]
pub struct PreparedTransform {
    pub tag: TransformTag,
    pub y_psi: DVector<f64>,
    pub sigma2_psi: f64,
}

impl PreparedTransform {
    pub fn new(fit: &NullFit, output: &TransformOutput) -> Result<Self> {
        Ok(PreparedTransform {
            tag: output.kind.tag(),
            sigma2_psi: fit.residual_variance(&output.y_psi)?,
            y_psi: output.y_psi.clone(),
        })
    }
}

/// Columns of `G̃` with (numerically) zero variance are dropped.
fn nonzero_columns(g: &DMatrix<f64>, gtilde: &DMatrix<f64>) -> Vec<usize> {
    (0..gtilde.ncols())
        .filter(|&j| {
            let raw = g.column(j).norm_squared().max(1.0);
            gtilde.column(j).norm_squared() > 1e-20 * raw
        })
        .collect()
}

/// Residualizes `G`, drops zero-variance columns and prepares per-gene state.
/// Returns `None` when every column was dropped.
pub fn prepare_gene(
    fit: &NullFit,
    g: &GenotypeBlock,
    weights: Option<&[f64]>,
    tests: &[TestKind],
    gamma: Option<f64>,
) -> Result<Option<PreparedGene>> {
    if let Some(w) = weights {
        if w.len() != g.p() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} SNPs",
                w.len(),
                g.p()
            )));
        }
    }
    let gtilde = fit.project_block(g)?;
    let keep = nonzero_columns(&g.values, &gtilde);
    if keep.is_empty() {
        return Ok(None);
    }
    let dropped = keep.len() < g.p();
    let gtilde = if dropped { gtilde.select_columns(&keep) } else { gtilde };
    let w: Option<Vec<f64>> = weights.map(|w| keep.iter().map(|&j| w[j]).collect());
    let mut prepared = PreparedGene::new(gtilde, w.as_deref(), tests, gamma)?;
    prepared.flags.dropped_zero_variance = dropped;
    Ok(Some(prepared))
}

/// Runs every (test, transform) pair on one gene, ordered by test then
/// transform.
pub fn gene_test_suite(
    fit: &NullFit,
    g: &GenotypeBlock,
    transforms: &[PreparedTransform],
    tests: &[TestKind],
    weights: Option<&[f64]>,
    gamma: Option<f64>,
) -> Result<Vec<TestResult>> {
    let prepared = prepare_gene(fit, g, weights, tests, gamma)?;
    let mut out = Vec::with_capacity(tests.len() * transforms.len());
    match prepared {
        None => {
            for test in tests {
                for t in transforms {
                    let mut r = TestResult::degenerate(test.label(), 0);
                    r.flags.dropped_zero_variance = true;
                    r.transform = Some(t.tag);
                    out.push(r);
                }
            }
        }
        Some(gene) => {
            let per_transform: Vec<Vec<TestResult>> = transforms
                .iter()
                .map(|t| gene.run(&t.y_psi, t.sigma2_psi, tests))
                .collect::<Result<_>>()?;
            for (ti, _) in tests.iter().enumerate() {
                for (k, t) in transforms.iter().enumerate() {
                    let mut r = per_transform[k][ti].clone();
                    r.transform = Some(t.tag);
                    out.push(r);
                }
            }
        }
    }
    Ok(out)
}
