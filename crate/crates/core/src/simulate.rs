//! Simulation designs: error laws, genotype and phenotype generators, and the
//! type-I-error, power and quadratic-equivalence experiments.
//!
//! Every random draw comes from a ChaCha stream derived from `(seed, domain,
//! index)`, so replicate `r` sees the same numbers regardless of how many
//! workers run or in which order replicates are scheduled.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assoc::{PreparedGene, TestKind};
use crate::error::{Error, Result};
use crate::model::{DesignMatrix, GenotypeBlock, NullFit};
use crate::normal;
use crate::transforms::{transform_residuals, TransformKind, TransformTag};

/// Covariate effects used throughout the simulations.
pub const DEFAULT_ALPHA: [f64; 3] = [1.0, 0.8, 1.0];

const DOMAIN_GENOTYPE: u64 = 1;
const DOMAIN_REPLICATE: u64 = 2;
const DOMAIN_MAF: u64 = 3;

/// ChaCha stream for `(seed, domain, index)`.
pub fn derive_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 48) ^ index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorDist {
    StdNormal,
    /// Skew-normal with location 0, shape 10, scale 5.
    SkewNormal,
    ChiSq5,
    /// `exp(N(0, 1))`.
    LogNormal,
    /// `0.3·N(0, 1) + 0.7·N(5, 2²)`.
    BimodalNormal,
    StudentT3,
}

impl ErrorDist {
    pub const ALL: [ErrorDist; 6] = [
        ErrorDist::StdNormal,
        ErrorDist::SkewNormal,
        ErrorDist::ChiSq5,
        ErrorDist::LogNormal,
        ErrorDist::BimodalNormal,
        ErrorDist::StudentT3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorDist::StdNormal => "normal",
            ErrorDist::SkewNormal => "skewnormal",
            ErrorDist::ChiSq5 => "chisq5",
            ErrorDist::LogNormal => "lognormal",
            ErrorDist::BimodalNormal => "bimodal",
            ErrorDist::StudentT3 => "t3",
        }
    }

    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            ErrorDist::StdNormal => rng.sample(StandardNormal),
            ErrorDist::SkewNormal => {
                let delta = 10.0 / 101f64.sqrt();
                let u0: f64 = rng.sample(StandardNormal);
                let u1: f64 = rng.sample(StandardNormal);
                5.0 * (delta * u0.abs() + (1.0 - delta * delta).sqrt() * u1)
            }
            ErrorDist::ChiSq5 => ChiSquared::new(5.0).expect("valid df").sample(rng),
            ErrorDist::LogNormal => rng.sample::<f64, _>(StandardNormal).exp(),
            ErrorDist::BimodalNormal => {
                let first = rng.random::<f64>() < 0.3;
                let z: f64 = rng.sample(StandardNormal);
                if first {
                    z
                } else {
                    5.0 + 2.0 * z
                }
            }
            ErrorDist::StudentT3 => StudentT::new(3.0).expect("valid df").sample(rng),
        }
    }

    /// `(f'/f, f''/f)` at `x` for the laws with a closed-form density.
    pub fn log_derivatives(self, x: f64) -> Option<(f64, f64)> {
        match self {
            ErrorDist::StdNormal => Some((-x, x * x - 1.0)),
            ErrorDist::StudentT3 => {
                let nu = 3.0;
                let d = nu + x * x;
                let s = -(nu + 1.0) * x / d;
                let ds = -(nu + 1.0) * (nu - x * x) / (d * d);
                Some((s, ds + s * s))
            }
            _ => None,
        }
    }

    /// Location Fisher information `E[(f'/f)²]`, where known in closed form.
    pub fn fisher_information(self) -> Option<f64> {
        match self {
            ErrorDist::StdNormal => Some(1.0),
            ErrorDist::StudentT3 => Some(4.0 / 6.0),
            _ => None,
        }
    }
}

impl fmt::Display for ErrorDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ErrorDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "normal" | "stdnormal" | "n01" => Ok(ErrorDist::StdNormal),
            "skewnormal" | "skew" => Ok(ErrorDist::SkewNormal),
            "chisq5" | "chisq" | "chi2" => Ok(ErrorDist::ChiSq5),
            "lognormal" | "lnorm" => Ok(ErrorDist::LogNormal),
            "bimodal" | "bimodalnormal" => Ok(ErrorDist::BimodalNormal),
            "t3" | "studentt3" | "t" => Ok(ErrorDist::StudentT3),
            _ => Err(Error::InvalidArgument(format!("unknown error distribution {s:?}"))),
        }
    }
}

pub fn sample_error(dist: ErrorDist, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| dist.draw(&mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Unidirectional,
    Bidirectional,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uni" | "unidirectional" => Ok(Direction::Unidirectional),
            "bi" | "bidirectional" => Ok(Direction::Bidirectional),
            _ => Err(Error::InvalidArgument(format!("unknown direction {s:?}"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Unidirectional => "uni",
            Direction::Bidirectional => "bi",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    Identity,
    Quadratic,
}

impl Link {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Link::Identity => x,
            Link::Quadratic => x * x,
        }
    }
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(Link::Identity),
            "quadratic" | "square" => Ok(Link::Quadratic),
            _ => Err(Error::InvalidArgument(format!("unknown link {s:?}"))),
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Link::Identity => "identity",
            Link::Quadratic => "quadratic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectConfig {
    /// Fraction of nonzero effects: 0.10, 0.30 or 0.60 in the reference design.
    pub proportion_nonzero: f64,
    pub direction: Direction,
    /// Overrides the per-distribution default magnitude.
    pub beta_magnitude: Option<f64>,
    pub link: Link,
}

impl EffectConfig {
    pub fn sparse_unidirectional() -> Self {
        EffectConfig {
            proportion_nonzero: 0.10,
            direction: Direction::Unidirectional,
            beta_magnitude: None,
            link: Link::Identity,
        }
    }

    /// Reference magnitude for `dist` at this sparsity.
    pub fn default_magnitude(&self, dist: ErrorDist) -> f64 {
        let sparse = match dist {
            ErrorDist::ChiSq5 => 0.3,
            ErrorDist::LogNormal => 0.1,
            _ => 0.2,
        };
        let prop = self.proportion_nonzero;
        if prop >= 0.45 {
            match dist {
                ErrorDist::ChiSq5 => 0.05,
                ErrorDist::LogNormal => 0.02,
                ErrorDist::StdNormal | ErrorDist::StudentT3 => 0.03,
                ErrorDist::SkewNormal | ErrorDist::BimodalNormal => 0.05,
            }
        } else if prop >= 0.2 {
            sparse / 2.0
        } else {
            sparse
        }
    }

    pub fn magnitude(&self, dist: ErrorDist) -> f64 {
        self.beta_magnitude.unwrap_or_else(|| self.default_magnitude(dist))
    }
}

pub fn make_beta(cfg: &EffectConfig, p: usize, dist: ErrorDist) -> Vec<f64> {
    let k = ((cfg.proportion_nonzero * p as f64) - 1e-9).ceil().max(0.0) as usize;
    let k = k.min(p);
    let m = cfg.magnitude(dist);
    let negative_from = k - k / 2;
    (0..p)
        .map(|j| {
            if j >= k {
                0.0
            } else if cfg.direction == Direction::Bidirectional && j >= negative_from {
                -m
            } else {
                m
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimGenotypeConfig {
    pub n: usize,
    pub p: usize,
    pub maf_range: (f64, f64),
    /// AR(1) correlation of the latent haplotype Gaussians.
    pub ld_rho: f64,
}

impl SimGenotypeConfig {
    pub fn new(n: usize, p: usize) -> Self {
        SimGenotypeConfig {
            n,
            p,
            maf_range: (0.05, 0.5),
            ld_rho: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.maf_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::InvalidArgument(format!("bad MAF range ({lo}, {hi})")));
        }
        if !(0.0..1.0).contains(&self.ld_rho) {
            return Err(Error::InvalidArgument(format!("ld_rho must be in [0, 1), got {}", self.ld_rho)));
        }
        if self.p == 0 || self.n <= self.p {
            return Err(Error::InvalidArgument(format!("need n > p ≥ 1 (n = {}, p = {})", self.n, self.p)));
        }
        Ok(())
    }
}

/// Genotypes from thresholded AR(1) latent haplotypes with the given MAFs.
pub fn genotypes_with_mafs<R: Rng + ?Sized>(
    n: usize,
    mafs: &[f64],
    ld_rho: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let p = mafs.len();
    let thresholds: Vec<f64> = mafs.iter().map(|&m| normal::quantile(1.0 - m)).collect();
    let innovation = (1.0 - ld_rho * ld_rho).sqrt();
    let mut g = DMatrix::zeros(n, p);
    for i in 0..n {
        for _ in 0..2 {
            let mut latent: f64 = rng.sample(StandardNormal);
            for j in 0..p {
                if j > 0 {
                    latent = ld_rho * latent + innovation * rng.sample::<f64, _>(StandardNormal);
                }
                if latent > thresholds[j] {
                    g[(i, j)] += 1.0;
                }
            }
        }
    }
    g
}

/// Draws MAFs uniformly from the configured range, then genotypes. The
/// returned block stores the generating MAFs.
pub fn simulate_genotypes<R: Rng + ?Sized>(cfg: &SimGenotypeConfig, rng: &mut R) -> Result<GenotypeBlock> {
    cfg.validate()?;
    let (lo, hi) = cfg.maf_range;
    let mafs: Vec<f64> = (0..cfg.p)
        .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
        .collect();
    let values = genotypes_with_mafs(cfg.n, &mafs, cfg.ld_rho, rng);
    let ids = (0..cfg.p).map(|j| format!("sim{}", j + 1)).collect();
    GenotypeBlock::new(values, ids, mafs)
}

/// Covariates `(1, N(5, 1), Bernoulli(0.5))`.
pub fn simulate_covariates<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<DesignMatrix> {
    let mut cov = DMatrix::zeros(n, 2);
    for i in 0..n {
        cov[(i, 0)] = 5.0 + rng.sample::<f64, _>(StandardNormal);
        cov[(i, 1)] = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
    }
    DesignMatrix::with_intercept(&cov)
}

/// `y = Zα + h(Gβ) + ε` with errors drawn from `rng`.
pub fn simulate_phenotype<R: Rng + ?Sized>(
    z: &DesignMatrix,
    alpha: &[f64],
    g: &DMatrix<f64>,
    beta: &[f64],
    link: Link,
    dist: ErrorDist,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let errors: Vec<f64> = (0..z.n()).map(|_| dist.draw(rng)).collect();
    phenotype_from_errors(z, alpha, g, beta, link, &errors)
}

pub fn phenotype_from_errors(
    z: &DesignMatrix,
    alpha: &[f64],
    g: &DMatrix<f64>,
    beta: &[f64],
    link: Link,
    errors: &[f64],
) -> Result<DVector<f64>> {
    if alpha.len() != z.q() || beta.len() != g.ncols() || g.nrows() != z.n() || errors.len() != z.n() {
        return Err(Error::DimensionMismatch("phenotype simulation inputs".into()));
    }
    let mut y = z.values() * DVector::from_column_slice(alpha);
    if beta.iter().any(|&b| b != 0.0) {
        let gb = g * DVector::from_column_slice(beta);
        for (yi, v) in y.iter_mut().zip(gb.iter()) {
            *yi += link.apply(*v);
        }
    }
    for (yi, e) in y.iter_mut().zip(errors) {
        *yi += e;
    }
    Ok(y)
}

/// Shared settings of the rejection-rate experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dist: ErrorDist,
    pub n: usize,
    pub p: usize,
    pub replicates: usize,
    /// Replicates sharing one simulated gene (genotypes and covariates).
    pub replicates_per_gene: usize,
    pub maf_range: (f64, f64),
    pub ld_rho: f64,
    pub tests: Vec<TestKind>,
    #[serde(skip)]
    pub transforms: Vec<TransformKind>,
    pub gamma: Option<f64>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(dist: ErrorDist, n: usize, replicates: usize, seed: u64) -> Self {
        ExperimentConfig {
            dist,
            n,
            p: 20,
            replicates,
            replicates_per_gene: 1000,
            maf_range: (0.05, 0.5),
            ld_rho: 0.5,
            tests: TestKind::ALL.to_vec(),
            transforms: vec![TransformKind::Uat, TransformKind::int(), TransformKind::lpt()],
            gamma: None,
            seed,
        }
    }

    fn genotype_config(&self) -> SimGenotypeConfig {
        SimGenotypeConfig {
            n: self.n,
            p: self.p,
            maf_range: self.maf_range,
            ld_rho: self.ld_rho,
        }
    }

    fn validate(&self) -> Result<()> {
        self.genotype_config().validate()?;
        if self.replicates == 0 || self.replicates_per_gene == 0 {
            return Err(Error::InvalidArgument("replicate counts must be positive".into()));
        }
        if self.tests.is_empty() || self.transforms.is_empty() {
            return Err(Error::InvalidArgument("need at least one test and one transform".into()));
        }
        Ok(())
    }

    /// Position of `(test, transform)` in a replicate's p-value vector.
    pub fn slot(&self, test_idx: usize, transform_idx: usize) -> usize {
        test_idx * self.transforms.len() + transform_idx
    }
}

struct SimGene {
    z: DesignMatrix,
    fit: NullFit,
    g: DMatrix<f64>,
    prepared: PreparedGene,
}

fn simulate_gene(cfg: &ExperimentConfig, gene: u64) -> Result<SimGene> {
    let mut rng = derive_rng(cfg.seed, DOMAIN_GENOTYPE, gene);
    let z = simulate_covariates(cfg.n, &mut rng)?;
    let block = simulate_genotypes(&cfg.genotype_config(), &mut rng)?;
    let fit = NullFit::projector_only(&z)?;
    let prepared = crate::assoc::prepare_gene(&fit, &block, None, &cfg.tests, cfg.gamma)?
        .ok_or_else(|| Error::DegenerateGene(format!("simulated gene {gene} has no variable SNP")))?;
    Ok(SimGene {
        z,
        fit,
        g: block.values,
        prepared,
    })
}

/// p-values of one replicate, laid out by [`ExperimentConfig::slot`].
fn replicate_pvalues(
    cfg: &ExperimentConfig,
    gene: &SimGene,
    beta: &[f64],
    link: Link,
    replicate: u64,
) -> Result<Vec<f64>> {
    let mut rng = derive_rng(cfg.seed, DOMAIN_REPLICATE, replicate);
    let y = simulate_phenotype(&gene.z, &DEFAULT_ALPHA, &gene.g, beta, link, cfg.dist, &mut rng)?;
    let residuals = gene.fit.project_vector(&y)?;
    let mut out = vec![0.0; cfg.tests.len() * cfg.transforms.len()];
    for (k, &kind) in cfg.transforms.iter().enumerate() {
        let (y_psi, _) = transform_residuals(kind, residuals.as_slice())?;
        let y_psi = DVector::from_vec(y_psi);
        let sigma2 = gene.fit.residual_variance(&y_psi)?;
        let results = gene.prepared.run(&y_psi, sigma2, &cfg.tests)?;
        for (t, r) in results.iter().enumerate() {
            out[cfg.slot(t, k)] = r.pvalue;
        }
    }
    Ok(out)
}

/// Runs all replicates and returns their p-value vectors in replicate order.
pub fn replicate_pvalue_matrix(
    cfg: &ExperimentConfig,
    beta: &[f64],
    link: Link,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if beta.len() != cfg.p {
        return Err(Error::DimensionMismatch(format!("{} effects for p = {}", beta.len(), cfg.p)));
    }
    let genes = cfg.replicates.div_ceil(cfg.replicates_per_gene);
    let mut all = Vec::with_capacity(cfg.replicates);
    for gene_idx in 0..genes {
        let gene = simulate_gene(cfg, gene_idx as u64)?;
        let start = gene_idx * cfg.replicates_per_gene;
        let end = (start + cfg.replicates_per_gene).min(cfg.replicates);
        let batch: Vec<Vec<f64>> = (start..end)
            .into_par_iter()
            .map(|r| replicate_pvalues(cfg, &gene, beta, link, r as u64))
            .collect::<Result<_>>()?;
        all.extend(batch);
    }
    Ok(all)
}

/// One row of an experiment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub test: TestKind,
    pub transform: TransformTag,
    pub error_dist: ErrorDist,
    /// Nominal level for type-I tables, effect magnitude for power tables.
    pub alpha_or_effect: f64,
    pub estimate: f64,
    pub std_err: f64,
    pub replicates: usize,
    /// Significance level the estimate refers to.
    pub alpha: f64,
    pub rejections: usize,
}

fn rate_rows(
    cfg: &ExperimentConfig,
    pvalues: &[Vec<f64>],
    alpha: f64,
    label_value: f64,
) -> Vec<RateRow> {
    let reps = pvalues.len();
    let mut rows = Vec::new();
    for (t, &test) in cfg.tests.iter().enumerate() {
        for (k, kind) in cfg.transforms.iter().enumerate() {
            let slot = cfg.slot(t, k);
            let hits = pvalues.iter().filter(|p| p[slot] <= alpha).count();
            let est = hits as f64 / reps as f64;
            rows.push(RateRow {
                test,
                transform: kind.tag(),
                error_dist: cfg.dist,
                alpha_or_effect: label_value,
                estimate: est,
                std_err: (est * (1.0 - est) / reps as f64).sqrt(),
                replicates: reps,
                alpha,
                rejections: hits,
            });
        }
    }
    rows
}

/// Empirical rejection rates under `H₀` at each level in `alphas`.
pub fn type1_experiment(cfg: &ExperimentConfig, alphas: &[f64]) -> Result<Vec<RateRow>> {
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidArgument("alphas must lie in [0, 1]".into()));
    }
    let beta = vec![0.0; cfg.p];
    let pvalues = replicate_pvalue_matrix(cfg, &beta, Link::Identity)?;
    Ok(alphas
        .iter()
        .flat_map(|&a| rate_rows(cfg, &pvalues, a, a))
        .collect())
}

/// Empirical power at level `alpha` for one effect configuration.
pub fn power_experiment(cfg: &ExperimentConfig, effect: &EffectConfig, alpha: f64) -> Result<Vec<RateRow>> {
    let beta = make_beta(effect, cfg.p, cfg.dist);
    let pvalues = replicate_pvalue_matrix(cfg, &beta, effect.link)?;
    Ok(rate_rows(cfg, &pvalues, alpha, effect.magnitude(cfg.dist)))
}

pub const RATE_HEADER: &str = "test\ttransform\terror_dist\talpha_or_effect\testimate\tstd_err\treplicates";

pub fn write_rate_table<W: Write>(rows: &[RateRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{RATE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.test, r.transform, r.error_dist, r.alpha_or_effect, r.estimate, r.std_err, r.replicates
        )?;
    }
    Ok(())
}

/// Long-format power rows, one per (setting, test, transform), for plotting.
pub fn write_power_long<W: Write>(
    rows: &[(EffectConfig, RateRow)],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(
        out,
        "error_dist\tproportion\tdirection\tlink\tmagnitude\talpha\ttest\ttransform\tpower\tstd_err\treplicates"
    )?;
    for (e, r) in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.error_dist,
            e.proportion_nonzero,
            e.direction,
            e.link,
            r.alpha_or_effect,
            r.alpha,
            r.test,
            r.transform,
            r.estimate,
            r.std_err,
            r.replicates
        )?;
    }
    Ok(())
}

/// Difference between the exact locally optimal quadratic statistic and its
/// SKAT-form surrogate at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub n: usize,
    pub replicates: usize,
    pub mean_diff: f64,
    pub var_diff: f64,
    /// Mean of `trace(Σ̂)` over replicates.
    pub mean_trace: f64,
    /// Mean of `diff + I_f · trace(Σ̂)` (its limit is zero).
    pub mean_centered: f64,
    pub se_centered: f64,
    pub fisher_information: f64,
}

/// `(T_Quad, T_SKAT)` with the true score `s = f'/f` and `r = f''/f`.
///
/// `T_SKAT = ‖G̃ᵀs‖²/n`; `T_Quad` replaces the diagonal `‖g̃ᵢ‖² sᵢ²` of that
/// double sum by `‖g̃ᵢ‖² rᵢ`.
pub fn quad_and_skat(gtilde: &DMatrix<f64>, errors: &[f64], dist: ErrorDist) -> Result<(f64, f64)> {
    let n = gtilde.nrows();
    if errors.len() != n {
        return Err(Error::DimensionMismatch("errors vs genotype rows".into()));
    }
    let mut s = DVector::zeros(n);
    let mut diag = 0.0;
    for (i, &e) in errors.iter().enumerate() {
        let (score, second) = dist
            .log_derivatives(e)
            .ok_or_else(|| Error::InvalidArgument(format!("{dist} has no closed-form density here")))?;
        s[i] = score;
        diag += gtilde.row(i).norm_squared() * (second - score * score);
    }
    let skat = gtilde.tr_mul(&s).norm_squared() / n as f64;
    Ok((skat + diag / n as f64, skat))
}

pub fn quad_equivalence_check(
    dist: ErrorDist,
    n_grid: &[usize],
    replicates: usize,
    p: usize,
    seed: u64,
) -> Result<Vec<EquivalenceRow>> {
    let info = dist
        .fisher_information()
        .ok_or_else(|| Error::InvalidArgument(format!("{dist} has no closed-form density here")))?;
    if replicates < 2 {
        return Err(Error::InvalidArgument("need at least 2 replicates".into()));
    }
    let mut maf_rng = derive_rng(seed, DOMAIN_MAF, 0);
    let mafs: Vec<f64> = (0..p).map(|_| maf_rng.random_range(0.05..0.5)).collect();
    n_grid
        .iter()
        .enumerate()
        .map(|(gi, &n)| {
            let draws: Vec<(f64, f64)> = (0..replicates)
                .into_par_iter()
                .map(|r| {
                    let mut rng = derive_rng(seed, DOMAIN_REPLICATE, ((gi as u64) << 32) | r as u64);
                    let z = simulate_covariates(n, &mut rng)?;
                    let g = genotypes_with_mafs(n, &mafs, 0.5, &mut rng);
                    let fit = NullFit::projector_only(&z)?;
                    let gt = fit.project_matrix(&g)?;
                    let errors: Vec<f64> = (0..n).map(|_| dist.draw(&mut rng)).collect();
                    let (quad, skat) = quad_and_skat(&gt, &errors, dist)?;
                    Ok((quad - skat, gt.norm_squared() / n as f64))
                })
                .collect::<Result<_>>()?;
            let k = replicates as f64;
            let mean_diff = draws.iter().map(|d| d.0).sum::<f64>() / k;
            let var_diff = draws.iter().map(|d| (d.0 - mean_diff).powi(2)).sum::<f64>() / (k - 1.0);
            let mean_trace = draws.iter().map(|d| d.1).sum::<f64>() / k;
            let centered: Vec<f64> = draws.iter().map(|d| d.0 + info * d.1).collect();
            let mean_centered = centered.iter().sum::<f64>() / k;
            let var_c = centered.iter().map(|c| (c - mean_centered).powi(2)).sum::<f64>() / (k - 1.0);
            Ok(EquivalenceRow {
                n,
                replicates,
                mean_diff,
                var_diff,
                mean_trace,
                mean_centered,
                se_centered: (var_c / k).sqrt(),
                fisher_information: info,
            })
        })
        .collect()
}

pub fn write_equivalence_table<W: Write>(dist: ErrorDist, rows: &[EquivalenceRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "error_dist\tn\treplicates\tmean_diff\tvar_diff\tmean_trace\texpected_diff\tmean_centered\tse_centered"
    )?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            dist,
            r.n,
            r.replicates,
            r.mean_diff,
            r.var_diff,
            r.mean_trace,
            -r.fisher_information * r.mean_trace,
            r.mean_centered,
            r.se_centered
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fit_null;

    fn mean_var(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn error_moments() {
        let (m, v) = mean_var(&sample_error(ErrorDist::StdNormal, 1_000_000, 1));
        assert!(m.abs() < 0.004 && (v - 1.0).abs() < 0.01);
        // δ-representation mean: 5 δ √(2/π), δ = 10/√101.
        let oracle = 5.0 * (10.0 / 101f64.sqrt()) * (2.0 / std::f64::consts::PI).sqrt();
        assert!((oracle - 3.9697).abs() < 1e-4);
        let (m, _) = mean_var(&sample_error(ErrorDist::SkewNormal, 1_000_000, 2));
        assert!((m - oracle).abs() < 0.02);
        let (m, _) = mean_var(&sample_error(ErrorDist::BimodalNormal, 1_000_000, 3));
        assert!((m - 3.5).abs() < 0.02);
        let (m, v) = mean_var(&sample_error(ErrorDist::ChiSq5, 200_000, 4));
        assert!((m - 5.0).abs() < 0.05 && (v - 10.0).abs() < 0.3);
        let (m, _) = mean_var(&sample_error(ErrorDist::LogNormal, 200_000, 5));
        assert!((m - 0.5f64.exp()).abs() < 0.03);
        assert_eq!(sample_error(ErrorDist::StudentT3, 10, 6), sample_error(ErrorDist::StudentT3, 10, 6));
    }

    #[test]
    fn analytic_log_derivatives_match_finite_differences() {
        let t3_log_density = |x: f64| -2.0 * (1.0 + x * x / 3.0).ln();
        let h = 1e-4;
        for x in [-3.0, -0.7, 0.0, 0.4, 2.2] {
            let (s, r) = ErrorDist::StudentT3.log_derivatives(x).unwrap();
            let d1 = (t3_log_density(x + h) - t3_log_density(x - h)) / (2.0 * h);
            let d2 = (t3_log_density(x + h) - 2.0 * t3_log_density(x) + t3_log_density(x - h)) / (h * h);
            assert!((s - d1).abs() < 1e-7);
            // f''/f = (log f)'' + ((log f)')².
            assert!((r - (d2 + d1 * d1)).abs() < 1e-5);
        }
        assert!(ErrorDist::LogNormal.log_derivatives(1.0).is_none());
    }

    #[test]
    fn fisher_information_by_quadrature() {
        // E[(f'/f)²] for t₃ by trapezoid on a wide grid.
        let c = 2.0 / (3f64.sqrt() * std::f64::consts::PI);
        let density = |x: f64| c * (1.0 + x * x / 3.0).powi(-2);
        let (lo, hi, k) = (-400.0, 400.0, 800_001);
        let step = (hi - lo) / (k - 1) as f64;
        let (mut info, mut mass, mut second) = (0.0, 0.0, 0.0);
        for i in 0..k {
            let x = lo + step * i as f64;
            let (s, r) = ErrorDist::StudentT3.log_derivatives(x).unwrap();
            info += s * s * density(x) * step;
            second += r * density(x) * step;
            mass += density(x) * step;
        }
        assert!((mass - 1.0).abs() < 1e-5);
        assert!((info - ErrorDist::StudentT3.fisher_information().unwrap()).abs() < 1e-5);
        assert!(second.abs() < 1e-5);
    }

    #[test]
    fn beta_layouts() {
        let mut cfg = EffectConfig::sparse_unidirectional();
        let b = make_beta(&cfg, 20, ErrorDist::ChiSq5);
        assert_eq!(b.iter().filter(|&&v| v == 0.3).count(), 2);
        assert_eq!(b.iter().filter(|&&v| v == 0.0).count(), 18);
        assert_eq!(&b[..2], &[0.3, 0.3]);

        cfg.proportion_nonzero = 0.30;
        let b = make_beta(&cfg, 20, ErrorDist::LogNormal);
        assert_eq!(b.iter().filter(|&&v| v == 0.05).count(), 6);

        cfg.proportion_nonzero = 0.60;
        assert_eq!(make_beta(&cfg, 20, ErrorDist::StdNormal)[0], 0.03);
        assert_eq!(make_beta(&cfg, 20, ErrorDist::BimodalNormal)[0], 0.05);
        assert_eq!(make_beta(&cfg, 20, ErrorDist::LogNormal)[0], 0.02);
        assert_eq!(make_beta(&cfg, 20, ErrorDist::ChiSq5).iter().filter(|&&v| v != 0.0).count(), 12);

        let cfg = EffectConfig {
            direction: Direction::Bidirectional,
            ..EffectConfig::sparse_unidirectional()
        };
        let b = make_beta(&cfg, 20, ErrorDist::StdNormal);
        assert_eq!(&b[..2], &[0.2, -0.2]);
        let cfg = EffectConfig {
            beta_magnitude: Some(0.7),
            ..cfg
        };
        assert_eq!(make_beta(&cfg, 20, ErrorDist::StdNormal)[0], 0.7);
    }

    #[test]
    fn genotype_generator_properties() {
        // Independent SNPs: adjacent correlation near zero.
        let mut rng = derive_rng(1, 9, 0);
        let cfg = SimGenotypeConfig {
            ld_rho: 0.0,
            ..SimGenotypeConfig::new(20_000, 4)
        };
        let g = simulate_genotypes(&cfg, &mut rng).unwrap();
        let corr = column_corr(&g.values, 0, 1);
        assert!(corr.abs() < 3.0 / (20_000f64).sqrt(), "corr = {corr}");
        for j in 0..4 {
            let freq = g.values.column(j).sum() / (2.0 * 20_000.0);
            let maf = g.mafs[j];
            let se = (maf * (1.0 - maf) / 40_000.0).sqrt();
            assert!((freq - maf).abs() < 3.0 * se, "freq {freq} vs maf {maf}");
        }

        let mut rng = derive_rng(2, 9, 0);
        let g = genotypes_with_mafs(100_000, &[0.5, 0.5], 0.9, &mut rng);
        let mean = g.column(0).mean();
        let se = (0.5f64 / 100_000.0).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se);
        assert!(column_corr(&g, 0, 1) > 0.5);
    }

    fn column_corr(g: &DMatrix<f64>, a: usize, b: usize) -> f64 {
        let (x, y) = (g.column(a), g.column(b));
        let (mx, my) = (x.mean(), y.mean());
        let cov = x.iter().zip(y.iter()).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>();
        let vx = x.iter().map(|u| (u - mx).powi(2)).sum::<f64>();
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn phenotype_generation() {
        let mut rng = derive_rng(3, 9, 0);
        let z = simulate_covariates(50, &mut rng).unwrap();
        let g = DMatrix::from_fn(50, 3, |i, j| ((i + j) % 3) as f64);
        let zero = vec![0.0; 50];
        let y = phenotype_from_errors(&z, &DEFAULT_ALPHA, &g, &[0.0; 3], Link::Identity, &zero).unwrap();
        let expect = z.values() * DVector::from_column_slice(&DEFAULT_ALPHA);
        assert_eq!(y, expect);

        let a = simulate_phenotype(&z, &DEFAULT_ALPHA, &g, &[0.0; 3], Link::Identity, ErrorDist::ChiSq5, &mut derive_rng(4, 9, 0)).unwrap();
        let b = simulate_phenotype(&z, &DEFAULT_ALPHA, &g, &[0.0; 3], Link::Quadratic, ErrorDist::ChiSq5, &mut derive_rng(4, 9, 0)).unwrap();
        assert_eq!(a, b);

        let q = phenotype_from_errors(&z, &DEFAULT_ALPHA, &g, &[0.5, 0.0, 0.0], Link::Quadratic, &zero).unwrap();
        for i in 0..50 {
            assert!((q[i] - expect[i] - (0.5 * g[(i, 0)]).powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn null_fit_recovers_alpha() {
        let n = 20_000;
        let mut rng = derive_rng(5, 9, 0);
        let z = simulate_covariates(n, &mut rng).unwrap();
        let g = DMatrix::zeros(n, 1);
        let y = simulate_phenotype(&z, &DEFAULT_ALPHA, &g, &[0.0], Link::Identity, ErrorDist::StdNormal, &mut rng).unwrap();
        let fit = fit_null(&y, &z).unwrap();
        let zm = z.values();
        let cov = zm.tr_mul(zm).try_inverse().unwrap();
        for j in 0..3 {
            let se = cov[(j, j)].sqrt();
            assert!((fit.alpha_hat()[j] - DEFAULT_ALPHA[j]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn quad_statistic_matches_literal_sums() {
        let mut rng = derive_rng(6, 9, 0);
        let g = DMatrix::from_fn(30, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e: Vec<f64> = (0..30).map(|_| ErrorDist::StudentT3.draw(&mut rng)).collect();
        let (quad, skat) = quad_and_skat(&g, &e, ErrorDist::StudentT3).unwrap();
        let (mut lq, mut ls) = (0.0, 0.0);
        for i in 0..30 {
            let (si, ri) = ErrorDist::StudentT3.log_derivatives(e[i]).unwrap();
            for j in 0..30 {
                let (sj, _) = ErrorDist::StudentT3.log_derivatives(e[j]).unwrap();
                let dot = g.row(i).dot(&g.row(j));
                ls += dot * si * sj;
                lq += if i == j { dot * ri } else { dot * si * sj };
            }
        }
        assert!((skat - ls / 30.0).abs() < 1e-10 * ls.abs());
        assert!((quad - lq / 30.0).abs() < 1e-10 * (1.0 + lq.abs()));

        // One observation, one SNP.
        let g1 = DMatrix::from_element(1, 1, 1.7);
        let (q1, s1) = quad_and_skat(&g1, &[0.6], ErrorDist::StdNormal).unwrap();
        let (s, r) = (-0.6, 0.36 - 1.0);
        assert!((q1 - s1 - 1.7 * 1.7 * (r - s * s)).abs() < 1e-14);
    }

    #[test]
    fn experiments_are_deterministic_and_trivial_levels_hold() {
        let mut cfg = ExperimentConfig::new(ErrorDist::ChiSq5, 300, 60, 42);
        cfg.p = 6;
        cfg.replicates_per_gene = 25;
        let a = type1_experiment(&cfg, &[0.05, 1.0]).unwrap();
        let b = type1_experiment(&cfg, &[0.05, 1.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 18);
        for row in a.iter().filter(|r| r.alpha == 1.0) {
            assert_eq!(row.estimate, 1.0);
        }
        let mut buf = Vec::new();
        write_rate_table(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(RATE_HEADER));
        assert_eq!(text.lines().count(), 19);

        // Thread count does not change results.
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| type1_experiment(&cfg, &[0.05, 1.0]).unwrap());
        assert_eq!(a, c);
    }
}
