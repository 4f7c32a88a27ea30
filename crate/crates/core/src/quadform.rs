//! Null law of quadratic-form statistics: `Q ~ Σ λ_j χ²₁`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest are dropped.
pub const DROP_RELATIVE: f64 = 1e-12;
/// Negative eigenvalues beyond this fraction of the largest are an error.
pub const NEGATIVE_RELATIVE: f64 = 1e-10;

/// Minimum replicate count accepted by [`pvalue_monte_carlo`].
pub const MIN_MC_REPS: usize = 10_000;

/// Weights of a mixture of independent `χ²₁` variables, sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiSquareMixture {
    lambdas: Vec<f64>,
}

impl ChiSquareMixture {
    /// Validates, sorts and prunes `lambdas`.
    pub fn new(mut lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFiniteInput("mixture weights".into()));
        }
        lambdas.sort_by(|a, b| b.total_cmp(a));
        let max = lambdas.first().copied().unwrap_or(0.0);
        if !(max > 0.0) {
            return Err(Error::AllZero);
        }
        if let Some(&min) = lambdas.last() {
            if min < -NEGATIVE_RELATIVE * max {
                return Err(Error::NotPsd(format!(
                    "eigenvalue {min:e} against largest {max:e}"
                )));
            }
        }
        lambdas.retain(|&l| l > DROP_RELATIVE * max);
        Ok(Self { lambdas })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// `Σ λ_j^k`.
    fn power_sum(&self, k: i32) -> f64 {
        self.lambdas.iter().map(|l| l.powi(k)).sum()
    }

    pub fn mean(&self) -> f64 {
        self.power_sum(1)
    }

    pub fn variance(&self) -> f64 {
        2.0 * self.power_sum(2)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.lambdas.iter().map(|l| l * c).collect())
    }
}

fn symmetric_eigenvalues(m: DMatrix<f64>) -> Result<Vec<f64>> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::NumericalFailure("symmetric eigensolver did not converge".into()))?;
    Ok(eig.eigenvalues.iter().copied().collect())
}

/// `G̃ᵀG̃ / n`.
pub fn gram(gtilde: &DMatrix<f64>) -> DMatrix<f64> {
    gtilde.tr_mul(gtilde) / gtilde.nrows() as f64
}

/// Mixture from an already formed `p × p` covariance `Σ̂`.
pub fn mixture_from_covariance(sigma: &DMatrix<f64>) -> Result<ChiSquareMixture> {
    if sigma.iter().all(|&v| v == 0.0) {
        return Err(Error::AllZero);
    }
    ChiSquareMixture::new(symmetric_eigenvalues(sigma.clone())?)
}

/// Eigenvalues of `G̃ᵀG̃ / n`.
pub fn mixture_from_gram(gtilde: &DMatrix<f64>) -> Result<ChiSquareMixture> {
    if gtilde.ncols() == 0 || gtilde.nrows() == 0 {
        return Err(Error::DimensionMismatch("empty genotype block".into()));
    }
    mixture_from_covariance(&gram(gtilde))
}

/// Symmetric PSD square root, checking symmetry and PSD within tolerance.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "weight matrix is {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.amax();
    if (a - a.transpose()).amax() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd("matrix is not symmetric".into()));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::NumericalFailure("symmetric eigensolver did not converge".into()))?;
    let norm = eig.eigenvalues.amax();
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min < -1e-10 * norm {
            return Err(Error::NotPsd(format!("eigenvalue {min:e}")));
        }
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Eigenvalues of `A^{1/2} Σ̂ A^{1/2}`: the null law of `rᵀG̃AG̃ᵀr`.
pub fn weighted_mixture_from_covariance(
    sigma: &DMatrix<f64>,
    a: &DMatrix<f64>,
) -> Result<ChiSquareMixture> {
    if a.shape() != sigma.shape() {
        return Err(Error::DimensionMismatch(format!(
            "weight matrix {:?} against covariance {:?}",
            a.shape(),
            sigma.shape()
        )));
    }
    let root = psd_sqrt(a)?;
    let m = &root * sigma * &root;
    if m.iter().all(|&v| v == 0.0) {
        return Err(Error::AllZero);
    }
    ChiSquareMixture::new(symmetric_eigenvalues(m)?)
}

pub fn weighted_mixture(gtilde: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<ChiSquareMixture> {
    weighted_mixture_from_covariance(&gram(gtilde), a)
}

/// Upper tail of a (noncentral) chi-square with real `df > 0`.
fn chi_square_sf(df: f64, noncentrality: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if noncentrality <= 0.0 {
        return gamma_ur(df / 2.0, x / 2.0);
    }
    // Poisson(δ/2) mixture of central tails, summed outward from the mode.
    let half = noncentrality / 2.0;
    let log_weight = |k: f64| -half + k * half.ln() - ln_gamma(k + 1.0);
    let mode = half.floor();
    let term = |k: f64| log_weight(k).exp() * gamma_ur(df / 2.0 + k, x / 2.0);
    let mut total = term(mode);
    let mut k = mode + 1.0;
    loop {
        let w = log_weight(k).exp();
        total += w * gamma_ur(df / 2.0 + k, x / 2.0);
        if w < 1e-17 && k > half {
            break;
        }
        k += 1.0;
    }
    let mut k = mode - 1.0;
    while k >= 0.0 {
        let w = log_weight(k).exp();
        total += w * gamma_ur(df / 2.0 + k, x / 2.0);
        if w < 1e-17 {
            break;
        }
        k -= 1.0;
    }
    total
}

/// Four-cumulant match of `Σ λ_j χ²₁` to a scaled, shifted noncentral χ².
pub fn pvalue_moment_match(mix: &ChiSquareMixture, q: f64) -> f64 {
    const MIN_P: f64 = 1e-300;
    if q.is_nan() {
        return 1.0;
    }
    if q <= 0.0 {
        return 1.0;
    }
    let c1 = mix.power_sum(1);
    let c2 = mix.power_sum(2);
    let c3 = mix.power_sum(3);
    let c4 = mix.power_sum(4);
    let s1 = c3 / c2.powf(1.5);
    let s2 = c4 / (c2 * c2);
    let (a, delta, df) = if s1 * s1 > s2 {
        let a = 1.0 / (s1 - (s1 * s1 - s2).sqrt());
        let delta = s1 * a * a * a - a * a;
        (a, delta, a * a - 2.0 * delta)
    } else {
        let a = 1.0 / s1;
        (a, 0.0, 1.0 / (s1 * s1))
    };
    let t_star = (q - c1) / (2.0 * c2).sqrt();
    let x = t_star * std::f64::consts::SQRT_2 * a + df + delta;
    chi_square_sf(df, delta, x).clamp(MIN_P, 1.0)
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Gauss–Kronrod 7/15 on `[a, b]`, returning `(integral, error estimate)`.
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(mid);
    let mut kronrod = fc * GK_WEIGHTS[7];
    let mut gauss = fc * GAUSS_WEIGHTS[3];
    for i in 0..7 {
        let dx = half * GK_NODES[i];
        let pair = f(mid - dx) + f(mid + dx);
        kronrod += GK_WEIGHTS[i] * pair;
        if i % 2 == 1 {
            gauss += GAUSS_WEIGHTS[i / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

fn adaptive_gk(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> (f64, bool) {
    let (value, err) = gk15(f, a, b);
    if err <= tol || depth == 0 {
        return (value, err <= tol);
    }
    let mid = 0.5 * (a + b);
    let (left, ok_l) = adaptive_gk(f, a, mid, 0.5 * tol, depth - 1);
    let (right, ok_r) = adaptive_gk(f, mid, b, 0.5 * tol, depth - 1);
    (left + right, ok_l && ok_r)
}

/// Wynn's epsilon extrapolation of a sequence of partial sums.
fn wynn_epsilon(sums: &[f64]) -> f64 {
    let n = sums.len();
    let mut prev = vec![0.0; n + 1];
    let mut cur: Vec<f64> = sums.to_vec();
    let mut best = sums[n - 1];
    let mut column = 0;
    while cur.len() > 1 {
        let next: Vec<f64> = (0..cur.len() - 1)
            .map(|i| {
                let diff = cur[i + 1] - cur[i];
                if diff == 0.0 {
                    f64::INFINITY
                } else {
                    prev[i + 1] + 1.0 / diff
                }
            })
            .collect();
        column += 1;
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        if column % 2 == 0 {
            best = next[next.len() - 1];
        }
        prev = cur;
        cur = next;
    }
    best
}

/// Upper tail of `Σ λ_j χ²₁` by numerical inversion of the characteristic
/// function, `½ + π⁻¹ ∫₀^∞ sin θ(u) / (u ρ(u)) du`. The oscillatory integral
/// is summed over half-periods of `sin(qu/2)` and extrapolated. Returns
/// `None` when the extrapolation does not settle.
pub fn pvalue_imhof(mix: &ChiSquareMixture, q: f64) -> Option<f64> {
    if q.is_nan() {
        return None;
    }
    if q <= 0.0 {
        return Some(1.0);
    }
    let top = mix.lambdas[0];
    let lambdas: Vec<f64> = mix.lambdas.iter().map(|l| l / top).collect();
    let x = q / top;
    if lambdas.len() == 1 {
        return Some(gamma_ur(0.5, x / 2.0));
    }
    let slope = 0.5 * (lambdas.iter().sum::<f64>() - x);
    let integrand = |u: f64| {
        if u < 1e-200 {
            return slope;
        }
        let mut theta = -0.5 * x * u;
        let mut log_rho = 0.0;
        for &l in &lambdas {
            let lu = l * u;
            theta += 0.5 * lu.atan();
            log_rho += 0.25 * (lu * lu).ln_1p();
        }
        theta.sin() / (u * log_rho.exp())
    };
    // Tail bound |∫_U^∞| ≤ 2 / (k U^{k/2} Π l^{1/2}) with k = len.
    let k = lambdas.len() as f64;
    let log_prod: f64 = lambdas.iter().map(|l| 0.5 * l.ln()).sum();
    let tail_bound = |u: f64| 2.0 / k * (-(0.5 * k * u.ln() + log_prod)).exp();

    const TOL: f64 = 1e-14;
    const MAX_PIECES: usize = 20_000;
    const WINDOW: usize = 40;
    let width = (2.0 * std::f64::consts::PI / x).min(8.0);
    let mut total = 0.0;
    let mut sums: Vec<f64> = Vec::new();
    let mut last_estimate = f64::NAN;
    let mut stable = 0;
    for piece in 0..MAX_PIECES {
        let a = piece as f64 * width;
        let b = a + width;
        let (value, ok) = adaptive_gk(&integrand, a, b, TOL, 30);
        if !ok {
            return None;
        }
        total += value;
        if tail_bound(b) < TOL {
            return Some(finish_imhof(total));
        }
        sums.push(total);
        if sums.len() > WINDOW {
            sums.remove(0);
        }
        if sums.len() >= 8 {
            let estimate = wynn_epsilon(&sums);
            if (estimate - last_estimate).abs() <= 1e-13 {
                stable += 1;
                if stable >= 3 {
                    return Some(finish_imhof(estimate));
                }
            } else {
                stable = 0;
            }
            last_estimate = estimate;
        }
    }
    None
}

fn finish_imhof(integral: f64) -> f64 {
    let p = 0.5 + integral / std::f64::consts::PI;
    p.clamp(0.0, 1.0)
}

/// Smallest tail the inversion reports before deferring to moment matching.
pub const INVERSION_FLOOR: f64 = 1e-9;

/// Default analytic tail: characteristic-function inversion, with the
/// four-cumulant approximation below [`INVERSION_FLOOR`] or on failure.
pub fn pvalue_mixture(mix: &ChiSquareMixture, q: f64) -> f64 {
    match pvalue_imhof(mix, q) {
        Some(p) if p >= INVERSION_FLOOR => p,
        _ => pvalue_moment_match(mix, q),
    }
}

/// Monte Carlo tail estimate `(hits + 1) / (reps + 1)`.
pub fn pvalue_monte_carlo(mix: &ChiSquareMixture, q: f64, reps: usize, seed: u64) -> Result<f64> {
    if reps < MIN_MC_REPS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_MC_REPS} Monte Carlo replicates, got {reps}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits: u64 = 0;
    for _ in 0..reps {
        let mut draw = 0.0;
        for &l in &mix.lambdas {
            let z: f64 = StandardNormal.sample(&mut rng);
            draw += l * z * z;
        }
        if draw > q {
            hits += 1;
        }
    }
    Ok((hits as f64 + 1.0) / (reps as f64 + 1.0))
}

/// Standard error of a Monte Carlo tail estimate at `p`.
pub fn monte_carlo_se(p: f64, reps: usize) -> f64 {
    (p * (1.0 - p) / reps as f64).sqrt()
}


#[cfg(test)]
mod inversion_tests {
    use super::*;

    fn mix(l: &[f64]) -> ChiSquareMixture {
        ChiSquareMixture::new(l.to_vec()).unwrap()
    }

    #[test]
    fn closed_forms() {
        // Two χ²₂ blocks: (λ₁e^{−q/2λ₁} − λ₂e^{−q/2λ₂}) / (λ₁ − λ₂).
        for &(l1, l2) in &[(3.0, 1.0), (1.0, 0.01), (5.0, 4.0), (1.0, 0.2)] {
            let m = mix(&[l1, l1, l2, l2]);
            for &q in &[0.5, 3.0, 10.0, 40.0, 90.0] {
                let exact = (l1 * (-q / (2.0 * l1)).exp() - l2 * (-q / (2.0 * l2)).exp()) / (l1 - l2);
                let got = pvalue_imhof(&m, q).unwrap();
                assert!((got - exact).abs() < 1e-11 * exact.max(1e-3), "{l1} {l2} {q}: {got} vs {exact}");
            }
        }
        // Equal weights: central χ²_k.
        for k in 2..7 {
            let m = mix(&vec![2.0; k]);
            for &q in &[1.0, 8.0, 30.0] {
                let exact = gamma_ur(k as f64 / 2.0, q / 4.0);
                let got = pvalue_imhof(&m, q).unwrap();
                assert!((got - exact).abs() < 1e-11, "{k} {q}: {got} vs {exact}");
            }
        }
    }

    #[test]
    fn ill_conditioned_and_long_mixtures() {
        let long: Vec<f64> = (0..60).map(|j| 0.9f64.powi(j)).collect();
        let m = mix(&long);
        let mean = m.mean();
        let p = pvalue_imhof(&m, mean).unwrap();
        assert!(p > 0.3 && p < 0.6);
        let m = mix(&[1.0, 1e-3, 1e-6]);
        let p = pvalue_imhof(&m, 3.841_459).unwrap();
        assert!((p - 0.0500).abs() < 2e-3, "{p}");
    }

    #[test]
    fn default_tail_falls_back_in_far_tail() {
        let m = mix(&[3.0, 1.0, 0.5, 0.2]);
        assert_eq!(pvalue_mixture(&m, 400.0), pvalue_moment_match(&m, 400.0));
        assert_eq!(pvalue_mixture(&m, 9.0), pvalue_imhof(&m, 9.0).unwrap());
    }
}
