//! Residual transformations: identity (UAT), rank-based inverse normal (INT)
//! and the kernel-estimated score transformation (LPT).
//!
//! The LPT maps a residual `x` to `ψ̂(x) = -f̂'(x) / f̂(x)`, where `f̂` is a
//! Gaussian-kernel density estimate fitted once on the null residuals. With
//! this sign the score of the standard normal is the identity, so Gaussian
//! data leaves the residuals (nearly) unchanged.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NullFit;
use crate::normal;

/// Default INT offset (Blom).
pub const BLOM_OFFSET: f64 = 3.0 / 8.0;

/// Kernel contributions beyond this many bandwidths are skipped when the
/// truncated evaluation path is active.
pub const TRUNCATION_BANDWIDTHS: f64 = 8.0;

/// Samples larger than this use the truncated sorted-window evaluation.
pub const EXACT_EVALUATION_MAX_N: usize = 20_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub enum BandwidthRule {
    /// `1.06 · min(sd, IQR/1.349) · n^(-1/5)`.
    #[default]
    NormalReference,
    /// `sd · n^(-1/5)`.
    FixedRate,
    Manual(f64),
}

impl fmt::Display for BandwidthRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandwidthRule::NormalReference => write!(f, "nrd"),
            BandwidthRule::FixedRate => write!(f, "rate"),
            BandwidthRule::Manual(h) => write!(f, "{h}"),
        }
    }
}

impl FromStr for BandwidthRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nrd" | "normal-reference" | "normalreference" => Ok(BandwidthRule::NormalReference),
            "rate" | "fixed-rate" | "fixedrate" => Ok(BandwidthRule::FixedRate),
            other => match other.parse::<f64>() {
                Ok(h) if h > 0.0 && h.is_finite() => Ok(BandwidthRule::Manual(h)),
                _ => Err(Error::InvalidArgument(format!(
                    "bandwidth must be 'nrd', 'rate' or a positive number, got {s:?}"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransformTag {
    #[serde(rename = "UAT")]
    Uat,
    #[serde(rename = "INT")]
    Int,
    #[serde(rename = "LPT")]
    Lpt,
}

impl TransformTag {
    pub const ALL: [TransformTag; 3] = [TransformTag::Uat, TransformTag::Int, TransformTag::Lpt];

    pub fn as_str(self) -> &'static str {
        match self {
            TransformTag::Uat => "UAT",
            TransformTag::Int => "INT",
            TransformTag::Lpt => "LPT",
        }
    }
}

impl fmt::Display for TransformTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "UAT" => Ok(TransformTag::Uat),
            "INT" => Ok(TransformTag::Int),
            "LPT" => Ok(TransformTag::Lpt),
            _ => Err(Error::InvalidArgument(format!("unknown transform {s:?}"))),
        }
    }
}

/// A residual transformation together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformKind {
    Uat,
    Int { offset: f64 },
    Lpt { bandwidth: BandwidthRule },
}

impl TransformKind {
    pub fn tag(&self) -> TransformTag {
        match self {
            TransformKind::Uat => TransformTag::Uat,
            TransformKind::Int { .. } => TransformTag::Int,
            TransformKind::Lpt { .. } => TransformTag::Lpt,
        }
    }

    pub fn from_tag(tag: TransformTag, int_offset: f64, bandwidth: BandwidthRule) -> Self {
        match tag {
            TransformTag::Uat => TransformKind::Uat,
            TransformTag::Int => TransformKind::Int { offset: int_offset },
            TransformTag::Lpt => TransformKind::Lpt { bandwidth },
        }
    }

    pub fn int() -> Self {
        TransformKind::Int {
            offset: BLOM_OFFSET,
        }
    }

    pub fn lpt() -> Self {
        TransformKind::Lpt {
            bandwidth: BandwidthRule::NormalReference,
        }
    }
}

/// Sample standard deviation (n − 1 denominator).
fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Linear-interpolation quantile of a sorted slice (Hyndman–Fan type 7).
fn sorted_quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_copy(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn check_sample(residuals: &[f64]) -> Result<()> {
    if residuals.len() < 2 {
        return Err(Error::DegenerateSample(format!(
            "need at least 2 residuals, got {}",
            residuals.len()
        )));
    }
    if residuals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("residuals".into()));
    }
    Ok(())
}

fn bandwidth_from_sorted(sorted: &[f64], rule: BandwidthRule) -> Result<f64> {
    if let BandwidthRule::Manual(h) = rule {
        if h > 0.0 && h.is_finite() {
            return Ok(h);
        }
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}")));
    }
    let n = sorted.len() as f64;
    let sd = sample_sd(sorted);
    if !(sd > 0.0) || sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::DegenerateSample("all residuals are equal".into()));
    }
    let rate = n.powf(-0.2);
    Ok(match rule {
        BandwidthRule::FixedRate => sd * rate,
        BandwidthRule::NormalReference => {
            let iqr = sorted_quantile(sorted, 0.75) - sorted_quantile(sorted, 0.25);
            // zero IQR (heavy ties): use sd
            let spread = if iqr > 0.0 { sd.min(iqr / 1.349) } else { sd };
            1.06 * spread * rate
        }
        BandwidthRule::Manual(_) => unreachable!(),
    })
}

pub fn select_bandwidth(residuals: &[f64], rule: BandwidthRule) -> Result<f64> {
    check_sample(residuals)?;
    bandwidth_from_sorted(&sorted_copy(residuals), rule)
}

/// How kernel sums are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KdeEvaluation {
    /// Exact for `n ≤ EXACT_EVALUATION_MAX_N`, truncated above.
    #[default]
    Auto,
    Exact,
    Truncated,
}

/// Frozen Gaussian-kernel density estimate of the null residuals.
#[derive(Debug, Clone)]
pub struct ScoreModel {
    sample: Vec<f64>,
    bandwidth: f64,
    floor: f64,
    evaluation: KdeEvaluation,
}

pub fn fit_score_model(residuals: &[f64], rule: BandwidthRule) -> Result<ScoreModel> {
    check_sample(residuals)?;
    let sample = sorted_copy(residuals);
    let bandwidth = bandwidth_from_sorted(&sample, rule)?;
    Ok(ScoreModel::from_sorted(sample, bandwidth))
}

impl ScoreModel {
    fn from_sorted(sample: Vec<f64>, bandwidth: f64) -> Self {
        let floor = normal::FRAC_1_SQRT_2PI / (sample.len() as f64 * bandwidth) * 1e-8;
        ScoreModel {
            sample,
            bandwidth,
            floor,
            evaluation: KdeEvaluation::Auto,
        }
    }

    /// Builds a model with an explicit bandwidth, without the `n ≥ 2` check.
    /// Mostly useful for checking the kernel formulas on tiny samples.
    pub fn with_bandwidth(sample: &[f64], bandwidth: f64) -> Result<Self> {
        if sample.is_empty() || !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidArgument(
                "need a nonempty sample and a positive bandwidth".into(),
            ));
        }
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("sample".into()));
        }
        Ok(Self::from_sorted(sorted_copy(sample), bandwidth))
    }

    pub fn with_evaluation(mut self, evaluation: KdeEvaluation) -> Self {
        self.evaluation = evaluation;
        self
    }

    pub fn sample(&self) -> &[f64] {
        &self.sample
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn n(&self) -> usize {
        self.sample.len()
    }

    fn truncated(&self) -> bool {
        match self.evaluation {
            KdeEvaluation::Auto => self.sample.len() > EXACT_EVALUATION_MAX_N,
            KdeEvaluation::Exact => false,
            KdeEvaluation::Truncated => true,
        }
    }

    /// Sample points that contribute at `x`.
    fn window(&self, x: f64) -> &[f64] {
        if !self.truncated() {
            return &self.sample;
        }
        let reach = TRUNCATION_BANDWIDTHS * self.bandwidth;
        let lo = self.sample.partition_point(|&r| r < x - reach);
        let hi = self.sample.partition_point(|&r| r <= x + reach);
        &self.sample[lo..hi]
    }

    /// Unnormalized kernel sums `Σ K̃(u)` and `Σ K̃(u)·u`, `u = (r − x)/h`,
    /// with `K̃(u) = exp(−u²/2)`.
    fn kernel_sums(&self, x: f64) -> (f64, f64) {
        let inv_h = 1.0 / self.bandwidth;
        self.window(x).iter().fold((0.0, 0.0), |(s0, s1), &r| {
            let u = (r - x) * inv_h;
            let k = (-0.5 * u * u).exp();
            (s0 + k, s1 + k * u)
        })
    }

    fn scale(&self) -> f64 {
        normal::FRAC_1_SQRT_2PI / (self.sample.len() as f64 * self.bandwidth)
    }

    /// `f̂(x)`, floored at [`ScoreModel::floor`].
    pub fn density(&self, x: f64) -> f64 {
        let (s0, _) = self.kernel_sums(x);
        (s0 * self.scale()).max(self.floor)
    }

    /// `f̂'(x)`.
    pub fn density_derivative(&self, x: f64) -> f64 {
        let (_, s1) = self.kernel_sums(x);
        s1 * self.scale() / self.bandwidth
    }

    /// `ψ̂(x) = −f̂'(x) / f̂(x)`. Where the floor is active the floored
    /// density is flat and the score is 0.
    pub fn score(&self, x: f64) -> f64 {
        let (s0, s1) = self.kernel_sums(x);
        let scale = self.scale();
        let f = s0 * scale;
        if f < self.floor {
            return 0.0;
        }
        -(s1 * scale / self.bandwidth) / f
    }

    /// `ψ̂` at every sample point, in sorted-sample order.
    ///
    /// Each pair of sample points is visited once and contributes to both
    /// endpoints, halving the kernel evaluations of the direct route.
    pub fn scores_at_sample(&self) -> Vec<f64> {
        let r = &self.sample;
        let n = r.len();
        let h = self.bandwidth;
        let inv_h = 1.0 / h;
        let reach = TRUNCATION_BANDWIDTHS * h;
        let truncated = self.truncated();
        // The own kernel contributes K̃(0) = 1 and nothing to the derivative.
        let mut s0 = vec![1.0; n];
        let mut s1 = vec![0.0; n];
        let mut end = 0;
        for i in 0..n {
            let ri = r[i];
            end = if truncated {
                let mut e = end.max(i + 1);
                while e < n && r[e] - ri <= reach {
                    e += 1;
                }
                e
            } else {
                n
            };
            let (mut acc0, mut acc1) = (0.0, 0.0);
            let (tail0, tail1) = (&mut s0[i + 1..end], &mut s1[i + 1..end]);
            for ((&rj, t0), t1) in r[i + 1..end].iter().zip(tail0).zip(tail1) {
                let u = (rj - ri) * inv_h;
                let k = (-0.5 * u * u).exp();
                let ku = k * u;
                acc0 += k;
                acc1 += ku;
                *t0 += k;
                *t1 -= ku;
            }
            s0[i] += acc0;
            s1[i] += acc1;
        }
        let scale = self.scale();
        s0.iter()
            .zip(&s1)
            .map(|(&a, &b)| -(b * scale * inv_h) / (a * scale).max(self.floor))
            .collect()
    }
}

/// Free-function form of [`ScoreModel::density`].
pub fn kde_density(model: &ScoreModel, x: f64) -> f64 {
    model.density(x)
}

/// Free-function form of [`ScoreModel::score`].
pub fn kde_score(model: &ScoreModel, x: f64) -> f64 {
    model.score(x)
}

/// Rank-based inverse normal transformation with midranks for ties.
pub fn int_transform(residuals: &[f64], offset: f64) -> Result<Vec<f64>> {
    check_sample(residuals)?;
    if !(0.0..0.5).contains(&offset) {
        return Err(Error::InvalidArgument(format!(
            "INT offset must lie in [0, 0.5), got {offset}"
        )));
    }
    let n = residuals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| residuals[a].total_cmp(&residuals[b]));
    let denom = n as f64 - 2.0 * offset + 1.0;
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && residuals[order[end]] == residuals[order[start]] {
            end += 1;
        }
        // Ranks start..end (1-based start+1..=end) share their mean.
        let midrank = (start + end + 1) as f64 / 2.0;
        let z = normal::quantile((midrank - offset) / denom);
        for &idx in &order[start..end] {
            out[idx] = z;
        }
        start = end;
    }
    Ok(out)
}

/// Transformation of the null residuals, computed once per analysis.
#[derive(Debug, Clone)]
pub struct TransformOutput {
    pub kind: TransformKind,
    pub y_psi: DVector<f64>,
    pub model: Option<ScoreModel>,
}

/// Applies `kind` to a residual vector.
pub fn transform_residuals(
    kind: TransformKind,
    residuals: &[f64],
) -> Result<(Vec<f64>, Option<ScoreModel>)> {
    match kind {
        TransformKind::Uat => Ok((residuals.to_vec(), None)),
        TransformKind::Int { offset } => Ok((int_transform(residuals, offset)?, None)),
        TransformKind::Lpt { bandwidth } => {
            check_sample(residuals)?;
            let mut order: Vec<usize> = (0..residuals.len()).collect();
            order.sort_by(|&a, &b| residuals[a].total_cmp(&residuals[b]));
            let sorted: Vec<f64> = order.iter().map(|&i| residuals[i]).collect();
            let h = bandwidth_from_sorted(&sorted, bandwidth)?;
            let model = ScoreModel::from_sorted(sorted, h);
            let sorted_scores = model.scores_at_sample();
            let mut out = vec![0.0; residuals.len()];
            for (&idx, s) in order.iter().zip(sorted_scores) {
                out[idx] = s;
            }
            Ok((out, Some(model)))
        }
    }
}

pub fn apply_transform(kind: TransformKind, fit: &NullFit) -> Result<TransformOutput> {
    let (y, model) = transform_residuals(kind, fit.residuals().as_slice())?;
    Ok(TransformOutput {
        kind,
        y_psi: DVector::from_vec(y),
        model,
    })
}
