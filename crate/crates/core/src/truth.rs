//! Data-generating densities and the expectations taken under them.
//!
//! A [`TrueDensity`] is the `p₀` of the i.i.d. setting; a
//! [`ConditionalTrueDensity`] maps each covariate point to one. The KL
//! objects, the α-affinity and `g_α` are all one-dimensional expectations and
//! are computed with [`crate::quadrature`], with panels aligned to the ALD
//! kinks so the adaptive error estimates stay honest.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::{beta::beta_reg, erf::erfc, gamma::ln_gamma};
use thiserror::Error;

use crate::ald::{ald_log_pdf, ald_log_ratio, AldWorkingModel, TauLevel};
use crate::design::{CovariateSpace, ThetaFamily};
use crate::quadrature::{integrate_line, Estimate, QuadratureError, QuadratureRule};

/// α values used for the `g_α → KL` limit checks and the α′ searches.
pub const ALPHA_GRID: [f64; 6] = [0.5, 0.25, 0.1, 0.05, 0.01, 0.001];

/// Bisection stops once the bracket is this narrow.
pub const QUANTILE_TOL: f64 = 1e-10;
const FLAT_CDF_LEVEL: f64 = 1e-12;
const FLAT_CDF_WIDTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TruthError {
    #[error("invalid {field}: {message}")]
    InvalidParameter { field: &'static str, message: String },
    #[error("τ-quantile is not unique: cdf is flat at level {tau} on [{lower}, {upper}]")]
    NonUniqueQuantile { tau: f64, lower: f64, upper: f64 },
    #[error("α must lie in (0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("expectation diverges: {0}")]
    InfiniteMoment(&'static str),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mu: f64,
    pub sigma: f64,
}

/// Shipped data-generating densities. All have closed-form cdfs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrueDensity {
    Gaussian {
        mu: f64,
        sigma: f64,
    },
    StudentT {
        nu: f64,
        center: f64,
        scale: f64,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
    /// Two-piece normal: half-normals with different scales glued at `mode`.
    Skewed {
        mode: f64,
        left_scale: f64,
        right_scale: f64,
    },
    /// Mixture of `U(left)` and `U(right)` with a gap between them.
    SplitUniform {
        left: (f64, f64),
        right: (f64, f64),
        left_weight: f64,
    },
}

#[inline]
fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

#[inline]
fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

fn bad(field: &'static str, message: impl Into<String>) -> TruthError {
    TruthError::InvalidParameter { field, message: message.into() }
}

impl TrueDensity {
    pub fn gaussian(mu: f64, sigma: f64) -> Self {
        TrueDensity::Gaussian { mu, sigma }
    }

    pub fn student_t(nu: f64, center: f64, scale: f64) -> Self {
        TrueDensity::StudentT { nu, center, scale }
    }

    pub fn validate(&self) -> Result<(), TruthError> {
        let finite = |v: f64| v.is_finite();
        match self {
            TrueDensity::Gaussian { mu, sigma } => {
                if !finite(*mu) {
                    return Err(bad("mu", "must be finite"));
                }
                if !(finite(*sigma) && *sigma > 0.0) {
                    return Err(bad("sigma", "must be positive"));
                }
            }
            TrueDensity::StudentT { nu, center, scale } => {
                if !(finite(*nu) && *nu >= 1.0) {
                    return Err(bad("nu", "degrees of freedom must be >= 1"));
                }
                if !finite(*center) {
                    return Err(bad("center", "must be finite"));
                }
                if !(finite(*scale) && *scale > 0.0) {
                    return Err(bad("scale", "must be positive"));
                }
            }
            TrueDensity::Mixture { components } => {
                if components.is_empty() {
                    return Err(bad("components", "need at least one component"));
                }
                let mut total = 0.0;
                for c in components {
                    if !(finite(c.weight) && c.weight > 0.0) {
                        return Err(bad("components.weight", "must be positive"));
                    }
                    if !finite(c.mu) || !(finite(c.sigma) && c.sigma > 0.0) {
                        return Err(bad("components", "mu finite and sigma positive required"));
                    }
                    total += c.weight;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(bad("components.weight", format!("weights sum to {total}, not 1")));
                }
            }
            TrueDensity::Skewed { mode, left_scale, right_scale } => {
                if !finite(*mode) {
                    return Err(bad("mode", "must be finite"));
                }
                if !(finite(*left_scale) && *left_scale > 0.0 && finite(*right_scale) && *right_scale > 0.0) {
                    return Err(bad("left_scale", "both scales must be positive"));
                }
            }
            TrueDensity::SplitUniform { left, right, left_weight } => {
                let ok = [left.0, left.1, right.0, right.1].iter().all(|v| v.is_finite())
                    && left.0 < left.1
                    && left.1 <= right.0
                    && right.0 < right.1;
                if !ok {
                    return Err(bad("left", "need left.0 < left.1 <= right.0 < right.1"));
                }
                if !(*left_weight > 0.0 && *left_weight < 1.0) {
                    return Err(bad("left_weight", "must lie in (0, 1)"));
                }
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self {
            TrueDensity::Gaussian { mu, sigma } => format!("gaussian({mu},{sigma})"),
            TrueDensity::StudentT { nu, center, scale } => format!("student_t({nu},{center},{scale})"),
            TrueDensity::Mixture { components } => format!("mixture[{}]", components.len()),
            TrueDensity::Skewed { mode, left_scale, right_scale } => {
                format!("skewed({mode},{left_scale},{right_scale})")
            }
            TrueDensity::SplitUniform { left, right, left_weight } => {
                format!("split_uniform([{},{}],[{},{}],{left_weight})", left.0, left.1, right.0, right.1)
            }
        }
    }

    pub fn pdf(&self, y: f64) -> f64 {
        match self {
            TrueDensity::Gaussian { mu, sigma } => std_normal_pdf((y - mu) / sigma) / sigma,
            TrueDensity::StudentT { nu, center, scale } => {
                let z = (y - center) / scale;
                let log_c = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln();
                (log_c - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p()).exp() / scale
            }
            TrueDensity::Mixture { components } => {
                components.iter().map(|c| c.weight * std_normal_pdf((y - c.mu) / c.sigma) / c.sigma).sum()
            }
            TrueDensity::Skewed { mode, left_scale, right_scale } => {
                let s = if y < *mode { *left_scale } else { *right_scale };
                2.0 / (left_scale + right_scale) * std_normal_pdf((y - mode) / s)
            }
            TrueDensity::SplitUniform { left, right, left_weight } => {
                if y >= left.0 && y <= left.1 {
                    left_weight / (left.1 - left.0)
                } else if y >= right.0 && y <= right.1 {
                    (1.0 - left_weight) / (right.1 - right.0)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn cdf(&self, y: f64) -> f64 {
        match self {
            TrueDensity::Gaussian { mu, sigma } => std_normal_cdf((y - mu) / sigma),
            TrueDensity::StudentT { nu, center, scale } => {
                let z = (y - center) / scale;
                if z == 0.0 {
                    return 0.5;
                }
                let z2 = z * z;
                // near the center the complementary form keeps the z² resolution
                let tail = if z2 < *nu {
                    0.5 - 0.5 * beta_reg(0.5, 0.5 * nu, z2 / (nu + z2))
                } else {
                    0.5 * beta_reg(0.5 * nu, 0.5, nu / (nu + z2))
                };
                if z > 0.0 {
                    1.0 - tail
                } else {
                    tail
                }
            }
            TrueDensity::Mixture { components } => {
                components.iter().map(|c| c.weight * std_normal_cdf((y - c.mu) / c.sigma)).sum::<f64>().min(1.0)
            }
            TrueDensity::Skewed { mode, left_scale, right_scale } => {
                let total = left_scale + right_scale;
                if y < *mode {
                    2.0 * left_scale / total * std_normal_cdf((y - mode) / left_scale)
                } else {
                    left_scale / total + 2.0 * right_scale / total * (std_normal_cdf((y - mode) / right_scale) - 0.5)
                }
            }
            TrueDensity::SplitUniform { left, right, left_weight } => {
                if y <= left.0 {
                    0.0
                } else if y <= left.1 {
                    left_weight * (y - left.0) / (left.1 - left.0)
                } else if y <= right.0 {
                    *left_weight
                } else if y <= right.1 {
                    left_weight + (1.0 - left_weight) * (y - right.0) / (right.1 - right.0)
                } else {
                    1.0
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            TrueDensity::Gaussian { mu, sigma } => mu + sigma * standard_normal(rng),
            TrueDensity::StudentT { nu, center, scale } => {
                let t = StudentT::new(*nu).expect("validated degrees of freedom");
                center + scale * t.sample(rng)
            }
            TrueDensity::Mixture { components } => {
                let mut u: f64 = rng.random();
                let last = components.len() - 1;
                for (k, c) in components.iter().enumerate() {
                    if u < c.weight || k == last {
                        return c.mu + c.sigma * standard_normal(rng);
                    }
                    u -= c.weight;
                }
                unreachable!()
            }
            TrueDensity::Skewed { mode, left_scale, right_scale } => {
                let p_left = left_scale / (left_scale + right_scale);
                let left = rng.random::<f64>() < p_left;
                let z = standard_normal(rng).abs();
                if left {
                    mode - left_scale * z
                } else {
                    mode + right_scale * z
                }
            }
            TrueDensity::SplitUniform { left, right, left_weight } => {
                let (lo, hi) = if rng.random::<f64>() < *left_weight { *left } else { *right };
                rng.random_range(lo..hi)
            }
        }
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<f64> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    /// Points where the density itself is non-smooth, plus a central point.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            TrueDensity::Gaussian { mu, .. } => vec![*mu],
            TrueDensity::StudentT { center, .. } => vec![*center],
            TrueDensity::Mixture { components } => components.iter().map(|c| c.mu).collect(),
            TrueDensity::Skewed { mode, .. } => vec![*mode],
            TrueDensity::SplitUniform { left, right, .. } => vec![left.0, left.1, right.0, right.1],
        }
    }

    fn center_and_spread(&self) -> (f64, f64) {
        match self {
            TrueDensity::Gaussian { mu, sigma } => (*mu, *sigma),
            TrueDensity::StudentT { center, scale, .. } => (*center, *scale),
            TrueDensity::Mixture { components } => {
                let lo = components.iter().map(|c| c.mu - c.sigma).fold(f64::INFINITY, f64::min);
                let hi = components.iter().map(|c| c.mu + c.sigma).fold(f64::NEG_INFINITY, f64::max);
                (0.5 * (lo + hi), 0.5 * (hi - lo))
            }
            TrueDensity::Skewed { mode, left_scale, right_scale } => (*mode, left_scale.max(*right_scale)),
            TrueDensity::SplitUniform { left, right, .. } => (0.5 * (left.0 + right.1), 0.5 * (right.1 - left.0)),
        }
    }

    /// `Y ↦ scale·Y + shift`, staying inside the shipped families.
    pub fn affine(&self, scale: f64, shift: f64) -> TrueDensity {
        assert!(scale > 0.0, "affine scale must be positive");
        match self {
            TrueDensity::Gaussian { mu, sigma } => {
                TrueDensity::Gaussian { mu: scale * mu + shift, sigma: scale * sigma }
            }
            TrueDensity::StudentT { nu, center, scale: s } => {
                TrueDensity::StudentT { nu: *nu, center: scale * center + shift, scale: scale * s }
            }
            TrueDensity::Mixture { components } => TrueDensity::Mixture {
                components: components
                    .iter()
                    .map(|c| MixtureComponent { weight: c.weight, mu: scale * c.mu + shift, sigma: scale * c.sigma })
                    .collect(),
            },
            TrueDensity::Skewed { mode, left_scale, right_scale } => TrueDensity::Skewed {
                mode: scale * mode + shift,
                left_scale: scale * left_scale,
                right_scale: scale * right_scale,
            },
            TrueDensity::SplitUniform { left, right, left_weight } => TrueDensity::SplitUniform {
                left: (scale * left.0 + shift, scale * left.1 + shift),
                right: (scale * right.0 + shift, scale * right.1 + shift),
                left_weight: *left_weight,
            },
        }
    }

    /// Whether `E e^{c|Y|}` is finite for every `c > 0`.
    pub fn has_exponential_moment(&self) -> bool {
        !matches!(self, TrueDensity::StudentT { .. })
    }

    pub fn has_first_moment(&self) -> bool {
        match self {
            TrueDensity::StudentT { nu, .. } => *nu > 1.0,
            _ => true,
        }
    }

    /// Interval on which `cdf = τ`, bracketed by bisection. A single point up
    /// to bisection tolerance when the quantile is unique.
    pub fn quantile_interval(&self, tau: TauLevel) -> (f64, f64) {
        let t = tau.value();
        let lower = self.bisect(|y| self.cdf(y) >= t);
        let upper = self.bisect(|y| self.cdf(y) > t);
        (lower, upper.max(lower))
    }

    /// Smallest `y` with `pred(y)` for a monotone predicate.
    fn bisect<P: Fn(f64) -> bool>(&self, pred: P) -> f64 {
        let (c, s) = self.center_and_spread();
        let mut step = s.max(1e-3);
        let (mut lo, mut hi) = (c - step, c + step);
        while pred(lo) {
            step *= 2.0;
            lo = c - step;
        }
        while !pred(hi) {
            step *= 2.0;
            hi = c + step;
        }
        while hi - lo > 0.01 * QUANTILE_TOL {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if pred(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

/// τ-quantile `θ₀` by bisection on the cdf.
///
/// Fails when the cdf sits within `1e-12` of `τ` on an interval wider than
/// `1e-6`.
pub fn tau_quantile(dist: &TrueDensity, tau: TauLevel) -> Result<f64, TruthError> {
    let t = tau.value();
    let flat_lo = dist.bisect(|y| dist.cdf(y) >= t - FLAT_CDF_LEVEL);
    let flat_hi = dist.bisect(|y| dist.cdf(y) > t + FLAT_CDF_LEVEL);
    if flat_hi - flat_lo > FLAT_CDF_WIDTH {
        let (lower, upper) = dist.quantile_interval(tau);
        return Err(TruthError::NonUniqueQuantile { tau: t, lower, upper });
    }
    Ok(dist.bisect(|y| dist.cdf(y) >= t))
}

/// `E[h(Y)]` under `dist`, with panel boundaries at `kinks`.
pub fn expect<H: Fn(f64) -> f64>(
    dist: &TrueDensity,
    integrand: H,
    rule: &QuadratureRule,
    kinks: &[f64],
) -> Result<Estimate, TruthError> {
    let mut breaks = dist.breakpoints();
    breaks.extend_from_slice(kinks);
    let est = integrate_line(
        |y| {
            let p = dist.pdf(y);
            if p > 0.0 {
                integrand(y) * p
            } else {
                0.0
            }
        },
        &breaks,
        rule,
    )?;
    Ok(est)
}

/// `E[log p₀(Y) − log f_t(Y)]`, the KL divergence from `p₀` to the working model.
pub fn kl_to_working(dist: &TrueDensity, t: f64, tau: TauLevel) -> Result<f64, TruthError> {
    let model = AldWorkingModel::new(t, tau);
    let rule = QuadratureRule::default();
    Ok(expect(dist, |y| dist.pdf(y).ln() - ald_log_pdf(y, &model), &rule, &[t])?.value)
}

/// `E log(f_{t*}/f_t)`.
pub fn kl_gap(dist: &TrueDensity, t: f64, t_star: f64, tau: TauLevel) -> Result<f64, TruthError> {
    if t == t_star {
        return Ok(0.0);
    }
    let rule = QuadratureRule::default();
    Ok(expect(dist, |y| ald_log_ratio(y, t_star, t, tau), &rule, &[t, t_star])?.value)
}

/// `(ε/2)·min{P₀(0 < Y−θ₀ < ε/2), P₀(−ε/2 < Y−θ₀ < 0)}`.
pub fn delta_lower_bound(dist: &TrueDensity, theta0: f64, eps: f64, _tau: TauLevel) -> f64 {
    let (above, below) = delta_window_masses(dist, theta0, eps);
    0.5 * eps * above.min(below)
}

/// The two probabilities entering [`delta_lower_bound`].
pub fn delta_window_masses(dist: &TrueDensity, theta0: f64, eps: f64) -> (f64, f64) {
    let f0 = dist.cdf(theta0);
    let above = (dist.cdf(theta0 + 0.5 * eps) - f0).max(0.0);
    let below = (f0 - dist.cdf(theta0 - 0.5 * eps)).max(0.0);
    (above, below)
}

fn check_alpha(alpha: f64) -> Result<(), TruthError> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(TruthError::AlphaOutOfRange(alpha))
    }
}

/// `E[(f_t/f_{t'})^α]`.
pub fn alpha_affinity(dist: &TrueDensity, t: f64, t_prime: f64, alpha: f64, tau: TauLevel) -> Result<f64, TruthError> {
    check_alpha(alpha)?;
    if t == t_prime {
        return Ok(1.0);
    }
    let rule = QuadratureRule::default();
    Ok(expect(dist, |y| (alpha * ald_log_ratio(y, t, t_prime, tau)).exp(), &rule, &[t, t_prime])?.value)
}

/// `g_α = (1 − E(f_t/f_{t'})^α)/α`, evaluated as `−E[expm1(α·log ratio)]/α` so
/// that small α does not cancel.
pub fn g_alpha(dist: &TrueDensity, t: f64, t_prime: f64, alpha: f64, tau: TauLevel) -> Result<f64, TruthError> {
    check_alpha(alpha)?;
    if t == t_prime {
        return Ok(0.0);
    }
    let rule = QuadratureRule::default();
    let m = expect(dist, |y| (alpha * ald_log_ratio(y, t, t_prime, tau)).exp_m1(), &rule, &[t, t_prime])?;
    Ok(-m.value / alpha)
}

/// Largest α on [`ALPHA_GRID`] with `g_α(t, t') > target`.
pub fn alpha_search(
    dist: &TrueDensity,
    t: f64,
    t_prime: f64,
    tau: TauLevel,
    target: f64,
) -> Result<Option<f64>, TruthError> {
    for &alpha in ALPHA_GRID.iter() {
        if g_alpha(dist, t, t_prime, alpha, tau)? > target {
            return Ok(Some(alpha));
        }
    }
    Ok(None)
}

/// `E|Y − c|`.
pub fn first_abs_moment(dist: &TrueDensity, center: f64) -> Result<f64, TruthError> {
    if !dist.has_first_moment() {
        return Err(TruthError::InfiniteMoment("E|Y - c|"));
    }
    Ok(expect(dist, |y| (y - center).abs(), &QuadratureRule::default(), &[center])?.value)
}

/// `E e^{|Y − c|}`.
pub fn exp_abs_moment(dist: &TrueDensity, center: f64) -> Result<f64, TruthError> {
    if !dist.has_exponential_moment() {
        return Err(TruthError::InfiniteMoment("E exp|Y - c|"));
    }
    Ok(expect(dist, |y| (y - center).abs().exp(), &QuadratureRule::default(), &[center])?.value)
}

/// The `Θ₂` boundary `3E|Y−θ₀|/min{τ,1−τ}`.
pub fn corollary1_boundary(first_abs_moment: f64, tau: TauLevel) -> f64 {
    3.0 * first_abs_moment / tau.min_slope()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffinityPoint {
    pub t: f64,
    pub affinity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailAffinityReport {
    pub theta_star: f64,
    pub tau: f64,
    pub boundary: f64,
    pub delta1: f64,
    pub threshold: f64,
    pub grid: Vec<AffinityPoint>,
    pub max_affinity: f64,
    pub grid_passes: bool,
    /// `E e^{|Y−θ*|}`, absent when infinite.
    pub exp_abs_moment: Option<f64>,
    /// Envelope bound on the affinity for every `t` beyond the grid.
    pub analytic_tail_bound: Option<f64>,
    pub analytic_tail_available: bool,
    pub analytic_tail_passes: Option<bool>,
    /// "grid-and-tail" when the analytic step covers the rest of `Θ₂`, otherwise "grid-only".
    pub claim: &'static str,
}

/// Points per side of the `Θ₂` grid; spacing is `boundary / 25`.
pub const TAIL_GRID_POINTS: usize = 101;

/// Affinity `E[f_t/f_{θ*}]` over `|t − θ*| ≥ boundary` against `e^{−δ₁}`,
/// `δ₁ = E|Y − θ*|`.
pub fn tail_affinity_audit(
    dist: &TrueDensity,
    theta_star: f64,
    tau: TauLevel,
    theta2_boundary: f64,
) -> Result<TailAffinityReport, TruthError> {
    if !(theta2_boundary > 0.0 && theta2_boundary.is_finite()) {
        return Err(bad("theta2_boundary", "must be positive and finite"));
    }
    let delta1 = first_abs_moment(dist, theta_star)?;
    let threshold = (-delta1).exp();
    let step = theta2_boundary / 25.0;
    let mut grid = Vec::with_capacity(2 * TAIL_GRID_POINTS);
    for side in [-1.0, 1.0] {
        for k in 0..TAIL_GRID_POINTS {
            let t = theta_star + side * (theta2_boundary + k as f64 * step);
            grid.push(AffinityPoint { t, affinity: alpha_affinity(dist, t, theta_star, 1.0, tau)? });
        }
    }
    let max_affinity = grid.iter().map(|p| p.affinity).fold(f64::NEG_INFINITY, f64::max);
    let grid_passes = grid.iter().all(|p| p.affinity < threshold);

    let edge = theta2_boundary + (TAIL_GRID_POINTS - 1) as f64 * step;
    let exp_moment = match exp_abs_moment(dist, theta_star) {
        Ok(v) => Some(v),
        Err(TruthError::InfiniteMoment(_)) => None,
        Err(e) => return Err(e),
    };
    let analytic_tail_bound = exp_moment.map(|m| (-edge * tau.min_slope()).exp() * m);
    let analytic_tail_passes = analytic_tail_bound.map(|b| b < threshold);
    let claim = if analytic_tail_passes == Some(true) { "grid-and-tail" } else { "grid-only" };
    Ok(TailAffinityReport {
        theta_star,
        tau: tau.value(),
        boundary: theta2_boundary,
        delta1,
        threshold,
        grid,
        max_affinity,
        grid_passes,
        exp_abs_moment: exp_moment,
        analytic_tail_bound,
        analytic_tail_available: exp_moment.is_some(),
        analytic_tail_passes,
        claim,
    })
}

/// Plain Monte Carlo mean and standard error of `h(Y)`.
pub fn monte_carlo_expect<R: Rng + ?Sized, H: Fn(f64) -> f64>(
    dist: &TrueDensity,
    h: H,
    draws: usize,
    rng: &mut R,
) -> (f64, f64) {
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..draws {
        let v = h(dist.sample(rng));
        let d = v - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (v - mean);
    }
    let var = m2 / (draws.saturating_sub(1)).max(1) as f64;
    (mean, (var / draws as f64).sqrt())
}

/// Response law `Y | X = x`: a noise density recentred so that its
/// τ-quantile is `θ₀(x)` and scaled by `s(x) = intercept + slope·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTrueDensity {
    pub noise: TrueDensity,
    pub tau: TauLevel,
    pub location: ThetaFamily,
    pub beta0: Vec<f64>,
    pub scale_intercept: f64,
    pub scale_slope: Vec<f64>,
    noise_quantile: f64,
}

impl ConditionalTrueDensity {
    pub fn new(
        noise: TrueDensity,
        tau: TauLevel,
        location: ThetaFamily,
        beta0: Vec<f64>,
        scale_intercept: f64,
        scale_slope: Vec<f64>,
    ) -> Result<Self, TruthError> {
        noise.validate()?;
        if beta0.len() != location.parameter_dimension() {
            return Err(bad("beta_star", "length does not match the family"));
        }
        if scale_slope.len() != location.space().dimension() {
            return Err(bad("scale_slope", "length does not match the covariate dimension"));
        }
        let noise_quantile = tau_quantile(&noise, tau)?;
        let out = ConditionalTrueDensity { noise, tau, location, beta0, scale_intercept, scale_slope, noise_quantile };
        // s(x) is affine, so its minimum over the box is at a vertex
        let min_scale = out.location.space().vertices().iter().map(|v| out.scale_at(v)).fold(f64::INFINITY, f64::min);
        if !(min_scale > 0.0) {
            return Err(bad("scale_intercept", "noise scale must be positive on the covariate space"));
        }
        Ok(out)
    }

    pub fn space(&self) -> &CovariateSpace {
        self.location.space()
    }

    pub fn scale_at(&self, x: &[f64]) -> f64 {
        self.scale_intercept + self.scale_slope.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    /// The conditional τ-quantile `θ₀(x)`.
    pub fn quantile_at(&self, x: &[f64]) -> f64 {
        self.location.evaluate(&self.beta0, x)
    }

    pub fn at(&self, x: &[f64]) -> TrueDensity {
        let s = self.scale_at(x);
        self.noise.affine(s, self.quantile_at(x) - s * self.noise_quantile)
    }

    /// Largest `|p₀ₓ(y) − p₀ₓ'(y)| / ‖x − x'‖` over adjacent points of `x_grid`
    /// and all of `y_grid`.
    pub fn continuity_modulus(&self, x_grid: &[Vec<f64>], y_grid: &[f64]) -> f64 {
        let space = self.space();
        let mut worst: f64 = 0.0;
        for w in x_grid.windows(2) {
            let d = space.distance(&w[0], &w[1]);
            if d == 0.0 {
                continue;
            }
            let (a, b) = (self.at(&w[0]), self.at(&w[1]));
            for &y in y_grid {
                worst = worst.max((a.pdf(y) - b.pdf(y)).abs() / d);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tau(v: f64) -> TauLevel {
        TauLevel::new(v).unwrap()
    }

    fn shipped() -> Vec<TrueDensity> {
        vec![
            TrueDensity::gaussian(0.0, 1.0),
            TrueDensity::student_t(3.0, 0.0, 1.0),
            TrueDensity::Mixture {
                components: vec![
                    MixtureComponent { weight: 0.3, mu: -1.0, sigma: 0.5 },
                    MixtureComponent { weight: 0.7, mu: 1.5, sigma: 1.0 },
                ],
            },
            TrueDensity::Skewed { mode: 0.5, left_scale: 0.5, right_scale: 2.0 },
        ]
    }

    #[test]
    fn pdfs_integrate_to_one() {
        let rule = QuadratureRule::default();
        let mut all = shipped();
        all.push(TrueDensity::student_t(1.0, 0.0, 1.0));
        all.push(TrueDensity::SplitUniform { left: (-2.0, -0.5), right: (0.5, 2.0), left_weight: 0.5 });
        for d in &all {
            let mass = expect(d, |_| 1.0, &rule, &[]).unwrap().value;
            assert!((mass - 1.0).abs() < 1e-8, "{}: {mass}", d.label());
        }
    }

    #[test]
    fn cdf_is_monotone_with_limits() {
        for d in shipped() {
            assert!(d.cdf(-1e6) < 1e-6 && d.cdf(1e6) > 1.0 - 1e-6, "{}", d.label());
            let mut prev = 0.0;
            for k in -400..=400 {
                let c = d.cdf(k as f64 * 0.05);
                assert!(c >= prev - 1e-15);
                prev = c;
            }
        }
    }

    #[test]
    fn cdf_is_integral_of_pdf() {
        let rule = QuadratureRule::default();
        for d in shipped() {
            for &y in &[-1.3, 0.0, 0.7, 2.5] {
                let mass = crate::quadrature::integrate(|s| d.pdf(s), f64::NEG_INFINITY, y, &d.breakpoints(), &rule)
                    .unwrap()
                    .value;
                assert!((mass - d.cdf(y)).abs() < 1e-9, "{} at {y}", d.label());
            }
        }
    }

    #[test]
    fn sampler_matches_cdf_by_ks() {
        for d in shipped() {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut xs = d.sample_n(&mut rng, 100_000);
            xs.sort_by(f64::total_cmp);
            let n = xs.len() as f64;
            let ks = xs
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let c = d.cdf(x);
                    (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
                })
                .fold(0.0, f64::max);
            assert!(ks < 0.01, "{}: KS {ks}", d.label());
        }
    }

    #[test]
    fn quantile_examples() {
        let g = TrueDensity::gaussian(0.0, 1.0);
        let q = tau_quantile(&g, tau(0.5)).unwrap();
        assert!(q.abs() < 1e-10, "{q}");
        assert!((tau_quantile(&g, tau(0.841344746)).unwrap() - 1.0).abs() < 1e-6);
        let t3 = TrueDensity::student_t(3.0, 2.0, 1.0);
        assert!((tau_quantile(&t3, tau(0.5)).unwrap() - 2.0).abs() < 1e-10);
        for d in shipped() {
            for &tv in &[0.1, 0.25, 0.5, 0.75, 0.9] {
                let q = tau_quantile(&d, tau(tv)).unwrap();
                assert!((d.cdf(q) - tv).abs() < 1e-10, "{}", d.label());
            }
        }
    }

    #[test]
    fn flat_cdf_is_rejected() {
        let d = TrueDensity::SplitUniform { left: (-2.0, -0.5), right: (0.5, 2.0), left_weight: 0.5 };
        match tau_quantile(&d, tau(0.5)) {
            Err(TruthError::NonUniqueQuantile { lower, upper, .. }) => {
                assert!((lower + 0.5).abs() < 1e-9 && (upper - 0.5).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
        // a level inside a uniform piece is unique
        assert!((tau_quantile(&d, tau(0.25)).unwrap() + 1.25).abs() < 1e-9);
    }

    #[test]
    fn expect_examples() {
        let g = TrueDensity::gaussian(0.0, 1.0);
        let rule = QuadratureRule::default();
        assert!((expect(&g, |_| 1.0, &rule, &[]).unwrap().value - 1.0).abs() < 1e-12);
        let mad = expect(&g, f64::abs, &rule, &[0.0]).unwrap();
        assert!((mad.value - (2.0 / PI).sqrt()).abs() < 1e-10);
        assert!(mad.abs_error < 1e-9);
        assert!((expect(&g, |y| y * y, &rule, &[]).unwrap().value - 1.0).abs() < 1e-10);
    }

    #[test]
    fn expect_reports_divergence() {
        let cauchy = TrueDensity::student_t(1.0, 0.0, 1.0);
        let rule = QuadratureRule { max_subdivisions: 300, ..Default::default() };
        assert!(matches!(expect(&cauchy, f64::abs, &rule, &[0.0]), Err(TruthError::Quadrature(_))));
        assert!(matches!(first_abs_moment(&cauchy, 0.0), Err(TruthError::InfiniteMoment(_))));
    }

    #[test]
    fn kl_to_working_examples() {
        let g = TrueDensity::gaussian(0.0, 1.0);
        let k0 = kl_to_working(&g, 0.0, tau(0.5)).unwrap();
        let oracle = -0.5 * (2.0 * PI).ln() - 0.5 - (0.25f64.ln() - 0.5 * (2.0 / PI).sqrt());
        assert!((k0 - oracle).abs() < 1e-9, "{k0} vs {oracle}");
        assert!((k0 - 0.366298).abs() < 1e-6);
        let k1 = kl_to_working(&g, 1.0, tau(0.5)).unwrap();
        assert!((k1 - k0 - kl_gap(&g, 1.0, 0.0, tau(0.5)).unwrap()).abs() < 1e-9);
    }

    /// `E log f_{t*}/f_t = ∫_{t*}^{t} (F(s) − τ) ds`; an independent route.
    fn kl_gap_by_cdf(d: &TrueDensity, t: f64, t_star: f64, tv: f64) -> f64 {
        let rule = QuadratureRule::default();
        let (lo, hi, sign) = if t > t_star { (t_star, t, 1.0) } else { (t, t_star, -1.0) };
        sign * crate::quadrature::integrate(|s| d.cdf(s) - tv, lo, hi, &d.breakpoints(), &rule).unwrap().value
    }

    #[test]
    fn kl_gap_matches_cdf_integral() {
        for d in shipped() {
            for &tv in &[0.25, 0.5, 0.9] {
                for &(t, s) in &[(1.0, 0.0), (-0.7, 0.4), (2.5, -1.0)] {
                    let q = kl_gap(&d, t, s, tau(tv)).unwrap();
                    let o = kl_gap_by_cdf(&d, t, s, tv);
                    assert!((q - o).abs() < 1e-9, "{} τ={tv}: {q} vs {o}", d.label());
                }
            }
        }
    }

    #[test]
    fn kl_gap_examples() {
        let g = TrueDensity::gaussian(0.0, 1.0);
        assert_eq!(kl_gap(&g, 0.3, 0.3, tau(0.5)).unwrap(), 0.0);
        let plus = kl_gap(&g, 1.0, 0.0, tau(0.5)).unwrap();
        let minus = kl_gap(&g, -1.0, 0.0, tau(0.5)).unwrap();
        assert!((plus - minus).abs() < 1e-8);
        assert!(plus >= delta_lower_bound(&g, 0.0, 1.0, tau(0.5)));
    }

    #[test]
    fn delta_examples() {
        let g = TrueDensity::gaussian(0.0, 1.0);
        let d = delta_lower_bound(&g, 0.0, 1.0, tau(0.5));
        assert!((d - 0.5 * (std_normal_cdf(0.5) - 0.5)).abs() < 1e-15);
        assert!((d - 0.095731).abs() < 1e-6);
        assert!(delta_lower_bound(&g, 0.0, 1e-12, tau(0.5)) < 1e-20);
        let t3 = TrueDensity::student_t(3.0, 0.0, 1.0);
        // t₃ cdf in closed form: ½ + (atan(z/√3) + (z/√3)/(1+z²/3)) / π
        let f = |z: f64| 0.5 + ((z / 3f64.sqrt()).atan() + (z / 3f64.sqrt()) / (1.0 + z * z / 3.0)) / PI;
        let want = 0.25 * (f(0.25) - 0.5);
        assert!((delta_lower_bound(&t3, 0.0, 0.5, tau(0.5)) - want).abs() < 1e-12);
    }

    #[test]
    fn affinity_examples() {
        let g = TrueDensity::gaussian(0.0, 1.0);
        assert_eq!(alpha_affinity(&g, 1.0, 1.0, 0.3, tau(0.5)).unwrap(), 1.0);
        let a = alpha_affinity(&g, 2.0, 0.0, 1.0, tau(0.5)).unwrap();
        assert!(a > (-2f64).exp() && a < 1.0);
        assert!(alpha_affinity(&g, 2.0, 0.0, 0.0, tau(0.5)).is_err());
        assert!(alpha_affinity(&g, 2.0, 0.0, 1.5, tau(0.5)).is_err());
    }

    #[test]
    fn affinity_matches_monte_carlo() {
        let g = TrueDensity::gaussian(0.0, 1.0);
        let tv = tau(0.5);
        let q = alpha_affinity(&g, 0.5, 0.0, 0.5, tv).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mc, se) = monte_carlo_expect(&g, |y| (0.5 * ald_log_ratio(y, 0.5, 0.0, tv)).exp(), 10_000_000, &mut rng);
        assert!((mc - q).abs() < 3.0 * se, "{mc} ± {se} vs {q}");
    }

    #[test]
    fn jensen_order_in_alpha() {
        for d in shipped() {
            let tv = tau(0.3);
            let mut prev = 0.0;
            for &alpha in ALPHA_GRID.iter().rev() {
                let a = alpha_affinity(&d, 1.2, -0.4, alpha, tv).unwrap().powf(1.0 / alpha);
                assert!(a >= prev - 1e-10, "{}", d.label());
                prev = a;
            }
        }
    }

    #[test]
    fn g_alpha_increases_to_kl_gap() {
        let g = TrueDensity::gaussian(0.0, 1.0);
        let tv = tau(0.5);
        let gap = kl_gap(&g, 1.0, 0.0, tv).unwrap();
        let vals: Vec<f64> =
            [0.5, 0.25, 0.1, 0.01, 0.001].iter().map(|&a| g_alpha(&g, 1.0, 0.0, a, tv).unwrap()).collect();
        for w in vals.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(vals.iter().all(|&v| v <= gap));
        assert!(gap - vals[4] < 0.01);
        assert_eq!(g_alpha(&g, 0.2, 0.2, 0.5, tv).unwrap(), 0.0);
    }

    #[test]
    fn tail_audit_gaussian_and_heavy_tail() {
        let g = TrueDensity::gaussian(0.0, 1.0);
        let tv = tau(0.5);
        let m1 = first_abs_moment(&g, 0.0).unwrap();
        let b = corollary1_boundary(m1, tv);
        assert!((b - 4.787).abs() < 1e-3);
        let rep = tail_affinity_audit(&g, 0.0, tv, b).unwrap();
        assert!(rep.grid_passes, "{} vs {}", rep.max_affinity, rep.threshold);
        assert!((rep.threshold - (-(2.0 / PI).sqrt()).exp()).abs() < 1e-9);
        assert_eq!(rep.analytic_tail_passes, Some(true));

        let t3 = TrueDensity::student_t(3.0, 0.0, 1.0);
        let m1 = first_abs_moment(&t3, 0.0).unwrap();
        let rep = tail_affinity_audit(&t3, 0.0, tv, corollary1_boundary(m1, tv)).unwrap();
        // E e^{|Y|/2} is infinite, so the affinity blows up far out in Θ₂
        assert!(rep.grid[0].affinity < rep.threshold);
        assert!(!rep.grid_passes);
        assert!(!rep.analytic_tail_available);
        assert_eq!(rep.claim, "grid-only");
    }

    #[test]
    fn boundary_scales_with_min_slope() {
        let b5 = corollary1_boundary(0.8, tau(0.5));
        let b1 = corollary1_boundary(0.8, tau(0.1));
        assert!((b1 / b5 - 5.0).abs() < 1e-12);
    }
}
