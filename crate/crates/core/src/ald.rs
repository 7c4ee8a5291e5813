//! Asymmetric Laplace working likelihood.
//!
//! The working model is `f_t(y) = τ(1−τ) exp(−ρ_τ(y − t))` where `ρ_τ` is the
//! check loss. Everything here is evaluated in log space; ratios of working
//! densities are differences of check losses, so the `τ(1−τ)` constant never
//! enters a likelihood ratio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TauError {
    #[error("quantile level must lie in the open interval (0, 1), got {0}")]
    OutOfRange(f64),
}

/// Quantile level `τ ∈ (0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct TauLevel(f64);

impl TauLevel {
    pub fn new(tau: f64) -> Result<Self, TauError> {
        if tau > 0.0 && tau < 1.0 {
            Ok(TauLevel(tau))
        } else {
            Err(TauError::OutOfRange(tau))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// `min{τ, 1−τ}`, the slower of the two check-loss slopes.
    #[inline]
    pub fn min_slope(self) -> f64 {
        self.0.min(1.0 - self.0)
    }

    /// `max{τ, 1−τ}`.
    #[inline]
    pub fn max_slope(self) -> f64 {
        self.0.max(1.0 - self.0)
    }
}

impl<'de> Deserialize<'de> for TauLevel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = f64::deserialize(d)?;
        TauLevel::new(raw).map_err(serde::de::Error::custom)
    }
}

/// Check loss `ρ_τ(u) = u (τ − 1{u ≤ 0})`.
///
/// The indicator uses the closed inequality, so `ρ_τ(0) = 0` on either branch.
#[inline]
pub fn check_loss(u: f64, tau: TauLevel) -> f64 {
    if u <= 0.0 {
        u * (tau.0 - 1.0)
    } else {
        u * tau.0
    }
}

/// ALD location model `f_t` at a fixed quantile level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AldWorkingModel {
    pub location: f64,
    pub tau: TauLevel,
}

impl AldWorkingModel {
    pub fn new(location: f64, tau: TauLevel) -> Self {
        AldWorkingModel { location, tau }
    }

    pub fn log_pdf(&self, y: f64) -> f64 {
        ald_log_pdf(y, self)
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let tau = self.tau.0;
        let u = y - self.location;
        if u <= 0.0 {
            tau * ((1.0 - tau) * u).exp()
        } else {
            1.0 - (1.0 - tau) * (-tau * u).exp()
        }
    }

    /// Inverse cdf on `(0, 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        let tau = self.tau.0;
        if p <= tau {
            self.location + (p / tau).ln() / (1.0 - tau)
        } else {
            self.location - ((1.0 - p) / (1.0 - tau)).ln() / tau
        }
    }
}

#[inline]
pub fn ald_log_pdf(y: f64, model: &AldWorkingModel) -> f64 {
    let tau = model.tau.0;
    tau.ln() + (1.0 - tau).ln() - check_loss(y - model.location, model.tau)
}

/// `log f_t(y) − log f_{t*}(y)`.
///
/// When both residuals fall on the same side of the kink the ratio is a single
/// slope times `t − t*`, which keeps `|ratio| ≤ |t − t*|` exact in floating
/// point instead of relying on cancellation of two large check losses.
#[inline]
pub fn ald_log_ratio(y: f64, t: f64, t_star: f64, tau: TauLevel) -> f64 {
    let a = y - t_star;
    let b = y - t;
    match (a <= 0.0, b <= 0.0) {
        (false, false) => tau.0 * (t - t_star),
        (true, true) => (tau.0 - 1.0) * (t - t_star),
        _ => check_loss(a, tau) - check_loss(b, tau),
    }
}

/// Both sides of the log-ratio envelope
/// `log f_t(y)/f_{θ0}(y) ≤ −|t−θ0|·min{τ,1−τ} + |y−θ0|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Envelope {
    pub lhs: f64,
    pub rhs: f64,
}

impl Envelope {
    /// Whether `lhs ≤ rhs` up to the rounding of the two evaluations.
    pub fn holds(&self, scale: f64) -> bool {
        self.lhs <= self.rhs + 8.0 * f64::EPSILON * scale.max(1.0)
    }
}

pub fn lemma1_envelope(y: f64, t: f64, theta0: f64, tau: TauLevel) -> Envelope {
    Envelope { lhs: ald_log_ratio(y, t, theta0, tau), rhs: -(t - theta0).abs() * tau.min_slope() + (y - theta0).abs() }
}

/// Inverse-cdf draws from the working model. `count = 0` gives an empty vector.
pub fn ald_sample(model: &AldWorkingModel, rng_seed: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..count)
        .map(|_| {
            // open interval keeps ln finite
            let p: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            model.quantile(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tau(v: f64) -> TauLevel {
        TauLevel::new(v).unwrap()
    }

    #[test]
    fn tau_rejects_closed_endpoints() {
        assert!(TauLevel::new(0.0).is_err());
        assert!(TauLevel::new(1.0).is_err());
        assert!(TauLevel::new(f64::NAN).is_err());
        assert!(TauLevel::new(0.3).is_ok());
    }

    #[test]
    fn check_loss_examples() {
        assert_eq!(check_loss(0.0, tau(0.5)), 0.0);
        assert!((check_loss(2.0, tau(0.25)) - 0.5).abs() < 1e-15);
        assert!((check_loss(-2.0, tau(0.25)) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn log_pdf_examples() {
        let m = AldWorkingModel::new(0.0, tau(0.5));
        assert!((m.log_pdf(0.0) - 0.25f64.ln()).abs() < 1e-12);
        assert!((m.log_pdf(1.0) - (0.25f64.ln() - 0.5)).abs() < 1e-12);
        let m = AldWorkingModel::new(0.0, tau(0.9));
        // ρ_0.9(−1) = (−1)(0.9 − 1) = 0.1
        assert!((m.log_pdf(-1.0) - (0.09f64.ln() - 0.1)).abs() < 1e-12);
        assert!((m.log_pdf(-1.0) + 2.507946).abs() < 1e-6);
    }

    #[test]
    fn log_ratio_examples() {
        assert_eq!(ald_log_ratio(5.0, 1.0, 1.0, tau(0.3)), 0.0);
        assert!((ald_log_ratio(10.0, 1.0, 0.0, tau(0.5)) - 0.5).abs() < 1e-15);
        assert!((ald_log_ratio(-10.0, 1.0, 0.0, tau(0.5)) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_ratio_matches_pdf_difference() {
        let tau = tau(0.37);
        for &(y, t, s) in &[(0.3, -1.0, 2.0), (4.0, 1.0, 5.0), (-2.0, -3.0, -1.0)] {
            let direct = AldWorkingModel::new(t, tau).log_pdf(y) - AldWorkingModel::new(s, tau).log_pdf(y);
            assert!((ald_log_ratio(y, t, s, tau) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn envelope_examples() {
        let e = lemma1_envelope(0.0, 0.0, 0.0, tau(0.5));
        assert_eq!((e.lhs, e.rhs), (0.0, 0.0));

        // y between θ0 and t with τ = 0.5 sits exactly on the envelope
        let e = lemma1_envelope(1.0, 3.0, 0.0, tau(0.5));
        assert!((e.rhs + 0.5).abs() < 1e-15);
        assert!((e.lhs + 0.5).abs() < 1e-15);
        assert!(e.holds(3.0));

        let e = lemma1_envelope(-2.0, -4.0, 0.0, tau(0.25));
        assert!((e.rhs - 1.0).abs() < 1e-15);
        assert!(e.lhs <= e.rhs);

        // strictly inside when y lies outside the segment [θ0, t]
        let e = lemma1_envelope(5.0, 3.0, 0.0, tau(0.5));
        assert!(e.lhs < e.rhs);
    }

    #[test]
    fn sample_quantiles_match_location() {
        assert!(ald_sample(&AldWorkingModel::new(0.0, tau(0.5)), 1, 0).is_empty());
        for &(loc, t) in &[(0.0, 0.5), (2.0, 0.25)] {
            let model = AldWorkingModel::new(loc, tau(t));
            let mut draws = ald_sample(&model, 11, 1_000_000);
            let k = ((draws.len() as f64) * t) as usize;
            let (_, q, _) = draws.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
            assert!((*q - loc).abs() < 0.01, "empirical quantile {q} vs {loc}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        let m = AldWorkingModel::new(-1.5, tau(0.8));
        for &p in &[1e-6, 0.1, 0.5, 0.8, 0.95, 1.0 - 1e-9] {
            assert!((m.cdf(m.quantile(p)) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn check_loss_is_midpoint_convex() {
        let tau = tau(0.3);
        for &(a, b) in &[(-3.0, 2.0), (0.5, 4.0), (-1.0, -0.2), (-7.0, 7.0)] {
            let mid = check_loss(0.5 * (a + b), tau);
            assert!(mid <= 0.5 * (check_loss(a, tau) + check_loss(b, tau)) + 1e-15);
        }
    }

    proptest! {
        #[test]
        fn log_ratio_bounded_by_distance(y in -100.0..100.0f64, t in -50.0..50.0f64,
                                         s in -50.0..50.0f64, tv in 0.001..0.999f64) {
            let r = ald_log_ratio(y, t, s, tau(tv));
            prop_assert!(r.abs() <= (t - s).abs());
        }

        #[test]
        fn check_loss_nonnegative(u in -1e6..1e6f64, tv in 0.001..0.999f64) {
            let v = check_loss(u, tau(tv));
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, u == 0.0);
        }

        #[test]
        fn envelope_never_violated(y in -100.0..100.0f64, t in -50.0..50.0f64,
                                   th in -50.0..50.0f64, tv in 0.001..0.999f64) {
            let e = lemma1_envelope(y, t, th, tau(tv));
            prop_assert!(e.holds(y.abs() + t.abs() + th.abs()));
        }
    }
}
