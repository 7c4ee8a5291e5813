//! Grid posterior `Π_n(U^c) = R₁ₙ/R₂ₙ` for the ALD location model and the
//! numerator/denominator diagnostics.
//!
//! The prior is a weighted grid of atoms. For each atom the log-likelihood
//! ratio against the base point is accumulated in observation order; the two
//! integrals are then log-sum-exps over the atoms in atom order. Both orders
//! are fixed, so results do not depend on how atoms are split across threads.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::ald::{ald_log_ratio, TauLevel};
use crate::design::{CovariateDesign, ThetaFamily, DEFAULT_SUP_RESOLUTION};
use crate::par::{map_indexed, stream_seed, Execution};
use crate::quadrature::QuadratureRule;
use crate::truth::{
    alpha_affinity, alpha_search, delta_lower_bound, expect, ConditionalTrueDensity, TrueDensity, TruthError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PosteriorError {
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("every atom has log weight -inf; the posterior is undefined")]
    Degenerate,
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no alpha on the grid has g_alpha > delta/2 = {target}; delta is not a valid KL gap here")]
    NoAlpha { target: f64 },
    #[error(transparent)]
    Truth(#[from] TruthError),
}

fn precondition(msg: impl Into<String>) -> PosteriorError {
    PosteriorError::Precondition(msg.into())
}

/// `log Σ exp(vᵢ)` summed in slice order.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(eᵃ + eᵇ)`
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Prior as weighted atoms in a parameter space of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPrior {
    dim: usize,
    atoms: Vec<f64>,
    log_weights: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..points).map(|k| if k + 1 == points { hi } else { lo + (hi - lo) * (k as f64 / (points - 1) as f64) }).collect()
}

impl GridPrior {
    pub fn from_weights(dim: usize, atoms: Vec<f64>, weights: &[f64]) -> Result<Self, PosteriorError> {
        if dim == 0 || weights.is_empty() || atoms.len() != dim * weights.len() {
            return Err(PosteriorError::InvalidPrior("atom and weight counts do not match".into()));
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(PosteriorError::InvalidPrior("atoms must be finite".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(PosteriorError::InvalidPrior("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(PosteriorError::InvalidPrior("weights sum to zero".into()));
        }
        let log_weights = weights.iter().map(|w| (w / total).ln()).collect();
        Ok(GridPrior { dim, atoms, log_weights })
    }

    /// `points` equally weighted atoms on `[lo, hi]`, endpoints included.
    pub fn uniform_1d(lo: f64, hi: f64, points: usize) -> Result<Self, PosteriorError> {
        if !(lo <= hi) || points == 0 {
            return Err(PosteriorError::InvalidPrior("uniform prior needs lo <= hi and at least one point".into()));
        }
        GridPrior::from_weights(1, linspace(lo, hi, points), &vec![1.0; points])
    }

    /// Gaussian density restricted to `[lo, hi]`, evaluated at `points` grid nodes.
    pub fn truncated_gaussian_1d(mean: f64, sd: f64, lo: f64, hi: f64, points: usize) -> Result<Self, PosteriorError> {
        if !(sd > 0.0) || !(lo <= hi) || points == 0 {
            return Err(PosteriorError::InvalidPrior("truncated gaussian needs sd > 0 and lo <= hi".into()));
        }
        let atoms = linspace(lo, hi, points);
        let w: Vec<f64> = atoms.iter().map(|t| (-0.5 * ((t - mean) / sd).powi(2)).exp()).collect();
        GridPrior::from_weights(1, atoms, &w)
    }

    pub fn point_mass(atom: Vec<f64>) -> Result<Self, PosteriorError> {
        let dim = atom.len();
        GridPrior::from_weights(dim, atom, &[1.0])
    }

    pub fn discrete(atoms: Vec<Vec<f64>>, weights: &[f64]) -> Result<Self, PosteriorError> {
        let dim = atoms.first().map_or(0, Vec::len);
        if atoms.iter().any(|a| a.len() != dim) {
            return Err(PosteriorError::InvalidPrior("atoms have mixed dimensions".into()));
        }
        GridPrior::from_weights(dim, atoms.concat(), weights)
    }

    /// Product grid over a box with `per_dim[k]` nodes on coordinate `k`.
    pub fn uniform_box(bounds: &[(f64, f64)], per_dim: &[usize]) -> Result<Self, PosteriorError> {
        if bounds.is_empty() || bounds.len() != per_dim.len() {
            return Err(PosteriorError::InvalidPrior("box bounds and resolutions differ in length".into()));
        }
        if bounds.iter().any(|(lo, hi)| !(lo <= hi)) || per_dim.contains(&0) {
            return Err(PosteriorError::InvalidPrior("each box side needs lo <= hi and a positive resolution".into()));
        }
        let axes: Vec<Vec<f64>> = bounds.iter().zip(per_dim).map(|(&(lo, hi), &m)| linspace(lo, hi, m)).collect();
        let count: usize = per_dim.iter().product();
        let mut atoms = Vec::with_capacity(count * bounds.len());
        let mut idx = vec![0usize; bounds.len()];
        for _ in 0..count {
            atoms.extend(idx.iter().zip(&axes).map(|(&i, ax)| ax[i]));
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                if idx[k] < per_dim[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        GridPrior::from_weights(bounds.len(), atoms, &vec![1.0; count])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        &self.atoms[j * self.dim..(j + 1) * self.dim]
    }

    pub fn log_weight(&self, j: usize) -> f64 {
        self.log_weights[j]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn total_mass(&self) -> f64 {
        self.log_weights.iter().map(|w| w.exp()).sum()
    }

    /// Renormalized restriction to the atoms passing `keep`; `None` if no
    /// positive-weight atom survives.
    pub fn restrict<F: Fn(&[f64]) -> bool>(&self, keep: F) -> Option<GridPrior> {
        let kept: Vec<usize> = (0..self.len()).filter(|&j| keep(self.atom(j))).collect();
        self.subset(&kept)
    }

    pub fn subset(&self, indices: &[usize]) -> Option<GridPrior> {
        let atoms: Vec<f64> = indices.iter().flat_map(|&j| self.atom(j).iter().copied()).collect();
        let w: Vec<f64> = indices.iter().map(|&j| self.log_weights[j].exp()).collect();
        GridPrior::from_weights(self.dim, atoms, &w).ok()
    }

    /// Largest gap between consecutive distinct atom coordinates, over all axes.
    pub fn grid_step(&self) -> f64 {
        let mut step: f64 = 0.0;
        for k in 0..self.dim {
            let mut c: Vec<f64> = (0..self.len()).map(|j| self.atom(j)[k]).collect();
            c.sort_by(f64::total_cmp);
            c.dedup();
            for w in c.windows(2) {
                step = step.max(w[1] - w[0]);
            }
        }
        step
    }

    /// Whether a positive-weight atom lies within `radius` (max norm) of `point`.
    pub fn supports(&self, point: &[f64], radius: f64) -> bool {
        (0..self.len()).any(|j| {
            self.log_weights[j] > f64::NEG_INFINITY
                && self.atom(j).iter().zip(point).all(|(a, p)| (a - p).abs() <= radius)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PosteriorSummary {
    pub n: usize,
    pub eps: f64,
    pub log_r2n: f64,
    pub log_r1n_outside: f64,
    pub log_r1n_inside: f64,
    pub mass_outside: f64,
    pub mass_inside: f64,
}

impl PosteriorSummary {
    /// `log Π_n(U^c)`, finite even when `mass_outside` underflows.
    pub fn log_mass_outside(&self) -> f64 {
        self.log_r1n_outside - self.log_r2n
    }
}

/// Grid prior paired with the working model: atom locations at each covariate
/// slot, the base point the ratios are taken against, and `U^c` membership.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    slots: usize,
    theta: Vec<f64>,
    base: Vec<f64>,
    outside: Vec<bool>,
    log_weights: Vec<f64>,
    eps: f64,
    tau: TauLevel,
}

impl GridPosterior {
    /// One-slot posterior; `U^c = {t : |t − t*| > ε}`.
    pub fn iid(prior: &GridPrior, t_star: f64, eps: f64, tau: TauLevel) -> Result<Self, PosteriorError> {
        GridPosterior::iid_with_base(prior, t_star, t_star, eps, tau)
    }

    /// As [`iid`](Self::iid) but with likelihood ratios taken against `base`
    /// rather than `t_star`. The posterior does not depend on the base.
    pub fn iid_with_base(
        prior: &GridPrior,
        t_star: f64,
        base: f64,
        eps: f64,
        tau: TauLevel,
    ) -> Result<Self, PosteriorError> {
        if prior.dim() != 1 {
            return Err(PosteriorError::InvalidPrior("i.i.d. posterior needs a one-dimensional prior".into()));
        }
        if !(eps >= 0.0) {
            return Err(precondition("eps must be nonnegative"));
        }
        let theta: Vec<f64> = (0..prior.len()).map(|j| prior.atom(j)[0]).collect();
        let outside = theta.iter().map(|t| (t - t_star).abs() > eps).collect();
        Ok(GridPosterior {
            slots: 1,
            theta,
            base: vec![base],
            outside,
            log_weights: prior.log_weights().to_vec(),
            eps,
            tau,
        })
    }

    /// Posterior over a parameter grid for `θ(·; β)`, with `U^c` decided by
    /// the grid sup-norm distance to `β*`.
    pub fn inid(
        prior: &GridPrior,
        family: &ThetaFamily,
        beta_star: &[f64],
        slots: &[Vec<f64>],
        eps: f64,
        tau: TauLevel,
        sup_resolution: usize,
    ) -> Result<Self, PosteriorError> {
        if prior.dim() != family.parameter_dimension() || beta_star.len() != family.parameter_dimension() {
            return Err(PosteriorError::InvalidPrior("prior dimension does not match the family".into()));
        }
        if let Some(x) = slots.iter().find(|x| !family.space().contains(x)) {
            return Err(precondition(format!("design point {x:?} lies outside the covariate space")));
        }
        if !(eps >= 0.0) {
            return Err(precondition("eps must be nonnegative"));
        }
        let grid = family.space().grid(sup_resolution);
        let mut theta = Vec::with_capacity(prior.len() * slots.len());
        let mut outside = Vec::with_capacity(prior.len());
        for j in 0..prior.len() {
            let beta = prior.atom(j);
            theta.extend(slots.iter().map(|x| family.evaluate(beta, x)));
            outside.push(family.sup_distance_on(&grid, beta, beta_star) > eps);
        }
        Ok(GridPosterior {
            slots: slots.len(),
            theta,
            base: slots.iter().map(|x| family.evaluate(beta_star, x)).collect(),
            outside,
            log_weights: prior.log_weights().to_vec(),
            eps,
            tau,
        })
    }

    pub fn atoms(&self) -> usize {
        self.log_weights.len()
    }

    pub fn outside_mask(&self) -> &[bool] {
        &self.outside
    }

    pub fn prior_mass_outside(&self) -> f64 {
        self.outside.iter().zip(&self.log_weights).filter(|(o, _)| **o).map(|(_, w)| w.exp()).sum()
    }

    /// Per-atom log-likelihood-ratio sums at each checkpoint: `out[j][c]` is
    /// `Σ_{i < checkpoints[c]} log f_{θⱼ}(yᵢ)/f_{base}(yᵢ)`.
    pub fn ratio_sums(
        &self,
        slot_of: Option<&[usize]>,
        ys: &[f64],
        checkpoints: &[usize],
        exec: Execution,
    ) -> Result<Vec<Vec<f64>>, PosteriorError> {
        if checkpoints.windows(2).any(|w| w[0] > w[1]) {
            return Err(precondition("checkpoints must be nondecreasing"));
        }
        if checkpoints.last().is_some_and(|&n| n > ys.len()) {
            return Err(precondition(format!("checkpoint exceeds the {} available observations", ys.len())));
        }
        if let Some(s) = slot_of {
            if s.len() != ys.len() || s.iter().any(|&k| k >= self.slots) {
                return Err(precondition("slot indices do not match the observations"));
            }
        } else if self.slots != 1 {
            return Err(precondition("slot indices are required with more than one covariate slot"));
        }
        let tau = self.tau;
        Ok(map_indexed(self.atoms(), exec, |j| {
            let th = &self.theta[j * self.slots..(j + 1) * self.slots];
            let mut out = Vec::with_capacity(checkpoints.len());
            let mut sum = 0.0;
            let mut i = 0;
            for &cp in checkpoints {
                match slot_of {
                    None => {
                        let (t, b) = (th[0], self.base[0]);
                        for &y in &ys[i..cp] {
                            sum += ald_log_ratio(y, t, b, tau);
                        }
                    }
                    Some(s) => {
                        for k in i..cp {
                            let slot = s[k];
                            sum += ald_log_ratio(ys[k], th[slot], self.base[slot], tau);
                        }
                    }
                }
                i = cp;
                out.push(sum);
            }
            out
        }))
    }

    /// Summary from per-atom sums at one checkpoint.
    pub fn summarize(&self, n: usize, sums: impl Fn(usize) -> f64) -> Result<PosteriorSummary, PosteriorError> {
        let mut inside = Vec::with_capacity(self.atoms());
        let mut outside = Vec::with_capacity(self.atoms());
        for j in 0..self.atoms() {
            let v = self.log_weights[j] + sums(j);
            if self.outside[j] {
                outside.push(v);
            } else {
                inside.push(v);
            }
        }
        let log_in = log_sum_exp(&inside);
        let log_out = log_sum_exp(&outside);
        let log_r2n = log_add_exp(log_in, log_out);
        if log_r2n == f64::NEG_INFINITY || log_r2n.is_nan() {
            return Err(PosteriorError::Degenerate);
        }
        Ok(PosteriorSummary {
            n,
            eps: self.eps,
            log_r2n,
            log_r1n_outside: log_out,
            log_r1n_inside: log_in,
            mass_outside: (log_out - log_r2n).exp(),
            mass_inside: (log_in - log_r2n).exp(),
        })
    }

    /// Posterior summaries along a growing prefix of one data stream.
    pub fn path(
        &self,
        slot_of: Option<&[usize]>,
        ys: &[f64],
        checkpoints: &[usize],
        exec: Execution,
    ) -> Result<Vec<PosteriorSummary>, PosteriorError> {
        let sums = self.ratio_sums(slot_of, ys, checkpoints, exec)?;
        checkpoints.iter().enumerate().map(|(c, &n)| self.summarize(n, |j| sums[j][c])).collect()
    }
}

/// `Σᵢ log f_t(yᵢ)/f_{t*}(yᵢ)`.
pub fn log_lik_ratio_sum_iid(data: &[f64], t: f64, t_star: f64, tau: TauLevel) -> f64 {
    data.iter().map(|&y| ald_log_ratio(y, t, t_star, tau)).sum()
}

pub fn posterior_mass_outside_iid(
    data: &[f64],
    prior: &GridPrior,
    t_star: f64,
    eps: f64,
    tau: TauLevel,
) -> Result<PosteriorSummary, PosteriorError> {
    let post = GridPosterior::iid(prior, t_star, eps, tau)?;
    Ok(post.path(None, data, &[data.len()], Execution::default())?[0])
}

/// Distinct covariate points and, per observation, the index of its point.
pub fn index_covariates(xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut slots = Vec::new();
    let idx = xs
        .iter()
        .map(|x| {
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            *seen.entry(key).or_insert_with(|| {
                slots.push(x.clone());
                slots.len() - 1
            })
        })
        .collect();
    (slots, idx)
}

pub fn posterior_mass_outside_inid(
    data: &[(Vec<f64>, f64)],
    prior: &GridPrior,
    family: &ThetaFamily,
    beta_star: &[f64],
    eps: f64,
    tau: TauLevel,
) -> Result<PosteriorSummary, PosteriorError> {
    let xs: Vec<Vec<f64>> = data.iter().map(|(x, _)| x.clone()).collect();
    let ys: Vec<f64> = data.iter().map(|(_, y)| *y).collect();
    let (slots, idx) = index_covariates(&xs);
    let post = GridPosterior::inid(prior, family, beta_star, &slots, eps, tau, DEFAULT_SUP_RESOLUTION)?;
    Ok(post.path(Some(&idx), &ys, &[ys.len()], Execution::default())?[0])
}

/// `n` i.i.d. draws from `dist` on a ChaCha8 stream seeded with `seed`.
pub fn simulate_iid(dist: &TrueDensity, seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dist.sample_n(&mut rng, n)
}

/// Responses `yᵢ ~ p₀ₓᵢ` along the first `n` design points, with the slot
/// index of each point.
pub fn simulate_inid(
    truth: &ConditionalTrueDensity,
    design: &CovariateDesign,
    seed: u64,
    n: usize,
) -> (Vec<usize>, Vec<f64>) {
    let laws: Vec<TrueDensity> = design.slots().iter().map(|x| truth.at(x)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots: Vec<usize> = (0..n).map(|i| design.slot(i)).collect();
    let ys = slots.iter().map(|&s| laws[s].sample(&mut rng)).collect();
    (slots, ys)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthRow {
    pub n: usize,
    pub log_r2n: f64,
    /// `log R₂ₙ + n·β`
    pub diagnostic: f64,
}

/// `(n, log R₂ₙ + nβ)` along the data stream.
pub fn denominator_growth(
    post: &GridPosterior,
    slot_of: Option<&[usize]>,
    ys: &[f64],
    beta_rate: f64,
    n_grid: &[usize],
    exec: Execution,
) -> Result<Vec<GrowthRow>, PosteriorError> {
    if !(beta_rate > 0.0) {
        return Err(precondition("beta_rate must be positive"));
    }
    Ok(post
        .path(slot_of, ys, n_grid, exec)?
        .into_iter()
        .map(|s| GrowthRow { n: s.n, log_r2n: s.log_r2n, diagnostic: s.log_r2n + s.n as f64 * beta_rate })
        .collect())
}

pub fn denominator_growth_diag(
    data: &[f64],
    prior: &GridPrior,
    t_star: f64,
    tau: TauLevel,
    beta_rate: f64,
    n_grid: &[usize],
) -> Result<Vec<GrowthRow>, PosteriorError> {
    let post = GridPosterior::iid(prior, t_star, 0.0, tau)?;
    denominator_growth(&post, None, data, beta_rate, n_grid, Execution::default())
}

/// First row index from which the diagnostic strictly increases to the end;
/// `None` when the last step does not increase.
pub fn increasing_from(rows: &[GrowthRow]) -> Option<usize> {
    if rows.len() < 2 {
        return None;
    }
    let mut k = rows.len() - 1;
    while k > 0 && rows[k].diagnostic > rows[k - 1].diagnostic {
        k -= 1;
    }
    (k < rows.len() - 1).then_some(k)
}

/// Ingredients of the numerator bound around one point `t₁` of `U^c`.
#[derive(Debug, Clone, PartialEq)]
pub struct NumeratorSetup {
    pub t1: f64,
    pub eps: f64,
    pub delta: f64,
    pub alpha_prime: f64,
    /// `α′/2`
    pub alpha: f64,
    /// ν: the prior restricted to `A_{t₁}` and renormalized.
    pub nu: GridPrior,
    /// Smallest and largest atom of `A_{t₁}`.
    pub a_range: (f64, f64),
}

/// Builds `A_{t₁} = {t : E f_t/f_{t₁} < e^{δ/2}}` on the prior grid (the run of
/// qualifying atoms around `t₁`), with `δ` from [`delta_lower_bound`] and `α′`
/// the largest grid α with `g_{α′}(t₁, t*) > δ/2`.
pub fn numerator_setup(
    dist: &TrueDensity,
    prior: &GridPrior,
    t_star: f64,
    t1: f64,
    eps: f64,
    tau: TauLevel,
) -> Result<NumeratorSetup, PosteriorError> {
    if prior.dim() != 1 {
        return Err(PosteriorError::InvalidPrior("numerator diagnostics need a one-dimensional prior".into()));
    }
    if !((t1 - t_star).abs() > eps) {
        return Err(precondition(format!("t1 = {t1} is not in U^c (|t1 − t*| must exceed {eps})")));
    }
    let delta = delta_lower_bound(dist, t_star, eps, tau);
    if !(delta > 0.0) {
        return Err(precondition("delta is 0: the truth puts no mass next to t*"));
    }
    let alpha_prime =
        alpha_search(dist, t1, t_star, tau, 0.5 * delta)?.ok_or(PosteriorError::NoAlpha { target: 0.5 * delta })?;

    let mut order: Vec<usize> = (0..prior.len()).collect();
    order.sort_by(|&a, &b| prior.atom(a)[0].total_cmp(&prior.atom(b)[0]));
    let start = (0..order.len())
        .min_by(|&a, &b| (prior.atom(order[a])[0] - t1).abs().total_cmp(&(prior.atom(order[b])[0] - t1).abs()))
        .expect("prior is nonempty");
    let limit = (0.5 * delta).exp();
    let in_a = |k: usize| -> Result<bool, PosteriorError> {
        Ok(alpha_affinity(dist, prior.atom(order[k])[0], t1, 1.0, tau)? < limit)
    };
    if !in_a(start)? {
        return Err(precondition("the prior grid is too coarse: the atom nearest t1 is not in A_t1"));
    }
    let (mut lo, mut hi) = (start, start);
    while lo > 0 && in_a(lo - 1)? {
        lo -= 1;
    }
    while hi + 1 < order.len() && in_a(hi + 1)? {
        hi += 1;
    }
    let nu = prior.subset(&order[lo..=hi]).ok_or_else(|| precondition("the prior puts no mass on A_t1"))?;
    Ok(NumeratorSetup {
        t1,
        eps,
        delta,
        alpha_prime,
        alpha: 0.5 * alpha_prime,
        nu,
        a_range: (prior.atom(order[lo])[0], prior.atom(order[hi])[0]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayRow {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    /// `e^{−nαδ/2}`
    pub bound: f64,
    pub passes: bool,
}

/// Mean and batch-means standard error (at most 20 batches).
pub fn batch_means(values: &[f64]) -> (f64, f64) {
    let r = values.len();
    let mean = values.iter().sum::<f64>() / r as f64;
    let batches = r.min(20);
    if batches < 2 {
        return (mean, f64::NAN);
    }
    let bm: Vec<f64> = (0..batches)
        .map(|b| {
            let chunk = &values[b * r / batches..(b + 1) * r / batches];
            chunk.iter().sum::<f64>() / chunk.len() as f64
        })
        .collect();
    let m = bm.iter().sum::<f64>() / batches as f64;
    let var = bm.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

/// One draw of `(∫_A ∏_{i≤n} f_θ(yᵢ)/f_{θ*}(yᵢ) dν(θ))^α` per checkpoint.
pub fn numerator_functional(
    setup: &NumeratorSetup,
    ys: &[f64],
    t_star: f64,
    tau: TauLevel,
    n_grid: &[usize],
) -> Result<Vec<f64>, PosteriorError> {
    let post = GridPosterior::iid(&setup.nu, t_star, 0.0, tau)?;
    let sums = post.ratio_sums(None, ys, n_grid, Execution::Sequential)?;
    Ok((0..n_grid.len())
        .map(|c| {
            let v: Vec<f64> = (0..setup.nu.len()).map(|j| setup.nu.log_weight(j) + sums[j][c]).collect();
            (setup.alpha * log_sum_exp(&v)).exp()
        })
        .collect())
}

/// Monte Carlo mean of the numerator functional next to `e^{−nαδ/2}`; a row
/// passes when the mean is at most the bound plus three standard errors.
#[allow(clippy::too_many_arguments)]
pub fn numerator_decay_diag(
    dist: &TrueDensity,
    setup: &NumeratorSetup,
    t_star: f64,
    tau: TauLevel,
    n_grid: &[usize],
    replications: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<DecayRow>, PosteriorError> {
    if replications == 0 || n_grid.is_empty() {
        return Err(precondition("need at least one replication and one n"));
    }
    let n_max = *n_grid.iter().max().expect("nonempty");
    let draws = map_indexed(replications, exec, |r| {
        let ys = simulate_iid(dist, stream_seed(seed, r as u64), n_max);
        numerator_functional(setup, &ys, t_star, tau, n_grid)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(n_grid
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let col: Vec<f64> = draws.iter().map(|d| d[c]).collect();
            let (mean, se) = batch_means(&col);
            let bound = (-(n as f64) * setup.alpha * setup.delta / 2.0).exp();
            DecayRow { n, mean, se, bound, passes: mean <= bound + 3.0 * se.max(0.0) }
        })
        .collect())
}

/// `E[(∫_A f_θ/f_{θ*} dν)^α]` for a single observation, by quadrature.
pub fn numerator_n1_exact(
    dist: &TrueDensity,
    setup: &NumeratorSetup,
    t_star: f64,
    tau: TauLevel,
) -> Result<f64, PosteriorError> {
    let atoms: Vec<f64> = (0..setup.nu.len()).map(|j| setup.nu.atom(j)[0]).collect();
    let weights: Vec<f64> = (0..setup.nu.len()).map(|j| setup.nu.log_weight(j).exp()).collect();
    let mut kinks = atoms.clone();
    kinks.push(t_star);
    let est = expect(
        dist,
        |y| {
            let s: f64 = atoms.iter().zip(&weights).map(|(&t, w)| w * ald_log_ratio(y, t, t_star, tau).exp()).sum();
            s.powf(setup.alpha)
        },
        &QuadratureRule { rel_tol: 1e-10, ..Default::default() },
        &kinks,
    )?;
    Ok(est.value)
}
