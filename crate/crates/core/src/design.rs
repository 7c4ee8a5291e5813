//! Covariate space, fixed designs, the regression-function class and the
//! neighborhood machinery of the i.n.i.d. setting.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ald::TauLevel;
use crate::truth::{
    alpha_affinity, delta_lower_bound, g_alpha, kl_gap, ConditionalTrueDensity, TruthError, ALPHA_GRID,
};

/// Grid points per dimension used for sup-norm evaluations.
pub const DEFAULT_SUP_RESOLUTION: usize = 512;
/// Grid points per dimension inside a candidate ball.
pub const DEFAULT_BALL_RESOLUTION: usize = 65;
/// Start of the finite-horizon window standing in for `liminf`.
pub const KAPPA_N_FLOOR: usize = 30;
const MIN_RADIUS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("invalid {field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("Assumption 8 fails: design density kappa is 0 around x0 = {x0:?} at radius {delta_prime}")]
    ZeroKappa { x0: Vec<f64>, delta_prime: f64 },
    #[error(
        "no separating radius above {MIN_RADIUS} around x0 = {x0:?}; the family is not equicontinuous enough here"
    )]
    NoRadius { x0: Vec<f64> },
    #[error("no alpha on the grid certifies the separation; worst design point {worst_x:?} (shortfall {shortfall})")]
    NoAlpha { worst_x: Vec<f64>, shortfall: f64 },
    #[error(transparent)]
    Truth(#[from] TruthError),
}

fn invalid(field: &'static str, message: impl Into<String>) -> DesignError {
    DesignError::Invalid { field, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Euclidean,
    #[default]
    Max,
}

/// Compact box `X ⊂ ℝᵈ` with a norm.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSpace {
    bounds: Vec<(f64, f64)>,
    norm: Norm,
}

fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..points)
            .map(|k| if k + 1 == points { hi } else { lo + (hi - lo) * (k as f64 / (points - 1) as f64) })
            .collect(),
    }
}

fn product_grid(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for p in &out {
            for &v in axis {
                let mut q = p.clone();
                q.push(v);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

impl CovariateSpace {
    pub fn new(bounds: Vec<(f64, f64)>, norm: Norm) -> Result<Self, DesignError> {
        if bounds.is_empty() {
            return Err(invalid("bounds", "dimension must be at least 1"));
        }
        if bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
            return Err(invalid("bounds", "each coordinate needs a finite closed interval lo <= hi"));
        }
        Ok(CovariateSpace { bounds, norm })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self, DesignError> {
        CovariateSpace::new(vec![(lo, hi)], Norm::Max)
    }

    pub fn dimension(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn norm(&self) -> Norm {
        self.norm
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(u, v)| (u - v).abs());
        match self.norm {
            Norm::Max => diffs.fold(0.0, f64::max),
            Norm::Euclidean => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dimension() && x.iter().zip(&self.bounds).all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    pub fn diameter(&self) -> f64 {
        let lo: Vec<f64> = self.bounds.iter().map(|b| b.0).collect();
        let hi: Vec<f64> = self.bounds.iter().map(|b| b.1).collect();
        self.distance(&lo, &hi)
    }

    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = self.bounds.iter().map(|&(lo, hi)| vec![lo, hi]).collect();
        product_grid(&axes)
    }

    /// Product grid with `per_dim` points per coordinate, endpoints included.
    pub fn grid(&self, per_dim: usize) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = self.bounds.iter().map(|&(lo, hi)| linspace(lo, hi, per_dim)).collect();
        product_grid(&axes)
    }

    /// Grid over the closed ball of radius `r` around `center`, clipped to the space.
    pub fn ball_grid(&self, center: &[f64], r: f64, per_dim: usize) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = self
            .bounds
            .iter()
            .zip(center)
            .map(|(&(lo, hi), &c)| linspace((c - r).max(lo), (c + r).min(hi), per_dim))
            .collect();
        let mut pts = product_grid(&axes);
        if self.norm == Norm::Euclidean {
            pts.retain(|p| self.distance(p, center) <= r);
        }
        pts
    }

    /// Open-ball membership `‖x − x₀‖ < r`. Points within rounding of the
    /// sphere count as outside.
    pub fn in_open_ball(&self, x: &[f64], center: &[f64], r: f64) -> bool {
        self.distance(x, center) < r - 1e-12 * r.max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// `β₀ + Σ βⱼ xⱼ`
    Affine,
    /// `β₀ + β₁ sin(β₂ x)` on a one-dimensional space
    Sine,
}

/// Finite-dimensional class `Θ = {θ(·; β) : β ∈ box}` of continuous functions
/// `X → [−M, M]` with the sup-norm metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaFamily {
    kind: FamilyKind,
    space: CovariateSpace,
    param_box: Vec<(f64, f64)>,
    bound: f64,
}

impl ThetaFamily {
    pub fn new(kind: FamilyKind, space: CovariateSpace, param_box: Vec<(f64, f64)>) -> Result<Self, DesignError> {
        let want = match kind {
            FamilyKind::Affine => 1 + space.dimension(),
            FamilyKind::Sine => {
                if space.dimension() != 1 {
                    return Err(invalid("family", "the sine family needs a one-dimensional covariate space"));
                }
                3
            }
        };
        if param_box.len() != want {
            return Err(invalid("box", format!("expected {want} parameter intervals, got {}", param_box.len())));
        }
        if param_box.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
            return Err(invalid("box", "each parameter needs a finite interval lo <= hi"));
        }
        let mut fam = ThetaFamily { kind, space, param_box, bound: 0.0 };
        fam.bound = match kind {
            // multilinear in (β, x): extremes sit at vertices
            FamilyKind::Affine => {
                let corners = product_grid(&fam.param_box.iter().map(|&(a, b)| vec![a, b]).collect::<Vec<_>>());
                let verts = fam.space.vertices();
                corners
                    .iter()
                    .flat_map(|beta| verts.iter().map(move |x| (beta, x)))
                    .map(|(beta, x)| fam.evaluate(beta, x).abs())
                    .fold(0.0, f64::max)
            }
            FamilyKind::Sine => {
                let m0 = fam.param_box[0].0.abs().max(fam.param_box[0].1.abs());
                let m1 = fam.param_box[1].0.abs().max(fam.param_box[1].1.abs());
                m0 + m1
            }
        };
        Ok(fam)
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn space(&self) -> &CovariateSpace {
        &self.space
    }

    pub fn param_box(&self) -> &[(f64, f64)] {
        &self.param_box
    }

    pub fn parameter_dimension(&self) -> usize {
        self.param_box.len()
    }

    /// `M` with `|θ(x; β)| ≤ M` on box × space.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn in_box(&self, beta: &[f64]) -> bool {
        beta.len() == self.param_box.len() && beta.iter().zip(&self.param_box).all(|(b, (lo, hi))| b >= lo && b <= hi)
    }

    #[inline]
    pub fn evaluate(&self, beta: &[f64], x: &[f64]) -> f64 {
        match self.kind {
            FamilyKind::Affine => beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>(),
            FamilyKind::Sine => beta[0] + beta[1] * (beta[2] * x[0]).sin(),
        }
    }

    /// Largest `|θ(x; β)|` over a parameter grid × covariate grid.
    pub fn observed_bound(&self, param_per_dim: usize, x_per_dim: usize) -> f64 {
        let params =
            product_grid(&self.param_box.iter().map(|&(lo, hi)| linspace(lo, hi, param_per_dim)).collect::<Vec<_>>());
        let xs = self.space.grid(x_per_dim);
        params
            .iter()
            .flat_map(|b| xs.iter().map(move |x| (b, x)))
            .map(|(b, x)| self.evaluate(b, x).abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|θ(x) − θ(x')| / ‖x − x'‖` over adjacent grid points, at fixed β.
    pub fn x_modulus(&self, beta: &[f64], per_dim: usize) -> f64 {
        let xs = self.space.grid(per_dim);
        xs.windows(2)
            .filter_map(|w| {
                let d = self.space.distance(&w[0], &w[1]);
                (d > 0.0).then(|| (self.evaluate(beta, &w[0]) - self.evaluate(beta, &w[1])).abs() / d)
            })
            .fold(0.0, f64::max)
    }

    pub fn sup_distance_on(&self, grid: &[Vec<f64>], beta1: &[f64], beta2: &[f64]) -> f64 {
        grid.iter().map(|x| (self.evaluate(beta1, x) - self.evaluate(beta2, x)).abs()).fold(0.0, f64::max)
    }

    /// Grid point of largest `|θ(x; β₁) − θ(x; β₂)|` and that value.
    pub fn sup_argmax_on(&self, grid: &[Vec<f64>], beta1: &[f64], beta2: &[f64]) -> (Vec<f64>, f64) {
        let mut best = (grid[0].clone(), f64::NEG_INFINITY);
        for x in grid {
            let d = (self.evaluate(beta1, x) - self.evaluate(beta2, x)).abs();
            if d > best.1 {
                best = (x.clone(), d);
            }
        }
        best
    }
}

/// Grid approximation of `d(θ₁, θ₂) = sup_x |θ₁(x) − θ₂(x)|`, a lower bound
/// on the true sup that tightens as the grid refines.
pub fn sup_norm_distance(family: &ThetaFamily, beta1: &[f64], beta2: &[f64], grid_resolution: usize) -> f64 {
    family.sup_distance_on(&family.space.grid(grid_resolution), beta1, beta2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepeatRule {
    /// Repeat the list from the start.
    Cycle,
    /// Keep returning the final point.
    HoldLast,
}

/// Deterministic covariate sequence `x₁, x₂, …`: a finite prefix followed by a
/// cycle repeated forever.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateDesign {
    space: CovariateSpace,
    prefix: Vec<Vec<f64>>,
    cycle: Vec<Vec<f64>>,
    label: String,
}

impl CovariateDesign {
    fn checked(
        space: CovariateSpace,
        prefix: Vec<Vec<f64>>,
        cycle: Vec<Vec<f64>>,
        label: String,
    ) -> Result<Self, DesignError> {
        if cycle.is_empty() {
            return Err(invalid("design", "a design needs at least one point"));
        }
        if let Some(bad) = prefix.iter().chain(&cycle).find(|x| !space.contains(x)) {
            return Err(invalid("design", format!("point {bad:?} lies outside the covariate space")));
        }
        Ok(CovariateDesign { space, prefix, cycle, label })
    }

    /// `lo + k (hi − lo)/m` for `k = 0..m` in every coordinate (upper end
    /// excluded), visited in lexicographic order and repeated.
    pub fn cyclic_grid(space: CovariateSpace, per_dim: usize) -> Result<Self, DesignError> {
        if per_dim == 0 {
            return Err(invalid("points_per_dim", "must be positive"));
        }
        let axes: Vec<Vec<f64>> = space
            .bounds()
            .iter()
            .map(|&(lo, hi)| (0..per_dim).map(|k| lo + (hi - lo) * (k as f64 / per_dim as f64)).collect())
            .collect();
        let cycle = product_grid(&axes);
        let label = format!("cyclic_grid({per_dim})");
        CovariateDesign::checked(space, Vec::new(), cycle, label)
    }

    /// `count` uniform draws, frozen at construction and then cycled.
    pub fn uniform_draws(space: CovariateSpace, count: usize, seed: u64) -> Result<Self, DesignError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cycle: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                space.bounds().iter().map(|&(lo, hi)| if lo < hi { rng.random_range(lo..hi) } else { lo }).collect()
            })
            .collect();
        CovariateDesign::checked(space, Vec::new(), cycle, format!("uniform_draws({count},{seed})"))
    }

    pub fn from_list(space: CovariateSpace, points: Vec<Vec<f64>>, repeat: RepeatRule) -> Result<Self, DesignError> {
        if points.is_empty() {
            return Err(invalid("points", "list must be nonempty"));
        }
        match repeat {
            RepeatRule::Cycle => CovariateDesign::checked(space, Vec::new(), points, "list(cycle)".into()),
            RepeatRule::HoldLast => {
                let mut prefix = points;
                let last = prefix.pop().expect("nonempty");
                CovariateDesign::checked(space, prefix, vec![last], "list(hold_last)".into())
            }
        }
    }

    pub fn constant(space: CovariateSpace, x: Vec<f64>) -> Result<Self, DesignError> {
        let mut d = CovariateDesign::from_list(space, vec![x], RepeatRule::Cycle)?;
        d.label = "constant".into();
        Ok(d)
    }

    pub fn space(&self) -> &CovariateSpace {
        &self.space
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// The points repeated forever after the prefix.
    pub fn cycle(&self) -> &[Vec<f64>] {
        &self.cycle
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix.len()
    }

    /// `x_{i+1}` (zero-based index `i`).
    pub fn point(&self, i: usize) -> &[f64] {
        if i < self.prefix.len() {
            &self.prefix[i]
        } else {
            &self.cycle[(i - self.prefix.len()) % self.cycle.len()]
        }
    }

    /// Index into `prefix ++ cycle` of the point returned by [`point`](Self::point).
    pub fn slot(&self, i: usize) -> usize {
        if i < self.prefix.len() {
            i
        } else {
            self.prefix.len() + (i - self.prefix.len()) % self.cycle.len()
        }
    }

    /// Distinct slots, in order: prefix then cycle.
    pub fn slots(&self) -> Vec<&[f64]> {
        self.prefix.iter().chain(&self.cycle).map(|v| v.as_slice()).collect()
    }

    pub fn points(&self, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| self.point(i).to_vec()).collect()
    }

    /// CSV with columns `index, x1, …, xd` for the first `n` points.
    pub fn write_csv<W: Write>(&self, out: W, n: usize) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["index".to_string()];
        header.extend((1..=self.space.dimension()).map(|k| format!("x{k}")));
        w.write_record(&header)?;
        for i in 0..n {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(self.point(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Kappa {
    /// Exact `liminf` for the eventually periodic design: the fraction of the
    /// cycle inside the ball.
    pub value: f64,
    pub in_ball_per_cycle: usize,
    pub cycle_len: usize,
    /// `min_{n_floor ≤ n ≤ n_max} (1/n)·#{i ≤ n : xᵢ ∈ ball}`.
    pub horizon_min: f64,
    pub n_floor: usize,
    pub n_max: usize,
}

/// Design density `κ(x₀, δ′)` of the open ball `‖x − x₀‖ < δ′`.
pub fn kappa(design: &CovariateDesign, x0: &[f64], delta_prime: f64, n_max: usize) -> Result<Kappa, DesignError> {
    if !(delta_prime > 0.0) {
        return Err(invalid("delta_prime", "must be positive"));
    }
    let space = design.space();
    let in_ball = |x: &[f64]| space.in_open_ball(x, x0, delta_prime);
    let count = design.cycle().iter().filter(|x| in_ball(x)).count();
    let value = count as f64 / design.cycle().len() as f64;

    let n_floor = KAPPA_N_FLOOR.min(n_max.max(1));
    let mut hits = 0usize;
    let mut horizon_min = f64::INFINITY;
    for i in 0..n_max {
        if in_ball(design.point(i)) {
            hits += 1;
        }
        let n = i + 1;
        if n >= n_floor {
            horizon_min = horizon_min.min(hits as f64 / n as f64);
        }
    }
    if value == 0.0 {
        return Err(DesignError::ZeroKappa { x0: x0.to_vec(), delta_prime });
    }
    Ok(Kappa {
        value,
        in_ball_per_cycle: count,
        cycle_len: design.cycle().len(),
        horizon_min: if horizon_min.is_finite() { horizon_min } else { value },
        n_floor,
        n_max,
    })
}

/// Radius `δ′` such that `|θ(x; β′) − θ(x; β*)| ≥ ε/2` on the δ′-ball around
/// `x₀`, found by halving from the diameter of the space.
pub fn neighborhood_separation(
    family: &ThetaFamily,
    beta_prime: &[f64],
    beta_star: &[f64],
    x0: &[f64],
    eps: f64,
) -> Result<f64, DesignError> {
    neighborhood_separation_with(family, beta_prime, beta_star, x0, eps, DEFAULT_BALL_RESOLUTION)
}

pub fn neighborhood_separation_with(
    family: &ThetaFamily,
    beta_prime: &[f64],
    beta_star: &[f64],
    x0: &[f64],
    eps: f64,
    resolution: usize,
) -> Result<f64, DesignError> {
    let gap0 = (family.evaluate(beta_prime, x0) - family.evaluate(beta_star, x0)).abs();
    if !(gap0 > eps) {
        return Err(DesignError::Precondition(format!("|θ'(x0) − θ*(x0)| = {gap0} does not exceed eps = {eps}")));
    }
    let mut r = family.space().diameter().max(MIN_RADIUS);
    while r >= MIN_RADIUS {
        if separation_holds(family, beta_prime, beta_star, x0, eps, r, resolution) {
            return Ok(r);
        }
        r *= 0.5;
    }
    Err(DesignError::NoRadius { x0: x0.to_vec() })
}

/// `|θ(x; β′) − θ(x; β*)| ≥ ε/2` at every grid point of the `r`-ball.
pub fn separation_holds(
    family: &ThetaFamily,
    beta_prime: &[f64],
    beta_star: &[f64],
    x0: &[f64],
    eps: f64,
    r: f64,
    resolution: usize,
) -> bool {
    family
        .space()
        .ball_grid(x0, r, resolution)
        .iter()
        .all(|x| (family.evaluate(beta_prime, x) - family.evaluate(beta_star, x)).abs() >= 0.5 * eps)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationCertificate {
    pub x0: Vec<f64>,
    pub sup_distance: f64,
    pub delta_prime: f64,
    /// KL separation on the δ′-ball: `min (ε/4)·min{P(0<Y−θ*ₓ<ε/4), P(−ε/4<Y−θ*ₓ<0)}`.
    pub delta: f64,
    /// Covariate point attaining `delta`.
    pub delta_at: Vec<f64>,
    pub kappa: Kappa,
    pub alpha_prime: f64,
    /// `κδ/4`
    pub delta1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationConfig {
    pub sup_resolution: usize,
    pub ball_resolution: usize,
    pub kappa_horizon: usize,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            sup_resolution: DEFAULT_SUP_RESOLUTION,
            ball_resolution: DEFAULT_BALL_RESOLUTION,
            kappa_horizon: 10_000,
        }
    }
}

/// Certificate for `E(∏ f_{θ′ₓᵢ}/f_{θ*ₓᵢ})^{α′} ≤ e^{−nα′δ₁}` with `δ₁ = κδ/4`.
///
/// Locates the sup-attaining `x₀`, separates a δ′-ball around it, bounds the
/// KL gap from below on that ball, measures `κ(x₀, δ′)` and searches the α-grid
/// (largest first) for `α′` with `g_{α′} > E log(f_{θ*}/f_{θ′}) − κδ/2` at
/// every design slot.
pub fn separation_exponent(
    family: &ThetaFamily,
    truth: &ConditionalTrueDensity,
    design: &CovariateDesign,
    beta_prime: &[f64],
    beta_star: &[f64],
    tau: TauLevel,
    eps: f64,
    cfg: &SeparationConfig,
) -> Result<SeparationCertificate, DesignError> {
    let grid = family.space().grid(cfg.sup_resolution);
    let (x0, sup_distance) = family.sup_argmax_on(&grid, beta_prime, beta_star);
    if !(sup_distance > eps) {
        return Err(DesignError::Precondition(format!("sup-norm distance {sup_distance} does not exceed eps = {eps}")));
    }
    let delta_prime = neighborhood_separation_with(family, beta_prime, beta_star, &x0, eps, cfg.ball_resolution)?;

    let mut candidates = family.space().ball_grid(&x0, delta_prime, cfg.ball_resolution);
    candidates.extend(
        design.slots().into_iter().filter(|x| family.space().in_open_ball(x, &x0, delta_prime)).map(|x| x.to_vec()),
    );
    let mut delta = f64::INFINITY;
    let mut delta_at = x0.clone();
    for x in &candidates {
        let d = delta_lower_bound(&truth.at(x), family.evaluate(beta_star, x), 0.5 * eps, tau);
        if d < delta {
            delta = d;
            delta_at = x.clone();
        }
    }
    let kappa = kappa(design, &x0, delta_prime, cfg.kappa_horizon)?;
    if !(delta > 0.0) {
        return Err(DesignError::Precondition(format!("KL separation is 0 at x = {delta_at:?}; Assumption 6 fails")));
    }
    let slack = 0.5 * kappa.value * delta;

    // per-slot KL gaps do not depend on α
    let slots = design.slots();
    let gaps: Vec<(f64, f64, f64)> = slots
        .iter()
        .map(|x| {
            let (tp, ts) = (family.evaluate(beta_prime, x), family.evaluate(beta_star, x));
            Ok((tp, ts, kl_gap(&truth.at(x), tp, ts, tau)?))
        })
        .collect::<Result<_, DesignError>>()?;
    let mut worst = (slots[0].to_vec(), f64::NEG_INFINITY);
    for &alpha in ALPHA_GRID.iter() {
        let mut ok = true;
        for (x, &(tp, ts, gap)) in slots.iter().zip(&gaps) {
            let g = g_alpha(&truth.at(x), tp, ts, alpha, tau)?;
            let shortfall = (gap - slack) - g;
            if shortfall >= 0.0 {
                ok = false;
                if shortfall > worst.1 {
                    worst = (x.to_vec(), shortfall);
                }
                break;
            }
        }
        if ok {
            return Ok(SeparationCertificate {
                x0,
                sup_distance,
                delta_prime,
                delta,
                delta_at,
                delta1: 0.25 * kappa.value * delta,
                kappa,
                alpha_prime: alpha,
            });
        }
    }
    Err(DesignError::NoAlpha { worst_x: worst.0, shortfall: worst.1 })
}

/// `log E(∏_{i≤n} f_{θ′ₓᵢ}/f_{θ*ₓᵢ})^α = Σᵢ log E_{xᵢ}(f_{θ′}/f_{θ*})^α` by
/// independence, one quadrature per design slot.
pub fn log_product_moment(
    family: &ThetaFamily,
    truth: &ConditionalTrueDensity,
    design: &CovariateDesign,
    beta_prime: &[f64],
    beta_star: &[f64],
    tau: TauLevel,
    alpha: f64,
    n: usize,
) -> Result<f64, DesignError> {
    let per_slot: Vec<f64> = design
        .slots()
        .iter()
        .map(|x| {
            let a = alpha_affinity(
                &truth.at(x),
                family.evaluate(beta_prime, x),
                family.evaluate(beta_star, x),
                alpha,
                tau,
            )?;
            Ok(a.ln())
        })
        .collect::<Result<_, DesignError>>()?;
    Ok((0..n).map(|i| per_slot[design.slot(i)]).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::truth::TrueDensity;

    fn unit() -> CovariateSpace {
        CovariateSpace::interval(0.0, 1.0).unwrap()
    }

    fn affine() -> ThetaFamily {
        ThetaFamily::new(FamilyKind::Affine, unit(), vec![(-2.0, 2.0), (-2.0, 2.0)]).unwrap()
    }

    fn sine() -> ThetaFamily {
        let space = CovariateSpace::interval(0.0, 2.0).unwrap();
        ThetaFamily::new(FamilyKind::Sine, space, vec![(-1.0, 1.0), (0.5, 1.5), (1.0, 3.0)]).unwrap()
    }

    #[test]
    fn sup_norm_examples() {
        let f = affine();
        assert_eq!(sup_norm_distance(&f, &[0.3, 0.2], &[0.3, 0.2], 512), 0.0);
        assert!((sup_norm_distance(&f, &[0.0, 1.0], &[0.0, 0.0], 512) - 1.0).abs() < 1e-15);
        assert!((sup_norm_distance(&f, &[1.0, -2.0], &[0.0, 0.0], 512) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sup_norm_metric_axioms() {
        let f = sine();
        let pts = [[0.1, 0.7, 1.2], [-0.5, 1.4, 2.9], [0.9, 0.5, 1.0], [0.0, 1.0, 2.0]];
        for a in &pts {
            for b in &pts {
                let dab = sup_norm_distance(&f, a, b, 512);
                assert_eq!(dab, sup_norm_distance(&f, b, a, 512));
                for c in &pts {
                    let lhs = sup_norm_distance(&f, a, c, 512);
                    assert!(lhs <= dab + sup_norm_distance(&f, b, c, 512) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn family_bound_holds_on_grid() {
        for f in [affine(), sine()] {
            assert!(f.observed_bound(9, 101) <= f.bound() + 1e-12);
        }
        assert_eq!(affine().bound(), 4.0);
        // Lipschitz in x: |β₁| ≤ 2 for affine, |β₁β₂| ≤ 4.5 for sine
        assert!(affine().x_modulus(&[0.0, 2.0], 101) <= 2.0 + 1e-9);
        assert!(sine().x_modulus(&[0.0, 1.5, 3.0], 1001) <= 4.5 + 1e-9);
    }

    #[test]
    fn kappa_cyclic_grid_count() {
        let d = CovariateDesign::cyclic_grid(unit(), 100).unwrap();
        // 0.41, …, 0.59 lie strictly within 0.1 of 0.5
        let k = kappa(&d, &[0.5], 0.1, 10_000).unwrap();
        assert_eq!(k.in_ball_per_cycle, 19);
        assert_eq!(k.value, 0.19);
        assert!(k.horizon_min <= k.value);
    }

    #[test]
    fn kappa_constant_designs() {
        let d = CovariateDesign::constant(unit(), vec![0.3]).unwrap();
        assert_eq!(kappa(&d, &[0.3], 0.05, 1000).unwrap().value, 1.0);
        let far = CovariateDesign::constant(unit(), vec![0.5]).unwrap();
        assert!(matches!(kappa(&far, &[0.3], 0.1, 1000), Err(DesignError::ZeroKappa { .. })));
    }

    #[test]
    fn kappa_monotone_in_radius() {
        let d = CovariateDesign::uniform_draws(unit(), 257, 4).unwrap();
        let mut prev = 1.0;
        for r in [0.5, 0.3, 0.2, 0.1, 0.05, 0.02] {
            let k = kappa(&d, &[0.37], r, 2000).map(|k| k.value).unwrap_or(0.0);
            assert!(k <= prev);
            prev = k;
        }
    }

    #[test]
    fn hold_last_design_liminf() {
        let d =
            CovariateDesign::from_list(unit(), vec![vec![0.1], vec![0.2], vec![0.9]], RepeatRule::HoldLast).unwrap();
        assert_eq!(d.point(0), &[0.1]);
        assert_eq!(d.point(5), &[0.9]);
        assert_eq!(kappa(&d, &[0.9], 0.05, 500).unwrap().value, 1.0);
        assert!(kappa(&d, &[0.1], 0.05, 500).is_err());
    }

    #[test]
    fn design_rejects_points_outside() {
        assert!(CovariateDesign::constant(unit(), vec![1.5]).is_err());
    }

    #[test]
    fn design_csv_export() {
        let d = CovariateDesign::cyclic_grid(unit(), 4).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf, 5).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "index,x1\n1,0\n2,0.25\n3,0.5\n4,0.75\n5,0\n");
    }

    #[test]
    fn separation_examples() {
        let f = affine();
        // constant gap of 2: the whole space qualifies
        let r = neighborhood_separation(&f, &[2.0, 0.0], &[0.0, 0.0], &[0.4], 1.0).unwrap();
        assert!(r >= 1.0);
        let r = neighborhood_separation(&f, &[0.0, 2.0], &[0.0, 0.0], &[1.0], 1.0).unwrap();
        assert!(r <= 0.75 && r > 0.0);
        assert!(neighborhood_separation(&f, &[0.0, 0.5], &[0.0, 0.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn separation_radius_survives_refinement() {
        let f = sine();
        let (bp, bs) = ([0.2, 1.4, 2.6], [0.0, 1.0, 2.0]);
        let grid = f.space().grid(512);
        let (x0, d) = f.sup_argmax_on(&grid, &bp, &bs);
        let eps = 0.8 * d;
        let r = neighborhood_separation(&f, &bp, &bs, &x0, eps).unwrap();
        assert!(separation_holds(&f, &bp, &bs, &x0, eps, r, 10 * DEFAULT_BALL_RESOLUTION));
    }

    fn gaussian_truth(fam: &ThetaFamily, beta0: Vec<f64>) -> ConditionalTrueDensity {
        let tau = TauLevel::new(0.5).unwrap();
        ConditionalTrueDensity::new(TrueDensity::gaussian(0.0, 1.0), tau, fam.clone(), beta0, 0.5, vec![0.5]).unwrap()
    }

    #[test]
    fn separation_exponent_affine() {
        let fam = affine();
        let truth = gaussian_truth(&fam, vec![0.0, 0.0]);
        let design = CovariateDesign::cyclic_grid(unit(), 100).unwrap();
        let tau = TauLevel::new(0.5).unwrap();
        let cert = separation_exponent(
            &fam,
            &truth,
            &design,
            &[0.5, 0.5],
            &[0.0, 0.0],
            tau,
            0.3,
            &SeparationConfig::default(),
        )
        .unwrap();
        assert!(cert.delta1 > 0.0);
        assert!(cert.alpha_prime > 0.0 && cert.alpha_prime < 1.0);
        assert!((cert.delta1 - 0.25 * cert.kappa.value * cert.delta).abs() < 1e-15);

        let err = separation_exponent(
            &fam,
            &truth,
            &design,
            &[0.0, 0.0],
            &[0.0, 0.0],
            tau,
            0.3,
            &SeparationConfig::default(),
        );
        assert!(matches!(err, Err(DesignError::Precondition(_))));

        // sup of θ′ − θ* = 0.5 + 0.5x sits at x = 1; a design parked at 0 never visits it
        let parked = CovariateDesign::constant(unit(), vec![0.0]).unwrap();
        let err = separation_exponent(
            &fam,
            &truth,
            &parked,
            &[0.5, 0.5],
            &[0.0, 0.0],
            tau,
            0.3,
            &SeparationConfig::default(),
        );
        assert!(matches!(err, Err(DesignError::ZeroKappa { .. })));
    }

    #[test]
    fn product_moment_below_certificate() {
        let fam = affine();
        let truth = gaussian_truth(&fam, vec![0.0, 0.0]);
        let design = CovariateDesign::cyclic_grid(unit(), 100).unwrap();
        let tau = TauLevel::new(0.5).unwrap();
        let (bp, bs) = ([0.5, 0.5], [0.0, 0.0]);
        let cert =
            separation_exponent(&fam, &truth, &design, &bp, &bs, tau, 0.3, &SeparationConfig::default()).unwrap();
        for n in [50, 200] {
            let lm = log_product_moment(&fam, &truth, &design, &bp, &bs, tau, cert.alpha_prime, n).unwrap();
            assert!(lm < -(n as f64) * cert.alpha_prime * cert.delta1);
        }
    }
}
