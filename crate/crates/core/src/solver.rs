//! Outer minimisation over the decision set.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::duals::{envelope_subgradient, inner_gamma_opt, LossSpec, SaaDualProblem};
use crate::error::{DroError, Result};
use crate::expfam::{ConjugatePosterior, SamplingModel, StandardParams};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeasibleSet {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Simplex { dimension: usize },
}

impl FeasibleSet {
    /// `[lower, upper]^dim`.
    pub fn cube(dim: usize, lower: f64, upper: f64) -> Self {
        FeasibleSet::Box {
            lower: vec![lower; dim],
            upper: vec![upper; dim],
        }
    }

    pub fn simplex(dim: usize) -> Self {
        FeasibleSet::Simplex { dimension: dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            FeasibleSet::Box { lower, .. } => lower.len(),
            FeasibleSet::Simplex { dimension } => *dimension,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FeasibleSet::Box { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(DroError::Domain(
                        "box bounds must be nonempty and of equal length".into(),
                    ));
                }
                if lower
                    .iter()
                    .zip(upper)
                    .any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite())
                {
                    return Err(DroError::Domain("box needs finite lower <= upper".into()));
                }
                Ok(())
            }
            FeasibleSet::Simplex { dimension } => {
                if *dimension == 0 {
                    return Err(DroError::Domain("simplex dimension must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    /// Box midpoint or the simplex barycentre.
    pub fn initial_point(&self) -> Vec<f64> {
        match self {
            FeasibleSet::Box { lower, upper } => {
                lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect()
            }
            FeasibleSet::Simplex { dimension } => vec![1.0 / *dimension as f64; *dimension],
        }
    }

    /// Largest box side, or 1 for the simplex.
    pub fn width(&self) -> f64 {
        match self {
            FeasibleSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| u - l)
                .fold(0.0, f64::max)
                .max(f64::MIN_POSITIVE),
            FeasibleSet::Simplex { .. } => 1.0,
        }
    }

    pub fn random_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            FeasibleSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| l + (u - l) * rng.random::<f64>())
                .collect(),
            FeasibleSet::Simplex { dimension } => {
                let e: Vec<f64> = (0..*dimension).map(|_| Exp1.sample(rng)).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            }
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        match self {
            FeasibleSet::Box { lower, upper } => {
                x.len() == lower.len()
                    && x
                        .iter()
                        .zip(lower.iter().zip(upper))
                        .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
            }
            FeasibleSet::Simplex { dimension } => {
                x.len() == *dimension
                    && x.iter().all(|&v| v >= -tol)
                    && (x.iter().sum::<f64>() - 1.0).abs() <= tol
            }
        }
    }
}

/// Euclidean projection onto the feasible set.
pub fn project(set: &FeasibleSet, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != set.dim() {
        return Err(DroError::DimensionMismatch {
            expected: set.dim(),
            got: y.len(),
        });
    }
    Ok(match set {
        FeasibleSet::Box { lower, upper } => y
            .iter()
            .zip(lower.iter().zip(upper))
            .map(|(v, (l, u))| v.clamp(*l, *u))
            .collect(),
        FeasibleSet::Simplex { .. } => project_simplex(y),
    })
}

/// Sort-based projection onto {x ≥ 0, Σx = 1}.
pub fn project_simplex(y: &[f64]) -> Vec<f64> {
    let mut u = y.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    y.iter().map(|v| (v - theta).max(0.0)).collect()
}

/// Diminishing step-size schedules for projected subgradient descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// a / (1 + b k)
    Harmonic,
    /// a / √(1 + b k)
    InverseSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    pub max_iters: usize,
    /// Relative best-objective improvement over 50 iterations that counts as
    /// converged; also the KKT target of the smooth closed-form path.
    pub tol: f64,
    pub step_rule: StepRule,
    /// `None` picks a = width/√max_iters.
    pub step_a: Option<f64>,
    pub step_b: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Route PE with a Gaussian nominal and linear loss to the closed form.
    pub closed_form_linear: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            tol: 1e-8,
            step_rule: StepRule::InverseSqrt,
            step_a: None,
            step_b: 0.1,
            restarts: 1,
            seed: 0,
            closed_form_linear: false,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(DroError::Config(format!("solver tol must be > 0; got {}", self.tol)));
        }
        if self.restarts == 0 {
            return Err(DroError::Config("solver restarts must be >= 1".into()));
        }
        if let Some(a) = self.step_a {
            if !(a > 0.0) {
                return Err(DroError::Config(format!("step_a must be > 0; got {a}")));
            }
        }
        if !(self.step_b >= 0.0) {
            return Err(DroError::Config("step_b must be >= 0".into()));
        }
        Ok(())
    }
}

/// Non-finite γ is written as `null`.
mod serde_gamma {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(g: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if g.is_finite() {
            s.serialize_f64(*g)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub x_star: Vec<f64>,
    /// γ* at `x_star`; `f64::INFINITY` for the zero-radius boundary.
    #[serde(with = "serde_gamma")]
    pub gamma_star: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub solve_time_s: f64,
    pub sample_time_s: f64,
    /// ‖x − P(x − ∇φ(x))‖ for the smooth closed-form paths.
    #[serde(default)]
    pub kkt_residual: Option<f64>,
}

/// Value, subgradient and inner γ* of an objective at a point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub grad: Vec<f64>,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct OuterResult {
    pub x: Vec<f64>,
    pub eval: Evaluation,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimise a convex function given by a value/subgradient oracle.
///
/// One-dimensional boxes are solved by bisection on the sign of the
/// subgradient, which brackets the minimiser of any convex function. Other
/// sets use projected subgradient descent with normalised diminishing steps,
/// best-iterate reporting and random restarts.
pub fn minimize<F>(set: &FeasibleSet, config: &SolveConfig, mut oracle: F) -> Result<OuterResult>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    set.validate()?;
    config.validate()?;
    let x0 = project(set, &set.initial_point())?;
    let e0 = oracle(&x0)?;
    if config.max_iters == 0 {
        return Ok(OuterResult {
            x: x0,
            eval: e0,
            iterations: 0,
            converged: false,
        });
    }
    if let FeasibleSet::Box { lower, upper } = set {
        if lower.len() == 1 {
            return bisect_1d(lower[0], upper[0], config, x0, e0, oracle);
        }
    }

    let mut best_x = x0.clone();
    let mut best = e0.clone();
    let mut total_iters = 0;
    let mut all_converged = true;
    let a = config
        .step_a
        .unwrap_or(set.width() / (config.max_iters as f64).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for r in 0..config.restarts {
        let mut x = if r == 0 {
            x0.clone()
        } else {
            set.random_point(&mut rng)
        };
        let mut history: Vec<f64> = Vec::with_capacity(config.max_iters);
        let mut run_best = f64::INFINITY;
        let mut converged = false;
        for k in 0..config.max_iters {
            let e = if k == 0 && r == 0 { e0.clone() } else { oracle(&x)? };
            total_iters += 1;
            if e.value < run_best {
                run_best = e.value;
            }
            if e.value < best.value {
                best = e.clone();
                best_x = x.clone();
            }
            history.push(run_best);
            if k >= 50 {
                let old = history[k - 50];
                if old - run_best <= config.tol * (1.0 + run_best.abs()) {
                    converged = true;
                    break;
                }
            }
            let gnorm = linalg::norm2(&e.grad);
            if gnorm == 0.0 {
                converged = true;
                break;
            }
            let decay = 1.0 + config.step_b * k as f64;
            let step = match config.step_rule {
                StepRule::Harmonic => a / decay,
                StepRule::InverseSqrt => a / decay.sqrt(),
            } / gnorm;
            let y: Vec<f64> = x.iter().zip(&e.grad).map(|(xi, gi)| xi - step * gi).collect();
            x = project(set, &y)?;
        }
        all_converged &= converged;
    }
    Ok(OuterResult {
        x: best_x,
        eval: best,
        iterations: total_iters,
        converged: all_converged,
    })
}

fn bisect_1d<F>(
    lower: f64,
    upper: f64,
    config: &SolveConfig,
    x0: Vec<f64>,
    e0: Evaluation,
    mut oracle: F,
) -> Result<OuterResult>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    let mut best_x = x0;
    let mut best = e0;
    let (mut lo, mut hi) = (lower, upper);
    let mut iters = 0;
    let mut converged = false;
    let consider = |x: f64, e: Evaluation, best_x: &mut Vec<f64>, best: &mut Evaluation| {
        if e.value < best.value {
            *best_x = vec![x];
            *best = e;
        }
    };
    // The midpoint is the initial point, already evaluated.
    let mut g = best.grad[0];
    let mut mid = best_x[0];
    loop {
        if g > 0.0 {
            hi = mid;
        } else if g < 0.0 {
            lo = mid;
        } else {
            converged = true;
            break;
        }
        if hi - lo <= 1e-10 * (1.0 + lo.abs().max(hi.abs())) {
            converged = true;
            break;
        }
        if iters >= config.max_iters {
            break;
        }
        mid = 0.5 * (lo + hi);
        let e = oracle(&[mid])?;
        iters += 1;
        g = e.grad[0];
        consider(mid, e, &mut best_x, &mut best);
    }
    if converged {
        for x in [lo, hi] {
            if x != best_x[0] {
                let e = oracle(&[x])?;
                consider(x, e, &mut best_x, &mut best);
            }
        }
    }
    Ok(OuterResult {
        x: best_x,
        eval: best,
        iterations: iters.max(1),
        converged,
    })
}

/// Minimise the sample-average dual of `problem` over `set`.
pub fn solve_saa(problem: &SaaDualProblem, set: &FeasibleSet, config: &SolveConfig) -> Result<DualSolution> {
    if problem.dim() != set.dim() {
        return Err(DroError::DimensionMismatch {
            expected: set.dim(),
            got: problem.dim(),
        });
    }
    let start = Instant::now();
    let out = minimize(set, config, |x| {
        let inner = inner_gamma_opt(problem, x)?;
        let grad = envelope_subgradient(problem, x, &inner);
        Ok(Evaluation {
            value: inner.value,
            grad,
            gamma: inner.gamma_star,
        })
    })?;
    Ok(DualSolution {
        x_star: out.x,
        gamma_star: out.eval.gamma,
        objective: out.eval.value,
        iterations: out.iterations,
        converged: out.converged,
        solve_time_s: start.elapsed().as_secs_f64(),
        sample_time_s: 0.0,
        kkt_residual: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Posterior-expectation ball around the nominal p(ξ | η̂), radius ε − G.
    #[serde(rename = "PE")]
    Pe,
    /// KL ball around the posterior predictive, radius ε.
    #[serde(rename = "PP")]
    Pp,
}

/// Solve the Bayesian-ambiguity-set DRO problem with `m` nominal draws.
///
/// For unbounded losses and a heavy-tailed predictive the exact PP dual can be
/// infinite; the sample average is always finite but then does not solve the
/// population problem.
#[allow(clippy::too_many_arguments)]
pub fn solve_drobas<R: Rng + ?Sized>(
    posterior: &ConjugatePosterior,
    loss: &LossSpec,
    set: &FeasibleSet,
    epsilon: f64,
    variant: Variant,
    m: usize,
    config: &SolveConfig,
    rng: &mut R,
) -> Result<DualSolution> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(DroError::Domain(format!("epsilon must be finite and >= 0; got {epsilon}")));
    }
    if posterior.dim() != set.dim() {
        return Err(DroError::DimensionMismatch {
            expected: set.dim(),
            got: posterior.dim(),
        });
    }
    let eps_eff = match variant {
        Variant::Pe => epsilon - posterior.gap()?,
        Variant::Pp => epsilon,
    };
    if eps_eff < 0.0 {
        return Err(DroError::Unbounded { eps_eff });
    }
    if m == 0 {
        return Err(DroError::Input("sample count M must be >= 1".into()));
    }

    if variant == Variant::Pe
        && config.closed_form_linear
        && *loss == LossSpec::LinearPortfolio
        && matches!(set, FeasibleSet::Simplex { .. })
    {
        if let StandardParams::MvNormal { mean, cov } = posterior.nominal()?.params {
            return solve_closed_form_portfolio(&mean, &cov, eps_eff, set, config);
        }
    }

    let t = Instant::now();
    let samples = match variant {
        Variant::Pe => posterior.nominal()?.sample(m, rng),
        Variant::Pp => posterior.predictive()?.sample(m, rng),
    };
    let sample_time_s = t.elapsed().as_secs_f64();
    let problem = SaaDualProblem::new(eps_eff, samples, *loss)?;
    let mut sol = solve_saa(&problem, set, config)?;
    sol.sample_time_s = sample_time_s;
    Ok(sol)
}

/// −μ̂ᵀx + c √(xᵀΣ̂x) and its gradient.
pub(crate) fn gaussian_linear_objective(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    c: f64,
    x: &[f64],
) -> (f64, Vec<f64>) {
    let xv = DVector::from_column_slice(x);
    let sx = sigma * &xv;
    let q = xv.dot(&sx).max(0.0);
    let root = q.sqrt();
    let value = -mu.dot(&xv) + c * root;
    let grad: Vec<f64> = if root > 0.0 {
        (0..x.len()).map(|i| -mu[i] + c * sx[i] / root).collect()
    } else {
        (0..x.len()).map(|i| -mu[i]).collect()
    };
    (value, grad)
}

/// Projected gradient with backtracking on a smooth objective over the simplex.
pub(crate) fn projected_gradient<F>(
    set: &FeasibleSet,
    config: &SolveConfig,
    mut f: F,
) -> Result<(Vec<f64>, f64, usize, bool, f64)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    set.validate()?;
    config.validate()?;
    let mut x = project(set, &set.initial_point())?;
    let (mut fx, mut gx) = f(&x);
    let residual = |x: &[f64], g: &[f64]| -> Result<f64> {
        let y: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - b).collect();
        let p = project(set, &y)?;
        Ok(x.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
    };
    let mut res = residual(&x, &gx)?;
    let mut t = 1.0;
    let mut iters = 0;
    let target = config.tol.min(1e-9);
    while iters < config.max_iters && res > target {
        iters += 1;
        loop {
            let y: Vec<f64> = x.iter().zip(&gx).map(|(a, b)| a - t * b).collect();
            let xn = project(set, &y)?;
            let (fnew, gnew) = f(&xn);
            let d: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let model = fx + linalg::dot(&gx, &d) + linalg::dot(&d, &d) / (2.0 * t);
            if fnew <= model + 1e-15 * (1.0 + fx.abs()) || t < 1e-20 {
                x = xn;
                fx = fnew;
                gx = gnew;
                break;
            }
            t *= 0.5;
        }
        t *= 2.0;
        res = residual(&x, &gx)?;
    }
    Ok((x, fx, iters, res <= target, res))
}

/// Minimise −μ̂ᵀx + √(2ε′)·√(xᵀΣ̂x) over the simplex.
pub fn solve_closed_form_portfolio(
    mu_hat: &DVector<f64>,
    sigma_hat: &DMatrix<f64>,
    eps_eff: f64,
    set: &FeasibleSet,
    config: &SolveConfig,
) -> Result<DualSolution> {
    if eps_eff < 0.0 {
        return Err(DroError::Unbounded { eps_eff });
    }
    if !matches!(set, FeasibleSet::Simplex { .. }) {
        return Err(DroError::Domain("the closed-form portfolio path needs a simplex".into()));
    }
    if mu_hat.len() != set.dim() || sigma_hat.nrows() != set.dim() {
        return Err(DroError::DimensionMismatch {
            expected: set.dim(),
            got: mu_hat.len(),
        });
    }
    linalg::cholesky(sigma_hat, "covariance")?;
    let start = Instant::now();
    let c = (2.0 * eps_eff).sqrt();
    let (x, value, iterations, converged, res) =
        projected_gradient(set, config, |x| gaussian_linear_objective(mu_hat, sigma_hat, c, x))?;
    let q = linalg::quad_form(sigma_hat, &x);
    let gamma_star = if eps_eff > 0.0 {
        (q / (2.0 * eps_eff)).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(DualSolution {
        x_star: x,
        gamma_star,
        objective: value,
        iterations,
        converged,
        solve_time_s: start.elapsed().as_secs_f64(),
        sample_time_s: 0.0,
        kkt_residual: Some(res),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::NiwParams;
    use crate::samples::Samples;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Projection oracle: for each support pattern S, minimise ‖y − x‖² on
    /// {x_S free, Σx_S = 1, x_{¬S} = 0} in closed form and keep feasible ones.
    fn simplex_oracle(y: &[f64]) -> Vec<f64> {
        let d = y.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << d) {
            let idx: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
            let shift = (idx.iter().map(|&i| y[i]).sum::<f64>() - 1.0) / idx.len() as f64;
            let mut x = vec![0.0; d];
            let mut ok = true;
            for &i in &idx {
                x[i] = y[i] - shift;
                if x[i] < -1e-14 {
                    ok = false;
                }
            }
            if !ok {
                continue;
            }
            let dist: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
            if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
                best = Some((dist, x));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn projection_examples() {
        let b = FeasibleSet::cube(1, 0.0, 50.0);
        assert_eq!(project(&b, &[-3.0]).unwrap(), vec![0.0]);
        let s = FeasibleSet::simplex(3);
        let p = project(&s, &[0.4, 0.2, 0.1]).unwrap();
        for (a, e) in p.iter().zip([0.5, 0.3, 0.2]) {
            assert!((a - e).abs() < 1e-15);
        }
        assert!(project(&s, &[1.0]).is_err());
    }

    #[test]
    fn simplex_projection_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let y: Vec<f64> = (0..4).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let p = project_simplex(&y);
            let o = simplex_oracle(&y);
            for (a, b) in p.iter().zip(&o) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    fn nv_problem(eps: f64, data: &[f64]) -> SaaDualProblem {
        SaaDualProblem::new(
            eps,
            Samples::from_scalars(data),
            LossSpec::Newsvendor { h: 3.0, b: 8.0 },
        )
        .unwrap()
    }

    #[test]
    fn zero_radius_newsvendor_hits_sample_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..101).map(|_| rng.random_range(0.0..40.0)).collect();
        let sol = solve_saa(&nv_problem(0.0, &data), &FeasibleSet::cube(1, 0.0, 100.0), &SolveConfig::default()).unwrap();
        // The SAA newsvendor objective is minimised on [ξ_(k), ξ_(k+1)] around the 8/11 quantile.
        let mut sorted = data.clone();
        sorted.sort_by(f64::total_cmp);
        let mean_cost = |x: f64| {
            data.iter().map(|&xi| if x > xi { 3.0 * (x - xi) } else { 8.0 * (xi - x) }).sum::<f64>() / data.len() as f64
        };
        let best = sorted.iter().map(|&x| mean_cost(x)).fold(f64::INFINITY, f64::min);
        assert!(sol.converged);
        assert!((sol.objective - best).abs() < 1e-8, "{} vs {best}", sol.objective);
    }

    #[test]
    fn max_iters_zero_returns_initial_point() {
        let cfg = SolveConfig {
            max_iters: 0,
            ..SolveConfig::default()
        };
        let p = nv_problem(0.1, &[1.0, 5.0, 9.0]);
        let sol = solve_saa(&p, &FeasibleSet::cube(1, 0.0, 100.0), &cfg).unwrap();
        assert_eq!(sol.x_star, vec![50.0]);
        assert!(!sol.converged);
        assert_eq!(sol.objective, inner_gamma_opt(&p, &[50.0]).unwrap().value);
    }

    #[test]
    fn pe_below_gap_is_unbounded() {
        let post = ConjugatePosterior::gamma_exponential(3.0, 31.0).unwrap();
        let g = post.gap().unwrap();
        let err = solve_drobas(
            &post,
            &LossSpec::Newsvendor { h: 3.0, b: 8.0 },
            &FeasibleSet::cube(1, 0.0, 100.0),
            0.5 * g,
            Variant::Pe,
            10,
            &SolveConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert!(matches!(err, DroError::Unbounded { .. }));
    }

    #[test]
    fn pe_at_gap_recovers_nominal_quantile() {
        // Normal-Gamma with α/β = 1 so the nominal is N(μ̄, 1); 8/11 quantile = μ̄ + 0.6045.
        let post = ConjugatePosterior::normal_gamma(20.0, 50.0, 200.0, 200.0).unwrap();
        let eps = post.eps_min().unwrap();
        let sol = solve_drobas(
            &post,
            &LossSpec::Newsvendor { h: 3.0, b: 8.0 },
            &FeasibleSet::cube(1, 0.0, 100.0),
            eps,
            Variant::Pe,
            100_000,
            &SolveConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(42),
        )
        .unwrap();
        let z = 0.604_585_346_583_237_6;
        assert!((sol.x_star[0] - (20.0 + z)).abs() < 1e-2, "{:?}", sol.x_star);
        assert!(sol.gamma_star.is_infinite());
    }

    #[test]
    fn closed_form_portfolio_examples() {
        let mu = DVector::from_vec(vec![0.01, 0.03, 0.02]);
        let sigma = DMatrix::identity(3, 3) * 0.01;
        let sol = solve_closed_form_portfolio(&mu, &sigma, 0.0, &FeasibleSet::simplex(3), &SolveConfig::default()).unwrap();
        assert!((sol.x_star[1] - 1.0).abs() < 1e-9, "{:?}", sol.x_star);
        let mu = DVector::from_element(4, 0.02);
        let sol = solve_closed_form_portfolio(
            &mu,
            &DMatrix::identity(4, 4),
            0.3,
            &FeasibleSet::simplex(4),
            &SolveConfig::default(),
        )
        .unwrap();
        for v in &sol.x_star {
            assert!((v - 0.25).abs() < 1e-9);
        }
        assert!(sol.converged);
    }

    #[test]
    fn closed_form_portfolio_beats_random_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 5;
        let mu = DVector::from_fn(d, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
        let a = DMatrix::from_fn(d, d, |_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
        let sigma = &a * a.transpose() + DMatrix::identity(d, d) * 1e-3;
        let eps = 0.05;
        let set = FeasibleSet::simplex(d);
        let sol = solve_closed_form_portfolio(&mu, &sigma, eps, &set, &SolveConfig::default()).unwrap();
        let c = (2.0 * eps).sqrt();
        let mut best = f64::INFINITY;
        for _ in 0..200_000 {
            let x = set.random_point(&mut rng);
            best = best.min(gaussian_linear_objective(&mu, &sigma, c, &x).0);
        }
        assert!(sol.objective <= best + 1e-12);
        assert!(sol.kkt_residual.unwrap() <= 1e-9);
    }

    #[test]
    fn drobas_closed_form_route_matches_direct_call() {
        let niw = NiwParams::new(
            DVector::from_vec(vec![0.01, 0.02, 0.015]),
            20.0,
            15.0,
            DMatrix::from_row_slice(3, 3, &[0.02, 0.001, 0.0, 0.001, 0.03, 0.002, 0.0, 0.002, 0.025]),
        )
        .unwrap();
        let post = ConjugatePosterior::normal_inverse_wishart(niw).unwrap();
        let eps = post.gap().unwrap() + 0.1;
        let cfg = SolveConfig {
            closed_form_linear: true,
            ..SolveConfig::default()
        };
        let set = FeasibleSet::simplex(3);
        let a = solve_drobas(
            &post,
            &LossSpec::LinearPortfolio,
            &set,
            eps,
            Variant::Pe,
            10,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let StandardParams::MvNormal { mean, cov } = post.nominal().unwrap().params else {
            panic!()
        };
        let b = solve_closed_form_portfolio(&mean, &cov, eps - post.gap().unwrap(), &set, &cfg).unwrap();
        for (u, v) in a.x_star.iter().zip(&b.x_star) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn solves_are_deterministic() {
        let post = ConjugatePosterior::gamma_exponential(3.0, 61.0).unwrap();
        let run = || {
            let mut s = solve_drobas(
                &post,
                &LossSpec::Newsvendor { h: 3.0, b: 8.0 },
                &FeasibleSet::cube(1, 0.0, 100.0),
                0.3,
                Variant::Pp,
                200,
                &SolveConfig::default(),
                &mut ChaCha8Rng::seed_from_u64(77),
            )
            .unwrap();
            s.solve_time_s = 0.0;
            s.sample_time_s = 0.0;
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn multi_dimensional_subgradient_is_near_optimal() {
        // Separable 2D newsvendor: the optimum is the sum of 1D optima.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.random_range(0.0..20.0), rng.random_range(5.0..30.0)])
            .collect();
        let p = SaaDualProblem::new(0.0, Samples::from_rows(&rows).unwrap(), LossSpec::Newsvendor { h: 3.0, b: 8.0 }).unwrap();
        let set = FeasibleSet::cube(2, 0.0, 100.0);
        let cfg = SolveConfig {
            max_iters: 20_000,
            tol: 1e-12,
            restarts: 2,
            ..SolveConfig::default()
        };
        let sol = solve_saa(&p, &set, &cfg).unwrap();
        let mut opt = 0.0;
        for d in 0..2 {
            let col: Vec<f64> = rows.iter().map(|r| r[d]).collect();
            let one = solve_saa(&nv_problem(0.0, &col), &FeasibleSet::cube(1, 0.0, 100.0), &SolveConfig::default()).unwrap();
            opt += one.objective;
        }
        assert!(sol.objective >= opt - 1e-9);
        assert!(sol.objective - opt < 1e-2 * opt, "{} vs {opt}", sol.objective);
        assert!(set.contains(&sol.x_star, 1e-12));
    }

    #[test]
    fn dual_solution_json_round_trip_with_infinite_gamma() {
        let s = DualSolution {
            x_star: vec![1.0],
            gamma_star: f64::INFINITY,
            objective: 2.0,
            iterations: 3,
            converged: true,
            solve_time_s: 0.0,
            sample_time_s: 0.0,
            kkt_residual: None,
        };
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"gamma_star\":null"));
        assert_eq!(serde_json::from_str::<DualSolution>(&j).unwrap(), s);
    }

    proptest! {
        #[test]
        fn projections_are_feasible_and_closest(
            y in prop::collection::vec(-5.0f64..5.0, 1..7),
            z_raw in prop::collection::vec(0.0f64..1.0, 7),
        ) {
            let d = y.len();
            let s = FeasibleSet::simplex(d);
            let p = project(&s, &y).unwrap();
            prop_assert!(s.contains(&p, 1e-12));
            let zs: f64 = z_raw[..d].iter().sum::<f64>() + 1e-12;
            let z: Vec<f64> = z_raw[..d].iter().map(|v| (v + 1e-12 / d as f64) / zs).collect();
            let dp: f64 = p.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
            let dz: f64 = z.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(dp <= dz + 1e-12);

            let b = FeasibleSet::cube(d, -1.0, 2.0);
            let pb = project(&b, &y).unwrap();
            prop_assert!(b.contains(&pb, 0.0));
        }
    }
}
