//! Comparison methods: two-stage Bayesian DRO, empirical KL-DRO and
//! Wasserstein DRO.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::duals::{envelope_subgradient, solve_inner, LossSpec, SaaDualProblem};
use crate::error::{DroError, Result};
use crate::expfam::{sample_inverse_wishart, ConjugatePosterior, NiwParams, NominalModel, SamplingModel};
use crate::linalg;
use crate::samples::Samples;
use crate::solver::{
    minimize, projected_gradient, solve_saa, DualSolution, Evaluation,
    FeasibleSet, SolveConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BdroConfig {
    pub m_theta: usize,
    pub m_xi: usize,
    pub epsilon: f64,
}

impl BdroConfig {
    /// Split a total budget M into M_θ × M_ξ: √M each for perfect squares,
    /// otherwise the factor pair closest to √M with M_θ ≥ M_ξ.
    pub fn split(m: usize, epsilon: f64) -> Self {
        let mut xi = (m as f64).sqrt().floor() as usize;
        while xi > 1 && !m.is_multiple_of(xi) {
            xi -= 1;
        }
        let xi = xi.max(1);
        Self {
            m_theta: m / xi,
            m_xi: xi,
            epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_theta == 0 || self.m_xi == 0 {
            return Err(DroError::Config("BDRO needs m_theta >= 1 and m_xi >= 1".into()));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(DroError::Domain(format!(
                "BDRO epsilon must be finite and >= 0; got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// (1/M_θ) Σ_i inf_γ γε + γ ln (1/M_ξ) Σ_j e^{f_x(ξ_ij)/γ} with fixed draws.
#[derive(Debug, Clone)]
pub struct BdroProblem {
    pub parts: Vec<SaaDualProblem>,
}

impl BdroProblem {
    /// One block of likelihood draws per posterior draw.
    pub fn new(epsilon: f64, blocks: Vec<Samples>, loss: LossSpec) -> Result<Self> {
        if blocks.is_empty() {
            return Err(DroError::Input("BDRO needs at least one posterior draw".into()));
        }
        if epsilon < 0.0 {
            return Err(DroError::Unbounded { eps_eff: epsilon });
        }
        let parts = blocks
            .into_iter()
            .map(|b| SaaDualProblem::new(epsilon, b, loss))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { parts })
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        let k = self.parts.len() as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; x.len()];
        let mut gamma = 0.0;
        for p in &self.parts {
            let inner = solve_inner(p.eps_eff, &p.losses(x)?)?;
            value += inner.value;
            gamma += inner.gamma_star;
            for (g, s) in grad.iter_mut().zip(envelope_subgradient(p, x, &inner)) {
                *g += s;
            }
        }
        grad.iter_mut().for_each(|g| *g /= k);
        Ok(Evaluation {
            value: value / k,
            grad,
            gamma: gamma / k,
        })
    }
}

/// Minimise a fixed-sample BDRO problem. The reported γ* is the average of
/// the per-draw multipliers.
pub fn solve_bdro_problem(problem: &BdroProblem, set: &FeasibleSet, config: &SolveConfig) -> Result<DualSolution> {
    let start = Instant::now();
    let out = minimize(set, config, |x| problem.evaluate(x))?;
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

pub fn solve_bdro<R: Rng + ?Sized>(
    posterior: &ConjugatePosterior,
    loss: &LossSpec,
    set: &FeasibleSet,
    config: &BdroConfig,
    solve_config: &SolveConfig,
    rng: &mut R,
) -> Result<DualSolution> {
    config.validate()?;
    if posterior.dim() != set.dim() {
        return Err(DroError::DimensionMismatch {
            expected: set.dim(),
            got: posterior.dim(),
        });
    }
    let t = Instant::now();
    let mut blocks = Vec::with_capacity(config.m_theta);
    for _ in 0..config.m_theta {
        let theta = posterior.sample_parameters(rng);
        blocks.push(NominalModel::new(theta)?.sample(config.m_xi, rng));
    }
    let sample_time_s = t.elapsed().as_secs_f64();
    let problem = BdroProblem::new(config.epsilon, blocks, *loss)?;
    let mut sol = solve_bdro_problem(&problem, set, solve_config)?;
    sol.sample_time_s = sample_time_s;
    Ok(sol)
}

/// −μ̄ᵀx + √(2ε) (1/K) Σ_k √(xᵀΣ_k x) for the linear portfolio loss.
#[derive(Debug, Clone)]
pub struct GaussianLinearBdro {
    pub mu_bar: DVector<f64>,
    pub covariances: Vec<DMatrix<f64>>,
    pub epsilon: f64,
}

impl GaussianLinearBdro {
    pub fn new(mu_bar: DVector<f64>, covariances: Vec<DMatrix<f64>>, epsilon: f64) -> Result<Self> {
        if epsilon < 0.0 {
            return Err(DroError::Unbounded { eps_eff: epsilon });
        }
        if covariances.is_empty() {
            return Err(DroError::Input("need at least one covariance draw".into()));
        }
        let d = mu_bar.len();
        if covariances.iter().any(|c| c.nrows() != d || c.ncols() != d) {
            return Err(DroError::DimensionMismatch {
                expected: d,
                got: covariances[0].nrows(),
            });
        }
        Ok(Self {
            mu_bar,
            covariances,
            epsilon,
        })
    }

    /// Replace every draw by their average.
    pub fn with_averaged_covariance(&self) -> Self {
        let d = self.mu_bar.len();
        let mut avg = DMatrix::zeros(d, d);
        for c in &self.covariances {
            avg += c;
        }
        avg /= self.covariances.len() as f64;
        Self {
            mu_bar: self.mu_bar.clone(),
            covariances: vec![avg],
            epsilon: self.epsilon,
        }
    }

    pub fn objective(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let c = (2.0 * self.epsilon).sqrt();
        let k = self.covariances.len() as f64;
        let xv = DVector::from_column_slice(x);
        let mut value = -self.mu_bar.dot(&xv);
        let mut grad: Vec<f64> = self.mu_bar.iter().map(|m| -m).collect();
        for s in &self.covariances {
            let sx = s * &xv;
            let root = xv.dot(&sx).max(0.0).sqrt();
            value += c * root / k;
            if root > 0.0 {
                for (g, v) in grad.iter_mut().zip(sx.iter()) {
                    *g += c * v / (root * k);
                }
            }
        }
        (value, grad)
    }
}

pub fn solve_bdro_gaussian_linear<R: Rng + ?Sized>(
    posterior: &NiwParams,
    set: &FeasibleSet,
    epsilon: f64,
    m_theta: usize,
    solve_config: &SolveConfig,
    rng: &mut R,
) -> Result<DualSolution> {
    posterior.validate()?;
    if !matches!(set, FeasibleSet::Simplex { .. }) || set.dim() != posterior.dim() {
        return Err(DroError::Domain(
            "Gaussian/linear BDRO needs a simplex of the posterior's dimension".into(),
        ));
    }
    if m_theta == 0 {
        return Err(DroError::Config("m_theta must be >= 1".into()));
    }
    let t = Instant::now();
    let covariances: Vec<DMatrix<f64>> = (0..m_theta)
        .map(|_| sample_inverse_wishart(&posterior.psi, posterior.iota, rng))
        .collect();
    let sample_time_s = t.elapsed().as_secs_f64();
    let problem = GaussianLinearBdro::new(posterior.mu.clone(), covariances, epsilon)?;
    solve_gaussian_linear_bdro_problem(&problem, set, solve_config).map(|mut s| {
        s.sample_time_s = sample_time_s;
        s
    })
}

pub fn solve_gaussian_linear_bdro_problem(
    problem: &GaussianLinearBdro,
    set: &FeasibleSet,
    solve_config: &SolveConfig,
) -> Result<DualSolution> {
    let start = Instant::now();
    let (x, value, iterations, converged, res) =
        projected_gradient(set, solve_config, |x| problem.objective(x))?;
    let gamma_star = if problem.epsilon > 0.0 {
        let k = problem.covariances.len() as f64;
        problem
            .covariances
            .iter()
            .map(|s| (linalg::quad_form(s, &x) / (2.0 * problem.epsilon)).sqrt())
            .sum::<f64>()
            / k
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

/// KL ball of radius ε around the empirical distribution of `data`.
pub fn solve_empirical_kl(
    data: &Samples,
    loss: &LossSpec,
    set: &FeasibleSet,
    epsilon: f64,
    solve_config: &SolveConfig,
) -> Result<DualSolution> {
    if epsilon < 0.0 {
        return Err(DroError::Unbounded { eps_eff: epsilon });
    }
    let problem = SaaDualProblem::new(epsilon, data.clone(), *loss)?;
    solve_saa(&problem, set, solve_config)
}

/// Order-1 Wasserstein DRO with Euclidean ground metric, in its Lipschitz form
/// (1/n) Σ f_x(ξ_i) + ε L(x). There is no dual multiplier, so γ* is NaN.
pub fn solve_wasserstein(
    data: &Samples,
    loss: &LossSpec,
    set: &FeasibleSet,
    epsilon: f64,
    solve_config: &SolveConfig,
) -> Result<DualSolution> {
    if !(epsilon >= 0.0) {
        return Err(DroError::Domain(format!("Wasserstein radius must be >= 0; got {epsilon}")));
    }
    if data.is_empty() {
        return Err(DroError::Input("Wasserstein DRO needs at least one observation".into()));
    }
    loss.validate()?;
    if data.dim() != set.dim() {
        return Err(DroError::DimensionMismatch {
            expected: set.dim(),
            got: data.dim(),
        });
    }
    let start = Instant::now();
    let n = data.len() as f64;
    let out = minimize(set, solve_config, |x| {
        let mut value = 0.0;
        let mut grad = vec![0.0; x.len()];
        for xi in data.rows() {
            value += loss.eval(x, xi);
            loss.add_subgradient(x, xi, 1.0 / n, &mut grad);
        }
        value = value / n + epsilon * loss.lipschitz(x);
        if let LossSpec::LinearPortfolio = loss {
            let norm = linalg::norm2(x);
            if norm > 0.0 {
                for (g, v) in grad.iter_mut().zip(x) {
                    *g += epsilon * v / norm;
                }
            }
        }
        Ok(Evaluation {
            value,
            grad,
            gamma: f64::NAN,
        })
    })?;
    Ok(DualSolution {
        x_star: out.x,
        gamma_star: f64::NAN,
        objective: out.eval.value,
        iterations: out.iterations,
        converged: out.converged,
        solve_time_s: start.elapsed().as_secs_f64(),
        sample_time_s: 0.0,
        kkt_residual: None,
    })
}
