//! Conjugate exponential-family models.
//!
//! Three likelihood/prior pairs are supported:
//!
//! | likelihood             | posterior             | predictive             |
//! |------------------------|-----------------------|------------------------|
//! | Normal(μ, λ⁻¹)         | Normal-Gamma          | Student-t              |
//! | Exponential(λ)         | Gamma                 | Lomax                  |
//! | Normal(μ, Σ)           | Normal-inverse-Wishart| multivariate Student-t |
//!
//! Hyperparameters are stored in their standard parametrisation. The natural
//! pair (τ, ν) of the conjugate form `exp(τᵀη − ν A(η)) / Z(τ, ν)` is implied:
//!
//! * Normal-Gamma: τ = (κμ, κμ² + 2β), ν = κ.
//! * Gamma: τ = β, ν = α − 1.
//! * NIW: τ = (κμ, κμμᵀ + Ψ), ν = κ = ι + D + 2.
//!
//! Only derivatives of log Z appear at runtime, through the closed forms for
//! the posterior-mean natural parameter η̂ and the gap
//! `G = E_Π[A(η)] − A(η̂) ≥ 0`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::linalg::{self, serde_mat};
use crate::samples::Samples;
use crate::special::{digamma, ln_gamma, multi_digamma};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    NormalGamma,
    GammaExponential,
    NormalInverseWishart,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::NormalGamma => "NormalGamma",
            Family::GammaExponential => "GammaExponential",
            Family::NormalInverseWishart => "NormalInverseWishart",
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(DroError::Domain(format!("{name} must be finite and > 0; got {v}")))
    }
}

/// Normal-Gamma hyperparameters: μ | λ ~ N(mu, 1/(kappa λ)), λ ~ Gamma(alpha, rate beta).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalGammaParams {
    pub mu: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl NormalGammaParams {
    pub fn new(mu: f64, kappa: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = Self {
            mu,
            kappa,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(DroError::Domain(format!("mu must be finite; got {}", self.mu)));
        }
        positive("kappa", self.kappa)?;
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)
    }
}

/// Gamma hyperparameters (shape, rate) for an exponential rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl GammaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = Self { alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)
    }
}

/// Normal-inverse-Wishart hyperparameters: Σ ~ IW(psi, iota), μ | Σ ~ N(mu, Σ/kappa).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiwParams {
    #[serde(with = "serde_mat::vector")]
    pub mu: DVector<f64>,
    pub kappa: f64,
    pub iota: f64,
    #[serde(with = "serde_mat::matrix")]
    pub psi: DMatrix<f64>,
}

impl NiwParams {
    pub fn new(mu: DVector<f64>, kappa: f64, iota: f64, psi: DMatrix<f64>) -> Result<Self> {
        let p = Self {
            mu,
            kappa,
            iota,
            psi,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters in the exponential-family form, where ι = κ − D − 2.
    pub fn tied(mu: DVector<f64>, kappa: f64, psi: DMatrix<f64>) -> Result<Self> {
        let d = mu.len() as f64;
        Self::new(mu, kappa, kappa - d - 2.0, psi)
    }

    /// Weak default prior: μ₀ = 0, ι₀ = D + 1, κ₀ = ι₀ + D + 2, Ψ₀ = I.
    pub fn default_prior(dim: usize) -> Self {
        let iota = dim as f64 + 1.0;
        Self {
            mu: DVector::zeros(dim),
            kappa: iota + dim as f64 + 2.0,
            iota,
            psi: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(DroError::Domain("NIW dimension must be at least 1".into()));
        }
        if self.mu.iter().any(|v| !v.is_finite()) {
            return Err(DroError::Domain("NIW mu has non-finite entries".into()));
        }
        if self.psi.nrows() != d || self.psi.ncols() != d {
            return Err(DroError::DimensionMismatch {
                expected: d,
                got: self.psi.nrows(),
            });
        }
        positive("kappa", self.kappa)?;
        // ψ_D(ι/2) needs ι/2 > (D − 1)/2.
        if !(self.iota.is_finite() && self.iota > d as f64 - 1.0 && self.iota > 0.0) {
            return Err(DroError::DegeneratePosterior(format!(
                "NIW degrees of freedom iota = {} must exceed D - 1 = {}",
                self.iota,
                d as f64 - 1.0
            )));
        }
        linalg::cholesky(&self.psi, "NIW psi")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params")]
pub enum PosteriorParams {
    NormalGamma(NormalGammaParams),
    GammaExponential(GammaParams),
    NormalInverseWishart(NiwParams),
}

/// Prior or posterior beliefs for one conjugate family, with the number of
/// observations absorbed so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PosteriorRepr", into = "PosteriorRepr")]
pub struct ConjugatePosterior {
    pub params: PosteriorParams,
    pub n_obs: usize,
}

#[derive(Serialize, Deserialize)]
struct PosteriorRepr {
    #[serde(flatten)]
    params: PosteriorParams,
    #[serde(default)]
    n_obs: usize,
}

impl TryFrom<PosteriorRepr> for ConjugatePosterior {
    type Error = DroError;

    fn try_from(r: PosteriorRepr) -> Result<Self> {
        let p = ConjugatePosterior {
            params: r.params,
            n_obs: r.n_obs,
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<ConjugatePosterior> for PosteriorRepr {
    fn from(p: ConjugatePosterior) -> Self {
        PosteriorRepr {
            params: p.params,
            n_obs: p.n_obs,
        }
    }
}

/// Parameters of a likelihood member in standard form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StandardParams {
    Normal {
        mean: f64,
        precision: f64,
    },
    Exponential {
        rate: f64,
    },
    MvNormal {
        #[serde(with = "serde_mat::vector")]
        mean: DVector<f64>,
        #[serde(with = "serde_mat::matrix")]
        cov: DMatrix<f64>,
    },
}

impl StandardParams {
    pub fn family(&self) -> Family {
        match self {
            StandardParams::Normal { .. } => Family::NormalGamma,
            StandardParams::Exponential { .. } => Family::GammaExponential,
            StandardParams::MvNormal { .. } => Family::NormalInverseWishart,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            StandardParams::MvNormal { mean, .. } => mean.len(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StandardParams::Normal { mean, precision } => {
                if !mean.is_finite() {
                    return Err(DroError::Domain("normal mean must be finite".into()));
                }
                positive("precision", *precision)
            }
            StandardParams::Exponential { rate } => positive("rate", *rate),
            StandardParams::MvNormal { mean, cov } => {
                if cov.nrows() != mean.len() {
                    return Err(DroError::DimensionMismatch {
                        expected: mean.len(),
                        got: cov.nrows(),
                    });
                }
                linalg::cholesky(cov, "covariance").map(|_| ())
            }
        }
    }

    /// Log-partition function A(η) evaluated at these parameters, dropping
    /// η-independent constants.
    pub fn log_partition(&self) -> f64 {
        match self {
            StandardParams::Normal { mean, precision } => {
                0.5 * precision * mean * mean - 0.5 * precision.ln()
            }
            StandardParams::Exponential { rate } => -rate.ln(),
            StandardParams::MvNormal { mean, cov } => {
                let chol = linalg::cholesky(cov, "covariance").expect("validated covariance");
                let sol = chol.solve(mean);
                0.5 * linalg::log_det(&chol) + 0.5 * mean.dot(&sol)
            }
        }
    }

    /// Maximum-likelihood parameters from data.
    pub fn mle(family: Family, data: &Samples) -> Result<Self> {
        let n = data.len();
        if n == 0 {
            return Err(DroError::Input("MLE needs at least one observation".into()));
        }
        match family {
            Family::NormalGamma => {
                check_dim(data, 1)?;
                let mean = data.as_slice().iter().sum::<f64>() / n as f64;
                let var = data.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                if var <= 0.0 {
                    return Err(DroError::Domain("MLE variance is zero".into()));
                }
                Ok(StandardParams::Normal {
                    mean,
                    precision: 1.0 / var,
                })
            }
            Family::GammaExponential => {
                check_dim(data, 1)?;
                let mean = data.as_slice().iter().sum::<f64>() / n as f64;
                positive("sample mean", mean)?;
                Ok(StandardParams::Exponential { rate: 1.0 / mean })
            }
            Family::NormalInverseWishart => {
                let d = data.dim();
                let mean = DVector::from_vec(data.column_mean());
                let mut cov = DMatrix::zeros(d, d);
                for row in data.rows() {
                    let c = DVector::from_row_slice(row) - &mean;
                    cov += &c * c.transpose();
                }
                cov /= n as f64;
                let p = StandardParams::MvNormal { mean, cov };
                p.validate()?;
                Ok(p)
            }
        }
    }
}

/// KL divergence d_KL(p ∥ q) between two members of the same family.
pub fn kl_divergence(p: &StandardParams, q: &StandardParams) -> Result<f64> {
    match (p, q) {
        (
            StandardParams::Normal {
                mean: m1,
                precision: l1,
            },
            StandardParams::Normal {
                mean: m2,
                precision: l2,
            },
        ) => Ok(0.5 * ((l1 / l2).ln() + l2 / l1 + l2 * (m1 - m2).powi(2) - 1.0)),
        (StandardParams::Exponential { rate: r1 }, StandardParams::Exponential { rate: r2 }) => {
            Ok(r1.ln() - r2.ln() + r2 / r1 - 1.0)
        }
        (
            StandardParams::MvNormal { mean: m1, cov: s1 },
            StandardParams::MvNormal { mean: m2, cov: s2 },
        ) => {
            if m1.len() != m2.len() {
                return Err(DroError::DimensionMismatch {
                    expected: m2.len(),
                    got: m1.len(),
                });
            }
            let d = m1.len() as f64;
            let c1 = linalg::cholesky(s1, "covariance")?;
            let c2 = linalg::cholesky(s2, "covariance")?;
            let trace = c2.solve(s1).trace();
            let diff = m2 - m1;
            let maha = diff.dot(&c2.solve(&diff));
            Ok(0.5 * (trace + maha - d + linalg::log_det(&c2) - linalg::log_det(&c1)))
        }
        _ => Err(DroError::Domain(format!(
            "KL between different families ({} vs {})",
            p.family().name(),
            q.family().name()
        ))),
    }
}

fn check_dim(data: &Samples, dim: usize) -> Result<()> {
    if data.dim() != dim {
        return Err(DroError::DimensionMismatch {
            expected: dim,
            got: data.dim(),
        });
    }
    Ok(())
}

impl ConjugatePosterior {
    pub fn new(params: PosteriorParams) -> Result<Self> {
        let p = Self { params, n_obs: 0 };
        p.validate()?;
        Ok(p)
    }

    pub fn normal_gamma(mu: f64, kappa: f64, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(PosteriorParams::NormalGamma(NormalGammaParams::new(
            mu, kappa, alpha, beta,
        )?))
    }

    pub fn gamma_exponential(alpha: f64, beta: f64) -> Result<Self> {
        Self::new(PosteriorParams::GammaExponential(GammaParams::new(alpha, beta)?))
    }

    pub fn normal_inverse_wishart(params: NiwParams) -> Result<Self> {
        Self::new(PosteriorParams::NormalInverseWishart(params))
    }

    /// Default weak prior for a family: Normal-Gamma (0, 1, 1, 1), Gamma (1, 1),
    /// NIW as in [`NiwParams::default_prior`].
    pub fn default_prior(family: Family, dim: usize) -> Self {
        let params = match family {
            Family::NormalGamma => PosteriorParams::NormalGamma(NormalGammaParams {
                mu: 0.0,
                kappa: 1.0,
                alpha: 1.0,
                beta: 1.0,
            }),
            Family::GammaExponential => {
                PosteriorParams::GammaExponential(GammaParams { alpha: 1.0, beta: 1.0 })
            }
            Family::NormalInverseWishart => {
                PosteriorParams::NormalInverseWishart(NiwParams::default_prior(dim))
            }
        };
        Self { params, n_obs: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.params {
            PosteriorParams::NormalGamma(p) => p.validate(),
            PosteriorParams::GammaExponential(p) => p.validate(),
            PosteriorParams::NormalInverseWishart(p) => p.validate(),
        }
    }

    pub fn family(&self) -> Family {
        match self.params {
            PosteriorParams::NormalGamma(_) => Family::NormalGamma,
            PosteriorParams::GammaExponential(_) => Family::GammaExponential,
            PosteriorParams::NormalInverseWishart(_) => Family::NormalInverseWishart,
        }
    }

    /// Dimension of an observation ξ.
    pub fn dim(&self) -> usize {
        match &self.params {
            PosteriorParams::NormalInverseWishart(p) => p.dim(),
            _ => 1,
        }
    }

    /// Absorb a batch of observations (one per row) by conjugacy.
    pub fn update(&self, data: &Samples) -> Result<Self> {
        check_dim(data, self.dim())?;
        for (i, row) in data.rows().enumerate() {
            if let Some(&v) = row.iter().find(|v| !v.is_finite()) {
                return Err(DroError::OutOfSupport {
                    index: i,
                    family: self.family().name(),
                    value: v,
                });
            }
        }
        let n = data.len();
        if n == 0 {
            return Ok(self.clone());
        }
        let nf = n as f64;
        let params = match &self.params {
            PosteriorParams::NormalGamma(p) => {
                let xs = data.as_slice();
                let mean = xs.iter().sum::<f64>() / nf;
                let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
                let kappa = p.kappa + nf;
                PosteriorParams::NormalGamma(NormalGammaParams {
                    mu: (p.kappa * p.mu + nf * mean) / kappa,
                    kappa,
                    alpha: p.alpha + 0.5 * nf,
                    beta: p.beta + 0.5 * ss + p.kappa * nf * (mean - p.mu).powi(2) / (2.0 * kappa),
                })
            }
            PosteriorParams::GammaExponential(p) => {
                let xs = data.as_slice();
                if let Some((i, &v)) = xs.iter().enumerate().find(|(_, &v)| v <= 0.0) {
                    return Err(DroError::OutOfSupport {
                        index: i,
                        family: self.family().name(),
                        value: v,
                    });
                }
                PosteriorParams::GammaExponential(GammaParams {
                    alpha: p.alpha + nf,
                    beta: p.beta + xs.iter().sum::<f64>(),
                })
            }
            PosteriorParams::NormalInverseWishart(p) => {
                let d = p.dim();
                let mean = DVector::from_vec(data.column_mean());
                let mut scatter = DMatrix::zeros(d, d);
                for row in data.rows() {
                    let c = DVector::from_row_slice(row) - &mean;
                    scatter += &c * c.transpose();
                }
                let kappa = p.kappa + nf;
                let shift = &mean - &p.mu;
                let mut psi = &p.psi + scatter + (p.kappa * nf / kappa) * &shift * shift.transpose();
                linalg::symmetrize(&mut psi);
                PosteriorParams::NormalInverseWishart(NiwParams {
                    mu: (p.kappa * &p.mu + nf * mean) / kappa,
                    kappa,
                    iota: p.iota + nf,
                    psi,
                })
            }
        };
        let out = Self {
            params,
            n_obs: self.n_obs + n,
        };
        out.validate()?;
        Ok(out)
    }

    /// Likelihood at the posterior-mean natural parameter η̂.
    pub fn nominal(&self) -> Result<NominalModel> {
        let params = match &self.params {
            PosteriorParams::NormalGamma(p) => StandardParams::Normal {
                mean: p.mu,
                precision: p.alpha / p.beta,
            },
            PosteriorParams::GammaExponential(p) => StandardParams::Exponential {
                rate: p.alpha / p.beta,
            },
            PosteriorParams::NormalInverseWishart(p) => {
                if p.iota <= 0.0 {
                    return Err(DroError::DegeneratePosterior(
                        "NIW degrees of freedom must be positive".into(),
                    ));
                }
                StandardParams::MvNormal {
                    mean: p.mu.clone(),
                    cov: &p.psi / p.iota,
                }
            }
        };
        NominalModel::new(params)
    }

    /// Gap G = E_Π[A(η)] − A(η̂) ≥ 0.
    pub fn gap(&self) -> Result<f64> {
        self.validate()?;
        let g = match &self.params {
            PosteriorParams::NormalGamma(p) => {
                0.5 * (p.alpha.ln() - digamma(p.alpha) + 1.0 / p.kappa)
            }
            PosteriorParams::GammaExponential(p) => p.alpha.ln() - digamma(p.alpha),
            PosteriorParams::NormalInverseWishart(p) => {
                let d = p.dim() as f64;
                -0.5 * d * 2f64.ln() - 0.5 * multi_digamma(0.5 * p.iota, p.dim())
                    + d / (2.0 * p.kappa)
                    + 0.5 * d * p.iota.ln()
            }
        };
        // Rounding can push the exact-zero limit a hair negative.
        Ok(g.max(0.0))
    }

    /// Smallest radius for which the posterior-expectation ambiguity set is non-empty.
    pub fn eps_min(&self) -> Result<f64> {
        self.gap()
    }

    /// Expected KL from the true law to the model under the posterior:
    /// d_KL(P* ∥ P_η̂) + G.
    pub fn eps_star_pe(&self, truth: &StandardParams) -> Result<f64> {
        truth.validate()?;
        if truth.family() != self.family() {
            return Err(DroError::Domain(format!(
                "true parameters are {} but the posterior is {}",
                truth.family().name(),
                self.family().name()
            )));
        }
        if truth.dim() != self.dim() {
            return Err(DroError::DimensionMismatch {
                expected: self.dim(),
                got: truth.dim(),
            });
        }
        let nominal = self.nominal()?;
        Ok(kl_divergence(truth, &nominal.params)? + self.gap()?)
    }

    /// Upper bound on d_KL(P* ∥ P_n) for the predictive ball (Jensen).
    pub fn eps_star_pp_upper(&self, truth: &StandardParams) -> Result<f64> {
        self.eps_star_pe(truth)
    }

    /// Heuristic plug-in of [`Self::eps_star_pe`] using maximum-likelihood
    /// parameters of `data` in place of the unknown truth.
    pub fn eps_star_pe_plugin(&self, data: &Samples) -> Result<f64> {
        let mle = StandardParams::mle(self.family(), data)?;
        self.eps_star_pe(&mle)
    }

    /// Posterior predictive distribution.
    pub fn predictive(&self) -> Result<PredictiveModel> {
        let model = match &self.params {
            PosteriorParams::NormalGamma(p) => PredictiveModel::StudentT {
                dof: 2.0 * p.alpha,
                loc: p.mu,
                scale2: p.beta * (p.kappa + 1.0) / (p.alpha * p.kappa),
            },
            PosteriorParams::GammaExponential(p) => PredictiveModel::Lomax {
                alpha: p.alpha,
                beta: p.beta,
            },
            PosteriorParams::NormalInverseWishart(p) => {
                let d = p.dim() as f64;
                let dof = p.iota - d + 1.0;
                if dof <= 0.0 {
                    return Err(DroError::DegeneratePosterior(format!(
                        "predictive degrees of freedom {dof} must be positive"
                    )));
                }
                PredictiveModel::MvStudentT {
                    dof,
                    loc: p.mu.clone(),
                    shape: &p.psi * ((p.kappa + 1.0) / (p.kappa * dof)),
                }
            }
        };
        model.validate()?;
        Ok(model)
    }

    /// One draw of likelihood parameters θ ~ Π.
    pub fn sample_parameters<R: Rng + ?Sized>(&self, rng: &mut R) -> StandardParams {
        match &self.params {
            PosteriorParams::NormalGamma(p) => {
                let precision = sample_gamma(p.alpha, p.beta, rng);
                let z: f64 = rng.sample(StandardNormal);
                StandardParams::Normal {
                    mean: p.mu + z / (p.kappa * precision).sqrt(),
                    precision,
                }
            }
            PosteriorParams::GammaExponential(p) => StandardParams::Exponential {
                rate: sample_gamma(p.alpha, p.beta, rng),
            },
            PosteriorParams::NormalInverseWishart(p) => {
                let cov = sample_inverse_wishart(&p.psi, p.iota, rng);
                let chol = linalg::cholesky(&(&cov / p.kappa), "sampled covariance")
                    .expect("inverse-Wishart draws are SPD");
                let z = DVector::from_fn(p.dim(), |_, _| rng.sample(StandardNormal));
                StandardParams::MvNormal {
                    mean: &p.mu + chol.l() * z,
                    cov,
                }
            }
        }
    }
}

/// Gamma(shape, rate) draw.
fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("validated gamma parameters")
        .sample(rng)
}

/// Draw Σ ~ IW(psi, dof) through the Bartlett decomposition of the Wishart
/// W = Σ⁻¹ ~ W(psi⁻¹, dof).
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    psi: &DMatrix<f64>,
    dof: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let d = psi.nrows();
    let psi_inv = linalg::cholesky(psi, "psi")
        .expect("validated scale matrix")
        .inverse();
    let l = linalg::cholesky(&psi_inv, "psi inverse")
        .expect("inverse of SPD is SPD")
        .l();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(dof - i as f64).expect("dof > D - 1");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    // W = (L A)(L A)ᵀ, so Σ = W⁻¹ = (L A)⁻ᵀ (L A)⁻¹.
    let la = l * a;
    let inv = la
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .expect("Bartlett factor has a positive diagonal");
    let mut sigma = inv.transpose() * inv;
    linalg::symmetrize(&mut sigma);
    sigma
}

/// Sampling and density evaluation shared by nominal and predictive laws.
pub trait SamplingModel {
    fn dim(&self) -> usize;

    /// `count × dim` i.i.d. draws.
    fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Samples;

    /// Log density at ξ; −∞ outside the support.
    fn log_density(&self, xi: &[f64]) -> f64;

    /// Support bounds for univariate laws.
    fn support(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
}

/// The likelihood evaluated at the posterior-mean natural parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalModel {
    pub params: StandardParams,
}

impl NominalModel {
    pub fn new(params: StandardParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn family(&self) -> Family {
        self.params.family()
    }
}

impl SamplingModel for NominalModel {
    fn dim(&self) -> usize {
        self.params.dim()
    }

    fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Samples {
        match &self.params {
            StandardParams::Normal { mean, precision } => {
                let sd = 1.0 / precision.sqrt();
                let v: Vec<f64> = (0..count)
                    .map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Samples::from_scalars(&v)
            }
            StandardParams::Exponential { rate } => {
                let v: Vec<f64> = (0..count)
                    .map(|_| -(1.0 - rng.random::<f64>()).ln() / rate)
                    .collect();
                Samples::from_scalars(&v)
            }
            StandardParams::MvNormal { mean, cov } => {
                let l = linalg::cholesky(cov, "covariance").expect("validated").l();
                let d = mean.len();
                let mut out = Samples::with_capacity(d, count);
                for _ in 0..count {
                    let z = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
                    let x = mean + &l * z;
                    out.push(x.as_slice());
                }
                out
            }
        }
    }

    fn log_density(&self, xi: &[f64]) -> f64 {
        match &self.params {
            StandardParams::Normal { mean, precision } => {
                0.5 * precision.ln() - 0.5 * LN_2PI - 0.5 * precision * (xi[0] - mean).powi(2)
            }
            StandardParams::Exponential { rate } => {
                if xi[0] < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    rate.ln() - rate * xi[0]
                }
            }
            StandardParams::MvNormal { mean, cov } => {
                let chol = linalg::cholesky(cov, "covariance").expect("validated");
                let diff = DVector::from_row_slice(xi) - mean;
                let maha = diff.dot(&chol.solve(&diff));
                -0.5 * mean.len() as f64 * LN_2PI - 0.5 * linalg::log_det(&chol) - 0.5 * maha
            }
        }
    }

    fn support(&self) -> (f64, f64) {
        match self.params {
            StandardParams::Exponential { .. } => (0.0, f64::INFINITY),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

/// Posterior predictive laws of the three families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictiveModel {
    /// Student-t with `scale2` the squared scale.
    StudentT { dof: f64, loc: f64, scale2: f64 },
    /// Pareto type II with shape `alpha` and scale `beta`.
    Lomax { alpha: f64, beta: f64 },
    MvStudentT {
        dof: f64,
        #[serde(with = "serde_mat::vector")]
        loc: DVector<f64>,
        #[serde(with = "serde_mat::matrix")]
        shape: DMatrix<f64>,
    },
}

impl PredictiveModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            PredictiveModel::StudentT { dof, loc, scale2 } => {
                positive("dof", *dof)?;
                positive("scale2", *scale2)?;
                if !loc.is_finite() {
                    return Err(DroError::Domain("loc must be finite".into()));
                }
                Ok(())
            }
            PredictiveModel::Lomax { alpha, beta } => {
                positive("alpha", *alpha)?;
                positive("beta", *beta)
            }
            PredictiveModel::MvStudentT { dof, loc, shape } => {
                positive("dof", *dof)?;
                if shape.nrows() != loc.len() {
                    return Err(DroError::DimensionMismatch {
                        expected: loc.len(),
                        got: shape.nrows(),
                    });
                }
                linalg::cholesky(shape, "shape matrix").map(|_| ())
            }
        }
    }
}

impl SamplingModel for PredictiveModel {
    fn dim(&self) -> usize {
        match self {
            PredictiveModel::MvStudentT { loc, .. } => loc.len(),
            _ => 1,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Samples {
        match self {
            PredictiveModel::StudentT { dof, loc, scale2 } => {
                let chi = ChiSquared::new(*dof).expect("validated dof");
                let scale = scale2.sqrt();
                let v: Vec<f64> = (0..count)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        let w = chi.sample(rng) / dof;
                        loc + scale * z / w.sqrt()
                    })
                    .collect();
                Samples::from_scalars(&v)
            }
            PredictiveModel::Lomax { alpha, beta } => {
                let v: Vec<f64> = (0..count)
                    .map(|_| {
                        let u = 1.0 - rng.random::<f64>();
                        beta * (u.powf(-1.0 / alpha) - 1.0)
                    })
                    .collect();
                Samples::from_scalars(&v)
            }
            PredictiveModel::MvStudentT { dof, loc, shape } => {
                let chi = ChiSquared::new(*dof).expect("validated dof");
                let l = linalg::cholesky(shape, "shape").expect("validated").l();
                let d = loc.len();
                let mut out = Samples::with_capacity(d, count);
                for _ in 0..count {
                    let z = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
                    let w = (chi.sample(rng) / dof).sqrt();
                    let x = loc + (&l * z) / w;
                    out.push(x.as_slice());
                }
                out
            }
        }
    }

    fn log_density(&self, xi: &[f64]) -> f64 {
        match self {
            PredictiveModel::StudentT { dof, loc, scale2 } => {
                let z2 = (xi[0] - loc).powi(2) / scale2;
                ln_gamma(0.5 * (dof + 1.0)) - ln_gamma(0.5 * dof) - 0.5 * (dof * PI * scale2).ln()
                    - 0.5 * (dof + 1.0) * (z2 / dof).ln_1p()
            }
            PredictiveModel::Lomax { alpha, beta } => {
                if xi[0] < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    alpha.ln() - beta.ln() - (alpha + 1.0) * (xi[0] / beta).ln_1p()
                }
            }
            PredictiveModel::MvStudentT { dof, loc, shape } => {
                let d = loc.len() as f64;
                let chol = linalg::cholesky(shape, "shape").expect("validated");
                let diff = DVector::from_row_slice(xi) - loc;
                let maha = diff.dot(&chol.solve(&diff));
                ln_gamma(0.5 * (dof + d)) - ln_gamma(0.5 * dof) - 0.5 * d * (dof * PI).ln()
                    - 0.5 * linalg::log_det(&chol)
                    - 0.5 * (dof + d) * (maha / dof).ln_1p()
            }
        }
    }

    fn support(&self) -> (f64, f64) {
        match self {
            PredictiveModel::Lomax { .. } => (0.0, f64::INFINITY),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}
