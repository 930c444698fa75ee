//! The KL dual `inf_{γ ≥ 0} γε + γ ln E[e^{f/γ}]` and friends.
//!
//! Everything here is a pure function of its inputs. The sample-average
//! problem works on loss values `f_i = f_x(ξ_i)`; the one-dimensional
//! quadrature path ([`Tilted1d`]) works on an exact nominal density and is
//! used for worst-case densities and as an oracle.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::linalg;
use crate::quad::{integrate_pieces, QuadOptions};
use crate::samples::Samples;

/// Below this γ the perspective of log-sum-exp is replaced by its limit, the max.
pub const GAMMA_FLOOR: f64 = 1e-10;

const GAMMA_LO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    /// Σ_d h (x_d − ξ_d)⁺ + b (ξ_d − x_d)⁺.
    Newsvendor { h: f64, b: f64 },
    /// −ξᵀx.
    LinearPortfolio,
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if let LossSpec::Newsvendor { h, b } = *self {
            if !(h >= 0.0 && b >= 0.0 && h + b > 0.0 && h.is_finite() && b.is_finite()) {
                return Err(DroError::Domain(format!(
                    "newsvendor costs need h, b >= 0 and h + b > 0; got h = {h}, b = {b}"
                )));
            }
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64], xi: &[f64]) -> Result<f64> {
        check_len(x, xi)?;
        Ok(self.eval(x, xi))
    }

    pub fn subgradient(&self, x: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        check_len(x, xi)?;
        let mut g = vec![0.0; x.len()];
        self.add_subgradient(x, xi, 1.0, &mut g);
        Ok(g)
    }

    /// Lipschitz constant of ξ ↦ f_x(ξ) in the Euclidean norm.
    pub fn lipschitz(&self, x: &[f64]) -> f64 {
        match *self {
            LossSpec::Newsvendor { h, b } => h.max(b) * (x.len() as f64).sqrt(),
            LossSpec::LinearPortfolio => linalg::norm2(x),
        }
    }

    #[inline]
    pub(crate) fn eval(&self, x: &[f64], xi: &[f64]) -> f64 {
        match *self {
            LossSpec::Newsvendor { h, b } => x
                .iter()
                .zip(xi)
                .map(|(&x, &xi)| {
                    if x > xi {
                        h * (x - xi)
                    } else {
                        b * (xi - x)
                    }
                })
                .sum(),
            LossSpec::LinearPortfolio => -linalg::dot(x, xi),
        }
    }

    /// `g += weight · ∂_x f_x(ξ)`.
    #[inline]
    pub(crate) fn add_subgradient(&self, x: &[f64], xi: &[f64], weight: f64, g: &mut [f64]) {
        match *self {
            LossSpec::Newsvendor { h, b } => {
                for ((g, &x), &xi) in g.iter_mut().zip(x).zip(xi) {
                    if x > xi {
                        *g += weight * h;
                    } else if x < xi {
                        *g -= weight * b;
                    }
                }
            }
            LossSpec::LinearPortfolio => {
                for (g, &xi) in g.iter_mut().zip(xi) {
                    *g -= weight * xi;
                }
            }
        }
    }
}

fn check_len(x: &[f64], xi: &[f64]) -> Result<()> {
    if x.len() != xi.len() {
        return Err(DroError::DimensionMismatch {
            expected: x.len(),
            got: xi.len(),
        });
    }
    Ok(())
}

pub fn loss_value(loss: &LossSpec, x: &[f64], xi: &[f64]) -> Result<f64> {
    loss.value(x, xi)
}

pub fn loss_subgradient(loss: &LossSpec, x: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
    loss.subgradient(x, xi)
}

/// γ ln Σ_i exp(v_i / γ), shifted by the max. Returns `max v` exactly for γ ≤ 1e-10.
pub fn perspective_lse(gamma: f64, values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if gamma <= GAMMA_FLOOR {
        return m;
    }
    let s: f64 = values.iter().map(|v| ((v - m) / gamma).exp()).sum();
    m + gamma * s.ln()
}

/// Minimiser of the one-dimensional dual at a fixed decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerSolution {
    /// `f64::INFINITY` encodes the γ → ∞ boundary (zero effective radius).
    pub gamma_star: f64,
    pub value: f64,
    pub weights: Vec<f64>,
}

impl InnerSolution {
    pub fn is_unbounded_gamma(&self) -> bool {
        self.gamma_star.is_infinite()
    }
}

/// Shifted log-mean-exp and softmax statistics of `(f − m)/γ`.
struct LseStats {
    /// ln (1/M) Σ e^{(f_i − m)/γ}
    log_mean: f64,
    /// Σ w_i (f_i − m)
    tilted_shift: f64,
}

fn lse_stats(gamma: f64, f: &[f64], m: f64) -> LseStats {
    let mut s = 0.0;
    let mut sf = 0.0;
    for &v in f {
        let d = v - m;
        let e = (d / gamma).exp();
        s += e;
        sf += e * d;
    }
    LseStats {
        log_mean: (s / f.len() as f64).ln(),
        tilted_shift: sf / s,
    }
}

/// g′(γ) = ε + ln((1/M)Σe^{f_i/γ}) − (1/γ) Σ w_i f_i, written on shifted values.
fn dual_derivative(eps: f64, gamma: f64, f: &[f64], m: f64) -> f64 {
    let st = lse_stats(gamma, f, m);
    eps + st.log_mean - st.tilted_shift / gamma
}

/// g(γ) = γε + γ ln (1/M) Σ e^{f_i/γ} for γ ∈ (0, ∞); the γ = 0 value is max f.
pub fn dual_objective(eps: f64, gamma: f64, f: &[f64]) -> f64 {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if gamma <= GAMMA_FLOOR {
        return m;
    }
    if gamma.is_infinite() {
        return f.iter().sum::<f64>() / f.len() as f64 + if eps > 0.0 { f64::INFINITY } else { 0.0 };
    }
    gamma * eps + m + gamma * lse_stats(gamma, f, m).log_mean
}

/// Minimise g over γ ∈ [0, ∞] for loss values `f`.
pub fn solve_inner(eps_eff: f64, f: &[f64]) -> Result<InnerSolution> {
    if f.is_empty() {
        return Err(DroError::Input("inner problem needs at least one sample".into()));
    }
    if let Some(v) = f.iter().find(|v| !v.is_finite()) {
        return Err(DroError::Input(format!("non-finite loss value {v}")));
    }
    if eps_eff.is_nan() {
        return Err(DroError::Input("effective radius is NaN".into()));
    }
    if eps_eff < 0.0 {
        return Err(DroError::Unbounded { eps_eff });
    }
    let n = f.len();
    let (mut m, mut lo_f) = (f64::NEG_INFINITY, f64::INFINITY);
    for &v in f {
        m = m.max(v);
        lo_f = lo_f.min(v);
    }
    let ties = f.iter().filter(|&&v| v == m).count();

    // g′(0⁺) = ε + ln(C/M); if that is nonnegative, γ* = 0 and the value is the max.
    if eps_eff + (ties as f64 / n as f64).ln() >= 0.0 {
        let w = 1.0 / ties as f64;
        return Ok(InnerSolution {
            gamma_star: 0.0,
            value: m,
            weights: f.iter().map(|&v| if v == m { w } else { 0.0 }).collect(),
        });
    }
    if eps_eff <= 1e-12 * (1.0 + m.abs()) {
        return Ok(InnerSolution {
            gamma_star: f64::INFINITY,
            value: f.iter().sum::<f64>() / n as f64,
            weights: vec![1.0 / n as f64; n],
        });
    }

    let mut lo = GAMMA_LO;
    let mut hi = ((m - lo_f) / eps_eff.max(1e-8)).max(GAMMA_LO * 2.0);
    while dual_derivative(eps_eff, hi, f, m) <= 0.0 {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(DroError::Numerical("failed to bracket the dual minimiser".into()));
        }
    }
    while hi - lo > 1e-10 * (1.0 + hi) {
        let mid = 0.5 * (lo + hi);
        if dual_derivative(eps_eff, mid, f, m) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let gamma = 0.5 * (lo + hi);
    let mut weights: Vec<f64> = f.iter().map(|v| ((v - m) / gamma).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(InnerSolution {
        gamma_star: gamma,
        value: dual_objective(eps_eff, gamma, f),
        weights,
    })
}

/// Sample-average KL dual: nominal draws are fixed, the decision varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaaDualProblem {
    pub eps_eff: f64,
    pub samples: Samples,
    pub loss: LossSpec,
}

impl SaaDualProblem {
    pub fn new(eps_eff: f64, samples: Samples, loss: LossSpec) -> Result<Self> {
        if samples.is_empty() {
            return Err(DroError::Input("SAA problem needs M >= 1 samples".into()));
        }
        if !eps_eff.is_finite() {
            return Err(DroError::Input(format!("effective radius {eps_eff} is not finite")));
        }
        loss.validate()?;
        Ok(Self {
            eps_eff,
            samples,
            loss,
        })
    }

    pub fn dim(&self) -> usize {
        self.samples.dim()
    }

    pub fn losses(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(DroError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.samples.rows().map(|xi| self.loss.eval(x, xi)).collect())
    }
}

pub fn inner_gamma_opt(problem: &SaaDualProblem, x: &[f64]) -> Result<InnerSolution> {
    solve_inner(problem.eps_eff, &problem.losses(x)?)
}

/// Σ_i w_i ∂_x f_x(ξ_i) at the inner optimiser.
pub fn envelope_subgradient(problem: &SaaDualProblem, x: &[f64], inner: &InnerSolution) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for (xi, &w) in problem.samples.rows().zip(&inner.weights) {
        if w != 0.0 {
            problem.loss.add_subgradient(x, xi, w, &mut g);
        }
    }
    g
}

/// Worst-case risk of ξᵀx over a KL ball around N(μ̂, Σ̂):
/// μ̂ᵀx + √(2ε)·√(xᵀΣ̂x).
pub fn closed_form_gaussian_linear(
    mu_hat: &DVector<f64>,
    sigma_hat: &DMatrix<f64>,
    eps_eff: f64,
    x: &[f64],
) -> Result<f64> {
    if eps_eff < 0.0 {
        return Err(DroError::Unbounded { eps_eff });
    }
    if mu_hat.len() != x.len() || sigma_hat.nrows() != x.len() {
        return Err(DroError::DimensionMismatch {
            expected: mu_hat.len(),
            got: x.len(),
        });
    }
    let quad = linalg::quad_form(sigma_hat, x).max(0.0);
    Ok(linalg::dot(mu_hat.as_slice(), x) + (2.0 * eps_eff).sqrt() * quad.sqrt())
}

/// A one-dimensional nominal law and loss, for exact (quadrature) tilting.
///
/// `center` and `scale` locate the bulk of the nominal; `breaks` lists kinks
/// of the loss. The log-integrand ln p(ξ) + f(ξ)/γ is scanned geometrically
/// outwards from `center` to locate its peak and to detect tails that do not
/// decay, which signal an infinite moment generating function.
pub struct Tilted1d<'a> {
    pub logpdf: &'a dyn Fn(f64) -> f64,
    pub loss: &'a dyn Fn(f64) -> f64,
    pub support: (f64, f64),
    pub center: f64,
    pub scale: f64,
    pub breaks: Vec<f64>,
}

/// Tilted moments at a given γ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltMoments {
    /// ln E_p[e^{f/γ}]
    pub log_mgf: f64,
    /// E_{p*}[f] under the tilted law.
    pub tilted_mean: f64,
}

impl Tilted1d<'_> {
    fn log_integrand(&self, gamma: f64, x: f64) -> f64 {
        (self.logpdf)(x) + (self.loss)(x) / gamma
    }

    fn quad_opts() -> QuadOptions {
        QuadOptions {
            abs_tol: 1e-14,
            rel_tol: 1e-11,
            max_subdivisions: 20_000,
        }
    }

    /// Peak of the log-integrand and quadrature break points, or an
    /// infinite-normaliser error when a tail fails to decay.
    fn layout(&self, gamma: f64) -> Result<(f64, Vec<f64>)> {
        let (a, b) = self.support;
        let mut pts: Vec<f64> = Vec::new();
        let mut offsets: Vec<f64> = (0..=32).map(|k| k as f64 * 0.25).collect();
        offsets.extend((4..=60).map(|k| 2f64.powi(k)));
        for &o in &offsets {
            for s in [-1.0, 1.0] {
                let p = self.center + s * o * self.scale;
                if p >= a && p <= b {
                    pts.push(p);
                }
            }
        }
        pts.extend(self.breaks.iter().copied().filter(|&p| p >= a && p <= b));
        if a.is_finite() {
            pts.push(a);
        }
        if b.is_finite() {
            pts.push(b);
        }
        pts.sort_by(f64::total_cmp);
        pts.dedup();

        let vals: Vec<f64> = pts.iter().map(|&p| self.log_integrand(gamma, p)).collect();
        let (imax, &peak) = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_nan())
            .max_by(|x, y| x.1.total_cmp(y.1))
            .ok_or_else(|| DroError::Numerical("log-integrand is NaN everywhere".into()))?;
        if peak == f64::INFINITY {
            return Err(DroError::InfiniteNormalizer("log-integrand is +inf".into()));
        }
        // Integrability at an infinite end needs decay faster than 1/|ξ|.
        let n = pts.len();
        let tail_grows = |i: usize, j: usize| {
            let (ui, uj) = (vals[i], vals[j]);
            uj > f64::NEG_INFINITY && uj - ui > -(2f64.ln()) * 1.01
        };
        if b == f64::INFINITY && n >= 2 && tail_grows(n - 2, n - 1) {
            return Err(DroError::InfiniteNormalizer(format!(
                "upper tail of p(ξ) e^(f(ξ)/γ) does not decay at γ = {gamma}"
            )));
        }
        if a == f64::NEG_INFINITY && n >= 2 && tail_grows(1, 0) {
            return Err(DroError::InfiniteNormalizer(format!(
                "lower tail of p(ξ) e^(f(ξ)/γ) does not decay at γ = {gamma}"
            )));
        }

        // Refine the peak by golden-section search between its scan neighbours.
        let lo = pts[imax.saturating_sub(1)];
        let hi = pts[(imax + 1).min(n - 1)];
        let mode = golden_max(|x| self.log_integrand(gamma, x), lo, hi, pts[imax]);
        let mut breaks: Vec<f64> = self.breaks.clone();
        let width = self.scale;
        for k in [-8.0, -3.0, -1.0, 0.0, 1.0, 3.0, 8.0] {
            breaks.push(mode + k * width);
        }
        breaks.push(self.center);
        let peak = peak.max(self.log_integrand(gamma, mode));
        Ok((peak, breaks))
    }

    /// ln E[e^{f/γ}] and the tilted mean of f.
    pub fn moments(&self, gamma: f64) -> Result<TiltMoments> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(DroError::Domain(format!("tilting needs 0 < γ < ∞; got {gamma}")));
        }
        let (peak, breaks) = self.layout(gamma)?;
        let opts = Self::quad_opts();
        let (a, b) = self.support;
        let weight = |x: f64| {
            let v = (self.log_integrand(gamma, x) - peak).exp();
            if v.is_finite() {
                v
            } else {
                0.0
            }
        };
        let z = integrate_pieces(weight, a, b, &breaks, &opts);
        let zf = integrate_pieces(|x| weight(x) * (self.loss)(x), a, b, &breaks, &opts);
        if !z.converged || !zf.converged || !(z.value > 0.0) || !z.value.is_finite() {
            return Err(DroError::InfiniteNormalizer(format!(
                "tilted normaliser did not converge at γ = {gamma}"
            )));
        }
        Ok(TiltMoments {
            log_mgf: peak + z.value.ln(),
            tilted_mean: zf.value / z.value,
        })
    }

    /// Minimise γε + γ ln E[e^{f/γ}] over γ > 0 with quadrature expectations.
    ///
    /// Assumes f is unbounded above on the support, so that γ* > 0 whenever
    /// ε > 0. Values of γ where the tilt diverges count as lying left of the
    /// minimiser.
    pub fn exact_inner(&self, eps_eff: f64) -> Result<(f64, f64)> {
        if eps_eff < 0.0 {
            return Err(DroError::Unbounded { eps_eff });
        }
        if eps_eff == 0.0 {
            return Err(DroError::Domain("exact inner needs eps_eff > 0".into()));
        }
        let deriv = |g: f64| -> Result<Option<f64>> {
            match self.moments(g) {
                Ok(m) => Ok(Some(eps_eff + m.log_mgf - m.tilted_mean / g)),
                Err(DroError::InfiniteNormalizer(_)) => Ok(None),
                Err(e) => Err(e),
            }
        };
        let positive = |g: f64| -> Result<bool> { Ok(matches!(deriv(g)?, Some(d) if d > 0.0)) };
        let mut hi = self.scale.max(1e-8);
        let mut lo;
        if positive(hi)? {
            lo = hi / 2.0;
            while positive(lo)? {
                hi = lo;
                lo /= 2.0;
                if lo < 1e-12 {
                    return Err(DroError::Numerical("γ* below 1e-12".into()));
                }
            }
        } else {
            lo = hi;
            hi *= 2.0;
            while !positive(hi)? {
                lo = hi;
                hi *= 2.0;
                if hi > 1e30 {
                    return Err(DroError::Numerical("γ* above 1e30".into()));
                }
            }
        }
        while hi - lo > 1e-12 * hi {
            let mid = 0.5 * (lo + hi);
            if positive(mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let gamma = 0.5 * (lo + hi);
        let m = self.moments(gamma)?;
        Ok((gamma, gamma * eps_eff + gamma * m.log_mgf))
    }
}

fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, fallback: f64) -> f64 {
    if !(a < b) {
        return fallback;
    }
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-12 * (1.0 + a.abs() + b.abs()) {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    if f(x) >= f(fallback) {
        x
    } else {
        fallback
    }
}

/// Normalised worst-case density `p(ξ) e^{f(ξ)/γ*} / Z`.
pub struct WorstCaseDensity<'a> {
    pub model: &'a Tilted1d<'a>,
    pub gamma_star: f64,
    /// ln Z = ln ∫ p(ξ) e^{f(ξ)/γ*} dξ.
    pub log_normalizer: f64,
}

impl WorstCaseDensity<'_> {
    pub fn log_density(&self, x: f64) -> f64 {
        self.model.log_integrand(self.gamma_star, x) - self.log_normalizer
    }
}

pub fn worst_case_logdensity<'a>(model: &'a Tilted1d<'a>, gamma_star: f64) -> Result<WorstCaseDensity<'a>> {
    let m = model.moments(gamma_star)?;
    Ok(WorstCaseDensity {
        model,
        gamma_star,
        log_normalizer: m.log_mgf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn grid_min(eps: f64, f: &[f64], step: f64, upper: f64) -> f64 {
        let n = (upper / step) as usize;
        (1..=n)
            .map(|k| dual_objective(eps, k as f64 * step, f))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn loss_examples() {
        let nv = LossSpec::Newsvendor { h: 3.0, b: 8.0 };
        assert_eq!(nv.value(&[10.0], &[4.0]).unwrap(), 18.0);
        assert_eq!(nv.value(&[4.0], &[4.0]).unwrap(), 0.0);
        assert_eq!(nv.subgradient(&[10.0], &[4.0]).unwrap(), vec![3.0]);
        assert_eq!(nv.subgradient(&[4.0], &[4.0]).unwrap(), vec![0.0]);
        let lp = LossSpec::LinearPortfolio;
        assert!((lp.value(&[0.5, 0.5], &[0.02, -0.01]).unwrap() + 0.005).abs() < 1e-17);
        assert!(lp.value(&[1.0], &[1.0, 2.0]).is_err());
        assert!(LossSpec::Newsvendor { h: 0.0, b: 0.0 }.validate().is_err());
    }

    #[test]
    fn loss_subgradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nv = LossSpec::Newsvendor { h: 3.0, b: 8.0 };
        for _ in 0..200 {
            let d = rng.random_range(1..5);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..50.0)).collect();
            let xi: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..50.0)).collect();
            for loss in [nv, LossSpec::LinearPortfolio] {
                let g = loss.subgradient(&x, &xi).unwrap();
                let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let h = 1e-6;
                let plus: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
                let minus: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
                let fd = (loss.value(&plus, &xi).unwrap() - loss.value(&minus, &xi).unwrap()) / (2.0 * h);
                assert!((fd - linalg::dot(&g, &dir)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn perspective_lse_examples() {
        assert_eq!(perspective_lse(1e-12, &[1.0, 2.0, 3.0]), 3.0);
        assert!((perspective_lse(1.0, &[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perspective_lse_matches_compensated_naive_sum() {
        // Oracle: exact exponentials of small arguments summed with Kahan
        // compensation in a different order (no max shift).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gamma = 0.37;
        let mut terms: Vec<f64> = v.iter().map(|x| (x / gamma).exp()).collect();
        terms.sort_by(f64::total_cmp);
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for t in terms {
            let y = t - c;
            let u = s + y;
            c = (u - s) - y;
            s = u;
        }
        let naive = gamma * s.ln();
        let ours = perspective_lse(gamma, &v);
        assert!(((ours - naive) / naive).abs() < 1e-12, "{ours} vs {naive}");
    }

    #[test]
    fn inner_boundary_zero_gamma() {
        let s = solve_inner(1.0, &[1.0, 2.0]).unwrap();
        assert_eq!(s.gamma_star, 0.0);
        assert_eq!(s.value, 2.0);
        assert_eq!(s.weights, vec![0.0, 1.0]);
        // Oracle: grid over (0, 100] at 1e-3 never goes below.
        assert!(grid_min(1.0, &[1.0, 2.0], 1e-3, 100.0) >= 2.0 - 1e-12);
    }

    #[test]
    fn inner_zero_radius_is_mean() {
        let s = solve_inner(0.0, &[1.0, 2.0, 6.0]).unwrap();
        assert!(s.is_unbounded_gamma());
        assert_eq!(s.value, 3.0);
    }

    #[test]
    fn inner_interior_matches_fine_grid() {
        let f = [0.0, 1.0];
        let s = solve_inner(0.1, &f).unwrap();
        assert!(s.gamma_star > 0.0 && s.gamma_star.is_finite());
        // Grid at 1e-6 around γ* (γ ∈ (0, 100] but g is convex, so a window suffices).
        let lo = ((s.gamma_star - 0.01) / 1e-6).floor() as i64;
        let best = (lo..lo + 20_000)
            .map(|k| dual_objective(0.1, k as f64 * 1e-6, &f))
            .fold(f64::INFINITY, f64::min);
        assert!((s.value - best).abs() < 1e-8);
        assert!(s.value <= best + 1e-12);
    }

    #[test]
    fn inner_errors() {
        assert!(matches!(solve_inner(-0.1, &[1.0]), Err(DroError::Unbounded { .. })));
        assert!(matches!(solve_inner(0.1, &[f64::NAN]), Err(DroError::Input(_))));
        assert!(solve_inner(0.1, &[]).is_err());
    }

    #[test]
    fn inner_is_stable_with_large_losses() {
        let f: Vec<f64> = (0..40).map(|i| 1e4 + i as f64 * 0.01).collect();
        let s = solve_inner(0.05, &f).unwrap();
        assert!(s.value.is_finite());
        assert!(s.value >= 1e4 && s.value <= 1e4 + 0.4);
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn random_problem(rng: &mut ChaCha8Rng, m: usize) -> SaaDualProblem {
        let xs: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..40.0)).collect();
        SaaDualProblem::new(
            rng.random_range(0.01..0.5),
            Samples::from_scalars(&xs),
            LossSpec::Newsvendor { h: 3.0, b: 8.0 },
        )
        .unwrap()
    }

    #[test]
    fn envelope_single_sample_and_linear() {
        let p = SaaDualProblem::new(
            0.3,
            Samples::from_scalars(&[4.0]),
            LossSpec::Newsvendor { h: 3.0, b: 8.0 },
        )
        .unwrap();
        let inner = inner_gamma_opt(&p, &[10.0]).unwrap();
        assert_eq!(envelope_subgradient(&p, &[10.0], &inner), vec![3.0]);

        let samples = Samples::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.05], vec![0.0, 0.4]]).unwrap();
        let p = SaaDualProblem::new(0.2, samples.clone(), LossSpec::LinearPortfolio).unwrap();
        let x = [0.3, 0.7];
        let inner = inner_gamma_opt(&p, &x).unwrap();
        let g = envelope_subgradient(&p, &x, &inner);
        let mut expect = [0.0; 2];
        for (row, w) in samples.rows().zip(&inner.weights) {
            expect[0] -= w * row[0];
            expect[1] -= w * row[1];
        }
        assert!((g[0] - expect[0]).abs() < 1e-15 && (g[1] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn envelope_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 50 {
            let p = random_problem(&mut rng, 30);
            let x = rng.random_range(5.0..35.0);
            let inner = inner_gamma_opt(&p, &[x]).unwrap();
            if !(inner.gamma_star > 0.0 && inner.gamma_star.is_finite()) {
                continue;
            }
            let h = 1e-6;
            // Skip points within h of a kink.
            if p.samples.as_slice().iter().any(|s| (s - x).abs() < 10.0 * h) {
                continue;
            }
            let fp = inner_gamma_opt(&p, &[x + h]).unwrap().value;
            let fm = inner_gamma_opt(&p, &[x - h]).unwrap().value;
            let fd = (fp - fm) / (2.0 * h);
            let g = envelope_subgradient(&p, &[x], &inner)[0];
            assert!((fd - g).abs() < 1e-4, "fd {fd} vs {g}");
            checked += 1;
        }
    }

    #[test]
    fn closed_form_examples() {
        let mu = DVector::zeros(2);
        let sigma = DMatrix::identity(2, 2);
        assert!((closed_form_gaussian_linear(&mu, &sigma, 0.5, &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        let mu = DVector::from_vec(vec![0.2, -0.1]);
        assert_eq!(
            closed_form_gaussian_linear(&mu, &sigma, 0.0, &[0.5, 0.5]).unwrap(),
            0.05
        );
        assert!(closed_form_gaussian_linear(&mu, &sigma, -1.0, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn closed_form_matches_gaussian_saa() {
        use crate::expfam::{NominalModel, SamplingModel, StandardParams};
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mu = DVector::from_vec(vec![0.3, -0.2, 0.1]);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sigma = &a * a.transpose() / 3.0 + DMatrix::identity(3, 3) * 0.5;
        let nominal = NominalModel::new(StandardParams::MvNormal {
            mean: -&mu,
            cov: sigma.clone(),
        })
        .unwrap();
        let samples = nominal.sample(100_000, &mut rng);
        let x = [0.2, 0.5, 0.3];
        let eps = 0.2;
        let saa = inner_gamma_opt(
            &SaaDualProblem::new(eps, samples, LossSpec::LinearPortfolio).unwrap(),
            &x,
        )
        .unwrap()
        .value;
        // f = −ξᵀx with ξ ~ N(−μ, Σ) is the closed form at (μ, Σ).
        let exact = closed_form_gaussian_linear(&mu, &sigma, eps, &x).unwrap();
        assert!(((saa - exact) / exact).abs() < 0.01, "{saa} vs {exact}");
    }

    fn normal_logpdf(mu: f64, sd: f64) -> impl Fn(f64) -> f64 {
        move |x| -0.5 * ((x - mu) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn tilted_constant_loss_is_nominal() {
        let lp = normal_logpdf(2.0, 3.0);
        let f = |_x: f64| 5.0;
        let model = Tilted1d {
            logpdf: &lp,
            loss: &f,
            support: (f64::NEG_INFINITY, f64::INFINITY),
            center: 2.0,
            scale: 3.0,
            breaks: vec![],
        };
        let wc = worst_case_logdensity(&model, 0.7).unwrap();
        for x in [-5.0, 0.0, 2.0, 9.0] {
            assert!((wc.log_density(x) - lp(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn tilted_normal_linear_shifts_mean() {
        let (mu, sd, slope, gamma) = (1.0, 2.0, 0.8, 0.5);
        let lp = normal_logpdf(mu, sd);
        let f = move |x: f64| slope * x;
        let model = Tilted1d {
            logpdf: &lp,
            loss: &f,
            support: (f64::NEG_INFINITY, f64::INFINITY),
            center: mu,
            scale: sd,
            breaks: vec![],
        };
        let wc = worst_case_logdensity(&model, gamma).unwrap();
        let shifted = normal_logpdf(mu + sd * sd * slope / gamma, sd);
        for x in [-3.0, 1.0, 4.2, 7.0, 12.0] {
            assert!((wc.log_density(x) - shifted(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn tilted_exponential_linear_diverges() {
        let lp = |x: f64| if x < 0.0 { f64::NEG_INFINITY } else { -x };
        let f = |x: f64| 2.0 * x;
        let model = Tilted1d {
            logpdf: &lp,
            loss: &f,
            support: (0.0, f64::INFINITY),
            center: 1.0,
            scale: 1.0,
            breaks: vec![],
        };
        assert!(matches!(
            worst_case_logdensity(&model, 1.0),
            Err(DroError::InfiniteNormalizer(_))
        ));
        // Below the critical slope the tilt is an Exponential(1 − 2/γ).
        let wc = worst_case_logdensity(&model, 4.0).unwrap();
        assert!((wc.log_density(3.0) - (0.5f64.ln() - 1.5)).abs() < 1e-9);
    }

    #[test]
    fn exact_inner_attains_tilted_mean() {
        let (mu, sd, x) = (25.0, 10.0, 30.0);
        let lp = normal_logpdf(mu, sd);
        let nv = LossSpec::Newsvendor { h: 3.0, b: 8.0 };
        let f = move |xi: f64| nv.eval(&[x], &[xi]);
        let model = Tilted1d {
            logpdf: &lp,
            loss: &f,
            support: (f64::NEG_INFINITY, f64::INFINITY),
            center: mu,
            scale: sd,
            breaks: vec![x],
        };
        let (gamma, value) = model.exact_inner(0.2).unwrap();
        let m = model.moments(gamma).unwrap();
        assert!(((m.tilted_mean - value) / value).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn inner_value_monotone_in_radius(
            f in prop::collection::vec(-10.0f64..10.0, 1..30),
            e1 in 0.0f64..2.0,
            e2 in 0.0f64..2.0,
        ) {
            let (a, b) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let va = solve_inner(a, &f).unwrap().value;
            let vb = solve_inner(b, &f).unwrap().value;
            prop_assert!(va <= vb + 1e-9 * (1.0 + vb.abs()));
        }

        #[test]
        fn inner_weights_and_sandwich(
            f in prop::collection::vec(-10.0f64..10.0, 1..30),
            eps in 0.0f64..3.0,
        ) {
            let s = solve_inner(eps, &f).unwrap();
            let sum: f64 = s.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s.value >= mean - 1e-9);
            prop_assert!(s.value <= max + 1e-9);
            if s.gamma_star > 0.0 && s.gamma_star.is_finite() {
                // Strictly positive wherever e^{(f_i − max)/γ} is representable.
                for (&w, &v) in s.weights.iter().zip(&f) {
                    if (v - max) / s.gamma_star > -700.0 {
                        prop_assert!(w > 0.0);
                    }
                }
            }
            if eps >= (f.len() as f64).ln() {
                prop_assert_eq!(s.value, max);
            }
        }

        #[test]
        fn dual_objective_is_midpoint_convex(
            f in prop::collection::vec(-10.0f64..10.0, 1..30),
            eps in 0.0f64..1.0,
            g1 in 1e-3f64..50.0,
            g2 in 1e-3f64..50.0,
        ) {
            let mid = dual_objective(eps, 0.5 * (g1 + g2), &f);
            let avg = 0.5 * (dual_objective(eps, g1, &f) + dual_objective(eps, g2, &f));
            prop_assert!(mid <= avg + 1e-10 * (1.0 + avg.abs()));
        }

        #[test]
        fn perspective_lse_floor_is_exact_max(v in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(perspective_lse(1e-12, &v), max);
        }
    }
}
