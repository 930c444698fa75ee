//! Experiment harness: data-generating processes, the newsvendor and
//! portfolio pipelines, out-of-sample aggregation, Pareto fronts and
//! cross-validation of the radius.
//!
//! Every cell draws from its own ChaCha8 stream seeded by
//! [`cell_seed`]`(master, key)`. Data seeds depend only on the replicate
//! index, so all methods see the same train/test split. Solve seeds depend on
//! (method, M, replicate) but not on ε, which keeps the in-sample objective
//! monotone in ε within a slice.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{solve_bdro, solve_bdro_gaussian_linear, solve_empirical_kl, solve_wasserstein, BdroConfig};
use crate::duals::LossSpec;
use crate::error::{DroError, Result};
use crate::expfam::{ConjugatePosterior, Family, NiwParams, PosteriorParams, StandardParams};
use crate::linalg;
use crate::samples::Samples;
use crate::solver::{solve_closed_form_portfolio, solve_drobas, DualSolution, FeasibleSet, SolveConfig, Variant};

/// FNV-1a over the key, folded into the master seed with a splitmix64 finaliser.
pub fn cell_seed(master: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ splitmix64(h))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn cell_rng(master: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cell_seed(master, key))
}

/// `count` points log-spaced from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|i| {
                    if i == 0 {
                        lo
                    } else if i == count - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (count - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpSpec {
    Exponential {
        rate: f64,
    },
    Normal {
        mean: f64,
        sd: f64,
    },
    /// Parent N(mean, sd²) conditioned on ξ ≥ lower.
    TruncatedNormal {
        mean: f64,
        sd: f64,
        #[serde(default)]
        lower: f64,
    },
    /// Per draw: with probability `contam_frac` N(contam_mean, contam_sd²), else Exp(rate).
    ContaminatedExponential {
        rate: f64,
        contam_mean: f64,
        contam_sd: f64,
        contam_frac: f64,
    },
    MultivariateNormal {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
    },
}

impl DgpSpec {
    /// Five-dimensional normal with mean (10, 20, 30, 35, 22) and covariance
    /// A Aᵀ/5 + I for a fixed standard-normal A. The covariance is a
    /// reproducible default, not an estimate of anything.
    pub fn default_mvn() -> Self {
        let d = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(20_240_501);
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cov = &a * a.transpose() / d as f64 + DMatrix::identity(d, d);
        DgpSpec::MultivariateNormal {
            mean: vec![10.0, 20.0, 30.0, 35.0, 22.0],
            covariance: (0..d).map(|i| (0..d).map(|j| cov[(i, j)]).collect()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DroError::Config(m));
        match self {
            DgpSpec::Exponential { rate } if !(*rate > 0.0) => bad(format!("dgp.rate must be > 0; got {rate}")),
            DgpSpec::Normal { sd, .. } | DgpSpec::TruncatedNormal { sd, .. } if !(*sd > 0.0) => {
                bad(format!("dgp.sd must be > 0; got {sd}"))
            }
            DgpSpec::ContaminatedExponential {
                rate,
                contam_sd,
                contam_frac,
                ..
            } => {
                if !(*rate > 0.0 && *contam_sd > 0.0) {
                    bad("dgp.rate and dgp.contam_sd must be > 0".into())
                } else if !(0.0..=1.0).contains(contam_frac) {
                    bad(format!("dgp.contam_frac must lie in [0, 1]; got {contam_frac}"))
                } else {
                    Ok(())
                }
            }
            DgpSpec::MultivariateNormal { mean, covariance } => {
                let d = mean.len();
                if d == 0 || covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
                    return bad("dgp.covariance must be a square matrix matching dgp.mean".into());
                }
                linalg::cholesky(&self.cov_matrix(), "dgp.covariance")
                    .map(|_| ())
                    .map_err(|e| DroError::Config(e.to_string()))
            }
            _ => Ok(()),
        }
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        match self {
            DgpSpec::MultivariateNormal { covariance, .. } => {
                let d = covariance.len();
                DMatrix::from_fn(d, d, |i, j| covariance[i][j])
            }
            _ => DMatrix::zeros(0, 0),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DgpSpec::MultivariateNormal { mean, .. } => mean.len(),
            _ => 1,
        }
    }

    /// Short identifier used in result files.
    pub fn id(&self) -> &'static str {
        match self {
            DgpSpec::Exponential { .. } => "exponential",
            DgpSpec::Normal { .. } => "normal",
            DgpSpec::TruncatedNormal { .. } => "truncated_normal",
            DgpSpec::ContaminatedExponential { .. } => "contaminated_exponential",
            DgpSpec::MultivariateNormal { .. } => "mvn",
        }
    }

    /// Conjugate family whose likelihood matches the support of the DGP.
    pub fn default_family(&self) -> Family {
        match self {
            DgpSpec::Exponential { .. } | DgpSpec::ContaminatedExponential { .. } => Family::GammaExponential,
            DgpSpec::Normal { .. } | DgpSpec::TruncatedNormal { .. } => Family::NormalGamma,
            DgpSpec::MultivariateNormal { .. } => Family::NormalInverseWishart,
        }
    }

    /// The DGP as a likelihood member, where it is one.
    pub fn as_standard(&self) -> Option<StandardParams> {
        match self {
            DgpSpec::Exponential { rate } => Some(StandardParams::Exponential { rate: *rate }),
            DgpSpec::Normal { mean, sd } => Some(StandardParams::Normal {
                mean: *mean,
                precision: 1.0 / (sd * sd),
            }),
            DgpSpec::MultivariateNormal { mean, .. } => Some(StandardParams::MvNormal {
                mean: DVector::from_vec(mean.clone()),
                cov: self.cov_matrix(),
            }),
            _ => None,
        }
    }
}

/// Draws plus, for the contaminated DGP, which draws came from the contaminant.
pub fn sample_dgp_flagged<R: Rng + ?Sized>(spec: &DgpSpec, count: usize, rng: &mut R) -> (Samples, Vec<bool>) {
    let mut flags = vec![false; count];
    let samples = match spec {
        DgpSpec::Exponential { rate } => {
            let v: Vec<f64> = (0..count).map(|_| -(1.0 - rng.random::<f64>()).ln() / rate).collect();
            Samples::from_scalars(&v)
        }
        DgpSpec::Normal { mean, sd } => {
            let v: Vec<f64> = (0..count)
                .map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Samples::from_scalars(&v)
        }
        DgpSpec::TruncatedNormal { mean, sd, lower } => {
            let v: Vec<f64> = (0..count)
                .map(|_| loop {
                    let x = mean + sd * rng.sample::<f64, _>(StandardNormal);
                    if x >= *lower {
                        break x;
                    }
                })
                .collect();
            Samples::from_scalars(&v)
        }
        DgpSpec::ContaminatedExponential {
            rate,
            contam_mean,
            contam_sd,
            contam_frac,
        } => {
            let v: Vec<f64> = flags
                .iter_mut()
                .map(|flag| {
                    if rng.random::<f64>() < *contam_frac {
                        *flag = true;
                        contam_mean + contam_sd * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        -(1.0 - rng.random::<f64>()).ln() / rate
                    }
                })
                .collect();
            Samples::from_scalars(&v)
        }
        DgpSpec::MultivariateNormal { mean, .. } => {
            let l = linalg::cholesky(&spec.cov_matrix(), "dgp covariance")
                .expect("validated covariance")
                .l();
            let d = mean.len();
            let mu = DVector::from_column_slice(mean);
            let mut out = Samples::with_capacity(d, count);
            for _ in 0..count {
                let z = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
                out.push((&mu + &l * z).as_slice());
            }
            out
        }
    };
    (samples, flags)
}

pub fn sample_dgp<R: Rng + ?Sized>(spec: &DgpSpec, count: usize, rng: &mut R) -> Samples {
    sample_dgp_flagged(spec, count, rng).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "DRO-BAS-PE")]
    DroBasPe,
    #[serde(rename = "DRO-BAS-PP")]
    DroBasPp,
    #[serde(rename = "BDRO")]
    Bdro,
    #[serde(rename = "KL-DRO")]
    EmpiricalKl,
    #[serde(rename = "W-DRO")]
    Wasserstein,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::DroBasPe,
        Method::DroBasPp,
        Method::Bdro,
        Method::EmpiricalKl,
        Method::Wasserstein,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::DroBasPe => "DRO-BAS-PE",
            Method::DroBasPp => "DRO-BAS-PP",
            Method::Bdro => "BDRO",
            Method::EmpiricalKl => "KL-DRO",
            Method::Wasserstein => "W-DRO",
        }
    }

    pub fn is_drobas(self) -> bool {
        matches!(self, Method::DroBasPe | Method::DroBasPp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = DroError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| DroError::Config(format!("unknown method '{s}'")))
    }
}

/// One (method, ε, M, replicate) cell with out-of-sample sufficient statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OosRecord {
    pub method: Method,
    pub dgp: String,
    pub seed: usize,
    pub epsilon: f64,
    pub m_samples: usize,
    pub n_train: usize,
    pub x_star: Vec<f64>,
    pub objective: f64,
    pub solve_time_s: f64,
    pub sample_time_s: f64,
    pub sum_cost: f64,
    pub sum_sq_cost: f64,
    pub t_test: usize,
    pub skipped: bool,
    /// Why a cell was skipped; not written to the results CSV.
    #[serde(skip)]
    pub note: Option<String>,
}

impl OosRecord {
    #[allow(clippy::too_many_arguments)]
    fn skipped(method: Method, dgp: &str, seed: usize, epsilon: f64, m: usize, n: usize, t: usize, note: String) -> Self {
        Self {
            method,
            dgp: dgp.to_string(),
            seed,
            epsilon,
            m_samples: m,
            n_train: n,
            x_star: vec![],
            objective: f64::NAN,
            solve_time_s: 0.0,
            sample_time_s: 0.0,
            sum_cost: 0.0,
            sum_sq_cost: 0.0,
            t_test: t,
            skipped: true,
            note: Some(note),
        }
    }

    /// Same record with the timing fields zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        Self {
            solve_time_s: 0.0,
            sample_time_s: 0.0,
            ..self.clone()
        }
    }
}

fn test_costs(loss: &LossSpec, x: &[f64], test: &Samples) -> (f64, f64) {
    let mut s = 0.0;
    let mut s2 = 0.0;
    for xi in test.rows() {
        let c = loss.eval(x, xi);
        s += c;
        s2 += c * c;
    }
    (s, s2)
}

/// Default prior per family: Normal-Gamma (0, 1, 1, 1), Gamma (1, 1), and NIW
/// with μ₀ = 0, ι₀ = D + 1, κ₀ = ι₀ + D + 2, Ψ₀ = I.
pub fn default_prior(family: Family, dim: usize) -> ConjugatePosterior {
    ConjugatePosterior::default_prior(family, dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewsvendorConfig {
    pub dgp: DgpSpec,
    #[serde(default)]
    pub prior: Option<ConjugatePosterior>,
    pub methods: Vec<Method>,
    pub epsilon: Vec<f64>,
    pub m_values: Vec<usize>,
    pub replicates: usize,
    pub n_train: usize,
    pub t_test: usize,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_b")]
    pub b: f64,
    #[serde(default = "default_box")]
    pub box_bounds: (f64, f64),
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolveConfig,
}

fn default_h() -> f64 {
    3.0
}
fn default_b() -> f64 {
    8.0
}
fn default_box() -> (f64, f64) {
    (0.0, 100.0)
}

impl NewsvendorConfig {
    /// Exponential(1/20) demand, n = 20, T = 50, M ∈ {25, 100, 900}, 24
    /// log-spaced ε in [0.001, 1], PE/PP/BDRO.
    pub fn standard() -> Self {
        Self {
            dgp: DgpSpec::Exponential { rate: 1.0 / 20.0 },
            prior: None,
            methods: vec![Method::DroBasPe, Method::DroBasPp, Method::Bdro],
            epsilon: log_grid(0.001, 1.0, 24),
            m_values: vec![25, 100, 900],
            replicates: 500,
            n_train: 20,
            t_test: 50,
            h: 3.0,
            b: 8.0,
            box_bounds: (0.0, 100.0),
            seed: 0,
            solver: SolveConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        let bad = |m: &str| Err(DroError::Config(m.to_string()));
        if self.methods.is_empty() {
            return bad("methods must be nonempty");
        }
        if self.epsilon.is_empty() {
            return bad("epsilon grid must be nonempty");
        }
        if self.epsilon.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return bad("epsilon values must be finite and >= 0");
        }
        if self.m_values.is_empty() || self.m_values.contains(&0) {
            return bad("m_values must be nonempty and positive");
        }
        if self.replicates == 0 || self.n_train == 0 || self.t_test == 0 {
            return bad("replicates, n_train and t_test must be >= 1");
        }
        let (lo, hi) = self.box_bounds;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return bad("box_bounds must be finite with lower <= upper");
        }
        LossSpec::Newsvendor { h: self.h, b: self.b }
            .validate()
            .map_err(|e| DroError::Config(e.to_string()))?;
        if let Some(p) = &self.prior {
            if p.dim() != self.dgp.dim() {
                return bad("prior dimension does not match the DGP");
            }
        }
        self.solver.validate()
    }

    pub fn prior(&self) -> ConjugatePosterior {
        self.prior
            .clone()
            .unwrap_or_else(|| default_prior(self.dgp.default_family(), self.dgp.dim()))
    }

    pub fn loss(&self) -> LossSpec {
        LossSpec::Newsvendor { h: self.h, b: self.b }
    }

    pub fn feasible_set(&self) -> FeasibleSet {
        FeasibleSet::cube(self.dgp.dim(), self.box_bounds.0, self.box_bounds.1)
    }

    /// Expected number of records (skips included).
    pub fn cardinality(&self) -> usize {
        self.methods.len() * self.epsilon.len() * self.m_values.len() * self.replicates
    }
}

/// Everything a single solve needs besides the radius.
pub struct SolveContext<'a> {
    pub posterior: &'a ConjugatePosterior,
    pub train: &'a Samples,
    pub loss: LossSpec,
    pub set: &'a FeasibleSet,
    pub m: usize,
    pub solver: &'a SolveConfig,
}

/// Solve one method at one radius. `Ok(None)` means the configuration is
/// infeasible (PE below its minimum radius).
pub fn solve_method<R: Rng + ?Sized>(
    method: Method,
    ctx: &SolveContext<'_>,
    epsilon: f64,
    rng: &mut R,
) -> Result<Option<DualSolution>> {
    let r = match method {
        Method::DroBasPe => solve_drobas(
            ctx.posterior,
            &ctx.loss,
            ctx.set,
            epsilon,
            Variant::Pe,
            ctx.m,
            ctx.solver,
            rng,
        ),
        Method::DroBasPp => solve_drobas(
            ctx.posterior,
            &ctx.loss,
            ctx.set,
            epsilon,
            Variant::Pp,
            ctx.m,
            ctx.solver,
            rng,
        ),
        Method::Bdro => solve_bdro(
            ctx.posterior,
            &ctx.loss,
            ctx.set,
            &BdroConfig::split(ctx.m, epsilon),
            ctx.solver,
            rng,
        ),
        Method::EmpiricalKl => solve_empirical_kl(ctx.train, &ctx.loss, ctx.set, epsilon, ctx.solver),
        Method::Wasserstein => solve_wasserstein(ctx.train, &ctx.loss, ctx.set, epsilon, ctx.solver),
    };
    match r {
        Ok(s) => Ok(Some(s)),
        Err(DroError::Unbounded { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn solve_key(method: Method, m: usize, j: usize) -> String {
    format!("solve/{}/{m}/{j}", method.id())
}

/// Run the newsvendor experiment on the current rayon pool.
pub fn run_newsvendor(config: &NewsvendorConfig) -> Result<Vec<OosRecord>> {
    config.validate()?;
    let prior = config.prior();
    let loss = config.loss();
    let set = config.feasible_set();
    let dgp_id = config.dgp.id();

    let per_seed: Vec<Result<Vec<OosRecord>>> = (0..config.replicates)
        .into_par_iter()
        .map(|j| {
            let mut data_rng = cell_rng(config.seed, &format!("data/{j}"));
            let train = sample_dgp(&config.dgp, config.n_train, &mut data_rng);
            let test = sample_dgp(&config.dgp, config.t_test, &mut data_rng);
            let posterior = prior.update(&train)?;
            let mut out = Vec::with_capacity(config.methods.len() * config.epsilon.len() * config.m_values.len());
            for &method in &config.methods {
                for &m in &config.m_values {
                    let ctx = SolveContext {
                        posterior: &posterior,
                        train: &train,
                        loss,
                        set: &set,
                        m,
                        solver: &config.solver,
                    };
                    for &eps in &config.epsilon {
                        let mut rng = cell_rng(config.seed, &solve_key(method, m, j));
                        let rec = match solve_method(method, &ctx, eps, &mut rng) {
                            Ok(Some(sol)) => {
                                let (s, s2) = test_costs(&loss, &sol.x_star, &test);
                                OosRecord {
                                    method,
                                    dgp: dgp_id.to_string(),
                                    seed: j,
                                    epsilon: eps,
                                    m_samples: m,
                                    n_train: config.n_train,
                                    x_star: sol.x_star,
                                    objective: sol.objective,
                                    solve_time_s: sol.solve_time_s,
                                    sample_time_s: sol.sample_time_s,
                                    sum_cost: s,
                                    sum_sq_cost: s2,
                                    t_test: config.t_test,
                                    skipped: false,
                                    note: None,
                                }
                            }
                            Ok(None) => OosRecord::skipped(
                                method,
                                dgp_id,
                                j,
                                eps,
                                m,
                                config.n_train,
                                config.t_test,
                                "epsilon below the minimum radius".into(),
                            ),
                            Err(e) => OosRecord::skipped(
                                method,
                                dgp_id,
                                j,
                                eps,
                                m,
                                config.n_train,
                                config.t_test,
                                format!("solve failed: {e}"),
                            ),
                        };
                        out.push(rec);
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::with_capacity(config.cardinality());
    for r in per_seed {
        records.extend(r?);
    }
    Ok(records)
}

/// Run `f` on a dedicated pool of `threads` workers (`None` = all cores).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        b = b.num_threads(t.max(1));
    }
    let pool = b
        .build()
        .map_err(|e| DroError::Numerical(format!("failed to build thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OosSummaryRow {
    pub method: Method,
    pub epsilon: f64,
    pub m_samples: usize,
    pub oos_mean: f64,
    pub oos_var: f64,
    pub on_pareto: bool,
    /// Number of non-skipped replicates aggregated.
    pub replicates: usize,
}

/// Aggregate records per (M, method, ε) from sufficient statistics and mark
/// the Pareto front jointly over methods and radii for each M. Skipped
/// records are ignored. Sums run in replicate order, so the result does not
/// depend on record order.
pub fn oos_summary(records: &[OosRecord]) -> Result<Vec<OosSummaryRow>> {
    let mut groups: BTreeMap<(usize, Method, u64), Vec<&OosRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.skipped) {
        if r.t_test == 0 || !r.sum_cost.is_finite() || !r.sum_sq_cost.is_finite() {
            return Err(DroError::Input(format!(
                "record for {} at epsilon {} has invalid test statistics",
                r.method, r.epsilon
            )));
        }
        groups
            .entry((r.m_samples, r.method, r.epsilon.to_bits()))
            .or_default()
            .push(r);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((m, method, eps_bits), mut recs) in groups {
        recs.sort_by(|a, b| a.seed.cmp(&b.seed).then(a.sum_cost.total_cmp(&b.sum_cost)));
        let t = recs[0].t_test;
        if recs.iter().any(|r| r.t_test != t) {
            return Err(DroError::Input(format!("mixed test sizes for {method} at M = {m}")));
        }
        let jt = (recs.len() * t) as f64;
        if jt <= 1.0 {
            return Err(DroError::Input(format!(
                "variance undefined with J·T = {jt} for {method}"
            )));
        }
        let s: f64 = recs.iter().map(|r| r.sum_cost).sum();
        let s2: f64 = recs.iter().map(|r| r.sum_sq_cost).sum();
        let mean = s / jt;
        let var = ((s2 - jt * mean * mean) / (jt - 1.0)).max(0.0);
        rows.push(OosSummaryRow {
            method,
            epsilon: f64::from_bits(eps_bits),
            m_samples: m,
            oos_mean: mean,
            oos_var: var,
            on_pareto: false,
            replicates: recs.len(),
        });
    }
    let mut start = 0;
    while start < rows.len() {
        let m = rows[start].m_samples;
        let end = start + rows[start..].iter().take_while(|r| r.m_samples == m).count();
        let pts: Vec<(f64, f64)> = rows[start..end].iter().map(|r| (r.oos_mean, r.oos_var)).collect();
        for (r, keep) in rows[start..end].iter_mut().zip(pareto_mask(&pts)) {
            r.on_pareto = keep;
        }
        start = end;
    }
    Ok(rows)
}

/// A point is kept iff no other point is strictly smaller in both coordinates.
pub fn pareto_mask(points: &[(f64, f64)]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0));
    let mut keep = vec![false; points.len()];
    let mut best_v = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let m = points[order[i]].0;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == m {
            j += 1;
        }
        // Only strictly smaller means can dominate, so compare to the prefix.
        for &k in &order[i..j] {
            keep[k] = !(best_v < points[k].1);
        }
        for &k in &order[i..j] {
            best_v = best_v.min(points[k].1);
        }
        i = j;
    }
    keep
}

pub fn pareto_front(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    points
        .iter()
        .zip(pareto_mask(points))
        .filter_map(|(p, k)| k.then_some(*p))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CvSelection {
    MinMean,
    MinVar,
    /// ½ (mean + std)
    MeanPlusStdHalf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub epsilon: f64,
    pub feasible: bool,
    pub cv_mean: f64,
    pub cv_var: f64,
    pub cv_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub chosen: f64,
    pub table: Vec<CvRow>,
}

/// Inputs to [`crossval_epsilon`] besides the data and the grid.
#[derive(Debug, Clone)]
pub struct CvSetup {
    pub prior: ConjugatePosterior,
    pub loss: LossSpec,
    pub set: FeasibleSet,
    pub m: usize,
    pub solver: SolveConfig,
    pub seed: u64,
}

/// k-fold cross-validation of ε over contiguous folds.
pub fn crossval_epsilon(
    data: &Samples,
    method: Method,
    candidates: &[f64],
    folds: usize,
    selection: CvSelection,
    setup: &CvSetup,
) -> Result<CvResult> {
    if folds < 2 {
        return Err(DroError::Config("cross-validation needs at least 2 folds".into()));
    }
    if data.len() < folds {
        return Err(DroError::Config(format!(
            "cross-validation needs n >= folds; got n = {}, folds = {folds}",
            data.len()
        )));
    }
    if candidates.is_empty() {
        return Err(DroError::Config("no candidate epsilon values".into()));
    }
    let n = data.len();
    let bounds: Vec<(usize, usize)> = (0..folds).map(|k| (k * n / folds, (k + 1) * n / folds)).collect();
    let fold_data: Vec<(Samples, Samples, ConjugatePosterior)> = bounds
        .iter()
        .map(|&(a, b)| {
            let train_idx: Vec<usize> = (0..n).filter(|i| *i < a || *i >= b).collect();
            let train = data.select_rows(&train_idx);
            let valid = data.slice_rows(a, b);
            let post = setup.prior.update(&train)?;
            Ok((train, valid, post))
        })
        .collect::<Result<_>>()?;

    let table: Vec<CvRow> = candidates
        .par_iter()
        .map(|&eps| -> Result<CvRow> {
            let mut costs = Vec::with_capacity(n);
            for (k, (train, valid, post)) in fold_data.iter().enumerate() {
                let ctx = SolveContext {
                    posterior: post,
                    train,
                    loss: setup.loss,
                    set: &setup.set,
                    m: setup.m,
                    solver: &setup.solver,
                };
                let mut rng = cell_rng(setup.seed, &format!("cv/{}/{k}", method.id()));
                match solve_method(method, &ctx, eps, &mut rng)? {
                    Some(sol) => costs.extend(valid.rows().map(|xi| setup.loss.eval(&sol.x_star, xi))),
                    None => {
                        return Ok(CvRow {
                            epsilon: eps,
                            feasible: false,
                            cv_mean: f64::NAN,
                            cv_var: f64::NAN,
                            cv_std: f64::NAN,
                        })
                    }
                }
            }
            let c = costs.len() as f64;
            let mean = costs.iter().sum::<f64>() / c;
            let var = costs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (c - 1.0).max(1.0);
            Ok(CvRow {
                epsilon: eps,
                feasible: true,
                cv_mean: mean,
                cv_var: var,
                cv_std: var.sqrt(),
            })
        })
        .collect::<Result<_>>()?;

    let score = |r: &CvRow| match selection {
        CvSelection::MinMean => r.cv_mean,
        CvSelection::MinVar => r.cv_var,
        CvSelection::MeanPlusStdHalf => 0.5 * (r.cv_mean + r.cv_std),
    };
    let chosen = table
        .iter()
        .filter(|r| r.feasible)
        .min_by(|a, b| score(a).total_cmp(&score(b)).then(a.epsilon.total_cmp(&b.epsilon)))
        .map(|r| r.epsilon)
        .ok_or_else(|| DroError::Config("no feasible epsilon candidate".into()))?;
    Ok(CvResult { chosen, table })
}

/// Weekly returns: one column per asset plus optional passthrough series.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsData {
    pub names: Vec<String>,
    pub returns: Samples,
    pub passthrough: Vec<(String, Vec<f64>)>,
}

/// Parse a returns CSV: a header of asset names, then one row per week.
/// Columns listed in `passthrough` are carried along instead of being
/// treated as assets.
pub fn read_returns_csv<R: Read>(reader: R, passthrough: &[String]) -> Result<ReturnsData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DroError::Ingestion(format!("cannot read header: {e}")))?
        .clone();
    if headers.is_empty() {
        return Err(DroError::Ingestion("header row is empty".into()));
    }
    let is_pass: Vec<bool> = headers.iter().map(|h| passthrough.iter().any(|p| p == h)).collect();
    let names: Vec<String> = headers
        .iter()
        .zip(&is_pass)
        .filter(|(_, p)| !**p)
        .map(|(h, _)| h.to_string())
        .collect();
    if names.is_empty() {
        return Err(DroError::Ingestion("no asset columns".into()));
    }
    let mut pass: Vec<(String, Vec<f64>)> = headers
        .iter()
        .zip(&is_pass)
        .filter(|(_, p)| **p)
        .map(|(h, _)| (h.to_string(), vec![]))
        .collect();
    let mut out = Samples::with_capacity(names.len(), 0);
    let mut row = Vec::with_capacity(names.len());
    for (i, rec) in rdr.records().enumerate() {
        // Row numbers are 1-based file lines; the header is line 1.
        let line = i + 2;
        let rec = rec.map_err(|e| DroError::Ingestion(format!("row {line}: {e}")))?;
        if rec.len() != headers.len() {
            return Err(DroError::Ingestion(format!(
                "row {line}: expected {} columns, found {}",
                headers.len(),
                rec.len()
            )));
        }
        row.clear();
        let mut p = 0;
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                DroError::Ingestion(format!(
                    "row {line}, column {} ('{}'): cannot parse '{field}' as a number",
                    c + 1,
                    &headers[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(DroError::Ingestion(format!(
                    "row {line}, column {} ('{}'): non-finite value",
                    c + 1,
                    &headers[c]
                )));
            }
            if is_pass[c] {
                pass[p].1.push(v);
                p += 1;
            } else {
                row.push(v);
            }
        }
        out.push(&row);
    }
    if out.is_empty() {
        return Err(DroError::Ingestion("no data rows".into()));
    }
    Ok(ReturnsData {
        names,
        returns: out,
        passthrough: pass,
    })
}

/// Synthetic weekly returns with a common market factor: a stand-in when no
/// real dataset is supplied.
pub fn synthetic_returns(rows: usize, assets: usize, seed: u64) -> ReturnsData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drift: Vec<f64> = (0..assets).map(|_| rng.random_range(0.0005..0.003)).collect();
    let beta: Vec<f64> = (0..assets).map(|_| rng.random_range(0.5..1.5)).collect();
    let idio: Vec<f64> = (0..assets).map(|_| rng.random_range(0.015..0.04)).collect();
    let mut out = Samples::with_capacity(assets, rows);
    let mut row = vec![0.0; assets];
    for _ in 0..rows {
        let market: f64 = 0.02 * rng.sample::<f64, _>(StandardNormal);
        for a in 0..assets {
            row[a] = drift[a] + beta[a] * market + idio[a] * rng.sample::<f64, _>(StandardNormal);
        }
        out.push(&row);
    }
    ReturnsData {
        names: (1..=assets).map(|i| format!("S{i:02}")).collect(),
        returns: out,
        passthrough: vec![],
    }
}

/// Sliding windows: window j trains on rows [jT, jT + n) and tests on the
/// following T rows.
pub fn portfolio_windows(rows: usize, n: usize, t: usize) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    if t == 0 || rows < n + t {
        return vec![];
    }
    let count = (rows - n) / t;
    (0..count).map(|j| (j * t..j * t + n, j * t + n..j * t + n + t)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioConfig {
    #[serde(default)]
    pub returns_path: Option<String>,
    /// Columns of the returns file passed through to the series output.
    #[serde(default)]
    pub passthrough_columns: Vec<String>,
    #[serde(default)]
    pub prior: Option<NiwParams>,
    pub methods: Vec<Method>,
    pub epsilon: Vec<f64>,
    #[serde(default = "default_pp_m")]
    pub m_samples: usize,
    #[serde(default = "default_bdro_m")]
    pub m_theta: usize,
    #[serde(default = "default_n_port")]
    pub n_train: usize,
    #[serde(default = "default_t_port")]
    pub t_test: usize,
    /// Cap on the number of windows (all when absent).
    #[serde(default)]
    pub max_windows: Option<usize>,
    #[serde(default)]
    pub synthetic: SyntheticReturns,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolveConfig,
}

fn default_pp_m() -> usize {
    3600
}
fn default_bdro_m() -> usize {
    900
}
fn default_n_port() -> usize {
    52
}
fn default_t_port() -> usize {
    12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticReturns {
    pub rows: usize,
    pub assets: usize,
    pub seed: u64,
}

impl Default for SyntheticReturns {
    fn default() -> Self {
        Self {
            rows: 1363,
            assets: 28,
            seed: 7,
        }
    }
}

impl PortfolioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DroError::Config(m.to_string()));
        if self.methods.is_empty() {
            return bad("methods must be nonempty");
        }
        if self.epsilon.is_empty() || self.epsilon.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return bad("epsilon grid must be nonempty, finite and >= 0");
        }
        if self.m_samples == 0 || self.m_theta == 0 || self.n_train == 0 || self.t_test == 0 {
            return bad("m_samples, m_theta, n_train and t_test must be >= 1");
        }
        if self.returns_path.is_none() && (self.synthetic.rows == 0 || self.synthetic.assets == 0) {
            return bad("synthetic returns need rows and assets >= 1");
        }
        self.solver.validate()
    }
}

/// Realised portfolio return per test week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnPoint {
    pub method: Method,
    pub epsilon: f64,
    pub window: usize,
    /// Zero-based row of the returns matrix.
    pub week: usize,
    pub portfolio_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioOutput {
    pub records: Vec<OosRecord>,
    pub series: Vec<ReturnPoint>,
    pub windows: usize,
}

pub fn run_portfolio(config: &PortfolioConfig, data: &ReturnsData) -> Result<PortfolioOutput> {
    config.validate()?;
    let d = data.returns.dim();
    let windows = portfolio_windows(data.returns.len(), config.n_train, config.t_test);
    if windows.is_empty() {
        return Err(DroError::Ingestion(format!(
            "returns have {} rows; need at least n + T = {}",
            data.returns.len(),
            config.n_train + config.t_test
        )));
    }
    let windows: Vec<_> = match config.max_windows {
        Some(k) => windows.into_iter().take(k).collect(),
        None => windows,
    };
    let prior = match &config.prior {
        Some(p) => {
            if p.dim() != d {
                return Err(DroError::Config(format!(
                    "prior dimension {} does not match {d} assets",
                    p.dim()
                )));
            }
            ConjugatePosterior::normal_inverse_wishart(p.clone())?
        }
        None => default_prior(Family::NormalInverseWishart, d),
    };
    let set = FeasibleSet::simplex(d);
    let loss = LossSpec::LinearPortfolio;

    let per_window: Vec<Result<(Vec<OosRecord>, Vec<ReturnPoint>)>> = windows
        .par_iter()
        .enumerate()
        .map(|(j, (train_r, test_r))| {
            let train = data.returns.slice_rows(train_r.start, train_r.end);
            let test = data.returns.slice_rows(test_r.start, test_r.end);
            let posterior = prior.update(&train)?;
            let PosteriorParams::NormalInverseWishart(niw) = &posterior.params else {
                unreachable!("portfolio posterior is NIW")
            };
            let gap = posterior.gap()?;
            let StandardParams::MvNormal { mean, cov } = posterior.nominal()?.params else {
                unreachable!("NIW nominal is multivariate normal")
            };
            let mut recs = Vec::new();
            let mut series = Vec::new();
            for &method in &config.methods {
                let m = match method {
                    Method::Bdro => config.m_theta,
                    Method::DroBasPp => config.m_samples,
                    _ => 0,
                };
                for &eps in &config.epsilon {
                    let mut rng = cell_rng(config.seed, &solve_key(method, m, j));
                    let sol = match method {
                        Method::DroBasPe => {
                            if eps < gap {
                                None
                            } else {
                                Some(solve_closed_form_portfolio(&mean, &cov, eps - gap, &set, &config.solver))
                            }
                        }
                        Method::Bdro => Some(solve_bdro_gaussian_linear(niw, &set, eps, config.m_theta, &config.solver, &mut rng)),
                        _ => {
                            let ctx = SolveContext {
                                posterior: &posterior,
                                train: &train,
                                loss,
                                set: &set,
                                m: config.m_samples,
                                solver: &config.solver,
                            };
                            solve_method(method, &ctx, eps, &mut rng).transpose()
                        }
                    };
                    let rec = match sol {
                        Some(Ok(sol)) => {
                            let (s, s2) = test_costs(&loss, &sol.x_star, &test);
                            for (k, xi) in test.rows().enumerate() {
                                series.push(ReturnPoint {
                                    method,
                                    epsilon: eps,
                                    window: j,
                                    week: test_r.start + k,
                                    portfolio_return: linalg::dot(&sol.x_star, xi),
                                });
                            }
                            OosRecord {
                                method,
                                dgp: "returns".into(),
                                seed: j,
                                epsilon: eps,
                                m_samples: m,
                                n_train: config.n_train,
                                x_star: sol.x_star,
                                objective: sol.objective,
                                solve_time_s: sol.solve_time_s,
                                sample_time_s: sol.sample_time_s,
                                sum_cost: s,
                                sum_sq_cost: s2,
                                t_test: config.t_test,
                                skipped: false,
                                note: None,
                            }
                        }
                        None => OosRecord::skipped(
                            method,
                            "returns",
                            j,
                            eps,
                            m,
                            config.n_train,
                            config.t_test,
                            "epsilon below the minimum radius".into(),
                        ),
                        Some(Err(e)) => OosRecord::skipped(
                            method,
                            "returns",
                            j,
                            eps,
                            m,
                            config.n_train,
                            config.t_test,
                            format!("solve failed: {e}"),
                        ),
                    };
                    recs.push(rec);
                }
            }
            Ok((recs, series))
        })
        .collect();
    let mut records = Vec::new();
    let mut series = Vec::new();
    for r in per_window {
        let (a, b) = r?;
        records.extend(a);
        series.extend(b);
    }
    Ok(PortfolioOutput {
        records,
        series,
        windows: windows.len(),
    })
}

pub const RESULTS_HEADER: [&str; 14] = [
    "method",
    "dgp",
    "seed",
    "epsilon",
    "m_samples",
    "n_train",
    "objective",
    "solve_time_s",
    "sample_time_s",
    "sum_cost",
    "sum_sq_cost",
    "t_test",
    "skipped",
    "x_star",
];

fn csv_err(e: impl fmt::Display) -> DroError {
    DroError::Ingestion(format!("csv: {e}"))
}

fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

pub fn write_results_csv<W: Write>(writer: W, records: &[OosRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RESULTS_HEADER).map_err(csv_err)?;
    for r in records {
        let x: Vec<String> = r.x_star.iter().map(|v| format!("{v}")).collect();
        w.write_record([
            r.method.id().to_string(),
            r.dgp.clone(),
            r.seed.to_string(),
            format!("{}", r.epsilon),
            r.m_samples.to_string(),
            r.n_train.to_string(),
            fmt_f64(r.objective),
            format!("{}", r.solve_time_s),
            format!("{}", r.sample_time_s),
            format!("{}", r.sum_cost),
            format!("{}", r.sum_sq_cost),
            r.t_test.to_string(),
            r.skipped.to_string(),
            x.join(";"),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)?;
    Ok(())
}

pub fn read_results_csv<R: Read>(reader: R) -> Result<Vec<OosRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != RESULTS_HEADER {
        return Err(DroError::Ingestion("unexpected results header".into()));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(csv_err)?;
        let num = |c: usize| -> Result<f64> {
            let f = &rec[c];
            if f.is_empty() {
                return Ok(f64::NAN);
            }
            f.parse()
                .map_err(|_| DroError::Ingestion(format!("row {line}, column {}: bad number '{f}'", RESULTS_HEADER[c])))
        };
        let int = |c: usize| -> Result<usize> {
            rec[c]
                .parse()
                .map_err(|_| DroError::Ingestion(format!("row {line}, column {}: bad integer", RESULTS_HEADER[c])))
        };
        let x_star = if rec[13].is_empty() {
            vec![]
        } else {
            rec[13]
                .split(';')
                .map(|s| s.parse::<f64>().map_err(|_| DroError::Ingestion(format!("row {line}: bad x_star"))))
                .collect::<Result<_>>()?
        };
        out.push(OosRecord {
            method: rec[0].parse()?,
            dgp: rec[1].to_string(),
            seed: int(2)?,
            epsilon: num(3)?,
            m_samples: int(4)?,
            n_train: int(5)?,
            objective: num(6)?,
            solve_time_s: num(7)?,
            sample_time_s: num(8)?,
            sum_cost: num(9)?,
            sum_sq_cost: num(10)?,
            t_test: int(11)?,
            skipped: &rec[12] == "true",
            x_star,
            note: None,
        });
    }
    Ok(out)
}

pub fn write_summary_csv<W: Write>(writer: W, rows: &[OosSummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "epsilon", "oos_mean", "oos_var", "on_pareto"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.method.id().to_string(),
            format!("{}", r.epsilon),
            format!("{}", r.oos_mean),
            format!("{}", r.oos_var),
            r.on_pareto.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)?;
    Ok(())
}

/// Per-week series with passthrough columns aligned on the week index.
pub fn write_series_csv<W: Write>(writer: W, series: &[ReturnPoint], data: &ReturnsData) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["method".to_string(), "epsilon".into(), "window".into(), "week".into(), "portfolio_return".into()];
    header.extend(data.passthrough.iter().map(|(n, _)| n.clone()));
    w.write_record(&header).map_err(csv_err)?;
    for p in series {
        let mut row = vec![
            p.method.id().to_string(),
            format!("{}", p.epsilon),
            p.window.to_string(),
            p.week.to_string(),
            format!("{}", p.portfolio_return),
        ];
        row.extend(data.passthrough.iter().map(|(_, v)| format!("{}", v[p.week])));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)?;
    Ok(())
}

pub fn write_cv_csv<W: Write>(writer: W, result: &CvResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epsilon", "feasible", "cv_mean", "cv_var", "cv_std", "chosen"])
        .map_err(csv_err)?;
    for r in &result.table {
        w.write_record([
            format!("{}", r.epsilon),
            r.feasible.to_string(),
            fmt_f64(r.cv_mean),
            fmt_f64(r.cv_var),
            fmt_f64(r.cv_std),
            (r.epsilon == result.chosen).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)?;
    Ok(())
}
