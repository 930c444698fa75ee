use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use drobas::bench::{
    self, crossval_epsilon, oos_summary, run_newsvendor, run_portfolio, solve_method, synthetic_returns,
    with_threads, CvSetup, OosRecord, ReturnsData, SolveContext,
};
use drobas::solver::FeasibleSet;
use drobas::{ConjugatePosterior, Family, Samples};
use serde_json::{json, Value};

use crate::config::{self, CvConfig, ExperimentConfig, SolveOneConfig, TolerancesConfig};
use crate::{CliError, Common};

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).expect("JSON values serialise");
    fs::write(path, text + "\n").map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Collects output files and writes the config echo and manifest.
struct RunDir {
    dir: PathBuf,
    outputs: Vec<String>,
}

impl RunDir {
    fn new(dir: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir, outputs: vec![] })
    }

    fn file(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        self.outputs.push(name.to_string());
        create(&self.dir.join(name))
    }

    fn finish(self, cfg: &ExperimentConfig, common: &Common, started: SystemTime, wall: Instant, extra: Value) -> Result<(), CliError> {
        let echo = serde_json::to_value(cfg).expect("configs serialise");
        write_json(&self.dir.join("config.json"), &echo)?;
        let mut outputs = self.outputs;
        outputs.push("config.json".into());
        let manifest = json!({
            "tool": "drobas",
            "version": env!("CARGO_PKG_VERSION"),
            "experiment": cfg.kind(),
            "config": echo,
            "threads": common.threads,
            "started_unix_s": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            "wall_time_s": wall.elapsed().as_secs_f64(),
            "outputs": outputs,
            "summary": extra,
        });
        write_json(&self.dir.join("manifest.json"), &manifest)
    }
}

pub fn experiment(kind: &str, common: &Common) -> Result<(), CliError> {
    let cfg = config::load(common.config.as_deref(), Some(kind), &common.sets, common.seed)?;
    let started = SystemTime::now();
    let wall = Instant::now();
    let threads = common.threads;
    match &cfg {
        ExperimentConfig::Newsvendor(c) => {
            let records = with_threads(threads, || run_newsvendor(c))??;
            let mut out = RunDir::new(out_dir(common))?;
            write_records(&mut out, &records)?;
            let extra = record_counts(&records);
            out.finish(&cfg, common, started, wall, extra)
        }
        ExperimentConfig::Portfolio(c) => {
            let data = load_returns(c)?;
            let result = with_threads(threads, || run_portfolio(c, &data))??;
            let mut out = RunDir::new(out_dir(common))?;
            write_records(&mut out, &result.records)?;
            bench::write_series_csv(out.file("returns_series.csv")?, &result.series, &data)?;
            let mut extra = record_counts(&result.records);
            extra["windows"] = json!(result.windows);
            extra["assets"] = json!(data.names);
            out.finish(&cfg, common, started, wall, extra)
        }
        ExperimentConfig::Cv(c) => {
            let result = with_threads(threads, || cross_validate(c))??;
            println!("chosen epsilon: {}", result.chosen);
            let mut out = RunDir::new(out_dir(common))?;
            bench::write_cv_csv(out.file("cv.csv")?, &result)?;
            out.finish(&cfg, common, started, wall, json!({ "chosen_epsilon": result.chosen }))
        }
        ExperimentConfig::Tolerances(c) => {
            let row = tolerances(c)?;
            let mut text = Vec::new();
            write_tolerances(&mut text, &row)?;
            print!("{}", String::from_utf8(text.clone()).expect("CSV is UTF-8"));
            if let Some(dir) = &common.out {
                let mut out = RunDir::new(dir.clone())?;
                write_tolerances(out.file("tolerances.csv")?, &row)?;
                out.finish(&cfg, common, started, wall, Value::Null)?;
            }
            Ok(())
        }
        ExperimentConfig::SolveOne(c) => {
            let v = solve_one(c)?;
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON values serialise"));
            if let Some(dir) = &common.out {
                let mut out = RunDir::new(dir.clone())?;
                out.outputs.push("solution.json".into());
                write_json(&out.dir.join("solution.json"), &v)?;
                out.finish(&cfg, common, started, wall, Value::Null)?;
            }
            Ok(())
        }
    }
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn record_counts(records: &[OosRecord]) -> Value {
    json!({
        "records": records.len(),
        "skipped": records.iter().filter(|r| r.skipped).count(),
    })
}

/// results.csv plus one summary per M (summary.csv when there is only one).
fn write_records(out: &mut RunDir, records: &[OosRecord]) -> Result<(), CliError> {
    bench::write_results_csv(out.file("results.csv")?, records)?;
    for r in records.iter().filter(|r| r.note.as_deref().is_some_and(|n| n.starts_with("solve failed"))) {
        eprintln!(
            "drobas: warning: {} ε = {} M = {} seed {}: {}",
            r.method,
            r.epsilon,
            r.m_samples,
            r.seed,
            r.note.as_deref().unwrap_or_default()
        );
    }
    let rows = match oos_summary(records) {
        Ok(rows) => rows,
        // Nothing to aggregate, e.g. every record skipped or T = 1 with J = 1.
        Err(e) => {
            eprintln!("drobas: warning: no summary written: {e}");
            return Ok(());
        }
    };
    let mut ms: Vec<usize> = rows.iter().map(|r| r.m_samples).collect();
    ms.dedup();
    if ms.len() == 1 {
        bench::write_summary_csv(out.file("summary.csv")?, &rows)?;
    } else {
        for m in ms {
            let part: Vec<_> = rows.iter().filter(|r| r.m_samples == m).cloned().collect();
            bench::write_summary_csv(out.file(&format!("summary_m{m}.csv"))?, &part)?;
        }
    }
    Ok(())
}

fn load_returns(c: &drobas::bench::PortfolioConfig) -> Result<ReturnsData, CliError> {
    match &c.returns_path {
        Some(p) => {
            let f = File::open(p).map_err(|e| CliError::Ingestion(format!("{p}: {e}")))?;
            let data = bench::read_returns_csv(f, &c.passthrough_columns)
                .map_err(|e| CliError::Ingestion(format!("{p}: {e}")))?;
            for name in &c.passthrough_columns {
                if !data.passthrough.iter().any(|(n, _)| n == name) {
                    return Err(CliError::Ingestion(format!("{p}: passthrough column '{name}' not found")));
                }
            }
            Ok(data)
        }
        None => Ok(synthetic_returns(c.synthetic.rows, c.synthetic.assets, c.synthetic.seed)),
    }
}

/// Default prior when none is configured: the DGP's family, else NIW for
/// vector data and Normal-Gamma for scalars.
fn infer_prior(explicit: &Option<ConjugatePosterior>, source: &config::DataSource, dim: usize) -> ConjugatePosterior {
    if let Some(p) = explicit {
        return p.clone();
    }
    let family = match &source.dgp {
        Some(d) => d.default_family(),
        None if dim > 1 => Family::NormalInverseWishart,
        None => Family::NormalGamma,
    };
    ConjugatePosterior::default_prior(family, dim)
}

fn check_dim(prior: &ConjugatePosterior, data: &Samples) -> Result<(), CliError> {
    if prior.dim() != data.dim() {
        return Err(CliError::Config(format!(
            "prior has dimension {} but the observations have {}",
            prior.dim(),
            data.dim()
        )));
    }
    Ok(())
}

fn cross_validate(c: &CvConfig) -> Result<bench::CvResult, CliError> {
    let data = c.observations.load(c.seed)?.expect("validated: observations present");
    let prior = infer_prior(&c.prior, &c.observations, data.dim());
    check_dim(&prior, &data)?;
    let setup = CvSetup {
        prior,
        loss: c.loss,
        set: FeasibleSet::cube(data.dim(), c.box_bounds.0, c.box_bounds.1),
        m: c.m_samples,
        solver: c.solver.clone(),
        seed: c.seed,
    };
    Ok(crossval_epsilon(&data, c.method, &c.epsilon, c.folds, c.selection, &setup)?)
}

struct ToleranceRow {
    family: &'static str,
    n_obs: u64,
    eps_min: f64,
    plugin: Option<f64>,
    eps_star_pe: Option<f64>,
    eps_star_pp_upper: Option<f64>,
}

fn tolerances(c: &TolerancesConfig) -> Result<ToleranceRow, CliError> {
    let data = c.observations.load(c.seed)?;
    if let Some(d) = &data {
        if d.dim() != c.posterior.dim() {
            return Err(CliError::Config(format!(
                "posterior has dimension {} but the observations have {}",
                c.posterior.dim(),
                d.dim()
            )));
        }
    }
    let post = match (&data, c.update) {
        (Some(d), true) => c.posterior.update(d)?,
        _ => c.posterior.clone(),
    };
    let plugin = match &data {
        Some(d) => Some(post.eps_star_pe_plugin(d)?),
        None => None,
    };
    let (pe, pp) = match &c.truth {
        Some(t) => (Some(post.eps_star_pe(t)?), Some(post.eps_star_pp_upper(t)?)),
        None => (None, None),
    };
    Ok(ToleranceRow {
        family: post.family().name(),
        n_obs: post.n_obs as u64,
        eps_min: post.eps_min()?,
        plugin,
        eps_star_pe: pe,
        eps_star_pp_upper: pp,
    })
}

fn write_tolerances<W: std::io::Write>(w: W, row: &ToleranceRow) -> Result<(), CliError> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut w = csv::Writer::from_writer(w);
    let io = |e: csv::Error| CliError::Runtime(format!("csv: {e}"));
    w.write_record(["family", "n_obs", "eps_min", "eps_star_pe_plugin", "eps_star_pe", "eps_star_pp_upper"])
        .map_err(io)?;
    w.write_record([
        row.family.to_string(),
        row.n_obs.to_string(),
        format!("{}", row.eps_min),
        opt(row.plugin),
        opt(row.eps_star_pe),
        opt(row.eps_star_pp_upper),
    ])
    .map_err(io)?;
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}

fn solve_one(c: &SolveOneConfig) -> Result<Value, CliError> {
    let data = c.observations.load(c.seed)?;
    let dim = match (&c.prior, &data) {
        (Some(p), _) => p.dim(),
        (None, Some(d)) => d.dim(),
        (None, None) => unreachable!("validated: prior or observations present"),
    };
    let prior = infer_prior(&c.prior, &c.observations, dim);
    let posterior = match &data {
        Some(d) => {
            check_dim(&prior, d)?;
            prior.update(d)?
        }
        None => prior,
    };
    let train = data.unwrap_or_else(|| Samples::with_capacity(dim, 0));
    let set = c.set.clone().unwrap_or_else(|| FeasibleSet::cube(dim, 0.0, 100.0));
    if set.dim() != dim {
        return Err(CliError::Config(format!("set has dimension {} but the problem has {dim}", set.dim())));
    }
    let ctx = SolveContext {
        posterior: &posterior,
        train: &train,
        loss: c.loss,
        set: &set,
        m: c.m_samples,
        solver: &c.solver,
    };
    let mut rng = bench::cell_rng(c.seed, "solve-one");
    let eps_min = posterior.eps_min()?;
    match solve_method(c.method, &ctx, c.epsilon, &mut rng)? {
        Some(sol) => Ok(json!({
            "method": c.method,
            "epsilon": c.epsilon,
            "eps_min": eps_min,
            "posterior": posterior,
            "solution": sol,
        })),
        None => Err(CliError::Config(format!(
            "epsilon = {} is below the minimum radius {eps_min} for {}",
            c.epsilon, c.method
        ))),
    }
}
