use drobas::bench::{
    oos_summary, read_results_csv, run_newsvendor, write_results_csv, DgpSpec, Method, NewsvendorConfig,
};
use drobas::duals::{inner_gamma_opt, LossSpec, SaaDualProblem};
use drobas::solver::{solve_drobas, FeasibleSet, SolveConfig, Variant};
use drobas::{ConjugatePosterior, Samples};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(dgp: DgpSpec) -> NewsvendorConfig {
    NewsvendorConfig {
        dgp,
        methods: Method::ALL.to_vec(),
        epsilon: vec![0.05, 0.3, 1.0],
        m_values: vec![16],
        replicates: 3,
        ..NewsvendorConfig::standard()
    }
}

#[test]
fn every_dgp_runs_all_methods() {
    for dgp in [
        DgpSpec::Exponential { rate: 0.05 },
        DgpSpec::Normal { mean: 25.0, sd: 10.0 },
        DgpSpec::TruncatedNormal {
            mean: 10.0,
            sd: 10.0,
            lower: 0.0,
        },
        DgpSpec::ContaminatedExponential {
            rate: 0.05,
            contam_mean: 80.0,
            contam_sd: 5.0,
            contam_frac: 0.2,
        },
        DgpSpec::default_mvn(),
    ] {
        let cfg = small(dgp.clone());
        let recs = run_newsvendor(&cfg).unwrap();
        assert_eq!(recs.len(), cfg.cardinality(), "{dgp:?}");
        for r in recs.iter().filter(|r| !r.skipped) {
            assert_eq!(r.x_star.len(), dgp.dim());
            assert!(cfg.feasible_set().contains(&r.x_star, 1e-9));
        }
        assert!(recs.iter().filter(|r| r.method != Method::DroBasPe).all(|r| !r.skipped), "{dgp:?}");
        oos_summary(&recs).unwrap();
    }
}

#[test]
fn rerun_is_identical_through_csv() {
    let cfg = small(DgpSpec::Exponential { rate: 0.05 });
    let write = || {
        let recs: Vec<_> = run_newsvendor(&cfg).unwrap().iter().map(|r| r.without_timings()).collect();
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &recs).unwrap();
        buf
    };
    let a = write();
    assert_eq!(a, write());
    assert_eq!(read_results_csv(a.as_slice()).unwrap().len(), cfg.cardinality());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn solved_objective_monotone_in_radius(seed in 0u64..10_000, e1 in 0.0f64..1.0, e2 in 0.0f64..1.0) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let post = ConjugatePosterior::gamma_exponential(21.0, 400.0).unwrap();
        let loss = LossSpec::Newsvendor { h: 3.0, b: 8.0 };
        let set = FeasibleSet::cube(1, 0.0, 100.0);
        let cfg = SolveConfig::default();
        let solve = |e: f64| solve_drobas(&post, &loss, &set, e, Variant::Pp, 40, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (a, b) = (solve(lo), solve(hi));
        prop_assert!(b.objective >= a.objective - 1e-7 * (1.0 + a.objective.abs()));
    }

    #[test]
    fn inner_value_between_mean_and_max(v in prop::collection::vec(-50.0f64..50.0, 1..40), eps in 0.0f64..3.0) {
        let p = SaaDualProblem::new(eps, Samples::from_scalars(&v), LossSpec::LinearPortfolio).unwrap();
        let inner = inner_gamma_opt(&p, &[-1.0]).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(inner.value >= mean - 1e-9 * (1.0 + mean.abs()));
        prop_assert!(inner.value <= max + 1e-9 * (1.0 + max.abs()));
    }
}
