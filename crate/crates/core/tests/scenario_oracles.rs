//! Scenario truths and fitted pipelines checked against independent
//! brute-force, quadrature and Monte-Carlo computations.

use quarantine_core::baselines::average_quarantine_duration;
use quarantine_core::distributions::ContinuousLaw;
use quarantine_core::incubation::{fit_incubation_model, loglik};
use quarantine_core::numeric::{adaptive_simpson, bisect_boundary};
use quarantine_core::rule_solver::{c_star, escape_probability, InfectedMass};
use quarantine_core::simulation::{
    generate_dataset, run_pipeline, run_replications, theoretical_optimum, PipelineOptions, ScenarioSpec, SIMULATION_AGES,
};
use quarantine_core::{ConditionalIncubationModel, ConditionalLaw, FeaturePoint, FitOptions, Likelihood, Observation, RatioCurves};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenario(id: u8) -> ScenarioSpec {
    ScenarioSpec::new(id).unwrap()
}

fn truth_quantile(law: &impl ContinuousLaw, p: f64) -> f64 {
    bisect_boundary(0.0, 200.0, |y| law.cdf(y) < p, 1e-10, 200)
}

#[test]
fn smallest_peak_matches_grid_search() {
    let spec = scenario(1);
    let truth = spec.truth();
    let p1 = spec.infected_grid_density().unwrap();
    let p0 = spec.uninfected_grid_density().unwrap();
    let curves = RatioCurves::build(&truth, &p1, &p0, None, 60.0).unwrap();
    let solver = c_star(&curves).unwrap();

    let brute = SIMULATION_AGES
        .ages()
        .map(|a| {
            let x = FeaturePoint::age_only(a);
            let factor = p1.weight(&x) / p0.weight(&x);
            (1..=60_000).map(|k| factor * truth.pdf(&x, k as f64 * 1e-3)).fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min);
    assert!((solver - brute).abs() <= 1e-4 * brute, "solver {solver} brute {brute}");
}

#[test]
fn escape_matches_monte_carlo() {
    let spec = scenario(1);
    let truth = spec.truth();
    let p1 = spec.infected_grid_density().unwrap();
    let p0 = spec.uninfected_grid_density().unwrap();
    let curves = RatioCurves::build(&truth, &p1, &p0, None, 60.0).unwrap();
    let mass = InfectedMass::from_weights(&curves, &p1).unwrap();
    let c = 0.5 * curves.c_star();
    let analytic = escape_probability(c, &curves, &mass).unwrap();

    let durations = curves.durations(c).unwrap();
    let ages: Vec<u32> = p1.support().iter().map(|x| x.age).collect();
    let pick = WeightedIndex::new(p1.weights()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 1_000_000;
    let escapes = (0..n)
        .filter(|_| {
            let i = pick.sample(&mut rng);
            truth.at(ages[i] as f64).sample(&mut rng) > durations[i]
        })
        .count();
    let mc = escapes as f64 / n as f64;
    let se = (mc * (1.0 - mc) / n as f64).sqrt();
    assert!((mc - analytic).abs() <= 3.0 * se, "analytic {analytic} monte carlo {mc} se {se}");
}

#[test]
fn truth_based_rule_reproduces_optimal_aqd() {
    let spec = scenario(1);
    let (rule, solution) = theoretical_optimum(&spec, 0.05, 60.0).unwrap();
    let aqd = average_quarantine_duration(&rule, &spec.uninfected_grid_density().unwrap(), true).unwrap();
    assert!((aqd - 9.33).abs() <= 0.1, "{aqd}");
    assert!((solution.achieved_escape - 0.05).abs() <= 1e-6);
    assert!(solution.condition_violations.is_empty());
}

#[test]
fn mixture_truth_violates_unimodality() {
    let spec = scenario(4);
    let truth = spec.truth();
    let curves = RatioCurves::build(&truth, &spec.infected_grid_density().unwrap(), &spec.uninfected_grid_density().unwrap(), None, 60.0)
        .unwrap();
    assert!(!curves.condition_violations().is_empty());
    let (_, solution) = theoretical_optimum(&spec, 0.05, 60.0).unwrap();
    assert!(!solution.condition_violations.is_empty());
}

#[test]
fn fitted_escape_meets_target_before_rounding() {
    let r = run_pipeline(&scenario(1), 10_000, 0.05, 17, &PipelineOptions::default()).unwrap();
    assert!(!r.solution.fallback_used);
    assert!((0.049..=0.051).contains(&r.solution.achieved_escape), "{}", r.solution.achieved_escape);
}

/// Largest |fitted − true| conditional 0.95 quantile over `ages`, fitting
/// about 10^4 infected records out of 2·10^5 individuals.
fn worst_quantile_gaps(seed: u64) -> (f64, f64) {
    let spec = scenario(1);
    let truth = spec.truth();
    let records = generate_dataset(&spec, 200_000, seed).unwrap();
    let obs: Vec<Observation> = records
        .iter()
        .filter_map(|r| r.incubation.map(|y| Observation::new(r.age_years() as f64, y.ceil().max(1.0))))
        .collect();
    let fit = fit_incubation_model(&obs, &FitOptions { age_support: SIMULATION_AGES, ..FitOptions::default() }).unwrap();
    let gap = |age: u32| {
        let fitted = fit.model.conditional_quantile(age as f64, 0.95).unwrap();
        (fitted - truth_quantile(&truth.at(age as f64), 0.95)).abs()
    };
    let all = SIMULATION_AGES.ages().map(gap).fold(0.0, f64::max);
    let interior = (20..=75).map(gap).fold(0.0, f64::max);
    (all, interior)
}

#[test]
fn working_model_recovers_conditional_quantiles() {
    let gaps: Vec<(f64, f64)> = (0..20).map(worst_quantile_gaps).collect();
    let all_ages_ok = gaps.iter().filter(|(all, _)| *all <= 0.5).count();
    assert!(gaps.iter().all(|(_, interior)| *interior <= 0.5), "{gaps:?}");
    assert!(all_ages_ok >= 12, "{all_ages_ok}/20 seeds within 0.5 day at every age: {gaps:?}");
}

/// Exact model of Scenario 1 within the quadratic-scale family.
fn scenario_one_model() -> ConditionalIncubationModel {
    // 4.5 + 0.0025(x - 30)^2 expanded around zero.
    ConditionalIncubationModel::new(1.5, [6.75, -0.15, 0.0025], SIMULATION_AGES).unwrap()
}

#[test]
fn truth_outscores_perturbed_parameters() {
    let truth = scenario_one_model();
    let spec = scenario(1);
    let ages = spec.infected_ages;
    let mut wins = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let obs: Vec<Observation> = (0..10_000)
            .map(|_| {
                let age = (ages.sample(&mut rng) + 0.5).floor();
                let y = truth.sample(age, &mut rng).unwrap();
                Observation::new(age, y.ceil().max(1.0))
            })
            .collect();
        let at_truth = loglik(&truth, Likelihood::Ceiled, &obs).unwrap();
        let mut best = true;
        for i in 0..4 {
            for factor in [0.8, 1.2] {
                let mut shape = truth.shape;
                let mut gamma = truth.gamma;
                if i == 0 {
                    shape *= factor;
                } else {
                    gamma[i - 1] *= factor;
                }
                let Ok(perturbed) = ConditionalIncubationModel::new(shape, gamma, SIMULATION_AGES) else {
                    continue;
                };
                best &= loglik(&perturbed, Likelihood::Ceiled, &obs).unwrap() < at_truth;
            }
        }
        wins += best as usize;
    }
    assert!(wins >= 95, "{wins}/100");
}

#[test]
fn scenario_one_infected_ages_follow_truncated_normal() {
    let spec = scenario(1);
    let records = generate_dataset(&spec, 400_000, 8).unwrap();
    let ages: Vec<f64> = records.iter().filter(|r| r.infected).map(|r| r.age).collect();
    let mean = ages.iter().sum::<f64>() / ages.len() as f64;
    let law = spec.infected_ages;
    let mass = adaptive_simpson(&|a| law.pdf(a), 10.0, 80.0, 1e-12, 50);
    let exact = adaptive_simpson(&|a| a * law.pdf(a), 10.0, 80.0, 1e-12, 50) / mass;
    let sd = (adaptive_simpson(&|a| (a - exact).powi(2) * law.pdf(a), 10.0, 80.0, 1e-12, 50) / mass).sqrt();
    assert!((mean - exact).abs() <= 4.0 * sd / (ages.len() as f64).sqrt(), "{mean} vs {exact}");
}

#[test]
fn scenario_four_incubation_passes_ks() {
    let spec = scenario(4);
    let truth = spec.truth();
    let law = spec.infected_ages;
    let records = generate_dataset(&spec, 200_000, 21).unwrap();
    let mut ys: Vec<f64> = records.iter().filter_map(|r| r.incubation).collect();
    ys.sort_by(|a, b| a.total_cmp(b));
    let mass = adaptive_simpson(&|a| law.pdf(a), 10.0, 80.0, 1e-12, 50);
    // Marginal over the infected age law, since sampled ages are continuous.
    let marginal_cdf = |y: f64| adaptive_simpson(&|a| law.pdf(a) * truth.at(a).cdf(y), 10.0, 80.0, 1e-10, 40) / mass;
    let n = ys.len() as f64;
    let mut d: f64 = 0.0;
    for (i, y) in ys.iter().enumerate().step_by(7) {
        let f = marginal_cdf(*y);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    // Asymptotic critical value at 0.001.
    let critical = 1.9495 / n.sqrt();
    assert!(d < critical, "D = {d}, critical {critical}");
}

#[test]
fn estimated_durations_converge_to_truth_based_rule() {
    let spec = scenario(1);
    let (theory, _) = theoretical_optimum(&spec, 0.05, 60.0).unwrap();
    let ages = [20, 40, 60];
    let median_error = |n: usize| {
        let mut errors: Vec<f64> = (0..50u64)
            .filter_map(|seed| run_pipeline(&spec, n, 0.05, 500 + seed, &PipelineOptions::default()).ok())
            .flat_map(|r| {
                let rule = r.rules["optimal"].clone();
                ages.map(|a| {
                    let x = FeaturePoint::age_only(a);
                    (rule.durations[&x] - theory.durations[&x]).abs()
                })
            })
            .collect();
        assert!(errors.len() >= 3 * 40, "too many failed fits at n = {n}");
        errors.sort_by(|a, b| a.total_cmp(b));
        errors[errors.len() / 2]
    };
    let small = median_error(1_000);
    let large = median_error(100_000);
    assert!(large < small, "n=1e3: {small}, n=1e5: {large}");
}

#[test]
fn base_seeds_agree_within_monte_carlo_error() {
    let spec = scenario(1);
    let options = PipelineOptions::default();
    let a = run_replications(&spec, 10_000, 0.05, 60, 1, &options).unwrap();
    let b = run_replications(&spec, 10_000, 0.05, 60, 1_000_000, &options).unwrap();
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        let aqd_se = (ra.aqd_se.powi(2) + rb.aqd_se.powi(2)).sqrt();
        let ep_se = (ra.ep_se.powi(2) + rb.ep_se.powi(2)).sqrt();
        assert!((ra.aqd - rb.aqd).abs() <= 4.0 * aqd_se, "{}: {} vs {}", ra.method, ra.aqd, rb.aqd);
        assert!((ra.ep - rb.ep).abs() <= 4.0 * ep_se, "{}: {} vs {}", ra.method, ra.ep, rb.ep);
    }
}

#[test]
fn correctly_specified_methods_hold_the_escape_band() {
    let summary = run_replications(&scenario(1), 10_000, 0.05, 60, 77, &PipelineOptions::default()).unwrap();
    for row in &summary.rows {
        assert!((0.04..=0.06).contains(&row.ep), "{}: {}", row.method, row.ep);
    }
}

#[test]
fn misspecified_conditional_quantile_is_conservative() {
    let summary = run_replications(&scenario(4), 10_000, 0.05, 60, 77, &PipelineOptions::default()).unwrap();
    let row = summary.rows.iter().find(|r| r.method == "conditional_quantile").unwrap();
    assert!((row.ep - 0.030).abs() <= 0.01, "{}", row.ep);
}

#[test]
fn continuous_likelihood_fits_exact_times() {
    let truth = scenario_one_model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let obs: Vec<Observation> = (0..20_000)
        .map(|_| {
            let age = rng.random_range(10..=80) as f64;
            Observation::new(age, truth.sample(age, &mut rng).unwrap())
        })
        .collect();
    let fit = fit_incubation_model(
        &obs,
        &FitOptions { likelihood: Likelihood::Continuous, age_support: SIMULATION_AGES, ..FitOptions::default() },
    )
    .unwrap();
    assert!(fit.converged);
    for age in [10.0, 30.0, 55.0, 80.0] {
        let gap = (fit.model.conditional_quantile(age, 0.5).unwrap() - truth.conditional_quantile(age, 0.5).unwrap()).abs();
        assert!(gap < 0.3, "age {age}: {gap}");
    }
}
