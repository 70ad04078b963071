//! Acceptance suite: one pass/fail line per criterion. Runs without the
//! libtest harness; exits non-zero if any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use cdgp::conditional::{uniform_grid, Hyperdata, HyperdataNet};
use cdgp::experiments::{
    ingest_csv, run_experiment, ExperimentConfig, ExperimentOutput, ModelKind,
};
use cdgp::moments::{
    batch_estimate, fourth_moment, heavy_tail_gap, heavy_tail_grid, mc_sample_composite,
    mc_second_moments, FourthMomentInput, DEFAULT_BATCHES,
};
use cdgp::regression::chol_jitter;
use cdgp::training::grad_check;
use cdgp::{
    column, moment_matched_se, pair_moments, propagate_stack, se_of_se_kernel, taylor_limit_kernel,
    ConditionedLayer, KernelSpec, LayerStack, PairMoment,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    summary: String,
}

fn outcome(passed: bool, summary: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        summary: summary.into(),
    }
}

fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn conditioned(
    rng: &mut ChaCha8Rng,
    m: usize,
    lo: f64,
    hi: f64,
    s: f64,
    l: f64,
) -> ConditionedLayer {
    let z = uniform_grid(lo, hi, m);
    let u = DVector::from_fn(m, |_, _| rng.gen_range(-1.5..1.5));
    ConditionedLayer::new(KernelSpec::se(s, l), Hyperdata::new(z, u).unwrap())
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    column(&(0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>())
}

/// Sampling oracle for the two-layer effective kernel.
fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut misses, mut entries, mut worst) = (0, 0, 0.0f64);
    for s in 0..20 {
        let h: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..3.0)).collect();
        let layer = conditioned(&mut rng, 8, -2.0, 2.0, h[0], h[1]);
        let stack = LayerStack::new(vec![layer], KernelSpec::se(h[2], h[3]), 0.1).unwrap();
        let x = random_points(&mut rng, 5, -2.5, 2.5);
        let gram = propagate_stack(&stack, &x).unwrap().gram;
        let samples = mc_sample_composite(&stack, &x, 200_000, 1000 + s).unwrap();
        let (est, se) = mc_second_moments(&samples, DEFAULT_BATCHES);
        for i in 0..5 {
            for j in i..5 {
                entries += 1;
                let err = (gram[(i, j)] - est[(i, j)]).abs();
                worst = worst.max(err / se[(i, j)]);
                if err > 3.0 * se[(i, j)] + 1e-12 * gram[(i, i)] {
                    misses += 1;
                }
            }
        }
    }
    outcome(
        misses == 0,
        format!(
            "{misses}/{entries} Gram entries outside 3 MC standard errors (max |z| {worst:.2})"
        ),
    )
}

/// SE-of-SE closed form against the matched kernel of prior moments.
fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let h: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..3.0)).collect();
        let x = random_points(&mut rng, 2, -3.0, 3.0);
        let layer = ConditionedLayer::unconditioned(KernelSpec::se(h[0], h[1]), 1);
        let pm = pair_moments(&layer, &x).unwrap();
        for (i, j) in [(0, 1), (0, 0)] {
            let closed =
                se_of_se_kernel(&[x[(i, 0)]], &[x[(j, 0)]], h[0], h[1], h[2], h[3]).unwrap();
            let matched = moment_matched_se(&pm.pair(i, j), h[2], h[3]);
            worst = worst.max((closed - matched).abs());
        }
    }
    outcome(
        worst <= 1e-12,
        format!("max |difference| {worst:.2e} over 1000 draws"),
    )
}

/// Second-order convergence of the first-order expansion.
fn criterion_3() -> Outcome {
    let (sigma, ell) = (0.9, 1.3);
    let mut ratios = Vec::new();
    for gap in [0.0, 0.5 * ell] {
        let dev = |r: f64| {
            let pm = PairMoment::from_gap(gap, r * ell * ell);
            (taylor_limit_kernel(&pm, sigma, ell) - moment_matched_se(&pm, sigma, ell)).abs()
        };
        let mut r = 1e-2;
        for _ in 0..3 {
            ratios.push(dev(r) / dev(r / 2.0));
            r /= 2.0;
        }
    }
    let ok = ratios.iter().all(|q| (3.5..=4.5).contains(q));
    let list: Vec<String> = ratios.iter().map(|q| format!("{q:.3}")).collect();
    outcome(
        ok,
        format!("deviation ratios per halving [{}]", list.join(", ")),
    )
}

/// Fourth moment against sampling, the deterministic-input limit and the
/// heavy-tail grid.
fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_z = 0.0f64;
    let mut mc_fail = 0;
    for inst in 0..10 {
        let (s1, l1) = (rng.gen_range(0.5..1.5), rng.gen_range(0.3..1.0));
        let layer = conditioned(&mut rng, 5, -1.5, 1.5, s1, l1);
        let (s2, l2) = (rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5));
        let x = random_points(&mut rng, 4, -1.5, 1.5);
        let pm = pair_moments(&layer, &x).unwrap();
        let closed = fourth_moment(&FourthMomentInput {
            indices: [0, 1, 2, 3],
            means: pm.means(),
            cov: pm.cov(),
            sigma: s2,
            ell: l2,
        })
        .unwrap();
        let stack = LayerStack::new(vec![layer], KernelSpec::se(s2, l2), 0.1).unwrap();
        let samples = mc_sample_composite(&stack, &x, 500_000, 40 + inst).unwrap();
        let prods: Vec<f64> = samples.row_iter().map(|r| r.iter().product()).collect();
        let e = batch_estimate(&prods, DEFAULT_BATCHES);
        let z = (closed - e.mean).abs() / e.std_error;
        worst_z = worst_z.max(z);
        if z > 4.0 {
            mc_fail += 1;
        }
    }
    let mut isserlis_err = 0.0f64;
    for _ in 0..50 {
        let means = DVector::<f64>::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
        let (s, l): (f64, f64) = (rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0));
        let k = |a: usize, b: usize| s * s * (-(means[a] - means[b]).powi(2) / (2.0 * l * l)).exp();
        let isserlis = k(0, 1) * k(2, 3) + k(0, 2) * k(1, 3) + k(0, 3) * k(1, 2);
        let closed = fourth_moment(&FourthMomentInput {
            indices: [0, 1, 2, 3],
            means: &means,
            cov: &DMatrix::zeros(4, 4),
            sigma: s,
            ell: l,
        })
        .unwrap();
        isserlis_err = isserlis_err.max((closed - isserlis).abs());
    }
    let grid = heavy_tail_grid(21);
    let min_gap = grid.iter().map(|g| g.2).fold(f64::INFINITY, f64::min);
    let unit_err = (heavy_tail_gap(0.0, 1.0) - (1.0 / 3f64.sqrt() - 0.5)).abs();
    let ok = mc_fail == 0
        && isserlis_err <= 1e-10
        && min_gap >= 0.0
        && grid.len() == 441
        && unit_err <= 1e-12;
    outcome(
        ok,
        format!(
            "MC: {mc_fail}/10 outside 4 SE (max |z| {worst_z:.2}); Isserlis err {isserlis_err:.1e}; \
             min gap {min_gap:.2e} on {} points; gap(0,1) err {unit_err:.1e}",
            grid.len()
        ),
    )
}

fn net_layer(rng: &mut ChaCha8Rng, m: usize, lo: f64, hi: f64, s: f64, l: f64) -> ConditionedLayer {
    let z = uniform_grid(lo, hi, m);
    let (shift, scale) = HyperdataNet::range_normalization(&z);
    let net = HyperdataNet::random(1, 5, 0.5, rng)
        .with_normalization(shift, scale)
        .unwrap();
    ConditionedLayer::with_net(KernelSpec::se(s, l), z, net).unwrap()
}

/// Analytic objective gradients against central differences.
fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_points(&mut rng, 10, -1.0, 1.0);
    let y = DVector::from_fn(10, |i, _| {
        (2.5 * x[(i, 0)]).sin() + 0.1 * rng.gen_range(-1.0..1.0)
    });
    let two_u = LayerStack::new(
        vec![conditioned(&mut rng, 5, -1.0, 1.0, 0.8, 0.5)],
        KernelSpec::se(1.1, 0.7),
        0.05,
    )
    .unwrap();
    let two_net = LayerStack::new(
        vec![net_layer(&mut rng, 5, -1.0, 1.0, 0.8, 0.5)],
        KernelSpec::se(1.1, 0.7),
        0.05,
    )
    .unwrap();
    let three = LayerStack::new(
        vec![
            net_layer(&mut rng, 5, -1.0, 1.0, 0.9, 0.5),
            conditioned(&mut rng, 4, -1.5, 1.5, 1.0, 0.8),
        ],
        KernelSpec::se(1.0, 0.8),
        0.05,
    )
    .unwrap();
    let mut parts = Vec::new();
    let mut ok = true;
    for (label, stack, tol) in [
        ("L=2 u", &two_u, 1e-4),
        ("L=2 net", &two_net, 1e-4),
        ("L=3", &three, 1e-3),
    ] {
        let report = grad_check(stack, &x, &y, 1e-5).unwrap();
        let worst = report.max_rel_error();
        ok &= worst <= tol && !report.entries.is_empty();
        parts.push(format!(
            "{label}: {} params, max rel err {worst:.1e}",
            report.entries.len()
        ));
    }
    outcome(ok, parts.join("; "))
}

/// Effective Grams of random deep stacks factorize with little jitter.
fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst, mut failures) = (0.0f64, 0);
    for k in 0..100 {
        let n = rng.gen_range(10..=60);
        let m1 = rng.gen_range(3..=20);
        let sp1 = 4.0 / (m1 - 1) as f64;
        let l1 = rng.gen_range(0.5..1.5) * sp1;
        let s1 = rng.gen_range(0.3..2.0);
        let mut layers = vec![conditioned(&mut rng, m1, -2.0, 2.0, s1, l1)];
        if k % 2 == 1 {
            let m2 = rng.gen_range(3..=10);
            let l2 = rng.gen_range(0.5..1.5) * 6.0 / (m2 - 1) as f64;
            let s2 = rng.gen_range(0.3..2.0);
            layers.push(conditioned(&mut rng, m2, -3.0, 3.0, s2, l2));
        }
        let exposed = KernelSpec::se(rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0));
        let stack = LayerStack::new(layers, exposed, 0.01).unwrap();
        let x = random_points(&mut rng, n, -2.5, 2.5);
        let gram = propagate_stack(&stack, &x).unwrap().gram;
        match chol_jitter(&gram) {
            Ok(c) if c.jitter <= 1e-8 => worst = worst.max(c.jitter),
            _ => failures += 1,
        }
    }
    outcome(
        failures == 0,
        format!("{failures}/100 need jitter > 1e-8 (max used {worst:.0e})"),
    )
}

fn run(model: ModelKind, data: &str, config: &str) -> ExperimentOutput {
    let mut cfg = ExperimentConfig::load(&repo_path(config)).unwrap();
    cfg.model = model;
    let ds = ingest_csv(&repo_path(data)).unwrap().dataset;
    run_experiment(&cfg, &ds).unwrap_or_else(|e| panic!("{model} on {data}: {e}"))
}

fn band(value: f64, target: f64) -> String {
    let (lo, hi) = if target >= 0.0 {
        (0.7 * target, 1.3 * target)
    } else {
        (1.3 * target, 0.7 * target)
    };
    let tag = if (lo..=hi).contains(&value) {
        "in band"
    } else {
        "outside band"
    };
    format!("{value:.1} ({tag} {target}±30%)")
}

/// Fitted CO₂ log marginal likelihoods.
/// Also returns the sese results JSON for the rerun check.
fn criterion_7() -> (Outcome, String) {
    let logml = |m| run(m, "data/co2.csv", "configs/co2.toml").results.logml;
    let se = logml(ModelKind::Se);
    let mix = logml(ModelKind::Mixture);
    let sese_out = run(ModelKind::Sese, "data/co2.csv", "configs/co2.toml");
    let sese = sese_out.results.logml;
    let cdgp2 = logml(ModelKind::Cdgp2);
    let ok = mix > sese && sese > se && cdgp2 >= sese - 5.0;
    let o = outcome(
        ok,
        format!(
            "se {}, mixture {}, sese {}, cdgp2 {:.1} (needs mixture > sese > se, cdgp2 >= sese - 5)",
            band(se, 144.0),
            band(mix, 459.0),
            band(sese, 338.0),
            cdgp2
        ),
    );
    (o, sese_out.results_json(false).unwrap())
}

/// Number of groups of restart optima separated by more than one nat.
fn distinct_optima(logmls: &[f64]) -> usize {
    let mut v: Vec<f64> = logmls.iter().copied().filter(|l| l.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return 0;
    }
    1 + v.windows(2).filter(|w| w[1] - w[0] > 1.0).count()
}

/// Share of grid points away from hyperdata where the latent std exceeds
/// 0.01, for the first latent layer.
fn uncollapsed_share(out: &ExperimentOutput) -> (f64, usize) {
    let layer = &out.fit.stack.intermediate()[0];
    let z: Vec<f64> = layer.hyperdata().z().iter().copied().collect();
    let spacing = (z[z.len() - 1] - z[0]) / (z.len() - 1) as f64;
    let profile = &out.latents[0];
    let tr = out.results.transform;
    let away: Vec<usize> = (0..out.grid_t.len())
        .filter(|&i| {
            let x = tr.x(out.grid_t[i]);
            z.iter().all(|zz| (x - zz).abs() >= 0.25 * spacing)
        })
        .collect();
    let wide = away.iter().filter(|&&i| profile.std[i] > 0.01).count();
    (wide as f64 / away.len().max(1) as f64, away.len())
}

/// Airline ordering, restart diversity and latent uncertainty. Also returns
/// the se and cdgp2 results JSON for the rerun check.
fn criteria_8_9() -> (Outcome, Outcome, [String; 2]) {
    let logml = |m| {
        run(m, "data/airline.csv", "configs/airline.toml")
            .results
            .logml
    };
    let se_out = run(ModelKind::Se, "data/airline.csv", "configs/airline.toml");
    let se = se_out.results.logml;
    let mix = logml(ModelKind::Mixture);
    let sese = logml(ModelKind::Sese);
    let cd = run(ModelKind::Cdgp2, "data/airline.csv", "configs/airline.toml");
    let cdgp2 = cd.results.logml;
    let restart_logmls: Vec<f64> = cd.results.restarts.iter().map(|r| r.logml).collect();
    let optima = distinct_optima(&restart_logmls);
    let ok8 = mix > cdgp2 && cdgp2 > sese && sese > se && optima >= 2;
    let list: Vec<String> = restart_logmls.iter().map(|l| format!("{l:.1}")).collect();
    let c8 = outcome(
        ok8,
        format!(
            "se {}, mixture {}, sese {}, cdgp2 {}; cdgp2 restarts [{}] give {optima} distinct optima",
            band(se, -11.7),
            band(mix, 81.9),
            band(sese, 20.9),
            band(cdgp2, 28.5),
            list.join(", ")
        ),
    );
    let (share, away) = uncollapsed_share(&cd);
    let c9 = outcome(
        share >= 0.25,
        format!(
            "latent std > 0.01 at {:.0}% of {away} grid points away from hyperdata",
            100.0 * share
        ),
    );
    let json = [
        se_out.results_json(false).unwrap(),
        cd.results_json(false).unwrap(),
    ];
    (c8, c9, json)
}

/// Byte-identical results on rerun, against the first runs' JSON.
fn criterion_10(first: [String; 3]) -> Outcome {
    let mut same = Vec::new();
    for ((m, data, cfg), a) in [
        (ModelKind::Se, "data/airline.csv", "configs/airline.toml"),
        (ModelKind::Cdgp2, "data/airline.csv", "configs/airline.toml"),
        (ModelKind::Sese, "data/co2.csv", "configs/co2.toml"),
    ]
    .into_iter()
    .zip(first)
    {
        let b = run(m, data, cfg).results_json(false).unwrap();
        same.push((
            format!(
                "{m}/{}",
                data.trim_start_matches("data/").trim_end_matches(".csv")
            ),
            a == b,
        ));
    }
    let list: Vec<String> = same
        .iter()
        .map(|(n, s)| format!("{n} {}", if *s { "identical" } else { "DIFFERS" }))
        .collect();
    outcome(same.iter().all(|s| s.1), list.join(", "))
}

fn report(index: usize, name: &str, start: Instant, o: &Outcome) -> bool {
    println!(
        "criterion {index:>2} [{}] {name}: {} ({:.1} s)",
        if o.passed { "PASS" } else { "FAIL" },
        o.summary,
        start.elapsed().as_secs_f64()
    );
    o.passed
}

fn main() -> ExitCode {
    let mut all = true;
    type Check = (usize, &'static str, fn() -> Outcome);
    let simple: [Check; 6] = [
        (1, "moment-matching oracle", criterion_1),
        (2, "SE-of-SE identity", criterion_2),
        (3, "expansion convergence", criterion_3),
        (4, "fourth moment and heavy tail", criterion_4),
        (5, "gradient suite", criterion_5),
        (6, "PSD effective Grams", criterion_6),
    ];
    for (i, name, f) in simple {
        let t = Instant::now();
        all &= report(i, name, t, &f());
    }
    let t = Instant::now();
    let (c7, sese_json) = criterion_7();
    all &= report(7, "CO2 ordering", t, &c7);
    let t = Instant::now();
    let (c8, c9, [se_json, cdgp2_json]) = criteria_8_9();
    all &= report(8, "airline ordering", t, &c8);
    all &= report(9, "no latent collapse", t, &c9);
    let t = Instant::now();
    all &= report(
        10,
        "determinism",
        t,
        &criterion_10([se_json, cdgp2_json, sese_json]),
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
