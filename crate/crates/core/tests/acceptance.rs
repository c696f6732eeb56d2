//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any fails.

mod common;

use std::time::{Duration, Instant};

use common::*;
use gama::experiment::{run_ablation, run_seed, AblationReport, Component, ExperimentConfig, SeedRun};
use gama::geometry::{build_knn_graph, geodesic_distances, project_tangent, GeodesicMetric};
use gama::losses::{softmin, LossWeights};
use gama::metrics::robust_accuracy;
use gama::model::{predict, NetParams, NetSpec};
use gama::objective::param_gradients;
use gama::perturb::{decompose, pgd_attack_batch, AttackConfig};
use rand::Rng;

const ABLATION_CONFIG: &str = include_str!("../../../configs/two_moons_ablation.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn decomposition_exactness() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let (mut worst_sum, mut worst_dot) = (0.0f64, 0.0f64);
    for case in 0..1000 {
        let d = 2 + case % 15;
        let m = r.random_range(1..d);
        let frame = random_frame(&mut r, d, m);
        let g = gaussian_vector(&mut r, d) * 10f64.powf(r.random_range(-3.0..3.0));
        let (on, off) = decompose(&frame, &g).unwrap();
        let gn = g.norm();
        worst_sum = worst_sum.max((&on + &off - &g).norm() / gn);
        worst_dot = worst_dot.max(on.dot(&off).abs() / (gn * gn));
    }
    let elapsed = start.elapsed();
    outcome(
        worst_sum <= 1e-9 && worst_dot <= 1e-8 && elapsed < Duration::from_secs(5),
        format!("max ‖on+off−g‖/‖g‖ = {worst_sum:.1e}, max |⟨on,off⟩|/‖g‖² = {worst_dot:.1e}, {elapsed:.2?}"),
    )
}

fn projection_properties() -> Outcome {
    let mut r = rng(102);
    let (mut idem, mut expand) = (0.0f64, 0.0f64);
    for case in 0..1000 {
        let d = 2 + case % 15;
        let m = r.random_range(1..d);
        let frame = random_frame(&mut r, d, m);
        let v = gaussian_vector(&mut r, d);
        let p = project_tangent(&frame, &v).unwrap();
        let pp = project_tangent(&frame, &p).unwrap();
        idem = idem.max((&pp - &p).norm());
        expand = expand.max(p.norm() - v.norm());
    }
    outcome(
        idem <= 1e-10 && expand <= 1e-10,
        format!("max ‖P(Pv)−Pv‖ = {idem:.1e}, max ‖Pv‖−‖v‖ = {expand:.1e}"),
    )
}

#[allow(clippy::needless_range_loop)]
fn geodesic_oracle() -> Outcome {
    let mut r = rng(103);
    let (mut worst, mut axiom_failures) = (0.0f64, 0usize);
    for _ in 0..20 {
        let n = r.random_range(3..31);
        let k = r.random_range(1..5.min(n));
        let pts = random_points(&mut r, n, 2);
        let g = build_knn_graph(&pts, k, true).unwrap();
        let idx = geodesic_distances(&pts, &g).unwrap();
        let fw = floyd_warshall(&g);
        for i in 0..n {
            for j in 0..n {
                if fw[i][j].is_finite() {
                    worst = worst.max((idx.get(i, j) - fw[i][j]).abs());
                }
                if idx.get(i, i) != 0.0 || (idx.get(i, j) - idx.get(j, i)).abs() > 1e-9 {
                    axiom_failures += 1;
                }
                for m in 0..n {
                    if idx.get(i, j) > idx.get(i, m) + idx.get(m, j) + 1e-9 {
                        axiom_failures += 1;
                    }
                }
            }
        }
    }
    outcome(
        worst <= 1e-9 && axiom_failures == 0,
        format!("max |Dijkstra − Floyd–Warshall| = {worst:.1e}, metric axiom violations = {axiom_failures}"),
    )
}

fn term_gradient(spec: &NetSpec, params: &NetParams, data: &BatchData, w: LossWeights, geom: bool) -> Vec<f64> {
    let with = objective(w, 3, GeodesicMetric::Graph);
    let base = objective(LossWeights { tau: w.tau, ..LossWeights::zero() }, 3, GeodesicMetric::Graph);
    let (_, g) = param_gradients(spec, params, &data.batch(geom), &with).unwrap();
    let (_, g0) = param_gradients(spec, params, &data.batch(geom), &base).unwrap();
    flatten(&g).iter().zip(flatten(&g0)).map(|(a, b)| a - b).collect()
}

type Pick = fn(&gama::losses::LossBreakdown) -> f64;

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut r = rng(104);
    let unit = |on, off, geom| LossWeights {
        lambda_on: on,
        lambda_off: off,
        lambda_geom: geom,
        tau: 0.5,
    };
    let mut worst = [0.0f64; 4];
    let mut instances = [0usize; 4];
    let terms: [(&str, LossWeights, bool, Pick); 4] = [
        ("cls", unit(0.0, 0.0, 0.0), false, |b| b.cls),
        ("on", unit(1.0, 0.0, 0.0), false, |b| b.on),
        ("off", unit(0.0, 1.0, 0.0), false, |b| b.off),
        ("geom", unit(0.0, 0.0, 1.0), true, |b| b.geom),
    ];
    for (t, (_, w, geom, pick)) in terms.iter().enumerate() {
        while instances[t] < 100 {
            let (spec, params) = random_net(&mut r);
            let data = BatchData::random(&mut r, &spec, 6, 6);
            let plain = objective(LossWeights { tau: w.tau, ..LossWeights::zero() }, 3, GeodesicMetric::Graph);
            if *geom && plain.evaluate(&spec, &params, &data.batch(true), false).unwrap().unreachable_pairs > 0 {
                continue;
            }
            let g = if t == 0 {
                let (_, g) = param_gradients(&spec, &params, &data.batch(false), &plain).unwrap();
                flatten(&g)
            } else {
                term_gradient(&spec, &params, &data, *w, *geom)
            };
            let fd = finite_difference(&params, 1e-5, |p| {
                pick(&plain.evaluate(&spec, p, &data.batch(*geom), false).unwrap().breakdown)
            });
            worst[t] = worst[t].max(relative_error(&g, &fd));
            instances[t] += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|&e| e <= 1e-4) && elapsed < Duration::from_secs(60);
    let detail = terms
        .iter()
        .zip(worst)
        .zip(instances)
        .map(|(((name, ..), e), n)| format!("{name} {e:.1e} ({n})"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("max relative error: {detail}; {elapsed:.2?}"))
}

fn softmin_bound() -> Outcome {
    let mut r = rng(105);
    let mut violations = 0;
    let mut worst_gap = 0.0f64;
    for _ in 0..1000 {
        let len = r.random_range(1..50);
        let tau = 10f64.powf(r.random_range(-3.0..1.0));
        let v: Vec<f64> = (0..len).map(|_| r.random_range(-50.0..50.0)).collect();
        let m = v.iter().copied().fold(f64::INFINITY, f64::min);
        let s = softmin(&v, tau);
        let slack = 1e-12 * m.abs().max(1.0);
        if s > m + slack || s < m - tau * (len as f64).ln() - slack {
            violations += 1;
        }
        worst_gap = worst_gap.max((softmin(&v, 1e-4) - m).abs());
    }
    outcome(
        violations == 0 && worst_gap <= 1e-3,
        format!("bound violations = {violations}, max |softmin_1e-4 − min| = {worst_gap:.1e}"),
    )
}

fn pgd_containment(runs: &[&SeedRun], cfg: &ExperimentConfig) -> Outcome {
    let eps = cfg.attack.epsilon;
    let mut worst = 0.0f64;
    let mut null_mismatch = 0;
    for run in runs {
        let bundle = cfg.dataset.build(run.seed).unwrap();
        let x = bundle.target_test_features();
        let y = bundle.target_test_labels();
        let (spec, params) = (&run.checkpoint.spec, &run.checkpoint.params);
        let adv = pgd_attack_batch(spec, params, &x, &y, &AttackConfig::pgd(eps), None).unwrap();
        worst = worst.max((&adv - &x).amax() - eps);
        let start = AttackConfig { random_start: Some(run.seed), ..AttackConfig::pgd(eps) };
        let adv = pgd_attack_batch(spec, params, &x, &y, &start, None).unwrap();
        worst = worst.max((&adv - &x).amax() - eps);
        let pred = predict(spec, params, &x).unwrap();
        let clean = 100.0 * pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        if robust_accuracy(spec, params, &x, &y, &AttackConfig::pgd(0.0)).unwrap() != clean {
            null_mismatch += 1;
        }
    }
    outcome(
        worst <= 1e-12 && null_mismatch == 0,
        format!(
            "{} trained models: max (‖adv−x‖∞ − ε) = {worst:.1e}, ε=0 robust≠clean in {null_mismatch}",
            runs.len()
        ),
    )
}

fn end_to_end(report: &AblationReport, elapsed: Duration) -> Outcome {
    let v = |name| report.variant(name).expect("variant present");
    let (full, src) = (v("full"), v("source_only"));
    let (no_geom, no_on, no_off) = (v("no_geom"), v("no_on"), v("no_off"));
    let a = full.target_accuracy.mean - src.target_accuracy.mean;
    let checks = [
        a >= 5.0,
        no_geom.geoalign.mean > full.geoalign.mean,
        no_off.robust_accuracy.mean < full.robust_accuracy.mean,
        no_on.target_accuracy.mean < full.target_accuracy.mean,
        elapsed < Duration::from_secs(600),
    ];
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "(a) acc full {:.1} vs source-only {:.1}, +{a:.1} [{}]; (b) GeoAlign no_geom {:.4} > full {:.4} [{}]; \
             (c) robust no_off {:.1} < full {:.1} [{}]; (d) acc no_on {:.1} < full {:.1} [{}]; {elapsed:.1?} [{}]",
            full.target_accuracy.mean,
            src.target_accuracy.mean,
            mark(checks[0]),
            no_geom.geoalign.mean,
            full.geoalign.mean,
            mark(checks[1]),
            no_off.robust_accuracy.mean,
            full.robust_accuracy.mean,
            mark(checks[2]),
            no_on.target_accuracy.mean,
            full.target_accuracy.mean,
            mark(checks[3]),
            mark(checks[4]),
        ),
    )
}

fn determinism(cfg: &ExperimentConfig, first: &SeedRun) -> Outcome {
    let again = run_seed(cfg, &cfg.train, first.seed).map_err(|f| f.to_string());
    let third = run_seed(cfg, &cfg.train, first.seed).map_err(|f| f.to_string());
    match (again, third) {
        (Ok(b), Ok(c)) => outcome(
            b.loss_csv.as_bytes() == first.loss_csv.as_bytes() && c.loss_csv.as_bytes() == b.loss_csv.as_bytes(),
            format!("seed {}: {} loss rows identical across three runs", first.seed, b.loss_csv.lines().count() - 1),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn uda_guard(runs: &[&SeedRun]) -> Outcome {
    let reads: usize = runs.iter().map(|r| r.label_reads_before_eval + r.fit.target_label_reads).sum();
    outcome(
        reads == 0,
        format!("{} UDA runs, target-label reads before evaluation = {reads}", runs.len()),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    record(1, "decomposition exactness", decomposition_exactness());
    record(2, "projection properties", projection_properties());
    record(3, "geodesic oracle equivalence", geodesic_oracle());
    record(4, "gradient correctness", gradient_correctness());
    record(5, "softmin bound", softmin_bound());

    let cfg = ExperimentConfig::from_toml_str(ABLATION_CONFIG).expect("ablation config parses");
    let start = Instant::now();
    let ablation = run_ablation(&cfg, &[Component::Geom, Component::On, Component::Off], true);
    let elapsed = start.elapsed();
    match ablation {
        Ok((report, runs)) => {
            let all: Vec<&SeedRun> = runs.iter().flatten().collect();
            record(6, "PGD containment", pgd_containment(&all, &cfg));
            record(7, "end-to-end adaptation", end_to_end(&report, elapsed));
            record(8, "determinism", determinism(&cfg, &runs[0][0]));
            record(9, "UDA protocol guard", uda_guard(&all));
            for v in &report.variants {
                println!(
                    "    {:<12} acc {:6.2} ± {:5.2}  robust {:6.2} ± {:5.2}  GeoAlign {:.4} ± {:.4}",
                    v.name,
                    v.target_accuracy.mean,
                    v.target_accuracy.std,
                    v.robust_accuracy.mean,
                    v.robust_accuracy.std,
                    v.geoalign.mean,
                    v.geoalign.std
                );
            }
        }
        Err(e) => {
            for (n, name) in [(6, "PGD containment"), (7, "end-to-end adaptation"), (8, "determinism"), (9, "UDA protocol guard")] {
                record(n, name, outcome(false, format!("ablation run failed: {e}")));
            }
        }
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
