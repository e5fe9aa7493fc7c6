//! Acceptance suite. Each test prints one line `criterion N PASS|FAIL ...` and
//! fails when its criterion is not met. Tolerances live in expectations.toml.
//! Tests hold a shared lock so the reported runtimes are not inflated by each other.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use nalgebra::SymmetricEigen;
use rand::seq::index::sample;
use rand::Rng;

use covertime::experiments::{
    excursion_plan, expected_hitting_times, run_excursion_calibration, run_gumbel, run_hitting_time_check,
    run_last_k_separation, run_last_points, run_late_points, vacancy_experiment, ExperimentConfig,
};
use covertime::interlacement::{two_point_sum, vacancy_one, InterlacementSampler, TruncationPolicy};
use covertime::output::{write_report, Format, Meta};
use covertime::potential::{
    default_schedule, equilibrium_measure, green_table, GreenTable, DEFAULT_ENV_RADIUS,
};
use covertime::spectral::{build_kernel, hitting_from_sigma, quasistationary, tv_decay_slope};
use covertime::stats::{Summary, EULER_GAMMA, GUMBEL_VARIANCE};
use covertime::{BoxSpec, LocalSet, RngStream, Site, SiteSet, TorusGeometry};

fn expectations() -> &'static toml::Table {
    static E: OnceLock<toml::Table> = OnceLock::new();
    E.get_or_init(|| include_str!("expectations.toml").parse().expect("expectations.toml"))
}

fn section(name: &str) -> &'static toml::Table {
    expectations()[name].as_table().unwrap_or_else(|| panic!("missing section {name}"))
}

fn f(sec: &toml::Table, key: &str) -> f64 {
    match &sec[key] {
        toml::Value::Float(x) => *x,
        toml::Value::Integer(i) => *i as f64,
        v => panic!("{key} is not a number: {v}"),
    }
}

fn n(sec: &toml::Table, key: &str) -> usize {
    sec[key].as_integer().unwrap_or_else(|| panic!("{key} is not an integer")) as usize
}

fn floats(sec: &toml::Table, key: &str) -> Vec<f64> {
    sec[key]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_float().or(v.as_integer().map(|i| i as f64)).unwrap())
        .collect()
}

fn site(sec: &toml::Table, key: &str) -> Site {
    Site::new(floats(sec, key).into_iter().map(|x| x as i64).collect())
}

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line straight to stderr so it shows even when output is captured.
fn verdict(id: u32, name: &str, checks: &[(bool, String)], started: Instant, limit_s: f64) -> bool {
    let elapsed = started.elapsed().as_secs_f64();
    let in_time = elapsed <= limit_s;
    let pass = in_time && checks.iter().all(|c| c.0);
    let detail: Vec<String> =
        checks.iter().map(|(ok, s)| format!("{}{s}", if *ok { "" } else { "!" })).collect();
    let line = format!(
        "criterion {id:>2} {} {name}: {} | runtime {elapsed:.1}s{}\n",
        if pass { "PASS" } else { "FAIL" },
        detail.join("; "),
        if limit_s.is_finite() { format!(" (limit {limit_s}s{})", if in_time { "" } else { ", exceeded" }) } else { String::new() }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

fn config(side: usize, trials: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig::new(3, side, trials, seed)
}

/// E_pi[H_0] / N^3 from the exact linear solve on the torus.
fn exact_point_hitting(side: usize) -> f64 {
    let g = TorusGeometry::new(3, side).unwrap();
    let h = expected_hitting_times(&g, &SiteSet::from_indices(&g, [0])).unwrap();
    h.iter().sum::<f64>() / (g.volume() as f64).powi(2)
}

#[test]
fn criterion_01_green_function() {
    let _g = serial();
    let e = section("green");
    let t = Instant::now();
    let table = GreenTable::compute(3, 8, &default_schedule(3)).unwrap();
    let g0 = table.g0();
    // Independent oracle: visits of the Z^3 walk to its start within a step budget, plus the
    // local-limit tail sum over later even times.
    let (walks, steps) = (n(e, "oracle_walks"), n(e, "oracle_steps"));
    let mut rng = RngStream::new(n(e, "seed") as u64, 0);
    let mut visits = Vec::with_capacity(walks);
    for _ in 0..walks {
        let mut x = [0i32; 3];
        let mut count = 1u32;
        for _ in 0..steps {
            let d = rng.random_range(0..6u32);
            x[(d / 2) as usize] += if d % 2 == 0 { 1 } else { -1 };
            if x == [0, 0, 0] {
                count += 1;
            }
        }
        visits.push(count as f64);
    }
    let s = Summary::of(&visits);
    let tail = (3.0 / (2.0 * std::f64::consts::PI)).powf(1.5) * 2.0 / (steps as f64).sqrt();
    let oracle = s.mean + tail;
    let k = f(e, "oracle_sigmas");
    let checks = [
        (
            (g0 - f(e, "reference_g0")).abs() <= f(e, "g0_tolerance"),
            format!("g0={g0:.10} vs {} (tol {})", f(e, "reference_g0"), f(e, "g0_tolerance")),
        ),
        (
            table.harmonic_residual <= f(e, "harmonic_residual_max"),
            format!("harmonic residual {:.2e} (max {:.0e})", table.harmonic_residual, f(e, "harmonic_residual_max")),
        ),
        (
            (oracle - g0).abs() <= k * s.std_error,
            format!("visit-count oracle {oracle:.4} +- {:.4} ({k} sigma)", s.std_error),
        ),
    ];
    assert!(verdict(1, "Green function", &checks, t, f(e, "runtime_s")));
}

#[test]
fn criterion_02_capacity() {
    let _g = serial();
    let e = section("capacity");
    let g0 = green_table(3).unwrap().g0();
    let t = Instant::now();
    let point = equilibrium_measure(&LocalSet::singleton(Site::origin(3)), DEFAULT_ENV_RADIUS).unwrap();
    let rel = (point.capacity * g0 - 1.0).abs();
    let band = floats(e, "band");
    let mut checks = vec![(
        rel <= f(e, "point_relative_tolerance"),
        format!("cap({{0}})*g0 - 1 = {rel:.2e} (tol {})", f(e, "point_relative_tolerance")),
    )];
    for r in floats(e, "radii") {
        let r = r as usize;
        let eq = equilibrium_measure(&BoxSpec::new(Site::origin(3), r).sites(), DEFAULT_ENV_RADIUS.max(4 * r)).unwrap();
        let scaled = eq.capacity / r as f64;
        checks.push((
            band[0] <= scaled && scaled <= band[1],
            format!("cap(B(0,{r}))/{r} = {scaled:.4} in [{}, {}]", band[0], band[1]),
        ));
    }
    assert!(verdict(2, "capacity identity", &checks, t, f(e, "runtime_s")));
}

#[test]
fn criterion_03_interlacement_vacancy() {
    let _g = serial();
    let e = section("interlacement_vacancy");
    let green = green_table(3).unwrap();
    let t = Instant::now();
    let levels = floats(e, "levels");
    let offset = site(e, "pair_offset");
    let samples = n(e, "samples");
    let k = f(e, "sigmas");
    let mut checks = Vec::new();
    let g_v = green.value(&offset);
    let sets = [
        (LocalSet::singleton(Site::origin(3)), "{0}"),
        (LocalSet::from_sites([Site::origin(3), offset.clone()]), "{0,v}"),
    ];
    for (j, (set, label)) in sets.iter().enumerate() {
        let eq = equilibrium_measure(set, DEFAULT_ENV_RADIUS).unwrap();
        let sampler = InterlacementSampler::new(&eq, TruncationPolicy::default_for(set)).unwrap();
        let top = levels.iter().cloned().fold(0.0, f64::max);
        let mut vacant = vec![0usize; levels.len()];
        let mut rng = RngStream::new(n(e, "seed") as u64, j as u64);
        for _ in 0..samples {
            let batch = sampler.sample_labeled(top, &mut rng).unwrap();
            for (li, &u) in levels.iter().enumerate() {
                if batch.at_level(u).visited_count() == 0 {
                    vacant[li] += 1;
                }
            }
        }
        for (li, &u) in levels.iter().enumerate() {
            let p = vacant[li] as f64 / samples as f64;
            let se = (p * (1.0 - p) / samples as f64).sqrt();
            let predicted = if j == 0 { vacancy_one(u, green.g0()) } else { (-2.0 * u / (green.g0() + g_v)).exp() };
            checks.push((
                (p - predicted).abs() <= k * se,
                format!("K={label} u={u}: {p:.4} vs {predicted:.4} (+-{:.4})", k * se),
            ));
        }
    }
    assert!(verdict(3, "interlacement vacancy", &checks, t, f(e, "runtime_s")));
}

#[test]
fn criterion_04_two_point_sum() {
    let _g = serial();
    let e = section("two_point_sum");
    let green = green_table(3).unwrap();
    let g0 = green.g0();
    let t = Instant::now();
    let r = n(e, "box_radius");
    let pool: Vec<Site> = BoxSpec::new(Site::origin(3), r).sites().sites().iter().filter(|s| !s.is_origin()).cloned().collect();
    let mut rng = RngStream::new(n(e, "seed") as u64, 0);
    let slack = f(e, "float_relative_slack");
    let (mut checked, mut violations, mut worst) = (0, 0, 0.0f64);
    for _ in 0..n(e, "sets") {
        let size = rng.random_range(1..=n(e, "max_set_size"));
        let set = LocalSet::from_sites(sample(&mut rng, pool.len(), size).into_iter().map(|i| pool[i].clone()));
        let g_max = set.sites().iter().map(|v| green.value(v)).fold(f64::MIN, f64::max);
        for u in floats(e, "levels") {
            let (sum, _) = two_point_sum(&set, u, green).unwrap();
            let direct: f64 = set.sites().iter().map(|v| (-2.0 * u / (g0 + green.value(v))).exp()).sum();
            let bound = set.len() as f64 * (-2.0 * u / g0).exp() * (2.0 * u * g_max / (g0 * (g0 + g_max))).exp();
            checked += 1;
            worst = worst.max(sum / bound);
            if sum.max(direct) > bound * (1.0 + slack) {
                violations += 1;
            }
        }
    }
    let checks = [(violations == 0, format!("{checked} cases, {violations} violations, max sum/bound {worst:.6}"))];
    assert!(verdict(4, "two-point-sum inequality", &checks, t, f(e, "runtime_s")));
}

fn gumbel_config() -> ExperimentConfig {
    let e = section("gumbel");
    config(n(e, "side"), n(e, "trials"), n(e, "seed") as u64)
}

#[test]
fn criterion_05_gumbel_law() {
    let _g = serial();
    let e = section("gumbel");
    let t = Instant::now();
    let fit = run_gumbel(&gumbel_config(), 3).unwrap();
    let elapsed = t.elapsed();
    // Finite-N reference: replace g0 by E_pi[H_0]/N^3 in the centering.
    let side = n(e, "side");
    let ratio = exact_point_hitting(side) / fit.g0;
    let ln_v = (fit.target_size as f64).ln();
    let finite_mean = ratio * (ln_v + EULER_GAMMA) - ln_v;
    let t = Instant::now() - elapsed;
    let checks = [
        (fit.ks <= f(e, "ks_max"), format!("KS {:.4} (max {})", fit.ks, f(e, "ks_max"))),
        (
            (fit.summary.mean - EULER_GAMMA).abs() <= f(e, "mean_tolerance"),
            format!("mean {:.4} +- {:.4} vs {EULER_GAMMA:.4} (tol {})", fit.summary.mean, fit.summary.std_error, f(e, "mean_tolerance")),
        ),
        (
            (fit.summary.variance - GUMBEL_VARIANCE).abs() <= f(e, "variance_tolerance"),
            format!("variance {:.4} vs {GUMBEL_VARIANCE:.4} (tol {})", fit.summary.variance, f(e, "variance_tolerance")),
        ),
        (
            fit.truncated.is_empty(),
            format!("{} truncated; exact E_pi[H_0]/(g0 N^3) = {ratio:.4} predicts mean {finite_mean:.3} at this N", fit.truncated.len()),
        ),
    ];
    assert!(verdict(5, "Gumbel law", &checks, t, f(e, "runtime_s")));
}

#[test]
fn criterion_06_torus_vacancy() {
    let _g = serial();
    let e = section("torus_vacancy");
    let t = Instant::now();
    let cfg = config(n(e, "side"), n(e, "trials"), n(e, "seed") as u64);
    let r = vacancy_experiment(&cfg, f(e, "level"), None).unwrap();
    let tol = f(e, "sigmas") * r.estimate.std_error + f(e, "slack");
    let checks = [(
        (r.estimate.estimate - r.prediction).abs() <= tol,
        format!("P = {:.4} vs e^(-u/g0) = {:.4} (tol {tol:.4})", r.estimate.estimate, r.prediction),
    )];
    assert!(verdict(6, "torus one-point vacancy", &checks, t, f(e, "runtime_s")));
}

#[test]
fn criterion_07_hitting_time() {
    let _g = serial();
    let e = section("hitting_time");
    let t = Instant::now();
    let side = n(e, "side");
    let cfg = config(side, n(e, "trials"), n(e, "seed") as u64);
    let r = n(e, "box_radius");
    let band = floats(e, "ratio_band");
    let geom = TorusGeometry::new(3, side).unwrap();
    let mut checks = Vec::new();
    for boxes in [
        vec![BoxSpec::new(Site::origin(3), r)],
        vec![BoxSpec::new(Site::origin(3), r), BoxSpec::new(site(e, "second_center"), r)],
    ] {
        let rep = run_hitting_time_check(&cfg, &boxes).unwrap();
        let mut v = SiteSet::empty(&geom);
        for b in &boxes {
            v = v.union(&b.torus_sites(&geom).unwrap());
        }
        let exact = expected_hitting_times(&geom, &v).unwrap().iter().sum::<f64>() / geom.volume() as f64;
        let exact_ratio = exact * rep.capacity_sum / geom.volume() as f64;
        checks.push((
            band[0] <= rep.ratio && rep.ratio <= band[1],
            format!(
                "{} box(es): ratio {:.4} +- {:.4} in [{}, {}]; exact solve gives {exact_ratio:.4}",
                boxes.len(),
                rep.ratio,
                rep.ratio_std_error,
                band[0],
                band[1]
            ),
        ));
    }
    assert!(verdict(7, "hitting-time law", &checks, t, f(e, "runtime_s")));
}

#[test]
fn criterion_08_quasistationary() {
    let _g = serial();
    let e = section("quasistationary");
    let t = Instant::now();
    let geom = TorusGeometry::new(3, n(e, "side")).unwrap();
    let removed = geom.ball(&Site::origin(3), n(e, "removed_radius")).unwrap();
    let k = build_kernel(&geom, &removed).unwrap();
    let q = quasistationary(&k, f(e, "tol"), 200_000).unwrap();
    let eig = SymmetricEigen::new(k.to_dense());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    let dense2 = *vals.iter().find(|&&v| v < vals[0] - 1e-9).unwrap();
    let top = eig.eigenvalues.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let col = eig.eigenvectors.column(top);
    let sign = col.iter().sum::<f64>().signum();
    let vec_dev = col.iter().zip(&q.v1).map(|(d, s)| (sign * d - s).abs()).fold(0.0, f64::max);
    let dense_dev = (vals[0] - q.lambda1).abs().max((dense2 - q.lambda2).abs()).max(vec_dev);
    let window = floats(e, "tv_window");
    let start = k.state_of(geom.index(&site(e, "tv_start")).unwrap()).unwrap();
    let slope = tv_decay_slope(&k, &q.sigma, start, window[0], window[1], 1_000_000).unwrap();
    // The lazy kernel (I + P)/2 has eigenvalues (1 + lambda)/2.
    let expected = ((1.0 + q.lambda2) / (1.0 + q.lambda1)).ln();
    let rel = (slope / expected - 1.0).abs();
    let checks = [
        (
            q.residual1 <= f(e, "residual_max"),
            format!("residual {:.2e} (max {:.0e})", q.residual1, f(e, "residual_max")),
        ),
        (dense_dev <= f(e, "dense_tolerance"), format!("dense oracle deviation {dense_dev:.2e}")),
        (
            rel <= f(e, "slope_relative_tolerance"),
            format!("TV slope {slope:.5} vs ln(mu2/mu1) = {expected:.5} (rel {rel:.4}); lambda1={:.8} lambda2={:.8}", q.lambda1, q.lambda2),
        ),
    ];
    assert!(verdict(8, "quasistationary exactness", &checks, t, f(e, "runtime_s")));
}

#[test]
fn criterion_09_hitting_from_sigma() {
    let _g = serial();
    let e = section("hitting_from_sigma");
    let t = Instant::now();
    let geom = TorusGeometry::new(3, n(e, "side")).unwrap();
    let centers = [Site::origin(3), site(e, "second_center")];
    let plan = excursion_plan(&geom, &centers, f(e, "epsilon")).unwrap();
    let a = n(e, "a_radius");
    let mut removed = SiteSet::empty(&geom);
    for c in &centers {
        removed = removed.union(&geom.ball(c, plan.c_radius).unwrap());
    }
    let k = build_kernel(&geom, &removed).unwrap();
    let q = quasistationary(&k, 1e-11, 200_000).unwrap();
    let eq = equilibrium_measure(&BoxSpec::new(Site::origin(3), a).sites(), DEFAULT_ENV_RADIUS).unwrap();
    let boxes: Vec<BoxSpec> = centers.iter().map(|c| BoxSpec::new(c.clone(), a)).collect();
    let mut rng = RngStream::new(n(e, "seed") as u64, 0);
    let rep = hitting_from_sigma(&k, &q.sigma, &boxes, &eq, n(e, "hits"), &mut rng).unwrap();
    let checks = [(
        rep.max_relative_deviation <= f(e, "max_relative_deviation"),
        format!(
            "max relative deviation {:.4} over {} sites, {} hits, A radius {a}, C radius {}",
            rep.max_relative_deviation,
            rep.sites.len(),
            rep.hits,
            plan.c_radius
        ),
    )];
    assert!(verdict(9, "hitting from sigma", &checks, t, f(e, "runtime_s")));
}

#[test]
fn criterion_10_excursions() {
    let _g = serial();
    let e = section("excursions");
    let t = Instant::now();
    let cfg = config(n(e, "side"), n(e, "trials"), n(e, "seed") as u64);
    let geom = cfg.validate().unwrap();
    let centers = [Site::origin(3)];
    let plan = excursion_plan(&geom, &centers, f(e, "epsilon")).unwrap();
    assert_eq!(plan.a_radius, n(e, "a_radius"));
    let rep = run_excursion_calibration(&cfg, &centers, plan.a_radius, plan.c_radius, f(e, "level"), plan.t_star).unwrap();
    let checks = [(
        (rep.ratio - 1.0).abs() <= f(e, "ratio_tolerance"),
        format!(
            "mean count {:.3} vs u n cap(A) = {:.3}: ratio {:.3} +- {:.3} (C radius {}{}, t* {:.1})",
            rep.summary.mean,
            rep.prediction,
            rep.ratio,
            rep.ratio_std_error,
            plan.c_radius,
            if plan.c_clamped { ", clamped" } else { "" },
            plan.t_star
        ),
    )];
    assert!(verdict(10, "excursion calibration", &checks, t, f(e, "runtime_s")));
}

#[test]
fn criterion_11_late_points() {
    let _g = serial();
    let e = section("late_points");
    let t = Instant::now();
    let mut cfg = config(n(e, "side"), n(e, "trials"), n(e, "seed") as u64);
    cfg.rho = f(e, "rho");
    let rep = run_late_points(&cfg).unwrap();
    let band = floats(e, "ratio_band");
    let checks = [
        (
            band[0] <= rep.mean_ratio && rep.mean_ratio <= band[1],
            format!("mean |F_rho| / |F|^rho = {:.4} in [{}, {}]", rep.mean_ratio, band[0], band[1]),
        ),
        (
            rep.good_fraction >= f(e, "good_fraction_min"),
            format!("good-set fraction {:.4} (min {})", rep.good_fraction, f(e, "good_fraction_min")),
        ),
    ];
    assert!(verdict(11, "late points", &checks, t, f(e, "runtime_s")));
}

#[test]
fn criterion_12_last_points() {
    let _g = serial();
    let e = section("last_points");
    let t = Instant::now();
    let mut cfg = config(n(e, "side"), n(e, "trials"), n(e, "seed") as u64);
    cfg.z_grid = vec![f(e, "z")];
    let rep = run_last_points(&cfg).unwrap();
    let l = &rep.levels[0];
    let tol = f(e, "mean_bias") + f(e, "mean_sigmas") * l.summary.std_error;
    let p0 = (-l.limit_mean).exp();
    let checks = [
        (
            (l.summary.mean - l.limit_mean).abs() <= tol,
            format!("mean count {:.4} vs {:.4} (tol {tol:.4})", l.summary.mean, l.limit_mean),
        ),
        (
            (l.p_zero.estimate - p0).abs() <= f(e, "p_zero_tolerance"),
            format!("P[count=0] {:.4} vs {p0:.4} (tol {})", l.p_zero.estimate, f(e, "p_zero_tolerance")),
        ),
        (
            l.split_test.p_value > f(e, "split_p_min"),
            format!("sub-box split chi2 p = {:.4} (dof {})", l.split_test.p_value, l.split_test.dof),
        ),
    ];
    assert!(verdict(12, "last-covered point process", &checks, t, f(e, "runtime_s")));
}

#[test]
fn criterion_13_last_k_separation() {
    let _g = serial();
    let e = section("last_k");
    let t = Instant::now();
    let cfg = config(n(e, "side"), n(e, "trials"), n(e, "seed") as u64);
    let delta = f(e, "delta");
    let rep = run_last_k_separation(&cfg, n(e, "k"), &[delta]).unwrap();
    let (p, oracle) = (rep.tail[0], rep.oracle[0]);
    let se = (p * (1.0 - p) / rep.min_distances.len() as f64).sqrt();
    let checks = [(
        p <= oracle + f(e, "slack"),
        format!("P[min dist <= {delta} N] = {p:.4} +- {se:.4} vs uniform {oracle:.4} + {}", f(e, "slack")),
    )];
    assert!(verdict(13, "last-3 separation", &checks, t, f(e, "runtime_s")));
}

#[test]
fn criterion_14_determinism() {
    let _g = serial();
    let e = section("determinism");
    let t = Instant::now();
    let mut outputs = Vec::new();
    for threads in floats(e, "thread_counts") {
        let mut cfg = gumbel_config();
        cfg.threads = Some(threads as usize);
        let fit = run_gumbel(&cfg, 3).unwrap();
        let meta = Meta::new(cfg.seed, 0.0);
        let (mut json, mut csv) = (Vec::new(), Vec::new());
        write_report(&mut json, Format::Json, &cfg, &meta, &fit).unwrap();
        write_report(&mut csv, Format::Csv, &cfg, &meta, &fit).unwrap();
        outputs.push((threads, json, csv));
    }
    let same = outputs.windows(2).all(|w| w[0].1 == w[1].1 && w[0].2 == w[1].2);
    let checks = [(
        same,
        format!(
            "JSON ({} bytes) and CSV ({} bytes) identical across thread counts {:?}",
            outputs[0].1.len(),
            outputs[0].2.len(),
            outputs.iter().map(|o| o.0).collect::<Vec<_>>()
        ),
    )];
    assert!(verdict(14, "determinism", &checks, t, f64::INFINITY));
}
