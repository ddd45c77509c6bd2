//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pipe_rom::bench::{prepare_dataset, run_experiment, trend_slope, Report};
use pipe_rom::config::ExperimentConfig;
use pipe_rom::field_data::{split_sequences, SplitRatios};
use pipe_rom::model::fit_method;
use pipe_rom::opinf::{
    estimate_derivatives, fit_operators, rollout, OperatorTerms, ReducedOperators, RegularizationConfig,
    TikhonovSolver,
};
use pipe_rom::pod::{
    fit_basis, fit_basis_matrix, project_matrix, reconstruct_values, select_rank, PodBasis,
};
use pipe_rom::solver::{step, stable_dt, Boundaries, FrictionModel, InletProfile, SolverConfig, SolverState};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 200, 150);
    let basis = fit_basis_matrix(&x).unwrap();
    let gram = basis.modes().transpose() * basis.modes();
    let ortho = (gram - DMatrix::identity(basis.rank(), basis.rank())).abs().max();
    let sigma = basis.singular_values();
    let mut trunc = 0.0_f64;
    for r in [5, 20, 60, 120] {
        let b = basis.truncated(r).unwrap();
        let back = reconstruct_values(&b, &project_matrix(&b, &x).unwrap()).unwrap();
        let err2 = (&back - &x).norm_squared();
        let tail: f64 = sigma[r..].iter().map(|s| s * s).sum();
        trunc = trunc.max((err2 - tail).abs() / tail);
    }
    let back = reconstruct_values(&basis, &project_matrix(&basis, &x).unwrap()).unwrap();
    let round = rel(&back, &x);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        ortho <= 1e-10 && trunc <= 1e-6 && round <= 1e-8 && secs < 5.0,
        format!(
            "orthonormality {ortho:.1e} (<=1e-10), truncation rel {trunc:.1e} (<=1e-6), \
             round trip {round:.1e} (<=1e-8), {secs:.2} s (<5)"
        ),
    )
}

fn brute_force_rank(sigma: &[f64], threshold: f64) -> usize {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    (1..=sigma.len())
        .find(|&r| sigma[..r].iter().map(|s| s * s).sum::<f64>() / total >= threshold)
        .unwrap_or(sigma.len())
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut spectra = Vec::new();
    for _ in 0..50 {
        let n = rng.random_range(5..80);
        let decay = rng.random_range(0.05..1.5);
        let mut s: Vec<f64> = (0..n)
            .map(|i| (-decay * i as f64).exp() * rng.random_range(0.5..1.5))
            .collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        spectra.push(s);
    }
    let config = ExperimentConfig::default();
    let data = prepare_dataset(&config).unwrap().data;
    let (train, _, _) = split_sequences(&data, &config.bench.split).unwrap();
    let surrogate = fit_basis(&train).unwrap();

    let start = Instant::now();
    let mut mismatches = 0;
    for s in &spectra {
        let b = PodBasis::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0), s.clone()).unwrap();
        if select_rank(&b, 0.9982).unwrap() != brute_force_rank(s, 0.9982) {
            mismatches += 1;
        }
    }
    let got = select_rank(&surrogate, 0.9982).unwrap();
    let want = brute_force_rank(surrogate.singular_values(), 0.9982);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && got == want && secs < 1.0,
        format!(
            "{mismatches}/50 random spectra mismatched; surrogate rank {got} vs scan {want} \
             (energy at 30 modes {:.6}); {secs:.3} s (<1)",
            surrogate.energy_at(30)
        ),
    )
}

/// Independent quadratic right-hand side, H over the upper-triangular
/// monomials x_i x_j (i <= j) in row-major order.
fn quad_rhs(c: &DVector<f64>, a: &DMatrix<f64>, h: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let r = x.len();
    let mut mono = Vec::new();
    for i in 0..r {
        for j in i..r {
            mono.push(x[i] * x[j]);
        }
    }
    c + a * x + h * DVector::from_vec(mono)
}

fn rk4<F: Fn(&DVector<f64>) -> DVector<f64>>(f: &F, x0: &DVector<f64>, h: f64, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x0.len(), n);
    let mut x = x0.clone();
    for k in 0..n {
        let k1 = f(&x);
        let k2 = f(&(&x + &k1 * (h / 2.0)));
        let k3 = f(&(&x + &k2 * (h / 2.0)));
        let k4 = f(&(&x + &k3 * h));
        x = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        out.set_column(k, &x);
    }
    out
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = DVector::from_vec(vec![0.1, -0.05, 0.02]);
    let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.3, 0.1, -0.2, -1.5, 0.25, 0.15, -0.1, -2.0]);
    let h = DMatrix::from_fn(3, 6, |_, _| {
        let m = rng.random_range(0.05..0.2);
        if rng.random_bool(0.5) { m } else { -m }
    });
    let f = |x: &DVector<f64>| quad_rhs(&c, &a, &h, x);
    let dt = 0.01;
    let mut states = Vec::new();
    for _ in 0..30 {
        let x0 = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let traj = rk4(&f, &x0, dt, 50);
        states.extend(traj.column_iter().map(|c| c.into_owned()));
    }
    let x = DMatrix::from_columns(&states);
    let dx = DMatrix::from_columns(&states.iter().map(&f).collect::<Vec<_>>());
    let ops = fit_operators(&x, &dx, None, &OperatorTerms::default(), 0.0, dt).unwrap();
    let entry_err = |est: &DMatrix<f64>, truth: &DMatrix<f64>| {
        est.iter().zip(truth.iter()).map(|(e, t)| ((e - t) / t).abs()).fold(0.0, f64::max)
    };
    let c_est = DMatrix::from_column_slice(3, 1, ops.c.as_ref().unwrap().as_slice());
    let err = entry_err(&c_est, &DMatrix::from_column_slice(3, 1, c.as_slice()))
        .max(entry_err(ops.a.as_ref().unwrap(), &a))
        .max(entry_err(ops.h.as_ref().unwrap(), &h));

    let x0 = DVector::from_vec(vec![0.7, -0.4, 0.5]);
    let truth = rk4(&f, &x0, dt, 100);
    let pred = rollout(&ops, &x0, 0.0, None, 100, 10).unwrap();
    let roll = rel(&pred, &truth);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        err <= 1e-5 && roll <= 1e-4 && secs < 10.0,
        format!("max entry rel error {err:.1e} (<=1e-5), 100-step rollout rel {roll:.1e} (<=1e-4), {secs:.2} s (<10)"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0_f64;
    let mut monotone = true;
    let grid = RegularizationConfig::default().grid;
    for _ in 0..20 {
        let d = random(&mut rng, 40, 8);
        let o = random(&mut rng, 8, 3);
        let r = &d * &o;
        let solver = TikhonovSolver::new(&d).unwrap();
        for lambda in [0.0, 1e-3, 0.1, 1.0, 10.0] {
            let lhs = d.transpose() * &d + DMatrix::identity(8, 8) * (lambda * lambda);
            let oracle = lhs.cholesky().unwrap().solve(&(d.transpose() * &r));
            let got = solver.solve(&r, lambda).unwrap();
            worst = worst.max(rel(&got, &oracle));
        }
        let norms: Vec<f64> = grid.iter().map(|&l| solver.solve(&r, l).unwrap().norm()).collect();
        monotone &= norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    }
    outcome(
        worst <= 1e-8 && monotone,
        format!("max rel deviation from normal equations {worst:.1e} (<=1e-8), norm monotone in lambda: {monotone}"),
    )
}

fn criterion_5(report: &Report, secs: f64) -> Outcome {
    let get = |m: &str| report.method(m).and_then(|r| r.rmse_pa);
    let (op, pe, me) = (get("opinf"), get("persistence"), get("mean"));
    let rank = report.basis.as_ref().map(|b| b.rank);
    let pass = matches!((op, pe, me), (Some(o), Some(p), Some(m)) if o < p && o < m)
        && report.dataset.n_times == 1000
        && report.dataset.split == [500, 100, 400]
        && rank.is_some_and(|r| r <= 30)
        && secs < 60.0;
    outcome(
        pass,
        format!(
            "pressure RMSE Pa: opinf {op:?}, persistence {pe:?}, mean {me:?} (strict ordering); \
             rank {rank:?} (<=30), {secs:.2} s (<60)"
        ),
    )
}

fn criterion_6() -> Outcome {
    let r = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ops = ReducedOperators::zeros(r, 0, OperatorTerms::default(), 0.002);
    ops.c = Some(DVector::from_fn(r, |_, _| rng.random_range(-0.01..0.01)));
    ops.a = Some(-DMatrix::identity(r, r) + random(&mut rng, r, r) * 0.01);
    ops.h = Some(random(&mut rng, r, r * (r + 1) / 2) * 1e-3);
    let modes = random(&mut rng, 512, r).qr().q();
    let sigma: Vec<f64> = (0..r).map(|i| 1.0 / (i + 1) as f64).collect();
    let basis = PodBasis::new(DVector::zeros(512), modes, sigma).unwrap();
    let x0 = DVector::from_fn(r, |_, _| rng.random_range(-0.1..0.1));
    let start = Instant::now();
    let reduced = rollout(&ops, &x0, 0.0, None, 400, 10);
    let full = reduced.as_ref().map(|z| reconstruct_values(&basis, z));
    let secs = start.elapsed().as_secs_f64();
    outcome(
        matches!(full, Ok(Ok(_))) && secs < 1.0,
        format!("r = 30, 400 steps with c, A, H and reconstruction: {secs:.4} s (<1)"),
    )
}

fn closed(n_cells: usize) -> SolverConfig {
    SolverConfig {
        n_cells,
        boundaries: Boundaries::Closed,
        friction: FrictionModel::Constant { factor: 0.0 },
        ..SolverConfig::default()
    }
}

fn run_steps(mut s: SolverState, cfg: &SolverConfig, steps: usize) -> SolverState {
    let inlet = InletProfile::default();
    for _ in 0..steps {
        let dt = stable_dt(&s, &cfg.fluid, cfg.cfl);
        s = step(&s, cfg, &inlet, dt).unwrap();
    }
    s
}

fn run_to(mut s: SolverState, cfg: &SolverConfig, t: f64) -> SolverState {
    let inlet = InletProfile::default();
    while s.time < t {
        let dt = stable_dt(&s, &cfg.fluid, cfg.cfl).min(t - s.time);
        s = step(&s, cfg, &inlet, dt).unwrap();
    }
    s
}

fn bump(cfg: &SolverConfig, center: f64, width: f64, amp: f64) -> SolverState {
    let rho0 = cfg.outlet_density();
    let dx = cfg.dx();
    let rho = (0..cfg.n_cells)
        .map(|i| {
            let x = (i as f64 + 0.5) * dx;
            rho0 * (1.0 + amp * (-((x - center) / width).powi(2) / 2.0).exp())
        })
        .collect();
    SolverState::new(rho, vec![0.0; cfg.n_cells], 0.0, dx).unwrap()
}

fn right_centroid(s: &SolverState, rho0: f64, from: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, r) in s.density.iter().enumerate() {
        let x = (i as f64 + 0.5) * s.dx;
        if x > from {
            num += x * (r - rho0);
            den += r - rho0;
        }
    }
    num / den
}

fn criterion_7() -> Outcome {
    // mass over 1e5 steps, with friction on
    let mut cfg = closed(256);
    cfg.friction = FrictionModel::Constant { factor: 0.02 };
    let mut s = bump(&cfg, 2.5, 0.3, 0.01);
    s.velocity.iter_mut().enumerate().for_each(|(i, u)| *u = 5.0 * (i as f64 * 0.05).sin());
    let m0 = s.mass();
    let mass = (run_steps(s, &cfg, 100_000).mass() - m0).abs() / m0;

    // fixed points: resting gas in a closed pipe, uniform through-flow without friction
    let cfg = closed(256);
    let rho0 = cfg.outlet_density();
    let s = run_steps(SolverState::uniform(&cfg, rho0, 0.0).unwrap(), &cfg, 1000);
    let mut fixed = s.density.iter().map(|r| (r - rho0).abs() / rho0).fold(0.0, f64::max);
    fixed = fixed.max(s.velocity.iter().map(|u| u.abs()).fold(0.0, f64::max));
    let open = SolverConfig { friction: FrictionModel::Constant { factor: 0.0 }, ..SolverConfig::default() };
    let inlet = InletProfile { amplitude: 0.0, ..InletProfile::default() };
    let mut s = SolverState::uniform(&open, rho0, inlet.base).unwrap();
    for _ in 0..1000 {
        let dt = stable_dt(&s, &open.fluid, open.cfl);
        s = step(&s, &open, &inlet, dt).unwrap();
    }
    fixed = fixed.max(s.density.iter().map(|r| (r - rho0).abs() / rho0).fold(0.0, f64::max));
    fixed = fixed.max(s.velocity.iter().map(|u| (u - inlet.base).abs() / inlet.base).fold(0.0, f64::max));

    // self-convergence of density in L1 on 128 / 256 / 512 cells
    let t_end = 1.0e-3;
    let sols: Vec<Vec<f64>> = [128, 256, 512]
        .iter()
        .map(|&n| {
            let cfg = closed(n);
            run_to(bump(&cfg, 2.5, 0.25, 1e-3), &cfg, t_end).density
        })
        .collect();
    let l1 = |coarse: &[f64], fine: &[f64], dx: f64| {
        coarse
            .iter()
            .enumerate()
            .map(|(i, c)| (c - 0.5 * (fine[2 * i] + fine[2 * i + 1])).abs() * dx)
            .sum::<f64>()
    };
    let e1 = l1(&sols[0], &sols[1], 5.0 / 128.0);
    let e2 = l1(&sols[1], &sols[2], 5.0 / 256.0);
    let ratio = e1 / e2;

    // pulse speed on the default grid and a 4x refined one
    let a = cfg.fluid.sound_speed;
    let speed = |n: usize| {
        let cfg = closed(n);
        let (t1, t2) = (0.8e-3, 1.8e-3);
        let s1 = run_to(bump(&cfg, 1.5, 0.2, 1e-3), &cfg, t1);
        let c1 = right_centroid(&s1, rho0, 1.5);
        let s2 = run_to(s1, &cfg, t2);
        (right_centroid(&s2, rho0, 1.5) - c1) / (t2 - t1)
    };
    let (v, v_fine) = (speed(256), speed(1024));
    let dev = ((v - a) / a).abs().max(((v_fine - a) / a).abs()).max(((v - v_fine) / v_fine).abs());

    outcome(
        mass <= 1e-9 && fixed <= 1e-14 && (ratio - 2.0).abs() <= 0.4 && dev <= 0.05,
        format!(
            "mass drift {mass:.1e} (<=1e-9), fixed point {fixed:.1e} (<=1e-14), L1 ratio {ratio:.3} (2 +/- 0.4), \
             pulse speed {v:.1} / refined {v_fine:.1} m/s vs a = {a} (max dev {:.2}% <= 5%)",
            dev * 100.0
        ),
    )
}

fn criterion_8() -> Outcome {
    let errs: Vec<f64> = [4e-3, 2e-3, 1e-3]
        .iter()
        .map(|&dt| {
            let m = (2.0 / dt) as usize + 1;
            let x = DMatrix::from_fn(1, m, |_, k| (k as f64 * dt).sin());
            let d = estimate_derivatives(&x, dt).unwrap();
            (0..m).map(|k| (d[(0, k)] - (k as f64 * dt).cos()).abs()).fold(0.0, f64::max)
        })
        .collect();
    let o1 = (errs[0] / errs[1]).log2();
    let o2 = (errs[1] / errs[2]).log2();
    outcome(
        o1 >= 1.9 && o2 >= 1.9,
        format!("observed orders {o1:.3}, {o2:.3} (>=1.9)"),
    )
}

fn criterion_9(report: &Report) -> Outcome {
    let counts = SplitRatios::default().counts(1000).unwrap();
    let config = ExperimentConfig::default();
    let data = prepare_dataset(&config).unwrap().data;
    let (train, val, test) = split_sequences(&data, &config.bench.split).unwrap();
    let basis = config.reduction.rank_policy().apply(&fit_basis(&train).unwrap()).unwrap();
    let model = fit_method("opinf", Some(&basis), &train, &val, &config).unwrap().model;
    let history = train.concat(&val).unwrap();
    let blocked = model.forecast(&history, test.n_times(), 10).unwrap();
    let unblocked = model.forecast(&history, test.n_times(), test.n_times()).unwrap();
    let identical = blocked.iter().zip(unblocked.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    let train_fp = basis.fingerprint();
    let reported = report.basis.as_ref().map(|b| b.fingerprint.clone());
    let after = report.method("opinf").and_then(|m| m.basis_fingerprint.clone());
    let kept = model.basis.as_ref().map(PodBasis::fingerprint) == Some(train_fp.clone())
        && reported.as_deref() == Some(train_fp.as_str())
        && after.as_deref() == Some(train_fp.as_str());
    outcome(
        counts == (500, 100, 400) && identical && kept,
        format!(
            "split {counts:?} (500/100/400), blocked == unblocked bitwise: {identical}, \
             basis fingerprint preserved after retraining: {kept}"
        ),
    )
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pipe-rom")).args(args).output().unwrap()
}

fn report_hash_from(dir: &Path) -> Option<String> {
    let text = std::fs::read_to_string(dir.join("report.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v["report_hash"].as_str().map(String::from)
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let ok = |o: std::process::Output| o.status.success();
    let mut fine = ok(cli(&["datagen", "--out", &p("a.snp1")])) && ok(cli(&["datagen", "--out", &p("b.snp1")]));
    let same_data = fine && std::fs::read(p("a.snp1")).unwrap() == std::fs::read(p("b.snp1")).unwrap();
    fine &= ok(cli(&["bench", "--out", &p("r1")])) && ok(cli(&["bench", "--out", &p("r2")]));
    let h1 = report_hash_from(&dir.path().join("r1"));
    let h2 = report_hash_from(&dir.path().join("r2"));
    let same_hash = h1.is_some() && h1 == h2;
    outcome(
        fine && same_data && same_hash,
        format!("datagen byte-identical: {same_data}, bench report hash stable: {same_hash} ({})", h1.unwrap_or_default()),
    )
}

fn criterion_11(report: &Report) -> Outcome {
    match report.method("opinf").filter(|m| m.is_ok()) {
        Some(m) => {
            let slope = trend_slope(&report.test_times, &m.error_curve_pa);
            outcome(
                slope >= 0.0,
                format!(
                    "opinf pressure error trend {slope:.3e} Pa/s (>=0); first {:.3e}, last {:.3e} Pa",
                    m.error_curve_pa[0],
                    m.error_curve_pa[m.error_curve_pa.len() - 1]
                ),
            )
        }
        None => outcome(false, "opinf did not produce an error curve".into()),
    }
}

fn main() {
    let start = Instant::now();
    let report = run_experiment(&ExperimentConfig::default()).unwrap();
    let bench_secs = start.elapsed().as_secs_f64();

    let results = [
        ("1 POD correctness", criterion_1()),
        ("2 energy-rank selection", criterion_2()),
        ("3 OpInf operator recovery", criterion_3()),
        ("4 Tikhonov solver", criterion_4()),
        ("5 benchmark ordering", criterion_5(&report, bench_secs)),
        ("6 inference speed", criterion_6()),
        ("7 surrogate solver physics", criterion_7()),
        ("8 derivative estimation", criterion_8()),
        ("9 protocol fidelity", criterion_9(&report)),
        ("10 determinism", criterion_10()),
        ("11 error-curve degradation", criterion_11(&report)),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("[{}] criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
