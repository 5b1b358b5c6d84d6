//! Acceptance gate: every criterion at its stated tolerance, one line each.
//! Runs without the libtest harness so the lines are always printed.

use std::path::PathBuf;
use std::process::{Command as Process, Output};
use std::time::{Duration, Instant};

use aiss_cli::{load_config, run, Command, Config};
use aiss_core::comparison::{make_sigma, validate_kinf, ComparisonFn, GainClass};
use aiss_core::expr::{parse, Expr, Schema, UnaryOp};
use aiss_core::intervals::{
    brute_force_intervals, find_intervals, loop_gain, AlgorithmParams, SmallGainInterval, SmallGainIntervals,
    Termination,
};
use aiss_core::regions::{build_region, InnerComposition};
use aiss_core::sim::{
    integrate, monte_carlo_aiss, replay_run, EnsembleOptions, InputSignal, VectorField, DEFAULT_BLOWUP,
};
use aiss_core::verify::{check_iss_lyapunov, divergence, AxisBox, LyapunovCertificate, LyapunovOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Verdict = Result<String, String>;

fn g(text: &str) -> ComparisonFn {
    ComparisonFn::parse(text, GainClass::KInf).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn config(name: &str) -> Config {
    load_config(&fixture(name)).unwrap()
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    if elapsed.as_secs_f64() < limit_s {
        Ok(())
    } else {
        Err(format!("took {:.2} s, limit {limit_s} s", elapsed.as_secs_f64()))
    }
}

const SUITE: [&str; 5] = ["s^2", "sqrt(s)", "s/2", "2*s", "s + 0.1*sin(pi*s)"];
const SINE: &str = "s + 0.1*sin(pi*s)";

fn capped() -> AlgorithmParams {
    AlgorithmParams {
        max_outer_iters: 8,
        ..AlgorithmParams::default()
    }
}

fn c1_oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let params = AlgorithmParams::default();
    let tol = params.delta.max(2e-5);
    let mut worst = 0.0f64;
    for text in SUITE {
        let found = find_intervals(&g(text), &g("s"), &params).map_err(|e| e.to_string())?;
        let brute = brute_force_intervals(&loop_gain(&g(text), &g("s")), 10.0, 1_000_000).map_err(|e| e.to_string())?;
        let seen: Vec<(f64, f64)> = found
            .intervals
            .iter()
            .filter(|iv| iv.lower < 10.0)
            .map(|iv| (iv.lower, iv.upper.min(10.0)))
            .collect();
        if seen.len() != brute.len() {
            return Err(format!(
                "{text}: {} intervals vs {} from the scan",
                seen.len(),
                brute.len()
            ));
        }
        for ((a, b), (c, d)) in seen.iter().zip(&brute) {
            worst = worst.max((a - c).abs()).max((b - d).abs());
            if (a - c).abs() > tol || (b - d).abs() > tol {
                return Err(format!("{text}: ({a}, {b}) vs ({c}, {d})"));
            }
        }
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "max endpoint gap {worst:.2e} <= {tol:.0e}, {:.2} s",
        start.elapsed().as_secs_f64()
    ))
}

fn c2_fixed_point_endpoints() -> Verdict {
    let mut checked = 0;
    for text in SUITE {
        let params = if text == SINE {
            capped()
        } else {
            AlgorithmParams::default()
        };
        let gamma = loop_gain(&g(text), &g("s"));
        let r = find_intervals(&g(text), &g("s"), &params).map_err(|e| e.to_string())?;
        for iv in &r.intervals {
            for m in [iv.lower, iv.upper].into_iter().filter(|m| m.is_finite()) {
                let gap = (gamma.eval(m).map_err(|e| e.to_string())? - m).abs();
                if gap > 1e-9 * m.max(1.0) {
                    return Err(format!("{text}: |γ(M) - M| = {gap:e} at M = {m}"));
                }
                checked += 1;
            }
        }
    }
    let sq = find_intervals(&g("s^2"), &g("s"), &AlgorithmParams::default()).map_err(|e| e.to_string())?;
    let iv = sq.intervals.first().ok_or("s^2: no interval")?;
    if sq.ell != 1 || iv.lower.abs() > 1e-6 || (iv.upper - 1.0).abs() > 1e-6 {
        return Err(format!("s^2: ell = {}, first interval {iv:?}", sq.ell));
    }
    let sine = find_intervals(&g(SINE), &g("s"), &capped()).map_err(|e| e.to_string())?;
    if sine.terminated_by != Termination::OuterCap || sine.intervals.len() < 3 {
        return Err(format!(
            "sine: {:?} with {} intervals",
            sine.terminated_by,
            sine.intervals.len()
        ));
    }
    for (iv, (lo, hi)) in sine.intervals.iter().zip([(1.0, 2.0), (3.0, 4.0), (5.0, 6.0)]) {
        if (iv.lower - lo).abs() > 1e-6 || (iv.upper - hi).abs() > 1e-6 {
            return Err(format!("sine: {iv:?} vs ({lo}, {hi})"));
        }
    }
    Ok(format!(
        "{checked} finite endpoints; s^2 -> (0, 1); sine -> (1,2), (3,4), (5,6)"
    ))
}

fn c3_sandwich() -> Verdict {
    let start = Instant::now();
    let mut pairs: Vec<(String, String, AlgorithmParams)> = SUITE
        .iter()
        .map(|t| {
            let p = if *t == SINE {
                capped()
            } else {
                AlgorithmParams::default()
            };
            (t.to_string(), "s".to_string(), p)
        })
        .collect();
    let gap = config("gap.json");
    pairs.push((
        gap.problem.gamma12.text.clone(),
        gap.problem.gamma21.text.clone(),
        gap.algorithm,
    ));
    let mut min_margin = f64::INFINITY;
    let mut intervals = 0;
    for (g12, g21, params) in &pairs {
        let (g12, g21) = (g(g12), g(g21));
        let r = find_intervals(&g12, &g21, params).map_err(|e| e.to_string())?;
        let sigma = make_sigma(&g12, &g21, params.inversion_tol);
        for iv in &r.intervals {
            intervals += 1;
            let hi = if iv.upper.is_finite() {
                iv.upper
            } else {
                (10.0 * iv.lower).max(10.0)
            };
            for j in 1..=100 {
                let r = iv.lower + (hi - iv.lower) * j as f64 / 101.0;
                let m = sigma.sandwich(r).map_err(|e| e.to_string())?.margin();
                min_margin = min_margin.min(m);
                if m.is_nan() || m <= 0.0 {
                    return Err(format!("margin {m:e} at r = {r} in {iv:?}"));
                }
            }
        }
    }
    within(start.elapsed(), 1.0)?;
    Ok(format!(
        "{intervals} intervals x 100 samples, min margin {min_margin:.3e}, {:.3} s",
        start.elapsed().as_secs_f64()
    ))
}

fn c4_inversion_round_trip() -> Verdict {
    let gap = config("gap.json");
    let linear = config("linear.json");
    let mut texts: Vec<String> = SUITE.iter().map(|t| t.to_string()).collect();
    for cfg in [&gap, &linear] {
        texts.push(cfg.problem.gamma12.text.clone());
        texts.push(cfg.problem.gamma21.text.clone());
        texts.extend(
            cfg.problem
                .system
                .iter()
                .flat_map(|s| s.gains.iter().map(|g| g.text.clone())),
        );
    }
    texts.sort();
    texts.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut gains = 0;
    let mut worst = 0.0f64;
    for text in &texts {
        let gain = g(text);
        if !validate_kinf(&gain, 1000, 1e13).passed {
            continue;
        }
        gains += 1;
        let top = gain.eval(1e6).map_err(|e| e.to_string())?;
        for i in 0..1000 {
            // half uniform on [0, g(1e6)], half log-uniform to cover small y
            let y = if i % 2 == 0 {
                rng.gen_range(0.0..=top)
            } else {
                (rng.gen_range((1e-9f64).ln()..top.ln())).exp()
            };
            let x = gain.invert(y, 1e-12).map_err(|e| format!("{text}: {e}"))?;
            let err = (gain.eval(x).map_err(|e| e.to_string())? - y).abs() / y.max(1.0);
            worst = worst.max(err);
            if err > 1e-9 {
                return Err(format!("{text}: relative error {err:e} at y = {y}"));
            }
        }
    }
    Ok(format!(
        "{gains} validated gains x 1000 y, worst scaled error {worst:.1e}"
    ))
}

fn c5_thresholds() -> Verdict {
    let iv = SmallGainIntervals {
        intervals: vec![SmallGainInterval { lower: 1.0, upper: 2.0 }],
        ell: 1,
        terminated_by: Termination::DivergentAbove,
        outer_iterations: 1,
        fixed_steps: 0,
        unconverged_limits: 0,
        diagnostics: Vec::new(),
        monotone: true,
    };
    let r = build_region(1, &iv, &g("s/2"), &g("s/3"), InnerComposition::AsPrinted).map_err(|e| e.to_string())?;
    if r.a_thresholds == (1.0, 1.0 / 3.0) && r.b_thresholds == (2.0, 2.0 / 3.0) {
        Ok(format!("A {:?}, B {:?}", r.a_thresholds, r.b_thresholds))
    } else {
        Err(format!("A {:?}, B {:?}", r.a_thresholds, r.b_thresholds))
    }
}

fn negate(e: &Expr) -> Expr {
    Expr::Unary(UnaryOp::Neg, Box::new(e.clone()))
}

fn c6_lyapunov() -> Verdict {
    let start = Instant::now();
    let cfg = config("linear.json");
    let spec = &cfg.problem.system.as_ref().ok_or("linear fixture has no system")?.spec;
    let v = &cfg.verify;
    let opts = LyapunovOptions {
        samples: 10_000,
        state_box: v.state_box.clone().unwrap_or_else(|| AxisBox::cube(2, 10.0)),
        input_magnitude: v.lyapunov_input_magnitude,
        fd_step: v.fd_step,
        fd_slack: v.fd_slack,
    };
    let flipped1: Vec<Expr> = spec.f1.iter().map(negate).collect();
    let flipped2: Vec<Expr> = spec.f2.iter().map(negate).collect();
    let mut lines = Vec::new();
    for (label, f1, f2) in [("stable", &spec.f1, &spec.f2), ("flipped", &flipped1, &flipped2)] {
        let certs = [
            LyapunovCertificate {
                v_self: &spec.v1,
                v_other: &spec.v2,
                field: f1,
                gamma_ij: &spec.gamma12,
                gamma_i: &spec.gamma1,
                alpha_i: &spec.alpha1,
                n_inputs: 2,
                input_slots: 0..1,
            },
            LyapunovCertificate {
                v_self: &spec.v2,
                v_other: &spec.v1,
                field: f2,
                gamma_ij: &spec.gamma21,
                gamma_i: &spec.gamma2,
                alpha_i: &spec.alpha2,
                n_inputs: 2,
                input_slots: 1..2,
            },
        ];
        for (i, cert) in certs.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(60 + i as u64);
            let r = check_iss_lyapunov(cert, &opts, &mut rng).map_err(|e| e.to_string())?;
            let frac = r.violation_fraction();
            let ok = if label == "stable" {
                r.violation_count == 0
            } else {
                frac > 0.95
            };
            if !ok {
                return Err(format!(
                    "{label} subsystem {}: {} of {} triggered points violate",
                    i + 1,
                    r.violation_count,
                    r.checked_points
                ));
            }
            lines.push(format!("{label}/{}: {}/{}", i + 1, r.violation_count, r.checked_points));
        }
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "violations {}, {:.2} s",
        lines.join(", "),
        start.elapsed().as_secs_f64()
    ))
}

fn c7_divergence() -> Verdict {
    let schema = Schema::field(2, 0);
    let f = vec![
        parse("x1*(1 - x1^2)", &schema).unwrap(),
        parse("0.5*x2", &schema).unwrap(),
    ];
    let rho = parse("1", &Schema::state_block(1, 2)).unwrap();
    let mut worst = 0.0f64;
    for x in AxisBox::cube(2, 2.0).grid(&[32, 32]) {
        let exact = 1.0 - 3.0 * x[0] * x[0] + 0.5;
        let d = divergence(&rho, &f, &x, &[], 1e-5).map_err(|e| e.to_string())?;
        worst = worst.max((d - exact).abs());
    }
    if worst <= 1e-6 {
        Ok(format!("1024 grid points, max error {worst:.1e}"))
    } else {
        Err(format!("max error {worst:e}"))
    }
}

fn c8_integrator() -> Verdict {
    let decay = VectorField::new(1, 0, vec![parse("-x1", &Schema::field(1, 0)).unwrap()]).unwrap();
    let err = |h: f64| {
        let traj = integrate(&decay, &[1.0], &InputSignal::zero(0), 1.0, h, DEFAULT_BLOWUP).unwrap();
        (traj.last_state()[0] - (-1.0f64).exp()).abs()
    };
    let e_fine = err(1e-3);
    if e_fine > 1e-6 {
        return Err(format!("endpoint error {e_fine:e} at h = 1e-3"));
    }
    // near h = 1e-3 the error is at round-off level, so the order is
    // measured where truncation error dominates
    let ratio = err(0.1) / err(0.05);
    if !(12.0..=20.0).contains(&ratio) {
        return Err(format!("error ratio {ratio} for h = 0.1 -> 0.05"));
    }
    let schema = Schema::field(2, 0);
    let osc = VectorField::new(
        2,
        0,
        vec![parse("x2", &schema).unwrap(), parse("-x1", &schema).unwrap()],
    )
    .unwrap();
    let period = 2.0 * std::f64::consts::PI;
    let traj = integrate(
        &osc,
        &[1.0, 0.0],
        &InputSignal::zero(0),
        period,
        period / 6000.0,
        DEFAULT_BLOWUP,
    )
    .map_err(|e| e.to_string())?;
    let drift = (0..traj.len())
        .map(|i| {
            let x = traj.state(i);
            (x[0] * x[0] + x[1] * x[1] - 1.0).abs()
        })
        .fold(0.0, f64::max);
    if drift >= 1e-6 {
        return Err(format!("energy drift {drift:e}"));
    }
    Ok(format!(
        "error {e_fine:.1e} at h = 1e-3, ratio {ratio:.2}, energy drift {drift:.1e}"
    ))
}

fn ensemble(cfg: &Config) -> EnsembleOptions {
    let s = &cfg.sim;
    EnsembleOptions {
        ic_box: s.ic_box.clone().unwrap(),
        u_levels: s.u_levels.clone(),
        t_end: s.t_end,
        h: s.h,
        tail_fraction: s.tail_fraction,
        input: s.input,
        blowup: s.blowup,
        radius_tol: s.radius_tol,
        radius_gain: s.radius_gain,
    }
}

fn c9_almost_iss() -> Verdict {
    let start = Instant::now();
    let linear = config("linear.json");
    let field = linear.problem.system.as_ref().unwrap().spec.vector_field();
    let opts = ensemble(&linear);
    if opts.u_levels != [0.0, 0.1, 0.5] || linear.sim.n_runs != 500 {
        return Err("linear fixture must use u levels {0, 0.1, 0.5} and 500 runs".into());
    }
    let r = monte_carlo_aiss(&field, 500, &opts, linear.sim.seed).map_err(|e| e.to_string())?;
    if r.fraction_converged != 1.0 {
        return Err(format!("linear: fraction_converged {}", r.fraction_converged));
    }
    let pts = &r.empirical_gain_points;
    if !pts
        .windows(2)
        .all(|w| w[0].u_sup < w[1].u_sup && w[0].radius <= w[1].radius)
    {
        return Err(format!("linear: envelope not monotone {pts:?}"));
    }
    let envelope: Vec<String> = pts.iter().map(|p| format!("({}, {:.3e})", p.u_sup, p.radius)).collect();

    let gap = config("gap.json");
    let iv = run(Command::CheckDpi, &gap, gap.sim.seed, false).map_err(|e| e.to_string())?;
    let ell = iv.report["sections"]["intervals"]["ell"].as_u64().unwrap_or(0);
    if ell != 2 {
        return Err(format!(
            "gap: small-gain condition holds on {ell} intervals, expected 2"
        ));
    }
    if gap.verify.a_k_inner_composition != InnerComposition::AsPrinted {
        return Err("gap: fixture must use the default A_k composition".into());
    }
    if iv.report["sections"]["check_dpi"]["status"] != "pass" {
        return Err("gap: density propagation check failed".into());
    }
    let lyap = run(Command::CheckLyapunov, &gap, gap.sim.seed, false).map_err(|e| e.to_string())?;
    if lyap.violations {
        return Err("gap: ISS-Lyapunov check failed".into());
    }
    let spec = &gap.problem.system.as_ref().unwrap().spec;
    let gopts = ensemble(&gap);
    let r = monte_carlo_aiss(&spec.vector_field(), gap.sim.n_runs, &gopts, gap.sim.seed).map_err(|e| e.to_string())?;
    if r.fraction_converged < 0.99 {
        return Err(format!("gap: fraction_converged {}", r.fraction_converged));
    }
    for nc in &r.nonconverged_seeds {
        let again = replay_run(&spec.vector_field(), &gopts, r.seed, nc.run).map_err(|e| e.to_string())?;
        if again.x0 != nc.x0 {
            return Err(format!("gap: run {} does not replay", nc.run));
        }
    }
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "linear: fraction 1, envelope {}; gap: ell = 2, DPI ok, fraction {} ({} non-converged); {:.1} s",
        envelope.join(" "),
        r.fraction_converged,
        r.nonconverged_seeds.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn aiss_bin(args: &[&str]) -> std::process::Child {
    Process::new(env!("CARGO_BIN_EXE_aiss"))
        .args(args)
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .expect("spawn aiss")
}

fn report_json(out: &Output) -> Result<Value, String> {
    serde_json::from_slice(&out.stdout).map_err(|e| format!("report is not JSON: {e}"))
}

fn c10_negative_control(out: Output) -> Verdict {
    let code = out.status.code();
    let report = report_json(&out)?;
    let frac = report["sections"]["aiss"]["fraction_converged"].as_f64();
    if code == Some(2) && frac == Some(0.0) {
        Ok("report exit 2, fraction_converged 0".into())
    } else {
        Err(format!("exit {code:?}, fraction_converged {frac:?}"))
    }
}

fn c11_determinism(a: Output, b: Output) -> Verdict {
    if a.status.code() != b.status.code() {
        return Err("exit codes differ".into());
    }
    let strip = |out: &Output| -> Result<Value, String> {
        let mut v = report_json(out)?;
        v["provenance"]
            .as_object_mut()
            .ok_or("no provenance")?
            .remove("timestamp")
            .ok_or("no timestamp")?;
        Ok(v)
    };
    let (x, y) = (strip(&a)?, strip(&b)?);
    if x == y {
        Ok(format!(
            "identical reports ({} bytes), exit {:?}",
            a.stdout.len(),
            a.status.code()
        ))
    } else {
        Err("reports differ outside the timestamp".into())
    }
}

fn main() {
    // the CLI runs are the slowest part; start them first
    let unstable = fixture("unstable.json");
    let linear = fixture("linear.json");
    let neg = aiss_bin(&["report", "--config", unstable.to_str().unwrap()]);
    let det_a = aiss_bin(&["report", "--config", linear.to_str().unwrap(), "--seed", "11"]);
    let det_b = aiss_bin(&["report", "--config", linear.to_str().unwrap(), "--seed", "11"]);

    let mut results: Vec<(u32, &str, Verdict)> = vec![
        (1, "interval search matches dense scan", c1_oracle_equivalence()),
        (2, "endpoints are fixed points", c2_fixed_point_endpoints()),
        (3, "sandwich inequality", c3_sandwich()),
        (4, "inversion round trip", c4_inversion_round_trip()),
        (5, "A/B thresholds by hand", c5_thresholds()),
        (6, "ISS-Lyapunov checker", c6_lyapunov()),
        (7, "divergence fidelity", c7_divergence()),
        (8, "integrator order and accuracy", c8_integrator()),
        (9, "almost-ISS ensembles", c9_almost_iss()),
    ];
    let neg = neg.wait_with_output().expect("unstable report");
    results.push((10, "negative control", c10_negative_control(neg)));
    let (a, b) = (
        det_a.wait_with_output().expect("report a"),
        det_b.wait_with_output().expect("report b"),
    );
    results.push((11, "report determinism", c11_determinism(a, b)));

    let mut failed = 0;
    for (n, name, verdict) in &results {
        match verdict {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
