//! Command pipeline: each command requests a list of report sections;
//! shared intermediate results (intervals, regions) are computed once.

use aiss_core::comparison::{make_sigma, validate_with, ValidationOptions};
use aiss_core::intervals::{find_intervals, SmallGainIntervals};
use aiss_core::regions::{build_region, RegionSpec};
use aiss_core::sim::{
    check_theorem1, monte_carlo_aiss, run_rng, run_trajectories, EnsembleOptions, Theorem1Options, Trajectory,
};
use aiss_core::verify::{
    check_dpi, check_dpi_containment, check_iss_lyapunov, check_sgc_on_interval, input_set, AxisBox, DpiOptions,
    LyapunovCertificate, LyapunovOptions,
};
use log::{debug, info};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{Config, System};
use crate::error::CliError;
use crate::output::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Validate,
    Intervals,
    Regions,
    CheckSgc,
    CheckLyapunov,
    CheckDpi,
    Simulate,
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Validation,
    Intervals,
    Regions,
    CheckSgc,
    CheckLyapunov,
    CheckDpi,
    Theorem1,
    Aiss,
}

impl Section {
    fn key(self) -> &'static str {
        match self {
            Section::Validation => "validation",
            Section::Intervals => "intervals",
            Section::Regions => "regions",
            Section::CheckSgc => "check_sgc",
            Section::CheckLyapunov => "check_lyapunov",
            Section::CheckDpi => "check_dpi",
            Section::Theorem1 => "theorem1",
            Section::Aiss => "aiss",
        }
    }

    fn needs_system(self) -> bool {
        matches!(
            self,
            Section::CheckLyapunov | Section::CheckDpi | Section::Theorem1 | Section::Aiss
        )
    }
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Intervals => "intervals",
            Command::Regions => "regions",
            Command::CheckSgc => "check-sgc",
            Command::CheckLyapunov => "check-lyapunov",
            Command::CheckDpi => "check-dpi",
            Command::Simulate => "simulate",
            Command::Report => "report",
        }
    }

    fn sections(self) -> &'static [Section] {
        use Section::*;
        match self {
            Command::Validate => &[Validation],
            Command::Intervals => &[Validation, Intervals],
            Command::Regions => &[Validation, Intervals, Regions],
            Command::CheckSgc => &[Validation, Intervals, CheckSgc],
            Command::CheckLyapunov => &[Validation, CheckLyapunov],
            Command::CheckDpi => &[Validation, Intervals, Regions, CheckDpi],
            Command::Simulate => &[Validation, Intervals, Regions, Theorem1, Aiss],
            Command::Report => &[
                Validation,
                Intervals,
                Regions,
                CheckSgc,
                CheckLyapunov,
                CheckDpi,
                Theorem1,
                Aiss,
            ],
        }
    }
}

pub const SCHEMA_VERSION: u32 = 1;

/// `A_k` with both thresholds below this is treated as the origin alone
/// (the first lower endpoint is only a numerical zero).
pub const TRIVIAL_LEVEL: f64 = 1e-6;

pub struct Outcome {
    pub report: Value,
    pub violations: bool,
    pub tables: Vec<Table>,
}

impl Outcome {
    pub fn exit_code(&self) -> u8 {
        if self.violations {
            2
        } else {
            0
        }
    }
}

/// Run `command`; `with_csv` controls whether plot tables are produced.
pub fn run(command: Command, cfg: &Config, seed: u64, with_csv: bool) -> Result<Outcome, CliError> {
    let mut ctx = Ctx {
        cfg,
        seed,
        with_csv,
        intervals: None,
        regions: None,
        tables: Vec::new(),
    };
    let mut sections = Map::new();
    let mut violations = false;
    let mut blocked: Option<&str> = None;
    for &section in command.sections() {
        let body = if let Some(reason) = blocked {
            skipped(reason)
        } else if section.needs_system() && cfg.problem.system.is_none() {
            if command != Command::Report {
                return Err(CliError::Schema {
                    path: "$.problem.f1".into(),
                    message: format!("dynamics and certificates are required by `{}`", command.name()),
                });
            }
            skipped("no dynamics in $.problem")
        } else {
            info!("running {}", section.key());
            let (passed, body) = ctx.section(section)?;
            violations |= !passed;
            if section == Section::Validation && !passed {
                blocked = Some("validation failed");
            }
            with_status(body, if passed { "pass" } else { "violations" })
        };
        sections.insert(section.key().into(), body);
    }
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": command.name(),
        "status": if violations { "violations" } else { "pass" },
        "provenance": provenance(cfg, seed),
        "sections": sections,
    });
    Ok(Outcome {
        report,
        violations,
        tables: ctx.tables,
    })
}

fn skipped(reason: &str) -> Value {
    json!({ "status": "skipped", "reason": reason })
}

fn with_status(body: Value, status: &str) -> Value {
    let mut map = Map::new();
    map.insert("status".into(), status.into());
    match body {
        Value::Object(obj) => map.extend(obj),
        other => {
            map.insert("result".into(), other);
        }
    }
    Value::Object(map)
}

fn provenance(cfg: &Config, seed: u64) -> Value {
    json!({
        "tool": "aiss",
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": cfg.sha256,
        "timestamp": chrono::Utc::now().to_rfc3339(),
        "seed": seed,
        "settings": {
            "algorithm": cfg.algorithm,
            "verify": cfg.verify,
            "sim": cfg.sim,
        },
    })
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

/// Stream numbers for the checks' random generators.
mod streams {
    pub const STORAGE: u64 = 1 << 40;
    pub const LYAPUNOV: u64 = 2 << 40;
    pub const CONTAINMENT: u64 = 3 << 40;
}

struct Ctx<'a> {
    cfg: &'a Config,
    seed: u64,
    with_csv: bool,
    intervals: Option<SmallGainIntervals>,
    regions: Option<Vec<RegionSpec>>,
    tables: Vec<Table>,
}

impl Ctx<'_> {
    fn system(&self) -> &System {
        self.cfg.problem.system.as_ref().expect("checked by caller")
    }

    fn section(&mut self, s: Section) -> Result<(bool, Value), CliError> {
        match s {
            Section::Validation => Ok(self.validation()),
            Section::Intervals => self.intervals_section(),
            Section::Regions => self.regions_section(),
            Section::CheckSgc => self.sgc_section(),
            Section::CheckLyapunov => self.lyapunov_section(),
            Section::CheckDpi => self.dpi_section(),
            Section::Theorem1 => self.theorem1_section(),
            Section::Aiss => self.aiss_section(),
        }
    }

    fn validation(&mut self) -> (bool, Value) {
        let opts = ValidationOptions {
            grid_points: self.cfg.verify.kinf_grid_points,
            s_max: self.cfg.verify.kinf_s_max,
            ..ValidationOptions::default()
        };
        let p = &self.cfg.problem;
        let mut gains = vec![&p.gamma12, &p.gamma21];
        if let Some(sys) = &p.system {
            gains.extend(&sys.gains);
        }
        let mut passed = true;
        let gain_reports: Vec<Value> = gains
            .iter()
            .map(|g| {
                let r = validate_with(&g.func, &opts);
                passed &= r.passed;
                if !r.passed {
                    info!("{} ({}) failed validation", g.path, g.text);
                }
                json!({ "path": g.path, "expr": g.text, "report": to_value(&r) })
            })
            .collect();
        let mut body = json!({ "gains": gain_reports });
        if let Some(sys) = &p.system {
            let mut rng = run_rng(self.seed, streams::STORAGE);
            let v = &self.cfg.verify;
            let storage: Vec<Value> = [
                ("$.problem.v1", &sys.v1_text, &sys.spec.v1),
                ("$.problem.v2", &sys.v2_text, &sys.spec.v2),
            ]
            .into_iter()
            .map(|(path, text, f)| {
                let r = f.check_positive_definite(v.storage_half_width, v.storage_samples, &mut rng);
                passed &= r.passed;
                json!({ "path": path, "expr": text, "report": to_value(&r) })
            })
            .collect();
            let equilibrium = match sys.spec.validate() {
                Ok(()) => json!({ "passed": true }),
                Err(e) => {
                    passed = false;
                    json!({ "passed": false, "message": e.to_string() })
                }
            };
            body["storage"] = Value::Array(storage);
            body["equilibrium"] = equilibrium;
        }
        (passed, body)
    }

    fn intervals(&mut self) -> Result<&SmallGainIntervals, CliError> {
        if self.intervals.is_none() {
            let p = &self.cfg.problem;
            let r = find_intervals(&p.gamma12.func, &p.gamma21.func, &self.cfg.algorithm).map_err(CliError::compute)?;
            debug!("found {} intervals, stopped by {:?}", r.ell, r.terminated_by);
            self.intervals = Some(r);
        }
        Ok(self.intervals.as_ref().expect("just set"))
    }

    fn regions(&mut self) -> Result<&[RegionSpec], CliError> {
        if self.regions.is_none() {
            let composition = self.cfg.verify.a_k_inner_composition;
            let p = &self.cfg.problem;
            let (g12, g21) = (p.gamma12.func.clone(), p.gamma21.func.clone());
            let iv = self.intervals()?.clone();
            let list = (1..=iv.ell)
                .map(|k| build_region(k, &iv, &g12, &g21, composition))
                .collect::<Result<Vec<_>, _>>()
                .map_err(CliError::compute)?;
            self.regions = Some(list);
        }
        Ok(self.regions.as_deref().expect("just set"))
    }

    fn intervals_section(&mut self) -> Result<(bool, Value), CliError> {
        let iv = self.intervals()?.clone();
        if self.with_csv {
            self.tables.push(intervals_table(&iv));
            self.tables.push(self.gains_table(&iv)?);
        }
        Ok((true, to_value(&iv)))
    }

    fn gains_table(&self, iv: &SmallGainIntervals) -> Result<Table, CliError> {
        let p = &self.cfg.problem;
        let sigma = make_sigma(&p.gamma12.func, &p.gamma21.func, self.cfg.algorithm.inversion_tol);
        let top = iv
            .intervals
            .iter()
            .flat_map(|i| [i.lower, i.upper])
            .filter(|v| v.is_finite())
            .fold(5.0f64, f64::max)
            * 2.0;
        let mut table = Table::new("gains.csv", &["r", "gamma21", "gamma12_inv", "sigma"]);
        for j in 0..=400 {
            let r = top * j as f64 / 400.0;
            let sw = sigma.sandwich(r).map_err(CliError::compute)?;
            table.push(vec![r, sw.gamma21, sw.gamma12_inv, sw.sigma]);
        }
        Ok(table)
    }

    fn regions_section(&mut self) -> Result<(bool, Value), CliError> {
        let composition = self.cfg.verify.a_k_inner_composition;
        let regions = self.regions()?;
        Ok((
            true,
            json!({ "a_k_inner_composition": composition.name(), "regions": to_value(&regions) }),
        ))
    }

    fn sgc_section(&mut self) -> Result<(bool, Value), CliError> {
        let iv = self.intervals()?.clone();
        let p = &self.cfg.problem;
        let n = self.cfg.verify.sgc_samples;
        let sigma = make_sigma(&p.gamma12.func, &p.gamma21.func, self.cfg.algorithm.inversion_tol);
        let mut passed = true;
        let mut entries = Vec::new();
        for (i, itv) in iv.intervals.iter().enumerate() {
            let r = check_sgc_on_interval(&p.gamma12.func, &p.gamma21.func, itv.lower, itv.upper, n)
                .map_err(CliError::compute)?;
            let hi = if itv.upper.is_finite() {
                itv.upper
            } else {
                (10.0 * itv.lower).max(10.0)
            };
            let mut sandwich_min = f64::INFINITY;
            for j in 1..=n {
                let r = itv.lower + (hi - itv.lower) * j as f64 / (n + 1) as f64;
                sandwich_min = sandwich_min.min(sigma.sandwich(r).map_err(CliError::compute)?.margin());
            }
            let ok = r.passed() && r.min_margin > 0.0 && sandwich_min > 0.0;
            passed &= ok;
            entries.push(json!({
                "k": i + 1,
                "lower": itv.lower,
                "upper": itv.upper,
                "passed": ok,
                "sgc": to_value(&r),
                "sandwich_min_margin": sandwich_min,
            }));
        }
        Ok((passed, json!({ "intervals": entries })))
    }

    fn lyapunov_section(&mut self) -> Result<(bool, Value), CliError> {
        let sys = self.system();
        let spec = &sys.spec;
        let v = &self.cfg.verify;
        let opts = LyapunovOptions {
            samples: v.lyapunov_samples,
            state_box: v.state_box.clone().unwrap_or_else(|| AxisBox::cube(spec.n(), 10.0)),
            input_magnitude: v.lyapunov_input_magnitude,
            fd_step: v.fd_step,
            fd_slack: v.fd_slack,
        };
        let certs = [
            LyapunovCertificate {
                v_self: &spec.v1,
                v_other: &spec.v2,
                field: &spec.f1,
                gamma_ij: &spec.gamma12,
                gamma_i: &spec.gamma1,
                alpha_i: &spec.alpha1,
                n_inputs: spec.m(),
                input_slots: 0..spec.m1,
            },
            LyapunovCertificate {
                v_self: &spec.v2,
                v_other: &spec.v1,
                field: &spec.f2,
                gamma_ij: &spec.gamma21,
                gamma_i: &spec.gamma2,
                alpha_i: &spec.alpha2,
                n_inputs: spec.m(),
                input_slots: spec.m1..spec.m(),
            },
        ];
        let mut passed = true;
        let mut subs = Vec::new();
        for (i, cert) in certs.iter().enumerate() {
            let mut rng = run_rng(self.seed, streams::LYAPUNOV + i as u64);
            let r = check_iss_lyapunov(cert, &opts, &mut rng).map_err(CliError::compute)?;
            passed &= r.passed();
            subs.push(json!({
                "subsystem": i + 1,
                "violation_fraction": r.violation_fraction(),
                "report": to_value(&r),
            }));
        }
        Ok((passed, json!({ "subsystems": subs })))
    }

    fn dpi_section(&mut self) -> Result<(bool, Value), CliError> {
        let regions = self.regions()?.to_vec();
        let sys = self.system();
        let spec = &sys.spec;
        let v = &self.cfg.verify;
        let opts = DpiOptions {
            grid: vec![v.dpi_grid; spec.n()],
            inputs: input_set(spec.m(), &v.dpi_input_magnitudes),
            fd_step: v.fd_step,
            fd_slack: v.fd_slack,
        };
        let field = spec.vector_field();
        let mut passed = true;
        let mut blocks = Vec::new();
        for (i, block) in spec.dpi_blocks.iter().enumerate() {
            let r = check_dpi(block, &field.exprs, &spec.v1, &spec.v2, &opts).map_err(CliError::compute)?;
            let a_k = regions.get(block.k - 1);
            let b_prev = if block.k >= 2 { regions.get(block.k - 2) } else { None };
            let mut rng = run_rng(self.seed, streams::CONTAINMENT + i as u64);
            let containment = match a_k {
                Some(a) => Some(
                    check_dpi_containment(
                        block,
                        Some(a),
                        b_prev,
                        &spec.v1,
                        &spec.v2,
                        &block.domain_box.scaled(2.0),
                        v.containment_samples,
                        &mut rng,
                    )
                    .map_err(CliError::compute)?,
                ),
                None => None,
            };
            let ok = r.passed && containment.as_ref().is_some_and(|c| c.passed());
            passed &= ok;
            blocks.push(json!({
                "k": block.k,
                "passed": ok,
                "region_exists": a_k.is_some(),
                "dpi": to_value(&r),
                "containment": to_value(&containment),
            }));
        }
        // every non-trivial A_k needs a density certificate
        let missing: Vec<usize> = regions
            .iter()
            .filter(|r| r.a_thresholds.0.max(r.a_thresholds.1) > TRIVIAL_LEVEL)
            .map(|r| r.k)
            .filter(|k| !spec.dpi_blocks.iter().any(|b| b.k == *k))
            .collect();
        passed &= missing.is_empty();
        Ok((passed, json!({ "blocks": blocks, "missing_blocks": missing })))
    }

    fn ensemble(&self) -> EnsembleOptions {
        let s = &self.cfg.sim;
        let n = self.system().spec.n();
        EnsembleOptions {
            ic_box: s.ic_box.clone().unwrap_or_else(|| AxisBox::cube(n, 5.0)),
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

    fn theorem1_section(&mut self) -> Result<(bool, Value), CliError> {
        let iv = self.intervals()?.clone();
        let ensemble = self.ensemble();
        let s = &self.cfg.sim;
        let t = &s.theorem1;
        let opts = Theorem1Options {
            ensemble,
            n_samples: t.n_samples,
            attempt_budget: t.attempt_budget,
            delta: t.delta,
            composition: self.cfg.verify.a_k_inner_composition,
            tail_points: t.tail_points,
            distance_radius: t.distance_radius,
            distance_resolution: t.distance_resolution,
        };
        let spec = &self.system().spec;
        let mut passed = true;
        let mut entries = Vec::new();
        for k in 1..=iv.ell {
            match check_theorem1(spec, &iv, k, &opts, self.seed) {
                Ok(r) => {
                    let ok = r.fraction_within >= s.min_fraction;
                    passed &= ok;
                    entries.push(json!({ "k": k, "passed": ok, "report": to_value(&r) }));
                }
                Err(e @ aiss_core::sim::SimError::EmptyRegion { .. }) => {
                    passed = false;
                    entries.push(json!({ "k": k, "passed": false, "error": e.to_string() }));
                }
                Err(e) => return Err(CliError::compute(e)),
            }
        }
        Ok((passed, json!({ "regions": entries })))
    }

    fn aiss_section(&mut self) -> Result<(bool, Value), CliError> {
        let opts = self.ensemble();
        let field = self.system().spec.vector_field();
        let s = &self.cfg.sim;
        let r = monte_carlo_aiss(&field, s.n_runs, &opts, self.seed).map_err(CliError::compute)?;
        info!("{} of {} runs converged", r.converged_runs, r.n_runs);
        let passed = r.fraction_converged >= s.min_fraction;
        if self.with_csv {
            for run in 0..s.export_trajectories.min(s.n_runs) as u64 {
                let (_, trajs) = run_trajectories(&field, &opts, self.seed, run).map_err(CliError::compute)?;
                for (j, traj) in trajs.iter().enumerate() {
                    self.tables
                        .push(trajectory_table(&format!("trajectory_run{run}_level{j}.csv"), traj));
                }
            }
        }
        Ok((passed, to_value(&r)))
    }
}

fn intervals_table(iv: &SmallGainIntervals) -> Table {
    let mut t = Table::new("intervals.csv", &["k", "lower", "upper"]);
    for (i, itv) in iv.intervals.iter().enumerate() {
        t.push(vec![(i + 1) as f64, itv.lower, itv.upper]);
    }
    t
}

/// Header `t,x1,...,xn,u1,...,um`, one row per step.
pub fn trajectory_table(name: &str, traj: &Trajectory) -> Table {
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.n).map(|i| format!("x{i}")));
    header.extend((1..=traj.m).map(|i| format!("u{i}")));
    let mut t = Table::with_header(name, header);
    for i in 0..traj.len() {
        let mut row = vec![traj.times[i]];
        row.extend_from_slice(traj.state(i));
        row.extend_from_slice(traj.input(i));
        t.push(row);
    }
    t
}
