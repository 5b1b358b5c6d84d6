//! JSON configuration: schema checks with JSONPath locations, eager parsing
//! of every expression, and the central defaults.

use std::collections::BTreeSet;
use std::path::Path;

use aiss_core::comparison::{ComparisonFn, GainClass};
use aiss_core::expr::{self, Expr, Schema};
use aiss_core::intervals::AlgorithmParams;
use aiss_core::regions::{InnerComposition, StorageFn};
use aiss_core::sim::{InputFamily, InterconnectionSpec, DEFAULT_BLOWUP};
use aiss_core::verify::{AxisBox, DpiBlock};
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// A gain as written in the config, with where it came from.
#[derive(Debug, Clone)]
pub struct Gain {
    pub path: String,
    pub text: String,
    pub func: ComparisonFn,
}

/// Dynamics and certificates; optional so that gain-only configs work.
#[derive(Debug, Clone)]
pub struct System {
    pub spec: InterconnectionSpec,
    pub gains: Vec<Gain>,
    pub v1_text: String,
    pub v2_text: String,
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub gamma12: Gain,
    pub gamma21: Gain,
    pub system: Option<System>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifySettings {
    pub kinf_grid_points: usize,
    pub kinf_s_max: f64,
    pub storage_half_width: f64,
    pub storage_samples: usize,
    pub sgc_samples: usize,
    pub lyapunov_samples: usize,
    pub state_box: Option<AxisBox>,
    pub lyapunov_input_magnitude: f64,
    pub fd_step: f64,
    pub fd_slack: f64,
    pub dpi_grid: usize,
    pub dpi_input_magnitudes: Vec<f64>,
    pub containment_samples: usize,
    pub a_k_inner_composition: InnerComposition,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            kinf_grid_points: 1000,
            kinf_s_max: 1e13,
            storage_half_width: 10.0,
            storage_samples: 1000,
            sgc_samples: 100,
            lyapunov_samples: 10_000,
            state_box: None,
            lyapunov_input_magnitude: 0.0,
            fd_step: 1e-5,
            fd_slack: 1e-6,
            dpi_grid: 33,
            dpi_input_magnitudes: Vec::new(),
            containment_samples: 2000,
            a_k_inner_composition: InnerComposition::AsPrinted,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem1Settings {
    pub n_samples: usize,
    pub attempt_budget: usize,
    pub delta: f64,
    pub tail_points: usize,
    pub distance_radius: f64,
    pub distance_resolution: usize,
}

impl Default for Theorem1Settings {
    fn default() -> Self {
        Self {
            n_samples: 50,
            attempt_budget: 10_000,
            delta: 0.0,
            tail_points: 5,
            distance_radius: 1.0,
            distance_resolution: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimSettings {
    pub n_runs: usize,
    pub ic_box: Option<AxisBox>,
    pub u_levels: Vec<f64>,
    pub t_end: f64,
    pub h: f64,
    pub seed: u64,
    pub tail_fraction: f64,
    pub input: InputFamily,
    pub blowup: f64,
    pub radius_tol: f64,
    pub radius_gain: f64,
    /// Pass threshold for converged fractions.
    pub min_fraction: f64,
    pub export_trajectories: usize,
    pub theorem1: Theorem1Settings,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            n_runs: 500,
            ic_box: None,
            u_levels: vec![0.0],
            t_end: 20.0,
            h: 1e-3,
            seed: 0,
            tail_fraction: 0.2,
            input: InputFamily::Constant,
            blowup: DEFAULT_BLOWUP,
            radius_tol: 1e-3,
            radius_gain: 10.0,
            min_fraction: 0.99,
            export_trajectories: 3,
            theorem1: Theorem1Settings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    Both,
}

impl Format {
    pub fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }

    pub fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }
}

#[derive(Debug, Clone, Default)]
pub struct OutputSettings {
    pub directory: Option<String>,
    pub format: Option<Format>,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub sha256: String,
    pub problem: Problem,
    pub algorithm: AlgorithmParams,
    pub verify: VerifySettings,
    pub sim: SimSettings,
    pub output: OutputSettings,
}

pub fn load_config(path: &Path) -> Result<Config, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&bytes)
}

pub fn parse_config(bytes: &[u8]) -> Result<Config, CliError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| CliError::Json(e.to_string()))?;
    let sha256 = hex::encode(Sha256::digest(bytes));
    let mut root = Obj::root(&value)?;
    let problem = root.req_obj("problem", parse_problem)?;
    let algorithm = root.opt_obj("algorithm", parse_algorithm)?.unwrap_or_default();
    let verify = root.opt_obj("verify", parse_verify)?.unwrap_or_default();
    let sim = root.opt_obj("sim", parse_sim)?.unwrap_or_default();
    let output = root.opt_obj("output", parse_output)?.unwrap_or_default();
    root.finish()?;

    let cfg = Config {
        sha256,
        problem,
        algorithm,
        verify,
        sim,
        output,
    };
    check_dims(&cfg)?;
    Ok(cfg)
}

fn check_dims(cfg: &Config) -> Result<(), CliError> {
    let Some(sys) = &cfg.problem.system else {
        return Ok(());
    };
    let n = sys.spec.n();
    let boxes = [
        ("$.verify.state_box", cfg.verify.state_box.as_ref()),
        ("$.sim.ic_box", cfg.sim.ic_box.as_ref()),
    ];
    for (path, b) in boxes {
        if let Some(b) = b {
            if b.dim() != n {
                return Err(schema(path, format!("expected {n} intervals, got {}", b.dim())));
            }
        }
    }
    for (i, block) in sys.spec.dpi_blocks.iter().enumerate() {
        if block.domain_box.dim() != n {
            return Err(schema(
                &format!("$.problem.dpi_blocks[{i}].domain_box"),
                format!("expected {n} intervals, got {}", block.domain_box.dim()),
            ));
        }
    }
    Ok(())
}

fn schema(path: &str, message: impl Into<String>) -> CliError {
    CliError::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

/// A JSON object being consumed key by key; leftover keys are errors.
struct Obj<'a> {
    map: &'a Map<String, Value>,
    path: String,
    used: BTreeSet<&'a str>,
}

impl<'a> Obj<'a> {
    fn root(v: &'a Value) -> Result<Self, CliError> {
        Self::new(v, "$".to_string())
    }

    fn new(v: &'a Value, path: String) -> Result<Self, CliError> {
        match v {
            Value::Object(map) => Ok(Self {
                map,
                path,
                used: BTreeSet::new(),
            }),
            _ => Err(schema(&path, "expected an object")),
        }
    }

    fn child(&self, key: &str) -> String {
        format!("{}.{key}", self.path)
    }

    fn get(&mut self, key: &'a str) -> Option<&'a Value> {
        self.used.insert(key);
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn has(&self, key: &str) -> bool {
        self.map.get(key).is_some_and(|v| !v.is_null())
    }

    fn req(&mut self, key: &'a str) -> Result<&'a Value, CliError> {
        let path = self.child(key);
        self.get(key).ok_or_else(|| schema(&path, "required field is missing"))
    }

    fn req_obj<T>(&mut self, key: &'a str, f: impl FnOnce(&mut Obj<'a>) -> Result<T, CliError>) -> Result<T, CliError> {
        let path = self.child(key);
        let mut obj = Obj::new(self.req(key)?, path)?;
        let out = f(&mut obj)?;
        obj.finish()?;
        Ok(out)
    }

    fn opt_obj<T>(
        &mut self,
        key: &'a str,
        f: impl FnOnce(&mut Obj<'a>) -> Result<T, CliError>,
    ) -> Result<Option<T>, CliError> {
        let path = self.child(key);
        match self.get(key) {
            None => Ok(None),
            Some(v) => {
                let mut obj = Obj::new(v, path)?;
                let out = f(&mut obj)?;
                obj.finish()?;
                Ok(Some(out))
            }
        }
    }

    fn str(&mut self, key: &'a str) -> Result<Option<&'a str>, CliError> {
        let path = self.child(key);
        self.get(key)
            .map(|v| v.as_str().ok_or_else(|| schema(&path, "expected a string")))
            .transpose()
    }

    fn f64_or(&mut self, key: &'a str, default: f64) -> Result<f64, CliError> {
        let path = self.child(key);
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.as_f64().ok_or_else(|| schema(&path, "expected a number")),
        }
    }

    fn positive_or(&mut self, key: &'a str, default: f64) -> Result<f64, CliError> {
        let path = self.child(key);
        let v = self.f64_or(key, default)?;
        if !(v > 0.0) {
            return Err(schema(&path, "must be positive"));
        }
        Ok(v)
    }

    fn u64_opt(&mut self, key: &'a str) -> Result<Option<u64>, CliError> {
        let path = self.child(key);
        self.get(key)
            .map(|v| {
                v.as_u64()
                    .ok_or_else(|| schema(&path, "expected a non-negative integer"))
            })
            .transpose()
    }

    fn usize_or(&mut self, key: &'a str, default: usize) -> Result<usize, CliError> {
        Ok(self.u64_opt(key)?.map_or(default, |v| v as usize))
    }

    fn f64_list(&mut self, key: &'a str) -> Result<Option<Vec<f64>>, CliError> {
        let path = self.child(key);
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        let arr = v
            .as_array()
            .ok_or_else(|| schema(&path, "expected an array of numbers"))?;
        arr.iter()
            .enumerate()
            .map(|(i, x)| {
                x.as_f64()
                    .ok_or_else(|| schema(&format!("{path}[{i}]"), "expected a number"))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn axis_box(&mut self, key: &'a str) -> Result<Option<AxisBox>, CliError> {
        let path = self.child(key);
        let Some(v) = self.get(key) else {
            return Ok(None);
        };
        let arr = v
            .as_array()
            .ok_or_else(|| schema(&path, "expected an array of [lo, hi] pairs"))?;
        let mut out = Vec::with_capacity(arr.len());
        for (i, pair) in arr.iter().enumerate() {
            let p = format!("{path}[{i}]");
            let lohi = pair
                .as_array()
                .filter(|a| a.len() == 2)
                .and_then(|a| Some((a[0].as_f64()?, a[1].as_f64()?)))
                .ok_or_else(|| schema(&p, "expected [lo, hi]"))?;
            if !(lohi.0 <= lohi.1) {
                return Err(schema(&p, "lo must not exceed hi"));
            }
            out.push(lohi);
        }
        Ok(Some(AxisBox(out)))
    }

    fn finish(&self) -> Result<(), CliError> {
        match self.map.keys().find(|k| !self.used.contains(k.as_str())) {
            Some(k) => Err(schema(&self.child(k), "unknown field")),
            None => Ok(()),
        }
    }
}

fn parse_expr(text: &str, schema_: &Schema, path: &str) -> Result<Expr, CliError> {
    expr::parse(text, schema_).map_err(|e| CliError::Expression {
        path: path.to_string(),
        message: e.to_string(),
    })
}

fn parse_gain<'a>(obj: &mut Obj<'a>, key: &'a str) -> Result<Option<Gain>, CliError> {
    let path = obj.child(key);
    let Some(v) = obj.get(key) else {
        return Ok(None);
    };
    let (text, class) = match v {
        Value::String(s) => (s.as_str(), GainClass::KInf),
        Value::Object(_) => {
            let mut o = Obj::new(v, path.clone())?;
            let text = o
                .str("expr")?
                .ok_or_else(|| schema(&o.child("expr"), "required field is missing"))?;
            let class = match o.str("class")? {
                None | Some("K_inf") => GainClass::KInf,
                Some("K") => GainClass::K,
                Some(_) => return Err(schema(&o.child("class"), "expected \"K\" or \"K_inf\"")),
            };
            o.finish()?;
            (text, class)
        }
        _ => return Err(schema(&path, "expected an expression string or {expr, class}")),
    };
    let body = parse_expr(text, &Schema::scalar(), &path)?;
    Ok(Some(Gain {
        path,
        text: text.to_string(),
        func: ComparisonFn::from_expr(body, class),
    }))
}

fn req_gain<'a>(obj: &mut Obj<'a>, key: &'a str) -> Result<Gain, CliError> {
    let path = obj.child(key);
    parse_gain(obj, key)?.ok_or_else(|| schema(&path, "required field is missing"))
}

const SYSTEM_KEYS: [&str; 12] = [
    "n1", "n2", "m1", "m2", "f1", "f2", "v1", "v2", "gamma1", "gamma2", "alpha1", "alpha2",
];

fn parse_problem(obj: &mut Obj<'_>) -> Result<Problem, CliError> {
    let gamma12 = req_gain(obj, "gamma12")?;
    let gamma21 = req_gain(obj, "gamma21")?;
    let system = if SYSTEM_KEYS.iter().any(|k| obj.has(k)) || obj.has("dpi_blocks") {
        Some(parse_system(obj, &gamma12, &gamma21)?)
    } else {
        None
    };
    Ok(Problem {
        gamma12,
        gamma21,
        system,
    })
}

fn field_exprs<'a>(obj: &mut Obj<'a>, key: &'a str, schema_: &Schema) -> Result<Vec<Expr>, CliError> {
    let path = obj.child(key);
    let v = obj.req(key)?;
    let arr = v
        .as_array()
        .ok_or_else(|| schema(&path, "expected an array of expression strings"))?;
    if arr.is_empty() {
        return Err(schema(&path, "at least one component required"));
    }
    arr.iter()
        .enumerate()
        .map(|(i, e)| {
            let p = format!("{path}[{i}]");
            let text = e.as_str().ok_or_else(|| schema(&p, "expected a string"))?;
            parse_expr(text, schema_, &p)
        })
        .collect()
}

fn parse_system(obj: &mut Obj<'_>, gamma12: &Gain, gamma21: &Gain) -> Result<System, CliError> {
    let m1 = obj
        .u64_opt("m1")?
        .ok_or_else(|| schema(&obj.child("m1"), "required field is missing"))? as usize;
    let m2 = obj
        .u64_opt("m2")?
        .ok_or_else(|| schema(&obj.child("m2"), "required field is missing"))? as usize;
    // state dimensions follow from f1 and f2 unless given
    let n1_decl = obj.u64_opt("n1")?;
    let n2_decl = obj.u64_opt("n2")?;
    let peek_len = |key: &str| obj.map.get(key).and_then(Value::as_array).map_or(0, Vec::len);
    let n1 = n1_decl.map_or(peek_len("f1"), |v| v as usize);
    let n2 = n2_decl.map_or(peek_len("f2"), |v| v as usize);
    let (n, m) = (n1 + n2, m1 + m2);
    let fs = Schema::field(n, m);
    let f1 = field_exprs(obj, "f1", &fs)?;
    let f2 = field_exprs(obj, "f2", &fs)?;
    for (key, want, got) in [("f1", n1, f1.len()), ("f2", n2, f2.len())] {
        if want != got {
            return Err(schema(
                &obj.child(key),
                format!("expected {want} components, got {got}"),
            ));
        }
    }
    let storage =
        |obj: &mut Obj<'_>, key: &'static str, first: usize, dim: usize| -> Result<(String, StorageFn), CliError> {
            let path = obj.child(key);
            let text = obj
                .str(key)?
                .ok_or_else(|| schema(&path, "required field is missing"))?;
            let v = StorageFn::parse(text, first, dim).map_err(|e| CliError::Expression {
                path: path.clone(),
                message: e.to_string(),
            })?;
            Ok((text.to_string(), v))
        };
    let (v1_text, v1) = storage(obj, "v1", 1, n1)?;
    let (v2_text, v2) = storage(obj, "v2", n1 + 1, n2)?;
    let gamma1 = req_gain(obj, "gamma1")?;
    let gamma2 = req_gain(obj, "gamma2")?;
    let alpha1 = req_gain(obj, "alpha1")?;
    let alpha2 = req_gain(obj, "alpha2")?;

    let mut dpi_blocks = Vec::new();
    let mut block_gains = Vec::new();
    let path = obj.child("dpi_blocks");
    if let Some(v) = obj.get("dpi_blocks") {
        let arr = v.as_array().ok_or_else(|| schema(&path, "expected an array"))?;
        let state = Schema::state_block(1, n);
        for (i, b) in arr.iter().enumerate() {
            let mut o = Obj::new(b, format!("{path}[{i}]"))?;
            let k = o
                .u64_opt("k")?
                .ok_or_else(|| schema(&o.child("k"), "required field is missing"))? as usize;
            if k == 0 {
                return Err(schema(&o.child("k"), "k is 1-based"));
            }
            let text = |o: &mut Obj<'_>, key: &'static str| -> Result<Expr, CliError> {
                let p = o.child(key);
                let t = o.str(key)?.ok_or_else(|| schema(&p, "required field is missing"))?;
                parse_expr(t, &state, &p)
            };
            let rho = text(&mut o, "rho")?;
            let q = text(&mut o, "q")?;
            let gamma_k = req_gain(&mut o, "gamma_k")?;
            let domain_box = o
                .axis_box("domain_box")?
                .ok_or_else(|| schema(&o.child("domain_box"), "required field is missing"))?;
            let exclude_radius = o.f64_or("exclude_radius", 0.0)?;
            o.finish()?;
            dpi_blocks.push(DpiBlock {
                k,
                rho,
                q,
                gamma_k: gamma_k.func.clone(),
                domain_box,
                exclude_radius,
            });
            block_gains.push(gamma_k);
        }
    }

    let spec = InterconnectionSpec {
        n1,
        n2,
        m1,
        m2,
        f1,
        f2,
        v1,
        v2,
        gamma12: gamma12.func.clone(),
        gamma21: gamma21.func.clone(),
        gamma1: gamma1.func.clone(),
        gamma2: gamma2.func.clone(),
        alpha1: alpha1.func.clone(),
        alpha2: alpha2.func.clone(),
        dpi_blocks,
    };
    let mut gains = vec![gamma1, gamma2, alpha1, alpha2];
    gains.extend(block_gains);
    Ok(System {
        spec,
        gains,
        v1_text,
        v2_text,
    })
}

fn parse_algorithm(obj: &mut Obj<'_>) -> Result<AlgorithmParams, CliError> {
    let d = AlgorithmParams::default();
    let p = AlgorithmParams {
        delta: obj.f64_or("delta", d.delta)?,
        eps_fix: obj.f64_or("eps_fix", d.eps_fix)?,
        eps_conv: obj.f64_or("eps_conv", d.eps_conv)?,
        s_divergence: obj.f64_or("s_divergence", d.s_divergence)?,
        max_inner_iters: obj.usize_or("max_inner_iters", d.max_inner_iters)?,
        max_outer_iters: obj.usize_or("max_outer_iters", d.max_outer_iters)?,
        inversion_tol: obj.f64_or("inversion_tol", d.inversion_tol)?,
    };
    p.validate().map_err(|e| schema(&obj.path, e.to_string()))?;
    Ok(p)
}

fn parse_verify(obj: &mut Obj<'_>) -> Result<VerifySettings, CliError> {
    let d = VerifySettings::default();
    let composition = match obj.str("a_k_inner_composition")? {
        None => d.a_k_inner_composition,
        Some(name) => InnerComposition::from_name(name).ok_or_else(|| {
            schema(
                &obj.child("a_k_inner_composition"),
                "expected \"as_printed\" or \"gamma21_gamma12\"",
            )
        })?,
    };
    let dpi_grid = obj.usize_or("dpi_grid", d.dpi_grid)?;
    if dpi_grid < 8 {
        return Err(schema(&obj.child("dpi_grid"), "at least 8 points per axis"));
    }
    Ok(VerifySettings {
        kinf_grid_points: obj.usize_or("kinf_grid_points", d.kinf_grid_points)?,
        kinf_s_max: obj.positive_or("kinf_s_max", d.kinf_s_max)?,
        storage_half_width: obj.positive_or("storage_half_width", d.storage_half_width)?,
        storage_samples: obj.usize_or("storage_samples", d.storage_samples)?,
        sgc_samples: obj.usize_or("sgc_samples", d.sgc_samples)?,
        lyapunov_samples: obj.usize_or("lyapunov_samples", d.lyapunov_samples)?,
        state_box: obj.axis_box("state_box")?,
        lyapunov_input_magnitude: obj.f64_or("lyapunov_input_magnitude", d.lyapunov_input_magnitude)?,
        fd_step: obj.positive_or("fd_step", d.fd_step)?,
        fd_slack: obj.f64_or("fd_slack", d.fd_slack)?,
        dpi_grid,
        dpi_input_magnitudes: obj.f64_list("dpi_input_magnitudes")?.unwrap_or_default(),
        containment_samples: obj.usize_or("containment_samples", d.containment_samples)?,
        a_k_inner_composition: composition,
    })
}

fn parse_input(obj: &mut Obj<'_>) -> Result<InputFamily, CliError> {
    let kind = obj.str("kind")?.unwrap_or("constant");
    let fam = match kind {
        "constant" => InputFamily::Constant,
        "sinusoid" => InputFamily::Sinusoid {
            frequency: obj.f64_or("frequency", 0.5)?,
        },
        "piecewise_random" => InputFamily::PiecewiseRandom {
            dwell: obj.positive_or("dwell", 1.0)?,
        },
        _ => {
            return Err(schema(
                &obj.child("kind"),
                "expected \"constant\", \"sinusoid\" or \"piecewise_random\"",
            ))
        }
    };
    Ok(fam)
}

fn parse_theorem1(obj: &mut Obj<'_>) -> Result<Theorem1Settings, CliError> {
    let d = Theorem1Settings::default();
    Ok(Theorem1Settings {
        n_samples: obj.usize_or("n_samples", d.n_samples)?,
        attempt_budget: obj.usize_or("attempt_budget", d.attempt_budget)?,
        delta: obj.f64_or("delta", d.delta)?,
        tail_points: obj.usize_or("tail_points", d.tail_points)?,
        distance_radius: obj.positive_or("distance_radius", d.distance_radius)?,
        distance_resolution: obj.usize_or("distance_resolution", d.distance_resolution)?,
    })
}

fn parse_sim(obj: &mut Obj<'_>) -> Result<SimSettings, CliError> {
    let d = SimSettings::default();
    let s = SimSettings {
        n_runs: obj.usize_or("n_runs", d.n_runs)?,
        ic_box: obj.axis_box("ic_box")?,
        u_levels: obj.f64_list("u_levels")?.unwrap_or(d.u_levels),
        t_end: obj.positive_or("t_end", d.t_end)?,
        h: obj.positive_or("h", d.h)?,
        seed: obj.u64_opt("seed")?.unwrap_or(d.seed),
        tail_fraction: obj.f64_or("tail_fraction", d.tail_fraction)?,
        input: obj.opt_obj("input", parse_input)?.unwrap_or(d.input),
        blowup: obj.positive_or("blowup", d.blowup)?,
        radius_tol: obj.f64_or("radius_tol", d.radius_tol)?,
        radius_gain: obj.f64_or("radius_gain", d.radius_gain)?,
        min_fraction: obj.f64_or("min_fraction", d.min_fraction)?,
        export_trajectories: obj.usize_or("export_trajectories", d.export_trajectories)?,
        theorem1: obj.opt_obj("theorem1", parse_theorem1)?.unwrap_or_default(),
    };
    if s.n_runs < aiss_core::sim::MIN_RUNS {
        return Err(schema(
            &obj.child("n_runs"),
            format!("at least {} runs required", aiss_core::sim::MIN_RUNS),
        ));
    }
    if !(s.tail_fraction > 0.0 && s.tail_fraction <= 0.5) {
        return Err(schema(&obj.child("tail_fraction"), "must lie in (0, 0.5]"));
    }
    if s.t_end < s.h {
        return Err(schema(&obj.child("t_end"), "must be at least h"));
    }
    if let Some(i) = s.u_levels.iter().position(|u| !(*u >= 0.0)) {
        return Err(schema(
            &format!("{}[{i}]", obj.child("u_levels")),
            "levels must be non-negative",
        ));
    }
    Ok(s)
}

pub fn parse_format(name: &str) -> Option<Format> {
    match name {
        "json" => Some(Format::Json),
        "csv" => Some(Format::Csv),
        "both" => Some(Format::Both),
        _ => None,
    }
}

fn parse_output(obj: &mut Obj<'_>) -> Result<OutputSettings, CliError> {
    let directory = obj.str("directory")?.map(str::to_string);
    let format = match obj.str("format")? {
        None => None,
        Some(name) => Some(
            parse_format(name).ok_or_else(|| schema(&obj.child("format"), "expected \"json\", \"csv\" or \"both\""))?,
        ),
    };
    Ok(OutputSettings { directory, format })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(text: &str) -> CliError {
        parse_config(text.as_bytes()).unwrap_err()
    }

    #[test]
    fn minimal_config() {
        let cfg = parse_config(br#"{"problem": {"gamma12": "s^2", "gamma21": "s"}}"#).unwrap();
        assert_eq!(cfg.problem.gamma12.text, "s^2");
        assert_eq!(cfg.problem.gamma21.path, "$.problem.gamma21");
        assert!(cfg.problem.system.is_none());
        assert_eq!(cfg.sha256.len(), 64);
    }

    #[test]
    fn schema_errors_carry_paths() {
        let e = err(r#"{"problem": {"gamma12": "s^2"}}"#);
        assert_eq!(e.path(), Some("$.problem.gamma21"));
        let e = err(r#"{"problem": {"gamma12": "s^2", "gamma21": "s", "gamma3": "s"}}"#);
        assert_eq!(e.path(), Some("$.problem.gamma3"));
        let e = err(r#"{"problem": {"gamma12": "s^", "gamma21": "s"}}"#);
        assert!(matches!(e, CliError::Expression { .. }));
        assert_eq!(e.path(), Some("$.problem.gamma12"));
        let e = err(r#"{"problem": {"gamma12": "s", "gamma21": "s"}, "sim": {"n_runs": 10}}"#);
        assert_eq!(e.path(), Some("$.sim.n_runs"));
        let e = err(r#"{"problem": {"gamma12": "s", "gamma21": "s", "f1": ["-x1"]}}"#);
        assert_eq!(e.path(), Some("$.problem.m1"));
        assert!(matches!(err("{"), CliError::Json(_)));
    }

    #[test]
    fn system_dimensions_inferred() {
        let cfg = parse_config(
            br#"{"problem": {"gamma12": "s/2", "gamma21": "s/2", "m1": 1, "m2": 1,
                "f1": ["-x1 + u1"], "f2": ["-x2 + u2"], "v1": "abs(x1)", "v2": "abs(x2)",
                "gamma1": "2*s", "gamma2": "2*s", "alpha1": {"expr": "s/2", "class": "K"}, "alpha2": "s/2"}}"#,
        )
        .unwrap();
        let sys = cfg.problem.system.unwrap();
        assert_eq!((sys.spec.n1, sys.spec.n2), (1, 1));
        assert_eq!(sys.gains[2].func.class(), GainClass::K);
        // v2 must use the second block's names
        let e = err(r#"{"problem": {"gamma12": "s/2", "gamma21": "s/2", "m1": 1, "m2": 1,
                "f1": ["-x1 + u1"], "f2": ["-x2 + u2"], "v1": "abs(x1)", "v2": "abs(x1)",
                "gamma1": "2*s", "gamma2": "2*s", "alpha1": "s/2", "alpha2": "s/2"}}"#);
        assert_eq!(e.path(), Some("$.problem.v2"));
    }
}
