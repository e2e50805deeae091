//! Batch driver behind the `effdiff` binary: flags and config files, the
//! five experiment kinds, CSV output and run manifests.
//!
//! Exit codes: 0 on success, 1 on a numerical failure (non-finite state or
//! a solver that did not converge), 2 on a bad spec or an unwritable path.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::diffusivity::{estimate_d, ConvergenceStudy, EnhancementScan, TRule};
use crate::ensemble::{simulate, steps_for, CheckpointSchedule, Workers};
use crate::error::{Error, Result};
use crate::eulerian::{eulerian_diffusivity, generator_corrector, solve_cell_problem, TorusGrid2D};
use crate::flows::{Flow, SeparableFlow2D};
use crate::integrators::{IntegratorConfig, Scheme};
use crate::kernel::{
    build_kernel, decay_rate, default_image_cutoff, invariant_density, lemma_rate_check, mode_decay,
};
use crate::rng::NoiseSchedule;

pub const SIMULATE_HEADER: &str = "t,d11,d22,d33,d12,d13,d23,stderr11,n";
pub const ENHANCE_HEADER: &str = "d0,d11,stderr11,t_final,n";
pub const CONVERGE_HEADER: &str = "dt,d11,abs_error";
pub const ORACLE_HEADER: &str =
    "n,d_cov11,d_cov12,d_cov21,d_cov22,d_grad11,d_grad12,d_grad22,residual1,residual2,tail_fraction";
pub const KERNEL_HEADER: &str = "quantity,value";

const KEYS: [&str; 21] = [
    "kind",
    "flow",
    "scheme",
    "dt",
    "d0",
    "sigma",
    "particles",
    "t-final",
    "seed",
    "checkpoints",
    "out",
    "workers",
    "dt-list",
    "d0-list",
    "grid",
    "budget-seconds",
    "dt-ref",
    "tol",
    "couple",
    "config",
    "help",
];

pub const USAGE: &str = "usage: effdiff --kind <simulate|converge|enhance|oracle|kernel> --out <file.csv> [options]

  --flow <name>            cellular2d | abc | kolmogorov | kolmogorov3d-type | none
  --scheme <name>          symplectic | volume-preserving | euler
  --dt <x>                 time step
  --d0 <x> | --sigma <x>   molecular diffusivity, or noise amplitude (d0 = sigma^2/2)
  --particles <n>          ensemble size
  --t-final <x>            final time (multiple of dt); cap on T for enhance
  --seed <n>               master seed
  --checkpoints <n>        log-spaced checkpoints (simulate, enhance)
  --workers <n>            worker threads (default: available parallelism)
  --dt-list <a,b,..>       converge: step sizes; kernel: lemma-rate steps
  --dt-ref <x>             converge: reference step (default min(dt-list)/4)
  --couple <true|false>    converge: common random numbers (default true)
  --d0-list <a,b,..>       enhance: molecular diffusivities
  --grid <n,..>            oracle: grid sizes; kernel: grid size
  --tol <x>                oracle/kernel: solver tolerance
  --budget-seconds <x>     enhance: stop starting new work after this long
  --config <path>          key=value file with the same keys; flags override";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Simulate,
    Converge,
    Enhance,
    Oracle,
    Kernel,
}

impl Kind {
    pub fn name(&self) -> &'static str {
        match self {
            Kind::Simulate => "simulate",
            Kind::Converge => "converge",
            Kind::Enhance => "enhance",
            Kind::Oracle => "oracle",
            Kind::Kernel => "kernel",
        }
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "simulate" => Kind::Simulate,
            "converge" => Kind::Converge,
            "enhance" => Kind::Enhance,
            "oracle" => Kind::Oracle,
            "kernel" => Kind::Kernel,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown kind `{s}` (known kinds: simulate, converge, enhance, oracle, kernel)"
                )))
            }
        })
    }
}

/// Noise level as given; `d0 = σ²/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    D0(f64),
    Sigma(f64),
}

impl Noise {
    pub fn d0(&self) -> f64 {
        match *self {
            Noise::D0(d) => d,
            Noise::Sigma(s) => 0.5 * s * s,
        }
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            Noise::D0(d) => (2.0 * d).sqrt(),
            Noise::Sigma(s) => s,
        }
    }
}

/// A validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: Kind,
    pub flow: String,
    pub scheme: Scheme,
    pub dt: f64,
    pub noise: Option<Noise>,
    pub particles: usize,
    pub t_final: Option<f64>,
    pub seed: u64,
    pub checkpoints: usize,
    pub out: PathBuf,
    pub workers: Option<usize>,
    pub dt_list: Vec<f64>,
    pub d0_list: Vec<f64>,
    pub grid: Vec<usize>,
    pub budget_seconds: Option<f64>,
    pub dt_ref: Option<f64>,
    pub tol: Option<f64>,
    pub couple: bool,
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("--{key}: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_num(key, s)).collect()
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("unknown option `{key}` (known: {})", KEYS.join(", "))))
    }
}

/// Reads `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key=value", lineno + 1)))?;
        let k = k.trim();
        check_key(k)?;
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Collects `--key value` pairs; `--config` files are read first and the
/// flags override them.
pub fn collect_options(args: &[String]) -> Result<BTreeMap<String, String>> {
    let mut flags = BTreeMap::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::InvalidArgument(format!("expected an option, got `{a}`")))?;
        check_key(key)?;
        if key == "help" {
            flags.insert("help".to_string(), String::new());
            continue;
        }
        let v = it
            .next()
            .ok_or_else(|| Error::InvalidArgument(format!("--{key} needs a value")))?;
        flags.insert(key.to_string(), v.clone());
    }
    let mut merged = match flags.get("config") {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::InvalidArgument(format!("cannot read config `{path}`: {e}")))?;
            parse_config(&text)?
        }
        None => BTreeMap::new(),
    };
    merged.remove("config");
    flags.remove("config");
    merged.extend(flags);
    Ok(merged)
}

/// Parses and validates a spec from command-line arguments (without the
/// program name).
pub fn parse_spec(args: &[String]) -> Result<ExperimentSpec> {
    spec_from_options(&collect_options(args)?)
}

pub fn spec_from_options(o: &BTreeMap<String, String>) -> Result<ExperimentSpec> {
    let get = |k: &str| o.get(k).map(String::as_str);
    let kind: Kind = get("kind").unwrap_or("simulate").parse()?;
    let flow = get("flow").unwrap_or("cellular2d").to_string();
    Flow::from_name(&flow)?;
    let scheme: Scheme = get("scheme").unwrap_or("symplectic").parse()?;
    let dt: f64 = get("dt").map_or(Ok(0.01), |v| parse_num("dt", v))?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("--dt must be positive, got {dt}")));
    }
    let t_final: Option<f64> = get("t-final").map(|v| parse_num("t-final", v)).transpose()?;
    if let (Some(t), true) = (t_final, kind != Kind::Enhance) {
        steps_for(t, dt)?;
    }
    let d0: Option<f64> = get("d0").map(|v| parse_num("d0", v)).transpose()?;
    let sigma: Option<f64> = get("sigma").map(|v| parse_num("sigma", v)).transpose()?;
    let noise = match (d0, sigma) {
        (Some(d), Some(s)) => {
            if (0.5 * s * s - d).abs() > 1e-12 * d.abs().max(1e-300) {
                return Err(Error::InvalidArgument(format!(
                    "--sigma {s} and --d0 {d} disagree (sigma^2/2 = {}); give one of them",
                    0.5 * s * s
                )));
            }
            Some(Noise::D0(d))
        }
        (Some(d), None) => Some(Noise::D0(d)),
        (None, Some(s)) => Some(Noise::Sigma(s)),
        (None, None) => None,
    };
    if let Some(n) = noise {
        if !(n.d0() >= 0.0 && n.d0().is_finite() && n.sigma().is_finite()) {
            return Err(Error::InvalidArgument(format!("noise level must be finite and non-negative, got {n:?}")));
        }
    }
    let out = PathBuf::from(get("out").ok_or_else(|| Error::InvalidArgument("--out is required".into()))?);
    let spec = ExperimentSpec {
        kind,
        flow,
        scheme,
        dt,
        noise,
        particles: get("particles").map_or(Ok(10_000), |v| parse_num("particles", v))?,
        t_final,
        seed: get("seed").map_or(Ok(0), |v| parse_num("seed", v))?,
        checkpoints: get("checkpoints").map_or(Ok(10), |v| parse_num("checkpoints", v))?,
        out,
        workers: get("workers").map(|v| parse_num("workers", v)).transpose()?,
        dt_list: get("dt-list").map_or(Ok(Vec::new()), |v| parse_list("dt-list", v))?,
        d0_list: get("d0-list").map_or(Ok(Vec::new()), |v| parse_list("d0-list", v))?,
        grid: get("grid").map_or(Ok(Vec::new()), |v| parse_list("grid", v))?,
        budget_seconds: get("budget-seconds").map(|v| parse_num("budget-seconds", v)).transpose()?,
        dt_ref: get("dt-ref").map(|v| parse_num("dt-ref", v)).transpose()?,
        tol: get("tol").map(|v| parse_num("tol", v)).transpose()?,
        couple: get("couple").map_or(Ok(true), |v| parse_num("couple", v))?,
    };
    spec.validate()?;
    Ok(spec)
}

impl ExperimentSpec {
    fn need_noise(&self) -> Result<Noise> {
        self.noise
            .ok_or_else(|| Error::InvalidArgument(format!("kind {} needs --d0 or --sigma", self.kind.name())))
    }

    fn need_t_final(&self) -> Result<f64> {
        self.t_final
            .ok_or_else(|| Error::InvalidArgument(format!("kind {} needs --t-final", self.kind.name())))
    }

    fn validate(&self) -> Result<()> {
        if self.particles < 2 && matches!(self.kind, Kind::Simulate | Kind::Converge | Kind::Enhance) {
            return Err(Error::InvalidArgument("--particles must be at least 2".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidArgument("--workers must be at least 1".into()));
        }
        match self.kind {
            Kind::Simulate => {
                self.need_noise()?;
                self.need_t_final()?;
                if self.checkpoints == 0 {
                    return Err(Error::InvalidArgument("--checkpoints must be at least 1".into()));
                }
            }
            Kind::Converge => {
                self.need_noise()?;
                let t = self.need_t_final()?;
                if self.dt_list.len() < 2 {
                    return Err(Error::InvalidArgument("converge needs --dt-list with at least 2 steps".into()));
                }
                for &dt in &self.dt_list {
                    steps_for(t, dt)?;
                }
            }
            Kind::Enhance => {
                if self.d0_list.is_empty() {
                    return Err(Error::InvalidArgument("enhance needs --d0-list".into()));
                }
            }
            Kind::Oracle | Kind::Kernel => {
                let n = self.need_noise()?;
                if !(n.d0() > 0.0) {
                    return Err(Error::InvalidArgument(format!("kind {} needs D0 > 0", self.kind.name())));
                }
                if Flow::from_name(&self.flow)?.separable().is_none() {
                    return Err(Error::InvalidArgument(format!(
                        "kind {} needs a separable 2D flow (cellular2d or none), got {}",
                        self.kind.name(),
                        self.flow
                    )));
                }
            }
        }
        Ok(())
    }

    /// `key=value` lines that parse back to this spec.
    pub fn to_config(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "kind={}", self.kind.name());
        let _ = writeln!(s, "flow={}", self.flow);
        let _ = writeln!(s, "scheme={}", self.scheme.name());
        let _ = writeln!(s, "dt={:?}", self.dt);
        match self.noise {
            Some(Noise::D0(d)) => {
                let _ = writeln!(s, "d0={d:?}");
            }
            Some(Noise::Sigma(x)) => {
                let _ = writeln!(s, "sigma={x:?}");
            }
            None => {}
        }
        let _ = writeln!(s, "particles={}", self.particles);
        if let Some(t) = self.t_final {
            let _ = writeln!(s, "t-final={t:?}");
        }
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "checkpoints={}", self.checkpoints);
        let _ = writeln!(s, "out={}", self.out.display());
        if let Some(w) = self.workers {
            let _ = writeln!(s, "workers={w}");
        }
        if !self.dt_list.is_empty() {
            let _ = writeln!(s, "dt-list={}", list(&self.dt_list));
        }
        if !self.d0_list.is_empty() {
            let _ = writeln!(s, "d0-list={}", list(&self.d0_list));
        }
        if !self.grid.is_empty() {
            let g: Vec<String> = self.grid.iter().map(|n| n.to_string()).collect();
            let _ = writeln!(s, "grid={}", g.join(","));
        }
        if let Some(b) = self.budget_seconds {
            let _ = writeln!(s, "budget-seconds={b:?}");
        }
        if let Some(r) = self.dt_ref {
            let _ = writeln!(s, "dt-ref={r:?}");
        }
        if let Some(t) = self.tol {
            let _ = writeln!(s, "tol={t:?}");
        }
        let _ = writeln!(s, "couple={}", self.couple);
        s
    }
}

/// Float formatting used in every CSV: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `header` and `rows` (already formatted lines) to `path`.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).map_err(Error::from)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Manifest path for an output file: `results.csv` → `results.manifest`.
pub fn manifest_path(out: &Path) -> PathBuf {
    sibling(out, "manifest")
}

/// What a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub spec: ExperimentSpec,
    pub version: &'static str,
    pub wall_clock_seconds: f64,
    /// Particles (or grid cells) behind each output row.
    pub row_counts: Vec<u64>,
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl RunManifest {
    /// Comment lines, then the spec; readable back with `--config`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# effdiff {} run manifest", self.version);
        let _ = writeln!(s, "# wall_clock_seconds={:.3}", self.wall_clock_seconds);
        let counts: Vec<String> = self.row_counts.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "# row_counts={}", counts.join(","));
        for f in &self.files {
            let _ = writeln!(s, "# file={}", f.display());
        }
        for n in &self.notes {
            let _ = writeln!(s, "# note: {n}");
        }
        s.push_str(&self.spec.to_config());
        s
    }
}

struct Output {
    rows: Vec<String>,
    header: &'static str,
    counts: Vec<u64>,
    extra_files: Vec<PathBuf>,
    notes: Vec<String>,
}

/// Runs a validated spec, writing the CSV and its manifest.
pub fn run(spec: &ExperimentSpec) -> Result<RunManifest> {
    let start = Instant::now();
    let workers = match spec.workers {
        Some(n) => Workers::new(n)?,
        None => Workers::available(),
    };
    let out = match spec.kind {
        Kind::Simulate => run_simulate(spec, &workers)?,
        Kind::Converge => run_converge(spec, &workers)?,
        Kind::Enhance => run_enhance(spec, &workers)?,
        Kind::Oracle => run_oracle(spec)?,
        Kind::Kernel => run_kernel(spec)?,
    };
    write_csv(&spec.out, out.header, &out.rows)?;
    let mut files = vec![spec.out.clone()];
    files.extend(out.extra_files);
    let manifest = RunManifest {
        spec: spec.clone(),
        version: env!("CARGO_PKG_VERSION"),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        row_counts: out.counts,
        files,
        notes: out.notes,
    };
    fs::write(manifest_path(&spec.out), manifest.render())?;
    Ok(manifest)
}

fn run_simulate(spec: &ExperimentSpec, workers: &Workers) -> Result<Output> {
    let flow = Flow::from_name(&spec.flow)?;
    let cfg = IntegratorConfig::new(spec.dt, spec.need_noise()?.sigma())?;
    let sched = CheckpointSchedule::log_spaced(spec.need_t_final()?, spec.dt, spec.checkpoints)?;
    let accs = simulate(
        &flow,
        spec.scheme,
        &cfg,
        NoiseSchedule::plain(spec.dt),
        spec.particles,
        &flow.default_init_box(),
        spec.seed,
        &sched,
        workers,
    )?;
    let d = flow.dim();
    let mut rows = Vec::with_capacity(accs.len());
    let mut counts = Vec::with_capacity(accs.len());
    for acc in &accs {
        let e = estimate_d(acc)?;
        let cell = |i: usize, j: usize| if i < d && j < d { fmt_f64(e.get(i, j)) } else { String::new() };
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{}",
            fmt_f64(e.t),
            cell(0, 0),
            cell(1, 1),
            cell(2, 2),
            cell(0, 1),
            cell(0, 2),
            cell(1, 2),
            fmt_f64(e.stderr11()),
            e.n
        ));
        counts.push(e.n);
    }
    Ok(Output {
        rows,
        header: SIMULATE_HEADER,
        counts,
        extra_files: Vec::new(),
        notes: Vec::new(),
    })
}

fn run_converge(spec: &ExperimentSpec, workers: &Workers) -> Result<Output> {
    let study = ConvergenceStudy {
        flow: Flow::from_name(&spec.flow)?,
        scheme: spec.scheme,
        dt_list: spec.dt_list.clone(),
        dt_ref: spec.dt_ref.unwrap_or_else(|| ConvergenceStudy::default_dt_ref(&spec.dt_list)),
        sigma: spec.need_noise()?.sigma(),
        t_final: spec.need_t_final()?,
        n: spec.particles,
        seed: spec.seed,
        couple: spec.couple,
        init_box: None,
    };
    let table = study.run(workers)?;
    let mut rows: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{},{},{}", fmt_f64(r.dt), fmt_f64(r.d11), fmt_f64(r.abs_error)))
        .collect();
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), fmt_f64);
    rows.push(format!("# slope={},intercept={}", opt(table.slope), opt(table.intercept)));
    Ok(Output {
        counts: table.rows.iter().map(|_| spec.particles as u64).collect(),
        rows,
        header: CONVERGE_HEADER,
        extra_files: Vec::new(),
        notes: vec![format!(
            "reference dt={} d11={}",
            table.dt_ref,
            fmt_f64(table.reference.d11())
        )],
    })
}

fn run_enhance(spec: &ExperimentSpec, workers: &Workers) -> Result<Output> {
    let mut t_rule = TRule::default();
    if let Some(cap) = spec.t_final {
        t_rule.max = cap;
        t_rule.min = t_rule.min.min(cap);
    }
    let scan = EnhancementScan {
        flow: Flow::from_name(&spec.flow)?,
        scheme: spec.scheme,
        d0_list: spec.d0_list.clone(),
        dt: spec.dt,
        t_rule,
        n: spec.particles,
        seed: spec.seed,
        checkpoints: spec.checkpoints.max(4),
        budget_seconds: spec.budget_seconds,
        init_box: None,
    };
    let table = scan.run(workers)?;
    let mut rows: Vec<String> = table
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                fmt_f64(r.d0),
                fmt_f64(r.estimate.d11()),
                fmt_f64(r.estimate.stderr11()),
                fmt_f64(r.t_final),
                r.estimate.n
            )
        })
        .collect();
    if table.rows.len() >= 2 {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), fmt_f64);
        rows.push(format!("# slope={},intercept={}", opt(table.slope), opt(table.intercept)));
    }
    let mut notes: Vec<String> = table
        .rows
        .iter()
        .filter(|r| !r.mixed)
        .map(|r| format!("D0={} not mixed by t={} (no plateau over the last 4 checkpoints)", r.d0, r.t_final))
        .collect();
    if table.exhausted {
        notes.push(format!(
            "time budget exhausted after {} of {} legs",
            table.rows.len(),
            spec.d0_list.len()
        ));
    }
    Ok(Output {
        counts: table.rows.iter().map(|r| r.estimate.n).collect(),
        rows,
        header: ENHANCE_HEADER,
        extra_files: Vec::new(),
        notes,
    })
}

fn separable(spec: &ExperimentSpec) -> Result<crate::flows::FnSeparableFlow> {
    Flow::from_name(&spec.flow)?
        .separable()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a separable 2D flow", spec.flow)))
}

fn run_oracle(spec: &ExperimentSpec) -> Result<Output> {
    let flow = separable(spec)?;
    let d0 = spec.need_noise()?.d0();
    let tol = spec.tol.unwrap_or(1e-8);
    let grids = if spec.grid.is_empty() { vec![256] } else { spec.grid.clone() };
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    let mut notes = Vec::new();
    let mut last = None;
    for &n in &grids {
        let grid = TorusGrid2D::for_flow(&flow, n)?;
        let chi = solve_cell_problem(&flow, d0, &grid, tol)?;
        let d = eulerian_diffusivity(&flow, &chi);
        rows.push(
            [
                d.cov[0][0],
                d.cov[0][1],
                d.cov[1][0],
                d.cov[1][1],
                d.grad[0][0],
                d.grad[0][1],
                d.grad[1][1],
                chi.residual[0],
                chi.residual[1],
                chi.tail_fraction,
            ]
            .iter()
            .fold(n.to_string(), |acc, v| acc + "," + &fmt_f64(*v)),
        );
        counts.push(grid.len() as u64);
        notes.extend(chi.warnings());
        last = Some(chi);
    }
    let converged = grids.len() >= 2 && {
        let v: Vec<f64> = rows.iter().map(|r| r.split(',').nth(1).unwrap().parse::<f64>().unwrap()).collect();
        v.windows(2).any(|w| (w[0] - w[1]).abs() <= 1e-3 * w[1].abs())
    };
    if grids.len() >= 2 && !converged {
        notes.push("no two successive grids agree to 0.1%".into());
    }
    let chi = last.expect("at least one grid");
    let chi_path = sibling(&spec.out, "chi.csv");
    let g = chi.grid;
    let chi_rows: Vec<String> = (0..g.len())
        .map(|k| {
            let (i, j) = (k / g.n(), k % g.n());
            format!(
                "{},{},{},{}",
                fmt_f64(g.coord(0, i)),
                fmt_f64(g.coord(1, j)),
                fmt_f64(chi.chi[0][k]),
                fmt_f64(chi.chi[1][k])
            )
        })
        .collect();
    write_csv(&chi_path, "p,q,chi1,chi2", &chi_rows)?;
    Ok(Output {
        rows,
        header: ORACLE_HEADER,
        counts,
        extra_files: vec![chi_path],
        notes,
    })
}

fn run_kernel(spec: &ExperimentSpec) -> Result<Output> {
    let flow = separable(spec)?;
    let sigma = spec.need_noise()?.sigma();
    let m = spec.grid.first().copied().unwrap_or(64);
    let tol = spec.tol.unwrap_or(1e-12);
    let cfg = IntegratorConfig::new(spec.dt, sigma)?;
    let k = build_kernel(&flow, &cfg, m, default_image_cutoff(sigma, spec.dt, flow.periods()))?;
    let inv = invariant_density(&k, tol, None, 1_000_000)?;
    let decay = decay_rate(&k)?;
    let [lp, lq] = flow.periods();
    let modes = [
        k.sample(|p, _| (2.0 * PI * p / lp).sin()),
        k.sample(|_, q| (2.0 * PI * q / lq).sin()),
        k.sample(|p, q| (2.0 * PI * p / lp).sin() * (2.0 * PI * q / lq).sin()),
    ];
    let measured: Vec<f64> = modes.iter().map(|phi| mode_decay(&k, &inv.density, phi, 10_000)).collect();
    let mut rows = vec![
        format!("m,{m}"),
        format!("dt,{}", fmt_f64(spec.dt)),
        format!("sigma,{}", fmt_f64(sigma)),
        format!("image_cutoff,{}", k.image_cutoff),
        format!("max_row_sum_error,{}", fmt_f64(k.max_row_sum_error())),
        format!("min_entry,{}", fmt_f64(k.min_entry())),
        format!("density_iterations,{}", inv.iterations),
        format!("density_max_relative_deviation,{}", fmt_f64(inv.max_relative_deviation())),
        format!("lambda2_modulus,{}", fmt_f64(decay.modulus)),
        format!("rho,{}", fmt_f64(decay.rho)),
        format!("decay_sin_p,{}", fmt_f64(measured[0])),
        format!("decay_sin_q,{}", fmt_f64(measured[1])),
        format!("decay_product,{}", fmt_f64(measured[2])),
    ];
    let density_path = sibling(&spec.out, "density.csv");
    let (hp, hq) = (lp / m as f64, lq / m as f64);
    let density_rows: Vec<String> = inv
        .density
        .iter()
        .enumerate()
        .map(|(c, w)| {
            format!(
                "{},{},{}",
                fmt_f64((c / m) as f64 * hp),
                fmt_f64((c % m) as f64 * hq),
                fmt_f64(w * (m * m) as f64)
            )
        })
        .collect();
    write_csv(&density_path, "p,q,relative_density", &density_rows)?;
    let mut extra_files = vec![density_path];
    if !spec.dt_list.is_empty() {
        let d0 = 0.5 * sigma * sigma;
        let oracle_n = (2 * m).next_power_of_two().max(8);
        let oracle = generator_corrector(&flow, d0, &TorusGrid2D::for_flow(&flow, oracle_n)?, 1e-10)?;
        let table = lemma_rate_check(&flow, sigma, &spec.dt_list, m, &oracle, tol.max(1e-12))?;
        let lemma_path = sibling(&spec.out, "lemma.csv");
        let lemma_rows: Vec<String> = table
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let ratio = if i == 0 { String::new() } else { fmt_f64(table.ratios[i - 1]) };
                format!("{},{},{}", fmt_f64(r.dt), fmt_f64(r.error), ratio)
            })
            .collect();
        write_csv(&lemma_path, "dt,error,ratio", &lemma_rows)?;
        extra_files.push(lemma_path);
        rows.push(format!("lemma_rows,{}", table.rows.len()));
    }
    Ok(Output {
        counts: vec![k.cells() as u64],
        rows,
        header: KERNEL_HEADER,
        extra_files,
        notes: Vec::new(),
    })
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::NotConverged { .. } => 1,
        _ => 2,
    }
}

/// Parses, runs and reports; returns the process exit code.
pub fn main_with_args(args: &[String]) -> i32 {
    if args.iter().any(|a| a == "--help" || a == "-h") {
        println!("{USAGE}");
        return 0;
    }
    let spec = match parse_spec(args) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("effdiff: {e}\n\n{USAGE}");
            return 2;
        }
    };
    match run(&spec) {
        Ok(m) => {
            for n in &m.notes {
                eprintln!("effdiff: note: {n}");
            }
            0
        }
        Err(e) => {
            eprintln!("effdiff: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn d0_sets_sigma() {
        let s = parse_spec(&args(
            "--flow abc --scheme symplectic --d0 1e-3 --dt 0.1 --particles 10000 --t-final 1000 --seed 7 --out x.csv",
        ))
        .unwrap();
        assert_eq!(s.noise.unwrap().sigma(), (2e-3f64).sqrt());
        assert_eq!(s.seed, 7);
    }

    #[test]
    fn t_final_must_be_multiple() {
        let err = parse_spec(&args("--flow cellular2d --dt 0.1 --t-final 0.25 --out x.csv")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("not a multiple") && msg.contains("remainder"), "{msg}");
    }

    #[test]
    fn inconsistent_noise() {
        let err = parse_spec(&args("--sigma 0.2 --d0 0.01 --t-final 1 --out x.csv")).unwrap_err();
        assert!(err.to_string().contains("disagree"), "{err}");
        let ok = parse_spec(&args("--sigma 0.2 --d0 0.02 --t-final 1 --out x.csv")).unwrap();
        assert_eq!(ok.noise, Some(Noise::D0(0.02)));
    }

    #[test]
    fn unknown_names_list_registry() {
        let e = parse_spec(&args("--flow vortex --d0 1 --t-final 1 --out x.csv")).unwrap_err();
        assert!(e.to_string().contains("kolmogorov3d-type"), "{e}");
        let e = parse_spec(&args("--scheme rk4 --d0 1 --t-final 1 --out x.csv")).unwrap_err();
        assert!(e.to_string().contains("volume-preserving"), "{e}");
        assert!(parse_spec(&args("--bogus 1 --out x.csv")).is_err());
    }

    #[test]
    fn config_round_trip() {
        let s = parse_spec(&args(
            "--kind converge --flow kolmogorov3d-type --sigma 0.1414 --dt 0.05 --t-final 3 --dt-list 0.2,0.1,0.05 \
             --dt-ref 0.0125 --workers 3 --out a/b.csv --seed 18446744073709551615",
        ))
        .unwrap();
        let text = s.to_config();
        let back = spec_from_options(&parse_config(&text).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "# comment\nflow=abc\nd0=0.01\nt-final=10\ndt=0.1\nout=o.csv\n").unwrap();
        let s = parse_spec(&args(&format!("--config {} --dt 0.05", cfg.display()))).unwrap();
        assert_eq!(s.flow, "abc");
        assert_eq!(s.dt, 0.05);
        assert_eq!(s.t_final, Some(10.0));
    }

    #[test]
    fn float_format_has_17_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
    }
}
