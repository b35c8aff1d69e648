//! Scenario runner behind the `bdgap` binary.
//!
//! A scenario is a JSON file naming a coefficient model, a mode and the
//! numerical parameters. [`run`] validates it, performs the computation and
//! writes its reports under the `out` prefix.

use std::fs;
use std::path::{Path, PathBuf};

use bdgap_core::dynamics::{
    exp_moment, fit_decay_rate, perturbed_equilibrium, DecayFit, Observe, ObservableRow,
};
use bdgap_core::equilibrium::detailed_balance_residual;
use bdgap_core::spectral::{
    build_linearized, critical_sweep, gap_bounds, numerical_gap, profile_hardy, quantity_b, spectral_report,
    SweepOptions,
};
use bdgap_core::{equilibrium_profile, integrate, mass_of_z, z_of_mass, CoefficientModel, Controls, EquilibriumProfile};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("{context}: {source}")]
    Compute {
        context: &'static str,
        #[source]
        source: bdgap_core::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Compute { source, .. } if source.is_validation() => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

trait Context<T> {
    fn context(self, what: &'static str) -> Result<T>;
}

impl<T> Context<T> for bdgap_core::Result<T> {
    fn context(self, what: &'static str) -> Result<T> {
        self.map_err(|source| CliError::Compute { context: what, source })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Equilibrium,
    Spectrum,
    Simulate,
    Sweep,
    Hardy,
}

fn default_tol() -> f64 {
    1e-12
}
fn default_snapshot() -> f64 {
    0.5
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_out() -> String {
    "bdgap".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: CoefficientModel,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    /// Weight exponent for the l1 distance; defaults to `ln(zs/z)/4`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Exponential moment exponent; defaults to `eta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    /// Series and root-finding tolerance.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atol: Option<f64>,
    #[serde(default = "default_snapshot")]
    pub snapshot_every: f64,
    /// Size of the initial perturbation for `simulate`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_grid: Option<Vec<f64>>,
    /// Truncation for the numerical gap column of a sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeric_n: Option<usize>,
    #[serde(default = "default_out")]
    pub out: String,
}

/// Command-line values layered over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub z: Option<f64>,
    pub mass: Option<f64>,
    pub n: Option<usize>,
    pub t_end: Option<f64>,
    pub eta: Option<f64>,
    pub out: Option<String>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// A flag for `z` replaces a `mass` from the file and vice versa; giving both flags is an error.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if o.z.is_some() && o.mass.is_some() {
            return Err(CliError::Validation("--z and --mass are mutually exclusive".into()));
        }
        if let Some(z) = o.z {
            self.z = Some(z);
            self.mass = None;
        }
        if let Some(m) = o.mass {
            self.mass = Some(m);
            self.z = None;
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(n) = o.n {
            self.n = Some(n);
        }
        if let Some(t) = o.t_end {
            self.t_end = Some(t);
        }
        if let Some(e) = o.eta {
            self.eta = Some(e);
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Validation(m));
        let positive = |name: &str, v: Option<f64>| -> Result<()> {
            match v {
                Some(x) if !(x > 0.0 && x.is_finite()) => {
                    Err(CliError::Validation(format!("`{name}` must be positive and finite, got {x}")))
                }
                _ => Ok(()),
            }
        };
        if self.mode != Mode::Sweep {
            match (self.z, self.mass) {
                (Some(_), Some(_)) => return bad("give exactly one of `z` and `mass`, not both".into()),
                (None, None) => return bad("one of `z` or `mass` is required".into()),
                _ => {}
            }
        } else if self.z.is_some() || self.mass.is_some() {
            return bad("`sweep` sets z from `w_grid`; remove `z` and `mass`".into());
        }
        positive("z", self.z)?;
        positive("mass", self.mass)?;
        positive("t_end", self.t_end)?;
        positive("eta", self.eta)?;
        positive("nu", self.nu)?;
        positive("rtol", self.rtol)?;
        positive("atol", self.atol)?;
        positive("snapshot_every", Some(self.snapshot_every))?;
        positive("epsilon", Some(self.epsilon))?;
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return bad(format!("`tol` must lie in (0, 1), got {}", self.tol));
        }
        let need_n = |min: usize| -> Result<()> {
            match self.n {
                None => Err(CliError::Validation(format!("mode `{}` requires `n`", self.mode_name()))),
                Some(n) if n < min => Err(CliError::Validation(format!("`n` must be at least {min}, got {n}"))),
                _ => Ok(()),
            }
        };
        match self.mode {
            Mode::Equilibrium | Mode::Hardy => need_n(2)?,
            Mode::Spectrum => need_n(3)?,
            Mode::Simulate => {
                need_n(3)?;
                if self.t_end.is_none() {
                    return bad("mode `simulate` requires `t_end`".into());
                }
            }
            Mode::Sweep => {
                match &self.w_grid {
                    Some(g) if !g.is_empty() => {
                        if let Some(w) = g.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
                            return bad(format!("`w_grid` entries must be positive, got {w}"));
                        }
                    }
                    _ => return bad("mode `sweep` requires a non-empty `w_grid`".into()),
                }
                if let Some(n) = self.numeric_n {
                    if n < 3 {
                        return bad(format!("`numeric_n` must be at least 3, got {n}"));
                    }
                }
            }
        }
        Ok(())
    }

    fn mode_name(&self) -> &'static str {
        match self.mode {
            Mode::Equilibrium => "equilibrium",
            Mode::Spectrum => "spectrum",
            Mode::Simulate => "simulate",
            Mode::Sweep => "sweep",
            Mode::Hardy => "hardy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, pass: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        pass,
        detail,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ScenarioConfig,
    /// Monomer density and mass actually used, whichever of the two was given.
    pub z: Option<f64>,
    pub mass: Option<f64>,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub outputs: Vec<String>,
    pub result: Value,
}

struct Outputs {
    prefix: String,
    written: Vec<String>,
}

impl Outputs {
    fn new(prefix: &str) -> Result<Self> {
        if let Some(dir) = Path::new(prefix).parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| CliError::Io {
                path: dir.to_owned(),
                source,
            })?;
        }
        Ok(Outputs {
            prefix: prefix.into(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, suffix: &str, body: &str) -> Result<()> {
        let path = format!("{}.{suffix}", self.prefix);
        fs::write(&path, body).map_err(|source| CliError::Io {
            path: path.clone().into(),
            source,
        })?;
        self.written.push(path);
        Ok(())
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report types serialise");
    s.push('\n');
    s
}

/// Validates, runs and writes every report; the summary is also written to `<out>.summary.json`.
pub fn run(config: &ScenarioConfig) -> Result<Summary> {
    config.validate()?;
    let mut out = Outputs::new(&config.out)?;
    let (z, mass, checks, result) = match config.mode {
        Mode::Equilibrium => run_equilibrium(config, &mut out)?,
        Mode::Spectrum => run_spectrum(config, &mut out)?,
        Mode::Simulate => run_simulate(config, &mut out)?,
        Mode::Sweep => run_sweep(config, &mut out)?,
        Mode::Hardy => run_hardy(config, &mut out)?,
    };
    let mut outputs = out.written.clone();
    outputs.push(format!("{}.summary.json", config.out));
    let summary = Summary {
        config: config.clone(),
        z,
        mass,
        passed: checks.iter().all(|c| c.pass),
        checks,
        outputs,
        result,
    };
    out.write("summary.json", &to_json(&summary))?;
    Ok(summary)
}

type ModeOutput = (Option<f64>, Option<f64>, Vec<Check>, Value);

fn resolve_z(config: &ScenarioConfig) -> Result<(f64, f64)> {
    let model = &config.model;
    match (config.z, config.mass) {
        (Some(z), None) => Ok((z, mass_of_z(model, z, config.tol).context("mass of z")?)),
        (None, Some(m)) => Ok((z_of_mass(model, m, config.tol).context("z of mass")?, m)),
        _ => unreachable!("validated"),
    }
}

fn profile(config: &ScenarioConfig) -> Result<(EquilibriumProfile, f64)> {
    let (z, mass) = resolve_z(config)?;
    let n = config.n.expect("validated");
    let p = equilibrium_profile(&config.model, z, n, config.tol).context("equilibrium profile")?;
    Ok((p, mass))
}

fn run_equilibrium(config: &ScenarioConfig, out: &mut Outputs) -> Result<ModeOutput> {
    let (p, mass) = profile(config)?;
    let resid = detailed_balance_residual(&p, &config.model);
    let mass_err = (p.mass - mass).abs() / mass.max(f64::MIN_POSITIVE);
    let checks = vec![
        check("detailed_balance", resid < 1e-12, format!("relative residual {resid:.3e}")),
        check("mass", mass_err < 1e-9, format!("profile mass {} vs {mass}, relative {mass_err:.3e}", p.mass)),
        check("second_moment", p.mass <= p.m2, format!("M1 = {}, M2 = {}", p.mass, p.m2)),
    ];
    out.write("profile.json", &to_json(&p))?;
    let result = json!({
        "zs": p.zs, "mass": p.mass, "m2": p.m2, "m3": p.m3, "a_quantity": p.a_quantity,
        "sum_q": p.sum_q, "tail_q": p.tail_q,
    });
    Ok((Some(p.z), Some(mass), checks, result))
}

fn run_spectrum(config: &ScenarioConfig, out: &mut Outputs) -> Result<ModeOutput> {
    let (p, mass) = profile(config)?;
    let report = spectral_report(&p, &config.model, 1e-10).context("spectral report")?;
    let mut checks = Vec::new();
    if let Some(num) = report.lambda_numeric {
        checks.push(check(
            "lower_bound",
            report.lambda_lo <= num + 1e-8,
            format!("lambda_lo {} <= lambda_numeric {num}", report.lambda_lo),
        ));
        checks.push(check(
            "upper_bound",
            num <= report.lambda_hi,
            format!("lambda_numeric {num} <= lambda_hi {}", report.lambda_hi),
        ));
    }
    let b = report.b_quantity.value;
    checks.push(check(
        "hardy_bracket",
        report.hardy_b <= 4.0 * b * (1.0 + 1e-9) && b <= report.hardy_b * (1.0 + 1e-9) + 1e-12,
        format!("B {b} <= B_h {} <= 4B", report.hardy_b),
    ));
    let (lo, hi) = report.lambda1_bracket;
    checks.push(check(
        "lambda1_bracket",
        lo <= report.lambda1_numeric * (1.0 + 1e-9) && report.lambda1_numeric <= hi * (1.0 + 1e-9),
        format!("{lo} <= lambda1 {} <= {hi}", report.lambda1_numeric),
    ));
    out.write("spectrum.json", &to_json(&report))?;
    let result = serde_json::to_value(&report).expect("report serialises");
    Ok((Some(p.z), Some(mass), checks, result))
}

fn entropy_monotone(rows: &[ObservableRow]) -> bool {
    rows.windows(2).all(|w| w[1].h <= w[0].h + 1e-10)
}

fn run_simulate(config: &ScenarioConfig, out: &mut Outputs) -> Result<ModeOutput> {
    let model = &config.model;
    let (p, mass) = profile(config)?;
    let n = p.n;
    let half_gap = 0.5 * (p.zs / p.z).ln();
    let eta = config.eta.unwrap_or(0.5 * half_gap);
    if eta >= half_gap {
        return Err(CliError::Validation(format!(
            "`eta` = {eta} must be below ln(zs/z)/2 = {half_gap}"
        )));
    }
    let nu = config.nu.unwrap_or(eta);

    let b = quantity_b(&p, model, 1e-10).context("quantity B")?;
    let bounds = gap_bounds(&p, b.value, p.m2, p.m3).context("gap bounds")?;
    let lambda_numeric = build_linearized(&p, model, n)
        .and_then(|m| numerical_gap(&m, 1e-10))
        .context("numerical gap")?
        .value;

    let (s0, _) = perturbed_equilibrium(&p, config.epsilon, config.seed).context("initial state")?;
    let defaults = Controls::default();
    let controls = Controls {
        rtol: config.rtol.unwrap_or(defaults.rtol),
        atol: config.atol.unwrap_or(defaults.atol),
        snapshot_every: config.snapshot_every,
        ..defaults
    };
    let t_end = config.t_end.expect("validated");
    let obs = Observe { profile: &p, nu, eta };
    let tr = integrate(model, &s0, t_end, &controls, Some(&obs)).context("integration")?;
    out.write("trajectory.csv", &tr.observables_csv())?;

    let rows = &tr.observables;
    let series: Vec<(f64, f64)> = rows.iter().map(|r| (r.t, r.l1_dist)).collect();
    let fit: Option<DecayFit> = match fit_decay_rate(&series) {
        Ok(f) => Some(f),
        Err(e) => {
            log::warn!("no decay fit: {e}");
            None
        }
    };
    let m0 = exp_moment(&s0, nu).context("exponential moment")?;
    let mmax = rows.iter().map(|r| r.exp_moment).fold(0.0, f64::max);
    let fz_min = rows.iter().map(|r| r.fz).fold(f64::INFINITY, f64::min);

    let mut checks = vec![
        check("mass_drift", tr.mass_drift < 1e-8, format!("relative drift {:.3e}", tr.mass_drift)),
        check("entropy_monotone", entropy_monotone(rows), "H non-increasing per snapshot within 1e-10".into()),
        check("free_energy_nonnegative", fz_min >= 0.0, format!("min F_z {fz_min:.3e}")),
        check("moment_bounded", mmax <= 2.0 * m0, format!("max moment {mmax:.6e} vs initial {m0:.6e}")),
    ];
    let rate = fit.as_ref().map(|f| f.rate);
    match &fit {
        Some(f) => {
            checks.push(check("fit_quality", f.r2 > 0.99, format!("r2 {:.6} on {} rows", f.r2, f.rows)));
            checks.push(check(
                "rate_above_bound",
                f.rate >= 0.9 * bounds.lo,
                format!("rate {} >= 0.9 lambda_lo = {}", f.rate, 0.9 * bounds.lo),
            ));
        }
        None => checks.push(check("fit_quality", false, "too few usable rows in [t_end/2, t_end]".into())),
    }
    let result = json!({
        "n": n,
        "eta": eta,
        "nu": nu,
        "B": b,
        "lambda_lo": bounds.lo,
        "lambda_hi": finite_or_string(bounds.hi),
        "inv_b": 1.0 / b.value,
        "lambda_numeric": lambda_numeric,
        "lambda_hat": rate,
        "fit": fit,
        "within_bracket": rate.map(|r| r >= bounds.lo && r <= bounds.hi),
        "relative_to_numeric": rate.map(|r| (r - lambda_numeric) / lambda_numeric),
        "stats": tr.stats,
    });
    Ok((Some(p.z), Some(mass), checks, result))
}

fn finite_or_string(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x > 0.0 {
        json!("inf")
    } else {
        json!(x.to_string())
    }
}

fn opt_cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn run_sweep(config: &ScenarioConfig, out: &mut Outputs) -> Result<ModeOutput> {
    let grid = config.w_grid.as_deref().expect("validated");
    let opts = SweepOptions {
        numeric_n: config.numeric_n,
        moment_tol: config.tol,
        ..Default::default()
    };
    let report = critical_sweep(&config.model, grid, &opts).context("critical sweep")?;
    let mut csv = String::from("w,z,B,lambda_lo,lambda_hi,lambda_numeric\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.w,
            r.z,
            opt_cell(r.b.as_ref().map(|b| b.value)),
            opt_cell(r.lambda_lo),
            opt_cell(r.lambda_hi),
            opt_cell(r.lambda_numeric)
        ));
    }
    out.write("sweep.csv", &csv)?;
    let failed: Vec<String> = report
        .rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("w = {}: {e}", r.w)))
        .collect();
    let checks = vec![check(
        "rows_complete",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} rows", report.rows.len())
        } else {
            failed.join("; ")
        },
    )];
    let result = json!({
        "fitted_exponent": report.fitted_exponent,
        "r2": report.fit.r2,
        "intercept": report.fit.intercept,
        "rows": report.rows.len(),
    });
    Ok((None, None, checks, result))
}

fn run_hardy(config: &ScenarioConfig, out: &mut Outputs) -> Result<ModeOutput> {
    let (p, mass) = profile(config)?;
    let hardy = profile_hardy(&p, &config.model).context("Hardy bracket")?;
    let b = quantity_b(&p, &config.model, 1e-10).context("quantity B")?;
    let bh = hardy.b_hardy;
    let checks_head = vec![
        check(
            "witness_attains",
            hardy.witness_ratio >= bh * (1.0 - 1e-6),
            format!("witness ratio {} at k = {} vs B_h {bh}", hardy.witness_ratio, hardy.witness_k),
        ),
        check(
            "witness_below_4b",
            hardy.witness_ratio <= 4.0 * bh * (1.0 + 1e-9),
            format!("witness ratio {} <= 4 B_h", hardy.witness_ratio),
        ),
    ];
    let mut checks = checks_head;
    // B_h is the maximum over k < n only, so it cannot exceed B
    checks.push(check(
        "truncated_below_b",
        bh <= b.upper * (1.0 + 1e-9),
        format!("B_h {bh} vs B in [{}, {}] (argmax {})", b.value, b.upper, b.argmax),
    ));
    let result = json!({
        "hardy": hardy,
        "B": b,
        "bracket": [bh, 4.0 * bh],
    });
    out.write("hardy.json", &to_json(&result))?;
    Ok((Some(p.z), Some(mass), checks, result))
}
