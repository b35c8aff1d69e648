//! Coagulation and fragmentation coefficient families.
//!
//! ```text
//! PowerLawPT        a_i = i^alpha   b_i = a_i (zs + q i^(mu-1))
//! SurfaceTensionCF  a_i = i^alpha   b_i = zs (i-1)^alpha exp(sigma i^mu - sigma (i-1)^mu)
//! ExplicitTable     a_i = table_a[i-1], b_i = table_b[i-1], last entry repeated
//! ```
//!
//! In every family `b_1 = 0`; the first entry of `table_b` only matters as the
//! continuation value when the table has length one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{sum_ln_terms, Series, SeriesOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    PowerLawPT,
    SurfaceTensionCF,
    ExplicitTable,
}

/// Flat JSON form of a model, as found in scenario files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_b: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpec", into = "ModelSpec")]
pub enum CoefficientModel {
    PowerLaw { alpha: f64, mu: f64, zs: f64, q: f64 },
    SurfaceTension { alpha: f64, mu: f64, zs: f64, sigma: f64 },
    Table { a: Vec<f64>, b: Vec<f64> },
}

/// Interval enclosing a quantity over a run of indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    fn exact(x: f64) -> Self {
        Span { lo: x, hi: x }
    }
}

/// Enclosures of the per-step ratios used by the B recurrences on `[k0, k1]`.
///
/// `rho_k = a_k z / b_{k+1}` and `tau_k = a_{k+1} z / b_{k+1}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepBounds {
    pub rho: Span,
    pub tau: Span,
    pub a: Span,
}

/// Estimate of `zs` with the ratio spread seen over the probe window.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZsEstimate {
    pub value: f64,
    pub spread: f64,
    pub window: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaReport {
    /// `(k, delta_k sqrt(a_k))` over the sampled window.
    pub samples: Vec<(usize, f64)>,
    pub tail_infimum: f64,
    /// Least-squares slope of `ln(delta_k sqrt(a_k))` against `ln k` on the second half.
    pub tail_log_slope: f64,
    pub satisfied: bool,
}

pub const ZS_TABLE_TOL: f64 = 1e-2;
const DELTA_FLOOR: f64 = 1e-6;
const DELTA_SLOPE_TOL: f64 = 0.05;
const DELTA_MAX_SAMPLES: usize = 4000;

impl TryFrom<ModelSpec> for CoefficientModel {
    type Error = Error;

    fn try_from(s: ModelSpec) -> Result<Self> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::domain(format!("{:?} requires field `{name}`", s.kind)))
        };
        let forbid = |present: bool, name: &str| {
            if present {
                Err(Error::domain(format!("field `{name}` is not used by {:?}", s.kind)))
            } else {
                Ok(())
            }
        };
        let model = match s.kind {
            ModelKind::PowerLawPT => {
                forbid(s.sigma.is_some(), "sigma")?;
                forbid(s.table_a.is_some(), "table_a")?;
                forbid(s.table_b.is_some(), "table_b")?;
                CoefficientModel::PowerLaw {
                    alpha: need(s.alpha, "alpha")?,
                    mu: need(s.mu, "mu")?,
                    zs: need(s.zs, "zs")?,
                    q: need(s.q, "q")?,
                }
            }
            ModelKind::SurfaceTensionCF => {
                forbid(s.q.is_some(), "q")?;
                forbid(s.table_a.is_some(), "table_a")?;
                forbid(s.table_b.is_some(), "table_b")?;
                CoefficientModel::SurfaceTension {
                    alpha: need(s.alpha, "alpha")?,
                    mu: need(s.mu, "mu")?,
                    zs: need(s.zs, "zs")?,
                    sigma: need(s.sigma, "sigma")?,
                }
            }
            ModelKind::ExplicitTable => {
                for (present, name) in [
                    (s.alpha.is_some(), "alpha"),
                    (s.mu.is_some(), "mu"),
                    (s.zs.is_some(), "zs"),
                    (s.q.is_some(), "q"),
                    (s.sigma.is_some(), "sigma"),
                ] {
                    forbid(present, name)?;
                }
                CoefficientModel::Table {
                    a: s.table_a.clone().ok_or_else(|| Error::domain("ExplicitTable requires `table_a`"))?,
                    b: s.table_b.clone().ok_or_else(|| Error::domain("ExplicitTable requires `table_b`"))?,
                }
            }
        };
        model.validate()?;
        Ok(model)
    }
}

impl From<CoefficientModel> for ModelSpec {
    fn from(m: CoefficientModel) -> Self {
        let mut s = ModelSpec {
            kind: m.kind(),
            alpha: None,
            mu: None,
            zs: None,
            q: None,
            sigma: None,
            table_a: None,
            table_b: None,
        };
        match m {
            CoefficientModel::PowerLaw { alpha, mu, zs, q } => {
                (s.alpha, s.mu, s.zs, s.q) = (Some(alpha), Some(mu), Some(zs), Some(q));
            }
            CoefficientModel::SurfaceTension { alpha, mu, zs, sigma } => {
                (s.alpha, s.mu, s.zs, s.sigma) = (Some(alpha), Some(mu), Some(zs), Some(sigma));
            }
            CoefficientModel::Table { a, b } => {
                (s.table_a, s.table_b) = (Some(a), Some(b));
            }
        }
        s
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Domain(msg()))
    }
}

impl CoefficientModel {
    pub fn power_law(alpha: f64, mu: f64, zs: f64, q: f64) -> Result<Self> {
        let m = CoefficientModel::PowerLaw { alpha, mu, zs, q };
        m.validate()?;
        Ok(m)
    }

    pub fn surface_tension(alpha: f64, mu: f64, zs: f64, sigma: f64) -> Result<Self> {
        let m = CoefficientModel::SurfaceTension { alpha, mu, zs, sigma };
        m.validate()?;
        Ok(m)
    }

    pub fn table(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let m = CoefficientModel::Table { a, b };
        m.validate()?;
        Ok(m)
    }

    /// The constant-rate model `a_i = 1`, `b_i = 2` (for `i >= 2`).
    pub fn geometric() -> Self {
        CoefficientModel::Table {
            a: vec![1.0],
            b: vec![2.0],
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            CoefficientModel::PowerLaw { .. } => ModelKind::PowerLawPT,
            CoefficientModel::SurfaceTension { .. } => ModelKind::SurfaceTensionCF,
            CoefficientModel::Table { .. } => ModelKind::ExplicitTable,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        match *self {
            CoefficientModel::PowerLaw { alpha, mu, zs, q } => {
                check((0.0..=1.0).contains(&alpha), || format!("alpha = {alpha} outside [0, 1]"))?;
                check((0.0..1.0).contains(&mu), || format!("mu = {mu} outside [0, 1)"))?;
                check(pos(zs), || format!("zs = {zs} must be positive"))?;
                check(pos(q), || format!("q = {q} must be positive"))
            }
            CoefficientModel::SurfaceTension { alpha, mu, zs, sigma } => {
                check((0.0..=1.0).contains(&alpha), || format!("alpha = {alpha} outside [0, 1]"))?;
                check(mu > 0.0 && mu < 1.0, || format!("mu = {mu} outside (0, 1)"))?;
                check(pos(zs), || format!("zs = {zs} must be positive"))?;
                check(pos(sigma), || format!("sigma = {sigma} must be positive"))
            }
            CoefficientModel::Table { ref a, ref b } => {
                check(!a.is_empty() && !b.is_empty(), || "tables must be non-empty".into())?;
                for (i, &x) in a.iter().enumerate() {
                    check(pos(x), || format!("table_a[{i}] = {x} must be positive"))?;
                }
                for (i, &x) in b.iter().enumerate() {
                    // b_1 is forced to zero, but a length-one table still continues with it
                    let ok = if i == 0 && b.len() > 1 { x.is_finite() && x >= 0.0 } else { pos(x) };
                    check(ok, || format!("table_b[{i}] = {x} is not admissible"))?;
                }
                Ok(())
            }
        }
    }

    pub fn ln_a(&self, i: usize) -> f64 {
        debug_assert!(i >= 1);
        match self {
            CoefficientModel::PowerLaw { alpha, .. } | CoefficientModel::SurfaceTension { alpha, .. } => {
                alpha * (i as f64).ln()
            }
            CoefficientModel::Table { a, .. } => a[i.min(a.len()) - 1].ln(),
        }
    }

    /// `ln b_i`, which is `-inf` at `i = 1`.
    pub fn ln_b(&self, i: usize) -> f64 {
        debug_assert!(i >= 1);
        if i == 1 {
            return f64::NEG_INFINITY;
        }
        let x = i as f64;
        match *self {
            CoefficientModel::PowerLaw { alpha, mu, zs, q } => alpha * x.ln() + (zs + q * x.powf(mu - 1.0)).ln(),
            CoefficientModel::SurfaceTension { alpha, mu, zs, sigma } => {
                zs.ln() + alpha * (x - 1.0).ln() + sigma * power_increment(x - 1.0, mu)
            }
            CoefficientModel::Table { ref b, .. } => b[i.min(b.len()) - 1].ln(),
        }
    }

    pub fn a(&self, i: usize) -> f64 {
        match self {
            CoefficientModel::Table { a, .. } => a[i.min(a.len()) - 1],
            _ => self.ln_a(i).exp(),
        }
    }

    pub fn b(&self, i: usize) -> f64 {
        match self {
            _ if i == 1 => 0.0,
            CoefficientModel::Table { b, .. } => b[i.min(b.len()) - 1],
            _ => self.ln_b(i).exp(),
        }
    }

    /// `(a_i, b_i)` for a cluster size `i >= 1`.
    pub fn eval_coefficients(&self, i: usize) -> Result<(f64, f64)> {
        if i == 0 {
            return Err(Error::domain("cluster sizes start at 1"));
        }
        Ok((self.a(i), self.b(i)))
    }

    /// `ln(a_k z / b_{k+1})`, computed without cancelling large logarithms.
    pub fn ln_step_ratio(&self, k: usize, z: f64) -> f64 {
        let x = k as f64;
        match *self {
            CoefficientModel::PowerLaw { alpha, mu, zs, q } => {
                -alpha * (1.0 / x).ln_1p() + z.ln() - (zs + q * (x + 1.0).powf(mu - 1.0)).ln()
            }
            CoefficientModel::SurfaceTension { mu, zs, sigma, .. } => {
                (z / zs).ln() - sigma * power_increment(x, mu)
            }
            CoefficientModel::Table { .. } => self.ln_a(k) + z.ln() - self.ln_b(k + 1),
        }
    }

    /// `ln(a_{k+1} z / b_{k+1})`.
    pub fn ln_step_tau(&self, k: usize, z: f64) -> f64 {
        match *self {
            CoefficientModel::PowerLaw { alpha, .. } | CoefficientModel::SurfaceTension { alpha, .. } => {
                self.ln_step_ratio(k, z) + alpha * (1.0 / k as f64).ln_1p()
            }
            CoefficientModel::Table { .. } => self.ln_a(k + 1) + z.ln() - self.ln_b(k + 1),
        }
    }

    fn table_len(&self) -> usize {
        match self {
            CoefficientModel::Table { a, b } => a.len().max(b.len()),
            _ => 0,
        }
    }

    /// First index from which [`Self::step_bounds`] may be used on runs longer than one.
    pub fn smooth_from(&self) -> usize {
        self.table_len().max(1)
    }

    /// Enclosures of `rho_k`, `tau_k` and `a_k` for `k` in `[k0, k1]`.
    ///
    /// Valid for `k0 == k1` anywhere and for `k0 >= smooth_from()` otherwise.
    pub fn step_bounds(&self, k0: usize, k1: usize, z: f64) -> StepBounds {
        debug_assert!(k0 <= k1 && (k0 == k1 || k0 >= self.smooth_from()));
        let rho = |k| self.ln_step_ratio(k, z).exp();
        let tau = |k| self.ln_step_tau(k, z).exp();
        if k0 == k1 {
            return StepBounds {
                rho: Span::exact(rho(k0)),
                tau: Span::exact(tau(k0)),
                a: Span::exact(self.a(k0)),
            };
        }
        match *self {
            // rho, tau and a are all non-decreasing in k
            CoefficientModel::PowerLaw { .. } => StepBounds {
                rho: Span { lo: rho(k0), hi: rho(k1) },
                tau: Span { lo: tau(k0), hi: tau(k1) },
                a: Span { lo: self.a(k0), hi: self.a(k1) },
            },
            // tau = (1 + 1/k)^alpha rho, a decreasing factor times an increasing one
            CoefficientModel::SurfaceTension { alpha, .. } => {
                let f = |k: usize| (alpha * (1.0 / k as f64).ln_1p()).exp();
                let (r0, r1) = (rho(k0), rho(k1));
                StepBounds {
                    rho: Span { lo: r0, hi: r1 },
                    tau: Span { lo: f(k1) * r0, hi: f(k0) * r1 },
                    a: Span { lo: self.a(k0), hi: self.a(k1) },
                }
            }
            // past the table everything is constant
            CoefficientModel::Table { .. } => StepBounds {
                rho: Span::exact(rho(k0)),
                tau: Span::exact(tau(k0)),
                a: Span::exact(self.a(k0)),
            },
        }
    }

    /// Upper bound on `a_j z / b_{j+1}` over all `j >= k`.
    pub fn rho_sup_from(&self, k: usize, z: f64) -> f64 {
        match *self {
            CoefficientModel::PowerLaw { zs, .. } | CoefficientModel::SurfaceTension { zs, .. } => z / zs,
            CoefficientModel::Table { .. } => {
                let end = self.table_len().max(k);
                (k..=end).map(|j| self.ln_step_ratio(j, z).exp()).fold(0.0, f64::max)
            }
        }
    }

    /// Upper bound on `a_{j+1}/a_j` and `b_{j+2}/b_{j+1}` over all `j >= k`.
    pub fn growth_sup_from(&self, k: usize) -> f64 {
        match *self {
            CoefficientModel::PowerLaw { alpha, .. } | CoefficientModel::SurfaceTension { alpha, .. } => {
                (alpha * (1.0 / k as f64).ln_1p()).exp()
            }
            CoefficientModel::Table { .. } => {
                let end = self.table_len().max(k);
                let mut g = 1.0f64;
                for j in k..=end {
                    g = g.max((self.ln_a(j + 1) - self.ln_a(j)).exp());
                    if j + 1 >= 2 {
                        g = g.max((self.ln_b(j + 2) - self.ln_b(j + 1)).exp());
                    }
                }
                g
            }
        }
    }

    /// Lower bound on `a_i z + b_i` over all `i > n`.
    pub fn sigma_tail_inf(&self, n: usize, z: f64) -> f64 {
        let x = (n + 1) as f64;
        match *self {
            CoefficientModel::PowerLaw { alpha, zs, .. } => x.powf(alpha) * (z + zs),
            CoefficientModel::SurfaceTension { alpha, zs, .. } => x.powf(alpha) * z + zs * (x - 1.0).powf(alpha),
            CoefficientModel::Table { .. } => {
                let end = self.table_len().max(n + 1);
                (n + 1..=end)
                    .map(|i| self.a(i) * z + self.b(i))
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// `ln Q_i` for `i = 1..=n`, with `Q_1 = 1` and `Q_{i+1} = Q_i a_i / b_{i+1}`.
    pub fn log_detailed_balance(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::domain("need at least one cluster size"));
        }
        let mut out = Vec::with_capacity(n);
        let mut ln_q = 0.0;
        out.push(ln_q);
        for i in 1..n {
            ln_q += self.ln_step_ratio(i, 1.0);
            out.push(ln_q);
        }
        Ok(out)
    }

    /// `zs`, estimated from the table tail for [`CoefficientModel::Table`].
    pub fn zs_estimate(&self, tol: f64) -> Result<ZsEstimate> {
        match *self {
            CoefficientModel::PowerLaw { zs, .. } | CoefficientModel::SurfaceTension { zs, .. } => Ok(ZsEstimate {
                value: zs,
                spread: 0.0,
                window: (0, 0),
            }),
            CoefficientModel::Table { .. } => {
                // Q_i / Q_{i+1} = b_{i+1} / a_i; the last ratio repeats forever
                let len = self.table_len();
                let limit = (self.ln_b(len + 1) - self.ln_a(len)).exp();
                let start = len.saturating_sub(64).max(1);
                let (mut lo, mut hi) = (limit, limit);
                for i in start..len {
                    let r = (self.ln_b(i + 1) - self.ln_a(i)).exp();
                    lo = lo.min(r);
                    hi = hi.max(r);
                }
                let spread = (hi - lo) / limit;
                if spread > tol {
                    return Err(Error::Estimation {
                        spread,
                        tol,
                        window: (start, len),
                    });
                }
                Ok(ZsEstimate {
                    value: limit,
                    spread,
                    window: (start, len),
                })
            }
        }
    }

    pub fn critical_monomer_density(&self) -> Result<f64> {
        Ok(self.zs_estimate(ZS_TABLE_TOL)?.value)
    }

    /// `sum_i i Q_i zs^i`, or `+inf` when the series is found to diverge.
    pub fn critical_mass(&self, tol: f64) -> Result<f64> {
        let zs = self.critical_monomer_density()?;
        let ln_zs = zs.ln();
        let mut ln_q = 0.0;
        let terms = |i: usize| {
            if i > 1 {
                ln_q += self.ln_step_ratio(i - 1, 1.0);
            }
            (i as f64).ln() + ln_q + i as f64 * ln_zs
        };
        let opts = SeriesOptions {
            tol,
            max_terms: 20_000_000,
            probe: 64,
        };
        match sum_ln_terms(1, terms, |_| 1.0, &opts)? {
            Series::Converged(s) => Ok(s.value),
            Series::Diverged { .. } => Ok(f64::INFINITY),
        }
    }

    /// Samples `delta_k sqrt(a_k)` with `delta_k = b_k / (a_k zs) - 1` over `[k0, k1]`.
    ///
    /// The condition counts as satisfied when the samples on the upper half of
    /// the window stay above 1e-6 and do not decay like a power of `k`.
    pub fn delta_condition(&self, k0: usize, k1: usize) -> Result<DeltaReport> {
        if k0 < 2 || k1 < k0 + 3 {
            return Err(Error::domain(format!("delta window [{k0}, {k1}] must satisfy 2 <= k0 < k1 - 2")));
        }
        let zs = self.critical_monomer_density()?;
        let ks: Vec<usize> = if k1 - k0 < DELTA_MAX_SAMPLES {
            (k0..=k1).collect()
        } else {
            let (l0, l1) = ((k0 as f64).ln(), (k1 as f64).ln());
            let mut v: Vec<usize> = (0..DELTA_MAX_SAMPLES)
                .map(|j| (l0 + (l1 - l0) * j as f64 / (DELTA_MAX_SAMPLES - 1) as f64).exp().round() as usize)
                .collect();
            v.dedup();
            v
        };
        let samples: Vec<(usize, f64)> = ks
            .iter()
            .map(|&k| {
                let delta = (self.ln_b(k) - self.ln_a(k) - zs.ln()).exp_m1();
                (k, delta * (0.5 * self.ln_a(k)).exp())
            })
            .collect();
        let mid = (k0 + k1) / 2;
        let upper: Vec<(f64, f64)> = samples
            .iter()
            .filter(|(k, _)| *k >= mid)
            .map(|&(k, v)| ((k as f64).ln(), v))
            .collect();
        let tail_infimum = upper.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let tail_log_slope = if tail_infimum > 0.0 {
            let pts: Vec<(f64, f64)> = upper.iter().map(|&(x, v)| (x, v.ln())).collect();
            crate::stats::least_squares(&pts).slope
        } else {
            f64::NEG_INFINITY
        };
        Ok(DeltaReport {
            satisfied: tail_infimum > DELTA_FLOOR && tail_log_slope >= -DELTA_SLOPE_TOL,
            samples,
            tail_infimum,
            tail_log_slope,
        })
    }
}

/// `(x+1)^mu - x^mu` without cancellation for large `x`.
fn power_increment(x: f64, mu: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    x.powf(mu) * (mu * (1.0 / x).ln_1p()).exp_m1()
}
