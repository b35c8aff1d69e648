//! Equilibria `Qcal_i = Q_i z^i`, the mass map and the moments used by the gap bounds.
//!
//! ```text
//! mass = sum i Qcal_i          M2 = sum i^2 Qcal_i
//! M3   = sum (a_i Qcal_i)^-1 (sum_{j>i} j Qcal_j)^2
//! A    = sum i^2 (1 + a_i + b_i)^2 Qcal_i
//! ```

use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientModel;
use crate::error::{Error, Result};
use crate::series::{sum_ln_terms, Series, SeriesOptions, SeriesSum};
use crate::stats::ln_add;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumProfile {
    pub z: f64,
    pub zs: f64,
    pub n: usize,
    /// `ln Qcal_i` for `i = 1..=n`.
    pub log_q: Vec<f64>,
    pub mass: f64,
    pub m2: f64,
    /// `+inf` when its summands could not be certified.
    #[serde(with = "crate::stats::extended")]
    pub m3: f64,
    pub a_quantity: f64,
    /// `sum_{i>=1} Qcal_i`.
    pub sum_q: f64,
    /// `sum_{i>=1} a_i Qcal_i`.
    pub sum_aq: f64,
    /// `sum_{i>n} Qcal_i`.
    pub tail_q: f64,
    /// `sum_{i>n} a_i Qcal_i`.
    pub tail_aq: f64,
    /// Largest remainder bound among the sums above.
    pub tail_bound: f64,
}

impl EquilibriumProfile {
    pub fn q(&self, i: usize) -> f64 {
        self.log_q[i - 1].exp()
    }

    /// `ln Qcal_i` for `i = 1..=m`, continuing past `n` with the model ratios.
    pub fn extended_log_q(&self, model: &CoefficientModel, m: usize) -> Vec<f64> {
        let mut out: Vec<f64> = self.log_q.iter().copied().take(m).collect();
        while out.len() < m {
            let i = out.len();
            out.push(out[i - 1] + model.ln_step_ratio(i, self.z));
        }
        out
    }
}

fn check_z(model: &CoefficientModel, z: f64) -> Result<f64> {
    let zs = model.critical_monomer_density()?;
    if !(z.is_finite() && z >= 0.0) {
        return Err(Error::domain(format!("monomer density z = {z} must be non-negative")));
    }
    if z > zs {
        return Err(Error::domain(format!("z = {z} exceeds the critical density zs = {zs}")));
    }
    Ok(zs)
}

/// `sum_{i >= first} w_i Qcal_i`, where `ln_q_first = ln Qcal_first`.
///
/// `growth(N)` bounds `w_{j+1}/w_j` for `j >= N`.
pub(crate) fn weighted_sum(
    model: &CoefficientModel,
    z: f64,
    first: usize,
    ln_q_first: f64,
    ln_w: impl Fn(usize) -> f64,
    growth: impl Fn(usize) -> f64,
    opts: &SeriesOptions,
) -> Result<Series> {
    let mut ln_q = ln_q_first;
    let term = |i: usize| {
        if i > first {
            ln_q += model.ln_step_ratio(i - 1, z);
        }
        ln_q + ln_w(i)
    };
    sum_ln_terms(first, term, |k| growth(k) * model.rho_sup_from(k, z), opts)
}

fn index_growth(p: f64) -> impl Fn(usize) -> f64 {
    move |k| (p * (1.0 / k as f64).ln_1p()).exp()
}

/// Total mass `sum i Q_i z^i`; `+inf` at `z = zs` when the series diverges there.
pub fn mass_of_z(model: &CoefficientModel, z: f64, tol: f64) -> Result<f64> {
    check_z(model, z)?;
    if z == 0.0 {
        return Ok(0.0);
    }
    let opts = SeriesOptions::with_tol(tol);
    match weighted_sum(model, z, 1, z.ln(), |i| (i as f64).ln(), index_growth(1.0), &opts)? {
        Series::Converged(s) => Ok(s.value),
        Series::Diverged { .. } => Ok(f64::INFINITY),
    }
}

/// Inverse of [`mass_of_z`] by bisection, for `0 <= rho <= critical mass`.
pub fn z_of_mass(model: &CoefficientModel, rho: f64, tol: f64) -> Result<f64> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(Error::domain(format!("mass {rho} must be finite and non-negative")));
    }
    if !(tol > 0.0) {
        return Err(Error::domain("tolerance must be positive"));
    }
    let zs = model.critical_monomer_density()?;
    if rho == 0.0 {
        return Ok(0.0);
    }
    match model.critical_mass(1e-10) {
        Ok(rs) if rho > rs => return Err(Error::Supercritical { mass: rho, critical: rs }),
        _ => {}
    }
    let inner = tol * 1e-2;
    let mass = |z: f64| mass_of_z(model, z, inner);

    // Walk the upper end towards zs rather than starting at zs(1 - 1e-12):
    // near zs the mass series may need far more terms than the answer requires.
    let mut lo = 0.0;
    let mut hi = None;
    for k in 1..=41 {
        let cand = if k <= 40 { zs * (1.0 - 0.5f64.powi(k)) } else { zs * (1.0 - 1e-12) };
        let m = mass(cand)?;
        if m >= rho {
            hi = Some(cand);
            break;
        }
        lo = cand;
    }
    let Some(mut hi) = hi else {
        return Err(Error::Supercritical {
            mass: rho,
            critical: mass(zs * (1.0 - 1e-12))?,
        });
    };

    let accept = tol.max(8.0 * f64::EPSILON * rho);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let m = mass(mid)?;
        if (m - rho).abs() <= 1e-2 * accept || hi - lo <= 4.0 * f64::EPSILON * hi {
            if (m - rho).abs() > accept {
                return Err(Error::Solver(format!(
                    "mass map flat near z = {mid}: residual {:.3e}",
                    (m - rho).abs()
                )));
            }
            return Ok(mid);
        }
        if m < rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Solver("bisection did not converge in 200 iterations".into()))
}

/// Equilibrium at monomer density `z` truncated at `n`, with certified moments.
pub fn equilibrium_profile(model: &CoefficientModel, z: f64, n: usize, tol: f64) -> Result<EquilibriumProfile> {
    let zs = check_z(model, z)?;
    if z == 0.0 {
        return Err(Error::domain("the equilibrium at z = 0 is identically zero"));
    }
    if n < 2 {
        return Err(Error::domain(format!("truncation size n = {n} must be at least 2")));
    }
    let mut log_q = Vec::with_capacity(n);
    log_q.push(z.ln());
    for i in 1..n {
        log_q.push(log_q[i - 1] + model.ln_step_ratio(i, z));
    }

    let opts = SeriesOptions::with_tol(tol);
    let ln_a = |i: usize| model.ln_a(i);
    let g = |k: usize| model.growth_sup_from(k);
    let from_start = |ln_w: &dyn Fn(usize) -> f64, growth: &dyn Fn(usize) -> f64| -> Result<SeriesSum> {
        weighted_sum(model, z, 1, z.ln(), ln_w, growth, &opts)?.finite()
    };
    let sum_q = from_start(&|_| 0.0, &|_| 1.0)?;
    let sum_aq = from_start(&ln_a, &g)?;
    let mass = from_start(&|i| (i as f64).ln(), &index_growth(1.0))?;
    let m2 = from_start(&|i| 2.0 * (i as f64).ln(), &index_growth(2.0))?;
    let a_q = from_start(
        &|i| 2.0 * (i as f64).ln() + 2.0 * (1.0 + model.a(i) + model.b(i)).ln(),
        &|k| index_growth(2.0)(k) * g(k).powi(2),
    )?;

    let ln_q_next = log_q[n - 1] + model.ln_step_ratio(n, z);
    let tail_q = weighted_sum(model, z, n + 1, ln_q_next, |_| 0.0, |_| 1.0, &opts)?.finite()?;
    let tail_aq = weighted_sum(model, z, n + 1, ln_q_next, ln_a, g, &opts)?.finite()?;

    let m3 = third_moment(model, z, n.max(mass.last), tol)?;

    let tail_bound = [sum_q, sum_aq, mass, m2, a_q, tail_q, tail_aq]
        .iter()
        .map(|s| s.tail_bound)
        .fold(0.0, f64::max);
    Ok(EquilibriumProfile {
        z,
        zs,
        n,
        log_q,
        mass: mass.value,
        m2: m2.value,
        m3,
        a_quantity: a_q.value,
        sum_q: sum_q.value,
        sum_aq: sum_aq.value,
        tail_q: tail_q.value,
        tail_aq: tail_aq.value,
        tail_bound,
    })
}

const M3_MAX_EXTENT: usize = 1 << 22;

/// `M3` via suffix sums `T_i = sum_{j>i} j Qcal_j` held in log form.
fn third_moment(model: &CoefficientModel, z: f64, reach: usize, tol: f64) -> Result<f64> {
    let mut extent = (4 * reach).max(256);
    loop {
        let mut ln_q = Vec::with_capacity(extent + 1);
        ln_q.push(z.ln());
        for i in 1..=extent {
            ln_q.push(ln_q[i - 1] + model.ln_step_ratio(i, z));
        }
        let ln_jq = |j: usize| (j as f64).ln() + ln_q[j - 1];

        // remainder past `extent` from the last measured ratios of j Qcal_j
        let mut r = 0.0f64;
        for j in extent - 64..extent {
            r = r.max((ln_jq(j + 1) - ln_jq(j)).exp());
        }
        let analytic = index_growth(1.0)(extent) * model.rho_sup_from(extent, z);
        if analytic < 1.0 {
            r = r.max(analytic);
        }
        let mut ln_t = vec![f64::NEG_INFINITY; extent + 1];
        ln_t[extent] = if r < 1.0 {
            ln_jq(extent + 1) + (1.0 / (1.0 - r)).ln()
        } else {
            f64::INFINITY
        };
        for i in (1..extent).rev() {
            ln_t[i] = ln_add(ln_t[i + 1], ln_jq(i + 1));
        }

        let opts = SeriesOptions {
            tol,
            max_terms: extent / 2,
            probe: 64,
        };
        let term = |i: usize| 2.0 * ln_t[i] - model.ln_a(i) - ln_q[i - 1];
        match sum_ln_terms(1, term, |_| 1.0, &opts) {
            Ok(Series::Converged(s)) => return Ok(s.value),
            Ok(Series::Diverged { .. }) => return Ok(f64::INFINITY),
            Err(Error::Budget { .. }) | Err(Error::Overflow(_)) if extent < M3_MAX_EXTENT => extent *= 4,
            Err(Error::Budget { .. }) | Err(Error::Overflow(_)) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        }
    }
}

/// Largest relative defect of `a_i Qcal_i Qcal_1 = b_{i+1} Qcal_{i+1}` over the profile.
pub fn detailed_balance_residual(profile: &EquilibriumProfile, model: &CoefficientModel) -> f64 {
    let q = &profile.log_q;
    (1..profile.n)
        .map(|i| {
            let fwd = model.ln_a(i) + q[i - 1] + q[0];
            let bwd = model.ln_b(i + 1) + q[i];
            (bwd - fwd).exp_m1().abs()
        })
        .fold(0.0, f64::max)
}
