//! Time evolution of the truncated system and the functionals tracked along it.
//!
//! ```text
//! W_i    = a_i c_1 c_i - b_{i+1} c_{i+1}       (W_n = 0)
//! c_i'   = W_{i-1} - W_i                      i >= 2
//! c_1'   = -W_1 - sum_k W_k
//! F_z(c) = sum Qcal_i phi(c_i / Qcal_i - 1),   phi(h) = (1 + h) ln(1 + h) - h
//! D(c)   = sum W_i ln(a_i c_1 c_i / (b_{i+1} c_{i+1}))
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientModel;
use crate::equilibrium::EquilibriumProfile;
use crate::error::{Error, Result};
use crate::series::LogAccumulator;
use crate::spectral::{apply_linearized, LinearizedMatrix};
use crate::stats::{least_squares, LinearFit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    c: Vec<f64>,
    mass: f64,
}

fn mass_of(c: &[f64]) -> f64 {
    c.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x).sum()
}

impl StateVector {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if c.len() < 2 {
            return Err(Error::domain("a state needs at least two cluster sizes"));
        }
        if let Some(i) = c.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::domain(format!("c_{} = {} must be finite and non-negative", i + 1, c[i])));
        }
        let mass = mass_of(&c);
        Ok(StateVector { c, mass })
    }

    /// The truncated equilibrium `c_i = Qcal_i`, `i <= n`.
    pub fn equilibrium(profile: &EquilibriumProfile) -> Self {
        StateVector::new(profile.log_q.iter().map(|l| l.exp()).collect()).expect("profile entries are positive")
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.c
    }
}

/// `a_i`, `b_i` for `i = 1..=n`, stored 0-based.
#[derive(Clone, Debug)]
pub struct Rates {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Rates {
    pub fn new(model: &CoefficientModel, n: usize) -> Self {
        Rates {
            a: (1..=n).map(|i| model.a(i)).collect(),
            b: (1..=n).map(|i| model.b(i)).collect(),
        }
    }

    fn fluxes(&self, c: &[f64], w: &mut [f64]) {
        let n = c.len();
        for i in 0..n - 1 {
            w[i] = self.a[i] * c[0] * c[i] - self.b[i + 1] * c[i + 1];
        }
        w[n - 1] = 0.0;
    }

    fn rhs(&self, c: &[f64], w: &mut [f64], dc: &mut [f64]) {
        let n = c.len();
        self.fluxes(c, w);
        let total: f64 = w[..n - 1].iter().sum();
        dc[0] = -w[0] - total;
        for i in 1..n {
            dc[i] = w[i - 1] - w[i];
        }
    }
}

/// `W_i` for `1 <= i <= n`, zero at `i = n`.
pub fn flux(model: &CoefficientModel, state: &StateVector, i: usize) -> Result<f64> {
    let n = state.n();
    if i == 0 || i > n {
        return Err(Error::domain(format!("flux index {i} outside 1..={n}")));
    }
    if i == n {
        return Ok(0.0);
    }
    let c = state.c();
    Ok(model.a(i) * c[0] * c[i - 1] - model.b(i + 1) * c[i])
}

pub fn bd_rhs(model: &CoefficientModel, state: &StateVector) -> Vec<f64> {
    let n = state.n();
    let rates = Rates::new(model, n);
    let mut w = vec![0.0; n];
    let mut dc = vec![0.0; n];
    rates.rhs(state.c(), &mut w, &mut dc);
    dc
}

// ---------------------------------------------------------------------------
// integrator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controls {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub snapshot_every: f64,
}

impl Default for Controls {
    fn default() -> Self {
        Controls {
            rtol: 1e-10,
            // concentrations span hundreds of decades, so error control is relative by default
            atol: 1e-300,
            max_steps: 5_000_000,
            snapshot_every: 0.5,
        }
    }
}

impl Controls {
    fn validate(&self, t_end: f64) -> Result<()> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::domain(format!("t_end = {t_end} must be positive")));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0 && self.snapshot_every > 0.0) {
            return Err(Error::domain("tolerances and snapshot spacing must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub steps: usize,
    pub rejected: usize,
    pub clamped: usize,
}

// Dormand-Prince 5(4); the system is autonomous so the nodes are not needed
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// fifth-order weights minus the embedded fourth-order ones
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Adaptive Dormand-Prince integration, calling `snapshot` at `t = 0`, every
/// multiple of `snapshot_every`, and `t_end`.
fn dopri<F, S>(mut f: F, y0: Vec<f64>, t_end: f64, ctl: &Controls, clamp: bool, mut snapshot: S) -> Result<RunStats>
where
    F: FnMut(&[f64], &mut [f64]),
    S: FnMut(f64, &[f64]) -> Result<()>,
{
    let n = y0.len();
    let mut y = y0;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut stats = RunStats::default();

    let scale = |y: &[f64], yn: &[f64], i: usize| ctl.atol + ctl.rtol * y[i].abs().max(yn[i].abs());
    f(&y, &mut k[0]);
    snapshot(0.0, &y)?;

    // initial step from the size of y and y'
    let d0 = (y.iter().enumerate().map(|(i, v)| (v / scale(&y, &y, i)).powi(2)).sum::<f64>() / n as f64).sqrt();
    let d1 = (k[0].iter().enumerate().map(|(i, v)| (v / scale(&y, &y, i)).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(ctl.snapshot_every).min(t_end);

    let mut t = 0.0;
    let mut next_snap = ctl.snapshot_every.min(t_end);
    let mut snap_index = 1usize;
    while t < t_end {
        if stats.steps + stats.rejected >= ctl.max_steps {
            return Err(Error::Stiffness { t, step: h });
        }
        let mut hs = h;
        let hits_snapshot = t + hs >= next_snap;
        if hits_snapshot {
            hs = next_snap - t;
        }
        if hs < 1e-14 * t.max(1.0) {
            return Err(Error::Stiffness { t, step: hs });
        }

        let stage = |k: &[Vec<f64>], coefs: &[f64], tmp: &mut Vec<f64>| {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, c) in coefs.iter().enumerate() {
                    acc += c * k[j][i];
                }
                tmp[i] = y[i] + hs * acc;
            }
        };
        stage(&k, &[A21], &mut tmp);
        f(&tmp, &mut k[1]);
        stage(&k, &[A31, A32], &mut tmp);
        f(&tmp, &mut k[2]);
        stage(&k, &[A41, A42, A43], &mut tmp);
        f(&tmp, &mut k[3]);
        stage(&k, &[A51, A52, A53, A54], &mut tmp);
        f(&tmp, &mut k[4]);
        stage(&k, &[A61, A62, A63, A64, A65], &mut tmp);
        f(&tmp, &mut k[5]);
        stage(&k, &[B1, 0.0, B3, B4, B5, B6], &mut ynew);
        f(&ynew, &mut k[6]);

        let mut err = 0.0;
        for i in 0..n {
            let e = hs * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
            err += (e / scale(&y, &ynew, i)).powi(2);
        }
        let err = (err / n as f64).sqrt();

        if err <= 1.0 {
            t = if hits_snapshot { next_snap } else { t + hs };
            std::mem::swap(&mut y, &mut ynew);
            if clamp {
                let mut touched = false;
                for (i, v) in y.iter_mut().enumerate() {
                    if *v < 0.0 {
                        if *v < -ctl.atol {
                            return Err(Error::Positivity { t, index: i + 1, value: *v });
                        }
                        *v = 0.0;
                        stats.clamped += 1;
                        touched = true;
                    }
                }
                if touched {
                    f(&y, &mut k[6]);
                }
            }
            k.swap(0, 6);
            stats.steps += 1;
            if hits_snapshot {
                snapshot(t, &y)?;
                snap_index += 1;
                next_snap = (snap_index as f64 * ctl.snapshot_every).min(t_end);
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            // keep the proposal from a truncated snapshot step only if it grows
            h = if hits_snapshot { h.max(hs * fac) } else { hs * fac };
        } else {
            stats.rejected += 1;
            h = hs * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        }
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// functionals

fn phi(h: f64) -> f64 {
    if h.abs() < 1e-2 {
        // sum_{k>=2} (-1)^k h^k / (k (k-1))
        let mut term = h * h;
        let mut acc = 0.0;
        for k in 2..14 {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * term / (k * (k - 1)) as f64;
            term *= h;
        }
        acc
    } else if h <= -1.0 {
        1.0
    } else {
        (1.0 + h) * h.ln_1p() - h
    }
}

/// `(H, F_z)` for `state` against `profile`.
///
/// `F_z` is assembled term by term as relative entropy, with the equilibrium
/// mass past the state's length added from the profile.
pub fn free_energy(state: &StateVector, profile: &EquilibriumProfile) -> Result<(f64, f64)> {
    let m = state.n();
    if m > profile.n {
        return Err(Error::domain("state is longer than the profile"));
    }
    let lnz = profile.z.ln();
    let mut h_val = 0.0;
    let mut fz = 0.0;
    for (i, &c) in state.c().iter().enumerate() {
        let lq = profile.log_q[i];
        if c > 0.0 {
            let ln_big_q = lq - (i + 1) as f64 * lnz;
            h_val += c * (c.ln() - ln_big_q - 1.0);
        }
        let q = lq.exp();
        let rel = c.ln() - lq;
        fz += if c == 0.0 {
            q
        } else if rel.abs() < 1e-2 {
            q * phi(rel.exp_m1())
        } else {
            c * rel - c + q
        };
    }
    let mut tail = profile.tail_q;
    for i in m..profile.n {
        tail += profile.log_q[i].exp();
    }
    Ok((h_val, fz + tail))
}

/// Entropy production of the truncated system (`i < n`).
pub fn dissipation(state: &StateVector, model: &CoefficientModel) -> f64 {
    let c = state.c();
    let mut d = 0.0;
    for i in 1..state.n() {
        let x = model.a(i) * c[0] * c[i - 1];
        let y = model.b(i + 1) * c[i];
        d += if x == 0.0 && y == 0.0 {
            0.0
        } else if x == 0.0 || y == 0.0 {
            f64::INFINITY
        } else {
            let w = x - y;
            w * (w / y).ln_1p()
        };
    }
    d
}

/// `sum exp(nu i) c_i`.
pub fn exp_moment(state: &StateVector, nu: f64) -> Result<f64> {
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(Error::domain(format!("nu = {nu} must be non-negative")));
    }
    let mut acc = LogAccumulator::new();
    for (i, &c) in state.c().iter().enumerate() {
        if c > 0.0 {
            acc.add_ln(nu * (i + 1) as f64 + c.ln());
        }
    }
    let v = acc.value();
    if !v.is_finite() {
        return Err(Error::Overflow(format!(
            "exponential moment with nu = {nu} overflows at n = {}; use a smaller nu",
            state.n()
        )));
    }
    Ok(v)
}

/// `sum exp(eta i) |c_i - Qcal_i|` plus a bound on the equilibrium tail past the state.
pub fn weighted_l1_distance(state: &StateVector, profile: &EquilibriumProfile, eta: f64) -> Result<f64> {
    let limit = 0.5 * (profile.zs / profile.z).ln();
    if !(eta > 0.0 && eta < limit) {
        return Err(Error::domain(format!(
            "eta = {eta} must lie in (0, ln(zs/z)/2) = (0, {limit:.6})"
        )));
    }
    let m = state.n();
    if m > profile.n {
        return Err(Error::domain("state is longer than the profile"));
    }
    let mut d = 0.0;
    for (i, &c) in state.c().iter().enumerate() {
        let w = (eta * (i + 1) as f64).exp();
        d += w * (c - profile.log_q[i].exp()).abs();
    }
    for i in m..profile.n {
        d += (eta * (i + 1) as f64 + profile.log_q[i]).exp();
    }
    Ok(d + equilibrium_tail_bound(profile, eta)?)
}

/// Bound on `sum_{i>n} exp(eta i) Qcal_i` from the trailing profile ratios.
fn equilibrium_tail_bound(profile: &EquilibriumProfile, eta: f64) -> Result<f64> {
    let n = profile.n;
    let lq = &profile.log_q;
    let start = n.saturating_sub(65);
    let measured = (start..n - 1).map(|j| (lq[j + 1] - lq[j]).exp()).fold(0.0, f64::max);
    let r = eta.exp() * measured.max(profile.z / profile.zs);
    if r >= 1.0 {
        return Err(Error::Budget {
            terms: n,
            partial: f64::NAN,
            tail: f64::INFINITY,
        });
    }
    Ok((eta * n as f64 + lq[n - 1] + (r / (1.0 - r)).ln()).exp())
}

const LOG_FLOOR: f64 = -700.0;

/// `h_i = c_i / Qcal_i - 1`, stopping before `Qcal_i` leaves the f64 range.
pub fn fluctuation_split(state: &StateVector, profile: &EquilibriumProfile) -> Result<Vec<f64>> {
    let m = state.n();
    if m > profile.n {
        return Err(Error::domain("state is longer than the profile"));
    }
    let keep = profile.log_q[..m].iter().take_while(|l| **l > LOG_FLOOR).count();
    if keep < m {
        log::warn!("fluctuation clipped to {keep} of {m} entries: equilibrium underflows past i = {keep}");
    }
    Ok(state.c()[..keep]
        .iter()
        .zip(&profile.log_q)
        .map(|(c, l)| (c.ln() - l).exp_m1())
        .collect())
}

/// Quadratic part of the fluctuation dynamics, with the same closure as [`bd_rhs`].
///
/// `G_i = a_i Qcal_i Qcal_1 (f_i g_1 + f_1 g_i) / 2` for `i < m`, `G_m = 0`, then
/// `Gamma_i = (G_{i-1} - G_i) / Qcal_i` and `Gamma_1 = -(G_1 + sum_k G_k) / Qcal_1`.
pub fn gamma_term(profile: &EquilibriumProfile, model: &CoefficientModel, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let m = f.len();
    if g.len() != m || m < 2 || m > profile.n {
        return Err(Error::domain("f and g must have equal length in 2..=n"));
    }
    let lq = &profile.log_q;
    let z = profile.z;
    // G_i / Qcal_i
    let gi: Vec<f64> = (0..m)
        .map(|i| {
            if i + 1 == m {
                0.0
            } else {
                0.5 * model.a(i + 1) * z * (f[i] * g[0] + f[0] * g[i])
            }
        })
        .collect();
    let mut out = vec![0.0; m];
    let total: f64 = (0..m - 1).map(|k| gi[k] * (lq[k] - lq[0]).exp()).sum();
    out[0] = -(gi[0] + total);
    for i in 1..m {
        out[i] = gi[i - 1] * (lq[i - 1] - lq[i]).exp() - gi[i];
    }
    Ok(out)
}

/// Equilibrium plus a seeded bounded perturbation that keeps the mass.
///
/// `c_i = Qcal_i (1 + eps g_i)` with `g_i` uniform on `[-1, 1]` for `i >= 2`
/// and `g_1` chosen so that `sum i Qcal_i g_i = 0`. Returns the state and `g`.
pub fn perturbed_equilibrium(profile: &EquilibriumProfile, eps: f64, seed: u64) -> Result<(StateVector, Vec<f64>)> {
    let n = profile.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let moment: f64 = (1..n).map(|i| (i + 1) as f64 * profile.log_q[i].exp() * g[i]).sum();
    g[0] = -moment / profile.log_q[0].exp();
    let c: Vec<f64> = (0..n).map(|i| profile.log_q[i].exp() * (1.0 + eps * g[i])).collect();
    if c[0] <= 0.0 {
        return Err(Error::domain(format!("perturbation size {eps} makes c_1 negative")));
    }
    Ok((StateVector::new(c)?, g))
}

// ---------------------------------------------------------------------------
// trajectories

/// Parameters for the observables recorded at each snapshot.
#[derive(Clone, Copy, Debug)]
pub struct Observe<'a> {
    pub profile: &'a EquilibriumProfile,
    pub nu: f64,
    pub eta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableRow {
    pub t: f64,
    pub mass: f64,
    pub h: f64,
    pub fz: f64,
    pub d: f64,
    pub exp_moment: f64,
    pub l1_dist: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub observables: Vec<ObservableRow>,
    pub stats: RunStats,
    /// Largest relative mass deviation seen at a snapshot.
    pub mass_drift: f64,
}

impl Trajectory {
    pub fn mass_ok(&self) -> bool {
        self.mass_drift <= 1e-8
    }

    /// Observables as CSV with header `t,mass,H,Fz,D,exp_moment,l1_dist`.
    pub fn observables_csv(&self) -> String {
        let mut s = String::from("t,mass,H,Fz,D,exp_moment,l1_dist\n");
        for r in &self.observables {
            s.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                r.t, r.mass, r.h, r.fz, r.d, r.exp_moment, r.l1_dist
            ));
        }
        s
    }
}

pub fn observe(model: &CoefficientModel, state: &StateVector, t: f64, obs: &Observe) -> Result<ObservableRow> {
    let (h, fz) = free_energy(state, obs.profile)?;
    Ok(ObservableRow {
        t,
        mass: state.mass(),
        h,
        fz,
        d: dissipation(state, model),
        exp_moment: exp_moment(state, obs.nu)?,
        l1_dist: weighted_l1_distance(state, obs.profile, obs.eta)?,
    })
}

pub fn integrate(
    model: &CoefficientModel,
    state0: &StateVector,
    t_end: f64,
    controls: &Controls,
    obs: Option<&Observe>,
) -> Result<Trajectory> {
    controls.validate(t_end)?;
    let n = state0.n();
    let rates = Rates::new(model, n);
    let mut w = vec![0.0; n];
    let m0 = state0.mass();
    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        observables: Vec::new(),
        stats: RunStats::default(),
        mass_drift: 0.0,
    };
    let rhs = |c: &[f64], dc: &mut [f64]| rates.rhs(c, &mut w, dc);
    let stats = dopri(rhs, state0.c().to_vec(), t_end, controls, true, |t, y| {
        let s = StateVector::new(y.to_vec())?;
        traj.mass_drift = traj.mass_drift.max((s.mass() - m0).abs() / m0);
        if let Some(o) = obs {
            traj.observables.push(observe(model, &s, t, o)?);
        }
        traj.times.push(t);
        traj.states.push(s);
        Ok(())
    })?;
    traj.stats = stats;
    if !traj.mass_ok() {
        log::warn!("mass drift {:.3e} exceeds 1e-8", traj.mass_drift);
    }
    Ok(traj)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTrajectory {
    pub times: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    /// `(sum Qcal_i h_i^2 / 2)^(1/2)`.
    pub norm_h: Vec<f64>,
    /// `sum exp(eta i) Qcal_i |h_i|`.
    pub norm_x: Vec<f64>,
    /// `|sum i Qcal_i h_i| / sum i Qcal_i |h_i|`.
    pub orthogonality: Vec<f64>,
    pub projected: bool,
    pub stats: RunStats,
}

/// `dh/dt = L h` with the flux-form operator, started from the mass-orthogonal part of `h0`.
pub fn integrate_linearized(
    matrix: &LinearizedMatrix,
    h0: &[f64],
    t_end: f64,
    controls: &Controls,
    eta: f64,
) -> Result<LinearTrajectory> {
    controls.validate(t_end)?;
    let n = matrix.n;
    if h0.len() != n {
        return Err(Error::domain("initial fluctuation length does not match the operator"));
    }
    let q: Vec<f64> = matrix.log_weight.iter().map(|l| l.exp()).collect();
    let iq: Vec<f64> = (0..n).map(|i| (i + 1) as f64 * q[i]).collect();
    let dot_i = |h: &[f64]| h.iter().zip(&iq).map(|(a, b)| a * b).sum::<f64>();
    let abs_i = |h: &[f64]| h.iter().zip(&iq).map(|(a, b)| (a * b).abs()).sum::<f64>();

    let mut h = h0.to_vec();
    let mut projected = false;
    if dot_i(&h).abs() > 1e-10 * abs_i(&h) {
        let coef = dot_i(&h) / iq.iter().zip(0..n).map(|(v, i)| v * (i + 1) as f64).sum::<f64>();
        for i in 0..n {
            h[i] -= coef * (i + 1) as f64;
        }
        projected = true;
        log::warn!("initial fluctuation projected onto sum i Qcal_i h_i = 0");
    }

    let mut out = LinearTrajectory {
        times: Vec::new(),
        h: Vec::new(),
        norm_h: Vec::new(),
        norm_x: Vec::new(),
        orthogonality: Vec::new(),
        projected,
        stats: RunStats::default(),
    };
    let rhs = |y: &[f64], dy: &mut [f64]| {
        let l = apply_linearized(matrix, y).expect("length fixed");
        dy.copy_from_slice(&l);
    };
    let stats = dopri(rhs, h, t_end, controls, false, |t, y| {
        out.times.push(t);
        out.norm_h
            .push((0.5 * y.iter().zip(&q).map(|(a, w)| w * a * a).sum::<f64>()).sqrt());
        out.norm_x.push(
            y.iter()
                .zip(&q)
                .enumerate()
                .map(|(i, (a, w))| (eta * (i + 1) as f64).exp() * w * a.abs())
                .sum(),
        );
        let denom = abs_i(y);
        out.orthogonality
            .push(if denom > 0.0 { dot_i(y).abs() / denom } else { 0.0 });
        out.h.push(y.to_vec());
        Ok(())
    })?;
    out.stats = stats;
    Ok(out)
}

// ---------------------------------------------------------------------------
// decay fits

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub rate: f64,
    pub intercept: f64,
    pub r2: f64,
    pub window: (f64, f64),
    pub rows: usize,
}

pub const MIN_FIT_ROWS: usize = 8;

/// Exponential rate from the rows with `t` in `[t_end/2, t_end]`.
///
/// Values below `100 eps` times the largest value of the series are treated
/// as rounding noise and dropped.
pub fn fit_decay_rate(series: &[(f64, f64)]) -> Result<DecayFit> {
    let t_end = series.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let vmax = series.iter().map(|p| p.1).fold(0.0, f64::max);
    let floor = 100.0 * f64::EPSILON * vmax;
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|(t, v)| *t >= 0.5 * t_end && *v > 0.0 && *v > floor && v.is_finite())
        .map(|&(t, v)| (t, v.ln()))
        .collect();
    if pts.len() < MIN_FIT_ROWS {
        return Err(Error::InsufficientData {
            usable: pts.len(),
            needed: MIN_FIT_ROWS,
        });
    }
    let LinearFit { slope, intercept, r2 } = least_squares(&pts);
    Ok(DecayFit {
        rate: -slope,
        intercept,
        r2,
        window: (pts[0].0, pts[pts.len() - 1].0),
        rows: pts.len(),
    })
}
