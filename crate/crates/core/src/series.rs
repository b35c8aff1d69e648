//! Summation of positive series given term-by-term in log form.
//!
//! The truncation point is chosen from a geometric bound on what is left:
//!
//! ```text
//! sum_{j > N} t_j <= t_N * r / (1 - r),   r = sup_{j >= N} t_{j+1} / t_j
//! ```
//!
//! `r` is the larger of the ratios measured over the most recent probe window
//! and an analytic bound supplied by the caller (when that bound is below 1).

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SeriesOptions {
    /// Absolute bound required on the neglected tail.
    pub tol: f64,
    pub max_terms: usize,
    /// Number of trailing ratios inspected for the measured bound.
    pub probe: usize,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        SeriesOptions {
            tol: 1e-13,
            max_terms: 20_000_000,
            probe: 64,
        }
    }
}

impl SeriesOptions {
    pub fn with_tol(tol: f64) -> Self {
        SeriesOptions {
            tol,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesSum {
    /// Partial sum up to and including the last summed term.
    pub value: f64,
    /// Bound on the neglected remainder.
    pub tail_bound: f64,
    /// Index of the last summed term.
    pub last: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Series {
    Converged(SeriesSum),
    /// Partial sums passed 1e12 while the summands stopped decreasing.
    Diverged { partial: f64, terms: usize },
}

impl Series {
    /// The converged sum, with divergence reported as an error.
    pub fn finite(self) -> Result<SeriesSum> {
        match self {
            Series::Converged(s) => Ok(s),
            Series::Diverged { partial, terms } => Err(Error::Indeterminate { terms, partial }),
        }
    }
}

const DIVERGENCE_PARTIAL: f64 = 1e12;
const DIVERGENCE_RUN: usize = 100;

/// Scaled running sum that tolerates terms far outside the f64 exponent range.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LogAccumulator {
    scale: f64,
    acc: f64,
    comp: f64,
}

impl LogAccumulator {
    pub(crate) fn new() -> Self {
        LogAccumulator {
            scale: f64::NEG_INFINITY,
            acc: 0.0,
            comp: 0.0,
        }
    }

    pub(crate) fn add_ln(&mut self, ln_t: f64) {
        if ln_t == f64::NEG_INFINITY {
            return;
        }
        if self.scale == f64::NEG_INFINITY {
            self.scale = ln_t;
        } else if ln_t > self.scale + 300.0 {
            let f = (self.scale - ln_t).exp();
            self.acc *= f;
            self.comp *= f;
            self.scale = ln_t;
        }
        let x = (ln_t - self.scale).exp();
        let t = self.acc + x;
        if self.acc.abs() >= x.abs() {
            self.comp += (self.acc - t) + x;
        } else {
            self.comp += (x - t) + self.acc;
        }
        self.acc = t;
    }

    pub(crate) fn ln_value(&self) -> f64 {
        if self.scale == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            (self.acc + self.comp).ln() + self.scale
        }
    }

    pub(crate) fn value(&self) -> f64 {
        if self.scale == f64::NEG_INFINITY {
            0.0
        } else {
            (self.acc + self.comp) * self.scale.exp()
        }
    }
}

/// Sums `exp(ln_term(i))` for `i = first, first + 1, ...`.
///
/// `ratio_sup(N)` should return an upper bound on `t_{j+1}/t_j` for all
/// `j >= N`, or anything `>= 1` when no such bound is known.
pub fn sum_ln_terms<F, R>(
    first: usize,
    mut ln_term: F,
    ratio_sup: R,
    opts: &SeriesOptions,
) -> Result<Series>
where
    F: FnMut(usize) -> f64,
    R: Fn(usize) -> f64,
{
    let probe = opts.probe.max(2);
    let check_every = (probe / 4).max(1);
    let mut ring = vec![f64::NEG_INFINITY; probe + 1];
    let mut acc = LogAccumulator::new();
    let mut nondecreasing_run = 0usize;
    let mut prev = f64::NEG_INFINITY;
    let mut last_tail = f64::INFINITY;

    let mut i = first;
    let mut count = 0usize;
    loop {
        let ln_t = ln_term(i);
        if ln_t.is_nan() || ln_t == f64::INFINITY {
            return Err(Error::Overflow(format!("summand {i} is not finite")));
        }
        acc.add_ln(ln_t);
        ring[count % (probe + 1)] = ln_t;
        count += 1;

        if ln_t >= prev && ln_t > f64::NEG_INFINITY {
            nondecreasing_run += 1;
        } else {
            nondecreasing_run = 0;
        }
        prev = ln_t;

        if nondecreasing_run >= DIVERGENCE_RUN && acc.ln_value() > DIVERGENCE_PARTIAL.ln() {
            return Ok(Series::Diverged {
                partial: acc.value(),
                terms: count,
            });
        }

        if count > probe && count % check_every == 0 {
            // measured sup of consecutive ratios over the ring, oldest to newest
            let mut measured = 0.0f64;
            for k in 0..probe {
                let a = ring[(count + k) % (probe + 1)];
                let b = ring[(count + k + 1) % (probe + 1)];
                if a > f64::NEG_INFINITY {
                    measured = measured.max((b - a).exp());
                }
            }
            let analytic = ratio_sup(i);
            let r = if analytic < 1.0 {
                measured.max(analytic)
            } else {
                measured
            };
            if r < 1.0 {
                let tail = if ln_t == f64::NEG_INFINITY {
                    0.0
                } else {
                    (ln_t + (r / (1.0 - r)).ln()).exp()
                };
                last_tail = tail;
                if tail <= opts.tol {
                    return Ok(Series::Converged(SeriesSum {
                        value: acc.value(),
                        tail_bound: tail,
                        last: i,
                    }));
                }
            }
        }

        if count >= opts.max_terms {
            return Err(Error::Budget {
                terms: count,
                partial: acc.value(),
                tail: last_tail,
            });
        }
        i += 1;
    }
}
