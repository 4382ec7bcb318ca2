//! Diffusion coefficients `a_t` and the noise levels they imply.
//!
//! Blind dynamics `dY = (f(Y) - Y) dt + sqrt(2 a_t) dB` keep `Y_t ~ p_{sigma_t}`
//! with
//!
//! ```text
//! sigma_t^2 = sigma_0^2 e^{-2t} + 2 int_0^t a_s e^{-2(t-s)} ds,
//! ```
//!
//! equivalently `sigma_t sigma_t' = -sigma_t^2 + a_t`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Relative tolerance of the adaptive Simpson rule.
const SIMPSON_TOL: f64 = 1e-10;
const SIMPSON_DEPTH: u32 = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Zero,
    Constant { a: f64 },
    /// `a_t = ratio sigma_t^2`.
    Proportional { ratio: f64 },
    /// Piecewise-linear `a_t` through `(times[i], values[i])`, held constant
    /// outside the nodes.
    Tabulated { times: Vec<f64>, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub sigma0: f64,
}

fn check_sigma0(sigma0: f64) -> Result<()> {
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return config_err(format!("initial noise level must be positive, got {sigma0}"));
    }
    Ok(())
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, sigma0: f64) -> Result<Self> {
        check_sigma0(sigma0)?;
        match &kind {
            ScheduleKind::Zero => {}
            ScheduleKind::Constant { a } => {
                if !(*a >= 0.0 && a.is_finite()) {
                    return config_err("constant diffusion must be nonnegative");
                }
            }
            ScheduleKind::Proportional { ratio } => {
                if !(*ratio > 0.0 && *ratio < 1.0) {
                    return config_err(format!("proportional ratio must lie in (0, 1), got {ratio}"));
                }
            }
            ScheduleKind::Tabulated { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return config_err("tabulated schedule needs matching, nonempty times and values");
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return config_err("tabulated times must be strictly increasing");
                }
                if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || times.iter().any(|t| !t.is_finite()) {
                    return config_err("tabulated values must be finite and nonnegative");
                }
            }
        }
        Ok(Self { kind, sigma0 })
    }

    pub fn zero(sigma0: f64) -> Result<Self> {
        Self::new(ScheduleKind::Zero, sigma0)
    }

    pub fn constant(a: f64, sigma0: f64) -> Result<Self> {
        Self::new(ScheduleKind::Constant { a }, sigma0)
    }

    pub fn proportional(ratio: f64, sigma0: f64) -> Result<Self> {
        Self::new(ScheduleKind::Proportional { ratio }, sigma0)
    }

    pub fn tabulated(times: Vec<f64>, values: Vec<f64>, sigma0: f64) -> Result<Self> {
        Self::new(ScheduleKind::Tabulated { times, values }, sigma0)
    }

    /// Diffusion coefficient `a_t`.
    pub fn a_at(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::Zero => 0.0,
            ScheduleKind::Constant { a } => *a,
            ScheduleKind::Proportional { ratio } => ratio * self.closed_form_sq(t),
            ScheduleKind::Tabulated { times, values } => interpolate(times, values, t),
        }
    }

    /// `sigma_t^2` in closed form; tabulated kinds fall back to quadrature.
    fn closed_form_sq(&self, t: f64) -> f64 {
        let s0 = self.sigma0 * self.sigma0;
        match &self.kind {
            ScheduleKind::Zero => s0 * (-2.0 * t).exp(),
            ScheduleKind::Constant { a } => s0 * (-2.0 * t).exp() - a * (-2.0 * t).exp_m1(),
            ScheduleKind::Proportional { ratio } => s0 * (-2.0 * (1.0 - ratio) * t).exp(),
            ScheduleKind::Tabulated { .. } => self.quadrature_sq(t),
        }
    }

    fn quadrature_sq(&self, t: f64) -> f64 {
        let s0 = self.sigma0 * self.sigma0;
        s0 * (-2.0 * t).exp() + 2.0 * self.integrate(0.0, t, |s| self.a_at(s) * (-2.0 * (t - s)).exp())
    }

    /// `int_lo^hi g`, adaptive Simpson on each segment between tabulated nodes.
    fn integrate(&self, lo: f64, hi: f64, g: impl Fn(f64) -> f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let mut cuts = vec![lo];
        if let ScheduleKind::Tabulated { times, .. } = &self.kind {
            cuts.extend(times.iter().copied().filter(|t| *t > lo && *t < hi));
        }
        cuts.push(hi);
        cuts.windows(2).map(|w| adaptive_simpson(&g, w[0], w[1], SIMPSON_TOL)).sum()
    }

    pub fn implicit_sigma(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0 && t.is_finite()) {
            return config_err(format!("time must be nonnegative, got {t}"));
        }
        Ok(self.closed_form_sq(t).max(0.0).sqrt())
    }

    /// `sigma_t` by direct quadrature of the variance integral, for every kind.
    pub fn implicit_sigma_by_quadrature(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0 && t.is_finite()) {
            return config_err(format!("time must be nonnegative, got {t}"));
        }
        Ok(self.quadrature_sq(t).max(0.0).sqrt())
    }

    /// Largest `|sigma sigma' + sigma^2 - a_t|` over `n_check` equally spaced
    /// times in `[0, t_max]`, with `sigma'` by central differences.
    pub fn verify_ode(&self, t_max: f64, n_check: usize) -> Result<f64> {
        if n_check < 2 {
            return config_err("need at least two check points");
        }
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..n_check {
            let t = (t_max * i as f64 / (n_check - 1) as f64).max(step);
            let s = self.implicit_sigma(t)?;
            let ds = (self.implicit_sigma(t + step)? - self.implicit_sigma(t - step)?) / (2.0 * step);
            worst = worst.max((s * ds + s * s - self.a_at(t)).abs());
        }
        Ok(worst)
    }

    /// Time at which `sigma_t` reaches `sigma_end`.
    pub fn terminal_time(&self, sigma_end: f64) -> Result<f64> {
        if !(sigma_end > 0.0 && sigma_end <= self.sigma0) {
            return config_err(format!("terminal noise level must lie in (0, {}]", self.sigma0));
        }
        let ratio = (self.sigma0 / sigma_end).ln();
        match &self.kind {
            ScheduleKind::Zero => Ok(ratio),
            ScheduleKind::Proportional { ratio: r } => Ok(ratio / (1.0 - r)),
            ScheduleKind::Constant { a } => {
                let target = sigma_end * sigma_end;
                if *a >= target {
                    return Err(Error::Domain(format!("constant diffusion {a} never brings sigma below {sigma_end}")));
                }
                Ok(0.5 * ((self.sigma0 * self.sigma0 - a) / (target - a)).ln())
            }
            ScheduleKind::Tabulated { .. } => Err(Error::Unsupported("terminal time of a tabulated schedule".into())),
        }
    }

    /// One exponential-Euler step of length `h` from `t_start`:
    /// `Y+ = decay Y + (1 - decay) f(Y) + N(0, inject_var I)`.
    pub fn exp_euler_increments(&self, t_start: f64, h: f64) -> Result<(f64, f64)> {
        check_step(h)?;
        let end = t_start + h;
        let var = match &self.kind {
            ScheduleKind::Zero => 0.0,
            ScheduleKind::Constant { a } => -a * (-2.0 * h).exp_m1(),
            ScheduleKind::Proportional { ratio } => {
                self.closed_form_sq(t_start) * (-2.0 * h).exp() * (2.0 * ratio * h).exp_m1()
            }
            ScheduleKind::Tabulated { .. } => {
                2.0 * self.integrate(t_start, end, |s| self.a_at(s) * (-2.0 * (end - s)).exp())
            }
        };
        Ok(((-h).exp(), var))
    }

    /// Variance `int 2 a_t dt` of the noise added by one Euler step.
    pub fn euler_noise_var(&self, t_start: f64, h: f64) -> Result<f64> {
        check_step(h)?;
        Ok(match &self.kind {
            ScheduleKind::Zero => 0.0,
            ScheduleKind::Constant { a } => 2.0 * a * h,
            ScheduleKind::Proportional { ratio } => {
                -ratio * self.closed_form_sq(t_start) * (-2.0 * (1.0 - ratio) * h).exp_m1() / (1.0 - ratio)
            }
            ScheduleKind::Tabulated { .. } => 2.0 * self.integrate(t_start, t_start + h, |s| self.a_at(s)),
        })
    }

    /// CSV with columns `t, sigma_t, a_t` on `n` equally spaced times.
    pub fn write_csv<W: Write>(&self, out: W, t_max: f64, n: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "sigma_t", "a_t"])?;
        let n = n.max(2);
        for i in 0..n {
            let t = t_max * i as f64 / (n - 1) as f64;
            w.write_record([t.to_string(), self.implicit_sigma(t)?.to_string(), self.a_at(t).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return config_err(format!("step size must be positive, got {h}"));
    }
    Ok(())
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    if t <= times[0] {
        return values[0];
    }
    let last = times.len() - 1;
    if t >= times[last] {
        return values[last];
    }
    let j = times.partition_point(|x| *x <= t) - 1;
    let u = (t - times[j]) / (times[j + 1] - times[j]);
    values[j] + u * (values[j + 1] - values[j])
}

fn adaptive_simpson(g: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fb) = (g(a), g(b));
    let m = 0.5 * (a + b);
    let fm = g(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let scale = whole.abs().max((b - a) * (fa.abs() + fb.abs()) * 1e-3);
    simpson_step(g, a, b, fa, fm, fb, whole, tol * scale, SIMPSON_DEPTH)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(g: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (g(lm), g(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(g, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + simpson_step(g, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Decreasing noise levels for the non-blind reference sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExplicitKind {
    LogSigma,
    PowerLaw { rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitSchedule {
    pub kind: ExplicitKind,
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl ExplicitSchedule {
    pub fn new(kind: ExplicitKind, n_steps: usize, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if n_steps == 0 {
            return config_err("explicit schedule needs at least one step");
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return config_err(format!("noise range [{sigma_min}, {sigma_max}] is invalid"));
        }
        if let ExplicitKind::PowerLaw { rho } = kind {
            if !(rho > 0.0 && rho.is_finite()) {
                return config_err("power-law exponent must be positive");
            }
        }
        Ok(Self { kind, n_steps, sigma_min, sigma_max })
    }

    pub fn log_sigma(n_steps: usize, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Self::new(ExplicitKind::LogSigma, n_steps, sigma_min, sigma_max)
    }

    /// `rho = 7` is the usual choice.
    pub fn power_law(rho: f64, n_steps: usize, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Self::new(ExplicitKind::PowerLaw { rho }, n_steps, sigma_min, sigma_max)
    }

    /// `n_steps + 1` levels from `sigma_max` down to `sigma_min`, endpoints exact.
    pub fn sigmas(&self) -> Vec<f64> {
        let n = self.n_steps;
        let mut out: Vec<f64> = (0..=n)
            .map(|i| {
                let u = i as f64 / n as f64;
                match self.kind {
                    ExplicitKind::LogSigma => (self.sigma_max.ln() + u * (self.sigma_min / self.sigma_max).ln()).exp(),
                    ExplicitKind::PowerLaw { rho } => {
                        let (a, b) = (self.sigma_max.powf(1.0 / rho), self.sigma_min.powf(1.0 / rho));
                        (a + u * (b - a)).powf(rho)
                    }
                }
            })
            .collect();
        out[0] = self.sigma_max;
        out[n] = self.sigma_min;
        out
    }
}
