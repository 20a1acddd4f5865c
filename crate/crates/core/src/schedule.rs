//! Noise schedules, trailing timestep plans, DDIM step sizes and η schedules.
//!
//! Timesteps are 1-based: `t = 1..=T`. The convention `ᾱ_0 = 1` is used by
//! every query that accepts a "previous" timestep, so the last denoising hop
//! lands on a clean sample.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpacing {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sqrt_alpha_bars: Vec<f64>,
    sqrt_one_minus_alpha_bars: Vec<f64>,
    terminal_snr_zero: bool,
}

impl NoiseSchedule {
    pub fn linear(num_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        make_linear_schedule(num_timesteps, beta_start, beta_end)
    }

    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn terminal_snr_zero(&self) -> bool {
        self.terminal_snr_zero
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// β_t for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for `t` in `0..=T`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.sqrt_alpha_bars[t - 1])
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(0.0);
        }
        self.check_t(t)?;
        Ok(self.sqrt_one_minus_alpha_bars[t - 1])
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        snr(self, t)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 1,
                hi: self.betas.len(),
            });
        }
        Ok(())
    }

    fn from_parts(betas: Vec<f64>, alpha_bars: Vec<f64>, terminal_snr_zero: bool) -> Self {
        let sqrt_alpha_bars = alpha_bars.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alpha_bars = alpha_bars.iter().map(|a| (1.0 - a).sqrt()).collect();
        Self {
            betas,
            alpha_bars,
            sqrt_alpha_bars,
            sqrt_one_minus_alpha_bars,
            terminal_snr_zero,
        }
    }
}

pub fn make_linear_schedule(num_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if num_timesteps == 0 {
        return Err(Error::invalid("schedule needs at least one timestep"));
    }
    if !beta_start.is_finite() || !beta_end.is_finite() {
        return Err(Error::invalid("betas must be finite"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..num_timesteps)
        .map(|i| {
            if num_timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (num_timesteps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(num_timesteps);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule::from_parts(betas, alpha_bars, false))
}

/// Shift and scale √ᾱ so the last timestep carries no signal while the first
/// keeps its value. Betas are re-derived from the new ᾱ sequence.
pub fn rescale_zero_terminal_snr(s: &NoiseSchedule) -> Result<NoiseSchedule> {
    if s.terminal_snr_zero {
        return Err(Error::invalid("schedule already has zero terminal SNR"));
    }
    let n = s.num_timesteps();
    let first = s.sqrt_alpha_bars[0];
    let last = s.sqrt_alpha_bars[n - 1];
    if first == last {
        return Err(Error::invalid("flat schedule: sqrt(alpha_bar_1) == sqrt(alpha_bar_T)"));
    }
    let scale = first / (first - last);
    let mut sqrt_ab: Vec<f64> = s.sqrt_alpha_bars.iter().map(|&a| (a - last) * scale).collect();
    sqrt_ab[0] = first;
    sqrt_ab[n - 1] = 0.0;
    let alpha_bars: Vec<f64> = sqrt_ab.iter().map(|a| a * a).collect();

    let mut betas = Vec::with_capacity(n);
    let mut prev = 1.0;
    for &a in &alpha_bars {
        betas.push(1.0 - a / prev);
        prev = a;
    }
    let mut out = NoiseSchedule::from_parts(betas, alpha_bars, true);
    out.sqrt_alpha_bars = sqrt_ab;
    Ok(out)
}

/// ᾱ_t / (1 − ᾱ_t); +∞ when ᾱ_t = 1, exactly 0 when ᾱ_t = 0.
pub fn snr(s: &NoiseSchedule, t: usize) -> Result<f64> {
    s.check_t(t)?;
    let a = s.alpha_bars[t - 1];
    if a == 0.0 {
        Ok(0.0)
    } else if a >= 1.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(a / (1.0 - a))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
    num_timesteps: usize,
}

impl TimestepPlan {
    /// Strictly decreasing timesteps, highest noise first.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Denoising hops `(t, t_prev)` ending at `t_prev = 0`.
    pub fn denoise_pairs(&self) -> Vec<(usize, usize)> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.steps.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }

    /// Inversion hops `(t, t_next)`, the reverse of [`Self::denoise_pairs`].
    pub fn inversion_pairs(&self) -> Vec<(usize, usize)> {
        self.denoise_pairs()
            .into_iter()
            .rev()
            .map(|(t, t_prev)| (t_prev, t))
            .collect()
    }
}

/// `steps[i] = round(T·(S−i)/S)` for `i = 0..S`, half rounded up, clamped to
/// `[1, T]` and deduplicated.
pub fn trailing_timesteps(num_timesteps: usize, num_steps: usize) -> Result<TimestepPlan> {
    if num_steps == 0 || num_steps > num_timesteps {
        return Err(Error::invalid(format!(
            "need 1 <= steps <= T, got steps={num_steps}, T={num_timesteps}"
        )));
    }
    let (t, s) = (num_timesteps as u128, num_steps as u128);
    let mut steps: Vec<usize> = Vec::with_capacity(num_steps);
    for i in 0..s {
        let v = ((2 * t * (s - i) + s) / (2 * s)) as usize;
        let v = v.clamp(1, num_timesteps);
        if steps.last() != Some(&v) {
            steps.push(v);
        }
    }
    Ok(TimestepPlan {
        steps,
        num_timesteps,
    })
}

/// Full-stochasticity DDIM σ for the hop `t → t_prev` (ᾱ_0 = 1).
pub fn ddim_sigma(s: &NoiseSchedule, t: usize, t_prev: usize) -> Result<f64> {
    if t <= t_prev {
        return Err(Error::invalid(format!("ddim_sigma needs t > t_prev, got {t} -> {t_prev}")));
    }
    let a_t = s.alpha_bar(t)?;
    let a_prev = s.alpha_bar(t_prev)?;
    sigma_from_alpha_bars(a_t, a_prev)
}

pub(crate) fn sigma_from_alpha_bars(a_t: f64, a_prev: f64) -> Result<f64> {
    if a_t >= 1.0 {
        return Err(Error::invalid("ddim_sigma undefined for alpha_bar_t = 1"));
    }
    if a_prev == 0.0 {
        return Ok(0.0);
    }
    let ratio = (1.0 - a_prev) / (1.0 - a_t);
    let inner = (1.0 - a_t / a_prev).max(0.0);
    Ok((ratio.max(0.0) * inner).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaKind {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtaSchedule {
    pub kind: EtaKind,
    pub start: f64,
    pub end: f64,
}

impl EtaSchedule {
    pub fn constant(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {value}")));
        }
        Ok(Self {
            kind: EtaKind::Constant,
            start: value,
            end: value,
        })
    }

    /// Cosine ramp from `start` at the first denoising step to 1 at the last.
    pub fn cosine(start: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&start) {
            return Err(Error::invalid(format!("eta start must lie in [0, 1], got {start}")));
        }
        Ok(Self {
            kind: EtaKind::Cosine,
            start,
            end: 1.0,
        })
    }

    pub fn value(&self, progress: f64) -> Result<f64> {
        eta_value(self, progress)
    }

    /// η for denoising step `i` of `n`: progress `i/(n−1)`.
    pub fn at_step(&self, i: usize, n: usize) -> Result<f64> {
        let progress = if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
        eta_value(self, progress)
    }
}

impl Default for EtaSchedule {
    fn default() -> Self {
        Self {
            kind: EtaKind::Cosine,
            start: 0.2,
            end: 1.0,
        }
    }
}

impl std::str::FromStr for EtaSchedule {
    type Err = Error;

    /// `0`, `constant:<v>` or `cosine:<start>`.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad eta value {v:?}")))
        };
        match s.split_once(':') {
            Some(("constant", v)) => EtaSchedule::constant(parse(v)?),
            Some(("cosine", v)) => EtaSchedule::cosine(parse(v)?),
            None => EtaSchedule::constant(parse(s)?),
            _ => Err(Error::invalid(format!("bad eta spec {s:?}"))),
        }
    }
}

impl std::fmt::Display for EtaSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            EtaKind::Constant => write!(f, "constant:{}", self.start),
            EtaKind::Cosine => write!(f, "cosine:{}", self.start),
        }
    }
}

/// η(p) = a − b·cos(πp) with a = (end+start)/2, b = (end−start)/2.
pub fn eta_value(e: &EtaSchedule, progress: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::invalid(format!("progress must lie in [0, 1], got {progress}")));
    }
    match e.kind {
        EtaKind::Constant => Ok(e.start),
        EtaKind::Cosine => {
            let a = 0.5 * (e.end + e.start);
            let b = 0.5 * (e.end - e.start);
            Ok((a - b * (PI * progress).cos()).clamp(e.start, e.end))
        }
    }
}

/// The trailing plan as CSV: header plus one row per denoising hop.
pub fn plan_csv(s: &NoiseSchedule, steps: usize, eta: &EtaSchedule) -> Result<String> {
    let plan = trailing_timesteps(s.num_timesteps(), steps)?;
    let mut out = String::from("step,t,t_prev,alpha_bar,snr,ddim_sigma,eta\n");
    for (i, (t, t_prev)) in plan.denoise_pairs().into_iter().enumerate() {
        out += &format!(
            "{i},{t},{t_prev},{:e},{:e},{:e},{}\n",
            s.alpha_bar(t)?,
            s.snr(t)?,
            ddim_sigma(s, t, t_prev)?,
            eta.at_step(i, plan.len())?
        );
    }
    Ok(out)
}
