use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    Cosine { s: f64 },
}

/// Compact description a schedule is rebuilt from; this is what gets serialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    #[serde(flatten)]
    pub kind: ScheduleKind,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear {
                beta_start,
                beta_end,
            } => make_linear_schedule(self.steps, beta_start, beta_end),
            ScheduleKind::Cosine { s } => make_cosine_schedule(self.steps, s),
        }
    }
}

/// Per-step flip rates `beta_t`, retention `alpha_t = 1 - beta_t` and cumulative
/// retention `alpha_bar_t` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ScheduleSpec", try_from = "ScheduleSpec")]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl From<NoiseSchedule> for ScheduleSpec {
    fn from(s: NoiseSchedule) -> Self {
        s.spec()
    }
}

impl TryFrom<ScheduleSpec> for NoiseSchedule {
    type Error = crate::Error;

    fn try_from(spec: ScheduleSpec) -> Result<Self> {
        spec.build()
    }
}

pub const COSINE_BETA_MIN: f64 = 1e-6;
pub const COSINE_BETA_MAX: f64 = 0.999;

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "linear schedule needs 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas = (1..=steps)
        .map(|t| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (t - 1) as f64 / (steps - 1) as f64 * (beta_end - beta_start)
            }
        })
        .collect();
    Ok(NoiseSchedule::from_betas(
        ScheduleKind::Linear {
            beta_start,
            beta_end,
        },
        betas,
    ))
}

/// Squared-cosine cumulative retention; betas come from consecutive ratios and are
/// clipped into `[1e-6, 0.999]`.
pub fn make_cosine_schedule(steps: usize, s: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(invalid(format!("cosine offset must be positive, got {s}")));
    }
    let betas = (1..=steps)
        .map(|t| {
            let ratio = cosine_alpha_bar(t, steps, s) / cosine_alpha_bar(t - 1, steps, s);
            (1.0 - ratio).clamp(COSINE_BETA_MIN, COSINE_BETA_MAX)
        })
        .collect();
    Ok(NoiseSchedule::from_betas(ScheduleKind::Cosine { s }, betas))
}

/// Unclipped `g(t) / g(0)` with `g(t) = cos^2(((t/T) + s) / (1 + s) * pi/2)`.
pub fn cosine_alpha_bar(t: usize, steps: usize, s: f64) -> f64 {
    let g = |t: usize| {
        let c = ((t as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
        c * c
    };
    g(t) / g(0)
}

impl NoiseSchedule {
    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        NoiseSchedule {
            kind,
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.steps(),
            kind: self.kind,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `0 <= t <= T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(invalid(format!(
                "step {t} outside {min}..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("schedule serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}
