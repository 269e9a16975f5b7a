use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal inverse mass matrix, strictly positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseMass(Vec<f64>);

/// Floor applied after every adaptation.
pub const MIN_INVERSE_MASS: f64 = 1e-8;
/// Per-step damping of the mass adaptation.
pub const MASS_DECAY: f64 = 0.999;

impl InverseMass {
    pub fn new(diag: Vec<f64>) -> Result<Self> {
        if diag.is_empty() || diag.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Input(
                "inverse mass entries must be positive and finite".into(),
            ));
        }
        Ok(Self(diag))
    }

    pub fn identity(dim: usize) -> Self {
        Self(vec![1.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `M⁻¹ + √Var[x]·0.999ᵗ`, with the variance taken per coordinate across
/// chains. With fewer than two states the mass is returned unchanged.
pub fn adapt_inverse_mass(current: &InverseMass, states: &[Vec<f64>], t: usize) -> InverseMass {
    let n = states.len();
    if n < 2 {
        return current.clone();
    }
    let decay = MASS_DECAY.powf(t as f64);
    let mut out = current.0.clone();
    for (k, m) in out.iter_mut().enumerate() {
        let mean = states.iter().map(|x| x[k]).sum::<f64>() / n as f64;
        let var = states.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let next = *m + var.sqrt() * decay;
        if next.is_finite() {
            *m = next.max(MIN_INVERSE_MASS);
        }
    }
    InverseMass(out)
}

/// Nesterov dual averaging of the log step size toward a target acceptance
/// rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualAveraging {
    pub target: f64,
    pub mu: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
    pub log_step: f64,
    pub log_step_avg: f64,
    pub h_bar: f64,
    pub t: usize,
}

pub const MH_TARGET_ACCEPTANCE: f64 = 0.234;
pub const HMC_TARGET_ACCEPTANCE: f64 = 0.65;

impl DualAveraging {
    pub fn new(initial_step: f64, target: f64) -> Self {
        Self {
            target,
            mu: (10.0 * initial_step).ln(),
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            log_step: initial_step.ln(),
            log_step_avg: initial_step.ln(),
            h_bar: 0.0,
            t: 0,
        }
    }

    pub fn update(&mut self, observed: f64) {
        let a = if observed.is_finite() {
            observed.clamp(0.0, 1.0)
        } else {
            0.0
        };
        self.t += 1;
        let t = self.t as f64;
        let w = 1.0 / (t + self.t0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - a);
        let log_step = self.mu - t.sqrt() / self.gamma * self.h_bar;
        // Keep the step representable; exp stays in (0, inf).
        self.log_step = log_step.clamp(-700.0, 700.0);
        let eta = t.powf(-self.kappa);
        self.log_step_avg = eta * self.log_step + (1.0 - eta) * self.log_step_avg;
    }

    /// Step size during adaptation.
    pub fn step_size(&self) -> f64 {
        self.log_step.exp()
    }

    /// Averaged step size, used once adaptation stops.
    pub fn final_step_size(&self) -> f64 {
        self.log_step_avg.exp()
    }
}
