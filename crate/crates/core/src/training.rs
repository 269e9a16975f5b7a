//! Flow fitting: reverse-KL SVI against a target and maximum likelihood on
//! samples, both optimized with Adam.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{Backend, Tape};
use crate::error::{Error, Result};
use crate::flows::{record_base_log_density, FlowModel, Params, TRAINING_PROBES};
use crate::math::{standard_normal, standard_normal_log_density};
use crate::targets::LogDensity;

pub const ADAM_STEP_SIZE: f64 = 0.05;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Global gradient norm above which gradients are rescaled.
pub const GRADIENT_CLIP: f64 = 10.0;
pub const PATIENCE: usize = 5000;
pub const MLE_BATCH_SIZE: usize = 1024;
/// Consecutive skipped steps tolerated before a fit is declared diverged.
pub const MAX_CONSECUTIVE_SKIPS: usize = 100;
/// Single-sample SVI losses are too noisy to rank parameter vectors, so fits
/// judge improvement on a KL estimate over this many fixed latent draws...
pub const SVI_VALIDATION_DRAWS: usize = 256;
/// ...re-evaluated every this many steps.
pub const SVI_VALIDATION_EVERY: usize = 100;
/// Steps between validation evaluations in maximum-likelihood fits.
pub const MLE_VALIDATION_EVERY: usize = 10;
/// Power iterations per step for spectrally normalized layers.
pub const SPECTRAL_ITERATIONS: usize = 5;

/// Adam optimizer state plus the skip counters shared by the step
/// functions.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub skipped: usize,
    pub consecutive_skips: usize,
}

impl AdamState {
    pub fn new(parameter_count: usize) -> Self {
        Self {
            step_size: ADAM_STEP_SIZE,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            m: vec![0.0; parameter_count],
            v: vec![0.0; parameter_count],
            t: 0,
            skipped: 0,
            consecutive_skips: 0,
        }
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    fn record_skip(&mut self) -> Result<()> {
        self.skipped += 1;
        self.consecutive_skips += 1;
        if self.consecutive_skips > MAX_CONSECUTIVE_SKIPS {
            return Err(Error::TrainingDiverged {
                consecutive_skips: self.consecutive_skips,
            });
        }
        Ok(())
    }
}

/// Bias-corrected Adam update of `parameters` in place.
pub fn adam_update(adam: &mut AdamState, gradient: &[f64], parameters: &mut [f64]) {
    assert_eq!(
        gradient.len(),
        parameters.len(),
        "gradient and parameter lengths differ"
    );
    assert_eq!(
        adam.m.len(),
        parameters.len(),
        "optimizer state has the wrong length"
    );
    adam.t += 1;
    let t = adam.t as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for i in 0..parameters.len() {
        let g = gradient[i];
        adam.m[i] = adam.beta1 * adam.m[i] + (1.0 - adam.beta1) * g;
        adam.v[i] = adam.beta2 * adam.v[i] + (1.0 - adam.beta2) * g * g;
        let mh = adam.m[i] / c1;
        let vh = adam.v[i] / c2;
        parameters[i] -= adam.step_size * mh / (vh.sqrt() + adam.epsilon);
    }
}

fn clip(gradient: &mut [f64]) {
    let norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > GRADIENT_CLIP {
        let s = GRADIENT_CLIP / norm;
        gradient.iter_mut().for_each(|g| *g *= s);
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Step {
    Applied {
        loss: f64,
    },
    /// Non-finite loss, gradient or update; parameters untouched.
    Skipped,
}

impl Step {
    pub fn loss(self) -> Option<f64> {
        match self {
            Step::Applied { loss } => Some(loss),
            Step::Skipped => None,
        }
    }
}

/// Errors a step absorbs as a skip rather than propagating.
fn is_recoverable(e: &Error) -> bool {
    matches!(e, Error::Numerical { .. } | Error::Convergence { .. })
}

fn apply(
    flow: &mut FlowModel,
    adam: &mut AdamState,
    loss: f64,
    mut grad: Vec<f64>,
) -> Result<Step> {
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        adam.record_skip()?;
        return Ok(Step::Skipped);
    }
    clip(&mut grad);
    let mut next = flow.parameters().to_vec();
    let saved = adam.clone();
    adam_update(adam, &grad, &mut next);
    if next.iter().any(|p| !p.is_finite()) {
        *adam = saved;
        adam.record_skip()?;
        return Ok(Step::Skipped);
    }
    flow.set_parameters(&next)?;
    flow.update_spectral(SPECTRAL_ITERATIONS);
    adam.consecutive_skips = 0;
    Ok(Step::Applied { loss })
}

/// Single-sample reverse-KL loss `log q(x) - log p(x)` at `x = f⁻¹(z)` and
/// its parameter gradient. Adds the flow's Jacobian penalty, if any.
pub fn svi_loss_and_gradient(
    flow: &FlowModel,
    target: &dyn LogDensity,
    z: &[f64],
    rng: &mut dyn RngCore,
) -> Result<(f64, Vec<f64>)> {
    let mut b = Tape::new();
    let theta = b.input(flow.parameters());
    let p = Params::Recorded(theta);
    let zv = b.constant(z);
    let pass = flow.record_inverse(&mut b, &p, &zv, TRAINING_PROBES, rng)?;
    let x = b.value(&pass.out).to_vec();
    let mut grad_p = vec![0.0; x.len()];
    let log_p = target.log_density_and_gradient(&x, &mut grad_p);
    if !log_p.is_finite() || grad_p.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("target log density"));
    }
    // d(-log p(x))/dθ = -∇log p(x)·∂x/∂θ, recorded as a linear surrogate.
    let gp = b.constant(&grad_p);
    let surrogate = b.dot(&pass.out, &gp);
    let ld_and_p = b.add(&pass.log_det, &surrogate);
    let mut objective = b.neg(&ld_and_p);
    let mut loss = standard_normal_log_density(z) - b.scalar_value(&pass.log_det) - log_p;
    if let Some(pen) = &pass.penalty {
        loss += b.scalar_value(pen);
        objective = b.add(&objective, pen);
    }
    let grads = b.backward(objective)?;
    Ok((loss, grads.wrt(theta)))
}

/// One SVI step with a fresh `z ~ N(0, I)`.
pub fn svi_step(
    flow: &mut FlowModel,
    target: &dyn LogDensity,
    adam: &mut AdamState,
    rng: &mut dyn RngCore,
) -> Result<Step> {
    if target.dim() != flow.dim() {
        return Err(Error::Input("flow and target dimensions differ".into()));
    }
    let z: Vec<f64> = (0..flow.dim()).map(|_| standard_normal(rng)).collect();
    match svi_loss_and_gradient(flow, target, &z, rng) {
        Ok((loss, grad)) => apply(flow, adam, loss, grad),
        Err(e) if is_recoverable(&e) => {
            adam.record_skip()?;
            Ok(Step::Skipped)
        }
        Err(e) => Err(e),
    }
}

/// `-log q(x)` for one point and its parameter gradient.
fn nll_and_gradient(flow: &FlowModel, x: &[f64], seed: u64) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Tape::new();
    let theta = b.input(flow.parameters());
    let p = Params::Recorded(theta);
    let xv = b.constant(x);
    let pass = flow.record_forward(&mut b, &p, &xv, TRAINING_PROBES, &mut rng)?;
    let base = record_base_log_density(&mut b, &pass.out);
    let lq = b.add(&base, &pass.log_det);
    let mut objective = b.neg(&lq);
    if let Some(pen) = &pass.penalty {
        objective = b.add(&objective, pen);
    }
    let loss = b.scalar_value(&objective);
    let grads = b.backward(objective)?;
    Ok((loss, grads.wrt(theta)))
}

/// Mean negative log likelihood over `batch` and its gradient. Rows are
/// evaluated in parallel and reduced in index order.
pub fn mle_loss_and_gradient(
    flow: &FlowModel,
    batch: &[Vec<f64>],
    rng: &mut dyn RngCore,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Input("training batch is empty".into()));
    }
    if batch.iter().any(|x| x.len() != flow.dim()) {
        return Err(Error::Input(
            "batch rows must match the flow dimension".into(),
        ));
    }
    let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.next_u64()).collect();
    let rows: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(x, &s)| nll_and_gradient(flow, x, s))
        .collect();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; flow.parameter_count()];
    for row in rows {
        let (l, g) = row?;
        loss += l / n;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b / n);
    }
    Ok((loss, grad))
}

/// One maximum-likelihood step on `batch`.
pub fn mle_step(
    flow: &mut FlowModel,
    batch: &[Vec<f64>],
    adam: &mut AdamState,
    rng: &mut dyn RngCore,
) -> Result<Step> {
    match mle_loss_and_gradient(flow, batch, rng) {
        Ok((loss, grad)) => apply(flow, adam, loss, grad),
        Err(e) if is_recoverable(&e) => {
            adam.record_skip()?;
            Ok(Step::Skipped)
        }
        Err(e) => Err(e),
    }
}

/// Mean negative log likelihood without gradients.
pub fn mean_nll(flow: &FlowModel, points: &[Vec<f64>], rng: &mut dyn RngCore) -> Result<f64> {
    let seeds: Vec<u64> = (0..points.len()).map(|_| rng.next_u64()).collect();
    let mut probe_flow = flow.clone();
    probe_flow.set_probes(TRAINING_PROBES);
    let values: Vec<Result<f64>> = points
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(x, &s)| probe_flow.log_density(x, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect();
    let mut total = 0.0;
    for v in values {
        total -= v?;
    }
    Ok(total / points.len() as f64)
}

/// Reverse-KL estimate (up to the target's normalizer) over the given latent
/// draws, without gradients. Probe draws are seeded from `seed`.
pub fn svi_validation_loss(
    flow: &FlowModel,
    target: &dyn LogDensity,
    zs: &[Vec<f64>],
    seed: u64,
) -> Result<f64> {
    if zs.is_empty() {
        return Err(Error::Input("no latent draws to evaluate".into()));
    }
    let values: Vec<Result<f64>> = zs
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let mut r =
                ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (x, ld) = flow.inverse(z, &mut r)?;
            Ok(standard_normal_log_density(z) - ld - target.log_density(&x))
        })
        .collect();
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / zs.len() as f64)
}

/// Stopping rule for [`fit`]. Wall clock and step limits are both optional;
/// whichever is hit first ends the fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitBudget {
    #[serde(default)]
    pub max_seconds: Option<f64>,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Adam step size.
    #[serde(default = "default_step_size")]
    pub step_size: f64,
}

fn default_step_size() -> f64 {
    ADAM_STEP_SIZE
}

fn default_patience() -> usize {
    PATIENCE
}

impl Default for FitBudget {
    fn default() -> Self {
        Self {
            max_seconds: None,
            max_steps: None,
            patience: PATIENCE,
            step_size: ADAM_STEP_SIZE,
        }
    }
}

impl FitBudget {
    pub fn steps(max_steps: usize) -> Self {
        Self {
            max_steps: Some(max_steps),
            ..Self::default()
        }
    }

    pub fn seconds(max_seconds: f64) -> Self {
        Self {
            max_seconds: Some(max_seconds),
            ..Self::default()
        }
    }
}

pub enum Objective<'a> {
    Svi(&'a dyn LogDensity),
    Mle {
        train: &'a [Vec<f64>],
        /// Held-out points; when present, improvement is judged on them.
        validation: Option<&'a [Vec<f64>]>,
        batch_size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub wall_seconds: f64,
    /// Loss of this step, `None` when skipped.
    pub loss: Option<f64>,
    pub best_loss: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub history: Vec<HistoryRow>,
    pub best_loss: f64,
    pub steps: usize,
    pub skipped: usize,
    pub seconds: f64,
}

impl FitReport {
    /// Writes the history as CSV (`step,wall_seconds,loss,best_loss,skipped`).
    pub fn write_history_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "wall_seconds", "loss", "best_loss", "skipped"])?;
        for r in &self.history {
            w.write_record([
                r.step.to_string(),
                r.wall_seconds.to_string(),
                r.loss.map(|l| l.to_string()).unwrap_or_default(),
                r.best_loss.to_string(),
                r.skipped.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs optimizer steps until the budget or patience runs out, then restores
/// the parameters with the best monitored loss. On divergence the flow is
/// also left at the best snapshot and the error is returned.
pub fn fit(
    flow: &mut FlowModel,
    objective: Objective<'_>,
    budget: &FitBudget,
    rng: &mut dyn RngCore,
) -> Result<FitReport> {
    let start = Instant::now();
    let mut report = FitReport {
        best_loss: f64::INFINITY,
        ..FitReport::default()
    };
    if budget.patience == 0 || budget.max_steps == Some(0) || flow.parameter_count() == 0 {
        return Ok(report);
    }
    if let Some(s) = budget.max_seconds {
        if !(s > 0.0) {
            return Err(Error::Input(
                "fit wall-clock budget must be positive".into(),
            ));
        }
    }
    if let Objective::Mle {
        train, batch_size, ..
    } = &objective
    {
        if train.is_empty() || *batch_size == 0 {
            return Err(Error::Input(
                "maximum-likelihood fit needs data and a batch size".into(),
            ));
        }
    }
    if !(budget.step_size > 0.0 && budget.step_size.is_finite()) {
        return Err(Error::Input("Adam step size must be positive".into()));
    }
    let mut adam = AdamState::new(flow.parameter_count()).with_step_size(budget.step_size);
    let mut best = flow.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut step = 0;

    // Periodic evaluation on held-out draws, with fixed probe seeds so that
    // successive evaluations are comparable.
    let eval_seed = rng.next_u64();
    let (every, svi_draws) = match &objective {
        Objective::Svi(target) => {
            let d = target.dim();
            let zs: Vec<Vec<f64>> = (0..SVI_VALIDATION_DRAWS)
                .map(|_| (0..d).map(|_| standard_normal(rng)).collect())
                .collect();
            (Some(SVI_VALIDATION_EVERY.min(budget.patience).max(1)), zs)
        }
        Objective::Mle {
            validation: Some(_),
            ..
        } => (
            Some(MLE_VALIDATION_EVERY.min(budget.patience).max(1)),
            Vec::new(),
        ),
        Objective::Mle {
            validation: None, ..
        } => (None, Vec::new()),
    };
    let evaluate = |flow: &FlowModel| -> Option<f64> {
        let v = match &objective {
            Objective::Svi(target) => svi_validation_loss(flow, *target, &svi_draws, eval_seed),
            Objective::Mle {
                validation: Some(val),
                ..
            } => mean_nll(flow, val, &mut ChaCha8Rng::seed_from_u64(eval_seed)),
            Objective::Mle {
                validation: None, ..
            } => return None,
        };
        v.ok().filter(|v| v.is_finite())
    };
    if every.is_some() {
        if let Some(l) = evaluate(flow) {
            report.best_loss = l;
        }
    }
    let mut evaluated_at = 0;
    loop {
        if budget.max_steps.is_some_and(|m| step >= m)
            || budget
                .max_seconds
                .is_some_and(|s| start.elapsed().as_secs_f64() >= s)
            || since_best >= budget.patience
        {
            break;
        }
        let before = flow.clone();
        let outcome = match &objective {
            Objective::Svi(target) => svi_step(flow, *target, &mut adam, rng),
            Objective::Mle {
                train, batch_size, ..
            } => {
                let n = train.len();
                let take = (*batch_size).min(n);
                if cursor + take > order.len() {
                    order = (0..n).collect();
                    order.shuffle(rng);
                    cursor = 0;
                }
                let batch: Vec<Vec<f64>> = order[cursor..cursor + take]
                    .iter()
                    .map(|&i| train[i].clone())
                    .collect();
                cursor += take;
                mle_step(flow, &batch, &mut adam, rng)
            }
        };
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                *flow = best;
                return Err(e);
            }
        };
        step += 1;
        since_best += 1;
        match every {
            Some(k) if step % k == 0 => {
                evaluated_at = step;
                if let Some(l) = evaluate(flow).filter(|&l| l < report.best_loss) {
                    report.best_loss = l;
                    since_best = 0;
                    best = flow.clone();
                }
            }
            Some(_) => {}
            // The training loss of a step describes the parameters before it.
            None => {
                if let Step::Applied { loss } = outcome {
                    if loss < report.best_loss {
                        report.best_loss = loss;
                        since_best = 0;
                        best = before;
                    }
                }
            }
        }
        report.history.push(HistoryRow {
            step,
            wall_seconds: start.elapsed().as_secs_f64(),
            loss: outcome.loss(),
            best_loss: report.best_loss,
            skipped: outcome == Step::Skipped,
        });
    }
    // Steps after the last periodic evaluation still get a chance.
    if every.is_some() && evaluated_at != step {
        if let Some(l) = evaluate(flow).filter(|&l| l < report.best_loss) {
            report.best_loss = l;
            best = flow.clone();
            if let Some(last) = report.history.last_mut() {
                last.best_loss = l;
            }
        }
    }
    report.steps = step;
    report.skipped = adam.skipped;
    report.seconds = start.elapsed().as_secs_f64();
    *flow = best;
    Ok(report)
}
