//! MCMC samplers: random-walk Metropolis, HMC, their flow-preconditioned
//! (NeuTra) variants, flow-jump variants and independent Metropolis-Hastings.

mod adapt;
mod kernels;
mod neutra;

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adapt::{
    adapt_inverse_mass, DualAveraging, InverseMass, HMC_TARGET_ACCEPTANCE, MASS_DECAY,
    MH_TARGET_ACCEPTANCE, MIN_INVERSE_MASS,
};
pub use kernels::{
    chain_stream, hmc_step, jump_log_alpha, jump_step, leapfrog, metropolis_accept, mh_step, Chain,
    ChainPool, StepStats,
};
pub use neutra::{neutra_log_density, NeutraDensity};

use crate::error::{Error, Result};
use crate::flows::FlowModel;
use crate::metrics::RunningMoments;
use crate::targets::LogDensity;
use crate::training::{fit, FitBudget, FitReport, Objective, MLE_BATCH_SIZE};

pub const DEFAULT_CHAINS: usize = 100;
pub const DEFAULT_LEAPFROG_STEPS: usize = 10;
pub const DEFAULT_JUMP_INTERVAL: usize = 25;
/// Step size the dual averaging starts from.
pub const INITIAL_STEP_SIZE: f64 = 0.1;
/// Warm-up states kept for the maximum-likelihood refit.
pub const REFIT_SAMPLE_CAP: usize = 20_000;
/// Share of the refit samples held out for validation.
pub const REFIT_VALIDATION_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Mh,
    Hmc,
    Imh,
    JumpMh,
    JumpHmc,
    NeutraMh,
    NeutraHmc,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 7] = [
        SamplerKind::Mh,
        SamplerKind::Hmc,
        SamplerKind::Imh,
        SamplerKind::JumpMh,
        SamplerKind::JumpHmc,
        SamplerKind::NeutraMh,
        SamplerKind::NeutraHmc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Mh => "mh",
            SamplerKind::Hmc => "hmc",
            SamplerKind::Imh => "imh",
            SamplerKind::JumpMh => "jump_mh",
            SamplerKind::JumpHmc => "jump_hmc",
            SamplerKind::NeutraMh => "neutra_mh",
            SamplerKind::NeutraHmc => "neutra_hmc",
        }
    }

    pub fn needs_flow(self) -> bool {
        !matches!(self, SamplerKind::Mh | SamplerKind::Hmc)
    }

    /// Whether the local kernel is HMC.
    pub fn uses_gradients(self) -> bool {
        matches!(
            self,
            SamplerKind::Hmc | SamplerKind::JumpHmc | SamplerKind::NeutraHmc
        )
    }

    fn is_jump(self) -> bool {
        matches!(
            self,
            SamplerKind::Imh | SamplerKind::JumpMh | SamplerKind::JumpHmc
        )
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Wall-clock and/or step limit; the phase ends at whichever comes first.
/// Step-only budgets make runs reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    #[serde(default)]
    pub seconds: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
}

impl Budget {
    pub fn steps(steps: usize) -> Self {
        Self {
            seconds: None,
            steps: Some(steps),
        }
    }

    pub fn seconds(seconds: f64) -> Self {
        Self {
            seconds: Some(seconds),
            steps: None,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        match (self.seconds, self.steps) {
            (None, None) => Err(Error::Input(format!(
                "{what} budget needs seconds or steps"
            ))),
            (Some(s), _) if !(s >= 0.0 && s.is_finite()) => Err(Error::Input(format!(
                "{what} budget seconds must be finite and non-negative"
            ))),
            _ => Ok(()),
        }
    }

    fn exhausted(&self, start: Instant, steps: usize) -> bool {
        self.steps.is_some_and(|n| steps >= n)
            || self
                .seconds
                .is_some_and(|s| start.elapsed().as_secs_f64() >= s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_leapfrog_steps")]
    pub leapfrog_steps: usize,
    /// Jump every K-th step. Defaults to 25 for jump samplers and must be 1
    /// for imh.
    #[serde(default)]
    pub jump_interval: Option<usize>,
    pub warmup: Budget,
    pub sampling: Budget,
    /// Variational fit before warm-up (flow-based samplers).
    #[serde(default)]
    pub fit: FitBudget,
    /// Maximum-likelihood refit on warm-up states (jump samplers).
    #[serde(default)]
    pub refit: FitBudget,
}

fn default_chains() -> usize {
    DEFAULT_CHAINS
}

fn default_leapfrog_steps() -> usize {
    DEFAULT_LEAPFROG_STEPS
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, warmup: Budget, sampling: Budget) -> Self {
        Self {
            kind,
            chains: DEFAULT_CHAINS,
            leapfrog_steps: DEFAULT_LEAPFROG_STEPS,
            jump_interval: None,
            warmup,
            sampling,
            fit: FitBudget::default(),
            refit: FitBudget::default(),
        }
    }

    pub fn jump_interval(&self) -> usize {
        match (self.kind, self.jump_interval) {
            (SamplerKind::Imh, _) => 1,
            (_, Some(k)) => k,
            _ => DEFAULT_JUMP_INTERVAL,
        }
    }

    /// Checks the invariants; the message names the offending field.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.chains == 0 {
            return Err(("chains", "need at least one chain".into()));
        }
        if self.leapfrog_steps == 0 {
            return Err(("leapfrog_steps", "need at least one leapfrog step".into()));
        }
        if let Some(k) = self.jump_interval {
            if k == 0 {
                return Err(("jump_interval", "K must be at least 1".into()));
            }
            match self.kind {
                SamplerKind::Imh if k != 1 => {
                    return Err(("jump_interval", "imh jumps every step (K = 1)".into()));
                }
                SamplerKind::JumpMh | SamplerKind::JumpHmc if k == 1 => {
                    return Err(("jump_interval", "K = 1 is the imh sampler".into()));
                }
                SamplerKind::Mh
                | SamplerKind::Hmc
                | SamplerKind::NeutraMh
                | SamplerKind::NeutraHmc => {
                    return Err(("jump_interval", format!("{} does not jump", self.kind)));
                }
                _ => {}
            }
        }
        self.warmup
            .validate("warm-up")
            .map_err(|e| ("warmup", e.to_string()))?;
        self.sampling
            .validate("sampling")
            .map_err(|e| ("sampling", e.to_string()))?;
        Ok(())
    }
}

/// Reproducible outcome of a run. Wall timings are kept apart in
/// [`RunTimings`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub second_moment: Vec<f64>,
    pub first_moment: Vec<f64>,
    /// Sampling steps (each advances every chain).
    pub n_steps: usize,
    pub warmup_steps: usize,
    /// `None` for imh, which has no local kernel.
    pub accept_rate_local: Option<f64>,
    /// `None` for samplers without jumps.
    pub accept_rate_jump: Option<f64>,
    pub divergences: usize,
    /// Sampled points dropped from the moments for being non-finite after
    /// mapping back to data space.
    pub dropped_points: usize,
    pub step_size: Option<f64>,
    pub inverse_mass: Option<Vec<f64>>,
    pub fit_steps: usize,
    pub refit_steps: usize,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub fit_seconds: f64,
    pub warmup_seconds: f64,
    pub refit_seconds: f64,
    pub sampling_seconds: f64,
}

#[derive(Clone, Copy)]
enum Local {
    Mh,
    Hmc,
    /// imh: the flow proposal is the only kernel.
    None,
}

struct Adaptation {
    mass: InverseMass,
    dual: DualAveraging,
}

/// Streams derived from the run seed, one per purpose.
fn derived_seed(seed: u64, purpose: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1_000_003 + purpose);
    r.next_u64()
}

const CHAIN_STREAMS: u64 = 0;
const FIT_STREAM: u64 = 1;
const REFIT_STREAM: u64 = 2;

/// Runs the sampler's full schedule. The flow (required exactly for the
/// flow-based kinds) is trained in place.
///
/// * mh, hmc: adapt the inverse mass (and step size) while sampling during
///   warm-up, then sample with adaptation frozen.
/// * neutra_*: variational fit, then the same on the flow-adjusted density in
///   latent space; moments are taken of the mapped-back states.
/// * jump_*: variational fit, local warm-up, maximum-likelihood refit on
///   warm-up states, then K−1 local steps per flow jump.
/// * imh: variational fit, warm-up by flow jumps, refit, then jumps only.
pub fn run_sampler(
    config: &SamplerConfig,
    target: &dyn LogDensity,
    mut flow: Option<&mut FlowModel>,
    seed: u64,
) -> Result<(RunResult, RunTimings)> {
    config
        .validate()
        .map_err(|(field, msg)| Error::Input(format!("sampler.{field}: {msg}")))?;
    let kind = config.kind;
    match (&flow, kind.needs_flow()) {
        (None, true) => return Err(Error::Input(format!("{kind} needs a flow"))),
        (Some(_), false) => return Err(Error::Input(format!("{kind} takes no flow"))),
        (Some(f), true) if f.dim() != target.dim() => {
            return Err(Error::Input("flow and target dimensions differ".into()));
        }
        _ => {}
    }
    let d = target.dim();
    let mut timings = RunTimings::default();
    let mut notes = Vec::new();
    let mut result_fit_steps = 0;
    let mut result_refit_steps = 0;

    if let Some(f) = flow.as_deref_mut() {
        let start = Instant::now();
        let mut r = ChaCha8Rng::seed_from_u64(derived_seed(seed, FIT_STREAM));
        let report = fit(f, Objective::Svi(target), &config.fit, &mut r)?;
        note_fit(&mut notes, "variational fit", &report, &config.fit);
        result_fit_steps = report.steps;
        timings.fit_seconds = start.elapsed().as_secs_f64();
    }

    let local = match kind {
        SamplerKind::Mh | SamplerKind::NeutraMh | SamplerKind::JumpMh => Local::Mh,
        SamplerKind::Hmc | SamplerKind::NeutraHmc | SamplerKind::JumpHmc => Local::Hmc,
        SamplerKind::Imh => Local::None,
    };
    let frozen = flow.as_deref().cloned();
    let neutra = match kind {
        SamplerKind::NeutraMh | SamplerKind::NeutraHmc => Some(frozen.expect("checked above")),
        _ => None,
    };
    let neutra_density = match &neutra {
        Some(f) => Some(NeutraDensity::new(f, target)?),
        None => None,
    };
    let space: &dyn LogDensity = match &neutra_density {
        Some(n) => n,
        None => target,
    };

    let chain_seed = derived_seed(seed, CHAIN_STREAMS);
    let mut pool = ChainPool::new(space, config.chains, chain_seed, kind.uses_gradients())?;
    let target_rate = match local {
        Local::Hmc => HMC_TARGET_ACCEPTANCE,
        _ => MH_TARGET_ACCEPTANCE,
    };
    let mut adapt = Adaptation {
        mass: InverseMass::identity(d),
        dual: DualAveraging::new(INITIAL_STEP_SIZE, target_rate),
    };
    let mut divergences = 0;

    // Warm-up.
    let mut recorder = kind
        .is_jump()
        .then(|| ThinningBuffer::new(REFIT_SAMPLE_CAP));
    let start = Instant::now();
    let mut warmup_steps = 0;
    while !config.warmup.exhausted(start, warmup_steps) {
        let stats = match local {
            Local::None => jump_step(&mut pool, space, flow.as_deref().expect("imh has a flow")),
            _ => {
                let s = local_step(
                    &mut pool,
                    space,
                    local,
                    &adapt.mass,
                    adapt.dual.step_size(),
                    config,
                )?;
                adapt.dual.update(s.mean_accept_prob());
                adapt.mass = adapt_inverse_mass(&adapt.mass, &pool.states(), warmup_steps);
                s
            }
        };
        divergences += stats.nonfinite;
        warmup_steps += 1;
        if let Some(rec) = recorder.as_mut() {
            rec.push(pool.states());
        }
    }
    timings.warmup_seconds = start.elapsed().as_secs_f64();
    if warmup_steps == 0 {
        notes.push("warm-up budget exhausted before the first step".into());
    }
    let step_size = match local {
        Local::None => None,
        _ if warmup_steps == 0 => Some(INITIAL_STEP_SIZE),
        _ => Some(adapt.dual.final_step_size()),
    };

    // Refit on warm-up states.
    if let (Some(rec), Some(f)) = (recorder, flow.as_deref_mut()) {
        let start = Instant::now();
        let points = rec.into_points();
        if points.len() >= 2 && f.parameter_count() > 0 {
            let mut r = ChaCha8Rng::seed_from_u64(derived_seed(seed, REFIT_STREAM));
            let mut points = points;
            rand::seq::SliceRandom::shuffle(points.as_mut_slice(), &mut r);
            let n_val = ((points.len() as f64 * REFIT_VALIDATION_FRACTION).ceil() as usize)
                .clamp(1, points.len() - 1);
            let (val, train) = points.split_at(n_val);
            let report = fit(
                f,
                Objective::Mle {
                    train,
                    validation: Some(val),
                    batch_size: MLE_BATCH_SIZE,
                },
                &config.refit,
                &mut r,
            )?;
            note_fit(
                &mut notes,
                "maximum-likelihood refit",
                &report,
                &config.refit,
            );
            result_refit_steps = report.steps;
        }
        timings.refit_seconds = start.elapsed().as_secs_f64();
    }

    // Sampling.
    let k = config.jump_interval();
    let mut moments = RunningMoments::new(d);
    let (mut local_acc, mut local_n, mut jump_acc, mut jump_n) = (0usize, 0usize, 0usize, 0usize);
    let start = Instant::now();
    let mut steps = 0;
    let flow_ref = flow.as_deref();
    while !config.sampling.exhausted(start, steps) {
        steps += 1;
        let is_jump = kind.is_jump() && steps % k == 0;
        let stats = if is_jump {
            jump_step(
                &mut pool,
                space,
                flow_ref.expect("jump samplers have a flow"),
            )
        } else {
            local_step(
                &mut pool,
                space,
                local,
                &adapt.mass,
                step_size.unwrap_or(INITIAL_STEP_SIZE),
                config,
            )?
        };
        divergences += stats.nonfinite;
        if is_jump {
            jump_acc += stats.accepted_count();
            jump_n += stats.accepted.len();
        } else {
            local_acc += stats.accepted_count();
            local_n += stats.accepted.len();
        }
        let states = pool.states();
        match &neutra_density {
            Some(nd) => moments.update_with(&states, |z| nd.to_data(z).ok())?,
            None => moments.update(&states)?,
        }
    }
    timings.sampling_seconds = start.elapsed().as_secs_f64();
    if steps == 0 {
        notes.push("sampling budget exhausted before the first step".into());
    }

    let rate = |a: usize, n: usize| (n > 0).then(|| a as f64 / n as f64);
    let result = RunResult {
        second_moment: moments.second.clone(),
        first_moment: moments.first.clone(),
        n_steps: steps,
        warmup_steps,
        accept_rate_local: match local {
            Local::None => None,
            _ => rate(local_acc, local_n),
        },
        accept_rate_jump: if kind.is_jump() {
            rate(jump_acc, jump_n)
        } else {
            None
        },
        divergences,
        dropped_points: moments.dropped,
        step_size,
        inverse_mass: match local {
            Local::None => None,
            _ => Some(adapt.mass.as_slice().to_vec()),
        },
        fit_steps: result_fit_steps,
        refit_steps: result_refit_steps,
        notes,
    };
    Ok((result, timings))
}

fn local_step(
    pool: &mut ChainPool,
    target: &dyn LogDensity,
    local: Local,
    mass: &InverseMass,
    step_size: f64,
    config: &SamplerConfig,
) -> Result<StepStats> {
    match local {
        Local::Mh => Ok(mh_step(pool, target, mass, step_size)),
        Local::Hmc => hmc_step(pool, target, mass, step_size, config.leapfrog_steps),
        Local::None => unreachable!("imh has no local kernel"),
    }
}

fn note_fit(notes: &mut Vec<String>, what: &str, report: &FitReport, budget: &FitBudget) {
    if budget.max_steps.is_some_and(|m| report.steps >= m)
        || budget.max_seconds.is_some_and(|s| report.seconds >= s)
    {
        notes.push(format!(
            "{what} stopped by its budget after {} steps",
            report.steps
        ));
    }
}

/// Keeps every `stride`-th pushed batch, doubling the stride whenever the
/// cap is reached, so the kept batches stay spread over the whole stream.
struct ThinningBuffer {
    cap: usize,
    stride: usize,
    seen: usize,
    batches: Vec<Vec<Vec<f64>>>,
    points: usize,
}

impl ThinningBuffer {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            stride: 1,
            seen: 0,
            batches: Vec::new(),
            points: 0,
        }
    }

    fn push(&mut self, batch: Vec<Vec<f64>>) {
        self.seen += 1;
        if (self.seen - 1) % self.stride != 0 {
            return;
        }
        self.points += batch.len();
        self.batches.push(batch);
        while self.points > self.cap && self.batches.len() > 1 {
            let kept: Vec<_> = std::mem::take(&mut self.batches)
                .into_iter()
                .step_by(2)
                .collect();
            self.points = kept.iter().map(|b| b.len()).sum();
            self.batches = kept;
            self.stride *= 2;
        }
    }

    /// Points from the second half of the kept batches; the first half is
    /// treated as burn-in.
    fn into_points(self) -> Vec<Vec<f64>> {
        let skip = self.batches.len() / 2;
        self.batches.into_iter().skip(skip).flatten().collect()
    }
}
