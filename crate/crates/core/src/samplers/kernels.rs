//! Transition kernels acting on a [`ChainPool`].

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adapt::InverseMass;
use crate::error::{Error, Result};
use crate::flows::FlowModel;
use crate::math::standard_normal;
use crate::targets::LogDensity;

/// One chain: state, cached log density (and gradient when the pool needs
/// one), and its own random stream.
#[derive(Clone, Debug)]
pub struct Chain {
    pub x: Vec<f64>,
    pub log_p: f64,
    /// Empty unless the pool was built with gradients.
    pub grad: Vec<f64>,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct ChainPool {
    pub chains: Vec<Chain>,
    with_grad: bool,
}

/// Stream `i` of the ChaCha8 generator seeded with `seed`.
pub fn chain_stream(seed: u64, i: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(i as u64);
    r
}

fn evaluate(target: &dyn LogDensity, x: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
    if with_grad {
        let mut g = vec![0.0; x.len()];
        let lp = target.log_density_and_gradient(x, &mut g);
        (lp, g)
    } else {
        (target.log_density(x), Vec::new())
    }
}

impl ChainPool {
    /// `n` chains started from standard normal draws of their own streams.
    pub fn new(target: &dyn LogDensity, n: usize, seed: u64, with_grad: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::Input("a chain pool needs at least one chain".into()));
        }
        let d = target.dim();
        let states = (0..n)
            .map(|i| {
                let mut r = chain_stream(seed, i);
                let x: Vec<f64> = (0..d).map(|_| standard_normal(&mut r)).collect();
                (x, r)
            })
            .collect();
        Ok(Self::assemble(target, states, with_grad))
    }

    /// Chains at the given states; stream `i` of `seed` for chain `i`.
    pub fn from_states(
        target: &dyn LogDensity,
        states: Vec<Vec<f64>>,
        seed: u64,
        with_grad: bool,
    ) -> Result<Self> {
        if states.is_empty() || states.iter().any(|x| x.len() != target.dim()) {
            return Err(Error::Input(
                "states must be non-empty with the target's dimension".into(),
            ));
        }
        let states = states
            .into_iter()
            .enumerate()
            .map(|(i, x)| (x, chain_stream(seed, i)))
            .collect();
        Ok(Self::assemble(target, states, with_grad))
    }

    fn assemble(
        target: &dyn LogDensity,
        states: Vec<(Vec<f64>, ChaCha8Rng)>,
        with_grad: bool,
    ) -> Self {
        let chains = states
            .into_par_iter()
            .map(|(x, rng)| {
                let (log_p, grad) = evaluate(target, &x, with_grad);
                Chain {
                    x,
                    log_p,
                    grad,
                    rng,
                }
            })
            .collect();
        Self { chains, with_grad }
    }

    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    pub fn with_grad(&self) -> bool {
        self.with_grad
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.x.clone()).collect()
    }

    /// Re-evaluates the cached densities against another target (or with
    /// gradients switched on or off), keeping states and streams.
    pub fn rebind(&mut self, target: &dyn LogDensity, with_grad: bool) {
        self.with_grad = with_grad;
        self.chains.par_iter_mut().for_each(|c| {
            let (lp, g) = evaluate(target, &c.x, with_grad);
            c.log_p = lp;
            c.grad = g;
        });
    }
}

/// Outcome of one kernel application across the pool.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    /// `min(1, α)` per chain, 0 for non-finite ratios.
    pub accept_prob: Vec<f64>,
    pub accepted: Vec<bool>,
    /// Chains whose proposal was rejected for being non-finite.
    pub nonfinite: usize,
}

impl StepStats {
    pub fn mean_accept_prob(&self) -> f64 {
        self.accept_prob.iter().sum::<f64>() / self.accept_prob.len().max(1) as f64
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().filter(|&&a| a).count()
    }

    fn collect(per_chain: Vec<(f64, bool, bool)>) -> Self {
        let mut s = StepStats::default();
        for (p, a, bad) in per_chain {
            s.accept_prob.push(p);
            s.accepted.push(a);
            s.nonfinite += bad as usize;
        }
        s
    }
}

/// Metropolis rule: draws `w ~ U(0, 1)` and accepts iff `log α > log w`.
/// Returns `(accepted, min(1, α))`; a NaN ratio is rejected.
pub fn metropolis_accept(log_alpha: f64, rng: &mut dyn RngCore) -> (bool, f64) {
    let w: f64 = rng.random();
    if log_alpha.is_nan() {
        return (false, 0.0);
    }
    (log_alpha > w.ln(), log_alpha.min(0.0).exp())
}

/// Random-walk Metropolis with proposal `x + ε·M⁻¹u`, `u ~ N(0, I)`.
pub fn mh_step(
    pool: &mut ChainPool,
    target: &dyn LogDensity,
    inverse_mass: &InverseMass,
    step_size: f64,
) -> StepStats {
    let with_grad = pool.with_grad;
    let m = inverse_mass.as_slice();
    let per_chain = pool
        .chains
        .par_iter_mut()
        .map(|c| {
            let proposal: Vec<f64> =
                c.x.iter()
                    .zip(m)
                    .map(|(x, mi)| x + step_size * mi * standard_normal(&mut c.rng))
                    .collect();
            let (lp, g) = evaluate(target, &proposal, with_grad);
            let bad = !lp.is_finite() && lp != f64::NEG_INFINITY
                || proposal.iter().any(|v| !v.is_finite());
            let log_alpha = if bad { f64::NAN } else { lp - c.log_p };
            let (acc, p) = metropolis_accept(log_alpha, &mut c.rng);
            if acc {
                c.x = proposal;
                c.log_p = lp;
                c.grad = g;
            }
            (p, acc, bad)
        })
        .collect();
    StepStats::collect(per_chain)
}

/// `steps` leapfrog steps from `(x, r)`: half kick, drift `h·M⁻¹r`, half
/// kick.
pub fn leapfrog(
    target: &dyn LogDensity,
    x: &[f64],
    r: &[f64],
    step: f64,
    steps: usize,
    inverse_mass: &InverseMass,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(step > 0.0) || steps == 0 {
        return Err(Error::Input(
            "leapfrog needs a positive step and at least one step".into(),
        ));
    }
    let mut g = vec![0.0; x.len()];
    target.log_density_and_gradient(x, &mut g);
    let (x, r, _, _) = integrate(
        target,
        x.to_vec(),
        r.to_vec(),
        g,
        step,
        steps,
        inverse_mass.as_slice(),
    )?;
    Ok((x, r))
}

/// Returns the end state, momentum, log density and gradient.
fn integrate(
    target: &dyn LogDensity,
    mut x: Vec<f64>,
    mut r: Vec<f64>,
    mut g: Vec<f64>,
    h: f64,
    steps: usize,
    m: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, f64, Vec<f64>)> {
    let mut lp = f64::NAN;
    for s in 0..steps {
        for k in 0..x.len() {
            r[k] += 0.5 * h * g[k];
            x[k] += h * m[k] * r[k];
        }
        lp = target.log_density_and_gradient(&x, &mut g);
        for k in 0..x.len() {
            r[k] += 0.5 * h * g[k];
        }
        if !lp.is_finite() || x.iter().chain(&r).chain(&g).any(|v| !v.is_finite()) {
            return Err(Error::DivergentTrajectory { step: s + 1 });
        }
    }
    Ok((x, r, lp, g))
}

fn kinetic(r: &[f64], m: &[f64]) -> f64 {
    0.5 * r.iter().zip(m).map(|(r, m)| r * r * m).sum::<f64>()
}

/// HMC with momentum `r ~ N(0, M)` (drawn as `u/√M⁻¹`), `leapfrog_steps`
/// steps of size `step_size`, and Metropolis correction with kinetic energy
/// `½ rᵀM⁻¹r`. Divergent trajectories are rejected and counted.
pub fn hmc_step(
    pool: &mut ChainPool,
    target: &dyn LogDensity,
    inverse_mass: &InverseMass,
    step_size: f64,
    leapfrog_steps: usize,
) -> Result<StepStats> {
    if !pool.with_grad {
        return Err(Error::Input("HMC needs a pool built with gradients".into()));
    }
    if !(step_size > 0.0) || leapfrog_steps == 0 {
        return Err(Error::Input(
            "HMC needs a positive step and at least one leapfrog step".into(),
        ));
    }
    let m = inverse_mass.as_slice();
    let per_chain = pool
        .chains
        .par_iter_mut()
        .map(|c| {
            let r: Vec<f64> = m
                .iter()
                .map(|mi| standard_normal(&mut c.rng) / mi.sqrt())
                .collect();
            let k0 = kinetic(&r, m);
            let end = integrate(
                target,
                c.x.clone(),
                r,
                c.grad.clone(),
                step_size,
                leapfrog_steps,
                m,
            );
            let (proposal, log_alpha, bad) = match end {
                Ok((x, r, lp, g)) => {
                    let la = lp - c.log_p - (kinetic(&r, m) - k0);
                    (Some((x, lp, g)), la, false)
                }
                Err(_) => (None, f64::NAN, true),
            };
            let (acc, p) = metropolis_accept(log_alpha, &mut c.rng);
            if acc {
                let (x, lp, g) = proposal.expect("accepted proposals are finite");
                c.x = x;
                c.log_p = lp;
                c.grad = g;
            }
            (p, acc, bad)
        })
        .collect();
    Ok(StepStats::collect(per_chain))
}

/// `log α` of an independence proposal: `(log p(x′) − log q(x′)) − (log p(x)
/// − log q(x))`.
pub fn jump_log_alpha(log_p_new: f64, log_q_new: f64, log_p_old: f64, log_q_old: f64) -> f64 {
    (log_p_new - log_q_new) - (log_p_old - log_q_old)
}

/// Independent proposal `x′ ~ q` from the flow for every chain. `log q` at
/// the current state is evaluated afresh, so stochastic log-det estimators
/// contribute a new estimate each time.
pub fn jump_step(pool: &mut ChainPool, target: &dyn LogDensity, flow: &FlowModel) -> StepStats {
    let with_grad = pool.with_grad;
    let per_chain = pool
        .chains
        .par_iter_mut()
        .map(|c| {
            let proposal = flow.sample_one(&mut c.rng);
            let current_q = flow.log_density(&c.x, &mut c.rng);
            let (log_alpha, next) = match (proposal, current_q) {
                (Ok((x, lq_new)), Ok(lq_old)) if lq_new.is_finite() && lq_old.is_finite() => {
                    let (lp, g) = evaluate(target, &x, with_grad);
                    if lp.is_finite() || lp == f64::NEG_INFINITY {
                        (
                            jump_log_alpha(lp, lq_new, c.log_p, lq_old),
                            Some((x, lp, g)),
                        )
                    } else {
                        (f64::NAN, None)
                    }
                }
                _ => (f64::NAN, None),
            };
            let bad = next.is_none();
            let (acc, p) = metropolis_accept(log_alpha, &mut c.rng);
            if acc {
                let (x, lp, g) = next.expect("accepted proposals are finite");
                c.x = x;
                c.log_p = lp;
                c.grad = g;
            }
            (p, acc, bad)
        })
        .collect();
    StepStats::collect(per_chain)
}
