//! Continuous flows: the state follows `dz/dt = g(t, z)` and the
//! log-determinant accumulates `tr(∂g/∂z)`, estimated with probes fixed for
//! the whole integration. State, trace integral and (optionally) the squared
//! Jacobian-norm penalty are stepped together.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::nn::{BoundMlp, MlpLayout, Params};
use super::{draw_probes, ProbeMode};
use crate::diff::{Backend, Eager};
use crate::error::{Error, Result};

pub const EULER_STEPS: usize = 150;
pub const RK4_STEPS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler { steps: usize },
    Rk4 { steps: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum VelocityField {
    /// Tanh network; with `time_dependent` the time is appended to the
    /// input.
    Mlp {
        layout: MlpLayout,
        time_dependent: bool,
    },
    /// Fixed `g(t, z) = A z` (row-major `A`), no parameters.
    Linear(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousLayer {
    pub dim: usize,
    pub field: VelocityField,
    pub solver: Solver,
    pub penalty_weight: f64,
}

enum BoundField<V> {
    Mlp {
        net: BoundMlp<V>,
        time_dependent: bool,
    },
    Linear(V),
}

/// Result of one integration on a backend.
pub(crate) struct Integration<V> {
    pub state: V,
    pub log_det: V,
    pub penalty: V,
}

impl ContinuousLayer {
    pub fn new(
        dim: usize,
        hidden: usize,
        depth: usize,
        time_dependent: bool,
        solver: Solver,
        offset: usize,
    ) -> Self {
        let input = dim + usize::from(time_dependent);
        Self {
            dim,
            field: VelocityField::Mlp {
                layout: MlpLayout::new(input, hidden, depth, dim, offset),
                time_dependent,
            },
            solver,
            penalty_weight: 0.0,
        }
    }

    pub fn linear(dim: usize, matrix: Vec<f64>, solver: Solver) -> Self {
        assert_eq!(matrix.len(), dim * dim, "matrix must be dim x dim");
        Self {
            dim,
            field: VelocityField::Linear(matrix),
            solver,
            penalty_weight: 0.0,
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.field {
            VelocityField::Mlp { layout, .. } => layout.param_count(),
            VelocityField::Linear(_) => 0,
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut dyn RngCore) {
        if let VelocityField::Mlp { layout, .. } = &self.field {
            layout.init(params, rng);
        }
    }

    fn bind<B: Backend>(&self, b: &mut B, p: &Params<B>) -> BoundField<B::V> {
        match &self.field {
            VelocityField::Mlp {
                layout,
                time_dependent,
            } => BoundField::Mlp {
                net: layout.bind(b, p),
                time_dependent: *time_dependent,
            },
            VelocityField::Linear(a) => BoundField::Linear(b.constant(a)),
        }
    }

    /// Velocity, trace estimate and mean squared Jacobian-probe norm.
    fn dynamics<B: Backend>(
        &self,
        b: &mut B,
        field: &BoundField<B::V>,
        t: f64,
        z: &B::V,
        probes: &[B::V],
    ) -> (B::V, B::V, B::V) {
        let d = self.dim;
        let (dz, jws) = match field {
            BoundField::Linear(a) => {
                let dz = b.matvec(a, d, d, z);
                let jws = probes.iter().map(|w| b.matvec(a, d, d, w)).collect();
                (dz, jws)
            }
            BoundField::Mlp {
                net,
                time_dependent,
            } => {
                if *time_dependent {
                    let tv = b.constant(&[t]);
                    let input = b.concat(&[z.clone(), tv]);
                    let zero = b.constant(&[0.0]);
                    let tangents: Vec<B::V> = probes
                        .iter()
                        .map(|w| b.concat(&[w.clone(), zero.clone()]))
                        .collect();
                    net.eval_with_jvp(b, &input, &tangents)
                } else {
                    net.eval_with_jvp(b, z, probes)
                }
            }
        };
        let n = probes.len() as f64;
        let mut traces = Vec::with_capacity(probes.len());
        let mut norms = Vec::with_capacity(probes.len());
        for (w, jw) in probes.iter().zip(&jws) {
            traces.push(b.dot(w, jw));
            norms.push(b.dot(jw, jw));
        }
        let tr = b.concat(&traces);
        let tr = b.sum(&tr);
        let tr = b.scale(&tr, 1.0 / n);
        let nm = b.concat(&norms);
        let nm = b.sum(&nm);
        let nm = b.scale(&nm, 1.0 / n);
        (dz, tr, nm)
    }

    /// Integrates from `t_start` to `t_end`. The log-determinant is
    /// `∫ tr(∂g/∂z) dt` over the oriented interval, i.e. the log Jacobian
    /// determinant of the map from start to end state.
    pub(crate) fn integrate<B: Backend>(
        &self,
        b: &mut B,
        p: &Params<B>,
        z_start: &B::V,
        t_start: f64,
        t_end: f64,
        probes: &[Vec<f64>],
    ) -> Result<Integration<B::V>> {
        assert!(t_start != t_end, "integration interval must be non-empty");
        let field = self.bind(b, p);
        let probes: Vec<B::V> = probes.iter().map(|w| b.constant(w)).collect();
        let steps = match self.solver {
            Solver::Euler { steps } | Solver::Rk4 { steps } => steps,
        };
        let h = (t_end - t_start) / steps as f64;
        let mut z = z_start.clone();
        let mut ld = b.scalar(0.0);
        let mut pen = b.scalar(0.0);
        for k in 0..steps {
            let t = t_start + k as f64 * h;
            let (dz, tr, nm) = match self.solver {
                Solver::Euler { .. } => self.dynamics(b, &field, t, &z, &probes),
                Solver::Rk4 { .. } => {
                    let (k1, t1, n1) = self.dynamics(b, &field, t, &z, &probes);
                    let s = b.scale(&k1, 0.5 * h);
                    let z2 = b.add(&z, &s);
                    let (k2, t2, n2) = self.dynamics(b, &field, t + 0.5 * h, &z2, &probes);
                    let s = b.scale(&k2, 0.5 * h);
                    let z3 = b.add(&z, &s);
                    let (k3, t3, n3) = self.dynamics(b, &field, t + 0.5 * h, &z3, &probes);
                    let s = b.scale(&k3, h);
                    let z4 = b.add(&z, &s);
                    let (k4, t4, n4) = self.dynamics(b, &field, t + h, &z4, &probes);
                    let combine = |b: &mut B, a: B::V, c: B::V, e: B::V, f: B::V| {
                        let c2 = b.scale(&c, 2.0);
                        let e2 = b.scale(&e, 2.0);
                        let s = b.add(&a, &c2);
                        let s = b.add(&s, &e2);
                        let s = b.add(&s, &f);
                        b.scale(&s, 1.0 / 6.0)
                    };
                    let dz = combine(b, k1, k2, k3, k4);
                    let tr = combine(b, t1, t2, t3, t4);
                    let nm = combine(b, n1, n2, n3, n4);
                    (dz, tr, nm)
                }
            };
            let s = b.scale(&dz, h);
            z = b.add(&z, &s);
            let s = b.scale(&tr, h);
            ld = b.add(&ld, &s);
            let s = b.scale(&nm, h.abs());
            pen = b.add(&pen, &s);
            if b.value(&z).iter().any(|v| !v.is_finite()) || !b.scalar_value(&ld).is_finite() {
                return Err(Error::numerical(format!("continuous flow step {k}")));
            }
        }
        Ok(Integration {
            state: z,
            log_det: ld,
            penalty: pen,
        })
    }
}

/// Integrates a continuous layer from `t_start` to `t_end`, returning the
/// end state and the estimated log-determinant of the start-to-end map.
pub fn cnf_integrate(
    layer: &ContinuousLayer,
    params: &[f64],
    z_start: &[f64],
    t_start: f64,
    t_end: f64,
    probes: ProbeMode,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, f64)> {
    let mut b = Eager::new();
    let p = Params::<Eager>::Fixed(params);
    let z = b.constant(z_start);
    let w = draw_probes(layer.dim, probes, rng);
    let out = layer.integrate(&mut b, &p, &z, t_start, t_end, &w)?;
    Ok((out.state, out.log_det[0]))
}
