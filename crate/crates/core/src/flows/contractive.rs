//! Contractive residual layers `y = x + g(x)` with `Lip(g) < 1`:
//! spectral normalization, stochastic log-determinant series and
//! fixed-point inversion.

use crate::math::standard_normal;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::nn::{MlpLayout, Params};
use super::{draw_probes, ProbeMode};
use crate::diff::{Backend, Eager};
use crate::error::{Error, Result};

pub const SPECTRAL_COEFFICIENT: f64 = 0.9;
pub const POWER_SERIES_TERMS: usize = 30;
pub const ROULETTE_P: f64 = 0.5;
pub const FIXED_POINT_TOLERANCE: f64 = 1e-10;
pub const FIXED_POINT_MAX_ITERATIONS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogDetEstimator {
    /// Truncated series `Σ_{k≤n} (-1)^{k+1}/k tr(J^k)`.
    PowerSeries { terms: usize },
    /// Randomly truncated series with `N ~ Geometric(p)` on `{1, 2, ...}`
    /// and term `k` reweighted by `1 / P(N ≥ k)`.
    Roulette { p: f64 },
}

/// Persistent power-iteration vectors for one weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl SpectralState {
    pub fn random(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Self {
        let mut draw = |n: usize| {
            let mut x: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
            normalize(&mut x);
            x
        };
        let u = draw(rows);
        let v = draw(cols);
        Self { u, v }
    }

    /// Runs power iterations on `w` (row-major `rows x cols`) and returns the
    /// estimate `uᵀ W v` of the top singular value. A zero matrix leaves the
    /// vectors untouched.
    pub fn iterate(&mut self, w: &[f64], rows: usize, cols: usize, iterations: usize) -> f64 {
        for _ in 0..iterations {
            let mut v = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    v[c] += w[r * cols + c] * self.u[r];
                }
            }
            if !normalize(&mut v) {
                break;
            }
            let mut u = matvec(w, rows, cols, &v);
            if !normalize(&mut u) {
                break;
            }
            self.u = u;
            self.v = v;
        }
        self.sigma(w, rows, cols)
    }

    pub fn sigma(&self, w: &[f64], rows: usize, cols: usize) -> f64 {
        let wv = matvec(w, rows, cols, &self.v);
        wv.iter().zip(&self.u).map(|(a, b)| a * b).sum()
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum())
        .collect()
}

fn normalize(x: &mut [f64]) -> bool {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return false;
    }
    x.iter_mut().for_each(|v| *v /= n);
    true
}

/// `W · min(1, coefficient / σ̂)` where `σ̂` comes from power iteration with
/// the persistent vectors in `state`.
pub fn spectral_normalize(
    weights: &[f64],
    rows: usize,
    cols: usize,
    state: &mut SpectralState,
    iterations: usize,
    coefficient: f64,
) -> Vec<f64> {
    assert!(iterations >= 1, "at least one power iteration");
    let sigma = state.iterate(weights, rows, cols, iterations);
    if sigma > coefficient {
        weights.iter().map(|w| w * coefficient / sigma).collect()
    } else {
        weights.to_vec()
    }
}

/// Scales a recorded weight matrix using fixed power-iteration vectors; the
/// scale is differentiated through `uᵀ W v` as in standard spectral
/// normalization.
fn normalized_weight<B: Backend>(
    b: &mut B,
    w: B::V,
    rows: usize,
    cols: usize,
    state: &SpectralState,
    coefficient: f64,
) -> B::V {
    let sigma = state.sigma(b.value(&w), rows, cols);
    if !(sigma > coefficient) {
        return w;
    }
    let v = b.constant(&state.v);
    let u = b.constant(&state.u);
    let wv = b.matvec(&w, rows, cols, &v);
    let s = b.dot(&u, &wv);
    let c = b.scalar(coefficient);
    let f = b.div(&c, &s);
    b.mul(&w, &f)
}

/// Hutchinson estimate `(1/n) Σ wᵀ (J w)` with standard normal probes.
pub fn hutchinson_trace(
    jvp: impl Fn(&[f64]) -> Vec<f64>,
    dim: usize,
    probes: usize,
    rng: &mut dyn RngCore,
) -> f64 {
    assert!(probes >= 1, "at least one probe");
    let mut total = 0.0;
    for _ in 0..probes {
        let w: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let jw = jvp(&w);
        total += w.iter().zip(&jw).map(|(a, b)| a * b).sum::<f64>();
    }
    total / probes as f64
}

#[derive(Clone, Debug, PartialEq)]
pub enum ResidualNet {
    /// One tanh hidden layer, both weight matrices spectrally normalized.
    Mlp(MlpLayout),
    /// Fixed linear map `g(x) = A x` (row-major `A`), no parameters.
    Linear(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContractiveLayer {
    pub dim: usize,
    pub net: ResidualNet,
    pub estimator: LogDetEstimator,
    pub coefficient: f64,
    pub spectral: Vec<SpectralState>,
}

/// Hidden width `3 · max(⌈log₁₀ d⌉, 4)`.
pub fn contractive_hidden_width(dim: usize) -> usize {
    let l = (dim as f64).log10().ceil().max(0.0) as usize;
    3 * l.max(4)
}

enum Bound<V> {
    Mlp {
        w1: V,
        b1: V,
        w2: V,
        b2: V,
        h: usize,
    },
    Linear(V),
}

/// Jacobian of `g` at a fixed point of evaluation.
enum Jacobian<V> {
    Mlp { w1: V, w2: V, slope: V, h: usize },
    Linear(V),
}

impl ContractiveLayer {
    pub fn new(dim: usize, estimator: LogDetEstimator, offset: usize) -> Self {
        let h = contractive_hidden_width(dim);
        Self {
            dim,
            net: ResidualNet::Mlp(MlpLayout::new(dim, h, 1, dim, offset)),
            estimator,
            coefficient: SPECTRAL_COEFFICIENT,
            spectral: Vec::new(),
        }
    }

    /// Parameter-free layer with `g(x) = A x`. The caller is responsible for
    /// `‖A‖ < 1`.
    pub fn linear(dim: usize, matrix: Vec<f64>, estimator: LogDetEstimator) -> Self {
        assert_eq!(matrix.len(), dim * dim, "matrix must be dim x dim");
        Self {
            dim,
            net: ResidualNet::Linear(matrix),
            estimator,
            coefficient: SPECTRAL_COEFFICIENT,
            spectral: Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.net {
            ResidualNet::Mlp(l) => l.param_count(),
            ResidualNet::Linear(_) => 0,
        }
    }

    pub fn init(&mut self, params: &mut [f64], rng: &mut dyn RngCore) {
        if let ResidualNet::Mlp(layout) = &self.net {
            layout.init(params, rng);
            let h = layout.sizes[1];
            self.spectral = vec![
                SpectralState::random(h, self.dim, rng),
                SpectralState::random(self.dim, h, rng),
            ];
            self.update_spectral(params, 50);
        }
    }

    /// Advances the persistent power iterations on the current weights.
    pub fn update_spectral(&mut self, params: &[f64], iterations: usize) {
        if let ResidualNet::Mlp(layout) = &self.net {
            let h = layout.sizes[1];
            let d = self.dim;
            let (w1, _) = layout.layer_offsets(0);
            let (w2, _) = layout.layer_offsets(1);
            self.spectral[0].iterate(&params[w1..w1 + h * d], h, d, iterations);
            self.spectral[1].iterate(&params[w2..w2 + d * h], d, h, iterations);
        }
    }

    fn bind<B: Backend>(&self, b: &mut B, p: &Params<B>) -> Bound<B::V> {
        match &self.net {
            ResidualNet::Linear(a) => Bound::Linear(b.constant(a)),
            ResidualNet::Mlp(layout) => {
                let d = self.dim;
                let h = layout.sizes[1];
                let (w1o, b1o) = layout.layer_offsets(0);
                let (w2o, b2o) = layout.layer_offsets(1);
                let w1 = p.get(b, w1o, h * d);
                let w1 = normalized_weight(b, w1, h, d, &self.spectral[0], self.coefficient);
                let w2 = p.get(b, w2o, d * h);
                let w2 = normalized_weight(b, w2, d, h, &self.spectral[1], self.coefficient);
                let b1 = p.get(b, b1o, h);
                let b2 = p.get(b, b2o, d);
                Bound::Mlp { w1, b1, w2, b2, h }
            }
        }
    }

    fn residual<B: Backend>(&self, b: &mut B, net: &Bound<B::V>, x: &B::V) -> B::V {
        let d = self.dim;
        match net {
            Bound::Linear(a) => b.matvec(a, d, d, x),
            Bound::Mlp { w1, b1, w2, b2, h } => {
                let pre = b.affine(w1, b1, *h, d, x);
                let act = b.tanh(&pre);
                b.affine(w2, b2, d, *h, &act)
            }
        }
    }

    fn jacobian<B: Backend>(&self, b: &mut B, net: &Bound<B::V>, x: &B::V) -> Jacobian<B::V> {
        let d = self.dim;
        match net {
            Bound::Linear(a) => Jacobian::Linear(a.clone()),
            Bound::Mlp { w1, b1, w2, h, .. } => {
                let pre = b.affine(w1, b1, *h, d, x);
                let act = b.tanh(&pre);
                let sq = b.square(&act);
                let one = b.scalar(1.0);
                let slope = b.sub(&one, &sq);
                Jacobian::Mlp {
                    w1: w1.clone(),
                    w2: w2.clone(),
                    slope,
                    h: *h,
                }
            }
        }
    }

    fn apply_jacobian<B: Backend>(&self, b: &mut B, jac: &Jacobian<B::V>, v: &B::V) -> B::V {
        let d = self.dim;
        match jac {
            Jacobian::Linear(a) => b.matvec(a, d, d, v),
            Jacobian::Mlp { w1, w2, slope, h } => {
                let t = b.matvec(w1, *h, d, v);
                let t = b.mul(slope, &t);
                b.matvec(w2, d, *h, &t)
            }
        }
    }

    /// Stochastic estimate of `log |det (I + ∂g/∂x)|` at `x`.
    fn log_det<B: Backend>(
        &self,
        b: &mut B,
        net: &Bound<B::V>,
        x: &B::V,
        probes: &[Vec<f64>],
        rng: &mut dyn RngCore,
    ) -> B::V {
        let jac = self.jacobian(b, net, x);
        let terms = match self.estimator {
            LogDetEstimator::PowerSeries { terms } => terms,
            LogDetEstimator::Roulette { p } => {
                let mut n = 1;
                while rng.random::<f64>() >= p {
                    n += 1;
                }
                n
            }
        };
        let mut per_probe = Vec::with_capacity(probes.len());
        for w in probes {
            let wv = b.constant(w);
            let mut v = wv.clone();
            let mut acc: Option<B::V> = None;
            for k in 1..=terms {
                v = self.apply_jacobian(b, &jac, &v);
                let mut coef = if k % 2 == 1 { 1.0 } else { -1.0 } / k as f64;
                if let LogDetEstimator::Roulette { p } = self.estimator {
                    coef /= (1.0 - p).powi(k as i32 - 1);
                }
                let t = b.dot(&wv, &v);
                let t = b.scale(&t, coef);
                acc = Some(match acc {
                    None => t,
                    Some(a) => b.add(&a, &t),
                });
            }
            per_probe.push(acc.unwrap_or_else(|| b.scalar(0.0)));
        }
        let all = b.concat(&per_probe);
        let s = b.sum(&all);
        b.scale(&s, 1.0 / probes.len() as f64)
    }

    /// Data to latent.
    pub(crate) fn forward<B: Backend>(
        &self,
        b: &mut B,
        p: &Params<B>,
        x: &B::V,
        probes: ProbeMode,
        rng: &mut dyn RngCore,
    ) -> (B::V, B::V) {
        let net = self.bind(b, p);
        let g = self.residual(b, &net, x);
        let y = b.add(x, &g);
        let w = draw_probes(self.dim, probes, rng);
        let ld = self.log_det(b, &net, x, &w, rng);
        (y, ld)
    }

    /// Latent to data by fixed-point iteration. Every iteration is recorded,
    /// so gradients are those of the computed approximation.
    pub(crate) fn inverse<B: Backend>(
        &self,
        b: &mut B,
        p: &Params<B>,
        y: &B::V,
        probes: ProbeMode,
        rng: &mut dyn RngCore,
    ) -> Result<(B::V, B::V)> {
        let net = self.bind(b, p);
        let (x, _) = self.fixed_point(
            b,
            &net,
            y,
            FIXED_POINT_TOLERANCE,
            FIXED_POINT_MAX_ITERATIONS,
        )?;
        let w = draw_probes(self.dim, probes, rng);
        let ld = self.log_det(b, &net, &x, &w, rng);
        Ok((x, b.neg(&ld)))
    }

    fn fixed_point<B: Backend>(
        &self,
        b: &mut B,
        net: &Bound<B::V>,
        y: &B::V,
        tolerance: f64,
        max_iterations: usize,
    ) -> Result<(B::V, Vec<f64>)> {
        let mut x = y.clone();
        let mut residuals = Vec::new();
        for _ in 0..max_iterations {
            let g = self.residual(b, net, &x);
            let next = b.sub(y, &g);
            let res = b
                .value(&next)
                .iter()
                .zip(b.value(&x))
                .map(|(a, c)| (a - c).abs())
                .fold(0.0, f64::max);
            x = next;
            residuals.push(res);
            if !res.is_finite() {
                break;
            }
            if res < tolerance {
                return Ok((x, residuals));
            }
        }
        Err(Error::Convergence {
            iterations: residuals.len(),
            residual: residuals.last().copied().unwrap_or(f64::INFINITY),
        })
    }

    fn eager_params<'a>(&self, params: &'a [f64]) -> Params<'a, Eager> {
        Params::Fixed(params)
    }
}

/// Log-determinant estimate of a contractive layer at `x` with the given
/// probes. `params` is the parameter vector the layer indexes into.
pub fn contractive_logdet(
    layer: &ContractiveLayer,
    params: &[f64],
    x: &[f64],
    probes: ProbeMode,
    rng: &mut dyn RngCore,
) -> f64 {
    let mut b = Eager::new();
    let p = layer.eager_params(params);
    let net = layer.bind(&mut b, &p);
    let xv = b.constant(x);
    let w = draw_probes(layer.dim, probes, rng);
    let ld = layer.log_det(&mut b, &net, &xv, &w, rng);
    ld[0]
}

/// Inverts `y = x + g(x)` by iterating `x ← y - g(x)` from `x = y` until
/// successive iterates differ by less than `tolerance` in max norm. Returns
/// the point and the residual after each iteration.
pub fn contractive_inverse(
    layer: &ContractiveLayer,
    params: &[f64],
    y: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    assert!(tolerance > 0.0, "tolerance must be positive");
    let mut b = Eager::new();
    let p = layer.eager_params(params);
    let net = layer.bind(&mut b, &p);
    let yv = b.constant(y);
    layer.fixed_point(&mut b, &net, &yv, tolerance, max_iterations)
}

/// Applies `g` alone.
pub fn contractive_residual(layer: &ContractiveLayer, params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut b = Eager::new();
    let p = layer.eager_params(params);
    let net = layer.bind(&mut b, &p);
    let xv = b.constant(x);
    layer.residual(&mut b, &net, &xv)
}

/// The spectrally normalized weight matrices `(Ŵ₁, Ŵ₂)` of an MLP layer as
/// they are used in evaluation.
pub fn normalized_weights(
    layer: &ContractiveLayer,
    params: &[f64],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut b = Eager::new();
    let p = layer.eager_params(params);
    match layer.bind(&mut b, &p) {
        Bound::Mlp { w1, w2, .. } => Some((w1, w2)),
        Bound::Linear(_) => None,
    }
}
