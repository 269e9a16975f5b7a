//! Normalizing flows.
//!
//! A [`FlowModel`] is a standard normal base distribution and a stack of
//! bijections. `forward` maps data to latent space (`z = f(x)`), `inverse`
//! maps latent to data, and the log density of a data point is
//! `log N(f(x)) + log|det ∂f/∂x|`.
//!
//! Every layer is written against [`Backend`], so one implementation serves
//! plain evaluation, parameter gradients (training) and input gradients
//! (preconditioned sampling).

pub mod autoregressive;
pub mod continuous;
pub mod contractive;
pub mod linear;
pub mod made;
pub mod nn;
pub mod residual;
pub mod spline;

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Backend, Eager, Tape};
use crate::error::{Error, Result};
use crate::math::{standard_normal, standard_normal_log_density};

pub use autoregressive::{AutoregressiveLayer, CouplingLayer, Transformer};
pub use continuous::{
    cnf_integrate, ContinuousLayer, Solver, VelocityField, EULER_STEPS, RK4_STEPS,
};
pub use contractive::{
    contractive_inverse, contractive_logdet, hutchinson_trace, spectral_normalize,
    ContractiveLayer, LogDetEstimator, ResidualNet, SpectralState,
};
pub use linear::{AffineLayer, Permutation};
pub use made::made_masks;
pub use nn::Params;
pub use residual::{PlanarLayer, RadialLayer, SylvesterLayer};
pub use spline::{rational_quadratic_spline, Direction};

/// How stochastic log-determinants choose their probe vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// This many standard normal probes, averaged.
    Gaussian(usize),
    /// Coordinate basis vectors, which makes trace estimates exact.
    Exact,
}

/// Probes used during training steps.
pub const TRAINING_PROBES: ProbeMode = ProbeMode::Gaussian(1);
/// Probes used when reporting densities.
pub const REPORTING_PROBES: ProbeMode = ProbeMode::Gaussian(20);

pub(crate) fn draw_probes(dim: usize, mode: ProbeMode, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
    match mode {
        // Scaled so that averaging over probes, as the estimators do, sums
        // the diagonal exactly.
        ProbeMode::Exact => (0..dim)
            .map(|i| {
                let mut e = vec![0.0; dim];
                e[i] = (dim as f64).sqrt();
                e
            })
            .collect(),
        ProbeMode::Gaussian(n) => (0..n.max(1))
            .map(|_| (0..dim).map(|_| standard_normal(rng)).collect())
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Identity,
    Affine,
    Nice,
    #[serde(rename = "realnvp")]
    RealNvp,
    CRqNsf,
    Iaf,
    IaRqNsf,
    Planar,
    Sylvester,
    Radial,
    #[serde(rename = "iresnet")]
    IResNet,
    #[serde(rename = "resflow")]
    ResFlow,
    CnfEuler,
    CnfRk,
    /// `cnf_rk` trained with a Jacobian-norm penalty.
    #[serde(rename = "cnf_rk_r")]
    CnfRkR,
}

impl Architecture {
    pub const ALL: [Architecture; 15] = [
        Architecture::Identity,
        Architecture::Affine,
        Architecture::Nice,
        Architecture::RealNvp,
        Architecture::CRqNsf,
        Architecture::Iaf,
        Architecture::IaRqNsf,
        Architecture::Planar,
        Architecture::Sylvester,
        Architecture::Radial,
        Architecture::IResNet,
        Architecture::ResFlow,
        Architecture::CnfEuler,
        Architecture::CnfRk,
        Architecture::CnfRkR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Identity => "identity",
            Architecture::Affine => "affine",
            Architecture::Nice => "nice",
            Architecture::RealNvp => "realnvp",
            Architecture::CRqNsf => "c_rq_nsf",
            Architecture::Iaf => "iaf",
            Architecture::IaRqNsf => "ia_rq_nsf",
            Architecture::Planar => "planar",
            Architecture::Sylvester => "sylvester",
            Architecture::Radial => "radial",
            Architecture::IResNet => "iresnet",
            Architecture::ResFlow => "resflow",
            Architecture::CnfEuler => "cnf_euler",
            Architecture::CnfRk => "cnf_rk",
            Architecture::CnfRkR => "cnf_rk_r",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::Spec(format!("unknown flow architecture `{name}`")))
    }

    /// Whether log-determinants are exact (no trace estimation).
    pub fn is_deterministic(self) -> bool {
        !matches!(
            self,
            Architecture::IResNet
                | Architecture::ResFlow
                | Architecture::CnfEuler
                | Architecture::CnfRk
                | Architecture::CnfRkR
        )
    }

    fn family(self) -> Family {
        match self {
            Architecture::Identity | Architecture::Affine => Family::Fixed,
            Architecture::Nice
            | Architecture::RealNvp
            | Architecture::CRqNsf
            | Architecture::Iaf
            | Architecture::IaRqNsf => Family::Autoregressive,
            Architecture::Planar
            | Architecture::Sylvester
            | Architecture::Radial
            | Architecture::IResNet
            | Architecture::ResFlow => Family::Residual,
            Architecture::CnfEuler | Architecture::CnfRk | Architecture::CnfRkR => {
                Family::Continuous
            }
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Family {
    Fixed,
    Autoregressive,
    Residual,
    Continuous,
}

/// Size choices for a flow. Unset fields take the architecture's default
/// (the first entry of its grid) when resolved.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowHyperparameters {
    /// Number of bijective layers (2, 5 or 10).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    /// Conditioner or velocity-network width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    /// Number of hidden layers in the conditioner or velocity network.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    /// Squared Jacobian-norm penalty weight for continuous flows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jacobian_penalty: Option<f64>,
    /// Fixed solver step count for continuous flows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver_steps: Option<usize>,
    /// Seeds initialization and the fixed permutations and rotations.
    #[serde(default)]
    pub seed: u64,
}

const LAYER_GRID: [usize; 3] = [2, 5, 10];
const CONDITIONER_GRID: [(usize, usize); 2] = [(10, 2), (100, 5)];
const FIELD_WIDTHS: [usize; 2] = [10, 100];
const FIELD_DEPTHS: [usize; 3] = [1, 5, 10];
/// Penalty weight used by `cnf_rk_r` unless configured.
pub const DEFAULT_JACOBIAN_PENALTY: f64 = 0.01;

impl FlowHyperparameters {
    /// Fills defaults and checks the values against the architecture's grid.
    pub fn resolve(&self, arch: Architecture) -> Result<Self> {
        let mut r = self.clone();
        let off_grid = |what: &str| Error::Spec(format!("{what} is off the grid for `{arch}`"));
        let reject = |set: bool, what: &str| -> Result<()> {
            if set {
                Err(Error::Spec(format!("`{what}` does not apply to `{arch}`")))
            } else {
                Ok(())
            }
        };
        match arch.family() {
            Family::Fixed => {
                reject(self.layers.is_some(), "layers")?;
                reject(self.hidden.is_some(), "hidden")?;
                reject(self.depth.is_some(), "depth")?;
            }
            Family::Autoregressive => {
                let layers = *r.layers.get_or_insert(2);
                let hidden = *r.hidden.get_or_insert(10);
                let depth = *r.depth.get_or_insert(if hidden == 100 { 5 } else { 2 });
                if !LAYER_GRID.contains(&layers) {
                    return Err(off_grid("layer count"));
                }
                if !CONDITIONER_GRID.contains(&(hidden, depth)) {
                    return Err(off_grid("conditioner size"));
                }
            }
            Family::Residual => {
                let layers = *r.layers.get_or_insert(2);
                if !LAYER_GRID.contains(&layers) {
                    return Err(off_grid("layer count"));
                }
                reject(self.hidden.is_some(), "hidden")?;
                reject(self.depth.is_some(), "depth")?;
            }
            Family::Continuous => {
                reject(self.layers.is_some(), "layers")?;
                let hidden = *r.hidden.get_or_insert(10);
                let depth = *r.depth.get_or_insert(1);
                if !FIELD_WIDTHS.contains(&hidden) || !FIELD_DEPTHS.contains(&depth) {
                    return Err(off_grid("velocity network size"));
                }
                let steps = *r
                    .solver_steps
                    .get_or_insert(if arch == Architecture::CnfEuler {
                        EULER_STEPS
                    } else {
                        RK4_STEPS
                    });
                if steps == 0 {
                    return Err(Error::Spec("solver_steps must be positive".into()));
                }
                let lambda = *r
                    .jacobian_penalty
                    .get_or_insert(if arch == Architecture::CnfRkR {
                        DEFAULT_JACOBIAN_PENALTY
                    } else {
                        0.0
                    });
                if !(lambda >= 0.0) || !lambda.is_finite() {
                    return Err(Error::Spec(
                        "jacobian_penalty must be finite and non-negative".into(),
                    ));
                }
            }
        }
        if arch.family() != Family::Continuous {
            reject(self.solver_steps.is_some(), "solver_steps")?;
            reject(self.jacobian_penalty.is_some(), "jacobian_penalty")?;
        }
        Ok(r)
    }

    /// Short identifier of the size choices, e.g. `L2-h10-d2`.
    pub fn id(&self) -> String {
        let mut parts = Vec::new();
        if let Some(l) = self.layers {
            parts.push(format!("L{l}"));
        }
        if let Some(h) = self.hidden {
            parts.push(format!("h{h}"));
        }
        if let Some(d) = self.depth {
            parts.push(format!("d{d}"));
        }
        if let Some(lambda) = self.jacobian_penalty {
            if lambda > 0.0 {
                parts.push(format!("r{lambda}"));
            }
        }
        if parts.is_empty() {
            "default".into()
        } else {
            parts.join("-")
        }
    }
}

/// One bijection in a flow.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Permutation(Permutation),
    Affine(AffineLayer),
    Coupling(CouplingLayer),
    Autoregressive(AutoregressiveLayer),
    Planar(PlanarLayer),
    Sylvester(SylvesterLayer),
    Radial(RadialLayer),
    Contractive(ContractiveLayer),
    Continuous(ContinuousLayer),
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Permutation(_) => 0,
            Layer::Affine(l) => l.param_count(),
            Layer::Coupling(l) => l.param_count(),
            Layer::Autoregressive(l) => l.param_count(),
            Layer::Planar(l) => l.param_count(),
            Layer::Sylvester(l) => l.param_count(),
            Layer::Radial(l) => l.param_count(),
            Layer::Contractive(l) => l.param_count(),
            Layer::Continuous(l) => l.param_count(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Layer::Contractive(_) | Layer::Continuous(_))
    }

    fn init(&mut self, params: &mut [f64], rng: &mut dyn RngCore) {
        match self {
            Layer::Permutation(_) | Layer::Affine(_) => {}
            Layer::Coupling(l) => l.net.init(params, rng),
            Layer::Autoregressive(l) => l.net.init(params, rng),
            Layer::Planar(l) => l.init(params, rng),
            Layer::Sylvester(l) => l.init(params, rng),
            Layer::Radial(l) => l.init(params, rng),
            Layer::Contractive(l) => l.init(params, rng),
            Layer::Continuous(l) => l.init(params, rng),
        }
    }
}

/// Layer recipes for assembling custom flows.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Permutation(Vec<usize>),
    Affine,
    Coupling {
        transformer: Transformer,
        hidden: usize,
        depth: usize,
    },
    Autoregressive {
        transformer: Transformer,
        hidden: usize,
        depth: usize,
    },
    Planar,
    Sylvester,
    Radial,
    Contractive(LogDetEstimator),
    ContractiveLinear {
        matrix: Vec<f64>,
        estimator: LogDetEstimator,
    },
    Continuous {
        hidden: usize,
        depth: usize,
        time_dependent: bool,
        solver: Solver,
    },
    ContinuousLinear {
        matrix: Vec<f64>,
        solver: Solver,
    },
}

/// Output of one pass through the flow on a backend.
pub struct FlowPass<V> {
    pub out: V,
    pub log_det: V,
    /// Accumulated Jacobian-norm penalty (continuous layers with a positive
    /// penalty weight only), already multiplied by the weight.
    pub penalty: Option<V>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    architecture: Option<Architecture>,
    dim: usize,
    hyperparameters: FlowHyperparameters,
    layers: Vec<Layer>,
    params: Vec<f64>,
    probes: ProbeMode,
}

/// Serialized flow: enough to rebuild the architecture and restore every
/// trainable value and spectral-normalization vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowCheckpoint {
    pub architecture: Architecture,
    pub dim: usize,
    pub hyperparameters: FlowHyperparameters,
    pub parameters: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub buffers: Vec<SpectralState>,
}

/// Builds an identity-initialized flow.
pub fn build_flow(
    architecture: Architecture,
    dim: usize,
    hyperparameters: &FlowHyperparameters,
) -> Result<FlowModel> {
    if dim == 0 {
        return Err(Error::Spec("flow dimension must be positive".into()));
    }
    let hp = hyperparameters.resolve(architecture)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let layers = hp.layers.unwrap_or(0);
    let (hidden, depth) = (hp.hidden.unwrap_or(0), hp.depth.unwrap_or(0));
    let mut specs = Vec::new();
    // A closing permutation restores the input order, so the initialized
    // composition is the identity map rather than a reordering.
    let mut stacked = |transform: &dyn Fn() -> LayerSpec, rng: &mut ChaCha8Rng| {
        let mut order: Vec<usize> = (0..dim).collect();
        for i in 0..layers {
            if i > 0 {
                let perm = Permutation::random(dim, rng).perm;
                order = perm.iter().map(|&k| order[k]).collect();
                specs.push(LayerSpec::Permutation(perm));
            }
            specs.push(transform());
        }
        if order.iter().enumerate().any(|(k, &o)| k != o) {
            let mut restore = vec![0; dim];
            for (j, &o) in order.iter().enumerate() {
                restore[o] = j;
            }
            specs.push(LayerSpec::Permutation(restore));
        }
    };
    use Architecture as A;
    match architecture {
        A::Identity => {}
        A::Affine => specs.push(LayerSpec::Affine),
        A::Nice | A::RealNvp | A::CRqNsf => {
            let transformer = match architecture {
                A::Nice => Transformer::Shift,
                A::RealNvp => Transformer::Affine,
                _ => Transformer::Spline,
            };
            stacked(
                &|| LayerSpec::Coupling {
                    transformer,
                    hidden,
                    depth,
                },
                &mut rng,
            );
        }
        A::Iaf | A::IaRqNsf => {
            let transformer = if architecture == A::Iaf {
                Transformer::Affine
            } else {
                Transformer::Spline
            };
            stacked(
                &|| LayerSpec::Autoregressive {
                    transformer,
                    hidden,
                    depth,
                },
                &mut rng,
            );
        }
        A::Planar => specs.extend(std::iter::repeat_n(LayerSpec::Planar, layers)),
        A::Sylvester => specs.extend(std::iter::repeat_n(LayerSpec::Sylvester, layers)),
        A::Radial => specs.extend(std::iter::repeat_n(LayerSpec::Radial, layers)),
        A::IResNet => specs.extend(std::iter::repeat_n(
            LayerSpec::Contractive(LogDetEstimator::PowerSeries {
                terms: contractive::POWER_SERIES_TERMS,
            }),
            layers,
        )),
        A::ResFlow => specs.extend(std::iter::repeat_n(
            LayerSpec::Contractive(LogDetEstimator::Roulette {
                p: contractive::ROULETTE_P,
            }),
            layers,
        )),
        A::CnfEuler | A::CnfRk | A::CnfRkR => {
            let steps = hp.solver_steps.unwrap_or(RK4_STEPS);
            specs.push(LayerSpec::Continuous {
                hidden,
                depth,
                time_dependent: architecture != A::CnfEuler,
                solver: if architecture == A::CnfEuler {
                    Solver::Euler { steps }
                } else {
                    Solver::Rk4 { steps }
                },
            });
        }
    }
    let mut flow = FlowModel::assemble(dim, &specs, &mut rng)?;
    for layer in &mut flow.layers {
        if let Layer::Continuous(c) = layer {
            c.penalty_weight = hp.jacobian_penalty.unwrap_or(0.0);
        }
    }
    flow.architecture = Some(architecture);
    flow.hyperparameters = hp;
    Ok(flow)
}

impl FlowModel {
    fn assemble(dim: usize, specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for spec in specs {
            let layer = match spec {
                LayerSpec::Permutation(p) => {
                    let mut sorted = p.clone();
                    sorted.sort_unstable();
                    if sorted != (0..dim).collect::<Vec<_>>() {
                        return Err(Error::Spec("permutation must reorder 0..dim".into()));
                    }
                    Layer::Permutation(Permutation::new(p.clone()))
                }
                LayerSpec::Affine => Layer::Affine(AffineLayer::new(dim, offset)),
                LayerSpec::Coupling {
                    transformer,
                    hidden,
                    depth,
                } => Layer::Coupling(CouplingLayer::new(
                    dim,
                    *transformer,
                    *hidden,
                    *depth,
                    offset,
                )),
                LayerSpec::Autoregressive {
                    transformer,
                    hidden,
                    depth,
                } => Layer::Autoregressive(AutoregressiveLayer::new(
                    dim,
                    *transformer,
                    *hidden,
                    *depth,
                    offset,
                )),
                LayerSpec::Planar => Layer::Planar(PlanarLayer { dim, offset }),
                LayerSpec::Sylvester => {
                    Layer::Sylvester(SylvesterLayer::new(dim, offset, rng.next_u64()))
                }
                LayerSpec::Radial => Layer::Radial(RadialLayer { dim, offset }),
                LayerSpec::Contractive(est) => {
                    Layer::Contractive(ContractiveLayer::new(dim, *est, offset))
                }
                LayerSpec::ContractiveLinear { matrix, estimator } => {
                    Layer::Contractive(ContractiveLayer::linear(dim, matrix.clone(), *estimator))
                }
                LayerSpec::Continuous {
                    hidden,
                    depth,
                    time_dependent,
                    solver,
                } => Layer::Continuous(ContinuousLayer::new(
                    dim,
                    *hidden,
                    *depth,
                    *time_dependent,
                    *solver,
                    offset,
                )),
                LayerSpec::ContinuousLinear { matrix, solver } => {
                    Layer::Continuous(ContinuousLayer::linear(dim, matrix.clone(), *solver))
                }
            };
            offset += layer.param_count();
            layers.push(layer);
        }
        let mut params = vec![0.0; offset];
        for layer in &mut layers {
            layer.init(&mut params, rng);
        }
        Ok(Self {
            architecture: None,
            dim,
            hyperparameters: FlowHyperparameters::default(),
            layers,
            params,
            probes: REPORTING_PROBES,
        })
    }

    /// A custom composition; not checkpointable.
    pub fn from_layers(dim: usize, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Spec("flow dimension must be positive".into()));
        }
        Self::assemble(dim, specs, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// The flow with no layers: `f = id`.
    pub fn identity(dim: usize) -> Self {
        build_flow(Architecture::Identity, dim, &FlowHyperparameters::default())
            .expect("identity flow is always valid")
    }

    /// `x = L z + shift` for lower-triangular `L` (row-major) with positive
    /// diagonal.
    pub fn affine(dim: usize, shift: &[f64], lower: &[f64]) -> Result<Self> {
        if shift.len() != dim || lower.len() != dim * dim {
            return Err(Error::Spec(
                "affine flow needs a dim shift and a dim x dim matrix".into(),
            ));
        }
        for i in 0..dim {
            if !(lower[i * dim + i] > 0.0) {
                return Err(Error::Spec("affine flow diagonal must be positive".into()));
            }
            for j in i + 1..dim {
                if lower[i * dim + j] != 0.0 {
                    return Err(Error::Spec(
                        "affine flow matrix must be lower triangular".into(),
                    ));
                }
            }
        }
        let mut flow = build_flow(Architecture::Affine, dim, &FlowHyperparameters::default())?;
        flow.params = AffineLayer::encode(dim, shift, lower);
        Ok(flow)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn architecture(&self) -> Option<Architecture> {
        self.architecture
    }

    pub fn hyperparameters(&self) -> &FlowHyperparameters {
        &self.hyperparameters
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Input(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("flow parameters must be finite".into()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// True when every log-determinant is exact.
    pub fn is_deterministic(&self) -> bool {
        self.layers.iter().all(Layer::is_deterministic)
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn probes(&self) -> ProbeMode {
        self.probes
    }

    /// Probe setting used by the plain-value methods.
    pub fn set_probes(&mut self, probes: ProbeMode) {
        self.probes = probes;
    }

    /// Advances spectral-normalization power iterations on all contractive
    /// layers.
    pub fn update_spectral(&mut self, iterations: usize) {
        for layer in &mut self.layers {
            if let Layer::Contractive(c) = layer {
                c.update_spectral(&self.params, iterations);
            }
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Input(format!(
                "point has length {}, flow dimension is {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("point has non-finite coordinates".into()));
        }
        Ok(())
    }

    fn finish<B: Backend>(b: &B, y: &B::V, ld: &B::V, i: usize) -> Result<()> {
        if b.value(y).iter().any(|v| !v.is_finite()) || !b.scalar_value(ld).is_finite() {
            return Err(Error::numerical(format!("flow layer {i}")));
        }
        Ok(())
    }

    /// Data to latent on a backend.
    pub fn record_forward<B: Backend>(
        &self,
        b: &mut B,
        p: &Params<B>,
        x: &B::V,
        probes: ProbeMode,
        rng: &mut dyn RngCore,
    ) -> Result<FlowPass<B::V>> {
        let mut h = x.clone();
        let mut ld = b.scalar(0.0);
        let mut penalty: Option<B::V> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, l) = match layer {
                Layer::Permutation(perm) => {
                    let y = perm.forward(b, &h);
                    (y, b.scalar(0.0))
                }
                Layer::Affine(a) => a.forward(b, p, &h),
                Layer::Coupling(c) => c.apply(b, p, &h, Direction::Forward),
                Layer::Autoregressive(a) => a.forward(b, p, &h),
                Layer::Planar(l) => l.forward(b, p, &h),
                Layer::Sylvester(l) => l.forward(b, p, &h),
                Layer::Radial(l) => l.forward(b, p, &h),
                Layer::Contractive(c) => c.forward(b, p, &h, probes, rng),
                Layer::Continuous(c) => {
                    let w = draw_probes(self.dim, probes, rng);
                    let out = c.integrate(b, p, &h, 1.0, 0.0, &w)?;
                    add_penalty(b, &mut penalty, c, &out.penalty);
                    (out.state, out.log_det)
                }
            };
            Self::finish(b, &y, &l, i)?;
            ld = b.add(&ld, &l);
            h = y;
        }
        Ok(FlowPass {
            out: h,
            log_det: ld,
            penalty,
        })
    }

    /// Latent to data on a backend. `log_det` is `log|det ∂f⁻¹/∂z|`.
    pub fn record_inverse<B: Backend>(
        &self,
        b: &mut B,
        p: &Params<B>,
        z: &B::V,
        probes: ProbeMode,
        rng: &mut dyn RngCore,
    ) -> Result<FlowPass<B::V>> {
        let mut h = z.clone();
        let mut ld = b.scalar(0.0);
        let mut penalty: Option<B::V> = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (y, l) = match layer {
                Layer::Permutation(perm) => {
                    let y = perm.inverse(b, &h);
                    (y, b.scalar(0.0))
                }
                Layer::Affine(a) => a.inverse(b, p, &h),
                Layer::Coupling(c) => c.apply(b, p, &h, Direction::Inverse),
                Layer::Autoregressive(a) => a.inverse(b, p, &h),
                Layer::Planar(l) => l.inverse(b, p, &h)?,
                Layer::Sylvester(l) => l.inverse(b, p, &h)?,
                Layer::Radial(l) => l.inverse(b, p, &h),
                Layer::Contractive(c) => c.inverse(b, p, &h, probes, rng)?,
                Layer::Continuous(c) => {
                    let w = draw_probes(self.dim, probes, rng);
                    let out = c.integrate(b, p, &h, 0.0, 1.0, &w)?;
                    add_penalty(b, &mut penalty, c, &out.penalty);
                    (out.state, out.log_det)
                }
            };
            Self::finish(b, &y, &l, i)?;
            ld = b.add(&ld, &l);
            h = y;
        }
        Ok(FlowPass {
            out: h,
            log_det: ld,
            penalty,
        })
    }

    /// `(z, log|det ∂f/∂x|)`.
    pub fn forward(&self, x: &[f64], rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64)> {
        self.check_point(x)?;
        let mut b = Eager::new();
        let p = Params::Fixed(&self.params);
        let xv = b.constant(x);
        let pass = self.record_forward(&mut b, &p, &xv, self.probes, rng)?;
        Ok((pass.out, pass.log_det[0]))
    }

    /// `(x, log|det ∂f⁻¹/∂z|)`.
    pub fn inverse(&self, z: &[f64], rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64)> {
        self.check_point(z)?;
        let mut b = Eager::new();
        let p = Params::Fixed(&self.params);
        let zv = b.constant(z);
        let pass = self.record_inverse(&mut b, &p, &zv, self.probes, rng)?;
        Ok((pass.out, pass.log_det[0]))
    }

    /// `log N(f(x)) + log|det ∂f/∂x|`; an estimate when the flow is not
    /// deterministic (see [`FlowModel::is_deterministic`]).
    pub fn log_density(&self, x: &[f64], rng: &mut dyn RngCore) -> Result<f64> {
        let (z, ld) = self.forward(x, rng)?;
        Ok(standard_normal_log_density(&z) + ld)
    }

    /// Log density at `x` and its gradient with respect to the flow
    /// parameters.
    pub fn log_density_parameter_gradient(
        &self,
        x: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_point(x)?;
        let mut b = Tape::new();
        let theta = b.input(&self.params);
        let p = Params::Recorded(theta);
        let xv = b.constant(x);
        let pass = self.record_forward(&mut b, &p, &xv, self.probes, rng)?;
        let lp = record_base_log_density(&mut b, &pass.out);
        let total = b.add(&lp, &pass.log_det);
        let value = b.scalar_value(&total);
        let grads = b.backward(total)?;
        Ok((value, grads.wrt(theta)))
    }

    /// `n` draws `x = f⁻¹(z)` with their log densities.
    pub fn sample(&self, rng: &mut dyn RngCore, n: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        if n == 0 {
            return Err(Error::Input("sample count must be at least 1".into()));
        }
        let mut xs = Vec::with_capacity(n);
        let mut lps = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, lq) = self.sample_one(rng)?;
            xs.push(x);
            lps.push(lq);
        }
        Ok((xs, lps))
    }

    pub fn sample_one(&self, rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64)> {
        let z: Vec<f64> = (0..self.dim).map(|_| standard_normal(rng)).collect();
        let (x, ld) = self.inverse(&z, rng)?;
        Ok((x, standard_normal_log_density(&z) - ld))
    }

    pub fn checkpoint(&self) -> Result<FlowCheckpoint> {
        let architecture = self.architecture.ok_or_else(|| {
            Error::Spec("custom layer compositions cannot be checkpointed".into())
        })?;
        let buffers = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Contractive(c) => Some(c.spectral.clone()),
                _ => None,
            })
            .flatten()
            .collect();
        Ok(FlowCheckpoint {
            architecture,
            dim: self.dim,
            hyperparameters: self.hyperparameters.clone(),
            parameters: self.params.clone(),
            buffers,
        })
    }

    pub fn from_checkpoint(ck: &FlowCheckpoint) -> Result<Self> {
        let mut flow = build_flow(ck.architecture, ck.dim, &ck.hyperparameters)?;
        flow.set_parameters(&ck.parameters)?;
        let mut buffers = ck.buffers.iter();
        for layer in &mut flow.layers {
            if let Layer::Contractive(c) = layer {
                for slot in c.spectral.iter_mut() {
                    let state = buffers.next().ok_or_else(|| {
                        Error::Spec("checkpoint is missing spectral buffers".into())
                    })?;
                    if state.u.len() != slot.u.len() || state.v.len() != slot.v.len() {
                        return Err(Error::Spec("spectral buffer has the wrong size".into()));
                    }
                    *slot = state.clone();
                }
            }
        }
        if buffers.next().is_some() {
            return Err(Error::Spec("checkpoint has extra spectral buffers".into()));
        }
        Ok(flow)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.checkpoint()?)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: FlowCheckpoint = serde_json::from_str(text)
            .map_err(|e| Error::Spec(format!("malformed checkpoint: {e}")))?;
        Self::from_checkpoint(&ck)
    }
}

fn add_penalty<B: Backend>(b: &mut B, acc: &mut Option<B::V>, c: &ContinuousLayer, pen: &B::V) {
    if c.penalty_weight > 0.0 {
        let w = b.scale(pen, c.penalty_weight);
        *acc = Some(match acc.take() {
            None => w,
            Some(a) => b.add(&a, &w),
        });
    }
}

/// Standard normal log density of a recorded point.
pub fn record_base_log_density<B: Backend>(b: &mut B, z: &B::V) -> B::V {
    let n = b.len(z) as f64;
    let sq = b.dot(z, z);
    let half = b.scale(&sq, -0.5);
    b.shift(&half, -0.5 * n * crate::math::LN_2PI)
}
