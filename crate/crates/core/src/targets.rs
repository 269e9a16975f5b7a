//! Benchmark target distributions.
//!
//! Every family provides a hand-derived log density and gradient for the hot
//! sampling loops, and a [`Backend`] recording of the same density which the
//! tests use as a gradient oracle and which training uses to differentiate
//! through flow parameters. Constrained parameters of the real-world
//! posteriors are sampled through softplus links with their Jacobian terms
//! included, so every target lives on unconstrained space.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{Backend, ScalarField};
use crate::error::{Error, Result};
use crate::math::{
    adaptive_simpson, log_sigmoid, logsumexp, sigmoid, softplus, standard_normal_log_density,
    LN_2PI, LN_GAMMA_HALF,
};

/// Unnormalized log density with gradient. This is the interface samplers
/// consume; it does not validate its inputs.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
    /// Writes the gradient into `grad` and returns the log density.
    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianKind {
    Standard,
    Diagonal,
    FullRank,
    IllConditioned,
}

/// Zero-mean Gaussian with covariance `Q diag(eigenvalues) Qᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSpec {
    pub dim: usize,
    pub kind: GaussianKind,
    pub eigenvalues: Vec<f64>,
    pub rotation_seed: u64,
}

impl GaussianSpec {
    /// Generates the spec for one of the benchmark Gaussians. Diagonal
    /// Gaussians have standard deviations linearly spaced in [1, 10], full-rank
    /// ones eigenvalues linearly spaced in [1, 10], and ill-conditioned ones
    /// eigenvalue reciprocals drawn from Gamma(0.5, rate 1).
    pub fn new(kind: GaussianKind, dim: usize, rotation_seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Spec("Gaussian dimension must be positive".into()));
        }
        let linspace = |lo: f64, hi: f64| -> Vec<f64> {
            if dim == 1 {
                return vec![lo];
            }
            (0..dim)
                .map(|i| lo + (hi - lo) * i as f64 / (dim - 1) as f64)
                .collect()
        };
        let eigenvalues = match kind {
            GaussianKind::Standard => vec![1.0; dim],
            GaussianKind::Diagonal => linspace(1.0, 10.0).into_iter().map(|s| s * s).collect(),
            GaussianKind::FullRank => linspace(1.0, 10.0),
            GaussianKind::IllConditioned => ill_conditioned_eigenvalues(dim, rotation_seed),
        };
        Ok(Self {
            dim,
            kind,
            eigenvalues,
            rotation_seed,
        })
    }

    pub fn condition_number(&self) -> f64 {
        let max = self.eigenvalues.iter().copied().fold(f64::MIN, f64::max);
        let min = self.eigenvalues.iter().copied().fold(f64::MAX, f64::min);
        max / min
    }
}

/// Eigenvalues whose reciprocals are Gamma(0.5, 1) draws. For dimensions of
/// 100 or more the draw is repeated (on a derived stream) until the condition
/// number exceeds 10³.
fn ill_conditioned_eigenvalues(dim: usize, seed: u64) -> Vec<f64> {
    let gamma = Gamma::new(0.5, 1.0).expect("valid gamma parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    loop {
        let eig: Vec<f64> = (0..dim)
            .map(|_| {
                let g: f64 = gamma.sample(&mut rng);
                1.0 / g.max(f64::MIN_POSITIVE)
            })
            .collect();
        let max = eig.iter().copied().fold(f64::MIN, f64::max);
        let min = eig.iter().copied().fold(f64::MAX, f64::min);
        if dim < 100 || max / min > 1e3 {
            return eig;
        }
    }
}

/// Orthonormal matrix from the QR decomposition of a seeded standard normal
/// matrix, with column signs fixed by `diag(R)` and the last column flipped if
/// needed so that `det Q = 1`. Row-major.
pub fn random_rotation(dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 1, "rotation dimension must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let (mut q, r) = qr.unpack();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(dim - 1).neg_mut();
    }
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            out[i * dim + j] = q[(i, j)];
        }
    }
    out
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    /// One row per component.
    pub component_means: Vec<Vec<f64>>,
    /// One isotropic standard deviation per component.
    pub component_stds: Vec<f64>,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    /// Three components at -5, 0 and 5 in every coordinate, std 0.7, equal
    /// weights.
    pub fn three_component(dim: usize) -> Self {
        Self {
            component_means: [-5.0, 0.0, 5.0].iter().map(|&m| vec![m; dim]).collect(),
            component_stds: vec![0.7; 3],
            weights: vec![1.0 / 3.0; 3],
        }
    }

    /// Means drawn from N(0, 10²), unit stds, weights softmax of N(0, 1)
    /// draws.
    pub fn random(dim: usize, components: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let component_means = (0..components)
            .map(|_| {
                (0..dim)
                    .map(|_| 10.0 * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let logits: Vec<f64> = (0..components)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let lse = logsumexp(&logits);
        Self {
            component_means,
            component_stds: vec![1.0; components],
            weights: logits.iter().map(|l| (l - lse).exp()).collect(),
        }
    }

    fn validate(&self) -> Result<usize> {
        let k = self.weights.len();
        if k == 0 || self.component_means.len() != k || self.component_stds.len() != k {
            return Err(Error::Spec(
                "mixture needs matching, non-empty means, stds and weights".into(),
            ));
        }
        let dim = self.component_means[0].len();
        if dim == 0 || self.component_means.iter().any(|m| m.len() != dim) {
            return Err(Error::Spec(
                "mixture means must share a positive dimension".into(),
            ));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Spec("mixture weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Spec(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        if self.component_stds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Spec("mixture stds must be positive".into()));
        }
        Ok(dim)
    }
}

/// A column of a posterior dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Values(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorDataset {
    pub name: String,
    pub columns: BTreeMap<String, Column>,
}

impl PosteriorDataset {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("malformed dataset: {e}")))
    }

    /// Reads and validates a dataset file. Which columns are required
    /// depends on the model consuming it; the checks here cover shapes that
    /// are wrong for every model (ragged matrices, non-finite entries).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let ds = Self::from_json(&text)?;
        for (name, col) in &ds.columns {
            match col {
                Column::Values(v) => {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Data(format!(
                            "column `{name}` has non-finite values"
                        )));
                    }
                }
                Column::Matrix(rows) => {
                    let width = rows.first().map_or(0, Vec::len);
                    if rows.iter().any(|r| r.len() != width) {
                        return Err(Error::Data(format!("column `{name}` is ragged")));
                    }
                    if rows.iter().flatten().any(|x| !x.is_finite()) {
                        return Err(Error::Data(format!(
                            "column `{name}` has non-finite values"
                        )));
                    }
                }
            }
        }
        Ok(ds)
    }

    fn values(&self, name: &str) -> Result<&[f64]> {
        match self.columns.get(name) {
            Some(Column::Values(v)) => Ok(v),
            Some(Column::Matrix(_)) => Err(Error::Data(format!(
                "column `{name}` of `{}` must be a flat array",
                self.name
            ))),
            None => Err(Error::Data(format!(
                "dataset `{}` is missing column `{name}`",
                self.name
            ))),
        }
    }

    fn matrix(&self, name: &str) -> Result<(Vec<f64>, usize, usize)> {
        match self.columns.get(name) {
            Some(Column::Matrix(rows)) => {
                let n = rows.len();
                let p = rows.first().map_or(0, Vec::len);
                if n == 0 || p == 0 {
                    return Err(Error::Data(format!("matrix column `{name}` is empty")));
                }
                if rows.iter().any(|r| r.len() != p) {
                    return Err(Error::Data(format!("column `{name}` is ragged")));
                }
                Ok((rows.iter().flatten().copied().collect(), n, p))
            }
            Some(Column::Values(_)) => Err(Error::Data(format!(
                "column `{name}` of `{}` must be an array of rows",
                self.name
            ))),
            None => Err(Error::Data(format!(
                "dataset `{}` is missing column `{name}`",
                self.name
            ))),
        }
    }
}

/// Second moments and variances per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceMoments {
    pub second_moment: Vec<f64>,
    pub variance: Vec<f64>,
}

impl ReferenceMoments {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("malformed reference file: {e}")))?;
        if m.second_moment.len() != m.variance.len() {
            return Err(Error::Data("reference vectors differ in length".into()));
        }
        if m.variance.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Data("reference variances must be positive".into()));
        }
        Ok(m)
    }
}

/// Target selection as it appears in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    Gaussian {
        kind: GaussianKind,
        dim: usize,
        #[serde(default)]
        rotation_seed: u64,
    },
    Funnel {
        dim: usize,
        #[serde(default = "default_funnel_scale")]
        scale: f64,
    },
    Rosenbrock {
        dim: usize,
        #[serde(default = "default_rosenbrock_scale")]
        scale: f64,
    },
    ThreeComponentMixture {
        dim: usize,
    },
    RandomMixture {
        dim: usize,
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default)]
        seed: u64,
    },
    Mixture(MixtureSpec),
    DoubleWell {
        dim: usize,
    },
    EightSchools {
        dataset: String,
        #[serde(default)]
        reference: Option<String>,
    },
    GermanCredit {
        dataset: String,
        #[serde(default)]
        reference: Option<String>,
    },
    SparseGermanCredit {
        dataset: String,
        #[serde(default)]
        reference: Option<String>,
    },
}

fn default_funnel_scale() -> f64 {
    3.0
}
fn default_rosenbrock_scale() -> f64 {
    10.0
}
fn default_components() -> usize {
    20
}

impl TargetSpec {
    pub fn is_posterior(&self) -> bool {
        matches!(
            self,
            TargetSpec::EightSchools { .. }
                | TargetSpec::GermanCredit { .. }
                | TargetSpec::SparseGermanCredit { .. }
        )
    }

    pub fn dataset_path(&self) -> Option<&str> {
        match self {
            TargetSpec::EightSchools { dataset, .. }
            | TargetSpec::GermanCredit { dataset, .. }
            | TargetSpec::SparseGermanCredit { dataset, .. } => Some(dataset),
            _ => None,
        }
    }

    pub fn reference_path(&self) -> Option<&str> {
        match self {
            TargetSpec::EightSchools { reference, .. }
            | TargetSpec::GermanCredit { reference, .. }
            | TargetSpec::SparseGermanCredit { reference, .. } => reference.as_deref(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
struct DenseGaussian {
    /// Row-major precision matrix.
    precision: Vec<f64>,
    log_normalizer: f64,
}

#[derive(Clone, Debug)]
struct Credit {
    x: Vec<f64>,
    n: usize,
    p: usize,
    y: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Model {
    StandardGaussian { dim: usize },
    DiagonalGaussian { variances: Vec<f64> },
    DenseGaussian(DenseGaussian),
    Funnel { dim: usize, scale: f64 },
    Rosenbrock { dim: usize, scale: f64 },
    Mixture(MixtureSpec),
    DoubleWell,
    EightSchools { y: Vec<f64>, sigma: Vec<f64> },
    GermanCredit(Credit),
    SparseGermanCredit(Credit),
}

/// A benchmark target: dimension, log density, gradient and (when known)
/// reference moments. Immutable once built.
#[derive(Clone, Debug)]
pub struct TargetDistribution {
    name: String,
    family: &'static str,
    dim: usize,
    model: Model,
    gaussian: Option<GaussianSpec>,
    reference: Option<ReferenceMoments>,
}

/// Builds a target from its spec. `dataset` must be present exactly for the
/// real-world posteriors.
pub fn build_target(
    spec: &TargetSpec,
    dataset: Option<&PosteriorDataset>,
) -> Result<TargetDistribution> {
    match (spec.is_posterior(), dataset.is_some()) {
        (true, false) => {
            return Err(Error::Data("posterior target requires a dataset".into()));
        }
        (false, true) => {
            return Err(Error::Spec("synthetic targets take no dataset".into()));
        }
        _ => {}
    }
    let positive_dim = |dim: usize| -> Result<usize> {
        if dim == 0 {
            Err(Error::Spec("target dimension must be positive".into()))
        } else {
            Ok(dim)
        }
    };
    let mut gaussian = None;
    let (name, family, dim, model) = match spec {
        TargetSpec::Gaussian {
            kind,
            dim,
            rotation_seed,
        } => {
            let g = GaussianSpec::new(*kind, positive_dim(*dim)?, *rotation_seed)?;
            let name = format!("gaussian_{}_{dim}", kind_name(*kind));
            let model = gaussian_model(&g);
            gaussian = Some(g);
            (name, "gaussian", *dim, model)
        }
        TargetSpec::Funnel { dim, scale } => {
            if *dim < 2 || !(*scale > 0.0) {
                return Err(Error::Spec(
                    "funnel needs dim >= 2 and a positive scale".into(),
                ));
            }
            (
                format!("funnel_{dim}"),
                "non_gaussian",
                *dim,
                Model::Funnel {
                    dim: *dim,
                    scale: *scale,
                },
            )
        }
        TargetSpec::Rosenbrock { dim, scale } => {
            if *dim == 0 || dim % 2 != 0 {
                return Err(Error::Spec(format!(
                    "Rosenbrock dimension must be even and positive, got {dim}"
                )));
            }
            if !(*scale > 0.0) {
                return Err(Error::Spec("Rosenbrock scale must be positive".into()));
            }
            (
                format!("rosenbrock_{dim}"),
                "non_gaussian",
                *dim,
                Model::Rosenbrock {
                    dim: *dim,
                    scale: *scale,
                },
            )
        }
        TargetSpec::ThreeComponentMixture { dim } => (
            format!("mixture3_{dim}"),
            "multimodal",
            positive_dim(*dim)?,
            Model::Mixture(MixtureSpec::three_component(*dim)),
        ),
        TargetSpec::RandomMixture {
            dim,
            components,
            seed,
        } => {
            if *components == 0 {
                return Err(Error::Spec("mixture needs at least one component".into()));
            }
            (
                format!("mixture{components}_{dim}"),
                "multimodal",
                positive_dim(*dim)?,
                Model::Mixture(MixtureSpec::random(*dim, *components, *seed)),
            )
        }
        TargetSpec::Mixture(m) => {
            let dim = m.validate()?;
            (
                format!("mixture{}_{dim}", m.weights.len()),
                "multimodal",
                dim,
                Model::Mixture(m.clone()),
            )
        }
        TargetSpec::DoubleWell { dim } => (
            format!("double_well_{dim}"),
            "multimodal",
            positive_dim(*dim)?,
            Model::DoubleWell,
        ),
        TargetSpec::EightSchools { .. } => {
            let ds = dataset.expect("checked above");
            let y = ds.values("y")?.to_vec();
            let sigma = ds.values("sigma")?.to_vec();
            if y.is_empty() || y.len() != sigma.len() {
                return Err(Error::Data(
                    "eight schools columns `y` and `sigma` must have equal, positive length".into(),
                ));
            }
            if sigma.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Data("eight schools `sigma` must be positive".into()));
            }
            let dim = 2 + y.len();
            (
                "eight_schools".to_string(),
                "real_world",
                dim,
                Model::EightSchools { y, sigma },
            )
        }
        TargetSpec::GermanCredit { .. } | TargetSpec::SparseGermanCredit { .. } => {
            let ds = dataset.expect("checked above");
            let (x, n, p) = ds.matrix("x")?;
            let y = ds.values("y")?.to_vec();
            if y.len() != n {
                return Err(Error::Data(format!(
                    "German credit has {n} feature rows but {} labels",
                    y.len()
                )));
            }
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data("German credit labels must be 0 or 1".into()));
            }
            let credit = Credit { x, n, p, y };
            if matches!(spec, TargetSpec::GermanCredit { .. }) {
                (
                    "german_credit".to_string(),
                    "real_world",
                    1 + p,
                    Model::GermanCredit(credit),
                )
            } else {
                (
                    "sparse_german_credit".to_string(),
                    "real_world",
                    1 + 2 * p,
                    Model::SparseGermanCredit(credit),
                )
            }
        }
    };
    Ok(TargetDistribution {
        name,
        family,
        dim,
        model,
        gaussian,
        reference: None,
    })
}

fn kind_name(kind: GaussianKind) -> &'static str {
    match kind {
        GaussianKind::Standard => "standard",
        GaussianKind::Diagonal => "diagonal",
        GaussianKind::FullRank => "full_rank",
        GaussianKind::IllConditioned => "ill_conditioned",
    }
}

fn gaussian_model(g: &GaussianSpec) -> Model {
    match g.kind {
        GaussianKind::Standard => Model::StandardGaussian { dim: g.dim },
        GaussianKind::Diagonal => Model::DiagonalGaussian {
            variances: g.eigenvalues.clone(),
        },
        GaussianKind::FullRank | GaussianKind::IllConditioned => {
            let d = g.dim;
            let q = random_rotation(d, g.rotation_seed);
            let mut precision = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    precision[i * d + j] = (0..d)
                        .map(|k| q[i * d + k] * q[j * d + k] / g.eigenvalues[k])
                        .sum();
                }
            }
            let log_det_cov: f64 = g.eigenvalues.iter().map(|l| l.ln()).sum();
            Model::DenseGaussian(DenseGaussian {
                precision,
                log_normalizer: -0.5 * log_det_cov - 0.5 * d as f64 * LN_2PI,
            })
        }
    }
}

impl TargetDistribution {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// One of `gaussian`, `non_gaussian`, `multimodal`, `real_world`.
    pub fn family(&self) -> &str {
        self.family
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn gaussian_spec(&self) -> Option<&GaussianSpec> {
        self.gaussian.as_ref()
    }

    /// Covariance of a Gaussian target (row-major).
    pub fn covariance(&self) -> Option<Vec<f64>> {
        let g = self.gaussian.as_ref()?;
        let d = g.dim;
        let mut cov = vec![0.0; d * d];
        match g.kind {
            GaussianKind::Standard | GaussianKind::Diagonal => {
                for i in 0..d {
                    cov[i * d + i] = g.eigenvalues[i];
                }
            }
            GaussianKind::FullRank | GaussianKind::IllConditioned => {
                let q = random_rotation(d, g.rotation_seed);
                for i in 0..d {
                    for j in 0..d {
                        cov[i * d + j] = (0..d)
                            .map(|k| q[i * d + k] * q[j * d + k] * g.eigenvalues[k])
                            .sum();
                    }
                }
            }
        }
        Some(cov)
    }

    /// Attaches moments from a long reference run.
    pub fn with_reference(mut self, reference: ReferenceMoments) -> Result<Self> {
        if reference.second_moment.len() != self.dim || reference.variance.len() != self.dim {
            return Err(Error::Data(format!(
                "reference moments have length {}, target dimension is {}",
                reference.second_moment.len(),
                self.dim
            )));
        }
        if reference.variance.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Data("reference variances must be positive".into()));
        }
        self.reference = Some(reference);
        Ok(self)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Input(format!(
                "point has length {}, target dimension is {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("point has non-finite coordinates".into()));
        }
        Ok(())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(LogDensity::log_density(self, x))
    }

    pub fn grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut g = vec![0.0; self.dim];
        self.log_density_and_gradient(x, &mut g);
        Ok(g)
    }

    /// Closed-form or attached reference moments as
    /// `(second_moment, variance)`.
    pub fn reference_moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if let Some(r) = &self.reference {
            return Ok((r.second_moment.clone(), r.variance.clone()));
        }
        let d = self.dim;
        match &self.model {
            Model::StandardGaussian { .. } => Ok((vec![1.0; d], vec![1.0; d])),
            Model::DiagonalGaussian { variances } => Ok((variances.clone(), variances.clone())),
            Model::DenseGaussian(_) => {
                let cov = self.covariance().expect("dense Gaussian has a spec");
                let diag: Vec<f64> = (0..d).map(|i| cov[i * d + i]).collect();
                Ok((diag.clone(), diag))
            }
            Model::Funnel { scale, .. } => {
                let s2 = scale * scale;
                let tail = (0.5 * s2).exp();
                let mut v = vec![tail; d];
                v[0] = s2;
                Ok((v.clone(), v))
            }
            Model::Rosenbrock { scale, .. } => {
                // x ~ N(1, 1/2) and y | x ~ N(x², 1/(2s)) for each pair.
                let (mut second, mut var) = (vec![0.0; d], vec![0.0; d]);
                for k in 0..d / 2 {
                    second[2 * k] = 1.5;
                    var[2 * k] = 0.5;
                    second[2 * k + 1] = 4.75 + 0.5 / scale;
                    var[2 * k + 1] = 2.5 + 0.5 / scale;
                }
                Ok((second, var))
            }
            Model::Mixture(m) => {
                let mut second = vec![0.0; d];
                let mut mean = vec![0.0; d];
                for ((mu, s), w) in m
                    .component_means
                    .iter()
                    .zip(&m.component_stds)
                    .zip(&m.weights)
                {
                    for j in 0..d {
                        second[j] += w * (mu[j] * mu[j] + s * s);
                        mean[j] += w * mu[j];
                    }
                }
                let var = second.iter().zip(&mean).map(|(s, m)| s - m * m).collect();
                Ok((second, var))
            }
            Model::DoubleWell => {
                let m2 = double_well_second_moment();
                Ok((vec![m2; d], vec![m2; d]))
            }
            _ => Err(Error::MomentsUnavailable(self.name.clone())),
        }
    }

    /// Records the log density on a backend. Used for gradient checks and for
    /// differentiating through flow parameters during training.
    pub fn record<B: Backend>(&self, b: &mut B, x: &B::V) -> B::V {
        match &self.model {
            Model::StandardGaussian { dim } => {
                let sq = b.square(x);
                let s = b.sum(&sq);
                let h = b.scale(&s, -0.5);
                b.shift(&h, -0.5 * *dim as f64 * LN_2PI)
            }
            Model::DiagonalGaussian { variances } => {
                let inv: Vec<f64> = variances.iter().map(|v| -0.5 / v).collect();
                let inv = b.constant(&inv);
                let sq = b.square(x);
                let w = b.mul(&sq, &inv);
                let s = b.sum(&w);
                b.shift(&s, diagonal_normalizer(variances))
            }
            Model::DenseGaussian(g) => {
                let d = self.dim;
                let p = b.constant(&g.precision);
                let px = b.matvec(&p, d, d, x);
                let q = b.dot(x, &px);
                let h = b.scale(&q, -0.5);
                b.shift(&h, g.log_normalizer)
            }
            Model::Funnel { dim, scale } => {
                let x1 = b.slice(x, 0, 1);
                let rest = b.slice(x, 1, dim - 1);
                let sq1 = b.square(&x1);
                let head = b.scale(&sq1, -0.5 / (scale * scale));
                let sq = b.square(&rest);
                let s = b.sum(&sq);
                let nx1 = b.neg(&x1);
                let inv_var = b.exp(&nx1);
                let quad = b.mul(&s, &inv_var);
                let quad = b.scale(&quad, -0.5);
                let logstd = b.scale(&x1, -0.5 * (*dim - 1) as f64);
                let total = b.add(&head, &quad);
                let total = b.add(&total, &logstd);
                b.shift(&total, -scale.ln() - 0.5 * *dim as f64 * LN_2PI)
            }
            Model::Rosenbrock { dim, scale } => {
                let odd: Vec<usize> = (0..dim / 2).map(|k| 2 * k).collect();
                let even: Vec<usize> = (0..dim / 2).map(|k| 2 * k + 1).collect();
                let u = b.gather(x, &odd);
                let v = b.gather(x, &even);
                let u2 = b.square(&u);
                let diff = b.sub(&u2, &v);
                let d2 = b.square(&diff);
                let a = b.scale(&d2, *scale);
                let um1 = b.shift(&u, -1.0);
                let c = b.square(&um1);
                let t = b.add(&a, &c);
                let s = b.sum(&t);
                b.neg(&s)
            }
            Model::Mixture(m) => {
                let mut parts = Vec::new();
                for ((mu, sd), w) in m
                    .component_means
                    .iter()
                    .zip(&m.component_stds)
                    .zip(&m.weights)
                {
                    if *w <= 0.0 {
                        continue;
                    }
                    let muv = b.constant(mu);
                    let dlt = b.sub(x, &muv);
                    let sq = b.square(&dlt);
                    let s = b.sum(&sq);
                    let h = b.scale(&s, -0.5 / (sd * sd));
                    let c = w.ln() - mu.len() as f64 * (sd.ln() + 0.5 * LN_2PI);
                    parts.push(b.shift(&h, c));
                }
                let all = b.concat(&parts);
                b.logsumexp(&all)
            }
            Model::DoubleWell => {
                let sq = b.square(x);
                let m4 = b.shift(&sq, -4.0);
                let q = b.square(&m4);
                let s = b.sum(&q);
                b.neg(&s)
            }
            Model::EightSchools { y, sigma } => {
                let n = y.len();
                let mu = b.slice(x, 0, 1);
                let tt = b.slice(x, 1, 1);
                let th = b.slice(x, 2, n);
                let tau = b.softplus(&tt);
                let mu2 = b.square(&mu);
                let prior_mu = b.scale(&mu2, -0.5 / 100.0);
                let log_tau = b.log(&tau);
                let lt5 = b.shift(&log_tau, -5.0);
                let lt5sq = b.square(&lt5);
                let lt5sq = b.scale(&lt5sq, -0.5);
                let prior_tau = b.sub(&lt5sq, &log_tau);
                let jac = b.log_sigmoid(&tt);
                let th2 = b.square(&th);
                let th2s = b.sum(&th2);
                let prior_th = b.scale(&th2s, -0.5);
                let scaled = b.mul(&th, &tau);
                let theta = b.add(&scaled, &mu);
                let yv = b.constant(y);
                let res = b.sub(&yv, &theta);
                let res2 = b.square(&res);
                let inv: Vec<f64> = sigma.iter().map(|s| -0.5 / (s * s)).collect();
                let inv = b.constant(&inv);
                let ll = b.mul(&res2, &inv);
                let ll = b.sum(&ll);
                let mut total = b.add(&prior_mu, &prior_tau);
                for term in [&jac, &prior_th, &ll] {
                    total = b.add(&total, term);
                }
                b.shift(&total, eight_schools_constant(sigma))
            }
            Model::GermanCredit(c) => {
                let tt = b.slice(x, 0, 1);
                let beta = b.slice(x, 1, c.p);
                let tau = b.softplus(&tt);
                let prior = gamma_half_prior(b, &tau);
                let jac = b.log_sigmoid(&tt);
                let beta_prior = standard_normal_recorded(b, &beta);
                let xm = b.constant(&c.x);
                let xb = b.matvec(&xm, c.n, c.p, &beta);
                let eta = b.mul(&xb, &tau);
                let ll = bernoulli_logit_recorded(b, &eta, &c.y);
                let t = b.add(&prior, &jac);
                let t = b.add(&t, &beta_prior);
                b.add(&t, &ll)
            }
            Model::SparseGermanCredit(c) => {
                let tt = b.slice(x, 0, 1);
                let lt = b.slice(x, 1, c.p);
                let beta = b.slice(x, 1 + c.p, c.p);
                let tau = b.softplus(&tt);
                let lam = b.softplus(&lt);
                let prior_tau = gamma_half_prior(b, &tau);
                let prior_lam = gamma_half_prior(b, &lam);
                let jac_tau = b.log_sigmoid(&tt);
                let jac_lam = b.log_sigmoid(&lt);
                let jac_lam = b.sum(&jac_lam);
                let beta_prior = standard_normal_recorded(b, &beta);
                let bl = b.mul(&beta, &lam);
                let xm = b.constant(&c.x);
                let xb = b.matvec(&xm, c.n, c.p, &bl);
                let eta = b.mul(&xb, &tau);
                let ll = bernoulli_logit_recorded(b, &eta, &c.y);
                let mut t = b.add(&prior_tau, &prior_lam);
                for term in [&jac_tau, &jac_lam, &beta_prior, &ll] {
                    t = b.add(&t, term);
                }
                t
            }
        }
    }
}

impl ScalarField for TargetDistribution {
    fn eval<B: Backend>(&self, b: &mut B, x: &B::V) -> B::V {
        self.record(b, x)
    }
}

fn diagonal_normalizer(variances: &[f64]) -> f64 {
    -0.5 * variances.iter().map(|v| v.ln()).sum::<f64>() - 0.5 * variances.len() as f64 * LN_2PI
}

/// Constant terms of the eight schools log density.
fn eight_schools_constant(sigma: &[f64]) -> f64 {
    let n = sigma.len() as f64;
    // N(0, 10) on mu, LogNormal normalizer, N(0, 1) on each theta', N(theta, sigma) likelihood.
    -(10f64).ln() - 0.5 * LN_2PI - 0.5 * LN_2PI - n * 0.5 * LN_2PI
        + sigma.iter().map(|s| -s.ln() - 0.5 * LN_2PI).sum::<f64>()
}

/// Summed Gamma(0.5, rate 0.5) log density over the entries of `v`.
fn gamma_half_prior<B: Backend>(b: &mut B, v: &B::V) -> B::V {
    let n = b.len(v) as f64;
    let l = b.log(v);
    let t = b.scale(&l, -0.5);
    let u = b.scale(v, -0.5);
    let s = b.add(&t, &u);
    let s = b.sum(&s);
    b.shift(&s, n * gamma_half_constant())
}

fn gamma_half_constant() -> f64 {
    0.5 * 0.5f64.ln() - LN_GAMMA_HALF
}

fn standard_normal_recorded<B: Backend>(b: &mut B, v: &B::V) -> B::V {
    let n = b.len(v) as f64;
    let sq = b.square(v);
    let s = b.sum(&sq);
    let h = b.scale(&s, -0.5);
    b.shift(&h, -0.5 * n * LN_2PI)
}

/// Σ y η − softplus(η).
fn bernoulli_logit_recorded<B: Backend>(b: &mut B, eta: &B::V, y: &[f64]) -> B::V {
    let yv = b.constant(y);
    let ye = b.dot(&yv, eta);
    let sp = b.softplus(eta);
    let s = b.sum(&sp);
    b.sub(&ye, &s)
}

fn double_well_second_moment() -> f64 {
    let density = |x: f64| (-(x * x - 4.0).powi(2)).exp();
    let z = adaptive_simpson(&density, 0.0, 5.0, 1e-14);
    let m = adaptive_simpson(&|x: f64| x * x * density(x), 0.0, 5.0, 1e-14);
    m / z
}

fn credit_likelihood(c: &Credit, coef: &[f64], tau: f64, resid: &mut [f64]) -> (f64, Vec<f64>) {
    // Returns (log likelihood, x·coef per row) and writes y - sigmoid(eta).
    let mut ll = 0.0;
    let mut xb = vec![0.0; c.n];
    for j in 0..c.n {
        let row = &c.x[j * c.p..(j + 1) * c.p];
        let dot: f64 = row.iter().zip(coef).map(|(a, b)| a * b).sum();
        let eta = tau * dot;
        ll += c.y[j] * eta - softplus(eta);
        resid[j] = c.y[j] - sigmoid(eta);
        xb[j] = dot;
    }
    (ll, xb)
}

impl LogDensity for TargetDistribution {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        match &self.model {
            Model::StandardGaussian { .. } => standard_normal_log_density(x),
            Model::DiagonalGaussian { variances } => {
                let q: f64 = x.iter().zip(variances).map(|(v, s)| v * v / s).sum();
                -0.5 * q + diagonal_normalizer(variances)
            }
            Model::DenseGaussian(g) => {
                let d = self.dim;
                let mut q = 0.0;
                for i in 0..d {
                    let row = &g.precision[i * d..(i + 1) * d];
                    q += x[i] * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
                -0.5 * q + g.log_normalizer
            }
            _ => {
                let mut g = vec![0.0; self.dim];
                self.log_density_and_gradient(x, &mut g)
            }
        }
    }

    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match &self.model {
            Model::StandardGaussian { .. } => {
                for (g, v) in grad.iter_mut().zip(x) {
                    *g = -v;
                }
                standard_normal_log_density(x)
            }
            Model::DiagonalGaussian { variances } => {
                for ((g, v), s) in grad.iter_mut().zip(x).zip(variances) {
                    *g = -v / s;
                }
                LogDensity::log_density(self, x)
            }
            Model::DenseGaussian(gs) => {
                let d = self.dim;
                let mut q = 0.0;
                for i in 0..d {
                    let row = &gs.precision[i * d..(i + 1) * d];
                    let px: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                    grad[i] = -px;
                    q += x[i] * px;
                }
                -0.5 * q + gs.log_normalizer
            }
            Model::Funnel { dim, scale } => {
                let x1 = x[0];
                let inv_var = (-x1).exp();
                let s: f64 = x[1..].iter().map(|v| v * v).sum();
                grad[0] = -x1 / (scale * scale) + 0.5 * s * inv_var - 0.5 * (*dim - 1) as f64;
                for i in 1..*dim {
                    grad[i] = -x[i] * inv_var;
                }
                -0.5 * x1 * x1 / (scale * scale)
                    - 0.5 * s * inv_var
                    - 0.5 * (*dim - 1) as f64 * x1
                    - scale.ln()
                    - 0.5 * *dim as f64 * LN_2PI
            }
            Model::Rosenbrock { dim, scale } => {
                let mut lp = 0.0;
                for k in 0..dim / 2 {
                    let (u, v) = (x[2 * k], x[2 * k + 1]);
                    let diff = u * u - v;
                    lp -= scale * diff * diff + (u - 1.0) * (u - 1.0);
                    grad[2 * k] = -4.0 * scale * u * diff - 2.0 * (u - 1.0);
                    grad[2 * k + 1] = 2.0 * scale * diff;
                }
                lp
            }
            Model::Mixture(m) => {
                let mut logs = Vec::with_capacity(m.weights.len());
                let mut idx = Vec::with_capacity(m.weights.len());
                for (k, ((mu, sd), w)) in m
                    .component_means
                    .iter()
                    .zip(&m.component_stds)
                    .zip(&m.weights)
                    .enumerate()
                {
                    if *w <= 0.0 {
                        continue;
                    }
                    let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                    logs.push(
                        w.ln() - 0.5 * sq / (sd * sd) - mu.len() as f64 * (sd.ln() + 0.5 * LN_2PI),
                    );
                    idx.push(k);
                }
                let lse = logsumexp(&logs);
                grad.iter_mut().for_each(|g| *g = 0.0);
                for (l, &k) in logs.iter().zip(&idx) {
                    let r = (l - lse).exp();
                    let (mu, sd) = (&m.component_means[k], m.component_stds[k]);
                    for j in 0..x.len() {
                        grad[j] -= r * (x[j] - mu[j]) / (sd * sd);
                    }
                }
                lse
            }
            Model::DoubleWell => {
                let mut lp = 0.0;
                for (g, &v) in grad.iter_mut().zip(x) {
                    let a = v * v - 4.0;
                    lp -= a * a;
                    *g = -4.0 * v * a;
                }
                lp
            }
            Model::EightSchools { y, sigma } => {
                let n = y.len();
                let (mu, tt) = (x[0], x[1]);
                let th = &x[2..2 + n];
                let tau = softplus(tt);
                let log_tau = tau.ln();
                let mut lp = -mu * mu / 200.0 - log_tau - 0.5 * (log_tau - 5.0).powi(2)
                    + log_sigmoid(tt)
                    + eight_schools_constant(sigma);
                let mut dmu = -mu / 100.0;
                let mut dtau = -1.0 / tau - (log_tau - 5.0) / tau;
                for i in 0..n {
                    let theta = mu + tau * th[i];
                    let r = (y[i] - theta) / (sigma[i] * sigma[i]);
                    lp +=
                        -0.5 * th[i] * th[i] - 0.5 * (y[i] - theta).powi(2) / (sigma[i] * sigma[i]);
                    dmu += r;
                    dtau += th[i] * r;
                    grad[2 + i] = -th[i] + tau * r;
                }
                grad[0] = dmu;
                grad[1] = dtau * sigmoid(tt) + sigmoid(-tt);
                lp
            }
            Model::GermanCredit(c) => {
                let tt = x[0];
                let beta = &x[1..1 + c.p];
                let tau = softplus(tt);
                let mut resid = vec![0.0; c.n];
                let (ll, xb) = credit_likelihood(c, beta, tau, &mut resid);
                let lp = ll + gamma_half_constant() - 0.5 * tau.ln() - 0.5 * tau
                    + log_sigmoid(tt)
                    + standard_normal_log_density(beta);
                let dtau =
                    -0.5 / tau - 0.5 + resid.iter().zip(&xb).map(|(r, v)| r * v).sum::<f64>();
                grad[0] = dtau * sigmoid(tt) + sigmoid(-tt);
                for k in 0..c.p {
                    let s: f64 = (0..c.n).map(|j| resid[j] * c.x[j * c.p + k]).sum();
                    grad[1 + k] = -beta[k] + tau * s;
                }
                lp
            }
            Model::SparseGermanCredit(c) => {
                let p = c.p;
                let tt = x[0];
                let lt = &x[1..1 + p];
                let beta = &x[1 + p..1 + 2 * p];
                let tau = softplus(tt);
                let lam: Vec<f64> = lt.iter().map(|&v| softplus(v)).collect();
                let coef: Vec<f64> = beta.iter().zip(&lam).map(|(b, l)| b * l).collect();
                let mut resid = vec![0.0; c.n];
                let (ll, xb) = credit_likelihood(c, &coef, tau, &mut resid);
                let mut lp = ll + gamma_half_constant() - 0.5 * tau.ln() - 0.5 * tau
                    + log_sigmoid(tt)
                    + standard_normal_log_density(beta);
                let dtau =
                    -0.5 / tau - 0.5 + resid.iter().zip(&xb).map(|(r, v)| r * v).sum::<f64>();
                grad[0] = dtau * sigmoid(tt) + sigmoid(-tt);
                for k in 0..p {
                    lp += gamma_half_constant() - 0.5 * lam[k].ln() - 0.5 * lam[k]
                        + log_sigmoid(lt[k]);
                    let s: f64 = (0..c.n).map(|j| resid[j] * c.x[j * p + k]).sum();
                    let dlam = -0.5 / lam[k] - 0.5 + tau * beta[k] * s;
                    grad[1 + k] = dlam * sigmoid(lt[k]) + sigmoid(-lt[k]);
                    grad[1 + p + k] = -beta[k] + tau * lam[k] * s;
                }
                lp
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::check_gradient;

    fn gaussian(kind: GaussianKind, dim: usize) -> TargetDistribution {
        build_target(
            &TargetSpec::Gaussian {
                kind,
                dim,
                rotation_seed: 7,
            },
            None,
        )
        .unwrap()
    }

    #[test]
    fn standard_gaussian_reference_is_unit() {
        let t = gaussian(GaussianKind::Standard, 100);
        let (m2, var) = t.reference_moments().unwrap();
        assert!(m2.iter().chain(&var).all(|&v| v == 1.0));
    }

    #[test]
    fn standard_gaussian_log_density_at_origin() {
        let t = gaussian(GaussianKind::Standard, 5);
        let v = t.log_density(&[0.0; 5]).unwrap();
        assert!((v + 2.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert_eq!(
            t.grad_log_density(&[1.0, -2.0, 0.0, 0.5, 3.0]).unwrap(),
            vec![-1.0, 2.0, -0.0, -0.5, -3.0]
        );
    }

    #[test]
    fn diagonal_second_moments_are_squared_stds() {
        let t = gaussian(GaussianKind::Diagonal, 100);
        let (m2, _) = t.reference_moments().unwrap();
        for (i, v) in m2.iter().enumerate() {
            let sd = 1.0 + 9.0 * i as f64 / 99.0;
            assert!((v - sd * sd).abs() < 1e-12);
        }
    }

    #[test]
    fn rosenbrock_mode_and_parity() {
        let t = build_target(
            &TargetSpec::Rosenbrock {
                dim: 4,
                scale: 10.0,
            },
            None,
        )
        .unwrap();
        assert_eq!(t.log_density(&[1.0; 4]).unwrap(), 0.0);
        assert!(matches!(
            build_target(
                &TargetSpec::Rosenbrock {
                    dim: 3,
                    scale: 10.0
                },
                None
            ),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn double_well_stationary_at_two() {
        let t = build_target(&TargetSpec::DoubleWell { dim: 10 }, None).unwrap();
        assert_eq!(t.log_density(&[2.0; 10]).unwrap(), 0.0);
        assert!(t
            .grad_log_density(&[2.0; 10])
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn three_component_mixture_moments() {
        let t = build_target(&TargetSpec::ThreeComponentMixture { dim: 4 }, None).unwrap();
        let (m2, _) = t.reference_moments().unwrap();
        let expected = (25.0 + 0.0 + 25.0) / 3.0 + 0.49;
        assert!(m2.iter().all(|v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn mixture_log_density_finite_far_away() {
        let t = build_target(&TargetSpec::ThreeComponentMixture { dim: 3 }, None).unwrap();
        let v = t.log_density(&[1e3, -1e3, 5e2]).unwrap();
        assert!(v.is_finite());
        assert!(t
            .grad_log_density(&[1e3, -1e3, 5e2])
            .unwrap()
            .iter()
            .all(|g| g.is_finite()));
    }

    #[test]
    fn mixture_weights_must_sum_to_one() {
        let spec = MixtureSpec {
            component_means: vec![vec![0.0], vec![1.0]],
            component_stds: vec![1.0, 1.0],
            weights: vec![0.5, 0.6],
        };
        assert!(matches!(
            build_target(&TargetSpec::Mixture(spec), None),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn rotation_is_orthonormal_with_unit_determinant() {
        for (dim, seed) in [(1, 0), (2, 3), (7, 11), (30, 5)] {
            let q = random_rotation(dim, seed);
            for i in 0..dim {
                for j in 0..dim {
                    let dot: f64 = (0..dim).map(|k| q[i * dim + k] * q[j * dim + k]).sum();
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expected).abs() < 1e-10);
                }
            }
            let m = DMatrix::from_row_slice(dim, dim, &q);
            assert!((m.determinant() - 1.0).abs() < 1e-8);
            assert_eq!(q, random_rotation(dim, seed));
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let t = gaussian(GaussianKind::Standard, 2);
        assert!(matches!(
            t.log_density(&[f64::NAN, 0.0]),
            Err(Error::Input(_))
        ));
        assert!(matches!(t.grad_log_density(&[0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn eight_schools_dimension_and_gradient() {
        let ds =
            PosteriorDataset::from_json(include_str!("../../../data/eight_schools.json")).unwrap();
        let t = build_target(
            &TargetSpec::EightSchools {
                dataset: String::new(),
                reference: None,
            },
            Some(&ds),
        )
        .unwrap();
        assert_eq!(t.dimension(), 10);
        let x = [1.0, 0.3, -0.5, 0.2, 1.1, -0.7, 0.0, 0.4, -1.2, 0.9];
        assert!(check_gradient(&t, &x, 1e-5) < 1e-5);
        let analytic = t.log_density(&x).unwrap();
        let recorded = crate::diff::value(&t, &x);
        assert!((analytic - recorded).abs() < 1e-10);
    }

    #[test]
    fn missing_dataset_is_data_error() {
        let spec = TargetSpec::GermanCredit {
            dataset: "x".into(),
            reference: None,
        };
        assert!(matches!(build_target(&spec, None), Err(Error::Data(_))));
    }

    #[test]
    fn unknown_family_is_rejected() {
        let r: std::result::Result<TargetSpec, _> =
            serde_json::from_str(r#"{"family": "radon", "dim": 3}"#);
        assert!(r.is_err());
    }
}
