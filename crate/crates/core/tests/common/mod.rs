#![allow(dead_code)]

use nalgebra::DMatrix;
use nfmc::flows::{build_flow, Architecture, FlowHyperparameters, FlowModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Central-difference Jacobian, row `i` = ∂f_i/∂x.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = x.len();
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

pub fn log_abs_det(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant().abs().ln()
}

/// Every architecture that a deterministic log-determinant applies to.
pub const DETERMINISTIC: [Architecture; 9] = [
    Architecture::Affine,
    Architecture::Nice,
    Architecture::RealNvp,
    Architecture::CRqNsf,
    Architecture::Iaf,
    Architecture::IaRqNsf,
    Architecture::Planar,
    Architecture::Sylvester,
    Architecture::Radial,
];

/// A flow of the given architecture with its parameters moved away from the
/// identity initialization.
pub fn random_flow(arch: Architecture, dim: usize, seed: u64, scale: f64) -> FlowModel {
    let hp = FlowHyperparameters {
        seed,
        ..Default::default()
    };
    let mut flow = build_flow(arch, dim, &hp).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let p: Vec<f64> = flow
        .parameters()
        .iter()
        .zip(normal_vec(&mut r, flow.parameter_count(), scale))
        .map(|(a, b)| a + b)
        .collect();
    flow.set_parameters(&p).unwrap();
    flow.update_spectral(100);
    flow
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
