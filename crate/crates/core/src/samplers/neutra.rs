use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Backend, Tape};
use crate::error::{Error, Result};
use crate::flows::{FlowModel, Params};
use crate::targets::LogDensity;

/// The target seen through a flow: `log p(f⁻¹(z)) + log|det ∂f⁻¹/∂z|` on
/// latent space, with `f` the flow's data→latent map.
///
/// Flows with stochastic log-det estimators draw their probes from a fixed
/// seed, so the adjusted density is a deterministic function of `z`.
pub struct NeutraDensity<'a> {
    pub flow: &'a FlowModel,
    pub target: &'a dyn LogDensity,
    pub probe_seed: u64,
}

impl<'a> NeutraDensity<'a> {
    pub fn new(flow: &'a FlowModel, target: &'a dyn LogDensity) -> Result<Self> {
        if flow.dim() != target.dim() {
            return Err(Error::Input(format!(
                "flow dimension {} differs from target dimension {}",
                flow.dim(),
                target.dim()
            )));
        }
        Ok(Self {
            flow,
            target,
            probe_seed: 0,
        })
    }

    fn probe_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.probe_seed)
    }

    /// The data-space point for latent `z`.
    pub fn to_data(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.flow.inverse(z, &mut self.probe_rng())?.0)
    }

    /// Adjusted log density and its gradient in `z`.
    pub fn value_and_gradient(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        if z.len() != self.flow.dim() || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "latent point must be finite with the flow's dimension".into(),
            ));
        }
        let mut b = Tape::new();
        let zv = b.input(z);
        let p = Params::Fixed(self.flow.parameters());
        let pass =
            self.flow
                .record_inverse(&mut b, &p, &zv, self.flow.probes(), &mut self.probe_rng())?;
        let x = b.value(&pass.out).to_vec();
        let mut gx = vec![0.0; x.len()];
        let log_p = self.target.log_density_and_gradient(&x, &mut gx);
        if !log_p.is_finite() || gx.iter().any(|g| !g.is_finite()) {
            return Err(Error::numerical("target log density"));
        }
        let value = log_p + b.scalar_value(&pass.log_det);
        // ∇z log p(x(z)) = (∂x/∂z)ᵀ ∇x log p, via a linear surrogate.
        let gc = b.constant(&gx);
        let s = b.dot(&pass.out, &gc);
        let total = b.add(&s, &pass.log_det);
        let grads = b.backward(total)?;
        Ok((value, grads.wrt(zv)))
    }
}

impl LogDensity for NeutraDensity<'_> {
    fn dim(&self) -> usize {
        self.flow.dim()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        match self.flow.inverse(z, &mut self.probe_rng()) {
            Ok((x, ld)) => self.target.log_density(&x) + ld,
            Err(_) => f64::NAN,
        }
    }

    fn log_density_and_gradient(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        match self.value_and_gradient(z) {
            Ok((v, g)) => {
                grad.copy_from_slice(&g);
                v
            }
            Err(_) => {
                grad.fill(f64::NAN);
                f64::NAN
            }
        }
    }
}

/// Adjusted log density and gradient at latent `z`.
pub fn neutra_log_density(
    flow: &FlowModel,
    target: &dyn LogDensity,
    z: &[f64],
) -> Result<(f64, Vec<f64>)> {
    NeutraDensity::new(flow, target)?.value_and_gradient(z)
}
