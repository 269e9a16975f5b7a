//! Coupling and inverse-autoregressive layers with shift, affine and spline
//! transformers.

use serde::{Deserialize, Serialize};

use super::made::grouped_masks;
use super::nn::{MlpLayout, Params};
use super::spline::{rq_spline, Direction, SPLINE_PARAMS};
use crate::diff::Backend;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transformer {
    Shift,
    Affine,
    Spline,
}

impl Transformer {
    pub fn params_per_dim(self) -> usize {
        match self {
            Transformer::Shift => 1,
            Transformer::Affine => 2,
            Transformer::Spline => SPLINE_PARAMS,
        }
    }
}

/// Applies the transformer elementwise to `u` (length `n`). Parameter `k` of
/// coordinate `i` is `theta[k * n + i]`. Returns the output and the summed
/// log-derivative of the applied direction.
pub(crate) fn apply_transformer<B: Backend>(
    b: &mut B,
    kind: Transformer,
    theta: &B::V,
    u: &B::V,
    n: usize,
    dir: Direction,
) -> (B::V, B::V) {
    match kind {
        Transformer::Shift => {
            let y = match dir {
                Direction::Forward => b.add(u, theta),
                Direction::Inverse => b.sub(u, theta),
            };
            (y, b.scalar(0.0))
        }
        Transformer::Affine => {
            let s = b.slice(theta, 0, n);
            let t = b.slice(theta, n, n);
            let ls = b.sum(&s);
            match dir {
                Direction::Forward => {
                    let e = b.exp(&s);
                    let y = b.mul(u, &e);
                    (b.add(&y, &t), ls)
                }
                Direction::Inverse => {
                    let ns = b.neg(&s);
                    let e = b.exp(&ns);
                    let d = b.sub(u, &t);
                    (b.mul(&d, &e), b.neg(&ls))
                }
            }
        }
        Transformer::Spline => {
            let mut outs = Vec::with_capacity(n);
            let mut logs = Vec::with_capacity(n);
            for i in 0..n {
                let idx: Vec<usize> = (0..SPLINE_PARAMS).map(|k| k * n + i).collect();
                let raw = b.gather(theta, &idx);
                let ui = b.gather(u, &[i]);
                let (y, l) = rq_spline(b, &raw, &ui, dir);
                outs.push(y);
                logs.push(l);
            }
            let y = b.concat(&outs);
            let l = b.concat(&logs);
            (y, b.sum(&l))
        }
    }
}

/// Coupling layer: the first `dim / 2` coordinates pass through and
/// condition an elementwise transformer on the rest. With `dim == 1` the
/// conditioner sees a constant input, which leaves a learned elementwise map.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    pub dim: usize,
    pub split: usize,
    pub transformer: Transformer,
    pub net: MlpLayout,
}

impl CouplingLayer {
    pub fn new(
        dim: usize,
        transformer: Transformer,
        hidden: usize,
        depth: usize,
        offset: usize,
    ) -> Self {
        let split = dim / 2;
        let rest = dim - split;
        let net = MlpLayout::new(
            split.max(1),
            hidden,
            depth,
            rest * transformer.params_per_dim(),
            offset,
        );
        Self {
            dim,
            split,
            transformer,
            net,
        }
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// `Forward` maps data to latent, `Inverse` latent to data.
    pub fn apply<B: Backend>(
        &self,
        b: &mut B,
        p: &Params<B>,
        x: &B::V,
        dir: Direction,
    ) -> (B::V, B::V) {
        let rest = self.dim - self.split;
        let cond_in = if self.split > 0 {
            b.slice(x, 0, self.split)
        } else {
            b.constant(&[0.0])
        };
        let net = self.net.bind(b, p);
        let theta = net.eval(b, &cond_in);
        let xb = b.slice(x, self.split, rest);
        let (yb, ld) = apply_transformer(b, self.transformer, &theta, &xb, rest, dir);
        let y = if self.split > 0 {
            b.concat(&[cond_in, yb])
        } else {
            yb
        };
        (y, ld)
    }
}

/// Inverse-autoregressive layer: the latent-to-data direction is one masked
/// pass, `x_i = τ(z_i; φ(z_<i))`; the data-to-latent direction solves for the
/// coordinates one at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoregressiveLayer {
    pub dim: usize,
    pub transformer: Transformer,
    pub net: MlpLayout,
    masks: Vec<Vec<f64>>,
}

impl AutoregressiveLayer {
    pub fn new(
        dim: usize,
        transformer: Transformer,
        hidden: usize,
        depth: usize,
        offset: usize,
    ) -> Self {
        let per = transformer.params_per_dim();
        let net = MlpLayout::new(dim, hidden, depth, dim * per, offset);
        let hidden_sizes = vec![hidden; depth];
        let masks = grouped_masks(dim, &hidden_sizes, per);
        Self {
            dim,
            transformer,
            net,
            masks,
        }
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Latent to data in a single pass.
    pub fn inverse<B: Backend>(&self, b: &mut B, p: &Params<B>, z: &B::V) -> (B::V, B::V) {
        let net = self.net.bind_masked(b, p, Some(&self.masks));
        let theta = net.eval(b, z);
        apply_transformer(b, self.transformer, &theta, z, self.dim, Direction::Forward)
    }

    /// Data to latent, sequentially over coordinates.
    pub fn forward<B: Backend>(&self, b: &mut B, p: &Params<B>, x: &B::V) -> (B::V, B::V) {
        let d = self.dim;
        let per = self.transformer.params_per_dim();
        let net = self.net.bind_masked(b, p, Some(&self.masks));
        let mut solved: Vec<B::V> = Vec::with_capacity(d);
        let mut logs = Vec::with_capacity(d);
        for i in 0..d {
            let mut parts = solved.clone();
            parts.push(b.constant(&vec![0.0; d - i]));
            let zin = b.concat(&parts);
            let theta = net.eval(b, &zin);
            let idx: Vec<usize> = (0..per).map(|k| k * d + i).collect();
            let ti = b.gather(&theta, &idx);
            let xi = b.gather(x, &[i]);
            let (zi, l) = apply_transformer(b, self.transformer, &ti, &xi, 1, Direction::Inverse);
            solved.push(zi);
            logs.push(l);
        }
        let z = b.concat(&solved);
        let l = b.concat(&logs);
        (z, b.sum(&l))
    }
}
