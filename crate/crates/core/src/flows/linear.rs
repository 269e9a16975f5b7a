//! Coordinate permutations and a lower-triangular affine map.

use rand::seq::SliceRandom;
use rand::RngCore;

use super::nn::Params;
use crate::diff::Backend;

#[derive(Clone, Debug, PartialEq)]
pub struct Permutation {
    /// Output `k` takes input `perm[k]`.
    pub perm: Vec<usize>,
    inv: Vec<usize>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Self {
        let mut inv = vec![0; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        Self { perm, inv }
    }

    /// A seeded random permutation. For `dim >= 2` it is redrawn until the
    /// set of coordinates landing in the first half changes, so consecutive
    /// coupling layers never freeze the same coordinates.
    pub fn random(dim: usize, rng: &mut dyn RngCore) -> Self {
        let half = dim / 2;
        let mut perm: Vec<usize> = (0..dim).collect();
        loop {
            perm.shuffle(rng);
            if dim < 2 || perm[..half].iter().any(|&p| p >= half) {
                return Self::new(perm);
            }
        }
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::V) -> B::V {
        b.gather(x, &self.perm)
    }

    pub fn inverse<B: Backend>(&self, b: &mut B, z: &B::V) -> B::V {
        b.gather(z, &self.inv)
    }
}

/// `x = L z + μ` with `L` lower triangular and a positive diagonal stored as
/// logarithms. Parameters: shift, log-diagonal, then the strictly lower
/// entries row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineLayer {
    pub dim: usize,
    pub offset: usize,
    index: Vec<usize>,
}

impl AffineLayer {
    pub fn new(dim: usize, offset: usize) -> Self {
        let mut index = vec![0; dim * dim];
        let mut next = 1 + dim;
        for i in 0..dim {
            index[i * dim + i] = 1 + i;
            for j in 0..i {
                index[i * dim + j] = next;
                next += 1;
            }
        }
        Self { dim, offset, index }
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim + self.dim * (self.dim - 1) / 2
    }

    /// Parameter vector for a given shift and lower-triangular `L`
    /// (row-major, positive diagonal).
    pub fn encode(dim: usize, shift: &[f64], lower: &[f64]) -> Vec<f64> {
        let mut p = shift.to_vec();
        p.extend((0..dim).map(|i| lower[i * dim + i].ln()));
        for i in 0..dim {
            for j in 0..i {
                p.push(lower[i * dim + j]);
            }
        }
        p
    }

    fn assemble<B: Backend>(&self, b: &mut B, p: &Params<B>) -> (B::V, B::V, B::V) {
        let d = self.dim;
        let shift = p.get(b, self.offset, d);
        let logdiag = p.get(b, self.offset + d, d);
        let strict = p.get(b, self.offset + 2 * d, d * (d - 1) / 2);
        let diag = b.exp(&logdiag);
        let zero = b.scalar(0.0);
        let pool = b.concat(&[zero, diag, strict]);
        let l = b.gather(&pool, &self.index);
        (shift, logdiag, l)
    }

    /// Latent to data.
    pub fn inverse<B: Backend>(&self, b: &mut B, p: &Params<B>, z: &B::V) -> (B::V, B::V) {
        let (shift, logdiag, l) = self.assemble(b, p);
        let x = b.affine(&l, &shift, self.dim, self.dim, z);
        (x, b.sum(&logdiag))
    }

    /// Data to latent by forward substitution.
    pub fn forward<B: Backend>(&self, b: &mut B, p: &Params<B>, x: &B::V) -> (B::V, B::V) {
        let d = self.dim;
        let (shift, logdiag, l) = self.assemble(b, p);
        let centered = b.sub(x, &shift);
        let mut parts: Vec<B::V> = Vec::with_capacity(d);
        for i in 0..d {
            let mut r = b.gather(&centered, &[i]);
            if i > 0 {
                let row_idx: Vec<usize> = (0..i).map(|j| i * d + j).collect();
                let row = b.gather(&l, &row_idx);
                let prev = b.concat(&parts);
                let s = b.dot(&row, &prev);
                r = b.sub(&r, &s);
            }
            let lii = b.gather(&l, &[i * d + i]);
            parts.push(b.div(&r, &lii));
        }
        let z = b.concat(&parts);
        let ld = b.sum(&logdiag);
        (z, b.neg(&ld))
    }
}
