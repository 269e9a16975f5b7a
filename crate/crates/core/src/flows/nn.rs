//! Dense tanh networks used as conditioners, residual maps and velocity
//! fields, plus the parameter view shared by all layers.

use crate::math::standard_normal;
use rand::RngCore;

use crate::diff::Backend;

/// Where layer parameters come from during one evaluation: a plain slice
/// (values only) or a recorded vector (for parameter gradients).
pub enum Params<'a, B: Backend> {
    Fixed(&'a [f64]),
    Recorded(B::V),
}

impl<'a, B: Backend> Params<'a, B> {
    pub fn get(&self, b: &mut B, offset: usize, len: usize) -> B::V {
        match self {
            Params::Fixed(p) => b.constant(&p[offset..offset + len]),
            Params::Recorded(v) => b.slice(v, offset, len),
        }
    }

    /// Plain values, for decisions that are not differentiated (branches,
    /// bin lookups, convergence checks).
    pub fn values<'s>(&'s self, b: &'s B, offset: usize, len: usize) -> &'s [f64] {
        match self {
            Params::Fixed(p) => &p[offset..offset + len],
            Params::Recorded(v) => &b.value(v)[offset..offset + len],
        }
    }
}

/// Parameter layout of a fully connected network: for each layer a
/// row-major weight matrix followed by a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayout {
    pub sizes: Vec<usize>,
    pub offset: usize,
}

/// Weights of one evaluation, bound once and reused across calls (the ODE
/// solver evaluates the same network hundreds of times).
pub struct BoundMlp<V> {
    layers: Vec<(V, V, usize, usize)>,
}

impl MlpLayout {
    /// `input -> hidden (x depth) -> output`.
    pub fn new(input: usize, hidden: usize, depth: usize, output: usize, offset: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(hidden, depth));
        sizes.push(output);
        Self { sizes, offset }
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty layout")
    }

    /// Offsets `(weight, bias)` of layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = self.offset;
        for w in self.sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
        (off, off + inp * out)
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Hidden weights ~ N(0, 1/fan_in), zero biases. The last layer is zero
    /// so that the network initially outputs exactly zero.
    pub fn init(&self, params: &mut [f64], rng: &mut dyn RngCore) {
        for l in 0..self.layer_count() {
            let (w, bias) = self.layer_offsets(l);
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            let last = l + 1 == self.layer_count();
            let scale = 1.0 / (inp.max(1) as f64).sqrt();
            for v in &mut params[w..w + inp * out] {
                *v = if last {
                    0.0
                } else {
                    scale * standard_normal(rng)
                };
            }
            params[bias..bias + out].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn bind<B: Backend>(&self, b: &mut B, p: &Params<B>) -> BoundMlp<B::V> {
        self.bind_masked(b, p, None)
    }

    /// Binds weights, multiplying each by the matching mask if given.
    pub fn bind_masked<B: Backend>(
        &self,
        b: &mut B,
        p: &Params<B>,
        masks: Option<&[Vec<f64>]>,
    ) -> BoundMlp<B::V> {
        let layers = (0..self.layer_count())
            .map(|l| {
                let (wo, bo) = self.layer_offsets(l);
                let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
                let mut w = p.get(b, wo, inp * out);
                if let Some(m) = masks {
                    let mv = b.constant(&m[l]);
                    w = b.mul(&w, &mv);
                }
                let bias = p.get(b, bo, out);
                (w, bias, out, inp)
            })
            .collect();
        BoundMlp { layers }
    }
}

impl<V: Clone> BoundMlp<V> {
    pub fn eval<B: Backend<V = V>>(&self, b: &mut B, x: &V) -> V {
        let mut h = x.clone();
        let n = self.layers.len();
        for (i, (w, bias, rows, cols)) in self.layers.iter().enumerate() {
            h = b.affine(w, bias, *rows, *cols, &h);
            if i + 1 < n {
                h = b.tanh(&h);
            }
        }
        h
    }

    /// Output together with Jacobian-vector products for each tangent.
    pub fn eval_with_jvp<B: Backend<V = V>>(
        &self,
        b: &mut B,
        x: &V,
        tangents: &[V],
    ) -> (V, Vec<V>) {
        let mut h = x.clone();
        let mut ts: Vec<V> = tangents.to_vec();
        let n = self.layers.len();
        for (i, (w, bias, rows, cols)) in self.layers.iter().enumerate() {
            h = b.affine(w, bias, *rows, *cols, &h);
            for t in ts.iter_mut() {
                *t = b.matvec(w, *rows, *cols, t);
            }
            if i + 1 < n {
                h = b.tanh(&h);
                // tanh' = 1 - tanh²
                let sq = b.square(&h);
                let one = b.scalar(1.0);
                let d = b.sub(&one, &sq);
                for t in ts.iter_mut() {
                    *t = b.mul(&d, t);
                }
            }
        }
        (h, ts)
    }
}
