//! Planar, Sylvester and radial layers, `y = x + g(x)` with closed-form
//! determinants. Planar and Sylvester inverses reduce to one-dimensional
//! monotone solves; the radial inverse is closed form.
//!
//! A numerically solved coordinate enters the recorded graph through one
//! Newton step taken from the converged root. At a root that step has the
//! implicit-function derivative, so parameter gradients of the inverse are
//! exact without unrolling the solver.

use crate::math::standard_normal;
use rand::RngCore;

use super::nn::Params;
use crate::diff::Backend;
use crate::error::{Error, Result};
use crate::math::sigmoid;

/// Solves `f(a) = target` for increasing `f` bracketed by `[lo, hi]`.
/// `f` returns the value and the derivative.
pub(crate) fn solve_increasing(
    f: impl Fn(f64) -> (f64, f64),
    target: f64,
    mut lo: f64,
    mut hi: f64,
) -> Result<f64> {
    let mut a = 0.5 * (lo + hi);
    let mut residual = f64::INFINITY;
    for _ in 0..200 {
        let (v, d) = f(a);
        residual = v - target;
        if residual.abs() <= 1e-14 * (1.0 + target.abs()) {
            return Ok(a);
        }
        if residual > 0.0 {
            hi = a;
        } else {
            lo = a;
        }
        let newton = a - residual / d;
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if next == a || hi - lo <= f64::EPSILON * (1.0 + a.abs()) {
            return Ok(next);
        }
        a = next;
    }
    Err(Error::Convergence {
        iterations: 200,
        residual: residual.abs(),
    })
}

/// `a_c - (a_c + c σ(a_c + β) - t) / (1 + c σ'(a_c + β))` recorded from the
/// constant root `a_c`.
fn newton_from_root<B: Backend>(b: &mut B, root: f64, c: &B::V, beta: &B::V, t: &B::V) -> B::V {
    let ac = b.constant(&[root]);
    let pre = b.add(&ac, beta);
    let s = b.sigmoid(&pre);
    let cs = b.mul(c, &s);
    let f = b.add(&ac, &cs);
    let f = b.sub(&f, t);
    let one = b.scalar(1.0);
    let oms = b.sub(&one, &s);
    let sp = b.mul(&s, &oms);
    let csp = b.mul(c, &sp);
    let fp = b.add(&one, &csp);
    let step = b.div(&f, &fp);
    b.sub(&ac, &step)
}

/// `v σ(wᵀx + b)` with `v` adjusted so that `wᵀv > -1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarLayer {
    pub dim: usize,
    pub offset: usize,
}

impl PlanarLayer {
    pub fn param_count(&self) -> usize {
        2 * self.dim + 1
    }

    pub fn init(&self, params: &mut [f64], rng: &mut dyn RngCore) {
        let d = self.dim;
        let scale = 1.0 / (d as f64).sqrt();
        for v in &mut params[self.offset..self.offset + d] {
            *v = scale * standard_normal(rng);
        }
        params[self.offset + d..self.offset + 2 * d + 1]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }

    fn bind<B: Backend>(&self, b: &mut B, p: &Params<B>) -> (B::V, B::V, B::V) {
        let d = self.dim;
        let w = p.get(b, self.offset, d);
        let v = p.get(b, self.offset + d, d);
        let bias = p.get(b, self.offset + 2 * d, 1);
        let a = b.dot(&w, &v);
        let vhat = if b.scalar_value(&a) >= 0.0 {
            v
        } else {
            // v + (e^a - 1 - a) w / |w|², giving wᵀv̂ = e^a - 1.
            let ww = b.dot(&w, &w);
            let ea = b.exp(&a);
            let num = b.sub(&ea, &a);
            let num = b.shift(&num, -1.0);
            let coef = b.div(&num, &ww);
            let cw = b.mul(&coef, &w);
            b.add(&v, &cw)
        };
        (w, vhat, bias)
    }

    pub fn forward<B: Backend>(&self, b: &mut B, p: &Params<B>, x: &B::V) -> (B::V, B::V) {
        let (w, vhat, bias) = self.bind(b, p);
        let lin = b.dot(&w, x);
        let lin = b.add(&lin, &bias);
        let h = b.sigmoid(&lin);
        let vh = b.mul(&vhat, &h);
        let y = b.add(x, &vh);
        let one = b.scalar(1.0);
        let omh = b.sub(&one, &h);
        let hp = b.mul(&h, &omh);
        let c = b.dot(&w, &vhat);
        let det = b.mul(&hp, &c);
        let det = b.add(&one, &det);
        (y, b.log(&det))
    }

    pub fn inverse<B: Backend>(&self, b: &mut B, p: &Params<B>, y: &B::V) -> Result<(B::V, B::V)> {
        let (w, vhat, bias) = self.bind(b, p);
        let t = b.dot(&w, y);
        let c = b.dot(&w, &vhat);
        let (tv, cv, bv) = (
            b.scalar_value(&t),
            b.scalar_value(&c),
            b.scalar_value(&bias),
        );
        let root = solve_increasing(
            |a| {
                let s = sigmoid(a + bv);
                (a + cv * s, 1.0 + cv * s * (1.0 - s))
            },
            tv,
            tv - cv.max(0.0) - 1e-9,
            tv - cv.min(0.0) + 1e-9,
        )?;
        let a = newton_from_root(b, root, &c, &bias, &t);
        let pre = b.add(&a, &bias);
        let h = b.sigmoid(&pre);
        let vh = b.mul(&vhat, &h);
        let x = b.sub(y, &vh);
        let one = b.scalar(1.0);
        let omh = b.sub(&one, &h);
        let hp = b.mul(&h, &omh);
        let det = b.mul(&hp, &c);
        let det = b.add(&one, &det);
        let ld = b.log(&det);
        Ok((x, b.neg(&ld)))
    }
}

/// `Q R₁ σ(R₂ Qᵀ x + b)` with a fixed orthonormal `Q` (`d x m`) and upper
/// triangular `R₁`, `R₂` whose diagonals are squashed into `(-1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SylvesterLayer {
    pub dim: usize,
    pub m: usize,
    pub offset: usize,
    /// Row-major `d x m`.
    q: Vec<f64>,
    /// Row-major `m x d`.
    qt: Vec<f64>,
    upper_index: Vec<usize>,
    diag_pos: Vec<usize>,
    off_pos: Vec<usize>,
}

impl SylvesterLayer {
    pub fn new(dim: usize, offset: usize, rotation_seed: u64) -> Self {
        let m = (dim / 2).max(1);
        let full = crate::targets::random_rotation(dim, rotation_seed);
        let mut q = vec![0.0; dim * m];
        let mut qt = vec![0.0; m * dim];
        for i in 0..dim {
            for j in 0..m {
                q[i * m + j] = full[i * dim + j];
                qt[j * dim + i] = full[i * dim + j];
            }
        }
        // Packed upper entries in row order; map them into a pool laid out
        // as [0, diag.., off..].
        let mut diag_pos = Vec::new();
        let mut off_pos = Vec::new();
        let mut k = 0;
        for i in 0..m {
            for j in i..m {
                if i == j {
                    diag_pos.push(k);
                } else {
                    off_pos.push(k);
                }
                k += 1;
            }
        }
        let mut upper_index = vec![0; m * m];
        let mut off = 0;
        for i in 0..m {
            upper_index[i * m + i] = 1 + i;
            for j in i + 1..m {
                upper_index[i * m + j] = 1 + m + off;
                off += 1;
            }
        }
        Self {
            dim,
            m,
            offset,
            q,
            qt,
            upper_index,
            diag_pos,
            off_pos,
        }
    }

    fn packed(&self) -> usize {
        self.m * (self.m + 1) / 2
    }

    pub fn param_count(&self) -> usize {
        2 * self.packed() + self.m
    }

    pub fn init(&self, params: &mut [f64], rng: &mut dyn RngCore) {
        let n = self.packed();
        let o = self.offset;
        params[o..o + n].iter_mut().for_each(|v| *v = 0.0);
        for (k, v) in params[o + n..o + 2 * n].iter_mut().enumerate() {
            let noise: f64 = standard_normal(rng);
            *v = if self.diag_pos.contains(&k) {
                0.5 + 0.1 * noise
            } else {
                0.1 * noise
            };
        }
        params[o + 2 * n..o + 2 * n + self.m]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }

    fn upper<B: Backend>(&self, b: &mut B, raw: &B::V) -> (B::V, B::V) {
        let d = b.gather(raw, &self.diag_pos);
        let d = b.tanh(&d);
        let off = b.gather(raw, &self.off_pos);
        let zero = b.scalar(0.0);
        let pool = b.concat(&[zero, d.clone(), off]);
        (b.gather(&pool, &self.upper_index), d)
    }

    fn bind<B: Backend>(&self, b: &mut B, p: &Params<B>) -> [B::V; 5] {
        let n = self.packed();
        let r1raw = p.get(b, self.offset, n);
        let r2raw = p.get(b, self.offset + n, n);
        let bias = p.get(b, self.offset + 2 * n, self.m);
        let (r1, d1) = self.upper(b, &r1raw);
        let (r2, d2) = self.upper(b, &r2raw);
        [r1, d1, r2, d2, bias]
    }

    fn log_det<B: Backend>(&self, b: &mut B, h: &B::V, d1: &B::V, d2: &B::V) -> B::V {
        let one = b.scalar(1.0);
        let omh = b.sub(&one, h);
        let hp = b.mul(h, &omh);
        let dd = b.mul(d1, d2);
        let t = b.mul(&hp, &dd);
        let t = b.add(&one, &t);
        let l = b.log(&t);
        b.sum(&l)
    }

    pub fn forward<B: Backend>(&self, b: &mut B, p: &Params<B>, x: &B::V) -> (B::V, B::V) {
        let (d, m) = (self.dim, self.m);
        let [r1, d1, r2, d2, bias] = self.bind(b, p);
        let qt = b.constant(&self.qt);
        let q = b.constant(&self.q);
        let u = b.matvec(&qt, m, d, x);
        let pre = b.affine(&r2, &bias, m, m, &u);
        let h = b.sigmoid(&pre);
        let r1h = b.matvec(&r1, m, m, &h);
        let g = b.matvec(&q, d, m, &r1h);
        let y = b.add(x, &g);
        let ld = self.log_det(b, &h, &d1, &d2);
        (y, ld)
    }

    pub fn inverse<B: Backend>(&self, b: &mut B, p: &Params<B>, y: &B::V) -> Result<(B::V, B::V)> {
        let (d, m) = (self.dim, self.m);
        let [r1, d1, r2, d2, bias] = self.bind(b, p);
        let qt = b.constant(&self.qt);
        let q = b.constant(&self.q);
        let yt = b.matvec(&qt, m, d, y);
        let mut us: Vec<Option<B::V>> = vec![None; m];
        let mut hs: Vec<Option<B::V>> = vec![None; m];
        for i in (0..m).rev() {
            let mut r = b.gather(&yt, &[i]);
            let mut c = b.gather(&bias, &[i]);
            if i + 1 < m {
                let row1: Vec<usize> = (i + 1..m).map(|j| i * m + j).collect();
                let later_h: Vec<B::V> =
                    (i + 1..m).map(|j| hs[j].clone().expect("solved")).collect();
                let later_u: Vec<B::V> =
                    (i + 1..m).map(|j| us[j].clone().expect("solved")).collect();
                let hv = b.concat(&later_h);
                let uv = b.concat(&later_u);
                let a1 = b.gather(&r1, &row1);
                let s1 = b.dot(&a1, &hv);
                r = b.sub(&r, &s1);
                let a2 = b.gather(&r2, &row1);
                let s2 = b.dot(&a2, &uv);
                c = b.add(&c, &s2);
            }
            let r1ii = b.gather(&d1, &[i]);
            let r2ii = b.gather(&d2, &[i]);
            let (rv, cv) = (b.scalar_value(&r), b.scalar_value(&c));
            let (a, k) = (b.scalar_value(&r1ii), b.scalar_value(&r2ii));
            // u + a σ(k u + c) = r, increasing because |a k| < 1.
            let root = solve_increasing(
                |u| {
                    let s = sigmoid(k * u + cv);
                    (u + a * s, 1.0 + a * k * s * (1.0 - s))
                },
                rv,
                rv - a.max(0.0) - 1e-9,
                rv - a.min(0.0) + 1e-9,
            )?;
            let uc = b.constant(&[root]);
            let ku = b.mul(&r2ii, &uc);
            let pre = b.add(&ku, &c);
            let s = b.sigmoid(&pre);
            let as_ = b.mul(&r1ii, &s);
            let f = b.add(&uc, &as_);
            let f = b.sub(&f, &r);
            let one = b.scalar(1.0);
            let oms = b.sub(&one, &s);
            let sp = b.mul(&s, &oms);
            let ak = b.mul(&r1ii, &r2ii);
            let fp = b.mul(&ak, &sp);
            let fp = b.add(&one, &fp);
            let step = b.div(&f, &fp);
            let ui = b.sub(&uc, &step);
            let ku = b.mul(&r2ii, &ui);
            let pre = b.add(&ku, &c);
            hs[i] = Some(b.sigmoid(&pre));
            us[i] = Some(ui);
        }
        let h: Vec<B::V> = hs.into_iter().map(|v| v.expect("solved")).collect();
        let h = b.concat(&h);
        let r1h = b.matvec(&r1, m, m, &h);
        let g = b.matvec(&q, d, m, &r1h);
        let x = b.sub(y, &g);
        let ld = self.log_det(b, &h, &d1, &d2);
        Ok((x, b.neg(&ld)))
    }
}

/// `β (x - x₀) / (α + ‖x - x₀‖)` with `α = softplus(α̃)` and
/// `β = -α + softplus(β̃)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialLayer {
    pub dim: usize,
    pub offset: usize,
}

impl RadialLayer {
    pub fn param_count(&self) -> usize {
        self.dim + 2
    }

    pub fn init(&self, params: &mut [f64], rng: &mut dyn RngCore) {
        let d = self.dim;
        for v in &mut params[self.offset..self.offset + d] {
            *v = standard_normal(rng);
        }
        params[self.offset + d] = 0.0;
        params[self.offset + d + 1] = 0.0;
    }

    fn bind<B: Backend>(&self, b: &mut B, p: &Params<B>) -> (B::V, B::V, B::V) {
        let d = self.dim;
        let x0 = p.get(b, self.offset, d);
        let at = p.get(b, self.offset + d, 1);
        let bt = p.get(b, self.offset + d + 1, 1);
        let alpha = b.softplus(&at);
        let sb = b.softplus(&bt);
        let beta = b.sub(&sb, &alpha);
        (x0, alpha, beta)
    }

    /// `(d-1) log(1 + β/(α+r)) + log(1 + βα/(α+r)²)`.
    fn log_det<B: Backend>(&self, b: &mut B, alpha: &B::V, beta: &B::V, r: &B::V) -> B::V {
        let apr = b.add(alpha, r);
        let bh = b.div(beta, &apr);
        let one = b.scalar(1.0);
        let t1 = b.add(&one, &bh);
        let t1 = b.log(&t1);
        let t1 = b.scale(&t1, (self.dim - 1) as f64);
        let apr2 = b.square(&apr);
        let ba = b.mul(beta, alpha);
        let t2 = b.div(&ba, &apr2);
        let t2 = b.add(&one, &t2);
        let t2 = b.log(&t2);
        b.add(&t1, &t2)
    }

    pub fn forward<B: Backend>(&self, b: &mut B, p: &Params<B>, x: &B::V) -> (B::V, B::V) {
        let (x0, alpha, beta) = self.bind(b, p);
        let diff = b.sub(x, &x0);
        let r2 = b.dot(&diff, &diff);
        let r = b.sqrt(&r2);
        let apr = b.add(&alpha, &r);
        let bh = b.div(&beta, &apr);
        let g = b.mul(&bh, &diff);
        let y = b.add(x, &g);
        let ld = self.log_det(b, &alpha, &beta, &r);
        (y, ld)
    }

    pub fn inverse<B: Backend>(&self, b: &mut B, p: &Params<B>, y: &B::V) -> (B::V, B::V) {
        let (x0, alpha, beta) = self.bind(b, p);
        let dy = b.sub(y, &x0);
        let ry2 = b.dot(&dy, &dy);
        let ry = b.sqrt(&ry2);
        // r² + (α + β - r_y) r - r_y α = 0, positive root.
        let ab = b.add(&alpha, &beta);
        let k = b.sub(&ab, &ry);
        let k2 = b.square(&k);
        let rya = b.mul(&ry, &alpha);
        let four = b.scale(&rya, 4.0);
        let disc = b.add(&k2, &four);
        let sq = b.sqrt(&disc);
        let r = if b.scalar_value(&k) >= 0.0 {
            let den = b.add(&k, &sq);
            let num = b.scale(&rya, 2.0);
            b.div(&num, &den)
        } else {
            let nk = b.neg(&k);
            let s = b.add(&nk, &sq);
            b.scale(&s, 0.5)
        };
        let ratio = b.div(&r, &ry);
        let scaled = b.mul(&dy, &ratio);
        let x = b.add(&x0, &scaled);
        let ld = self.log_det(b, &alpha, &beta, &r);
        (x, b.neg(&ld))
    }
}
