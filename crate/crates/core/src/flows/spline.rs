//! Monotone rational-quadratic splines on `[-B, B]` with identity tails.

use crate::diff::{Backend, Eager};

pub const SPLINE_BINS: usize = 8;
pub const SPLINE_BOUND: f64 = 10.0;
/// Unconstrained parameters per transformed coordinate: bin widths, bin
/// heights and the interior knot derivatives.
pub const SPLINE_PARAMS: usize = 3 * SPLINE_BINS - 1;

const MIN_BIN_WIDTH: f64 = 1e-3;
const MIN_BIN_HEIGHT: f64 = 1e-3;
const MIN_DERIVATIVE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Offset making a zero raw derivative parameter map to derivative 1.
fn derivative_offset() -> f64 {
    ((1.0 - MIN_DERIVATIVE).exp() - 1.0).ln()
}

fn cumsum_matrix() -> Vec<f64> {
    let k = SPLINE_BINS;
    let mut m = vec![0.0; (k + 1) * k];
    for r in 0..=k {
        for c in 0..r {
            m[r * k + c] = 1.0;
        }
    }
    m
}

fn knots<B: Backend>(b: &mut B, raw: &B::V, min: f64) -> (B::V, B::V) {
    let k = SPLINE_BINS;
    let s = b.softmax(raw);
    let s = b.scale(&s, 1.0 - k as f64 * min);
    let s = b.shift(&s, min);
    let sizes = b.scale(&s, 2.0 * SPLINE_BOUND);
    let cm = b.constant(&cumsum_matrix());
    let cum = b.matvec(&cm, k + 1, k, &sizes);
    let cum = b.shift(&cum, -SPLINE_BOUND);
    (sizes, cum)
}

fn bin_index(edges: &[f64], v: f64) -> usize {
    let k = SPLINE_BINS;
    (0..k)
        .rev()
        .find(|&i| edges[i] <= v)
        .unwrap_or(0)
        .min(k - 1)
}

/// Applies the spline to a single coordinate `u` (length one), returning
/// the output and the log-derivative of the applied direction.
pub fn rq_spline<B: Backend>(
    b: &mut B,
    raw: &B::V,
    u: &B::V,
    direction: Direction,
) -> (B::V, B::V) {
    let k = SPLINE_BINS;
    let uv = b.value(u)[0];
    if !(uv > -SPLINE_BOUND && uv < SPLINE_BOUND) {
        let zero = b.scalar(0.0);
        return (u.clone(), zero);
    }
    let rw = b.slice(raw, 0, k);
    let rh = b.slice(raw, k, k);
    let rd = b.slice(raw, 2 * k, k - 1);
    let (widths, cw) = knots(b, &rw, MIN_BIN_WIDTH);
    let (heights, ch) = knots(b, &rh, MIN_BIN_HEIGHT);
    let rd = b.shift(&rd, derivative_offset());
    let inner = b.softplus(&rd);
    let inner = b.shift(&inner, MIN_DERIVATIVE);
    let one = b.scalar(1.0);
    let derivs = b.concat(&[one.clone(), inner, one.clone()]);

    let edges = match direction {
        Direction::Forward => b.value(&cw).to_vec(),
        Direction::Inverse => b.value(&ch).to_vec(),
    };
    let i = bin_index(&edges, uv);
    let xk = b.gather(&cw, &[i]);
    let wk = b.gather(&widths, &[i]);
    let yk = b.gather(&ch, &[i]);
    let hk = b.gather(&heights, &[i]);
    let dk = b.gather(&derivs, &[i]);
    let dk1 = b.gather(&derivs, &[i + 1]);
    let s = b.div(&hk, &wk);
    let dsum = b.add(&dk, &dk1);
    let two_s = b.scale(&s, 2.0);
    let c = b.sub(&dsum, &two_s);

    let xi = match direction {
        Direction::Forward => {
            let off = b.sub(u, &xk);
            b.div(&off, &wk)
        }
        Direction::Inverse => {
            let v = b.sub(u, &yk);
            let vc = b.mul(&v, &c);
            let sd = b.sub(&s, &dk);
            let a = b.mul(&hk, &sd);
            let a = b.add(&a, &vc);
            let hd = b.mul(&hk, &dk);
            let bb = b.sub(&hd, &vc);
            let cc = b.mul(&s, &v);
            let cc = b.neg(&cc);
            let bb2 = b.square(&bb);
            let ac = b.mul(&a, &cc);
            let ac4 = b.scale(&ac, 4.0);
            let disc = b.sub(&bb2, &ac4);
            let zero = b.scalar(0.0);
            let disc = b.max(&disc, &zero);
            let root = b.sqrt(&disc);
            let nb = b.neg(&bb);
            let den = b.sub(&nb, &root);
            let num = b.scale(&cc, 2.0);
            b.div(&num, &den)
        }
    };
    let omx = b.sub(&one, &xi);
    let t = b.mul(&xi, &omx);
    let xi2 = b.square(&xi);
    let den = b.mul(&c, &t);
    let den = b.add(&s, &den);
    // derivative numerator s² (d_{k+1} ξ² + 2 s ξ(1-ξ) + d_k (1-ξ)²)
    let a1 = b.mul(&dk1, &xi2);
    let a2 = b.mul(&two_s, &t);
    let omx2 = b.square(&omx);
    let a3 = b.mul(&dk, &omx2);
    let dn = b.add(&a1, &a2);
    let dn = b.add(&dn, &a3);
    let s2 = b.square(&s);
    let dn = b.mul(&s2, &dn);
    let ldn = b.log(&dn);
    let lden = b.log(&den);
    let lden2 = b.scale(&lden, 2.0);
    let logd = b.sub(&ldn, &lden2);
    match direction {
        Direction::Forward => {
            let sx = b.mul(&s, &xi2);
            let dt = b.mul(&dk, &t);
            let num = b.add(&sx, &dt);
            let num = b.mul(&hk, &num);
            let frac = b.div(&num, &den);
            (b.add(&yk, &frac), logd)
        }
        Direction::Inverse => {
            let xw = b.mul(&xi, &wk);
            let x = b.add(&xw, &xk);
            (x, b.neg(&logd))
        }
    }
}

/// Scalar convenience wrapper: `(value, log_derivative)`.
pub fn rational_quadratic_spline(knot_params: &[f64], u: f64, direction: Direction) -> (f64, f64) {
    assert_eq!(
        knot_params.len(),
        SPLINE_PARAMS,
        "expected {SPLINE_PARAMS} spline parameters"
    );
    let mut b = Eager::new();
    let raw = b.constant(knot_params);
    let uv = b.constant(&[u]);
    let (y, l) = rq_spline(&mut b, &raw, &uv, direction);
    (y[0], l[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_identity() {
        let p = [0.0; SPLINE_PARAMS];
        for u in [-9.99, -3.2, 0.0, 0.7, 5.5, 9.9] {
            let (y, l) = rational_quadratic_spline(&p, u, Direction::Forward);
            assert!((y - u).abs() < 1e-12, "{u} -> {y}");
            assert!(l.abs() < 1e-12);
        }
    }

    #[test]
    fn tails_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..SPLINE_PARAMS)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        for u in [-25.0, -10.0, 10.0, 13.5] {
            assert_eq!(
                rational_quadratic_spline(&p, u, Direction::Forward),
                (u, 0.0)
            );
            assert_eq!(
                rational_quadratic_spline(&p, u, Direction::Inverse),
                (u, 0.0)
            );
        }
    }

    #[test]
    fn inverse_undoes_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p: Vec<f64> = (0..SPLINE_PARAMS)
                .map(|_| rng.random_range(-3.0..3.0))
                .collect();
            let u = rng.random_range(-9.9..9.9);
            let (y, l) = rational_quadratic_spline(&p, u, Direction::Forward);
            let (x, li) = rational_quadratic_spline(&p, y, Direction::Inverse);
            assert!((x - u).abs() < 1e-10, "{u} vs {x}");
            assert!((l + li).abs() < 1e-9);
        }
    }

    #[test]
    fn log_derivative_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..SPLINE_PARAMS)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        for u in [-7.3, -0.2, 1.1, 6.4] {
            let h = 1e-6;
            let up = rational_quadratic_spline(&p, u + h, Direction::Forward).0;
            let down = rational_quadratic_spline(&p, u - h, Direction::Forward).0;
            let fd = ((up - down) / (2.0 * h)).ln();
            let (_, l) = rational_quadratic_spline(&p, u, Direction::Forward);
            assert!((fd - l).abs() < 1e-6);
        }
    }
}
