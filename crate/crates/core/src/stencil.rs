//! Small dense kernels and zero-padded 2D convolution.
//!
//! Convolution is the true (flipped) form `out[p] = Σ_q k[q] f[p − q]` with
//! `q` ranging over `[-r, r]²` and out-of-domain samples of `f` read as zero.
//! Kernel weights are stored row-major with offset `q = (i, j)` at index
//! `(i + r) * (2r + 1) + (j + r)`.

use std::ops::{Add, Mul};

use thiserror::Error;

use crate::mesh::Field;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StencilError {
    #[error("kernel of radius {radius} needs {expected} weights, got {got}")]
    WeightCount { radius: usize, expected: usize, got: usize },
    #[error("gaussian width must be positive, got {0}")]
    Sigma(f64),
    #[error("gaussian radius must be at least 1")]
    Radius,
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
}

/// A `(2r+1) x (2r+1)` stencil.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    radius: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(radius: usize, weights: Vec<f64>) -> Result<Self, StencilError> {
        let expected = side(radius) * side(radius);
        if weights.len() != expected {
            return Err(StencilError::WeightCount { radius, expected, got: weights.len() });
        }
        Ok(Self { radius, weights })
    }

    pub fn zeros(radius: usize) -> Self {
        Self { radius, weights: vec![0.0; side(radius) * side(radius)] }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        side(self.radius)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Weight at signed offset `(di, dj)`.
    pub fn at(&self, di: isize, dj: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((di + r) * (2 * r + 1) + dj + r) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Embeds the kernel in a larger radius, padding with zeros.
    pub fn padded(&self, radius: usize) -> Kernel {
        assert!(radius >= self.radius);
        let mut out = Kernel::zeros(radius);
        let r = self.radius as isize;
        let s = out.side();
        let off = radius - self.radius;
        for i in -r..=r {
            for j in -r..=r {
                let idx = (i + r) as usize + off;
                let jdx = (j + r) as usize + off;
                out.weights[idx * s + jdx] = self.at(i, j);
            }
        }
        out
    }
}

impl Add for &Kernel {
    type Output = Kernel;

    fn add(self, rhs: &Kernel) -> Kernel {
        let r = self.radius.max(rhs.radius);
        let (a, b) = (self.padded(r), rhs.padded(r));
        Kernel { radius: r, weights: a.weights.iter().zip(&b.weights).map(|(x, y)| x + y).collect() }
    }
}

impl Mul<&Kernel> for f64 {
    type Output = Kernel;

    fn mul(self, rhs: &Kernel) -> Kernel {
        Kernel { radius: rhs.radius, weights: rhs.weights.iter().map(|w| self * w).collect() }
    }
}

fn side(radius: usize) -> usize {
    2 * radius + 1
}

/// The identity stencil: a single unit weight at the center.
pub fn make_identity(radius: usize) -> Kernel {
    let mut k = Kernel::zeros(radius);
    let s = k.side();
    k.weights[radius * s + radius] = 1.0;
    k
}

/// Discrete Gaussian sampled at integer offsets and renormalized to unit sum.
pub fn make_gaussian(sigma: f64, radius: usize) -> Result<Kernel, StencilError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(StencilError::Sigma(sigma));
    }
    if radius == 0 {
        return Err(StencilError::Radius);
    }
    let r = radius as isize;
    let mut weights = Vec::with_capacity(side(radius) * side(radius));
    for i in -r..=r {
        for j in -r..=r {
            let d2 = (i * i + j * j) as f64;
            weights.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(Kernel { radius, weights })
}

/// Gaussian radius used when none is configured: four standard deviations.
pub fn default_gaussian_radius(sigma: f64) -> usize {
    ((4.0 * sigma).ceil() as usize).max(1)
}

/// Zero-padded convolution of a field with a kernel; output has the input's shape and level.
pub fn conv2d(f: &Field, k: &Kernel) -> Result<Field, StencilError> {
    if let Some(i) = f.values().iter().position(|v| !v.is_finite()) {
        return Err(StencilError::NonFinite(i));
    }
    let mut out = Field::zeros(f.level(), f.rows(), f.cols());
    conv_accumulate(f.values(), f.rows(), f.cols(), k.weights(), k.radius(), 1.0, out.values_mut());
    Ok(out)
}

/// Row bounds `[lo, hi)` of output rows for which `row - d` stays inside `0..n`.
#[inline]
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = d.max(0) as usize;
    let hi = (n as isize + d.min(0)).max(0) as usize;
    (lo.min(n), hi)
}

/// `out += scale * (k ⋆ x)` for one `rows x cols` plane.
pub(crate) fn conv_accumulate(x: &[f64], rows: usize, cols: usize, k: &[f64], radius: usize, scale: f64, out: &mut [f64]) {
    let r = radius as isize;
    let s = 2 * radius + 1;
    for di in -r..=r {
        let (r0, r1) = span(rows, di);
        for dj in -r..=r {
            let w = scale * k[(di + r) as usize * s + (dj + r) as usize];
            if w == 0.0 {
                continue;
            }
            let (c0, c1) = span(cols, dj);
            if c0 >= c1 {
                continue;
            }
            for row in r0..r1 {
                let src_row = (row as isize - di) as usize;
                let o = &mut out[row * cols + c0..row * cols + c1];
                let src0 = (src_row * cols) as isize + c0 as isize - dj;
                let i = &x[src0 as usize..src0 as usize + (c1 - c0)];
                for (a, b) in o.iter_mut().zip(i) {
                    *a += w * b;
                }
            }
        }
    }
}

/// Adjoint of [`conv_accumulate`] in `x`: `gx += scale * (k correlated with g)`.
pub(crate) fn conv_adjoint_input(g: &[f64], rows: usize, cols: usize, k: &[f64], radius: usize, scale: f64, gx: &mut [f64]) {
    let r = radius as isize;
    let s = 2 * radius + 1;
    for di in -r..=r {
        let (r0, r1) = span(rows, di);
        for dj in -r..=r {
            let w = scale * k[(di + r) as usize * s + (dj + r) as usize];
            if w == 0.0 {
                continue;
            }
            let (c0, c1) = span(cols, dj);
            if c0 >= c1 {
                continue;
            }
            for row in r0..r1 {
                let src_row = (row as isize - di) as usize;
                let gi = &g[row * cols + c0..row * cols + c1];
                let dst0 = ((src_row * cols) as isize + c0 as isize - dj) as usize;
                let d = &mut gx[dst0..dst0 + (c1 - c0)];
                for (a, b) in d.iter_mut().zip(gi) {
                    *a += w * b;
                }
            }
        }
    }
}

/// Dot product with four interleaved partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Adjoint of [`conv_accumulate`] in the kernel: `gk[q] += scale * Σ_p g[p] x[p − q]`.
pub(crate) fn conv_adjoint_kernel(g: &[f64], x: &[f64], rows: usize, cols: usize, radius: usize, scale: f64, gk: &mut [f64]) {
    let r = radius as isize;
    let s = 2 * radius + 1;
    for di in -r..=r {
        let (r0, r1) = span(rows, di);
        for dj in -r..=r {
            let (c0, c1) = span(cols, dj);
            if c0 >= c1 {
                continue;
            }
            let mut acc = 0.0;
            for row in r0..r1 {
                let src_row = (row as isize - di) as usize;
                let gi = &g[row * cols + c0..row * cols + c1];
                let s0 = ((src_row * cols) as isize + c0 as isize - dj) as usize;
                let xi = &x[s0..s0 + (c1 - c0)];
                acc += dot(gi, xi);
            }
            gk[(di + r) as usize * s + (dj + r) as usize] += scale * acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple loop with explicit bounds checks.
    fn naive(f: &Field, k: &Kernel) -> Vec<f64> {
        let (m, n) = (f.rows() as isize, f.cols() as isize);
        let r = k.radius() as isize;
        let mut out = vec![0.0; f.len()];
        for pi in 0..m {
            for pj in 0..n {
                let mut acc = 0.0;
                for qi in -r..=r {
                    for qj in -r..=r {
                        let (si, sj) = (pi - qi, pj - qj);
                        if si >= 0 && si < m && sj >= 0 && sj < n {
                            acc += k.at(qi, qj) * f.get(si as usize, sj as usize);
                        }
                    }
                }
                out[(pi * n + pj) as usize] = acc;
            }
        }
        out
    }

    fn random_field(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Field {
        Field::from_vec(1, rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_kernel(rng: &mut ChaCha8Rng, radius: usize) -> Kernel {
        let n = (2 * radius + 1).pow(2);
        Kernel::new(radius, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_leaves_field_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_field(&mut rng, 7, 5);
        for r in 0..3 {
            assert_eq!(conv2d(&f, &make_identity(r)).unwrap(), f);
        }
        let id = make_identity(1);
        assert_eq!(id.weights(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let a = random_kernel(&mut rng, 2);
        assert_eq!(&id + &(0.0 * &a), make_identity(2));
    }

    #[test]
    fn center_impulse_spreads_to_block() {
        let mut f = Field::zeros(1, 5, 5);
        f.set(2, 2, 1.0);
        let ones = Kernel::new(1, vec![1.0; 9]).unwrap();
        let out = conv2d(&f, &ones).unwrap();
        let want = naive(&f, &ones);
        assert_eq!(out.values(), &want[..]);
        for i in 0..5 {
            for j in 0..5 {
                let inside = (1..=3).contains(&i) && (1..=3).contains(&j);
                assert_eq!(out.get(i, j), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn corner_impulse_respects_zero_padding() {
        let mut f = Field::zeros(1, 5, 5);
        f.set(0, 0, 1.0);
        let ones = Kernel::new(1, vec![1.0; 9]).unwrap();
        let out = conv2d(&f, &ones).unwrap();
        assert_eq!(out.values(), &naive(&f, &ones)[..]);
        let nonzero: Vec<_> = (0..25).filter(|&i| out.values()[i] != 0.0).map(|i| (i / 5, i % 5)).collect();
        assert_eq!(nonzero, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn kernel_is_flipped() {
        // A kernel with weight only at offset (0, +1) shifts the field right.
        let mut f = Field::zeros(1, 3, 3);
        f.set(1, 1, 1.0);
        let mut k = Kernel::zeros(1);
        k.weights_mut()[3 + 2] = 1.0;
        let out = conv2d(&f, &k).unwrap();
        assert_eq!(out.get(1, 2), 1.0);
        assert_eq!(out.values().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn gaussian_normalization_and_ratio() {
        for (sigma, r) in [(0.5, 1), (0.5, 2), (2.0, 8), (1.3, 3)] {
            let g = make_gaussian(sigma, r).unwrap();
            assert!((g.sum() - 1.0).abs() < 1e-12);
            let r = r as isize;
            for i in -r..=r {
                for j in -r..=r {
                    assert_eq!(g.at(i, j), g.at(-i, -j));
                }
            }
        }
        let g = make_gaussian(0.5, 2).unwrap();
        let ratio = g.at(0, 1) / g.at(0, 0);
        assert!((ratio - (-2.0f64).exp()).abs() < 1e-15);
        assert!((ratio - 0.135335).abs() < 1e-6);
        assert!(matches!(make_gaussian(0.0, 2), Err(StencilError::Sigma(_))));
        assert!(matches!(make_gaussian(-1.0, 2), Err(StencilError::Sigma(_))));
    }

    #[test]
    fn gaussian_preserves_constants_in_the_interior() {
        let g = make_gaussian(0.7, 2).unwrap();
        let f = Field::constant(1, 9, 9, 3.5);
        let out = conv2d(&f, &g).unwrap();
        for i in 2..7 {
            for j in 2..7 {
                assert!((out.get(i, j) - 3.5).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn nan_input_rejected() {
        let mut f = Field::zeros(1, 2, 2);
        f.values_mut()[3] = f64::NAN;
        assert_eq!(conv2d(&f, &make_identity(1)), Err(StencilError::NonFinite(3)));
    }

    #[test]
    fn adjoints_match_inner_products() {
        // <k ⋆ x, g> == <x, adj_x(g)> == <k, adj_k(g, x)>
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (rows, cols, r) in [(6, 7, 1), (5, 5, 2), (3, 4, 2), (1, 1, 1)] {
            let x = random_field(&mut rng, rows, cols);
            let g = random_field(&mut rng, rows, cols);
            let k = random_kernel(&mut rng, r);
            let y = conv2d(&x, &k).unwrap();
            let lhs: f64 = y.values().iter().zip(g.values()).map(|(a, b)| a * b).sum();
            let mut gx = vec![0.0; rows * cols];
            conv_adjoint_input(g.values(), rows, cols, k.weights(), r, 1.0, &mut gx);
            let mid: f64 = gx.iter().zip(x.values()).map(|(a, b)| a * b).sum();
            let mut gk = vec![0.0; k.weights().len()];
            conv_adjoint_kernel(g.values(), x.values(), rows, cols, r, 1.0, &mut gk);
            let rhs: f64 = gk.iter().zip(k.weights()).map(|(a, b)| a * b).sum();
            assert!((lhs - mid).abs() < 1e-12 && (lhs - rhs).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn fast_path_matches_naive(rows in 1usize..9, cols in 1usize..9, r in 0usize..3, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_field(&mut rng, rows, cols);
            let k = random_kernel(&mut rng, r);
            let fast = conv2d(&f, &k).unwrap();
            for (a, b) in fast.values().iter().zip(naive(&f, &k)) {
                prop_assert!((a - b).abs() <= 1e-14);
            }
        }

        #[test]
        fn convolution_is_bilinear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_field(&mut rng, 6, 5);
            let g = random_field(&mut rng, 6, 5);
            let k1 = random_kernel(&mut rng, 2);
            let k2 = random_kernel(&mut rng, 1);
            let combo = f.zip_map(&g, |x, y| a * x + b * y);
            let lhs = conv2d(&combo, &k1).unwrap();
            let (cf, cg) = (conv2d(&f, &k1).unwrap(), conv2d(&g, &k1).unwrap());
            for i in 0..lhs.len() {
                prop_assert!((lhs.values()[i] - (a * cf.values()[i] + b * cg.values()[i])).abs() < 1e-12);
            }
            let kk = &(a * &k1) + &(b * &k2);
            let lhs = conv2d(&f, &kk).unwrap();
            let (c1, c2) = (conv2d(&f, &k1).unwrap(), conv2d(&f, &k2).unwrap());
            for i in 0..lhs.len() {
                prop_assert!((lhs.values()[i] - (a * c1.values()[i] + b * c2.values()[i])).abs() < 1e-12);
            }
        }
    }
}
