//! The relaxed two-phase Potts energy and the pieces derived from it: the
//! threshold-dynamics perimeter, the Euler–Lagrange residual and the
//! fixed-point activation that solves the implicit entropy substep.
//!
//! All sums carry the cell area `h²` of the field's level. Convolutions use
//! zero padding, so `G_σ * 1` drops below one within a few `σ` of the border.

use thiserror::Error;

use crate::mesh::Field;
use crate::stencil::{conv2d, default_gaussian_radius, make_gaussian, Kernel, StencilError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PottsError {
    #[error("parameter {name} = {value} is out of range")]
    Param { name: &'static str, value: f64 },
    #[error("value {value} at index {index} is outside {range}")]
    Domain { index: usize, value: f64, range: &'static str },
    #[error("field shapes differ")]
    Shape,
    #[error(transparent)]
    Stencil(#[from] StencilError),
}

/// Weights of the relaxed energy and the time step of its gradient flow.
///
/// `eta` is the length weight; the multiphase derivation calls it `λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PottsParams {
    pub epsilon: f64,
    pub eta: f64,
    pub sigma: f64,
    pub dt: f64,
    /// Gaussian half-width; `None` picks `ceil(4σ)`.
    pub gaussian_radius: Option<usize>,
}

impl PottsParams {
    pub fn new(epsilon: f64, eta: f64, sigma: f64, dt: f64) -> Result<Self, PottsError> {
        let p = Self { epsilon, eta, sigma, dt, gaussian_radius: None };
        p.validate()?;
        Ok(p)
    }

    pub fn with_gaussian_radius(mut self, radius: usize) -> Self {
        self.gaussian_radius = Some(radius);
        self
    }

    pub fn validate(&self) -> Result<(), PottsError> {
        let positive = [("epsilon", self.epsilon), ("sigma", self.sigma), ("dt", self.dt)];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(PottsError::Param { name, value });
            }
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(PottsError::Param { name: "eta", value: self.eta });
        }
        Ok(())
    }

    pub fn gaussian(&self) -> Result<Kernel, PottsError> {
        let r = self.gaussian_radius.unwrap_or_else(|| default_gaussian_radius(self.sigma));
        Ok(make_gaussian(self.sigma, r)?)
    }
}

fn check_closed_unit(u: &Field) -> Result<(), PottsError> {
    for (index, &value) in u.values().iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(PottsError::Domain { index, value, range: "[0, 1]" });
        }
    }
    Ok(())
}

/// Threshold-dynamics estimate of the interface length between `{u = 1}` and `{u = 0}`.
///
/// Computes `½ √(π/σ) h² Σ [u (G_σ * (1−u)) + (1−u) (G_σ * u)]`. The bracket
/// counts the boundary of each phase once, so the half turns it into the
/// length of the single interface separating them.
pub fn td_perimeter(u: &Field, sigma: f64) -> Result<f64, PottsError> {
    if !(sigma > 0.0) {
        return Err(PottsError::Param { name: "sigma", value: sigma });
    }
    check_closed_unit(u)?;
    let g = make_gaussian(sigma, default_gaussian_radius(sigma))?;
    let inside = conv2d(u, &g)?;
    let outside = conv2d(&u.map(|v| 1.0 - v), &g)?;
    let mut acc = 0.0;
    for i in 0..u.len() {
        let v = u.values()[i];
        acc += v * outside.values()[i] + (1.0 - v) * inside.values()[i];
    }
    let h = u.step();
    Ok(0.5 * (std::f64::consts::PI / sigma).sqrt() * h * h * acc)
}

/// `x ln x` with the convention `0 ln 0 = 0`.
fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Relaxed energy `h² Σ [v g + ε(v ln v + (1−v) ln(1−v)) + η v (G_σ * (1−v))]`.
pub fn potts_energy(v: &Field, g: &Field, p: &PottsParams) -> Result<f64, PottsError> {
    p.validate()?;
    if !v.same_shape(g) {
        return Err(PottsError::Shape);
    }
    check_closed_unit(v)?;
    g.check_finite().map_err(|_| PottsError::Domain { index: 0, value: f64::NAN, range: "finite" })?;
    let smooth = conv2d(&v.map(|x| 1.0 - x), &p.gaussian()?)?;
    let mut acc = 0.0;
    for i in 0..v.len() {
        let x = v.values()[i];
        acc += x * g.values()[i] + p.epsilon * (xlogx(x) + xlogx(1.0 - x)) + p.eta * x * smooth.values()[i];
    }
    let h = v.step();
    Ok(h * h * acc)
}

/// Pointwise Euler–Lagrange residual `ε ln(u/(1−u)) + η G_σ * (1−2u) + g`.
pub fn el_residual(u: &Field, g: &Field, p: &PottsParams) -> Result<Field, PottsError> {
    p.validate()?;
    if !u.same_shape(g) {
        return Err(PottsError::Shape);
    }
    for (index, &value) in u.values().iter().enumerate() {
        if !(value > 0.0 && value < 1.0) {
            return Err(PottsError::Domain { index, value, range: "(0, 1)" });
        }
    }
    let length = conv2d(&u.map(|x| 1.0 - 2.0 * x), &p.gaussian()?)?;
    Ok(Field::from_vec(
        u.level(),
        u.rows(),
        u.cols(),
        (0..u.len())
            .map(|i| {
                let x = u.values()[i];
                p.epsilon * (x / (1.0 - x)).ln() + p.eta * length.values()[i] + g.values()[i]
            })
            .collect(),
    )
    .expect("residual is finite on (0,1)"))
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_slice(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| sigmoid(x)).collect()
}

/// Largest double below one.
pub(crate) const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

/// Sigmoid pinned inside the open unit interval; plain `sigmoid` rounds to 0 or 1 once `|x| > 37`.
#[inline]
pub(crate) fn open_sigmoid(x: f64) -> f64 {
    sigmoid(x).clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

/// Approximates the solution of `(u − ū)/(C1 Δt) + C2 G_σ*(1−2u) = −ε ln(u/(1−u))`
/// with `iters` sigmoid fixed-point sweeps started from `p⁰ = ū`.
///
/// The length term enters with weight `C2` alone; `C2 = η` on the closing substep.
pub fn activation_fixed_point(u_bar: &Field, c1: f64, c2: f64, p: &PottsParams, iters: usize) -> Result<Field, PottsError> {
    p.validate()?;
    if !(c1 > 0.0) {
        return Err(PottsError::Param { name: "C1", value: c1 });
    }
    if !(c2 >= 0.0) {
        return Err(PottsError::Param { name: "C2", value: c2 });
    }
    if iters == 0 {
        return Err(PottsError::Param { name: "iters", value: 0.0 });
    }
    let gauss = if c2 > 0.0 { Some(p.gaussian()?) } else { None };
    let inv_c1dt = 1.0 / (c1 * p.dt);
    let mut cur = u_bar.clone();
    for _ in 0..iters {
        let length = match &gauss {
            Some(g) => Some(conv2d(&cur.map(|x| 1.0 - 2.0 * x), g)?),
            None => None,
        };
        let next: Vec<f64> = (0..cur.len())
            .map(|i| {
                let mut z = (cur.values()[i] - u_bar.values()[i]) * inv_c1dt;
                if let Some(l) = &length {
                    z += c2 * l.values()[i];
                }
                open_sigmoid(-z / p.epsilon)
            })
            .collect();
        cur = Field::from_vec(u_bar.level(), u_bar.rows(), u_bar.cols(), next).map_err(|_| PottsError::Domain {
            index: 0,
            value: f64::NAN,
            range: "finite",
        })?;
    }
    Ok(cur)
}

/// Result of [`minimize_energy`].
#[derive(Debug, Clone)]
pub struct Minimizer {
    /// Per-pixel logits `ln(v/(1−v))`; kept so saturated pixels stay resolvable.
    pub logits: Vec<f64>,
    pub field: Field,
    pub sweeps: usize,
    /// Max absolute Euler–Lagrange residual at exit.
    pub residual: f64,
}

impl Minimizer {
    /// `max_p min(v_p, 1 − v_p)`, computed from the logits.
    pub fn max_distance_to_binary(&self) -> f64 {
        self.logits.iter().map(|z| sigmoid(-z.abs())).fold(0.0, f64::max)
    }
}

/// Exact coordinate descent on the relaxed energy.
///
/// Each pixel update globally minimizes the one-dimensional restriction of the
/// energy (entropy is convex, the self-interaction of the length term is
/// concave, so the restriction has at most three stationary points; all are
/// found by bracketing in logit space). Sweeps repeat until the largest
/// Euler–Lagrange residual drops below `tol` or `max_sweeps` is reached.
pub fn minimize_energy(g: &Field, p: &PottsParams, tol: f64, max_sweeps: usize) -> Result<Minimizer, PottsError> {
    p.validate()?;
    let kernel = p.gaussian()?;
    let (rows, cols) = (g.rows(), g.cols());
    let n = rows * cols;
    let r = kernel.radius() as isize;
    let g0 = kernel.at(0, 0);
    // Zero-padded G * 1.
    let g_one = conv2d(&Field::constant(g.level(), rows, cols, 1.0), &kernel)?;
    let mut z = vec![0.0; n];
    let mut v = vec![0.5; n];

    let others = |v: &[f64], i: usize| -> f64 {
        let (pi, pj) = ((i / cols) as isize, (i % cols) as isize);
        let mut acc = 0.0;
        for di in -r..=r {
            for dj in -r..=r {
                if di == 0 && dj == 0 {
                    continue;
                }
                let (qi, qj) = (pi - di, pj - dj);
                if qi >= 0 && qi < rows as isize && qj >= 0 && qj < cols as isize {
                    acc += kernel.at(di, dj) * v[(qi as usize) * cols + qj as usize];
                }
            }
        }
        acc
    };
    let residual_at = |v: &[f64], z: &[f64], i: usize| -> f64 {
        let gv = others(v, i) + g0 * v[i];
        p.epsilon * z[i] + p.eta * (g_one.values()[i] - 2.0 * gv) + g.values()[i]
    };

    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    while sweeps < max_sweeps {
        for i in 0..n {
            let alpha = g.values()[i] + p.eta * g_one.values()[i] - 2.0 * p.eta * others(&v, i);
            let zi = minimize_scalar(alpha, p.epsilon, p.eta * g0);
            z[i] = zi;
            v[i] = sigmoid(zi);
        }
        sweeps += 1;
        residual = (0..n).map(|i| residual_at(&v, &z, i).abs()).fold(0.0, f64::max);
        if residual <= tol {
            break;
        }
    }
    let field = Field::from_vec(g.level(), rows, cols, v).expect("sigmoid output is finite");
    Ok(Minimizer { logits: z, field, sweeps, residual })
}

/// Global minimizer (as a logit) of `φ(x) = αx − κx² + ε[x ln x + (1−x) ln(1−x)]` on (0,1).
fn minimize_scalar(alpha: f64, eps: f64, kappa: f64) -> f64 {
    // φ'(x(z)) = α + ε z − 2κ σ(z), which is −∞ at z → −∞ and +∞ at z → +∞.
    let dphi = |z: f64| alpha + eps * z - 2.0 * kappa * sigmoid(z);
    let phi = |z: f64| {
        let x = sigmoid(z);
        let y = sigmoid(-z);
        // x ln x + y ln y with ln x = -softplus(-z), ln y = -softplus(z).
        let ent = -(x * softplus(-z) + y * softplus(z));
        alpha * x - kappa * x * x + eps * ent
    };
    // d/dz φ'(z) = ε − 2κ σ(1−σ) vanishes where σ(1−σ) = ε/(2κ).
    let mut breaks = Vec::new();
    if kappa > 0.0 {
        let q = eps / (2.0 * kappa);
        if q < 0.25 {
            let disc = (1.0 - 4.0 * q).sqrt();
            let s_lo = 0.5 * (1.0 - disc);
            let s_hi = 0.5 * (1.0 + disc);
            breaks.push((s_lo / (1.0 - s_lo)).ln());
            breaks.push((s_hi / (1.0 - s_hi)).ln());
        }
    }
    // Outer brackets: |φ'| dominated by ε z beyond these.
    let span = (alpha.abs() + 2.0 * kappa) / eps + 1.0;
    let mut pts = vec![-span];
    pts.extend(breaks.iter().copied().filter(|b| b.abs() < span));
    pts.push(span);
    let mut best = (f64::INFINITY, 0.0);
    for w in pts.windows(2) {
        let (mut a, mut b) = (w[0], w[1]);
        let (fa, fb) = (dphi(a), dphi(b));
        if fa > 0.0 || fb < 0.0 {
            continue;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m == a || m == b {
                break;
            }
            if dphi(m) < 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        let zc = 0.5 * (a + b);
        let val = phi(zc);
        if val < best.0 {
            best = (val, zc);
        }
    }
    best.1
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(eps: f64, eta: f64) -> PottsParams {
        PottsParams::new(eps, eta, 0.8, 0.5).unwrap()
    }

    fn disk(n: usize, radius: f64) -> Field {
        let c = n as f64 / 2.0 - 0.5;
        let mut f = Field::zeros(1, n, n);
        for i in 0..n {
            for j in 0..n {
                let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                f.set(i, j, if d2 <= radius * radius { 1.0 } else { 0.0 });
            }
        }
        f
    }

    #[test]
    fn perimeter_of_trivial_regions_is_zero() {
        assert_eq!(td_perimeter(&Field::zeros(1, 16, 16), 2.0).unwrap(), 0.0);
        assert_eq!(td_perimeter(&Field::constant(1, 16, 16, 1.0), 2.0).unwrap(), 0.0);
    }

    #[test]
    fn perimeter_of_disk() {
        let est = td_perimeter(&disk(128, 16.0), 2.0).unwrap();
        let exact = 2.0 * std::f64::consts::PI * 16.0;
        assert!((est - exact).abs() / exact < 0.1, "{est} vs {exact}");
    }

    #[test]
    fn perimeter_is_swap_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Field::from_vec(1, 12, 10, (0..120).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let a = td_perimeter(&u, 1.0).unwrap();
        let b = td_perimeter(&u.map(|x| 1.0 - x), 1.0).unwrap();
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn perimeter_rejects_out_of_range() {
        let u = Field::constant(1, 2, 2, 1.5);
        assert!(matches!(td_perimeter(&u, 1.0), Err(PottsError::Domain { .. })));
    }

    #[test]
    fn energy_at_one_half() {
        let eps = 0.7;
        let v = Field::constant(1, 4, 6, 0.5);
        let g = Field::zeros(1, 4, 6);
        let e = potts_energy(&v, &g, &params(eps, 0.0)).unwrap();
        let want = eps * -(2f64.ln()) * 24.0;
        assert!((e - want).abs() < 1e-12);
        // Coarser level: each pixel carries area h² = 4.
        let e2 = potts_energy(&v.clone().with_level(2), &g.clone().with_level(2), &params(eps, 0.0)).unwrap();
        assert!((e2 - 4.0 * want).abs() < 1e-12);
    }

    #[test]
    fn binary_fields_have_zero_entropy() {
        let v = disk(8, 2.0);
        let g = Field::zeros(1, 8, 8);
        assert_eq!(potts_energy(&v, &g, &params(3.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn positive_fidelity_prefers_empty_region() {
        let g = Field::constant(1, 3, 3, 0.4);
        let p = PottsParams { epsilon: 1e-300, eta: 0.0, ..params(1.0, 0.0) };
        let zero = potts_energy(&Field::zeros(1, 3, 3), &g, &p).unwrap();
        assert_eq!(zero, 0.0);
        for c in [0.1, 0.5, 1.0] {
            assert!(potts_energy(&Field::constant(1, 3, 3, c), &g, &p).unwrap() > zero);
        }
    }

    #[test]
    fn residual_cases() {
        let half = Field::constant(1, 5, 5, 0.5);
        let zero = Field::zeros(1, 5, 5);
        let r = el_residual(&half, &zero, &params(1.0, 2.0)).unwrap();
        assert!(r.values().iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Field::from_vec(1, 5, 5, (0..25).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let eps = 0.6;
        let u = g.map(|x| sigmoid(-x / eps));
        let r = el_residual(&u, &g, &params(eps, 0.0)).unwrap();
        assert!(r.values().iter().all(|x| x.abs() < 1e-12));

        // G*(1−2u) vanishes identically at u = ½, even next to the border.
        let r = el_residual(&half, &g, &params(eps, 5.0)).unwrap();
        assert_eq!(r.values(), g.values());

        let edge = Field::constant(1, 5, 5, 1.0);
        assert!(matches!(el_residual(&edge, &g, &params(eps, 0.0)), Err(PottsError::Domain { .. })));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        for x in [-30.0, -2.5, -0.1, 0.3, 7.0] {
            assert!((sigmoid(x) - (1.0 - sigmoid(-x))).abs() < 1e-15);
        }
        let big = sigmoid(500.0);
        assert!(big > 0.0 && big <= 1.0);
        let small = sigmoid(-500.0);
        assert!((0.0..1.0).contains(&small) && small.is_finite());
    }

    #[test]
    fn first_sweep_without_length_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ub = Field::from_vec(1, 6, 6, (0..36).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap();
        let p = params(2.0, 80.0);
        let p1 = activation_fixed_point(&ub, 1.0, 0.0, &p, 1).unwrap();
        assert!(p1.values().iter().all(|&x| x == 0.5));

        let p2 = activation_fixed_point(&ub, 0.7, 0.0, &p, 2).unwrap();
        for (got, &u) in p2.values().iter().zip(ub.values()) {
            let want = sigmoid(-(0.5 - u) / (p.epsilon * 0.7 * p.dt));
            assert!((got - want).abs() < 1e-15);
        }

        let half = Field::constant(1, 3, 3, 0.5);
        for it in 1..6 {
            let out = activation_fixed_point(&half, 1.0, 0.0, &p, it).unwrap();
            assert!(out.values().iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn activation_converges_to_scalar_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let p = PottsParams::new(2.0, 0.0, 0.5, 0.5).unwrap();
        for _ in 0..10 {
            let ub = rng.gen_range(-3.0..3.0);
            let c1 = rng.gen_range(0.5..2.0);
            // Bisection oracle on (p − ū)/(C1Δt) + ε ln(p/(1−p)) = 0.
            let f = |x: f64| (x - ub) / (c1 * p.dt) + p.epsilon * (x / (1.0 - x)).ln();
            let (mut a, mut b) = (1e-15, 1.0 - 1e-15);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if f(m) < 0.0 {
                    a = m
                } else {
                    b = m
                }
            }
            let root = 0.5 * (a + b);
            let field = Field::constant(1, 1, 1, ub);
            let got = activation_fixed_point(&field, c1, 0.0, &p, 200).unwrap().values()[0];
            assert!((got - root).abs() < 1e-8, "{got} vs {root}");
        }
    }

    #[test]
    fn activation_stays_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = PottsParams::new(0.5, 3.0, 0.5, 0.5).unwrap().with_gaussian_radius(2);
        for iters in 1..5 {
            let ub = Field::from_vec(1, 8, 8, (0..64).map(|_| rng.gen_range(-20.0..20.0)).collect()).unwrap();
            let out = activation_fixed_point(&ub, 1.0, p.eta, &p, iters).unwrap();
            assert!(out.values().iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn projected_descent_decreases_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = Field::from_vec(1, 4, 4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = PottsParams::new(0.3, 0.5, 0.8, 0.5).unwrap();
        let mut v = Field::constant(1, 4, 4, 0.5);
        let mut last = potts_energy(&v, &g, &p).unwrap();
        for _ in 0..200 {
            let grad = el_residual(&v, &g, &p).unwrap();
            v = v.zip_map(&grad, |x, d| (x - 0.05 * d).clamp(1e-6, 1.0 - 1e-6));
            let e = potts_energy(&v, &g, &p).unwrap();
            assert!(e <= last + 1e-12, "{e} > {last}");
            last = e;
        }
    }

    #[test]
    fn scalar_minimizer_is_global() {
        // Compare against a dense logit grid scan.
        for &(alpha, eps, kappa) in &[(0.3, 0.01, 0.4), (-0.2, 0.05, 1.0), (0.0, 0.1, 0.0), (0.41, 0.02, 0.4)] {
            let z = minimize_scalar(alpha, eps, kappa);
            let phi = |x: f64| alpha * x - kappa * x * x + eps * (xlogx(x) + xlogx(1.0 - x));
            let best = (1..100_000).map(|i| phi(i as f64 / 100_000.0)).fold(f64::INFINITY, f64::min);
            assert!(phi(sigmoid(z)) <= best + 1e-9);
        }
    }

    #[test]
    fn coordinate_descent_reaches_stationarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = Field::from_vec(1, 4, 4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = PottsParams::new(0.5, 0.3, 0.8, 0.5).unwrap();
        let m = minimize_energy(&g, &p, 1e-10, 10_000).unwrap();
        assert!(m.residual <= 1e-10, "residual {}", m.residual);
        let r = el_residual(&m.field, &g, &p).unwrap();
        assert!(r.values().iter().all(|x| x.abs() < 1e-9));
    }
}
