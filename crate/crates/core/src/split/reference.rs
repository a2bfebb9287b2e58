use nalgebra::{DMatrix, DVector};

use super::{Scheme, SchemeSpec, SplitError};

/// Matrix exponential by scaling and squaring with a Taylor series
/// truncated once a term drops below `1e-14` of the running sum.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square());
    let n = a.nrows();
    let norm = a.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(squarings);
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..64 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.amax() <= 1e-14 * sum.amax() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Exact (constant coefficients) or fine classical RK4 (time-dependent) solution at `T`.
///
/// Constant systems `u' = −(L u + F)` are solved through the augmented
/// generator `[[−L, −F], [0, 0]]`; RK4 uses `min(dts)/64`.
pub fn reference_solution(spec: &SchemeSpec, u0: &[f64], horizon: f64, dts: &[f64]) -> Result<Vec<f64>, SplitError> {
    let n = spec.dim();
    if spec.time_dependent() {
        let h = dts.iter().copied().fold(f64::INFINITY, f64::min) / 64.0;
        let steps = (horizon / h).round() as usize;
        let h = horizon / steps as f64;
        let rhs = |t: f64, u: &DVector<f64>| -> Result<DVector<f64>, SplitError> {
            let (l, f) = spec.full_system(t)?;
            Ok(-(l * u + f))
        };
        let mut u = DVector::from_column_slice(u0);
        for i in 0..steps {
            let t = i as f64 * h;
            let k1 = rhs(t, &u)?;
            let k2 = rhs(t + 0.5 * h, &(&u + &k1 * (0.5 * h)))?;
            let k3 = rhs(t + 0.5 * h, &(&u + &k2 * (0.5 * h)))?;
            let k4 = rhs(t + h, &(&u + &k3 * h))?;
            u += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        return Ok(u.as_slice().to_vec());
    }
    let (l, f) = spec.full_system(0.0)?;
    let mut gen = DMatrix::zeros(n + 1, n + 1);
    gen.view_mut((0, 0), (n, n)).copy_from(&(-l));
    gen.view_mut((0, n), (n, 1)).copy_from(&(-f));
    let mut x = DVector::zeros(n + 1);
    x.rows_mut(0, n).copy_from_slice(u0);
    x[n] = 1.0;
    let y = expm(&(gen * horizon)) * x;
    Ok(y.rows(0, n).iter().copied().collect())
}

/// Errors per step size and the mean observed order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderReport {
    /// `(Δt, ‖u_num(T) − u_ref(T)‖_∞)` in the order given.
    pub errors: Vec<(f64, f64)>,
    /// Mean of `log2(e(Δt)/e(Δt/2))` over consecutive pairs.
    pub order: f64,
}

/// Measures the convergence order of `scheme` on `spec` against [`reference_solution`].
pub fn observed_order(
    scheme: Scheme,
    spec: &SchemeSpec,
    u0: &[f64],
    horizon: f64,
    dts: &[f64],
) -> Result<OrderReport, SplitError> {
    if dts.len() < 2 {
        return Err(SplitError::OrderUndefined("need at least two step sizes".into()));
    }
    for w in dts.windows(2) {
        if ((w[0] / w[1]) - 2.0).abs() > 1e-9 {
            return Err(SplitError::OrderUndefined(format!("steps {} and {} are not a halving", w[0], w[1])));
        }
    }
    let exact = reference_solution(spec, u0, horizon, dts)?;
    let mut errors = Vec::with_capacity(dts.len());
    for &dt in dts {
        let steps = (horizon / dt).round() as usize;
        if steps == 0 || (steps as f64 * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(SplitError::OrderUndefined(format!("step {dt} does not divide the horizon {horizon}")));
        }
        let mut u = u0.to_vec();
        for i in 0..steps {
            u = scheme.step(&u, spec, dt, i as f64 * dt)?;
        }
        let err = u.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        errors.push((dt, err));
    }
    if errors[0].1 == 0.0 {
        return Err(SplitError::OrderUndefined("zero error at the coarsest step".into()));
    }
    let mut total = 0.0;
    for w in errors.windows(2) {
        let ratio = w[0].1 / w[1].1;
        if !ratio.is_finite() || ratio <= 0.0 {
            return Err(SplitError::OrderUndefined(format!("error vanished at step {}", w[1].0)));
        }
        total += ratio.log2();
    }
    Ok(OrderReport { order: total / (errors.len() - 1) as f64, errors })
}

/// One row of the convergence table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub scheme: &'static str,
    pub seed: u64,
    pub dt: f64,
    pub error: f64,
    /// Mean order of the instance, repeated on each of its rows.
    pub order: f64,
}

pub const CONVERGENCE_HEADER: &str = "scheme,instance_seed,dt,error,observed_order";

/// Runs the hybrid scheme on constant instances and the general scheme on
/// time-dependent instances, one of each per seed, over the horizon `[0, 1]`.
pub fn convergence_table(seeds: &[u64], dts: &[f64]) -> Result<Vec<ConvergenceRow>, SplitError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for inst in [super::random_hybrid_instance(seed), super::random_general_instance(seed, true)] {
            let report = observed_order(inst.scheme, &inst.spec, &inst.u0, 1.0, dts)?;
            for &(dt, error) in &report.errors {
                rows.push(ConvergenceRow { scheme: inst.scheme.name(), seed, dt, error, order: report.order });
            }
        }
    }
    Ok(rows)
}

/// CSV text for [`convergence_table`] rows.
pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut s = format!("{CONVERGENCE_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.6e},{:.6}\n", r.scheme, r.seed, r.dt, r.error, r.order));
    }
    s
}
