//! Parallel, sequential and hybrid operator-splitting steppers for
//!
//! ```text
//! u_t + Σ (A u + S u + f) = 0
//! ```
//!
//! where every `A` is treated explicitly at `t^n` and every `S` implicitly at
//! `t^{n+1}` through its resolvent `x ↦ (I + γΔt S)^{-1} x`. The engine only
//! sees operators through the [`Operator`] trait, so dense matrices and the
//! nonlinear entropy term share one code path.
//!
//! A [`SchemeSpec`] is a list of parts, each a list of sequential substeps,
//! each a list of parallel channels. One part without a closing step is the
//! hybrid scheme; a flat spec (every substep has one channel reading one
//! input) is what the parallel and sequential schemes consume; `2J − 1` parts
//! plus a closing channel is the general scheme with relaxation.

mod instances;
mod reference;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::potts::{open_sigmoid, ONE_MINUS};

pub use instances::{random_general_instance, random_hybrid_instance, random_spd, Instance};
pub use reference::{
    convergence_csv, convergence_table, expm, observed_order, reference_solution, ConvergenceRow, OrderReport, CONVERGENCE_HEADER,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("singular resolvent system")]
    Singular,
    #[error("invalid scheme: {0}")]
    Spec(String),
    #[error("state has dimension {got}, expected {expected}")]
    Dim { got: usize, expected: usize },
    #[error("observed order undefined: {0}")]
    OrderUndefined(String),
    #[error("operator has no matrix form; a reference solution needs linear operators")]
    Nonlinear,
}

/// Time coefficient `c(t)` multiplying a matrix or forcing vector.
pub type Coefficient = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// An operator on flat state vectors, as seen by the splitting engine.
pub trait Operator: Send + Sync {
    fn dim(&self) -> usize;

    /// `S(t) x`.
    fn apply(&self, t: f64, x: &[f64]) -> Vec<f64>;

    /// Solves `x + scale · S(t) x = rhs`.
    fn resolve(&self, t: f64, scale: f64, rhs: &[f64]) -> Result<Vec<f64>, SplitError>;

    /// Matrix of a linear operator at time `t`; `None` for nonlinear ones.
    fn matrix(&self, t: f64) -> Option<DMatrix<f64>>;

    fn time_dependent(&self) -> bool {
        false
    }
}

pub type Op = Arc<dyn Operator>;

/// A dense linear operator `c(t) M`.
#[derive(Clone)]
pub struct LinOp {
    matrix: DMatrix<f64>,
    coeff: Option<Coefficient>,
    spd: bool,
}

impl fmt::Debug for LinOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinOp")
            .field("matrix", &self.matrix)
            .field("time_dependent", &self.coeff.is_some())
            .field("spd", &self.spd)
            .finish()
    }
}

impl LinOp {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        assert!(matrix.is_square(), "operators act on one state space");
        Self { matrix, coeff: None, spd: false }
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(DMatrix::from_element(1, 1, value))
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(DMatrix::zeros(dim, dim))
    }

    pub fn with_coefficient(mut self, coeff: Coefficient) -> Self {
        self.coeff = Some(coeff);
        self
    }

    /// Marks the operator as symmetric positive definite (checked by Cholesky).
    pub fn assert_spd(mut self) -> Self {
        let sym = (&self.matrix - self.matrix.transpose()).amax() <= 1e-12 * self.matrix.amax().max(1.0);
        assert!(sym && self.matrix.clone().cholesky().is_some(), "matrix is not SPD");
        self.spd = true;
        self
    }

    pub fn is_spd(&self) -> bool {
        self.spd
    }

    pub fn into_op(self) -> Op {
        Arc::new(self)
    }

    fn scale_at(&self, t: f64) -> f64 {
        self.coeff.as_ref().map_or(1.0, |c| c(t))
    }
}

impl Operator for LinOp {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let y = &self.matrix * DVector::from_column_slice(x) * self.scale_at(t);
        y.as_slice().to_vec()
    }

    fn resolve(&self, t: f64, scale: f64, rhs: &[f64]) -> Result<Vec<f64>, SplitError> {
        let n = self.dim();
        if self.matrix.iter().all(|&v| v == 0.0) {
            return Ok(rhs.to_vec());
        }
        let sys = DMatrix::identity(n, n) + &self.matrix * (scale * self.scale_at(t));
        let sol = sys.lu().solve(&DVector::from_column_slice(rhs)).ok_or(SplitError::Singular)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(SplitError::Singular);
        }
        Ok(sol.as_slice().to_vec())
    }

    fn matrix(&self, t: f64) -> Option<DMatrix<f64>> {
        Some(&self.matrix * self.scale_at(t))
    }

    fn time_dependent(&self) -> bool {
        self.coeff.is_some()
    }
}

/// The entropy operator `S(u) = ε ln(u/(1−u))`, resolved by sigmoid fixed-point sweeps.
///
/// Its resolvent `x + γΔt ε ln(x/(1−x)) = rhs` is the activation of the network
/// with `C1 Δt = γΔt` and no length term. The sweeps contract when `γΔt ε > 1/4`.
#[derive(Debug, Clone)]
pub struct EntropyOp {
    pub dim: usize,
    pub epsilon: f64,
    pub iters: usize,
}

impl Operator for EntropyOp {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, _t: f64, x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let v = v.clamp(f64::MIN_POSITIVE, ONE_MINUS);
                self.epsilon * (v / (1.0 - v)).ln()
            })
            .collect()
    }

    fn resolve(&self, _t: f64, scale: f64, rhs: &[f64]) -> Result<Vec<f64>, SplitError> {
        if scale == 0.0 {
            return Ok(rhs.to_vec());
        }
        let mut p = rhs.to_vec();
        for _ in 0..self.iters {
            p = p.iter().zip(rhs).map(|(&pk, &b)| open_sigmoid(-(pk - b) / (scale * self.epsilon))).collect();
        }
        Ok(p)
    }

    fn matrix(&self, _t: f64) -> Option<DMatrix<f64>> {
        None
    }
}

/// A state-independent forcing `c(t) f`.
#[derive(Clone)]
pub struct Forcing {
    vector: Vec<f64>,
    coeff: Option<Coefficient>,
}

impl fmt::Debug for Forcing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Forcing").field("vector", &self.vector).field("time_dependent", &self.coeff.is_some()).finish()
    }
}

impl Forcing {
    pub fn constant(vector: Vec<f64>) -> Self {
        Self { vector, coeff: None }
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(vec![0.0; dim])
    }

    pub fn with_coefficient(mut self, coeff: Coefficient) -> Self {
        self.coeff = Some(coeff);
        self
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        let c = self.coeff.as_ref().map_or(1.0, |c| c(t));
        self.vector.iter().map(|v| v * c).collect()
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn time_dependent(&self) -> bool {
        self.coeff.is_some()
    }
}

/// One parallel sub-problem: explicit operators applied to the previous
/// substep's per-channel states (one per input), an implicit operator, and a forcing.
#[derive(Clone, Debug)]
pub struct Channel {
    pub explicit: Vec<Op>,
    pub implicit: Op,
    pub forcing: Forcing,
}

impl fmt::Debug for dyn Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Operator(dim={})", self.dim())
    }
}

impl Channel {
    pub fn new(explicit: Vec<Op>, implicit: Op, forcing: Forcing) -> Self {
        Self { explicit, implicit, forcing }
    }

    pub fn zero(dim: usize, inputs: usize) -> Self {
        Self {
            explicit: (0..inputs).map(|_| LinOp::zero(dim).into_op()).collect(),
            implicit: LinOp::zero(dim).into_op(),
            forcing: Forcing::zero(dim),
        }
    }

    fn fan_in(&self) -> usize {
        self.explicit.len()
    }
}

/// `c_m` parallel channels of one sequential substep.
#[derive(Clone, Debug)]
pub struct Substep {
    pub channels: Vec<Channel>,
}

impl Substep {
    pub fn new(channels: Vec<Channel>) -> Self {
        Self { channels }
    }

    pub fn width(&self) -> usize {
        self.channels.len()
    }

    /// `d_m`, the number of previous states each channel reads.
    pub fn fan_in(&self) -> usize {
        self.channels.first().map_or(0, Channel::fan_in)
    }
}

/// A run of sequential substeps.
#[derive(Clone, Debug)]
pub struct Part {
    pub substeps: Vec<Substep>,
}

impl Part {
    pub fn new(substeps: Vec<Substep>) -> Self {
        Self { substeps }
    }

    fn final_width(&self) -> usize {
        self.substeps.last().map_or(0, Substep::width)
    }
}

/// Abstract splitting problem consumed by the steppers.
#[derive(Clone, Debug)]
pub struct SchemeSpec {
    dim: usize,
    parts: Vec<Part>,
    closing: Option<Channel>,
}

impl SchemeSpec {
    /// `M` operator triples `(A_m, S_m, f_m)`, one per substep.
    pub fn flat(dim: usize, ops: Vec<(Op, Op, Forcing)>) -> Result<Self, SplitError> {
        let substeps = ops.into_iter().map(|(a, s, f)| Substep::new(vec![Channel::new(vec![a], s, f)])).collect();
        Self::hybrid(dim, substeps)
    }

    pub fn hybrid(dim: usize, substeps: Vec<Substep>) -> Result<Self, SplitError> {
        let spec = Self { dim, parts: vec![Part::new(substeps)], closing: None };
        spec.validate()?;
        Ok(spec)
    }

    /// `2J − 1` parts and the closing channel.
    pub fn general(dim: usize, parts: Vec<Part>, closing: Channel) -> Result<Self, SplitError> {
        let spec = Self { dim, parts, closing: Some(closing) };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    pub fn closing(&self) -> Option<&Channel> {
        self.closing.as_ref()
    }

    /// `J` for a general spec.
    pub fn levels(&self) -> usize {
        self.parts.len().div_ceil(2)
    }

    fn is_flat(&self) -> bool {
        self.closing.is_none()
            && self.parts.len() == 1
            && self.parts[0].substeps.iter().all(|s| s.width() == 1 && s.fan_in() == 1)
    }

    fn validate(&self) -> Result<(), SplitError> {
        let err = |m: String| Err(SplitError::Spec(m));
        if self.parts.is_empty() {
            return err("no parts".into());
        }
        if self.closing.is_some() && self.parts.len().is_multiple_of(2) {
            return err(format!("general scheme needs 2J-1 parts, got {}", self.parts.len()));
        }
        let mut prev_width = 1;
        for (j, part) in self.parts.iter().enumerate() {
            if part.substeps.is_empty() {
                return err(format!("part {} has no substeps", j + 1));
            }
            for (m, sub) in part.substeps.iter().enumerate() {
                if sub.width() == 0 {
                    return err(format!("part {} substep {} has no channels", j + 1, m + 1));
                }
                let d = sub.fan_in();
                if sub.channels.iter().any(|c| c.fan_in() != d) {
                    return err(format!("part {} substep {}: channels disagree on fan-in", j + 1, m + 1));
                }
                if d == 0 || d > prev_width {
                    return err(format!("part {} substep {}: d = {d} violates 1 <= d <= {prev_width}", j + 1, m + 1));
                }
                for c in &sub.channels {
                    self.check_channel_dims(c)?;
                }
                prev_width = sub.width();
            }
        }
        if let Some(closing) = &self.closing {
            let j_levels = self.levels();
            for j in j_levels + 1..=2 * j_levels - 1 {
                let mirror = 2 * j_levels - j;
                let (a, b) = (self.parts[j - 1].final_width(), self.parts[mirror - 1].final_width());
                if a != b {
                    return err(format!("part {j} ends with width {a} but its mirror part {mirror} ends with {b}"));
                }
            }
            if closing.fan_in() == 0 || closing.fan_in() > prev_width {
                return err(format!("closing step reads {} states, only {prev_width} available", closing.fan_in()));
            }
            self.check_channel_dims(closing)?;
        }
        Ok(())
    }

    fn check_channel_dims(&self, c: &Channel) -> Result<(), SplitError> {
        let dims = c.explicit.iter().map(|a| a.dim()).chain([c.implicit.dim(), c.forcing.dim()]);
        for d in dims {
            if d != self.dim {
                return Err(SplitError::Dim { got: d, expected: self.dim });
            }
        }
        Ok(())
    }

    fn channels(&self) -> impl Iterator<Item = &Channel> {
        self.parts.iter().flat_map(|p| p.substeps.iter().flat_map(|s| s.channels.iter())).chain(self.closing.iter())
    }

    pub fn time_dependent(&self) -> bool {
        self.channels().any(|c| {
            c.explicit.iter().any(|a| a.time_dependent()) || c.implicit.time_dependent() || c.forcing.time_dependent()
        })
    }

    /// `(L(t), F(t))` of the unsplit system `u' = −(L u + F)`.
    pub fn full_system(&self, t: f64) -> Result<(DMatrix<f64>, DVector<f64>), SplitError> {
        let mut l = DMatrix::zeros(self.dim, self.dim);
        let mut f = DVector::zeros(self.dim);
        for c in self.channels() {
            for a in &c.explicit {
                l += a.matrix(t).ok_or(SplitError::Nonlinear)?;
            }
            l += c.implicit.matrix(t).ok_or(SplitError::Nonlinear)?;
            f += DVector::from_vec(c.forcing.at(t));
        }
        Ok((l, f))
    }
}

/// Which splitting scheme advances the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Parallel,
    Sequential,
    Hybrid,
    GeneralHybrid,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Parallel => "parallel",
            Scheme::Sequential => "sequential",
            Scheme::Hybrid => "hybrid",
            Scheme::GeneralHybrid => "general_hybrid",
        }
    }

    pub fn step(&self, u: &[f64], spec: &SchemeSpec, dt: f64, t: f64) -> Result<Vec<f64>, SplitError> {
        match self {
            Scheme::Parallel => parallel_step(u, spec, dt, t),
            Scheme::Sequential => sequential_step(u, spec, dt, t),
            Scheme::Hybrid => hybrid_step(u, spec, dt, t),
            Scheme::GeneralHybrid => general_hybrid_step(u, spec, dt, t),
        }
    }
}

fn check_state(u: &[f64], spec: &SchemeSpec) -> Result<(), SplitError> {
    if u.len() != spec.dim {
        return Err(SplitError::Dim { got: u.len(), expected: spec.dim });
    }
    Ok(())
}

fn require_flat(spec: &SchemeSpec) -> Result<(), SplitError> {
    if !spec.is_flat() {
        return Err(SplitError::Spec("parallel and sequential steps need a flat operator list".into()));
    }
    Ok(())
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Running mean in ascending index order; exact when all states agree.
fn mean_of(states: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = states[0].clone();
    for (k, s) in states.iter().enumerate().skip(1) {
        let w = 1.0 / (k + 1) as f64;
        for (a, x) in acc.iter_mut().zip(s) {
            *a += (x - *a) * w;
        }
    }
    acc
}

/// Parallel splitting with explicit `A`: `M` independent solves from `u^n` with step `MΔt`, averaged.
pub fn parallel_step(u: &[f64], spec: &SchemeSpec, dt: f64, t: f64) -> Result<Vec<f64>, SplitError> {
    check_state(u, spec)?;
    require_flat(spec)?;
    let subs = &spec.parts[0].substeps;
    let scale = subs.len() as f64 * dt;
    let mut outs = Vec::with_capacity(subs.len());
    for sub in subs {
        let c = &sub.channels[0];
        let mut rhs = u.to_vec();
        axpy(&mut rhs, -scale, &c.explicit[0].apply(t, u));
        axpy(&mut rhs, -scale, &c.forcing.at(t + dt));
        outs.push(c.implicit.resolve(t + dt, scale, &rhs)?);
    }
    Ok(mean_of(&outs))
}

/// Marchuk–Yanenko sequential splitting with explicit `A`.
pub fn sequential_step(u: &[f64], spec: &SchemeSpec, dt: f64, t: f64) -> Result<Vec<f64>, SplitError> {
    check_state(u, spec)?;
    require_flat(spec)?;
    let mut cur = u.to_vec();
    for sub in &spec.parts[0].substeps {
        let c = &sub.channels[0];
        let mut rhs = cur.clone();
        axpy(&mut rhs, -dt, &c.explicit[0].apply(t, &cur));
        axpy(&mut rhs, -dt, &c.forcing.at(t + dt));
        cur = c.implicit.resolve(t + dt, dt, &rhs)?;
    }
    Ok(cur)
}

/// Per-channel states and their average after a part.
struct PartState {
    states: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

/// Runs the sequential substeps of one part with time-scale factor `factor`
/// (each channel of substep `m` uses step `factor · c_m · Δt`).
fn run_part(part: &Part, factor: f64, start: PartState, dt: f64, t: f64) -> Result<PartState, SplitError> {
    let mut cur = start;
    for sub in &part.substeps {
        let scale = factor * sub.width() as f64 * dt;
        let mut next = Vec::with_capacity(sub.width());
        for c in &sub.channels {
            let mut rhs = cur.mean.clone();
            for (a, s) in c.explicit.iter().zip(&cur.states) {
                axpy(&mut rhs, -scale, &a.apply(t, s));
            }
            axpy(&mut rhs, -scale, &c.forcing.at(t));
            next.push(c.implicit.resolve(t + dt, scale, &rhs)?);
        }
        let mean = mean_of(&next);
        cur = PartState { states: next, mean };
    }
    Ok(cur)
}

/// The hybrid scheme: sequential substeps, each made of `c_m` parallel solves that are averaged.
pub fn hybrid_step(u: &[f64], spec: &SchemeSpec, dt: f64, t: f64) -> Result<Vec<f64>, SplitError> {
    check_state(u, spec)?;
    if spec.parts.len() != 1 || spec.closing.is_some() {
        return Err(SplitError::Spec("hybrid step needs a single part without closing step".into()));
    }
    let start = PartState { states: vec![u.to_vec()], mean: u.to_vec() };
    Ok(run_part(&spec.parts[0], 1.0, start, dt, t)?.mean)
}

/// The general hybrid scheme with relaxation.
///
/// Parts `1..=J` run with factor `2^{j−1}`. Parts `J+1..=2J−1` run with factor
/// `2^{2J−j}` (the level of the mirrored part) and end with the ½/½ relaxation
/// against the mirrored part's channel states. The closing channel reads the
/// relaxed channel states and advances with plain `Δt`.
pub fn general_hybrid_step(u: &[f64], spec: &SchemeSpec, dt: f64, t: f64) -> Result<Vec<f64>, SplitError> {
    check_state(u, spec)?;
    let closing = spec.closing.as_ref().ok_or_else(|| SplitError::Spec("general step needs a closing channel".into()))?;
    let levels = spec.levels();
    let mut cur = PartState { states: vec![u.to_vec()], mean: u.to_vec() };
    let mut left = Vec::with_capacity(levels);
    for j in 1..=levels {
        cur = run_part(&spec.parts[j - 1], (1u64 << (j - 1)) as f64, cur, dt, t)?;
        left.push(cur.states.clone());
    }
    for j in levels + 1..=2 * levels - 1 {
        let mirror = 2 * levels - j;
        cur = run_part(&spec.parts[j - 1], (1u64 << mirror) as f64, cur, dt, t)?;
        let states: Vec<Vec<f64>> = cur.states.iter().zip(&left[mirror - 1]).map(|(a, b)| relax(a, b)).collect();
        let mean = mean_of(&states);
        cur = PartState { states, mean };
    }
    let mut rhs = cur.mean.clone();
    for (a, s) in closing.explicit.iter().zip(&cur.states) {
        axpy(&mut rhs, -dt, &a.apply(t, s));
    }
    axpy(&mut rhs, -dt, &closing.forcing.at(t));
    closing.implicit.resolve(t + dt, dt, &rhs)
}

/// `½ a + ½ b`.
pub fn relax(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * x + 0.5 * y).collect()
}
