use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::forward::Branch;
use super::{NetConfig, NetError};

/// Name of one learnable tensor. Indices are 1-based like the levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    /// Left-branch kernel `A^{j,l}_{k,s}` at time step `n`.
    Left { n: usize, j: usize, l: usize, k: usize, s: usize },
    /// Right-branch kernel `Ã^{j,l}_{k,s}`.
    Right { n: usize, j: usize, l: usize, k: usize, s: usize },
    /// Closing kernel `A*_s`.
    Final { n: usize, s: usize },
    /// Image bias kernel of the first substep of a level (`s` over the three colour planes).
    BiasKernel { n: usize, branch: Branch, j: usize, k: usize, s: usize },
    /// Scalar bias of substeps `l > 1`.
    BiasScalar { n: usize, branch: Branch, j: usize, l: usize, k: usize },
    /// Closing scalar bias `b*`.
    FinalBias { n: usize },
    /// Skip weight `ω_j`.
    Skip { n: usize, j: usize },
    /// Initial kernel `W⁰_s`.
    Init { s: usize },
    /// Batch-norm scale of one channel.
    BnScale { n: usize, branch: Branch, j: usize, l: usize, k: usize },
    /// Batch-norm shift of one channel.
    BnShift { n: usize, branch: Branch, j: usize, l: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    key: ParamKey,
    offset: usize,
    len: usize,
    radius: usize,
}

/// Offsets of every tensor in the flat parameter vector, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    entries: Vec<Entry>,
    index: HashMap<ParamKey, usize>,
    bn_channels: Vec<ParamKey>,
    bn_index: HashMap<ParamKey, usize>,
    total: usize,
    stored_steps: usize,
}

impl Layout {
    /// Canonical order: for each time step, left kernels, right kernels, closing kernels,
    /// biases (left, right, closing), skip weights; then the initial kernels; then the
    /// batch-norm scale/shift pairs per time step.
    pub fn new(cfg: &NetConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut b = Builder::default();
        let stored = if cfg.tie_weights { 1 } else { cfg.steps.max(1) };
        let big_j = cfg.levels;
        for n in 0..stored {
            for j in 1..=big_j {
                for l in 1..=cfg.substeps[j - 1] {
                    for k in 1..=cfg.width(j) {
                        for s in 1..=cfg.left_fan_in(j, l) {
                            b.kernel(ParamKey::Left { n, j, l, k, s }, cfg.radius(j));
                        }
                    }
                }
            }
            for j in 1..big_j {
                for l in 1..=cfg.substeps[j - 1] {
                    for k in 1..=cfg.width(j) {
                        for s in 1..=cfg.right_fan_in(j, l) {
                            b.kernel(ParamKey::Right { n, j, l, k, s }, cfg.radius(j));
                        }
                    }
                }
            }
            for s in 1..=cfg.width(1) {
                b.kernel(ParamKey::Final { n, s }, cfg.radius(1));
            }
            for (branch, top) in [(Branch::Left, big_j), (Branch::Right, big_j - 1)] {
                for j in 1..=top {
                    for l in 1..=cfg.substeps[j - 1] {
                        for k in 1..=cfg.width(j) {
                            if l == 1 {
                                for s in 1..=3 {
                                    b.kernel(ParamKey::BiasKernel { n, branch, j, k, s }, cfg.radius(j));
                                }
                            } else {
                                b.scalar(ParamKey::BiasScalar { n, branch, j, l, k });
                            }
                        }
                    }
                }
            }
            b.scalar(ParamKey::FinalBias { n });
            for j in 1..big_j {
                b.scalar(ParamKey::Skip { n, j });
            }
        }
        for s in 1..=3 {
            b.kernel(ParamKey::Init { s }, cfg.radii.init);
        }
        let mut bn_channels = Vec::new();
        if cfg.batchnorm {
            for n in 0..stored {
                for (branch, top) in [(Branch::Left, big_j), (Branch::Right, big_j - 1)] {
                    for j in 1..=top {
                        for l in 1..=cfg.substeps[j - 1] {
                            for k in 1..=cfg.width(j) {
                                let scale = ParamKey::BnScale { n, branch, j, l, k };
                                b.scalar(scale);
                                b.scalar(ParamKey::BnShift { n, branch, j, l, k });
                                bn_channels.push(scale);
                            }
                        }
                    }
                }
            }
        }
        let bn_index = bn_channels.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let index = b.entries.iter().enumerate().map(|(i, e)| (e.key, i)).collect();
        Ok(Self { entries: b.entries, index, bn_channels, bn_index, total: b.total, stored_steps: stored })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn tensor_count(&self) -> usize {
        self.entries.len()
    }

    /// Time steps with their own parameters (1 when weights are tied).
    pub fn stored_steps(&self) -> usize {
        self.stored_steps
    }

    /// `(offset, len)` of a tensor; time indices are folded onto step 0 when weights are tied.
    pub fn get(&self, key: ParamKey) -> Option<(usize, usize)> {
        let key = self.fold(key);
        self.index.get(&key).map(|&i| (self.entries[i].offset, self.entries[i].len))
    }

    /// Offset of a tensor, or a shape error naming it.
    pub fn offset(&self, key: ParamKey) -> Result<usize, NetError> {
        self.get(key).map(|(o, _)| o).ok_or_else(|| NetError::Config(format!("no parameter {key:?} in this layout")))
    }

    pub fn radius(&self, key: ParamKey) -> Option<usize> {
        self.index.get(&self.fold(key)).map(|&i| self.entries[i].radius)
    }

    pub fn keys(&self) -> impl Iterator<Item = (ParamKey, usize, usize)> + '_ {
        self.entries.iter().map(|e| (e.key, e.offset, e.len))
    }

    pub fn bn_channels(&self) -> &[ParamKey] {
        &self.bn_channels
    }

    /// Running-statistics slot of a batch-norm channel (keyed by its scale).
    pub fn bn_slot(&self, scale_key: ParamKey) -> Option<usize> {
        self.bn_index.get(&self.fold(scale_key)).copied()
    }

    /// Checks that the entries tile `0..len` without gaps or overlaps.
    pub fn audit(&self) -> Result<(), NetError> {
        let mut next = 0;
        for e in &self.entries {
            if e.offset != next {
                return Err(NetError::Config(format!("tensor {:?} starts at {} instead of {next}", e.key, e.offset)));
            }
            next += e.len;
        }
        if next != self.total || self.index.len() != self.entries.len() {
            return Err(NetError::Config("layout does not cover the parameter vector exactly once".into()));
        }
        Ok(())
    }

    fn fold(&self, key: ParamKey) -> ParamKey {
        if self.stored_steps != 1 {
            return key;
        }
        match key {
            ParamKey::Left { j, l, k, s, .. } => ParamKey::Left { n: 0, j, l, k, s },
            ParamKey::Right { j, l, k, s, .. } => ParamKey::Right { n: 0, j, l, k, s },
            ParamKey::Final { s, .. } => ParamKey::Final { n: 0, s },
            ParamKey::BiasKernel { branch, j, k, s, .. } => ParamKey::BiasKernel { n: 0, branch, j, k, s },
            ParamKey::BiasScalar { branch, j, l, k, .. } => ParamKey::BiasScalar { n: 0, branch, j, l, k },
            ParamKey::FinalBias { .. } => ParamKey::FinalBias { n: 0 },
            ParamKey::Skip { j, .. } => ParamKey::Skip { n: 0, j },
            ParamKey::Init { s } => ParamKey::Init { s },
            ParamKey::BnScale { branch, j, l, k, .. } => ParamKey::BnScale { n: 0, branch, j, l, k },
            ParamKey::BnShift { branch, j, l, k, .. } => ParamKey::BnShift { n: 0, branch, j, l, k },
        }
    }
}

#[derive(Default)]
struct Builder {
    entries: Vec<Entry>,
    total: usize,
}

impl Builder {
    fn kernel(&mut self, key: ParamKey, radius: usize) {
        let side = 2 * radius + 1;
        self.push(key, side * side, radius);
    }

    fn scalar(&mut self, key: ParamKey) {
        self.push(key, 1, 0);
    }

    fn push(&mut self, key: ParamKey, len: usize, radius: usize) {
        self.entries.push(Entry { key, offset: self.total, len, radius });
        self.total += len;
    }
}

/// The learnable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlParams {
    pub layout: Layout,
    pub values: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl ControlParams {
    /// All-zero tensors (skip weights ½, batch-norm scale 1, `W⁰ = 𝟙/3`).
    pub fn neutral(cfg: &NetConfig) -> Result<Self, NetError> {
        let layout = Layout::new(cfg)?;
        let mut values = vec![0.0; layout.len()];
        for (key, off, len) in layout.keys() {
            match key {
                ParamKey::Skip { .. } => values[off] = 0.5,
                ParamKey::BnScale { .. } => values[off] = 1.0,
                ParamKey::Init { .. } => values[off + len / 2] = 1.0 / 3.0,
                _ => {}
            }
        }
        let channels = layout.bn_channels().len();
        Ok(Self { layout, values, running_mean: vec![0.0; channels], running_var: vec![1.0; channels] })
    }

    /// Seeded random initialization.
    ///
    /// Kernels feeding a substep with scale `γΔt` and `m` inputs of side `K`
    /// get standard deviation `1/(γΔt·√(m K²))`, so the convolution term starts
    /// at the size of its inputs.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self, NetError> {
        let mut p = Self::neutral(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries: Vec<_> = p.layout.keys().collect();
        for (key, off, len) in entries {
            let std = match key {
                ParamKey::Left { j, l, .. } => kernel_std(cfg.left_gamma(j) * cfg.dt, cfg.left_fan_in(j, l), len),
                ParamKey::Right { j, l, .. } => kernel_std(cfg.right_gamma(j) * cfg.dt, cfg.right_fan_in(j, l), len),
                ParamKey::Final { .. } => kernel_std(cfg.dt, cfg.width(1), len),
                ParamKey::BiasKernel { branch, j, .. } => {
                    let g = if branch == Branch::Left { cfg.left_gamma(j) } else { cfg.right_gamma(j) };
                    kernel_std(g * cfg.dt, 3, len)
                }
                ParamKey::Init { .. } => 0.05 / (len as f64).sqrt(),
                _ => continue,
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut p.values[off..off + len] {
                *v += normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, key: ParamKey) -> Option<&[f64]> {
        self.layout.get(key).map(|(o, l)| &self.values[o..o + l])
    }

    pub fn get_mut(&mut self, key: ParamKey) -> Option<&mut [f64]> {
        self.layout.get(key).map(move |(o, l)| &mut self.values[o..o + l])
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().chain(&self.running_mean).chain(&self.running_var).all(|v| v.is_finite())
    }
}

fn kernel_std(scale: f64, fan_in: usize, len: usize) -> f64 {
    1.0 / (scale * ((fan_in * len) as f64).sqrt())
}
