use crate::mesh::{Field, Pool};
use crate::stencil::{make_gaussian, Kernel};
use crate::tape::{ActOutput, Activation, Combine, ConvTerm, Shape, Tape, Var};

use super::api::Bias;
use super::{ControlParams, NetConfig, NetError, ParamKey, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Left,
    Right,
    Final,
}

/// Batch-norm behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the caller folds them into the running averages.
    Train,
    /// Running statistics.
    Infer,
}

/// Three colour planes of `batch` images, each stored `[batch, rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
    pub planes: [Vec<f64>; 3],
}

impl ImageBatch {
    pub fn new(batch: usize, rows: usize, cols: usize, planes: [Vec<f64>; 3]) -> Result<Self, NetError> {
        let n = batch * rows * cols;
        if batch == 0 || planes.iter().any(|p| p.len() != n) {
            return Err(NetError::Input(format!("colour planes must hold {batch} images of {rows}x{cols}")));
        }
        Ok(Self { batch, rows, cols, planes })
    }

    /// Stacks per-image colour planes.
    pub fn from_images(images: &[[Field; 3]]) -> Result<Self, NetError> {
        let first = images.first().ok_or_else(|| NetError::Input("empty batch".into()))?;
        let (rows, cols) = (first[0].rows(), first[0].cols());
        let mut planes: [Vec<f64>; 3] = Default::default();
        for img in images {
            for (s, plane) in img.iter().enumerate() {
                if plane.rows() != rows || plane.cols() != cols {
                    return Err(NetError::Input("images in a batch must share one size".into()));
                }
                planes[s].extend_from_slice(plane.values());
            }
        }
        Self::new(images.len(), rows, cols, planes)
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.batch, self.rows, self.cols)
    }
}

/// One executed substep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubstepRecord {
    pub n: usize,
    pub branch: Branch,
    pub level: usize,
    pub substep: usize,
    pub channel: usize,
    pub gamma: f64,
    pub fan_in: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Operands of one substep, taken from the first batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct Captured {
    pub record: SubstepRecord,
    pub inputs: Vec<Field>,
    pub kernels: Vec<Kernel>,
    pub bias: Bias,
    /// `ū` before batch normalization.
    pub ubar: Field,
}

/// Substep instrumentation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<SubstepRecord>,
    /// Index (into `records`) of the substep to capture.
    pub capture_at: Option<usize>,
    pub captured: Option<Captured>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn capturing(index: usize) -> Self {
        Self { capture_at: Some(index), ..Self::default() }
    }

    /// Number of sequential substeps (distinct `l`) per `(n, branch, level)`.
    pub fn sequential_count(&self, n: usize, branch: Branch, level: usize) -> usize {
        let mut ls: Vec<usize> =
            self.records.iter().filter(|r| r.n == n && r.branch == branch && r.level == level).map(|r| r.substep).collect();
        ls.dedup();
        ls.len()
    }

    /// Number of parallel channels of `(n, branch, level, l)`.
    pub fn parallel_count(&self, n: usize, branch: Branch, level: usize, substep: usize) -> usize {
        self.records
            .iter()
            .filter(|r| r.n == n && r.branch == branch && r.level == level && r.substep == substep)
            .count()
    }
}

/// Nodes produced by [`forward_batch`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Segmentation probabilities `U^N`, `[batch, rows, cols]`.
    pub prob: Var,
    /// Closing-step logits (absent when `N = 0`).
    pub logit: Option<Var>,
    /// `(running-stat slot, batch-norm node)` of every normalized channel.
    pub batch_norm: Vec<(usize, Var)>,
}

struct Runner<'a> {
    cfg: &'a NetConfig,
    params: &'a ControlParams,
    mode: Mode,
    trace: Option<&'a mut Trace>,
    pyramid: Vec<[Var; 3]>,
    batch_norm: Vec<(usize, Var)>,
    gauss: Kernel,
}

/// Records the full network on `tape`, whose parameter vector must be `params.values`
/// (or a perturbation of it with the same layout).
pub fn forward_batch(
    tape: &mut Tape,
    cfg: &NetConfig,
    params: &ControlParams,
    images: &ImageBatch,
    mode: Mode,
    trace: Option<&mut Trace>,
) -> Result<ForwardOutput, NetError> {
    let mut r = Runner::new(tape, cfg, params, images, mode, trace)?;
    let convs = (1..=3)
        .map(|s| {
            let key = ParamKey::Init { s };
            Ok(ConvTerm { input: r.pyramid[0][s - 1], offset: params.layout.offset(key)?, radius: cfg.radii.init })
        })
        .collect::<Result<Vec<_>, NetError>>()?;
    let mut u = tape.combine(Combine { convs, conv_scale: 1.0, ..Default::default() })?;
    let mut logit = None;
    for n in 0..cfg.steps {
        let (p, z) = r.timestep(tape, n, u)?;
        u = p;
        logit = Some(z);
    }
    Ok(ForwardOutput { prob: u, logit, batch_norm: r.batch_norm })
}

/// Records one time step `U^n → U^{n+1}` starting from the level-1 node `u`.
pub(crate) fn timestep_batch(
    tape: &mut Tape,
    cfg: &NetConfig,
    params: &ControlParams,
    images: &ImageBatch,
    u: Var,
    n: usize,
    mode: Mode,
) -> Result<ForwardOutput, NetError> {
    let mut r = Runner::new(tape, cfg, params, images, mode, None)?;
    if tape.shape(u) != images.shape() {
        return Err(NetError::Input(format!("state {:?} does not match the images {:?}", tape.shape(u), images.shape())));
    }
    let (prob, logit) = r.timestep(tape, n, u)?;
    Ok(ForwardOutput { prob, logit: Some(logit), batch_norm: r.batch_norm })
}

impl<'a> Runner<'a> {
    fn new(
        tape: &mut Tape,
        cfg: &'a NetConfig,
        params: &'a ControlParams,
        images: &ImageBatch,
        mode: Mode,
        trace: Option<&'a mut Trace>,
    ) -> Result<Self, NetError> {
        cfg.validate()?;
        cfg.check_image(images.rows, images.cols)?;
        if tape.params().len() != params.len() {
            return Err(NetError::Input(format!(
                "tape holds {} parameters, layout needs {}",
                tape.params().len(),
                params.len()
            )));
        }
        let shape = images.shape();
        let level1 = [0, 1, 2].map(|s| tape.input(shape, images.planes[s].clone()));
        let mut pyramid = vec![level1];
        for j in 2..=cfg.levels {
            let prev = pyramid[j - 2];
            let mut next = prev;
            for s in 0..3 {
                next[s] = tape.avg_pool(prev[s])?;
            }
            pyramid.push(next);
        }
        let gauss = make_gaussian(cfg.sigma, cfg.gaussian_radius).map_err(|e| NetError::Config(e.to_string()))?;
        Ok(Self { cfg, params, mode, trace, pyramid, batch_norm: Vec::new(), gauss })
    }

    fn timestep(&mut self, tape: &mut Tape, n: usize, u: Var) -> Result<(Var, Var), NetError> {
        let cfg = self.cfg;
        let big_j = cfg.levels;
        let mut states = vec![u];
        let mut left_final: Vec<Vec<Var>> = Vec::with_capacity(big_j);
        for j in 1..=big_j {
            if j > 1 {
                states = states
                    .iter()
                    .map(|&v| match cfg.pool {
                        Pool::Max => tape.max_pool(v),
                        Pool::Average => tape.avg_pool(v),
                    })
                    .collect::<Result<_, _>>()?;
            }
            for l in 1..=cfg.substeps[j - 1] {
                states = (1..=cfg.width(j))
                    .map(|k| self.block(tape, n, Branch::Left, j, l, k, &states))
                    .collect::<Result<_, _>>()?;
            }
            left_final.push(states.clone());
        }
        for j in (1..big_j).rev() {
            let up: Vec<Var> = states.iter().map(|&v| tape.upsample(v)).collect();
            let skip = self.params.layout.offset(ParamKey::Skip { n, j })?;
            states = match cfg.variant {
                Variant::UNetSkip => self.skip_merge(tape, &up, &left_final[j - 1], skip)?,
                _ => up,
            };
            for l in 1..=cfg.substeps[j - 1] {
                states = (1..=cfg.width(j))
                    .map(|k| self.block(tape, n, Branch::Right, j, l, k, &states))
                    .collect::<Result<_, _>>()?;
            }
            if cfg.variant == Variant::PottsMG {
                states = states
                    .iter()
                    .zip(&left_final[j - 1])
                    .map(|(&a, &b)| tape.mix(a, b, skip))
                    .collect::<Result<_, _>>()?;
            }
        }
        let logit = self.block(tape, n, Branch::Final, 1, 1, 1, &states)?;
        Ok((tape.sigmoid(logit), logit))
    }

    /// Per-channel skip merge before a right-branch level; unmatched channels use the other side's mean.
    fn skip_merge(&self, tape: &mut Tape, up: &[Var], left: &[Var], skip: usize) -> Result<Vec<Var>, NetError> {
        let mean = |tape: &mut Tape, vs: &[Var]| {
            let w = 1.0 / vs.len() as f64;
            tape.combine(Combine { linear: vs.iter().map(|&v| (v, w)).collect(), ..Default::default() })
        };
        let up_mean = if left.len() > up.len() { Some(mean(tape, up)?) } else { None };
        let left_mean = if up.len() > left.len() { Some(mean(tape, left)?) } else { None };
        (0..up.len().max(left.len()))
            .map(|k| {
                let a = up.get(k).copied().or(up_mean).expect("mean exists when channels run out");
                let b = left.get(k).copied().or(left_mean).expect("mean exists when channels run out");
                Ok(tape.mix(a, b, skip)?)
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        tape: &mut Tape,
        n: usize,
        branch: Branch,
        j: usize,
        l: usize,
        k: usize,
        inputs: &[Var],
    ) -> Result<Var, NetError> {
        let cfg = self.cfg;
        let layout = &self.params.layout;
        let shape_err = |detail: String| NetError::Shape { branch, level: j, substep: l, channel: k, detail };
        let (fan_in, gamma) = match branch {
            Branch::Left => (cfg.left_fan_in(j, l), cfg.left_gamma(j)),
            Branch::Right => (cfg.right_fan_in(j, l), cfg.right_gamma(j)),
            Branch::Final => (cfg.width(1), 1.0),
        };
        if inputs.len() != fan_in {
            return Err(shape_err(format!("{} inputs, fan-in rule requires {fan_in}", inputs.len())));
        }
        let level_shape = tape.shape(self.pyramid[j - 1][0]);
        for &v in inputs {
            if tape.shape(v) != level_shape {
                return Err(shape_err(format!("input {:?} is not on level {j} ({:?})", tape.shape(v), level_shape)));
            }
        }
        let scale = gamma * cfg.dt;
        let radius = cfg.radius(j);
        let mut convs = Vec::with_capacity(fan_in + 3);
        for (s, &input) in inputs.iter().enumerate() {
            let s = s + 1;
            let key = match branch {
                Branch::Left => ParamKey::Left { n, j, l, k, s },
                Branch::Right => ParamKey::Right { n, j, l, k, s },
                Branch::Final => ParamKey::Final { n, s },
            };
            convs.push(ConvTerm { input, offset: layout.offset(key)?, radius });
        }
        let mut scalar = None;
        match (branch, l) {
            (Branch::Final, _) => scalar = Some((layout.offset(ParamKey::FinalBias { n })?, scale)),
            (_, 1) => {
                for s in 1..=3 {
                    let offset = layout.offset(ParamKey::BiasKernel { n, branch, j, k, s })?;
                    convs.push(ConvTerm { input: self.pyramid[j - 1][s - 1], offset, radius });
                }
            }
            _ => scalar = Some((layout.offset(ParamKey::BiasScalar { n, branch, j, l, k })?, scale)),
        }
        let mean_w = 1.0 / fan_in as f64;
        let linear = inputs.iter().map(|&v| (v, mean_w)).collect();
        let ubar = tape.combine(Combine { linear, convs: convs.clone(), conv_scale: scale, scalar })?;

        let record = SubstepRecord {
            n,
            branch,
            level: j,
            substep: l,
            channel: k,
            gamma,
            fan_in,
            rows: level_shape.rows,
            cols: level_shape.cols,
        };
        if let Some(trace) = self.trace.as_deref_mut() {
            if trace.capture_at == Some(trace.records.len()) {
                trace.captured = Some(capture(tape, record, inputs, &convs[..fan_in], &self.pyramid[j - 1], &convs[fan_in..], scalar, ubar));
            }
            trace.records.push(record);
        }

        if branch == Branch::Final {
            let spec = Activation {
                c1dt: cfg.c1dt(),
                c2: cfg.eta,
                epsilon: cfg.epsilon,
                iters: cfg.act_iters,
                gauss: Some(self.gauss.clone()),
                output: ActOutput::Logit,
            };
            return Ok(tape.activation(ubar, spec)?);
        }
        let pre = if cfg.batchnorm {
            let scale_key = ParamKey::BnScale { n, branch, j, l, k };
            let sc = layout.offset(scale_key)?;
            let sh = layout.offset(ParamKey::BnShift { n, branch, j, l, k })?;
            let slot = layout.bn_slot(scale_key).expect("every scale key has a slot");
            match self.mode {
                Mode::Train => {
                    let v = tape.batch_norm(ubar, sc, sh, cfg.bn_eps)?;
                    self.batch_norm.push((slot, v));
                    v
                }
                Mode::Infer => tape.batch_norm_infer(
                    ubar,
                    sc,
                    sh,
                    cfg.bn_eps,
                    self.params.running_mean[slot],
                    self.params.running_var[slot],
                )?,
            }
        } else {
            ubar
        };
        let spec = Activation {
            c1dt: cfg.c1dt(),
            c2: 0.0,
            epsilon: cfg.epsilon,
            iters: cfg.act_iters,
            gauss: None,
            output: ActOutput::Prob,
        };
        Ok(tape.activation(pre, spec)?)
    }
}

fn first_item(tape: &Tape, v: Var, level: usize) -> Field {
    let s = tape.shape(v);
    let plane = s.rows * s.cols;
    Field::from_vec(level, s.rows, s.cols, tape.value(v)[..plane].to_vec()).expect("tape values are finite")
}

fn kernel_at(tape: &Tape, t: &ConvTerm) -> Kernel {
    let side = 2 * t.radius + 1;
    Kernel::new(t.radius, tape.params()[t.offset..t.offset + side * side].to_vec()).expect("side matches radius")
}

#[allow(clippy::too_many_arguments)]
fn capture(
    tape: &Tape,
    record: SubstepRecord,
    inputs: &[Var],
    kernels: &[ConvTerm],
    image: &[Var; 3],
    bias_kernels: &[ConvTerm],
    scalar: Option<(usize, f64)>,
    ubar: Var,
) -> Captured {
    let level = record.level;
    let bias = match scalar {
        Some((p, _)) => Bias::Scalar(tape.params()[p]),
        None => {
            let planes: Vec<Field> = image.iter().map(|&v| first_item(tape, v, level)).collect();
            let ks: Vec<Kernel> = bias_kernels.iter().map(|t| kernel_at(tape, t)).collect();
            let mut b = Field::zeros(level, record.rows, record.cols);
            for (p, k) in planes.iter().zip(&ks) {
                let c = crate::stencil::conv2d(p, k).expect("finite image");
                b = b.zip_map(&c, |x, y| x + y);
            }
            Bias::Field(b)
        }
    };
    Captured {
        record,
        inputs: inputs.iter().map(|&v| first_item(tape, v, level)).collect(),
        kernels: kernels.iter().map(|t| kernel_at(tape, t)).collect(),
        bias,
        ubar: first_item(tape, ubar, level),
    }
}
