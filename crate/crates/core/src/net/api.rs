//! Single-image entry points on [`Field`]s.

use crate::mesh::{downsample, Field, Pool};
use crate::potts::{activation_fixed_point, PottsParams};
use crate::stencil::{conv2d, make_identity, Kernel};
use crate::tape::Tape;

use super::forward::{forward_batch, timestep_batch, Branch, ImageBatch, Mode};
use super::{ControlParams, NetConfig, NetError, ParamKey};

/// Bias of a substep: an image-dependent field on the first substep of a level, a scalar afterwards.
#[derive(Debug, Clone, PartialEq)]
pub enum Bias {
    Field(Field),
    Scalar(f64),
}

fn check_inputs(inputs: &[Field], kernels: &[Kernel], bias: &Bias) -> Result<(), NetError> {
    let first = inputs.first().ok_or_else(|| NetError::Input("a block needs at least one input".into()))?;
    if kernels.len() != inputs.len() {
        return Err(NetError::Input(format!("{} kernels for {} inputs", kernels.len(), inputs.len())));
    }
    let mismatch = |f: &Field| !f.same_shape(first) || f.level() != first.level();
    if inputs.iter().any(mismatch) {
        return Err(NetError::Input("block inputs must share one level and size".into()));
    }
    if let Bias::Field(b) = bias {
        if !b.same_shape(first) {
            return Err(NetError::Input("bias field does not match the inputs".into()));
        }
    }
    Ok(())
}

/// `ū = (1/c) Σ u_s + γΔt (Σ Â_s * u_s + b̂)`.
pub fn block_linear(inputs: &[Field], kernels: &[Kernel], bias: &Bias, gamma: f64, cfg: &NetConfig) -> Result<Field, NetError> {
    check_inputs(inputs, kernels, bias)?;
    let c = inputs.len() as f64;
    let scale = gamma * cfg.dt;
    let mut mean = inputs[0].map(|_| 0.0);
    let mut conv = mean.clone();
    for (u, k) in inputs.iter().zip(kernels) {
        mean = mean.zip_map(u, |a, b| a + b / c);
        let ku = conv2d(u, k).map_err(|e| NetError::Input(e.to_string()))?;
        conv = conv.zip_map(&ku, |a, b| a + b);
    }
    let conv = match bias {
        Bias::Field(b) => conv.zip_map(b, |a, b| a + b),
        Bias::Scalar(b) => conv.map(|a| a + b),
    };
    Ok(mean.zip_map(&conv, |m, a| m + scale * a))
}

/// One building block: [`block_linear`], per-field normalization when batch norm is on
/// (unit scale, zero shift, statistics of this field), then the activation with `C2 = 0`.
pub fn block_step(inputs: &[Field], kernels: &[Kernel], bias: &Bias, gamma: f64, cfg: &NetConfig) -> Result<Field, NetError> {
    let mut ubar = block_linear(inputs, kernels, bias, gamma, cfg)?;
    if cfg.batchnorm {
        let mean = ubar.mean();
        let var = ubar.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ubar.len() as f64;
        let inv = 1.0 / (var + cfg.bn_eps).sqrt();
        ubar = ubar.map(|v| (v - mean) * inv);
    }
    let p = PottsParams::new(cfg.epsilon, cfg.eta, cfg.sigma, cfg.dt)
        .map_err(|e| NetError::Config(e.to_string()))?
        .with_gaussian_radius(cfg.gaussian_radius);
    activation_fixed_point(&ubar, cfg.c1dt() / cfg.dt, 0.0, &p, cfg.act_iters).map_err(|e| NetError::Config(e.to_string()))
}

/// Plain convolutional layer `Σ_s W_s * u_s + b`.
///
/// With `W_s = (1/c)𝟙 + γΔt Â_s` and `b = γΔt b̂` it reproduces [`block_linear`].
pub fn network_block(inputs: &[Field], weights: &[Kernel], bias: &Bias) -> Result<Field, NetError> {
    check_inputs(inputs, weights, bias)?;
    let mut out = inputs[0].map(|_| 0.0);
    for (u, w) in inputs.iter().zip(weights) {
        let wu = conv2d(u, w).map_err(|e| NetError::Input(e.to_string()))?;
        out = out.zip_map(&wu, |a, b| a + b);
    }
    Ok(match bias {
        Bias::Field(b) => out.zip_map(b, |a, b| a + b),
        Bias::Scalar(b) => out.map(|a| a + b),
    })
}

/// Merged kernel `(1/c)𝟙 + γΔt Â` of [`network_block`].
pub fn merged_kernel(kernel: &Kernel, c: usize, gamma: f64, cfg: &NetConfig) -> Kernel {
    let id = make_identity(kernel.radius());
    let scale = gamma * cfg.dt;
    let w = id.weights().iter().zip(kernel.weights()).map(|(i, a)| i / c as f64 + scale * a).collect();
    Kernel::new(kernel.radius(), w).expect("side is unchanged")
}

fn check_image(images: &[Field]) -> Result<&[Field; 3], NetError> {
    images
        .try_into()
        .map_err(|_| NetError::Input(format!("expected 3 colour channels, got {}", images.len())))
}

/// Bias of substep `(j, l, k)` on `branch` at time step `n`.
#[allow(clippy::too_many_arguments)]
pub fn bias_eval(
    theta: &ControlParams,
    images: &[Field],
    j: usize,
    l: usize,
    k: usize,
    branch: Branch,
    n: usize,
    cfg: &NetConfig,
) -> Result<Bias, NetError> {
    let images = check_image(images)?;
    let layout = &theta.layout;
    if l > 1 || branch == Branch::Final {
        let key = match branch {
            Branch::Final => ParamKey::FinalBias { n },
            _ => ParamKey::BiasScalar { n, branch, j, l, k },
        };
        return Ok(Bias::Scalar(theta.values[layout.offset(key)?]));
    }
    let mut out: Option<Field> = None;
    for (s, plane) in images.iter().enumerate() {
        let mut f = plane.clone().with_level(1);
        for _ in 1..j {
            f = downsample(&f, Pool::Average, cfg.levels).map_err(|e| NetError::Input(e.to_string()))?;
        }
        let key = ParamKey::BiasKernel { n, branch, j, k, s: s + 1 };
        let (off, len) = layout.get(key).ok_or_else(|| NetError::Config(format!("no parameter {key:?}")))?;
        let radius = layout.radius(key).unwrap_or(0);
        let kernel = Kernel::new(radius, theta.values[off..off + len].to_vec()).expect("layout sizes kernels");
        let term = conv2d(&f, &kernel).map_err(|e| NetError::Input(e.to_string()))?;
        out = Some(match out {
            Some(acc) => acc.zip_map(&term, |a, b| a + b),
            None => term,
        });
    }
    Ok(Bias::Field(out.expect("three planes")))
}

fn single(images: &[Field]) -> Result<ImageBatch, NetError> {
    let images = check_image(images)?;
    ImageBatch::from_images(std::slice::from_ref(images))
}

/// One time step `U^n → U^{n+1}` on a single image, batch norm from running statistics.
pub fn vcycle_timestep(u: &Field, theta: &ControlParams, images: &[Field], cfg: &NetConfig, n: usize) -> Result<Field, NetError> {
    let batch = single(images)?;
    let mut tape = Tape::new(theta.values.clone());
    let start = tape.input(batch.shape(), u.values().to_vec());
    let out = timestep_batch(&mut tape, cfg, theta, &batch, start, n, Mode::Infer)?;
    Ok(Field::from_vec(1, batch.rows, batch.cols, tape.value(out.prob).to_vec()).expect("finite output"))
}

/// Segmentation probability of one image, batch norm from running statistics.
pub fn forward(images: &[Field], theta: &ControlParams, cfg: &NetConfig) -> Result<Field, NetError> {
    let batch = single(images)?;
    let mut tape = Tape::new(theta.values.clone());
    let out = forward_batch(&mut tape, cfg, theta, &batch, Mode::Infer, None)?;
    let values = tape.value(out.prob).to_vec();
    Field::from_vec(1, batch.rows, batch.cols, values).map_err(|e| NetError::Input(e.to_string()))
}
