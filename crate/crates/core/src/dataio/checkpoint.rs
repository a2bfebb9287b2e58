//! Parameter checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        4 bytes  "PMG1"
//! version      u32      1
//! precision    u8       32 or 64 (payload float width)
//! variant      u8       0 pottsmg, 1 unetskip, 2 segnet
//! batchnorm    u8       0/1
//! tie_weights  u8       0/1
//! c1_mode      u8       0 one, 1 kappa
//! pool         u8       0 max, 1 average
//! J, N         u32, u32
//! act_iters    u32
//! gauss radius u32
//! radii        u32 x 3  init, coarse, inner
//! L            u32 x J
//! c            u32 x J
//! dt, epsilon, eta, sigma, bn_eps, bn_momentum   f64 x 6
//! count        u64      number of payload floats
//! payload      θ in layout order, then running means, then running variances
//! ```

use std::fs;
use std::path::Path;

use crate::mesh::Pool;
use crate::net::{C1Mode, ControlParams, Layout, NetConfig, Radii, Variant};

use super::DataError;

pub const MAGIC: &[u8; 4] = b"PMG1";
pub const VERSION: u32 = 1;

/// Float width of the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

fn flag(b: bool) -> u8 {
    b as u8
}

/// Serializes `theta` and `cfg`.
pub fn encode_checkpoint(theta: &ControlParams, cfg: &NetConfig, precision: Precision) -> Result<Vec<u8>, DataError> {
    let bad = |e: crate::net::NetError| DataError::Checkpoint(e.to_string());
    let layout = Layout::new(cfg).map_err(bad)?;
    if layout != theta.layout {
        return Err(DataError::Checkpoint("parameters do not belong to this config".into()));
    }
    // Every tensor must be written exactly once.
    layout.audit().map_err(bad)?;
    let covered: usize = layout.keys().map(|(_, _, len)| len).sum();
    if covered != theta.values.len() || theta.running_mean.len() != layout.bn_channels().len() {
        return Err(DataError::Checkpoint("tensor coverage does not match the parameter vector".into()));
    }

    let mut out = MAGIC.to_vec();
    out.extend(VERSION.to_le_bytes());
    out.push(match precision {
        Precision::F32 => 32,
        Precision::F64 => 64,
    });
    out.push(cfg.variant.code());
    out.push(flag(cfg.batchnorm));
    out.push(flag(cfg.tie_weights));
    out.push(flag(cfg.c1_mode == C1Mode::Kappa));
    out.push(flag(cfg.pool == Pool::Average));
    let mut u32s = vec![cfg.levels, cfg.steps, cfg.act_iters, cfg.gaussian_radius, cfg.radii.init, cfg.radii.coarse, cfg.radii.inner];
    u32s.extend(&cfg.substeps);
    u32s.extend(&cfg.widths);
    for v in u32s {
        let v = u32::try_from(v).map_err(|_| DataError::Checkpoint(format!("{v} does not fit the header")))?;
        out.extend(v.to_le_bytes());
    }
    for v in [cfg.dt, cfg.epsilon, cfg.eta, cfg.sigma, cfg.bn_eps, cfg.bn_momentum] {
        out.extend(v.to_le_bytes());
    }
    let payload = theta.values.iter().chain(&theta.running_mean).chain(&theta.running_var);
    out.extend(((theta.values.len() + 2 * theta.running_mean.len()) as u64).to_le_bytes());
    for &v in payload {
        match precision {
            Precision::F32 => out.extend((v as f32).to_le_bytes()),
            Precision::F64 => out.extend(v.to_le_bytes()),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DataError> {
        let end = self.pos + n;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| {
            DataError::Checkpoint(format!("file ends at byte {} while reading {n} bytes at {}", self.bytes.len(), self.pos))
        })?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint, checking the payload length against the header config.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ControlParams, NetConfig, Precision), DataError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DataError::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(DataError::Checkpoint(format!("unsupported version {version}")));
    }
    let precision = match r.u8()? {
        32 => Precision::F32,
        64 => Precision::F64,
        p => return Err(DataError::Checkpoint(format!("unknown precision {p}"))),
    };
    let variant = Variant::from_code(r.u8()?).ok_or_else(|| DataError::Checkpoint("unknown variant".into()))?;
    let mut flags = [false; 4];
    for f in &mut flags {
        *f = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(DataError::Checkpoint(format!("flag byte {b} is not 0 or 1"))),
        };
    }
    let [batchnorm, tie_weights, kappa, average] = flags;
    let levels = r.u32()?;
    if levels == 0 || levels > 16 {
        return Err(DataError::Checkpoint(format!("header declares J = {levels}")));
    }
    let steps = r.u32()?;
    let act_iters = r.u32()?;
    let gaussian_radius = r.u32()?;
    let radii = Radii { init: r.u32()?, coarse: r.u32()?, inner: r.u32()? };
    let substeps = (0..levels).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let widths = (0..levels).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    if substeps.iter().chain(&widths).any(|&v| v > 1 << 16) {
        return Err(DataError::Checkpoint("header declares an implausible L or c entry".into()));
    }
    let mut f = [0.0; 6];
    for v in &mut f {
        *v = r.f64()?;
    }
    let cfg = NetConfig {
        levels,
        substeps,
        widths,
        steps,
        dt: f[0],
        epsilon: f[1],
        eta: f[2],
        sigma: f[3],
        gaussian_radius,
        radii,
        variant,
        act_iters,
        batchnorm,
        bn_eps: f[4],
        bn_momentum: f[5],
        c1_mode: if kappa { C1Mode::Kappa } else { C1Mode::One },
        pool: if average { Pool::Average } else { Pool::Max },
        tie_weights,
    };
    let mut theta = ControlParams::neutral(&cfg).map_err(|e| DataError::Checkpoint(e.to_string()))?;
    let (n_theta, n_bn) = (theta.values.len(), theta.running_mean.len());
    let count = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let width = if precision == Precision::F32 { 4 } else { 8 };
    let expected = n_theta + 2 * n_bn;
    let remaining = bytes.len() - r.pos;
    if count != expected || remaining != expected * width {
        return Err(DataError::Checkpoint(format!(
            "config needs {expected} floats ({} bytes); header declares {count}, file holds {remaining} bytes",
            expected * width
        )));
    }
    let payload: Vec<f64> = r.bytes[r.pos..]
        .chunks_exact(width)
        .map(|c| match precision {
            Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
        })
        .collect();
    theta.values.copy_from_slice(&payload[..n_theta]);
    theta.running_mean.copy_from_slice(&payload[n_theta..n_theta + n_bn]);
    theta.running_var.copy_from_slice(&payload[n_theta + n_bn..]);
    Ok((theta, cfg, precision))
}

pub fn save_checkpoint(theta: &ControlParams, cfg: &NetConfig, path: &Path, precision: Precision) -> Result<(), DataError> {
    let bytes = encode_checkpoint(theta, cfg, precision)?;
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ControlParams, NetConfig), DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_checkpoint(&bytes).map(|(t, c, _)| (t, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ControlParams, NetConfig) {
        let mut cfg = NetConfig::with_shape(vec![2, 1], vec![2, 3], 2);
        cfg.variant = Variant::UNetSkip;
        cfg.pool = Pool::Average;
        let mut theta = ControlParams::init(&cfg, 3).unwrap();
        theta.running_mean.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        (theta, cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (theta, cfg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pmg");
        save_checkpoint(&theta, &cfg, &path, Precision::F64).unwrap();
        let (back, cfg2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back, theta);
    }

    #[test]
    fn single_precision_round_trip_is_exact_at_f32() {
        let (mut theta, cfg) = sample();
        for v in &mut theta.values {
            *v = *v as f32 as f64;
        }
        let bytes = encode_checkpoint(&theta, &cfg, Precision::F32).unwrap();
        let (back, _, p) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(p, Precision::F32);
        assert_eq!(back.values, theta.values);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (theta, cfg) = sample();
        let bytes = encode_checkpoint(&theta, &cfg, Precision::F64).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(DataError::Checkpoint(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(DataError::Checkpoint(m)) if m.contains("version")));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        // Widen c_1 in the header: the payload no longer matches.
        let mut bad = bytes;
        let c1_at = 4 + 4 + 6 + 4 * 7 + 4 * 2;
        bad[c1_at] = 5;
        assert!(matches!(decode_checkpoint(&bad), Err(DataError::Checkpoint(m)) if m.contains("config needs")));
    }

    #[test]
    fn mismatched_config_cannot_be_saved() {
        let (theta, _) = sample();
        let other = NetConfig::with_shape(vec![1, 1], vec![2, 3], 2);
        assert!(encode_checkpoint(&theta, &other, Precision::F64).is_err());
    }
}
