use crate::mesh::Pool;

use super::NetError;

/// Architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    /// V-cycle with relaxation after each right-branch level.
    #[default]
    PottsMG,
    /// Skip merge before each right-branch level, right factor `2^{j−1}`.
    UNetSkip,
    /// No skip pathway, no `2^{j−1}`/`2^j` factors.
    SegNet,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::PottsMG => "pottsmg",
            Variant::UNetSkip => "unetskip",
            Variant::SegNet => "segnet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pottsmg" => Some(Variant::PottsMG),
            "unetskip" | "unet" => Some(Variant::UNetSkip),
            "segnet" => Some(Variant::SegNet),
            _ => None,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Variant::PottsMG => 0,
            Variant::UNetSkip => 1,
            Variant::SegNet => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        [Variant::PottsMG, Variant::UNetSkip, Variant::SegNet].into_iter().find(|v| v.code() == c)
    }
}

/// How `C1` in the activation is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum C1Mode {
    /// `C1 = 1` everywhere.
    #[default]
    One,
    /// `C1 = 1/κ`.
    Kappa,
}

/// Kernel radii per layer class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Radii {
    pub init: usize,
    pub coarse: usize,
    pub inner: usize,
}

impl Default for Radii {
    fn default() -> Self {
        Self { init: 1, coarse: 1, inner: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// `J`.
    pub levels: usize,
    /// `L_j`.
    pub substeps: Vec<usize>,
    /// `c_j`.
    pub widths: Vec<usize>,
    /// `N`.
    pub steps: usize,
    pub dt: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub sigma: f64,
    pub gaussian_radius: usize,
    pub radii: Radii,
    pub variant: Variant,
    pub act_iters: usize,
    pub batchnorm: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub c1_mode: C1Mode,
    pub pool: Pool,
    pub tie_weights: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            substeps: vec![3, 3, 3, 5, 5],
            widths: vec![32, 32, 64, 128, 256],
            steps: 4,
            dt: 0.5,
            epsilon: 2.0,
            eta: 80.0,
            sigma: 0.5,
            gaussian_radius: 2,
            radii: Radii::default(),
            variant: Variant::PottsMG,
            act_iters: 2,
            batchnorm: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            c1_mode: C1Mode::One,
            pool: Pool::Max,
            tie_weights: false,
        }
    }
}

impl NetConfig {
    /// Defaults with a different level structure.
    pub fn with_shape(substeps: Vec<usize>, widths: Vec<usize>, steps: usize) -> Self {
        Self { levels: widths.len(), substeps, widths, steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let err = |m: String| Err(NetError::Config(m));
        if self.levels == 0 {
            return err("J must be at least 1".into());
        }
        if self.substeps.len() != self.levels || self.widths.len() != self.levels {
            return err(format!(
                "L has {} entries and c has {}, both must equal J = {}",
                self.substeps.len(),
                self.widths.len(),
                self.levels
            ));
        }
        if self.substeps.iter().chain(&self.widths).any(|&v| v == 0) {
            return err("every L_j and c_j must be at least 1".into());
        }
        if self.levels > 16 {
            return err(format!("J = {} is unreasonably deep", self.levels));
        }
        for (name, v) in [("dt", self.dt), ("epsilon", self.epsilon), ("sigma", self.sigma)] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return err(format!("eta must be non-negative, got {}", self.eta));
        }
        if self.act_iters == 0 {
            return err("act_iters must be at least 1".into());
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return err("bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        if self.gaussian_radius == 0 {
            return err("gaussian_radius must be at least 1".into());
        }
        Ok(())
    }

    /// Images must halve cleanly `J − 1` times.
    pub fn check_image(&self, rows: usize, cols: usize) -> Result<(), NetError> {
        let div = 1usize << (self.levels - 1);
        if rows == 0 || cols == 0 || !rows.is_multiple_of(div) || !cols.is_multiple_of(div) {
            return Err(NetError::Input(format!("image {rows}x{cols} is not divisible by 2^(J-1) = {div}")));
        }
        Ok(())
    }

    pub fn width(&self, j: usize) -> usize {
        if j == 0 {
            1
        } else {
            self.widths[j - 1]
        }
    }

    /// Kernel radius of level-`j` convolutions.
    pub fn radius(&self, j: usize) -> usize {
        if j == self.levels {
            self.radii.coarse
        } else {
            self.radii.inner
        }
    }

    /// Number of per-channel inputs read by a left-branch substep.
    pub fn left_fan_in(&self, j: usize, l: usize) -> usize {
        if l == 1 {
            self.width(j - 1)
        } else {
            self.width(j)
        }
    }

    /// Number of per-channel inputs read by a right-branch substep.
    pub fn right_fan_in(&self, j: usize, l: usize) -> usize {
        match (l, self.variant) {
            (1, Variant::UNetSkip) => self.width(j).max(self.width(j + 1)),
            (1, _) => self.width(j + 1),
            _ => self.width(j),
        }
    }

    pub fn left_gamma(&self, j: usize) -> f64 {
        let c = self.width(j) as f64;
        match self.variant {
            Variant::SegNet => c,
            _ => (1u64 << (j - 1)) as f64 * c,
        }
    }

    pub fn right_gamma(&self, j: usize) -> f64 {
        let c = self.width(j) as f64;
        match self.variant {
            Variant::SegNet => c,
            Variant::UNetSkip => (1u64 << (j - 1)) as f64 * c,
            Variant::PottsMG => (1u64 << j) as f64 * c,
        }
    }

    /// `C1 Δt` of every activation.
    pub fn c1dt(&self) -> f64 {
        match self.c1_mode {
            C1Mode::One => self.dt,
            C1Mode::Kappa => self.dt / kappa(self),
        }
    }
}

/// `κ = Σ_{j,l,k} (2^{j−1}c_j)^{-1} + Σ_{j<J,l,k} (2^j c_j)^{-1} + 1`.
pub fn kappa(cfg: &NetConfig) -> f64 {
    let mut total = 0.0;
    for j in 1..=cfg.levels {
        let (l, c) = (cfg.substeps[j - 1] as f64, cfg.widths[j - 1] as f64);
        total += l * c / ((1u64 << (j - 1)) as f64 * c);
        if j < cfg.levels {
            total += l * c / ((1u64 << j) as f64 * c);
        }
    }
    total + 1.0
}
