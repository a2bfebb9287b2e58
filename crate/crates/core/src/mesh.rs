//! Nested grid levels and the transfer operators between them.
//!
//! Level 1 is the finest grid (the image resolution). Each coarser level
//! halves both dimensions and doubles the grid step. A [`Field`] is the
//! coefficient array of a piecewise-constant function on one level, stored
//! row-major with `(row, col)` indexing.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("level count must be at least 1")]
    NoLevels,
    #[error("{dim} = {value} is not divisible by 2^{shift} (required for {levels} levels)")]
    Indivisible { dim: &'static str, value: usize, shift: u32, levels: usize },
    #[error("grid dimensions must be positive")]
    EmptyGrid,
    #[error("level {level} is out of bounds for {op} (levels 1..={max})")]
    LevelBounds { op: &'static str, level: usize, max: usize },
    #[error("field has {got} values, level {level} expects {rows}x{cols}")]
    Shape { got: usize, level: usize, rows: usize, cols: usize },
    #[error("field contains a non-finite value at index {0}")]
    NonFinite(usize),
}

/// Sizes and steps of the grids `T^1 ⊃ … ⊃ T^J`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    sizes: Vec<(usize, usize)>,
}

impl Hierarchy {
    /// Builds `levels` grids starting from an `rows x cols` base grid with unit step.
    pub fn new(rows: usize, cols: usize, levels: usize) -> Result<Self, MeshError> {
        if levels == 0 {
            return Err(MeshError::NoLevels);
        }
        if rows == 0 || cols == 0 {
            return Err(MeshError::EmptyGrid);
        }
        let shift = (levels - 1) as u32;
        let div = 1usize << shift;
        if !rows.is_multiple_of(div) {
            return Err(MeshError::Indivisible { dim: "m", value: rows, shift, levels });
        }
        if !cols.is_multiple_of(div) {
            return Err(MeshError::Indivisible { dim: "n", value: cols, shift, levels });
        }
        let sizes = (0..levels).map(|j| (rows >> j, cols >> j)).collect();
        Ok(Self { sizes })
    }

    pub fn levels(&self) -> usize {
        self.sizes.len()
    }

    /// `(m_j, n_j)` for the 1-based level `j`.
    pub fn size(&self, level: usize) -> (usize, usize) {
        self.sizes[level - 1]
    }

    /// Grid step `h_j = 2^{j-1}`.
    pub fn step(&self, level: usize) -> f64 {
        level_step(level)
    }

    pub fn zeros(&self, level: usize) -> Field {
        let (r, c) = self.size(level);
        Field::zeros(level, r, c)
    }
}

pub(crate) fn level_step(level: usize) -> f64 {
    (1u64 << (level - 1)) as f64
}

/// A piecewise-constant scalar function on one grid level.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    level: usize,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(level: usize, rows: usize, cols: usize) -> Self {
        Self::constant(level, rows, cols, 0.0)
    }

    pub fn constant(level: usize, rows: usize, cols: usize, value: f64) -> Self {
        assert!(level >= 1, "levels are 1-based");
        Self { level, rows, cols, values: vec![value; rows * cols] }
    }

    /// Wraps a row-major value array. Rejects length mismatches and non-finite entries.
    pub fn from_vec(level: usize, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, MeshError> {
        assert!(level >= 1, "levels are 1-based");
        if values.len() != rows * cols {
            return Err(MeshError::Shape { got: values.len(), level, rows, cols });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MeshError::NonFinite(i));
        }
        Ok(Self { level, rows, cols, values })
    }

    /// Builds a level-1 field from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            values.extend_from_slice(r.as_ref());
        }
        Self { level: 1, rows: rows.len(), cols, values }
    }

    pub fn with_level(mut self, level: usize) -> Self {
        assert!(level >= 1, "levels are 1-based");
        self.level = level;
        self
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.cols + col] = value;
    }

    /// Grid step of this field's level.
    pub fn step(&self) -> f64 {
        level_step(self.level)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { values: self.values.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert_eq!(self.values.len(), other.values.len(), "field size mismatch");
        Field {
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
            ..self.clone()
        }
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn check_finite(&self) -> Result<(), MeshError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(MeshError::NonFinite(i)),
            None => Ok(()),
        }
    }
}

/// Coarsening rule for [`downsample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pool {
    Average,
    #[default]
    Max,
}

/// Piecewise-constant prolongation from level `j+1` to level `j`.
pub fn upsample(f: &Field) -> Result<Field, MeshError> {
    if f.level <= 1 {
        return Err(MeshError::LevelBounds { op: "upsample", level: f.level, max: usize::MAX });
    }
    let (rows, cols) = (f.rows * 2, f.cols * 2);
    let mut values = vec![0.0; rows * cols];
    upsample_raw(&f.values, f.rows, f.cols, &mut values);
    Ok(Field { level: f.level - 1, rows, cols, values })
}

/// Restriction from level `j` to level `j+1`. `max_level` is `J`.
pub fn downsample(f: &Field, mode: Pool, max_level: usize) -> Result<Field, MeshError> {
    if f.level >= max_level {
        return Err(MeshError::LevelBounds { op: "downsample", level: f.level, max: max_level });
    }
    if !f.rows.is_multiple_of(2) || !f.cols.is_multiple_of(2) {
        return Err(MeshError::Indivisible { dim: "m", value: f.rows, shift: 1, levels: 2 });
    }
    let (rows, cols) = (f.rows / 2, f.cols / 2);
    let mut values = vec![0.0; rows * cols];
    match mode {
        Pool::Average => avg_pool_raw(&f.values, f.rows, f.cols, &mut values),
        Pool::Max => {
            max_pool_raw(&f.values, f.rows, f.cols, &mut values, None);
        }
    }
    Ok(Field { level: f.level + 1, rows, cols, values })
}

pub(crate) fn upsample_raw(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    let fc = cols * 2;
    for r in 0..rows {
        for c in 0..cols {
            let v = src[r * cols + c];
            let o = 2 * r * fc + 2 * c;
            dst[o] = v;
            dst[o + 1] = v;
            dst[o + fc] = v;
            dst[o + fc + 1] = v;
        }
    }
}

pub(crate) fn avg_pool_raw(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    let cc = cols / 2;
    for r in 0..rows / 2 {
        for c in 0..cc {
            let o = 2 * r * cols + 2 * c;
            // Pairwise order keeps the round trip with upsample exact: (v+v)+(v+v) = 4v.
            let s = (src[o] + src[o + 1]) + (src[o + cols] + src[o + cols + 1]);
            dst[r * cc + c] = s * 0.25;
        }
    }
}

/// Max pooling; when `argmax` is given it receives the fine-grid index of each
/// winner, ties resolved to the first index in row-major order.
pub(crate) fn max_pool_raw(src: &[f64], rows: usize, cols: usize, dst: &mut [f64], mut argmax: Option<&mut [u32]>) {
    let cc = cols / 2;
    for r in 0..rows / 2 {
        for c in 0..cc {
            let o = 2 * r * cols + 2 * c;
            let mut best = o;
            for cand in [o + 1, o + cols, o + cols + 1] {
                if src[cand] > src[best] {
                    best = cand;
                }
            }
            dst[r * cc + c] = src[best];
            if let Some(a) = argmax.as_deref_mut() {
                a[r * cc + c] = best as u32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hierarchy_sizes_and_steps() {
        let h = Hierarchy::new(16, 16, 4).unwrap();
        assert_eq!(h.levels(), 4);
        let sizes: Vec<_> = (1..=4).map(|j| h.size(j)).collect();
        assert_eq!(sizes, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        let steps: Vec<_> = (1..=4).map(|j| h.step(j)).collect();
        assert_eq!(steps, vec![1.0, 2.0, 4.0, 8.0]);
    }

    #[test]
    fn single_level_hierarchy() {
        let h = Hierarchy::new(8, 8, 1).unwrap();
        assert_eq!(h.levels(), 1);
        assert_eq!(h.size(1), (8, 8));
    }

    #[test]
    fn indivisible_dimension_is_named() {
        let err = Hierarchy::new(10, 8, 3).unwrap_err();
        assert!(matches!(err, MeshError::Indivisible { dim: "m", value: 10, .. }), "{err}");
        let err = Hierarchy::new(8, 6, 3).unwrap_err();
        assert!(matches!(err, MeshError::Indivisible { dim: "n", .. }));
        assert_eq!(Hierarchy::new(8, 8, 0).unwrap_err(), MeshError::NoLevels);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let f = Field::from_rows(&[[5.0]]).with_level(2);
        assert_eq!(upsample(&f).unwrap().values(), &[5.0; 4]);

        let f = Field::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).with_level(2);
        let up = upsample(&f).unwrap();
        let want = Field::from_rows(&[
            [1.0, 1.0, 2.0, 2.0],
            [1.0, 1.0, 2.0, 2.0],
            [3.0, 3.0, 4.0, 4.0],
            [3.0, 3.0, 4.0, 4.0],
        ]);
        assert_eq!(up, want);
    }

    #[test]
    fn downsample_modes() {
        let f = Field::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(downsample(&f, Pool::Average, 2).unwrap().values(), &[2.5]);
        assert_eq!(downsample(&f, Pool::Max, 2).unwrap().values(), &[4.0]);
        assert_eq!(downsample(&f, Pool::Max, 2).unwrap().level(), 2);
    }

    #[test]
    fn level_bounds() {
        let f = Field::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert!(matches!(upsample(&f), Err(MeshError::LevelBounds { .. })));
        let coarse = f.clone().with_level(3);
        assert!(matches!(downsample(&coarse, Pool::Average, 3), Err(MeshError::LevelBounds { .. })));
    }

    #[test]
    fn constant_survives_upsample() {
        let f = Field::constant(3, 2, 4, 1.25);
        assert!(upsample(&f).unwrap().values().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(matches!(Field::from_vec(1, 1, 2, vec![0.0, f64::NAN]), Err(MeshError::NonFinite(1))));
        assert!(matches!(Field::from_vec(1, 2, 2, vec![0.0]), Err(MeshError::Shape { .. })));
    }

    #[test]
    fn max_pool_ties_take_first_index() {
        let src = [1.0, 1.0, 1.0, 1.0];
        let mut dst = [0.0];
        let mut arg = [9u32];
        max_pool_raw(&src, 2, 2, &mut dst, Some(&mut arg));
        assert_eq!(arg[0], 0);
        let src = [0.0, 3.0, 3.0, 1.0];
        max_pool_raw(&src, 2, 2, &mut dst, Some(&mut arg));
        assert_eq!(arg[0], 1);
    }

    fn field_strategy(level: usize) -> impl Strategy<Value = Field> {
        (1usize..10, 1usize..10).prop_flat_map(move |(r, c)| {
            prop::collection::vec(-1e3f64..1e3, r * c)
                .prop_map(move |v| Field::from_vec(level, r, c, v).unwrap())
        })
    }

    fn even_field() -> impl Strategy<Value = Field> {
        (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
            prop::collection::vec(-10.0f64..10.0, 4 * r * c)
                .prop_map(move |v| Field::from_vec(1, 2 * r, 2 * c, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn average_pooling_undoes_upsampling(g in field_strategy(2)) {
            let back = downsample(&upsample(&g).unwrap(), Pool::Average, 2).unwrap();
            prop_assert_eq!(back.values(), g.values());
            prop_assert_eq!(back.level(), 2);
        }

        #[test]
        fn average_pooling_conserves_the_mean(g in even_field()) {
            let coarse = downsample(&g, Pool::Average, 2).unwrap();
            prop_assert!((coarse.mean() - g.mean()).abs() <= 1e-12);
        }

        #[test]
        fn max_pooling_dominates_average_pooling(g in even_field()) {
            let avg = downsample(&g, Pool::Average, 2).unwrap();
            let max = downsample(&g, Pool::Max, 2).unwrap();
            prop_assert!(max.values().iter().zip(avg.values()).all(|(m, a)| m >= a));
        }
    }
}
