//! Synthetic two-phase images: a few flat-coloured shapes on a flat background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mesh::Field;

use super::{DataError, Sample};

/// Shapes drawn into the foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    #[default]
    Mixed,
}

impl ShapeKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "disk" => Some(ShapeKind::Disk),
            "rectangle" | "rect" => Some(ShapeKind::Rectangle),
            "mixed" => Some(ShapeKind::Mixed),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Mixed => "mixed",
        }
    }
}

/// Smallest allowed foreground fraction.
pub const MIN_FOREGROUND: f64 = 0.05;
/// Largest allowed foreground fraction.
pub const MAX_FOREGROUND: f64 = 0.6;
/// Minimum gap between foreground and background channel means.
pub const MIN_CONTRAST: f64 = 0.2;

/// Generates `count` square samples of side `size`.
///
/// Sample `i` depends only on `(seed, i)`. The foreground is the brighter phase:
/// its channel mean exceeds the background's by at least [`MIN_CONTRAST`].
pub fn gen_dataset(count: usize, size: usize, shapes: ShapeKind, seed: u64) -> Result<Vec<Sample>, DataError> {
    if size < 8 {
        return Err(DataError::Shape(format!("image side {size} is below 8")));
    }
    Ok((0..count).map(|i| sample(i, size, shapes, seed)).collect())
}

fn sample(index: usize, size: usize, shapes: ShapeKind, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mask = loop {
        let m = draw_mask(&mut rng, size, shapes);
        let frac = m.iter().filter(|&&b| b).count() as f64 / (size * size) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break m;
        }
    };
    let (fg, bg) = colours(&mut rng);
    let planes = [0, 1, 2].map(|c| {
        let v = mask.iter().map(|&m| if m { fg[c] } else { bg[c] }).collect();
        Field::from_vec(1, size, size, v).expect("finite colours")
    });
    let mask = Field::from_vec(1, size, size, mask.iter().map(|&m| m as u8 as f64).collect()).expect("binary");
    Sample { id: format!("{index:05}"), image: planes, mask }
}

fn colours(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    loop {
        let fg: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let bg: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let gap = fg.iter().sum::<f64>() / 3.0 - bg.iter().sum::<f64>() / 3.0;
        if gap >= MIN_CONTRAST {
            return (fg, bg);
        }
    }
}

fn draw_mask(rng: &mut ChaCha8Rng, size: usize, shapes: ShapeKind) -> Vec<bool> {
    let n = size as f64;
    let mut mask = vec![false; size * size];
    for _ in 0..rng.gen_range(1..=3) {
        let disk = match shapes {
            ShapeKind::Disk => true,
            ShapeKind::Rectangle => false,
            ShapeKind::Mixed => rng.gen_bool(0.5),
        };
        if disk {
            let r = rng.gen_range(0.1 * n..0.3 * n);
            let (ci, cj) = (rng.gen_range(r..n - r), rng.gen_range(r..n - r));
            for i in 0..size {
                for j in 0..size {
                    let (di, dj) = (i as f64 + 0.5 - ci, j as f64 + 0.5 - cj);
                    if di * di + dj * dj <= r * r {
                        mask[i * size + j] = true;
                    }
                }
            }
        } else {
            let (h, w) = (rng.gen_range(size / 6..=size / 2), rng.gen_range(size / 6..=size / 2));
            let (i0, j0) = (rng.gen_range(0..=size - h), rng.gen_range(0..=size - w));
            for i in i0..i0 + h {
                mask[i * size + j0..i * size + j0 + w].fill(true);
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_request_gives_empty_list() {
        assert!(gen_dataset(0, 32, ShapeKind::Mixed, 1).unwrap().is_empty());
    }

    #[test]
    fn same_seed_same_samples() {
        let a = gen_dataset(5, 16, ShapeKind::Mixed, 7).unwrap();
        let b = gen_dataset(5, 16, ShapeKind::Mixed, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_dataset(5, 16, ShapeKind::Mixed, 8).unwrap();
        assert_ne!(a, c);
        // A sample does not depend on how many come after it.
        assert_eq!(gen_dataset(2, 16, ShapeKind::Mixed, 7).unwrap()[..], a[..2]);
    }

    #[test]
    fn generator_bounds_hold_by_count() {
        for kind in [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Mixed] {
            for s in gen_dataset(200, 32, kind, 3).unwrap() {
                let fg = s.mask.values().iter().filter(|&&v| v == 1.0).count();
                assert!(s.mask.values().iter().all(|&v| v == 0.0 || v == 1.0));
                let frac = fg as f64 / 1024.0;
                assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac), "{} has {frac}", s.id);
                let mean = |on: f64| {
                    let mut total = 0.0;
                    let mut n = 0.0;
                    for c in &s.image {
                        for (v, m) in c.values().iter().zip(s.mask.values()) {
                            if *m == on {
                                total += v;
                                n += 1.0;
                            }
                        }
                    }
                    total / n
                };
                assert!(mean(1.0) - mean(0.0) >= MIN_CONTRAST - 1e-12);
            }
        }
    }
}
