use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Channel, Forcing, LinOp, Op, Part, Scheme, SchemeSpec, Substep};

/// A seeded test problem for the convergence harness.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub scheme: Scheme,
    pub spec: SchemeSpec,
    pub u0: Vec<f64>,
}

/// `Q Λ Qᵀ` with `Q` orthogonal (QR of a Gaussian matrix) and `Λ` uniform in `[0.5, 2]`.
pub fn random_spd<R: Rng>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let q = g.qr().q();
    let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(dim, |_, _| rng.gen_range(0.5..=2.0)));
    let m = &q * lambda * q.transpose();
    (&m + m.transpose()) * 0.5
}

struct Builder {
    rng: ChaCha8Rng,
    dim: usize,
    weight: f64,
    time_dependent: bool,
}

impl Builder {
    fn spd(&mut self) -> Op {
        let m = random_spd(self.dim, &mut self.rng) * self.weight;
        let op = LinOp::new(m).assert_spd();
        let op = if self.time_dependent { op.with_coefficient(Arc::new(|t: f64| 1.0 + 0.5 * t.sin())) } else { op };
        op.into_op()
    }

    fn forcing(&mut self) -> Forcing {
        let dim = self.dim;
        let w = self.weight;
        Forcing::constant((0..dim).map(|_| w * self.rng.gen_range(-1.0..=1.0)).collect())
    }

    fn channel(&mut self, fan_in: usize) -> Channel {
        let explicit = (0..fan_in).map(|_| self.spd()).collect();
        let implicit = self.spd();
        let forcing = self.forcing();
        Channel::new(explicit, implicit, forcing)
    }

    /// Substeps with random widths, the last one forced to `last_width` if given.
    fn part(&mut self, prev_width: usize, last_width: Option<usize>) -> (Part, usize) {
        let m_count = self.rng.gen_range(1..=2);
        let mut prev = prev_width;
        let mut subs = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let c = match last_width {
                Some(w) if m + 1 == m_count => w,
                _ => self.rng.gen_range(1..=3),
            };
            let d = self.rng.gen_range(1..=prev);
            subs.push(Substep::new((0..c).map(|_| self.channel(d)).collect()));
            prev = c;
        }
        (Part::new(subs), prev)
    }
}

/// A hybrid-scheme instance: dimension 2..=6, `M ≤ 3`, `c_m ≤ 3`, constant SPD operators.
pub fn random_hybrid_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(2..=6);
    let m_count = rng.gen_range(1..=3);
    let widths: Vec<usize> = (0..m_count).map(|_| rng.gen_range(1..=3)).collect();
    let mut b = Builder { rng, dim, weight: 1.0 / (2 * m_count) as f64, time_dependent: false };
    let mut prev = 1;
    let mut subs = Vec::with_capacity(m_count);
    for &c in &widths {
        let d = b.rng.gen_range(1..=prev);
        subs.push(Substep::new((0..c).map(|_| b.channel(d)).collect()));
        prev = c;
    }
    let u0 = (0..dim).map(|_| b.rng.gen_range(-1.0..=1.0)).collect();
    let spec = SchemeSpec::hybrid(dim, subs).expect("generated widths satisfy d_m <= c_{m-1}");
    Instance { seed, scheme: Scheme::Hybrid, spec, u0 }
}

/// A general-scheme instance with `J = 2` (three parts and a closing step).
///
/// With `time_dependent` every operator carries the coefficient `1 + ½ sin t`.
pub fn random_general_instance(seed: u64, time_dependent: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let dim = rng.gen_range(2..=6);
    let mut b = Builder { rng, dim, weight: 0.25, time_dependent };
    let (p1, w1) = b.part(1, None);
    let (p2, w2) = b.part(w1, None);
    let (p3, w3) = b.part(w2, Some(w1));
    let d = b.rng.gen_range(1..=w3);
    let closing = b.channel(d);
    let u0 = (0..dim).map(|_| b.rng.gen_range(-1.0..=1.0)).collect();
    let spec = SchemeSpec::general(dim, vec![p1, p2, p3], closing).expect("generated parts are compatible");
    Instance { seed, scheme: Scheme::GeneralHybrid, spec, u0 }
}
