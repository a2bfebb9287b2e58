use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TapeError;

/// Compares `grad` against central differences of `loss` at `samples`
/// randomly chosen coordinates of `theta`.
///
/// Returns the largest `|fd − g| / max(|g|, 1e-8)`.
pub fn fd_check(
    loss: impl Fn(&[f64]) -> f64,
    grad: &[f64],
    theta: &[f64],
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, TapeError> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(TapeError::Step(step));
    }
    if grad.len() != theta.len() {
        return Err(TapeError::Usage(format!("gradient has {} entries, parameters {}", grad.len(), theta.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, theta.len(), samples.min(theta.len()));
    let mut worst = 0.0f64;
    let mut probe = theta.to_vec();
    for i in picks.iter() {
        probe[i] = theta[i] + step;
        let up = loss(&probe);
        probe[i] = theta[i] - step;
        let down = loss(&probe);
        probe[i] = theta[i];
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1e-8));
    }
    Ok(worst)
}
