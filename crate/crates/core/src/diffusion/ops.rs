//! Forward noising, the deterministic reverse update and the base objective.

use super::latent::{axpby, LatentBatch};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};

/// `sqrt(alpha)·x0 + sqrt(1 - alpha)·eps`.
pub fn add_noise_with_alpha(
    x0: &LatentBatch,
    eps: &LatentBatch,
    alpha: f64,
) -> Result<LatentBatch> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    axpby(alpha.sqrt(), x0, (1.0 - alpha).sqrt(), eps)
}

/// Noises `x0` to step `t` of `sched`.
pub fn add_noise(
    x0: &LatentBatch,
    eps: &LatentBatch,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentBatch> {
    add_noise_with_alpha(x0, eps, sched.alpha(t)?)
}

/// One deterministic update from signal level `alpha_t` to `alpha_prev`:
///
/// `x_prev = sqrt(a_prev)/sqrt(a_t)·x_t
///         + sqrt(a_prev)·(sqrt(1/a_prev - 1) - sqrt(1/a_t - 1))·eps_pred`
pub fn ddim_update(
    x_t: &LatentBatch,
    eps_pred: &LatentBatch,
    alpha_t: f64,
    alpha_prev: f64,
) -> Result<LatentBatch> {
    if alpha_t <= 0.0 {
        return Err(Error::Singularity(format!("alpha_t = {alpha_t}")));
    }
    if !(alpha_prev > 0.0 && alpha_prev <= 1.0) || alpha_t > 1.0 {
        return Err(Error::invalid(format!(
            "alphas ({alpha_t}, {alpha_prev}) outside (0, 1]"
        )));
    }
    let x_coef = alpha_prev.sqrt() / alpha_t.sqrt();
    let eps_coef =
        alpha_prev.sqrt() * ((1.0 / alpha_prev - 1.0).sqrt() - (1.0 / alpha_t - 1.0).sqrt());
    axpby(x_coef, x_t, eps_coef, eps_pred)
}

/// Deterministic reverse step from `t` to `t - 1`; needs `2 <= t <= T`.
pub fn reverse_step(
    x_t: &LatentBatch,
    eps_pred: &LatentBatch,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentBatch> {
    if t < 2 || t > sched.steps() {
        return Err(Error::InvalidStep {
            t,
            steps: sched.steps(),
        });
    }
    ddim_update(x_t, eps_pred, sched.alpha(t)?, sched.alpha(t - 1)?)
}

/// Mean squared error over every element.
pub fn base_loss(eps: &LatentBatch, eps_pred: &LatentBatch) -> Result<f64> {
    eps.same_shape(eps_pred, "base_loss")?;
    let n = eps.data.len() as f64;
    let sum: f64 = eps
        .data
        .iter()
        .zip(eps_pred.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Space;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> LatentBatch {
        LatentBatch::new(Array4::from_elem((1, 1, 1, 1), v), Space::Latent).unwrap()
    }

    fn value(b: &LatentBatch) -> f64 {
        b.data[[0, 0, 0, 0]]
    }

    #[test]
    fn noise_endpoints() {
        let x0 = scalar(2.0);
        let eps = scalar(1.0);
        assert_eq!(value(&add_noise_with_alpha(&x0, &eps, 1.0).unwrap()), 2.0);
        assert_eq!(value(&add_noise_with_alpha(&x0, &eps, 0.0).unwrap()), 1.0);
    }

    #[test]
    fn noise_hand_value() {
        // 0.5 * 2 + sqrt(0.75) * 1
        let out = add_noise_with_alpha(&scalar(2.0), &scalar(1.0), 0.25).unwrap();
        assert!((value(&out) - 1.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn step_out_of_range() {
        let s = NoiseSchedule::linear(10).unwrap();
        let x = scalar(0.0);
        assert!(matches!(
            add_noise(&x, &x, 0, &s),
            Err(Error::InvalidStep { .. })
        ));
        assert!(matches!(
            add_noise(&x, &x, 11, &s),
            Err(Error::InvalidStep { .. })
        ));
        assert!(matches!(
            reverse_step(&x, &x, 1, &s),
            Err(Error::InvalidStep { .. })
        ));
    }

    #[test]
    fn stationary_and_zero_eps() {
        let x = scalar(0.7);
        let e = scalar(-1.3);
        assert!((value(&ddim_update(&x, &e, 0.4, 0.4).unwrap()) - 0.7).abs() < 1e-15);
        let zero = scalar(0.0);
        let out = ddim_update(&x, &zero, 0.4, 0.9).unwrap();
        assert!((value(&out) - (0.9f64.sqrt() / 0.4f64.sqrt()) * 0.7).abs() < 1e-15);
    }

    #[test]
    fn singular_alpha() {
        let x = scalar(1.0);
        assert!(matches!(
            ddim_update(&x, &x, 0.0, 0.5),
            Err(Error::Singularity(_))
        ));
    }

    #[test]
    fn reverse_recovers_previous_noising() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = LatentBatch::randn((2, 3, 4, 4), Space::Latent, &mut rng);
        let eps = LatentBatch::randn((2, 3, 4, 4), Space::Latent, &mut rng);
        for t in 2..=50 {
            let xt = add_noise(&x0, &eps, t, &s).unwrap();
            let prev = reverse_step(&xt, &eps, t, &s).unwrap();
            let want = add_noise(&x0, &eps, t - 1, &s).unwrap();
            for (a, b) in prev.data.iter().zip(want.data.iter()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn base_loss_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = LatentBatch::randn((2, 2, 3, 3), Space::Latent, &mut rng);
        assert_eq!(base_loss(&a, &a).unwrap(), 0.0);
        let zeros = LatentBatch::zeros((2, 2, 3, 3), Space::Latent);
        let ones = LatentBatch::new(Array4::ones((2, 2, 3, 3)), Space::Latent).unwrap();
        assert_eq!(base_loss(&zeros, &ones).unwrap(), 1.0);
        let other = LatentBatch::zeros((1, 2, 3, 3), Space::Latent);
        assert!(base_loss(&a, &other).is_err());
    }
}
