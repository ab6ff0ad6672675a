use ndarray::Array2;

use crate::corpus::BinaryMask;
use crate::diffusion::LatentBatch;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

fn check_omega(omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::invalid(format!("omega {omega} outside [0, 1]")));
    }
    Ok(())
}

/// `ω·MSE(M′⊙ε, M′⊙ε̂) + (1-ω)·MSE(ε, ε̂)`, both means over every element.
///
/// `m_prime` holds one latent-resolution mask per sample, or a single mask
/// shared by the whole batch; masks broadcast over channels.
pub fn total_loss(
    eps: &LatentBatch,
    eps_pred: &LatentBatch,
    m_prime: &[BinaryMask],
    omega: f64,
) -> Result<f64> {
    check_omega(omega)?;
    eps.same_shape(eps_pred, "total_loss")?;
    let (b, c, h, w) = eps.shape();
    if m_prime.len() != b && m_prime.len() != 1 {
        return Err(Error::invalid(format!(
            "{} masks for a batch of {b}",
            m_prime.len()
        )));
    }
    if m_prime.iter().any(|m| m.dims() != (w, h)) {
        return Err(Error::invalid("mask resolution differs from latent"));
    }
    let n = (b * c * h * w) as f64;
    let (mut masked, mut plain) = (0.0, 0.0);
    for s in 0..b {
        let m = &m_prime[if m_prime.len() == 1 { 0 } else { s }];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let d = eps.data[[s, ch, y, x]] - eps_pred.data[[s, ch, y, x]];
                    plain += d * d;
                    if m.get(x, y) {
                        masked += d * d;
                    }
                }
            }
        }
    }
    // Written as base + ω·(masked - base) so both degenerate cases are exact.
    Ok(plain / n + omega * ((masked - plain) / n))
}

/// Token-layout `(H·W)×C` copy of a mask, for use on a tape.
pub fn mask_tokens(mask: &BinaryMask, channels: usize) -> Array2<f64> {
    let (w, h) = mask.dims();
    Array2::from_shape_fn((w * h, channels), |(i, _)| {
        mask.get(i % w, i / w) as u8 as f64
    })
}

/// [`total_loss`] for one sample on a tape. `mask` is a `(H·W)×C` 0/1
/// matrix from [`mask_tokens`].
pub fn total_loss_var(
    tape: &Tape,
    eps: Var,
    eps_pred: Var,
    mask: &Array2<f64>,
    omega: f64,
) -> Result<Var> {
    check_omega(omega)?;
    if tape.shape(eps) != mask.dim() {
        return Err(Error::invalid(format!(
            "mask {:?} does not match noise {:?}",
            mask.dim(),
            tape.shape(eps)
        )));
    }
    let base = tape.mse(eps, eps_pred)?;
    if omega == 0.0 {
        return tape.lin_comb(&[(base, 1.0)]);
    }
    let m = tape.leaf(mask.clone());
    let masked = tape.mse(tape.mul(eps, m)?, tape.mul(eps_pred, m)?)?;
    tape.lin_comb(&[(masked, omega), (base, 1.0 - omega)])
}
