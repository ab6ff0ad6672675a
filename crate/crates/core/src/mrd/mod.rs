//! Binary morphology, random mask perturbation and the mask random
//! difference loss.

mod loss;
mod morph;

pub use loss::{mask_tokens, total_loss, total_loss_var};
pub use morph::{downsample_mask, morph, perturb_mask, MorphOp, MrdConfig, PerturbedMask};
