//! Discrete mask diffusion and the continuous baseline it is compared against.

mod bernoulli;
mod gaussian;
mod state;

pub use bernoulli::{
    bernoulli_loss, categorical_kl, ce_loss, keep_or_uniform, kl_loss, mixture_pixel,
    mixture_reverse_params, posterior_params, posterior_pixel, q_marginal_params, q_sample,
    q_sample_step, q_step_params, terminal_kl, LossBranch, LossTarget, LossValue, LOG_FLOOR,
};
pub use gaussian::{
    gaussian_loss, gaussian_noised, gaussian_q_sample, gaussian_reverse_step, map_mask, noise_mse,
    predict_x0, sign_mask,
};
pub use state::{CategoricalField, MaskState, FIELD_SUM_TOL, TAMPERED, UNTAMPERED};
