//! Continuous baseline: a standard Gaussian DDPM on the mask mapped to `{-1, +1}`, trained
//! by noise prediction and sampled ancestrally.

use super::state::{MaskState, TAMPERED, UNTAMPERED};
use crate::error::{invalid, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

/// Untampered maps to -1, tampered to +1.
pub fn map_mask(x0: &MaskState) -> Vec<f64> {
    x0.labels()
        .iter()
        .map(|&l| if l == TAMPERED { 1.0 } else { -1.0 })
        .collect()
}

/// Tampered where the value is strictly positive; zero counts as untampered.
pub fn sign_mask(height: usize, width: usize, x: &[f64], step: usize) -> Result<MaskState> {
    let labels = x
        .iter()
        .map(|&v| if v > 0.0 { TAMPERED } else { UNTAMPERED })
        .collect();
    MaskState::new(height, width, labels, step)
}

/// `sqrt(abar) * y0 + sqrt(1 - abar) * eps`.
pub fn gaussian_noised(y0: &[f64], alpha_bar: f64, eps: &[f64]) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    y0.iter().zip(eps).map(|(&y, &e)| a * y + b * e).collect()
}

/// Draws `x_t ~ q(x_t | y0)`. Returns `(x_t, eps)`.
pub fn gaussian_q_sample(
    y0: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    sched.check_step(t, 1)?;
    let eps: Vec<f64> = (0..y0.len()).map(|_| rng.normal()).collect();
    Ok((gaussian_noised(y0, sched.alpha_bar(t), &eps), eps))
}

/// Mean squared error between predicted and injected noise.
pub fn noise_mse(eps_hat: &[f64], eps: &[f64]) -> Result<f64> {
    if eps_hat.len() != eps.len() || eps.is_empty() {
        return Err(invalid(format!(
            "noise prediction has {} values, target has {}",
            eps_hat.len(),
            eps.len()
        )));
    }
    Ok(eps_hat
        .iter()
        .zip(eps)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / eps.len() as f64)
}

/// Batch noise-prediction loss on the tape. `eps_hat` is `[N, 1, H, W]`; `eps` holds one
/// target per batch element. Returns the mean loss and the per-sample values.
pub fn gaussian_loss<T: Real>(
    tape: &mut Tape<T>,
    eps_hat: Var,
    eps: &[Vec<f64>],
) -> Result<(Var, Vec<f64>)> {
    let shape = tape.shape(eps_hat).to_vec();
    let per = shape.iter().skip(1).product::<usize>();
    if shape.len() != 4
        || shape[1] != 1
        || shape[0] != eps.len()
        || eps.iter().any(|e| e.len() != per)
    {
        return Err(crate::Error::ShapeMismatch {
            op: "gaussian_loss",
            lhs: shape,
            rhs: vec![eps.len(), 1, eps.first().map_or(0, Vec::len)],
        });
    }
    let flat: Vec<f64> = eps.iter().flatten().copied().collect();
    let pred = tape.value(eps_hat).data();
    let values = pred
        .chunks(per)
        .zip(eps)
        .map(|(p, e)| {
            let p: Vec<f64> = p.iter().map(|&v| v.to_f64()).collect();
            noise_mse(&p, e)
        })
        .collect::<Result<Vec<f64>>>()?;
    let target = tape.constant(Tensor::from_f64(&shape, &flat)?)?;
    let diff = tape.sub(eps_hat, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok((tape.mean(sq)?, values))
}

/// Clean-signal estimate from a noise prediction, clipped to `[-1, 1]`.
pub fn predict_x0(x_t: &[f64], eps_hat: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.iter()
        .zip(eps_hat)
        .map(|(&x, &e)| ((x - b * e) / a).clamp(-1.0, 1.0))
        .collect()
}

/// One ancestral step `x_t -> x_{t-1}` using the clipped clean estimate and the Gaussian
/// posterior `q(x_{t-1} | x_t, x0)`. At `t = 1` the posterior mean is returned without noise.
pub fn gaussian_reverse_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    sched.check_step(t, 1)?;
    if x_t.len() != eps_hat.len() {
        return Err(invalid("noise prediction and state differ in size"));
    }
    let (abar, abar_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let (alpha, beta) = (sched.alpha(t), sched.beta(t));
    let x0 = predict_x0(x_t, eps_hat, abar);
    let c0 = abar_prev.sqrt() * beta / (1.0 - abar);
    let ct = alpha.sqrt() * (1.0 - abar_prev) / (1.0 - abar);
    let sigma = (beta * (1.0 - abar_prev) / (1.0 - abar)).sqrt();
    Ok(x_t
        .iter()
        .zip(&x0)
        .map(|(&x, &c)| {
            let mean = c0 * c + ct * x;
            if t > 1 {
                mean + sigma * rng.normal()
            } else {
                mean
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;

    #[test]
    fn perfect_noise_prediction_has_zero_loss() {
        let eps = vec![0.3, -1.2, 0.7];
        assert_eq!(noise_mse(&eps, &eps).unwrap(), 0.0);
    }

    #[test]
    fn no_noise_keeps_mapped_mask() {
        let x0 = MaskState::new(1, 3, vec![0, 1, 1], 0).unwrap();
        let y = map_mask(&x0);
        assert_eq!(y, vec![-1.0, 1.0, 1.0]);
        assert_eq!(gaussian_noised(&y, 1.0, &[5.0, -3.0, 2.0]), y);
    }

    #[test]
    fn marginal_mean_matches_closed_form() {
        let n = 100_000;
        let y = vec![1.0; n];
        let mut rng = RngStream::new(17);
        let eps: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let x = gaussian_noised(&y, 0.5, &eps);
        let mean = x.iter().sum::<f64>() / n as f64;
        // Var of each draw is 1 - abar = 0.5.
        let bound = 3.0 * 0.5f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 0.5f64.sqrt()).abs() < bound, "mean {mean}");
    }

    #[test]
    fn tape_loss_matches_direct_value() {
        let mut tape = Tape::<f64>::new();
        let pred = tape
            .param(Tensor::from_f64(&[2, 1, 1, 2], &[0.5, -0.5, 1.0, 0.0]).unwrap())
            .unwrap();
        let eps = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let (loss, per) = gaussian_loss(&mut tape, pred, &eps).unwrap();
        assert!((tape.value(loss).data()[0] - 0.375).abs() < 1e-15);
        assert_eq!(per, vec![0.25, 0.5]);
        let g = tape.backward(loss).unwrap();
        let gp = g.get(pred).unwrap().data().to_vec();
        assert_eq!(gp, vec![0.25, -0.25, 0.0, -0.5]);
    }

    #[test]
    fn final_step_with_exact_noise_recovers_mask() {
        let sched = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let y = vec![-1.0, 1.0, 1.0, -1.0];
        let eps = vec![0.4, -0.2, 1.1, 0.0];
        let x1 = gaussian_noised(&y, sched.alpha_bar(1), &eps);
        let mut rng = RngStream::new(1);
        let x0 = gaussian_reverse_step(&x1, &eps, 1, &sched, &mut rng).unwrap();
        for (a, b) in x0.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
        let m = sign_mask(2, 2, &x0, 0).unwrap();
        assert_eq!(m.labels(), &[0, 1, 1, 0]);
    }

    #[test]
    fn zero_maps_to_untampered() {
        assert_eq!(sign_mask(1, 2, &[0.0, 1e-9], 0).unwrap().labels(), &[0, 1]);
    }
}
