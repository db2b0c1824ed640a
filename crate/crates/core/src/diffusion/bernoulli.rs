//! Bernoulli (two-class categorical) diffusion over one-hot masks.
//!
//! Forward kernel: `q(X_t | X_{t-1}) = Cat(beta_t/2 + (1 - beta_t) X_{t-1})`, with the
//! closed-form marginal `q(X_t | X_0) = Cat((1 - abar_t)/2 + abar_t X_0)`. The posterior
//! `q(X_{t-1} | X_t, X_0)` is the Bayes product of the one-step likelihood and the
//! `t-1` marginal, so its prior factor uses `abar_{t-1}`.

use serde::{Deserialize, Serialize};

use super::state::{CategoricalField, MaskState, TAMPERED, UNTAMPERED};
use crate::error::{invalid, Result};
use crate::numerics::{CustomOp, Real, Tape, Tensor, Var};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

/// Floor applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossBranch {
    Kl,
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub branch: LossBranch,
}

#[inline]
fn one_hot(class: u8) -> [f64; 2] {
    if class == TAMPERED {
        [0.0, 1.0]
    } else {
        [1.0, 0.0]
    }
}

/// `(1 - keep)/2 + keep * onehot(class)`: the categorical produced by keeping a label
/// with probability `keep` and resampling it uniformly otherwise.
#[inline]
pub fn keep_or_uniform(class: u8, keep: f64) -> [f64; 2] {
    let e = one_hot(class);
    [
        (1.0 - keep) / 2.0 + keep * e[0],
        (1.0 - keep) / 2.0 + keep * e[1],
    ]
}

/// Exact posterior `q(X_{t-1} | X_t = xt, X_0 = x0)` for one pixel.
#[inline]
pub fn posterior_pixel(xt: u8, x0: u8, alpha_t: f64, alpha_bar_prev: f64) -> [f64; 2] {
    let lik = keep_or_uniform(xt, alpha_t);
    let prior = keep_or_uniform(x0, alpha_bar_prev);
    let th = [lik[0] * prior[0], lik[1] * prior[1]];
    let z = th[0] + th[1];
    [th[0] / z, th[1] / z]
}

/// `sum_k posterior(xt, k) * p0[k]` for one pixel.
#[inline]
pub fn mixture_pixel(xt: u8, p0: [f64; 2], alpha_t: f64, alpha_bar_prev: f64) -> [f64; 2] {
    let a = posterior_pixel(xt, UNTAMPERED, alpha_t, alpha_bar_prev);
    let b = posterior_pixel(xt, TAMPERED, alpha_t, alpha_bar_prev);
    [a[0] * p0[0] + b[0] * p0[1], a[1] * p0[0] + b[1] * p0[1]]
}

/// `KL(q || p)` for two-class distributions with `0 log 0 = 0` and `p` floored.
#[inline]
pub fn categorical_kl(q: [f64; 2], p: [f64; 2]) -> f64 {
    let mut kl = 0.0;
    for k in 0..2 {
        if q[k] > 0.0 {
            kl += q[k] * (q[k].ln() - p[k].max(LOG_FLOOR).ln());
        }
    }
    kl.max(0.0)
}

fn check_beta(beta_t: f64) -> Result<()> {
    if !(beta_t > 0.0 && beta_t < 1.0) {
        return Err(invalid(format!("beta_t must lie in (0, 1), got {beta_t}")));
    }
    Ok(())
}

/// Parameters of the one-step corruption `q(X_t | X_{t-1})`.
pub fn q_step_params(x_prev: &MaskState, beta_t: f64) -> Result<CategoricalField> {
    check_beta(beta_t)?;
    let keep = 1.0 - beta_t;
    Ok(CategoricalField::from_pixels_unchecked(
        x_prev.height(),
        x_prev.width(),
        x_prev.labels().iter().map(|&l| keep_or_uniform(l, keep)),
    ))
}

/// One forward corruption step; the returned state's step is incremented.
pub fn q_sample_step(x_prev: &MaskState, beta_t: f64, rng: &mut RngStream) -> Result<MaskState> {
    let params = q_step_params(x_prev, beta_t)?;
    Ok(params.sample(x_prev.step() + 1, rng))
}

/// Closed-form marginal `q(X_t | X_0)`.
pub fn q_marginal_params(
    x0: &MaskState,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<CategoricalField> {
    sched.check_step(t, 1)?;
    let ab = sched.alpha_bar(t);
    Ok(CategoricalField::from_pixels_unchecked(
        x0.height(),
        x0.width(),
        x0.labels().iter().map(|&l| keep_or_uniform(l, ab)),
    ))
}

/// Draws `X_t ~ q(X_t | X_0)` with one uniform per pixel from `rng`.
pub fn q_sample(
    x0: &MaskState,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<MaskState> {
    Ok(q_marginal_params(x0, t, sched)?.sample(t, rng))
}

/// Exact Bayes posterior `q(X_{t-1} | X_t, X_0)` for `2 <= t <= T`.
pub fn posterior_params(
    x_t: &MaskState,
    x0: &MaskState,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<CategoricalField> {
    sched.check_step(t, 2)?;
    x_t.same_size(x0)?;
    let (a, abp) = (sched.alpha(t), sched.alpha_bar(t - 1));
    Ok(CategoricalField::from_pixels_unchecked(
        x0.height(),
        x0.width(),
        x_t.labels()
            .iter()
            .zip(x0.labels())
            .map(|(&xt, &x0)| posterior_pixel(xt, x0, a, abp)),
    ))
}

/// Reverse-step distribution `P_{t-1} = sum_k posterior(X_t, e_k) * P0[k]`.
pub fn mixture_reverse_params(
    x_t: &MaskState,
    p0_hat: &CategoricalField,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<CategoricalField> {
    sched.check_step(t, 2)?;
    p0_hat.matches(x_t)?;
    let (a, abp) = (sched.alpha(t), sched.alpha_bar(t - 1));
    Ok(CategoricalField::from_pixels_unchecked(
        x_t.height(),
        x_t.width(),
        x_t.labels()
            .iter()
            .enumerate()
            .map(|(i, &xt)| mixture_pixel(xt, p0_hat.pixel(i), a, abp)),
    ))
}

/// Mean over pixels of `KL(q(X_{t-1}|X_t,X_0) || P_{t-1})`.
pub fn kl_loss(
    x_t: &MaskState,
    x0: &MaskState,
    p0_hat: &CategoricalField,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LossValue> {
    let q = posterior_params(x_t, x0, t, sched)?;
    let p = mixture_reverse_params(x_t, p0_hat, t, sched)?;
    let n = x0.pixels();
    let total: f64 = (0..n).map(|i| categorical_kl(q.pixel(i), p.pixel(i))).sum();
    Ok(LossValue {
        value: total / n as f64,
        branch: LossBranch::Kl,
    })
}

/// Mean over pixels of `-sum_k X_0[k] log P0[k]`, computed on the predicted
/// distribution directly.
pub fn ce_loss(x0: &MaskState, p0_hat: &CategoricalField) -> Result<LossValue> {
    p0_hat.matches(x0)?;
    let n = x0.pixels();
    let total: f64 = x0
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| -p0_hat.pixel(i)[l as usize].max(LOG_FLOOR).ln())
        .sum();
    Ok(LossValue {
        value: total / n as f64,
        branch: LossBranch::Ce,
    })
}

/// Per-pixel `KL(q(X_T | X_0) || Cat(0.5))`, the prior-matching term dropped from the bound.
/// It is the same for either clean class.
pub fn terminal_kl(sched: &NoiseSchedule) -> f64 {
    categorical_kl(
        keep_or_uniform(UNTAMPERED, sched.alpha_bar(sched.steps())),
        [0.5, 0.5],
    )
}

/// Training target for one batch element.
#[derive(Debug, Clone, Copy)]
pub struct LossTarget<'a> {
    pub x0: &'a MaskState,
    pub x_t: &'a MaskState,
    pub t: usize,
}

/// Per-pixel cached coefficients for the loss backward pass.
#[derive(Clone, Copy)]
enum PixelTerm {
    /// Target posterior `q` and the two mixture components.
    Kl {
        q: [f64; 2],
        a: [f64; 2],
        b: [f64; 2],
    },
    Ce {
        class: u8,
    },
}

struct BernoulliLossOp {
    terms: Vec<PixelTerm>,
    pixels: usize,
    batch: usize,
}

impl BernoulliLossOp {
    /// `(dL/dP0[untampered], dL/dP0[tampered])` for one pixel, before batch/pixel averaging.
    fn pixel_grad(term: &PixelTerm, p0: [f64; 2]) -> [f64; 2] {
        match *term {
            PixelTerm::Kl { q, a, b } => {
                let p = [a[0] * p0[0] + b[0] * p0[1], a[1] * p0[0] + b[1] * p0[1]];
                let mut g = [0.0; 2];
                for j in 0..2 {
                    if q[j] > 0.0 && p[j] > LOG_FLOOR {
                        let w = -q[j] / p[j];
                        g[0] += w * a[j];
                        g[1] += w * b[j];
                    }
                }
                g
            }
            PixelTerm::Ce { class } => {
                let mut g = [0.0; 2];
                let pc = p0[class as usize];
                if pc > LOG_FLOOR {
                    g[class as usize] = -1.0 / pc;
                }
                g
            }
        }
    }
}

impl<T: Real> CustomOp<T> for BernoulliLossOp {
    fn name(&self) -> &'static str {
        "bernoulli_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
    ) -> Vec<Option<Vec<T>>> {
        let p0 = inputs[0].data();
        let hw = self.pixels;
        let scale = grad_out[0].to_f64() / (self.batch * hw) as f64;
        let mut g = vec![T::zero(); p0.len()];
        for n in 0..self.batch {
            let base = n * 2 * hw;
            for i in 0..hw {
                let px = [p0[base + i].to_f64(), p0[base + hw + i].to_f64()];
                let d = Self::pixel_grad(&self.terms[n * hw + i], px);
                g[base + i] = T::from_f64(d[0] * scale);
                g[base + hw + i] = T::from_f64(d[1] * scale);
            }
        }
        vec![Some(g)]
    }
}

/// Batch loss on the tape: KL branch for `t >= 2`, cross-entropy for `t = 1`, averaged
/// over pixels and then over the batch. `p0` is the network output `[N, 2, H, W]`.
pub fn bernoulli_loss<T: Real>(
    tape: &mut Tape<T>,
    p0: Var,
    targets: &[LossTarget<'_>],
    sched: &NoiseSchedule,
) -> Result<(Var, Vec<LossValue>)> {
    let shape = tape.shape(p0).to_vec();
    if shape.len() != 4 || shape[1] != 2 || shape[0] != targets.len() {
        return Err(crate::Error::ShapeMismatch {
            op: "bernoulli_loss",
            lhs: shape,
            rhs: vec![targets.len(), 2],
        });
    }
    let (batch, h, w) = (shape[0], shape[2], shape[3]);
    let hw = h * w;
    let data = tape.value(p0).data();
    let mut terms = Vec::with_capacity(batch * hw);
    let mut values = Vec::with_capacity(batch);
    let mut total = 0.0;
    for (n, tg) in targets.iter().enumerate() {
        if tg.x0.height() != h || tg.x0.width() != w {
            return Err(invalid(format!(
                "target {n} is {}x{}, prediction is {h}x{w}",
                tg.x0.height(),
                tg.x0.width()
            )));
        }
        tg.x0.same_size(tg.x_t)?;
        sched.check_step(tg.t, 1)?;
        let base = n * 2 * hw;
        let mut sum = 0.0;
        let branch = if tg.t >= 2 {
            LossBranch::Kl
        } else {
            LossBranch::Ce
        };
        let (alpha, abp) = if tg.t >= 2 {
            (sched.alpha(tg.t), sched.alpha_bar(tg.t - 1))
        } else {
            (1.0, 1.0)
        };
        for i in 0..hw {
            let px = [data[base + i].to_f64(), data[base + hw + i].to_f64()];
            let x0 = tg.x0.labels()[i];
            let term = match branch {
                LossBranch::Kl => {
                    let xt = tg.x_t.labels()[i];
                    let q = posterior_pixel(xt, x0, alpha, abp);
                    let a = posterior_pixel(xt, UNTAMPERED, alpha, abp);
                    let b = posterior_pixel(xt, TAMPERED, alpha, abp);
                    let p = [a[0] * px[0] + b[0] * px[1], a[1] * px[0] + b[1] * px[1]];
                    sum += categorical_kl(q, p);
                    PixelTerm::Kl { q, a, b }
                }
                LossBranch::Ce => {
                    sum += -px[x0 as usize].max(LOG_FLOOR).ln();
                    PixelTerm::Ce { class: x0 }
                }
            };
            terms.push(term);
        }
        let value = sum / hw as f64;
        total += value;
        values.push(LossValue { value, branch });
    }
    let out = Tensor::scalar(T::from_f64(total / batch as f64));
    let op = BernoulliLossOp {
        terms,
        pixels: hw,
        batch,
    };
    let var = tape.custom(&[p0], out, Box::new(op))?;
    Ok((var, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_cosine_schedule, make_linear_schedule};

    fn px_mask(class: u8) -> MaskState {
        MaskState::filled(1, 1, class, 0).unwrap()
    }

    #[test]
    fn step_params_in_noiseless_limit() {
        let m = MaskState::new(1, 2, vec![0, 1], 0).unwrap();
        let p = q_step_params(&m, 1e-15).unwrap();
        for (a, b) in p.probs().iter().zip(m.to_one_hot()) {
            assert!((a - b).abs() < 1e-14);
        }
        let mut rng = RngStream::new(1);
        let out = q_sample_step(&m, 1e-15, &mut rng).unwrap();
        assert_eq!(out.labels(), m.labels());
        assert_eq!(out.step(), 1);
    }

    #[test]
    fn step_rejects_boundary_beta() {
        let m = px_mask(0);
        let mut rng = RngStream::new(1);
        assert!(q_sample_step(&m, 1.0, &mut rng).is_err());
        assert!(q_sample_step(&m, 0.0, &mut rng).is_err());
    }

    #[test]
    fn step_monte_carlo_matches_parameter() {
        // P(class0) = 1 - beta/2 = 0.9; 3 sigma binomial band over 1e5 draws is ~0.0028.
        let m = MaskState::filled(1, 100_000, 0, 0).unwrap();
        let mut rng = RngStream::new(42);
        let out = q_sample_step(&m, 0.2, &mut rng).unwrap();
        let frac0 = 1.0 - out.tampered_fraction();
        assert!((frac0 - 0.9).abs() < 0.003, "{frac0}");
    }

    #[test]
    fn marginal_direct_values() {
        let sched = make_linear_schedule(2, 0.5, 0.5).unwrap();
        // alpha_bar_1 = 0.5
        let p = q_marginal_params(&px_mask(0), 1, &sched).unwrap();
        assert_eq!(p.pixel(0), [0.75, 0.25]);
        assert!(q_marginal_params(&px_mask(0), 0, &sched).is_err());
        assert!(q_marginal_params(&px_mask(0), 3, &sched).is_err());
    }

    #[test]
    fn marginal_tends_to_uniform() {
        let sched = make_linear_schedule(400, 0.2, 0.2).unwrap();
        let p = q_marginal_params(&px_mask(1), 400, &sched).unwrap();
        assert!((p.pixel(0)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn posterior_worked_example() {
        // alpha_t = 0.8, abar_{t-1} = 0.625: abar_1 = 0.625, beta_2 = 0.2.
        let sched = make_linear_schedule(2, 0.375, 0.375).unwrap();
        let p = posterior_pixel(0, 0, 0.8, 0.625);
        assert!((p[0] - 0.975).abs() < 1e-12 && (p[1] - 0.025).abs() < 1e-12);
        assert_eq!(sched.alpha_bar(1), 0.625);
    }

    #[test]
    fn posterior_degenerate_limits() {
        // No prior noise: one-hot at x0 whatever x_t says.
        assert_eq!(posterior_pixel(1, 0, 0.7, 1.0), [1.0, 0.0]);
        assert_eq!(posterior_pixel(0, 1, 0.7, 1.0), [0.0, 1.0]);
        let p = posterior_pixel(1, 1, 1.0 - 1e-12, 0.3);
        assert!((p[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn posterior_rejects_first_step() {
        let sched = make_linear_schedule(10, 0.01, 0.2).unwrap();
        assert!(posterior_params(&px_mask(0), &px_mask(0), 1, &sched).is_err());
    }

    #[test]
    fn mixture_collapses_on_one_hot_prediction() {
        let sched = make_cosine_schedule(50, 0.008).unwrap();
        let x0 = MaskState::new(1, 2, vec![0, 1], 0).unwrap();
        let xt = MaskState::new(1, 2, vec![1, 1], 7).unwrap();
        let p0 = CategoricalField::new(1, 2, x0.to_one_hot()).unwrap();
        let mix = mixture_reverse_params(&xt, &p0, 7, &sched).unwrap();
        let post = posterior_params(&xt, &x0, 7, &sched).unwrap();
        assert_eq!(mix, post);
    }

    #[test]
    fn mixture_under_flat_prior() {
        // With abar_{t-1} -> 0 the prior factor is flat, so the mixture reduces to the
        // normalised one-step likelihood of x_t; it is uniform only when alpha_t -> 0 too.
        let p = mixture_pixel(1, [0.5, 0.5], 0.6, 1e-300);
        assert!((p[0] - 0.2).abs() < 1e-12 && (p[1] - 0.8).abs() < 1e-12);
        let p = mixture_pixel(1, [0.5, 0.5], 1e-300, 1e-300);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_for_perfect_prediction() {
        let sched = make_linear_schedule(50, 0.01, 0.2).unwrap();
        let x0 = MaskState::new(1, 3, vec![0, 1, 1], 0).unwrap();
        let xt = MaskState::new(1, 3, vec![1, 1, 0], 4).unwrap();
        let p0 = CategoricalField::new(1, 3, x0.to_one_hot()).unwrap();
        let l = kl_loss(&xt, &x0, &p0, 4, &sched).unwrap();
        assert!(l.value.abs() < 1e-12);
        assert_eq!(l.branch, LossBranch::Kl);
    }

    #[test]
    fn kl_scalar_value() {
        let expected = 0.975 * (1.95f64).ln() + 0.025 * (0.05f64).ln();
        let kl = categorical_kl([0.975, 0.025], [0.5, 0.5]);
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.576).abs() < 1e-3);
    }

    #[test]
    fn ce_values() {
        let x1 = px_mask(1);
        let half = CategoricalField::uniform(1, 1);
        assert!((ce_loss(&x1, &half).unwrap().value - 2f64.ln()).abs() < 1e-15);
        let p = CategoricalField::new(1, 1, vec![0.9, 0.1]).unwrap();
        assert!((ce_loss(&x1, &p).unwrap().value - 10f64.ln()).abs() < 1e-12);
        let exact = CategoricalField::new(1, 1, vec![0.0, 1.0]).unwrap();
        assert!(ce_loss(&x1, &exact).unwrap().value <= 1e-11);
    }

    #[test]
    fn terminal_term_is_small_for_default_linear() {
        let sched = make_linear_schedule(50, 0.01, 0.2).unwrap();
        assert!(terminal_kl(&sched) < 1e-4);
    }

    #[test]
    fn tape_loss_matches_pure_functions() {
        let sched = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let x0 = MaskState::new(2, 2, vec![0, 1, 1, 0], 0).unwrap();
        let xt = MaskState::new(2, 2, vec![1, 1, 0, 0], 5).unwrap();
        let tamp = [0.2, 0.7, 0.55, 0.1];
        let field = CategoricalField::from_tampered(2, 2, &tamp).unwrap();
        // NCHW layout: channel 0 then channel 1.
        let mut nchw: Vec<f64> = tamp.iter().map(|p| 1.0 - p).collect();
        nchw.extend_from_slice(&tamp);
        for t in [1usize, 5] {
            let mut tape = Tape::<f64>::new();
            let p0 = tape
                .param(Tensor::new(vec![1, 2, 2, 2], nchw.clone()).unwrap())
                .unwrap();
            let tg = [LossTarget {
                x0: &x0,
                x_t: &xt,
                t,
            }];
            let (loss, vals) = bernoulli_loss(&mut tape, p0, &tg, &sched).unwrap();
            let expected = if t == 1 {
                ce_loss(&x0, &field).unwrap().value
            } else {
                kl_loss(&xt, &x0, &field, t, &sched).unwrap().value
            };
            assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-14);
            assert!((vals[0].value - expected).abs() < 1e-14);
        }
    }
}
