//! Oracle suite behind `maskdiff verify`: posterior against Bayes enumeration, closed-form
//! marginal against iterated single steps, terminal convergence, and gradient checks.

use std::time::Instant;

use crate::conditioning::{ConditionBundle, PyramidEncoder};
use crate::denoiser::{Ctx, Denoiser, DenoiserConfig, ParamBuilder, TscAttention};
use crate::diffusion::{
    bernoulli_loss, keep_or_uniform, posterior_params, q_marginal_params, q_sample, terminal_kl,
    LossTarget, MaskState, TAMPERED, UNTAMPERED,
};
use crate::error::Result;
use crate::image::Image;
use crate::numerics::{grad_check_many, Tape, Tensor, Var};
use crate::rng::RngStream;
use crate::schedule::{make_cosine_schedule, make_linear_schedule, NoiseSchedule};

pub const POSTERIOR_TOL: f64 = 1e-12;
pub const COMPOSITION_TOL: f64 = 1e-12;
pub const TERMINAL_GAP: f64 = 0.005;
pub const TERMINAL_KL: f64 = 1e-4;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const ATTENTION_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const GRAD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{tag} {} ({}, {:.2}s)",
            self.name, self.detail, self.seconds
        )
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// The two schedules the suite is run under.
pub fn reference_schedules() -> Result<Vec<(&'static str, NoiseSchedule)>> {
    Ok(vec![
        (
            "linear(0.01,0.2,T=50)",
            make_linear_schedule(50, 0.01, 0.2)?,
        ),
        ("cosine(s=0.008,T=50)", make_cosine_schedule(50, 0.008)?),
    ])
}

/// Per-pixel posterior `q(x_{t-1} | x_t, x_0)` as a function under test.
pub type PosteriorFn<'a> = &'a dyn Fn(u8, u8, usize, &NoiseSchedule) -> Result<[f64; 2]>;

/// The library posterior, called through its mask-level API.
pub fn library_posterior(xt: u8, x0: u8, t: usize, sched: &NoiseSchedule) -> Result<[f64; 2]> {
    let a = MaskState::new(1, 1, vec![xt], t)?;
    let b = MaskState::new(1, 1, vec![x0], 0)?;
    Ok(posterior_params(&a, &b, t, sched)?.pixel(0))
}

/// `q(x_s | x_0)` by pushing the one-hot `x_0` through `s` single-step kernels.
pub fn iterated_marginal(x0: u8, s: usize, sched: &NoiseSchedule) -> [f64; 2] {
    let mut p = keep_or_uniform(x0, 1.0);
    for k in 1..=s {
        let beta = sched.beta(k);
        // Transition: stay with probability 1 - beta/2, flip with beta/2.
        p = [
            p[0] * (1.0 - beta / 2.0) + p[1] * beta / 2.0,
            p[1] * (1.0 - beta / 2.0) + p[0] * beta / 2.0,
        ];
    }
    p
}

/// Bayes rule over the two values of `x_{t-1}`: likelihood of `x_t` given each,
/// times the iterated prior `q(x_{t-1} | x_0)`, normalized.
pub fn enumerated_posterior(xt: u8, x0: u8, t: usize, sched: &NoiseSchedule) -> [f64; 2] {
    let prior = iterated_marginal(x0, t - 1, sched);
    let beta = sched.beta(t);
    let mut joint = [0.0; 2];
    for k in [UNTAMPERED, TAMPERED] {
        let like = if k == xt {
            1.0 - beta / 2.0
        } else {
            beta / 2.0
        };
        joint[k as usize] = like * prior[k as usize];
    }
    let z = joint[0] + joint[1];
    [joint[0] / z, joint[1] / z]
}

pub fn check_posterior(posterior: PosteriorFn<'_>) -> Check {
    timed("posterior matches Bayes enumeration", || {
        let mut worst = 0.0f64;
        for (_, sched) in reference_schedules()? {
            for t in 2..=10 {
                for x0 in [UNTAMPERED, TAMPERED] {
                    for xt in [UNTAMPERED, TAMPERED] {
                        let got = posterior(xt, x0, t, &sched)?;
                        let want = enumerated_posterior(xt, x0, t, &sched);
                        worst = worst
                            .max((got[0] - want[0]).abs())
                            .max((got[1] - want[1]).abs());
                    }
                }
            }
        }
        Ok((
            worst <= POSTERIOR_TOL,
            format!("max abs error {worst:.2e}, tol {POSTERIOR_TOL:.0e}"),
        ))
    })
}

pub fn check_forward_composition() -> Check {
    timed("closed-form marginal equals iterated steps", || {
        let mut worst = 0.0f64;
        for (_, sched) in reference_schedules()? {
            for t in 1..=10 {
                for x0 in [UNTAMPERED, TAMPERED] {
                    let m = MaskState::new(1, 1, vec![x0], 0)?;
                    let got = q_marginal_params(&m, t, &sched)?.pixel(0);
                    let want = iterated_marginal(x0, t, &sched);
                    worst = worst
                        .max((got[0] - want[0]).abs())
                        .max((got[1] - want[1]).abs());
                }
            }
        }
        Ok((
            worst <= COMPOSITION_TOL,
            format!("max abs error {worst:.2e}, tol {COMPOSITION_TOL:.0e}"),
        ))
    })
}

pub fn check_terminal() -> Check {
    timed("terminal marginal is uniform", || {
        let sched = make_linear_schedule(50, 0.01, 0.2)?;
        let m = MaskState::new(1, 2, vec![UNTAMPERED, TAMPERED], 0)?;
        let gap = q_marginal_params(&m, 50, &sched)?
            .probs()
            .iter()
            .map(|p| (p - 0.5).abs())
            .fold(0.0, f64::max);
        let kl = terminal_kl(&sched);
        Ok((
            gap < TERMINAL_GAP && kl < TERMINAL_KL,
            format!("max |q - 0.5| {gap:.2e} < {TERMINAL_GAP}, prior KL {kl:.2e} nats/pixel < {TERMINAL_KL:.0e}"),
        ))
    })
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = RngStream::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform() * 2.0 - 1.0)
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = RngStream::new(seed);
    Tensor::from_fn(shape, |_| 0.5 + rng.uniform())
}

/// Contracts `y` with fixed random weights so that every output element matters.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(rand_tensor(tape.shape(y), seed))?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Primitive = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
);

fn primitive_cases() -> Vec<Primitive> {
    let t = rand_tensor;
    vec![
        (
            "add",
            vec![t(&[2, 3], 1), t(&[2, 3], 2)],
            Box::new(|tp, v| tp.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![t(&[2, 3], 1), t(&[2, 3], 2)],
            Box::new(|tp, v| tp.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![t(&[2, 3], 1), t(&[2, 3], 2)],
            Box::new(|tp, v| tp.mul(v[0], v[1])),
        ),
        (
            "div",
            vec![t(&[2, 3], 1), positive(&[2, 3], 2)],
            Box::new(|tp, v| tp.div(v[0], v[1])),
        ),
        ("exp", vec![t(&[5], 3)], Box::new(|tp, v| tp.exp(v[0]))),
        (
            "log",
            vec![positive(&[5], 3)],
            Box::new(|tp, v| tp.log(v[0])),
        ),
        (
            "sigmoid",
            vec![t(&[5], 3)],
            Box::new(|tp, v| tp.sigmoid(v[0])),
        ),
        ("silu", vec![t(&[5], 3)], Box::new(|tp, v| tp.silu(v[0]))),
        (
            "matmul",
            vec![t(&[3, 4], 1), t(&[4, 2], 2)],
            Box::new(|tp, v| tp.matmul(v[0], v[1])),
        ),
        (
            "bmm",
            vec![t(&[2, 4, 3], 1), t(&[2, 5, 4], 2)],
            Box::new(|tp, v| tp.bmm(v[0], v[1], true, true)),
        ),
        (
            "conv2d",
            vec![t(&[2, 3, 6, 6], 7), t(&[4, 3, 3, 3], 8), t(&[4], 9)],
            Box::new(|tp, v| tp.conv2d(v[0], v[1], Some(v[2]), 2)),
        ),
        (
            "upsample2x",
            vec![t(&[2, 3, 4, 4], 1)],
            Box::new(|tp, v| tp.upsample2x(v[0])),
        ),
        (
            "softmax",
            vec![t(&[2, 3, 4], 1)],
            Box::new(|tp, v| tp.softmax(v[0], 1)),
        ),
        ("sum", vec![t(&[2, 3], 1)], Box::new(|tp, v| tp.sum(v[0]))),
        ("mean", vec![t(&[2, 3], 1)], Box::new(|tp, v| tp.mean(v[0]))),
        (
            "concat",
            vec![t(&[2, 3, 4], 1), t(&[2, 5, 4], 2)],
            Box::new(|tp, v| tp.concat(&[v[0], v[1]], 1)),
        ),
        (
            "group_norm",
            vec![t(&[2, 4, 3, 3], 1), t(&[4], 2), t(&[4], 3)],
            Box::new(|tp, v| tp.group_norm(v[0], v[1], v[2], 2)),
        ),
        (
            "dropout",
            vec![t(&[4, 5], 1)],
            Box::new(|tp, v| tp.dropout(v[0], 0.3, &mut RngStream::new(5))),
        ),
        (
            "scale_shift",
            vec![t(&[2, 3, 2, 2], 1), t(&[2, 3], 2), t(&[2, 3], 3)],
            Box::new(|tp, v| tp.scale_shift(v[0], v[1], v[2])),
        ),
        (
            "add_channel",
            vec![t(&[2, 3, 2, 2], 1), t(&[2, 3], 2)],
            Box::new(|tp, v| tp.add_channel(v[0], v[1])),
        ),
        (
            "add_bias",
            vec![t(&[2, 3, 4], 1), t(&[4], 2)],
            Box::new(|tp, v| tp.add_bias(v[0], v[1])),
        ),
        (
            "reshape",
            vec![t(&[2, 3, 4], 1)],
            Box::new(|tp, v| tp.reshape(v[0], &[6, 4])),
        ),
        (
            "permute",
            vec![t(&[2, 3, 4], 1)],
            Box::new(|tp, v| tp.permute(v[0], &[2, 0, 1])),
        ),
        (
            "narrow",
            vec![t(&[2, 6, 4], 1)],
            Box::new(|tp, v| tp.narrow(v[0], 1, 2, 3)),
        ),
        (
            "attention",
            vec![t(&[3, 4, 2], 1), t(&[3, 5, 2], 2), t(&[3, 5, 3], 3)],
            Box::new(|tp, v| tp.attention(v[0], v[1], v[2], 0.5)),
        ),
    ]
}

/// Worst relative error over every differentiable primitive.
pub fn check_primitive_gradients() -> Check {
    timed("primitive gradients", || {
        let mut worst = (0.0f64, "");
        for (name, inputs, f) in primitive_cases() {
            let err = grad_check_many(
                |tp, v| {
                    let y = f(tp, v)?;
                    probe(tp, y, 99)
                },
                &inputs,
                GRAD_EPS,
                None,
            )?;
            if err > worst.0 {
                worst = (err, name);
            }
        }
        Ok((
            worst.0 < PRIMITIVE_TOL,
            format!(
                "max rel error {:.2e} ({}), tol {PRIMITIVE_TOL:.0e}",
                worst.0, worst.1
            ),
        ))
    })
}

/// The time-modulated cross-attention block, differentiated with respect to its input,
/// features, time embedding and every weight.
pub fn check_attention_block_gradient() -> Check {
    timed("time-modulated attention block gradient", || {
        let (c, cf, temb, heads) = (8, 6, 4, 2);
        let mut pb = ParamBuilder::new(7);
        let block = TscAttention::new(&mut pb, "attn", c, cf, temb, heads, true)?;
        let store = pb.finish::<f64>();
        let mut inputs = vec![
            rand_tensor(&[2, c, 3, 3], 1),
            rand_tensor(&[2, cf, 3, 3], 2),
            rand_tensor(&[2, temb], 3),
        ];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let err = grad_check_many(
            |tp, v| {
                let mut cx = Ctx {
                    tape: tp,
                    vars: &v[3..],
                    rng: None,
                    dropout: 0.0,
                };
                let y = block.forward(&mut cx, v[0], v[1], v[2])?;
                probe(tp, y, 11)
            },
            &inputs,
            GRAD_EPS,
            None,
        )?;
        Ok((
            err < ATTENTION_TOL,
            format!("max rel error {err:.2e}, tol {ATTENTION_TOL:.0e}"),
        ))
    })
}

/// Small denoiser at 16x16, differentiated through the branch loss on a batch holding
/// both a KL (`t >= 2`) and a cross-entropy (`t = 1`) element. A random subset of
/// each weight tensor is perturbed.
pub fn check_end_to_end_gradient() -> Check {
    timed("end-to-end loss gradient at 16x16", || {
        let cfg = DenoiserConfig {
            base_channels: 16,
            time_embed_dim: 16,
            attention_heads: 2,
            pyramid_channels: [8, 8, 8],
            dropout_rate: 0.0,
            steps: 10,
            ..DenoiserConfig::default()
        };
        let sched = make_linear_schedule(10, 0.01, 0.2)?;
        let net = Denoiser::<f64>::new(cfg, 5)?;
        let encoder = PyramidEncoder::new(3, [8, 8, 8])?;
        let mut rng = RngStream::new(21);
        let mut bundles = Vec::new();
        let mut x0s = Vec::new();
        for _ in 0..2 {
            let image = Image::new(16, 16, (0..16 * 16 * 3).map(|_| rng.uniform()).collect())?;
            bundles.push(crate::conditioning::extract_bundle(&image, &encoder)?);
            x0s.push(MaskState::new(
                16,
                16,
                (0..256).map(|i| u8::from((i / 16) < 6)).collect(),
                0,
            )?);
        }
        let steps = [4usize, 1];
        let xts = x0s
            .iter()
            .zip(steps)
            .map(|(x0, t)| q_sample(x0, t, &sched, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let brefs: Vec<&ConditionBundle> = bundles.iter().collect();
        let states: Vec<Vec<f64>> = xts.iter().map(crate::denoiser::one_hot_chw).collect();
        let weights: Vec<Tensor<f64>> = net.weights().iter().map(|(_, t)| t.clone()).collect();
        let mut pick = RngStream::new(8);
        let err = grad_check_many(
            |tp, v| {
                let (input, pyr) = net.batch_inputs(tp, &states, &brefs)?;
                let out = net.forward(tp, v, input, &pyr, &steps, None)?;
                let targets: Vec<LossTarget> = x0s
                    .iter()
                    .zip(&xts)
                    .zip(steps)
                    .map(|((x0, x_t), t)| LossTarget { x0, x_t, t })
                    .collect();
                Ok(bernoulli_loss(tp, out, &targets, &sched)?.0)
            },
            &weights,
            GRAD_EPS,
            Some((2, &mut pick)),
        )?;
        Ok((
            err < END_TO_END_TOL,
            format!("max rel error {err:.2e}, tol {END_TO_END_TOL:.0e}"),
        ))
    })
}

/// Everything `maskdiff verify` runs, in order.
pub fn run_suite() -> Vec<Check> {
    vec![
        check_posterior(&library_posterior),
        check_forward_composition(),
        check_terminal(),
        check_primitive_gradients(),
        check_attention_block_gradient(),
        check_end_to_end_gradient(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::posterior_pixel;

    #[test]
    fn closed_form_properties_pass() {
        assert!(check_posterior(&library_posterior).passed);
        assert!(check_forward_composition().passed);
        assert!(check_terminal().passed);
    }

    #[test]
    fn posterior_with_current_step_retention_fails() {
        // Mutation: the prior factor uses abar_t where abar_{t-1} belongs.
        let buggy = |xt: u8, x0: u8, t: usize, s: &NoiseSchedule| {
            Ok(posterior_pixel(xt, x0, s.alpha(t), s.alpha_bar(t)))
        };
        let c = check_posterior(&buggy);
        assert!(!c.passed, "{c}");
    }

    #[test]
    fn gradient_properties_pass() {
        for c in [
            check_primitive_gradients(),
            check_attention_block_gradient(),
            check_end_to_end_gradient(),
        ] {
            assert!(c.passed, "{c}");
        }
    }
}
