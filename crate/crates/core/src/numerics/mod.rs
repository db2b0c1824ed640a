//! Dense tensors and a small reverse-mode autodiff tape.
//!
//! Differentiable op set (all on [`Tape`]):
//!
//! - elementwise: `add`, `sub`, `mul`, `div`, `exp`, `log`, `sigmoid`, `silu`, `scale`, `add_scalar`
//! - `matmul` and batched `bmm`
//! - `conv2d` with odd square kernels, stride 1 or 2, "same" padding
//! - `upsample2x` (nearest neighbour)
//! - `softmax` over any axis
//! - `sum`, `mean`
//! - `concat` along any axis (the channel axis in practice)
//! - `group_norm`
//! - `dropout` with an explicit [`RngStream`](crate::rng::RngStream)
//! - `scale_shift`, `add_channel`, `add_bias` (per-channel broadcasts over space)
//! - `reshape`, `permute`, `narrow`, fused multi-head `attention`
//!
//! Every recorded value is checked for NaN/Inf; shape errors name the op and both shapes.

mod kernels;
mod real;
mod tape;
mod tensor;

pub use kernels::{sigmoid, silu};
pub use real::{gemm, DType, Real};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::{numel, Tensor};

use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;

/// Op names covered by [`Tape`], in the order of the module docs.
pub fn required_op_set() -> &'static [&'static str] {
    &[
        "add",
        "sub",
        "mul",
        "div",
        "exp",
        "log",
        "sigmoid",
        "silu",
        "matmul",
        "bmm",
        "conv2d",
        "upsample2x",
        "softmax",
        "sum",
        "mean",
        "concat",
        "group_norm",
        "dropout",
        "scale_shift",
        "add_channel",
        "add_bias",
        "reshape",
        "permute",
        "narrow",
        "attention",
    ]
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(invalid(format!(
            "grad_check eps must lie in [1e-7, 1e-4], got {eps}"
        )));
    }
    Ok(())
}

/// Below this magnitude a central difference is dominated by rounding of the loss itself,
/// so the error is measured against the floor instead.
const GRAD_FLOOR: f64 = 1e-7;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

fn eval_scalar<F>(f: &F, xs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = xs
        .iter()
        .map(|x| tape.param(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut tape, &vars)?;
    let v = tape.value(root).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Max relative error between the tape gradient of scalar `f` at `x` and central differences.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), eps, None)
}

/// Multi-input variant. With `sample = Some((k, rng))` only `k` randomly chosen elements of
/// each input are perturbed, which keeps whole-network checks affordable.
pub fn grad_check_many<F>(
    f: F,
    xs: &[Tensor<f64>],
    eps: f64,
    sample: Option<(usize, &mut RngStream)>,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let vars = xs
        .iter()
        .map(|x| tape.param(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut tape, &vars)?;
    if !tape.value(root).item()?.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(root)?;
    drop(tape);

    let mut picks: Vec<Vec<usize>> = Vec::with_capacity(xs.len());
    match sample {
        None => picks.extend(xs.iter().map(|x| (0..x.numel()).collect())),
        Some((k, rng)) => {
            for x in xs {
                let n = x.numel();
                if n <= k {
                    picks.push((0..n).collect());
                } else {
                    picks.push((0..k).map(|_| rng.below(n as u64) as usize).collect());
                }
            }
        }
    }

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (ti, idxs) in picks.iter().enumerate() {
        let analytic = grads.get(vars[ti]).expect("gradient for every param");
        for &i in idxs {
            let orig = probe[ti].data()[i];
            probe[ti].data_mut()[i] = orig + eps;
            let fp = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[i] = orig - eps;
            let fm = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
