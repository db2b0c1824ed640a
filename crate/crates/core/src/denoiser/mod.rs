//! UNet denoiser with time-modulated cross-attention to the feature pyramid at its three
//! deepest resolutions.

mod layers;
mod params;

use serde::{Deserialize, Serialize};

pub use layers::{sinusoidal, Conv, Ctx, Linear, Norm, ResBlock, TimeMlp, TscAttention};
pub use params::{ParamBuilder, ParamId, ParamStore};

use crate::conditioning::{
    assemble_channels, Ablation, ConditionBundle, DEFAULT_PYRAMID_CHANNELS, PYRAMID_LEVELS,
};
use crate::diffusion::{CategoricalField, MaskState};
use crate::error::{invalid, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::rng::RngStream;

pub type DenoiserWeights<T> = ParamStore<T>;

/// What the final 1x1 convolution predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Two channels with a per-pixel softmax: the clean-mask distribution.
    Categorical,
    /// One unconstrained channel: the injected Gaussian noise.
    Noise,
}

impl Head {
    pub fn state_channels(self) -> usize {
        match self {
            Head::Categorical => 2,
            Head::Noise => 1,
        }
    }

    pub fn out_channels(self) -> usize {
        self.state_channels()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub attention_heads: usize,
    pub dropout_rate: f64,
    pub groups: usize,
    pub pyramid_channels: [usize; PYRAMID_LEVELS],
    pub head: Head,
    /// Largest valid diffusion step.
    pub steps: usize,
    pub ablation: Ablation,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: 32,
            depth: 3,
            time_embed_dim: 128,
            attention_heads: 4,
            dropout_rate: 0.1,
            groups: 8,
            pyramid_channels: DEFAULT_PYRAMID_CHANNELS,
            head: Head::Categorical,
            steps: 50,
            ablation: Ablation::default(),
        }
    }
}

impl DenoiserConfig {
    /// Feature channels at resolution level `l` (level 0 is full resolution).
    pub fn level_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.base_channels / 2
        } else {
            self.base_channels << (l - 1)
        }
    }

    pub fn input_channels(&self) -> usize {
        self.head.state_channels() + self.ablation.condition_channels()
    }

    /// Levels carrying an attention block: the three deepest that have a pyramid map.
    pub fn attention_levels(&self) -> Vec<usize> {
        if self.ablation.no_tsc {
            return Vec::new();
        }
        (1..=self.depth.min(PYRAMID_LEVELS))
            .filter(|&l| l + 3 > self.depth)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(invalid("denoiser depth must be at least 1"));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(2 * self.groups) {
            return Err(invalid(format!(
                "base_channels must be a positive multiple of {} (twice the group count), got {}",
                2 * self.groups,
                self.base_channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.steps == 0 {
            return Err(invalid("denoiser steps must be at least 1"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(invalid(format!(
                "time_embed_dim must be even, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct Down {
    conv: Conv,
    res: ResBlock,
    attn: Option<TscAttention>,
}

#[derive(Debug, Clone)]
struct Up {
    res: ResBlock,
    attn: Option<TscAttention>,
}

#[derive(Debug, Clone)]
struct Arch {
    time: TimeMlp,
    stem: Conv,
    down: Vec<Down>,
    /// Decoder blocks from level `depth - 1` down to level 0.
    up: Vec<Up>,
    out_norm: Norm,
    head: Conv,
}

fn build_arch(cfg: &DenoiserConfig, pb: &mut ParamBuilder) -> Result<Arch> {
    cfg.validate()?;
    let g = cfg.groups;
    let te = cfg.time_embed_dim;
    let attn_levels = cfg.attention_levels();
    let attn = |pb: &mut ParamBuilder, name: &str, l: usize| -> Result<Option<TscAttention>> {
        if !attn_levels.contains(&l) {
            return Ok(None);
        }
        TscAttention::new(
            pb,
            name,
            cfg.level_channels(l),
            cfg.pyramid_channels[l - 1],
            te,
            cfg.attention_heads,
            !cfg.ablation.plain_ca,
        )
        .map(Some)
    };
    let time = TimeMlp::new(pb, "time", te)?;
    let stem = Conv::new(
        pb,
        "stem",
        cfg.input_channels(),
        cfg.level_channels(0),
        3,
        1,
    )?;
    let mut down = Vec::with_capacity(cfg.depth);
    for l in 1..=cfg.depth {
        let (cin, c) = (cfg.level_channels(l - 1), cfg.level_channels(l));
        let conv = Conv::new(pb, &format!("down{l}.conv"), cin, c, 3, 2)?;
        let res = ResBlock::new(pb, &format!("down{l}.res"), c, c, te, g)?;
        let a = if l == cfg.depth {
            attn(pb, &format!("down{l}.attn"), l)?
        } else {
            None
        };
        down.push(Down { conv, res, attn: a });
    }
    let mut up = Vec::with_capacity(cfg.depth);
    for l in (0..cfg.depth).rev() {
        let cin = cfg.level_channels(l + 1) + cfg.level_channels(l);
        let c = cfg.level_channels(l);
        let res = ResBlock::new(pb, &format!("up{l}.res"), cin, c, te, g)?;
        let a = if l >= 1 {
            attn(pb, &format!("up{l}.attn"), l)?
        } else {
            None
        };
        up.push(Up { res, attn: a });
    }
    let c0 = cfg.level_channels(0);
    let out_norm = Norm::new(pb, "out.norm", c0, g)?;
    let head = Conv::new(pb, "out.head", c0, cfg.head.out_channels(), 1, 1)?;
    Ok(Arch {
        time,
        stem,
        down,
        up,
        out_norm,
        head,
    })
}

/// Architecture plus weights.
#[derive(Debug, Clone)]
pub struct Denoiser<T: Real> {
    cfg: DenoiserConfig,
    arch: Arch,
    weights: DenoiserWeights<T>,
}

impl<T: Real> Denoiser<T> {
    /// Freshly initialised network; the same `(cfg, seed)` always gives the same weights.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut pb = ParamBuilder::new(seed);
        let arch = build_arch(&cfg, &mut pb)?;
        Ok(Denoiser {
            cfg,
            arch,
            weights: pb.finish(),
        })
    }

    /// Rebuilds the architecture for `cfg` and adopts `weights`, which must match it by
    /// name and shape.
    pub fn from_weights(cfg: DenoiserConfig, weights: DenoiserWeights<T>) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        if weights.len() != net.weights.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, got {}",
                net.weights.len(),
                weights.len()
            )));
        }
        for (name, value) in weights.iter() {
            let Some(expected) = net.weights.get(name) else {
                return Err(invalid(format!("unexpected parameter tensor '{name}'")));
            };
            if expected.shape() != value.shape() {
                return Err(invalid(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    value.shape(),
                    expected.shape()
                )));
            }
        }
        for (name, value) in weights.iter() {
            net.weights.replace(name, value.clone())?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &DenoiserWeights<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DenoiserWeights<T> {
        &mut self.weights
    }

    pub fn num_params(&self) -> usize {
        self.weights.num_params()
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            weights: self.weights.cast(),
        }
    }

    /// Channel-major input batch and pyramid batch as tape constants.
    pub fn batch_inputs(
        &self,
        tape: &mut Tape<T>,
        states: &[Vec<f64>],
        bundles: &[&ConditionBundle],
    ) -> Result<(Var, Vec<Var>)> {
        if states.len() != bundles.len() || states.is_empty() {
            return Err(invalid(format!(
                "batch of {} states and {} bundles",
                states.len(),
                bundles.len()
            )));
        }
        let sc = self.cfg.head.state_channels();
        let (h, w) = (bundles[0].height(), bundles[0].width());
        let mut data = Vec::new();
        for (s, b) in states.iter().zip(bundles) {
            if b.height() != h || b.width() != w {
                return Err(invalid("bundles in a batch must share one size"));
            }
            data.extend(assemble_channels(s, sc, b, &self.cfg.ablation)?.into_data());
        }
        let n = states.len();
        let input = tape.constant(Tensor::from_f64(
            &[n, self.cfg.input_channels(), h, w],
            &data,
        )?)?;
        let mut pyramid = Vec::new();
        for l in self.cfg.attention_levels() {
            let first = bundles[0]
                .pyramid
                .get(l - 1)
                .ok_or_else(|| invalid(format!("bundle lacks pyramid level {l}")))?;
            let mut shape = vec![n];
            shape.extend_from_slice(first.shape());
            let expect = [self.cfg.pyramid_channels[l - 1], h >> l, w >> l];
            if first.shape() != expect {
                return Err(crate::Error::ShapeMismatch {
                    op: "pyramid level",
                    lhs: first.shape().to_vec(),
                    rhs: expect.to_vec(),
                });
            }
            let t = if self.cfg.ablation.no_pyramid {
                Tensor::zeros(&shape)
            } else {
                let mut d = Vec::with_capacity(n * first.numel());
                for b in bundles {
                    d.extend(b.pyramid[l - 1].data().iter().map(|&v| T::from_f64(v)));
                }
                Tensor::new(shape, d)?
            };
            pyramid.push(tape.constant(t)?);
        }
        Ok((input, pyramid))
    }

    /// Runs the network on recorded inputs. `pyramid` holds one map per attention level
    /// (shallowest first). Returns `[N, 2, H, W]` probabilities or `[N, 1, H, W]` noise.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        input: Var,
        pyramid: &[Var],
        steps: &[usize],
        rng: Option<&mut RngStream>,
    ) -> Result<Var> {
        let s = tape.shape(input).to_vec();
        if s.len() != 4 || s[0] != steps.len() || s[1] != self.cfg.input_channels() {
            return Err(crate::Error::ShapeMismatch {
                op: "denoise_forward",
                lhs: s,
                rhs: vec![steps.len(), self.cfg.input_channels()],
            });
        }
        let div = 1 << self.cfg.depth;
        if !s[2].is_multiple_of(div) || !s[3].is_multiple_of(div) {
            return Err(invalid(format!(
                "input {}x{} is not divisible by {div}",
                s[2], s[3]
            )));
        }
        if let Some(&t) = steps.iter().find(|&&t| t < 1 || t > self.cfg.steps) {
            return Err(invalid(format!("step {t} outside 1..={}", self.cfg.steps)));
        }
        let levels = self.cfg.attention_levels();
        if pyramid.len() != levels.len() {
            return Err(invalid(format!(
                "{} pyramid maps for {} attention levels",
                pyramid.len(),
                levels.len()
            )));
        }
        let feat = |l: usize| {
            pyramid[levels
                .iter()
                .position(|&x| x == l)
                .expect("attention level")]
        };
        let mut cx = Ctx {
            tape,
            vars,
            rng,
            dropout: self.cfg.dropout_rate,
        };
        let a = &self.arch;
        let temb = a.time.forward(&mut cx, steps)?;
        let temb_act = cx.tape.silu(temb)?;

        let mut h = a.stem.forward(&mut cx, input)?;
        let mut skips = vec![h];
        for (i, d) in a.down.iter().enumerate() {
            h = d.conv.forward(&mut cx, h)?;
            h = d.res.forward(&mut cx, h, temb_act)?;
            if let Some(at) = &d.attn {
                h = at.forward(&mut cx, h, feat(i + 1), temb)?;
            }
            skips.push(h);
        }
        skips.pop();
        for (j, u) in a.up.iter().enumerate() {
            let l = self.cfg.depth - 1 - j;
            let upx = cx.tape.upsample2x(h)?;
            let skip = skips.pop().expect("one skip per level");
            let cat = cx.tape.concat(&[upx, skip], 1)?;
            h = u.res.forward(&mut cx, cat, temb_act)?;
            if let Some(at) = &u.attn {
                h = at.forward(&mut cx, h, feat(l), temb)?;
            }
        }
        let h = a.out_norm.act(&mut cx, h)?;
        let out = a.head.forward(&mut cx, h)?;
        match self.cfg.head {
            Head::Categorical => cx.tape.softmax(out, 1),
            Head::Noise => Ok(out),
        }
    }

    /// Raw network output for a batch of states. In [`Mode::Train`] dropout draws from `rng`.
    pub fn predict(
        &self,
        states: &[Vec<f64>],
        steps: &[usize],
        bundles: &[&ConditionBundle],
        mode: Mode,
        rng: Option<&mut RngStream>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.weights.bind(&mut tape, false)?;
        let (input, pyr) = self.batch_inputs(&mut tape, states, bundles)?;
        let rng = match mode {
            Mode::Train => Some(rng.ok_or_else(|| invalid("train mode needs a dropout stream"))?),
            Mode::Eval => None,
        };
        let out = self.forward(&mut tape, &vars, input, &pyr, steps, rng)?;
        Ok(tape.value(out).clone())
    }

    /// `P0 = phi(X_t, t, Y, N, F)` for a batch of masks.
    pub fn predict_p0(
        &self,
        x_t: &[&MaskState],
        steps: &[usize],
        bundles: &[&ConditionBundle],
        mode: Mode,
        rng: Option<&mut RngStream>,
    ) -> Result<Vec<CategoricalField>> {
        if self.cfg.head != Head::Categorical {
            return Err(invalid("predict_p0 needs the categorical head"));
        }
        let states: Vec<Vec<f64>> = x_t.iter().map(|m| one_hot_chw(m)).collect();
        let out = self.predict(&states, steps, bundles, mode, rng)?;
        Ok(fields_from_nchw(&out))
    }

    /// Single-sample form of [`predict_p0`](Self::predict_p0).
    pub fn denoise_forward(
        &self,
        x_t: &MaskState,
        t: usize,
        bundle: &ConditionBundle,
        mode: Mode,
        rng: Option<&mut RngStream>,
    ) -> Result<CategoricalField> {
        Ok(self
            .predict_p0(&[x_t], &[t], &[bundle], mode, rng)?
            .remove(0))
    }
}

/// Channel-major one-hot `[2, H, W]` of a mask.
pub fn one_hot_chw(m: &MaskState) -> Vec<f64> {
    let hw = m.pixels();
    let mut s = vec![0.0; 2 * hw];
    for (i, &l) in m.labels().iter().enumerate() {
        s[l as usize * hw + i] = 1.0;
    }
    s
}

/// Splits `[N, 2, H, W]` probabilities into per-sample fields, renormalising in f64 so
/// float32 outputs meet the field tolerance.
pub fn fields_from_nchw<T: Real>(out: &Tensor<T>) -> Vec<CategoricalField> {
    let s = out.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let hw = h * w;
    let d = out.data();
    (0..n)
        .map(|b| {
            let base = b * 2 * hw;
            CategoricalField::from_pixels_unchecked(
                h,
                w,
                (0..hw).map(|i| {
                    let (a, c) = (d[base + i].to_f64(), d[base + hw + i].to_f64());
                    let p1 = c / (a + c);
                    [1.0 - p1, p1]
                }),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{extract_bundle, PyramidEncoder};
    use crate::image::Image;

    fn bundle(seed: u64, size: usize) -> ConditionBundle {
        let mut rng = RngStream::new(seed);
        let img = Image::new(
            size,
            size,
            (0..size * size * 3).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        extract_bundle(
            &img,
            &PyramidEncoder::new(1, DEFAULT_PYRAMID_CHANNELS).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn default_parameter_budget() {
        let net = Denoiser::<f32>::new(DenoiserConfig::default(), 0).unwrap();
        let n = net.num_params();
        assert!(n < 5_000_000, "{n}");
        assert!(n > 100_000);
    }

    #[test]
    fn sinusoidal_endpoints() {
        let e = sinusoidal(0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert_ne!(sinusoidal(1, 8).unwrap(), sinusoidal(2, 8).unwrap());
        assert!(sinusoidal(1, 7).is_err());
    }

    #[test]
    fn output_is_a_distribution_and_eval_is_repeatable() {
        let net = Denoiser::<f32>::new(DenoiserConfig::default(), 3).unwrap();
        let b = bundle(2, 32);
        let x = MaskState::filled(32, 32, 1, 5).unwrap();
        let p = net.denoise_forward(&x, 5, &b, Mode::Eval, None).unwrap();
        let again = net.denoise_forward(&x, 5, &b, Mode::Eval, None).unwrap();
        assert_eq!(p, again);
        let raw = net
            .predict(&[one_hot_chw(&x)], &[5], &[&b], Mode::Eval, None)
            .unwrap();
        let d = raw.data();
        for i in 0..1024 {
            assert!((d[i] + d[1024 + i] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn train_mode_applies_dropout() {
        let net = Denoiser::<f64>::new(DenoiserConfig::default(), 3).unwrap();
        let b = bundle(2, 16);
        let x = MaskState::filled(16, 16, 0, 5).unwrap();
        let e = net.denoise_forward(&x, 5, &b, Mode::Eval, None).unwrap();
        let mut rng = RngStream::new(1);
        let t = net
            .denoise_forward(&x, 5, &b, Mode::Train, Some(&mut rng))
            .unwrap();
        assert_ne!(e, t);
        assert!(net.denoise_forward(&x, 5, &b, Mode::Train, None).is_err());
    }

    #[test]
    fn step_and_shape_violations() {
        let net = Denoiser::<f32>::new(DenoiserConfig::default(), 3).unwrap();
        let b = bundle(2, 16);
        let x = MaskState::filled(16, 16, 0, 0).unwrap();
        assert!(net.denoise_forward(&x, 0, &b, Mode::Eval, None).is_err());
        assert!(net.denoise_forward(&x, 51, &b, Mode::Eval, None).is_err());
        let small = MaskState::filled(8, 8, 0, 0).unwrap();
        assert!(net
            .denoise_forward(&small, 3, &b, Mode::Eval, None)
            .is_err());
    }

    #[test]
    fn ablations_change_the_architecture() {
        let full = Denoiser::<f32>::new(DenoiserConfig::default(), 0).unwrap();
        let mut cfg = DenoiserConfig::default();
        cfg.ablation.plain_ca = true;
        let plain = Denoiser::<f32>::new(cfg, 0).unwrap();
        assert!(plain
            .weights()
            .get("down3.attn.modulation.weight")
            .is_none());
        assert!(full.weights().get("down3.attn.modulation.weight").is_some());
        let mut cfg = DenoiserConfig::default();
        cfg.ablation.no_tsc = true;
        assert!(Denoiser::<f32>::new(cfg, 0)
            .unwrap()
            .weights()
            .get("up1.attn.q.weight")
            .is_none());
        let mut cfg = DenoiserConfig::default();
        cfg.ablation.no_residual = true;
        assert_eq!(cfg.input_channels(), 5);
        let net = Denoiser::<f32>::new(cfg, 0).unwrap();
        assert_eq!(
            net.weights().get("stem.weight").unwrap().shape(),
            &[16, 5, 3, 3]
        );
    }

    #[test]
    fn attention_uses_three_deepest_levels() {
        assert_eq!(DenoiserConfig::default().attention_levels(), vec![1, 2, 3]);
    }

    #[test]
    fn weights_round_trip_through_from_weights() {
        let net = Denoiser::<f64>::new(DenoiserConfig::default(), 9).unwrap();
        let back = Denoiser::from_weights(net.config().clone(), net.weights().clone()).unwrap();
        assert_eq!(back.weights(), net.weights());
        let mut cfg = DenoiserConfig::default();
        cfg.base_channels = 16;
        assert!(Denoiser::from_weights(cfg, net.weights().clone()).is_err());
    }
}
