use super::params::{ParamBuilder, ParamId};
use crate::error::{invalid, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::rng::RngStream;

/// Forward-pass state: the tape, bound parameter handles, and the dropout stream (train mode only).
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a [Var],
    pub rng: Option<&'a mut RngStream>,
    pub dropout: f64,
}

impl<T: Real> Ctx<'_, T> {
    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => self.tape.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = pb.uniform(&format!("{name}.weight"), &[d_in, d_out], bound)?;
        let b = if bias {
            Some(pb.uniform(&format!("{name}.bias"), &[d_out], bound)?)
        } else {
            None
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    /// `x: [M, d_in] -> [M, d_out]`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = cx.tape.matmul(x, cx.p(self.w))?;
        match self.b {
            Some(b) => cx.tape.add_bias(y, cx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Ok(Conv {
            w: pb.uniform(&format!("{name}.weight"), &[cout, cin, k, k], bound)?,
            b: pb.uniform(&format!("{name}.bias"), &[cout], bound)?,
            stride,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        cx.tape.conv2d(x, w, Some(b), self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize, groups: usize) -> Result<Self> {
        if !c.is_multiple_of(groups) {
            return Err(invalid(format!(
                "{name}: {c} channels do not split into {groups} groups"
            )));
        }
        Ok(Norm {
            gamma: pb.constant(&format!("{name}.gamma"), &[c], 1.0)?,
            beta: pb.constant(&format!("{name}.beta"), &[c], 0.0)?,
            groups,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        cx.tape.group_norm(x, g, b, self.groups)
    }

    /// `SiLU(norm(x))`.
    pub fn act<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward(cx, x)?;
        cx.tape.silu(y)
    }
}

/// `norm -> SiLU -> conv -> +time -> norm -> SiLU -> dropout -> conv`, plus a (projected) skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        temb: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(ResBlock {
            norm1: Norm::new(pb, &format!("{name}.norm1"), cin, groups)?,
            conv1: Conv::new(pb, &format!("{name}.conv1"), cin, cout, 3, 1)?,
            time: Linear::new(pb, &format!("{name}.time"), temb, cout, true)?,
            norm2: Norm::new(pb, &format!("{name}.norm2"), cout, groups)?,
            conv2: Conv::new(pb, &format!("{name}.conv2"), cout, cout, 3, 1)?,
            skip: if cin != cout {
                Some(Conv::new(pb, &format!("{name}.skip"), cin, cout, 1, 1)?)
            } else {
                None
            },
        })
    }

    /// `temb_act` is `SiLU(time embedding)`, `[N, temb]`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, temb_act: Var) -> Result<Var> {
        let h = self.norm1.act(cx, x)?;
        let h = self.conv1.forward(cx, h)?;
        let tb = self.time.forward(cx, temb_act)?;
        let h = cx.tape.add_channel(h, tb)?;
        let h = self.norm2.act(cx, h)?;
        let h = cx.dropout(h)?;
        let h = self.conv2.forward(cx, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(cx, x)?,
            None => x,
        };
        cx.tape.add(s, h)
    }
}

/// Sinusoidal features of `t`: `dim/2` sines then `dim/2` cosines, frequencies geometric
/// from 1 down to 1/10000.
pub fn sinusoidal(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(invalid(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let freq = |i: usize| {
        if half == 1 {
            1.0
        } else {
            (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp()
        }
    };
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|i| (t as f64 * freq(i)).sin()));
    out.extend((0..half).map(|i| (t as f64 * freq(i)).cos()));
    Ok(out)
}

/// Sinusoidal features followed by `Linear -> SiLU -> Linear`.
#[derive(Debug, Clone)]
pub struct TimeMlp {
    pub dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeMlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        sinusoidal(0, dim)?;
        Ok(TimeMlp {
            dim,
            fc1: Linear::new(pb, &format!("{name}.fc1"), dim, dim, true)?,
            fc2: Linear::new(pb, &format!("{name}.fc2"), dim, dim, true)?,
        })
    }

    /// `[N, dim]` embeddings for the given steps.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, steps: &[usize]) -> Result<Var> {
        let mut feats = Vec::with_capacity(steps.len() * self.dim);
        for &t in steps {
            feats.extend(sinusoidal(t, self.dim)?);
        }
        let x = cx
            .tape
            .constant(Tensor::from_f64(&[steps.len(), self.dim], &feats)?)?;
        self.forward_features(cx, x)
    }

    pub fn forward_features<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.tape.silu(h)?;
        self.fc2.forward(cx, h)
    }
}

/// Cross-attention from feature-map queries to pyramid keys/values, where the pyramid is
/// first modulated by a time-dependent scale and shift: `f * (1 + scale) + shift`.
#[derive(Debug, Clone)]
pub struct TscAttention {
    pub channels: usize,
    pub feat_channels: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    /// `None` for plain cross-attention (scale and shift fixed at 0).
    modulation: Option<Linear>,
}

impl TscAttention {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        channels: usize,
        feat_channels: usize,
        temb: usize,
        heads: usize,
        time_modulated: bool,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(invalid(format!(
                "{name}: {channels} channels do not split into {heads} heads"
            )));
        }
        Ok(TscAttention {
            channels,
            feat_channels,
            heads,
            q: Linear::new(pb, &format!("{name}.q"), channels, channels, false)?,
            k: Linear::new(pb, &format!("{name}.k"), feat_channels, channels, false)?,
            v: Linear::new(pb, &format!("{name}.v"), feat_channels, channels, false)?,
            out: Linear::new(pb, &format!("{name}.out"), channels, channels, false)?,
            modulation: if time_modulated {
                Some(Linear::new(
                    pb,
                    &format!("{name}.modulation"),
                    temb,
                    2 * feat_channels,
                    true,
                )?)
            } else {
                None
            },
        })
    }

    /// `[N, C, h, w] -> [N*h*w, C]` token matrix.
    fn tokens<T: Real>(cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x).to_vec();
        let p = cx.tape.permute(x, &[0, 2, 3, 1])?;
        cx.tape.reshape(p, &[s[0] * s[2] * s[3], s[1]])
    }

    /// `[N*L, C] -> [N*heads, L, C/heads]`.
    fn split_heads<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, n: usize, l: usize) -> Result<Var> {
        let dh = self.channels / self.heads;
        let r = cx.tape.reshape(x, &[n, l, self.heads, dh])?;
        let p = cx.tape.permute(r, &[0, 2, 1, 3])?;
        cx.tape.reshape(p, &[n * self.heads, l, dh])
    }

    /// `x: [N, C, h, w]`, `f: [N, C_f, h, w]`, `temb: [N, temb]`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, f: Var, temb: Var) -> Result<Var> {
        let xs = cx.tape.shape(x).to_vec();
        let fs = cx.tape.shape(f).to_vec();
        if xs.len() != 4
            || fs.len() != 4
            || xs[0] != fs[0]
            || xs[2..] != fs[2..]
            || fs[1] != self.feat_channels
        {
            return Err(crate::Error::ShapeMismatch {
                op: "tsc_attention",
                lhs: xs,
                rhs: fs,
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let l = h * w;
        let f_mod = match &self.modulation {
            Some(m) => {
                let ss = m.forward(cx, temb)?;
                let scale = cx.tape.narrow(ss, 1, 0, self.feat_channels)?;
                let shift = cx
                    .tape
                    .narrow(ss, 1, self.feat_channels, self.feat_channels)?;
                let gain = cx.tape.add_scalar(scale, 1.0)?;
                cx.tape.scale_shift(f, gain, shift)?
            }
            None => f,
        };
        let xt = Self::tokens(cx, x)?;
        let ft = Self::tokens(cx, f_mod)?;
        let q = self.q.forward(cx, xt)?;
        let k = self.k.forward(cx, ft)?;
        let v = self.v.forward(cx, ft)?;
        let q = self.split_heads(cx, q, n, l)?;
        let k = self.split_heads(cx, k, n, l)?;
        let v = self.split_heads(cx, v, n, l)?;
        let dh = c / self.heads;
        let a = cx.tape.attention(q, k, v, 1.0 / (dh as f64).sqrt())?;
        let a = cx.tape.reshape(a, &[n, self.heads, l, dh])?;
        let a = cx.tape.permute(a, &[0, 2, 1, 3])?;
        let a = cx.tape.reshape(a, &[n * l, c])?;
        let o = self.out.forward(cx, a)?;
        let o = cx.dropout(o)?;
        let o = cx.tape.reshape(o, &[n, h, w, c])?;
        let o = cx.tape.permute(o, &[0, 3, 1, 2])?;
        cx.tape.add(x, o)
    }
}
