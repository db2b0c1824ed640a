//! Conditioning inputs for the denoiser: the RGB image, a high-pass noise residual, and a
//! three-level feature pyramid from a frozen, seeded convolutional encoder.

use serde::{Deserialize, Serialize};

use crate::diffusion::MaskState;
use crate::error::{invalid, Result};
use crate::image::Image;
use crate::numerics::{Tape, Tensor};
use crate::rng::RngStream;

pub const PYRAMID_LEVELS: usize = 3;
pub const DEFAULT_PYRAMID_CHANNELS: [usize; PYRAMID_LEVELS] = [32, 64, 128];
const ENCODER_GROUPS: usize = 8;

/// Switches that remove one conditioning path each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the RGB image from the denoiser input.
    pub no_image: bool,
    /// Drop the noise residual from the denoiser input.
    pub no_residual: bool,
    /// Feed all-zero pyramid features to the attention blocks.
    pub no_pyramid: bool,
    /// Remove the attention blocks (the pyramid is then unused).
    pub no_tsc: bool,
    /// Keep cross-attention but disable its time-dependent scale and shift.
    pub plain_ca: bool,
}

impl Ablation {
    /// Channels contributed by `[Y | N]` after the state channels.
    pub fn condition_channels(&self) -> usize {
        (if self.no_image { 0 } else { 3 }) + (if self.no_residual { 0 } else { 1 })
    }

    /// Flag names as accepted on the command line.
    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        for (on, name) in [
            (self.no_image, "no-image"),
            (self.no_residual, "no-residual"),
            (self.no_pyramid, "no-pyramid"),
            (self.no_tsc, "no-tsc"),
            (self.plain_ca, "plain-ca"),
        ] {
            if on {
                v.push(name);
            }
        }
        v
    }

    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no-image" => self.no_image = true,
            "no-residual" => self.no_residual = true,
            "no-pyramid" => self.no_pyramid = true,
            "no-tsc" => self.no_tsc = true,
            "plain-ca" => self.plain_ca = true,
            other => return Err(invalid(format!("unknown ablation '{other}'"))),
        }
        Ok(())
    }
}

/// Image, residual and pyramid for one sample. Feature maps are channel-major `[C_i, H/2^i, W/2^i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub image: Image,
    /// `H x W` high-pass residual in `[-1, 1]`.
    pub residual: Vec<f64>,
    pub pyramid: Vec<Tensor<f64>>,
}

impl ConditionBundle {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Grayscale followed by an 8-neighbour Laplacian (centre 8, neighbours -1, over 8), with
/// replicated borders, clamped to `[-1, 1]`.
pub fn extract_residual(image: &Image) -> Vec<f64> {
    residual_from_rgb(image.height(), image.width(), image.data())
        .expect("Image holds three channels")
}

/// Same as [`extract_residual`] on raw interleaved data; errors unless there are exactly three channels.
pub fn residual_from_rgb(height: usize, width: usize, data: &[f64]) -> Result<Vec<f64>> {
    let hw = height * width;
    if hw == 0 || data.len() != hw * 3 {
        return Err(invalid(format!(
            "residual needs an {height}x{width}x3 image, got {} values ({} channels)",
            data.len(),
            if hw == 0 { 0 } else { data.len() / hw }
        )));
    }
    let gray: Vec<f64> = data
        .chunks(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, height as isize - 1) as usize;
        let xx = x.clamp(0, width as isize - 1) as usize;
        gray[yy * width + xx]
    };
    let mut out = vec![0.0; hw];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 8.0 * at(y, x);
            for (dy, dx) in [
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ] {
                acc -= at(y + dy, x + dx);
            }
            out[y as usize * width + x as usize] = (acc / 8.0).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

struct EncoderStage {
    weight: Tensor<f64>,
    bias: Tensor<f64>,
    gamma: Tensor<f64>,
    beta: Tensor<f64>,
}

/// Frozen strided encoder: three `conv3x3/2 -> group norm -> SiLU` stages with weights drawn
/// once from the seed.
pub struct PyramidEncoder {
    seed: u64,
    channels: [usize; PYRAMID_LEVELS],
    stages: Vec<EncoderStage>,
}

impl PyramidEncoder {
    pub fn new(seed: u64, channels: [usize; PYRAMID_LEVELS]) -> Result<Self> {
        if let Some(c) = channels
            .iter()
            .find(|&&c| c == 0 || c % ENCODER_GROUPS != 0)
        {
            return Err(invalid(format!(
                "pyramid channels must be positive multiples of 8, got {c}"
            )));
        }
        let root = RngStream::keyed(&[0x7079_7261, seed]);
        let mut stages = Vec::with_capacity(PYRAMID_LEVELS);
        let mut cin = 3;
        for (i, &cout) in channels.iter().enumerate() {
            let mut rng = root.split(i as u64);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            stages.push(EncoderStage {
                weight: Tensor::from_fn(&[cout, cin, 3, 3], |_| rng.normal() * std),
                bias: Tensor::from_fn(&[cout], |_| rng.normal() * 0.1),
                gamma: Tensor::full(&[cout], 1.0),
                beta: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        Ok(PyramidEncoder {
            seed,
            channels,
            stages,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn channels(&self) -> [usize; PYRAMID_LEVELS] {
        self.channels
    }

    pub fn extract(&self, image: &Image) -> Result<Vec<Tensor<f64>>> {
        let (h, w) = (image.height(), image.width());
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(invalid(format!(
                "pyramid input must be a multiple of 8 on each side, got {h}x{w}"
            )));
        }
        let mut tape = Tape::<f64>::new();
        let centred: Vec<f64> = image.to_chw().iter().map(|v| 2.0 * v - 1.0).collect();
        let mut x = tape.constant(Tensor::new(vec![1, 3, h, w], centred)?)?;
        let mut out = Vec::with_capacity(PYRAMID_LEVELS);
        for st in &self.stages {
            let wv = tape.constant(st.weight.clone())?;
            let bv = tape.constant(st.bias.clone())?;
            let gv = tape.constant(st.gamma.clone())?;
            let be = tape.constant(st.beta.clone())?;
            let y = tape.conv2d(x, wv, Some(bv), 2)?;
            let y = tape.group_norm(y, gv, be, ENCODER_GROUPS)?;
            x = tape.silu(y)?;
            let s = tape.shape(x);
            let shape = s[1..].to_vec();
            out.push(Tensor::new(shape, tape.value(x).data().to_vec())?);
        }
        Ok(out)
    }
}

pub fn extract_semantic_pyramid(
    image: &Image,
    encoder: &PyramidEncoder,
) -> Result<Vec<Tensor<f64>>> {
    encoder.extract(image)
}

/// Builds the full bundle for one image.
pub fn extract_bundle(image: &Image, encoder: &PyramidEncoder) -> Result<ConditionBundle> {
    Ok(ConditionBundle {
        residual: extract_residual(image),
        pyramid: encoder.extract(image)?,
        image: image.clone(),
    })
}

/// Channel-major denoiser input `[C, H, W]`: the state channels followed by `Y` and `N`
/// unless ablated. The pyramid is not part of it.
pub fn assemble_channels(
    state: &[f64],
    state_channels: usize,
    bundle: &ConditionBundle,
    ablation: &Ablation,
) -> Result<Tensor<f64>> {
    let (h, w) = (bundle.height(), bundle.width());
    let hw = h * w;
    if state.len() != state_channels * hw {
        return Err(crate::Error::ShapeMismatch {
            op: "assemble_denoiser_input",
            lhs: vec![state.len() / hw.max(1), hw],
            rhs: vec![state_channels, h, w],
        });
    }
    let c = state_channels + ablation.condition_channels();
    let mut data = Vec::with_capacity(c * hw);
    data.extend_from_slice(state);
    if !ablation.no_image {
        data.extend(bundle.image.to_chw());
    }
    if !ablation.no_residual {
        data.extend_from_slice(&bundle.residual);
    }
    Tensor::new(vec![c, h, w], data)
}

/// `[X_t | Y | N]` for the discrete model; `X_t` contributes its two one-hot channels.
pub fn assemble_denoiser_input(
    x_t: &MaskState,
    bundle: &ConditionBundle,
    ablation: &Ablation,
) -> Result<Tensor<f64>> {
    if x_t.height() != bundle.height() || x_t.width() != bundle.width() {
        return Err(crate::Error::ShapeMismatch {
            op: "assemble_denoiser_input",
            lhs: vec![x_t.height(), x_t.width()],
            rhs: vec![bundle.height(), bundle.width()],
        });
    }
    let hw = x_t.pixels();
    let mut state = vec![0.0; 2 * hw];
    for (i, &l) in x_t.labels().iter().enumerate() {
        state[l as usize * hw + i] = 1.0;
    }
    assemble_channels(&state, 2, bundle, ablation)
}
