use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::RngStream;

/// Channel index of untampered pixels.
pub const UNTAMPERED: u8 = 0;
/// Channel index of tampered pixels.
pub const TAMPERED: u8 = 1;

/// One-hot binary mask at a diffusion step, stored as per-pixel class labels
/// (row-major). Label `k` stands for the one-hot vector with channel `k` set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskState {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    step: usize,
}

impl MaskState {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, step: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(invalid(format!(
                "mask of {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(invalid(format!("mask label {bad} is not 0 or 1")));
        }
        Ok(MaskState {
            height,
            width,
            labels,
            step,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8, step: usize) -> Result<Self> {
        Self::new(height, width, vec![class; height * width], step)
    }

    /// Parses an `H x W x 2` one-hot tensor; anything that is not exactly one-hot is rejected.
    pub fn from_one_hot(height: usize, width: usize, values: &[f64], step: usize) -> Result<Self> {
        if values.len() != height * width * 2 {
            return Err(invalid(format!(
                "one-hot mask of {height}x{width} needs {} values, got {}",
                height * width * 2,
                values.len()
            )));
        }
        let labels = values
            .chunks(2)
            .enumerate()
            .map(|(i, px)| match (px[0], px[1]) {
                (a, b) if a == 1.0 && b == 0.0 => Ok(UNTAMPERED),
                (a, b) if a == 0.0 && b == 1.0 => Ok(TAMPERED),
                (a, b) => Err(invalid(format!("pixel {i} is not one-hot: [{a}, {b}]"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(height, width, labels, step)
    }

    pub fn to_one_hot(&self) -> Vec<f64> {
        self.labels
            .iter()
            .flat_map(|&l| {
                if l == TAMPERED {
                    [0.0, 1.0]
                } else {
                    [1.0, 0.0]
                }
            })
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn with_step(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    pub fn tampered_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == TAMPERED).count() as f64
            / self.labels.len().max(1) as f64
    }

    pub fn same_size(&self, other: &MaskState) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(invalid(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Per-pixel two-class distribution, `H x W x 2` interleaved, channels summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalField {
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

pub const FIELD_SUM_TOL: f64 = 1e-9;

impl CategoricalField {
    pub fn new(height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width * 2 {
            return Err(invalid(format!(
                "field of {height}x{width} needs {} values, got {}",
                height * width * 2,
                probs.len()
            )));
        }
        for (i, px) in probs.chunks(2).enumerate() {
            let ok = px.iter().all(|p| (0.0..=1.0).contains(p))
                && (px[0] + px[1] - 1.0).abs() <= FIELD_SUM_TOL;
            if !ok {
                return Err(invalid(format!(
                    "pixel {i} is not a distribution: [{}, {}]",
                    px[0], px[1]
                )));
            }
        }
        Ok(CategoricalField {
            height,
            width,
            probs,
        })
    }

    /// Builds a field from the tampered-class probability of each pixel.
    pub fn from_tampered(height: usize, width: usize, tampered: &[f64]) -> Result<Self> {
        let probs = tampered.iter().flat_map(|&p| [1.0 - p, p]).collect();
        Self::new(height, width, probs)
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        CategoricalField {
            height,
            width,
            probs: vec![0.5; height * width * 2],
        }
    }

    pub(crate) fn from_pixels_unchecked(
        height: usize,
        width: usize,
        px: impl Iterator<Item = [f64; 2]>,
    ) -> Self {
        let probs: Vec<f64> = px.flatten().collect();
        debug_assert_eq!(probs.len(), height * width * 2);
        CategoricalField {
            height,
            width,
            probs,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn pixel(&self, i: usize) -> [f64; 2] {
        [self.probs[2 * i], self.probs[2 * i + 1]]
    }

    pub fn tampered(&self) -> Vec<f64> {
        self.probs.chunks(2).map(|p| p[1]).collect()
    }

    /// Per-pixel argmax; exact ties resolve to untampered.
    pub fn argmax(&self, step: usize) -> MaskState {
        let labels = self
            .probs
            .chunks(2)
            .map(|p| if p[1] > p[0] { TAMPERED } else { UNTAMPERED })
            .collect();
        MaskState {
            height: self.height,
            width: self.width,
            labels,
            step,
        }
    }

    /// Inverse-CDF sampling with one uniform draw per pixel, in pixel order.
    pub fn sample(&self, step: usize, rng: &mut RngStream) -> MaskState {
        let labels = self
            .probs
            .chunks(2)
            .map(|p| {
                if rng.uniform() < p[0] {
                    UNTAMPERED
                } else {
                    TAMPERED
                }
            })
            .collect();
        MaskState {
            height: self.height,
            width: self.width,
            labels,
            step,
        }
    }

    pub fn matches(&self, mask: &MaskState) -> Result<()> {
        if self.height != mask.height() || self.width != mask.width() {
            return Err(invalid(format!(
                "field {}x{} does not match mask {}x{}",
                self.height,
                self.width,
                mask.height(),
                mask.width()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_round_trip() {
        let m = MaskState::new(2, 2, vec![0, 1, 1, 0], 0).unwrap();
        let back = MaskState::from_one_hot(2, 2, &m.to_one_hot(), 0).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn non_one_hot_rejected() {
        assert!(MaskState::from_one_hot(1, 1, &[0.5, 0.5], 0).is_err());
        assert!(MaskState::from_one_hot(1, 1, &[1.0, 1.0], 0).is_err());
        assert!(MaskState::new(1, 2, vec![0, 2], 0).is_err());
    }

    #[test]
    fn field_validation() {
        assert!(CategoricalField::new(1, 1, vec![0.3, 0.7]).is_ok());
        assert!(CategoricalField::new(1, 1, vec![0.3, 0.6]).is_err());
        assert!(CategoricalField::new(1, 1, vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn argmax_ties_go_untampered() {
        let f = CategoricalField::new(1, 3, vec![0.5, 0.5, 0.2, 0.8, 0.9, 0.1]).unwrap();
        assert_eq!(f.argmax(0).labels(), &[0, 1, 0]);
    }
}
