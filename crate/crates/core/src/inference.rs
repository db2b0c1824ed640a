//! Ancestral sampling from the prior, ensembles with per-pixel voting, the disagreement
//! map, and the one-step mode.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionBundle;
use crate::data::write_mask_png;
use crate::denoiser::{Denoiser, Head, Mode};
use crate::diffusion::{
    gaussian_reverse_step, mixture_reverse_params, predict_x0, sign_mask, CategoricalField,
    MaskState, TAMPERED,
};
use crate::error::{invalid, Result};
use crate::image::{write_file, write_gray_png, Image};
use crate::numerics::Real;
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

/// Predicts the clean-mask distribution `P0` for a batch of noisy masks.
pub trait MaskPredictor {
    /// Largest step the predictor accepts.
    fn max_step(&self) -> usize;
    fn p0_batch(
        &self,
        x_t: &[&MaskState],
        steps: &[usize],
        bundles: &[&ConditionBundle],
    ) -> Result<Vec<CategoricalField>>;
}

/// Predicts the injected Gaussian noise for a batch of continuous states.
pub trait NoisePredictor {
    fn max_step(&self) -> usize;
    fn eps_batch(
        &self,
        x_t: &[Vec<f64>],
        steps: &[usize],
        bundles: &[&ConditionBundle],
    ) -> Result<Vec<Vec<f64>>>;
}

impl<T: Real> MaskPredictor for Denoiser<T> {
    fn max_step(&self) -> usize {
        self.config().steps
    }

    fn p0_batch(
        &self,
        x_t: &[&MaskState],
        steps: &[usize],
        bundles: &[&ConditionBundle],
    ) -> Result<Vec<CategoricalField>> {
        self.predict_p0(x_t, steps, bundles, Mode::Eval, None)
    }
}

impl<T: Real> NoisePredictor for Denoiser<T> {
    fn max_step(&self) -> usize {
        self.config().steps
    }

    fn eps_batch(
        &self,
        x_t: &[Vec<f64>],
        steps: &[usize],
        bundles: &[&ConditionBundle],
    ) -> Result<Vec<Vec<f64>>> {
        if self.config().head != Head::Noise {
            return Err(invalid("noise prediction needs the noise head"));
        }
        let out = self.predict(x_t, steps, bundles, Mode::Eval, None)?;
        let per = out.numel() / x_t.len();
        Ok(out
            .data()
            .chunks(per)
            .map(|c| c.iter().map(|&v| v.to_f64()).collect())
            .collect())
    }
}

/// Test double that knows the answer: returns the one-hot ground truth of whichever
/// registered image the bundle was built from, whatever the noisy input.
pub struct OraclePredictor {
    truths: Vec<(Image, MaskState)>,
    max_step: usize,
}

impl OraclePredictor {
    pub fn new(truths: Vec<(Image, MaskState)>, max_step: usize) -> Self {
        OraclePredictor { truths, max_step }
    }
}

impl MaskPredictor for OraclePredictor {
    fn max_step(&self) -> usize {
        self.max_step
    }

    fn p0_batch(
        &self,
        x_t: &[&MaskState],
        _steps: &[usize],
        bundles: &[&ConditionBundle],
    ) -> Result<Vec<CategoricalField>> {
        x_t.iter()
            .zip(bundles)
            .map(|(x, b)| {
                let (_, gt) = self
                    .truths
                    .iter()
                    .find(|(img, _)| *img == b.image)
                    .ok_or_else(|| invalid("oracle has no ground truth for this image"))?;
                gt.same_size(x)?;
                let tampered: Vec<f64> = gt
                    .labels()
                    .iter()
                    .map(|&l| if l == TAMPERED { 1.0 } else { 0.0 })
                    .collect();
                CategoricalField::from_tampered(gt.height(), gt.width(), &tampered)
            })
            .collect()
    }
}

/// One sampled mask and its final per-pixel tampered probability.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberOutput {
    pub mask: MaskState,
    /// `P0[tampered]` at the last step (Bernoulli), or the clean estimate mapped to
    /// `[0, 1]` (Gaussian).
    pub prob: Vec<f64>,
}

/// Draws masks for several `(bundle, stream)` pairs, running them through the network
/// together in chunks of `batch`. Each output depends only on its own bundle and stream.
pub trait MaskSampler {
    fn sample_batch(
        &self,
        bundles: &[&ConditionBundle],
        rngs: &mut [RngStream],
    ) -> Result<Vec<MemberOutput>>;
}

fn check_batch(bundles: &[&ConditionBundle], rngs: &[RngStream], batch: usize) -> Result<()> {
    if bundles.len() != rngs.len() {
        return Err(invalid(format!(
            "{} bundles for {} streams",
            bundles.len(),
            rngs.len()
        )));
    }
    if batch == 0 {
        return Err(invalid("sampling batch must be positive"));
    }
    Ok(())
}

fn check_steps(sched: &NoiseSchedule, max_step: usize) -> Result<()> {
    if sched.steps() > max_step {
        return Err(invalid(format!(
            "schedule has T={} but the network only knows steps up to {max_step}",
            sched.steps()
        )));
    }
    Ok(())
}

/// Reverse Bernoulli chain. With `one_step`, a single prediction at `t = T` replaces the
/// chain; for a `T = 1` schedule the two coincide.
pub struct BernoulliSampler<'a> {
    pub predictor: &'a dyn MaskPredictor,
    pub sched: &'a NoiseSchedule,
    pub batch: usize,
    pub one_step: bool,
}

impl BernoulliSampler<'_> {
    fn chunk(
        &self,
        bundles: &[&ConditionBundle],
        rngs: &mut [RngStream],
    ) -> Result<Vec<MemberOutput>> {
        let big_t = self.sched.steps();
        let mut xs: Vec<MaskState> = bundles
            .iter()
            .zip(rngs.iter_mut())
            .map(|(b, r)| CategoricalField::uniform(b.height(), b.width()).sample(big_t, r))
            .collect();
        let n = xs.len();
        let mut t = big_t;
        loop {
            let refs: Vec<&MaskState> = xs.iter().collect();
            let p0 = self.predictor.p0_batch(&refs, &vec![t; n], bundles)?;
            if t == 1 || self.one_step {
                return Ok(p0
                    .into_iter()
                    .map(|p| MemberOutput {
                        mask: p.argmax(0),
                        prob: p.tampered(),
                    })
                    .collect());
            }
            for ((x, p), r) in xs.iter_mut().zip(&p0).zip(rngs.iter_mut()) {
                *x = mixture_reverse_params(x, p, t, self.sched)?.sample(t - 1, r);
            }
            t -= 1;
        }
    }
}

impl MaskSampler for BernoulliSampler<'_> {
    fn sample_batch(
        &self,
        bundles: &[&ConditionBundle],
        rngs: &mut [RngStream],
    ) -> Result<Vec<MemberOutput>> {
        check_batch(bundles, rngs, self.batch)?;
        check_steps(self.sched, self.predictor.max_step())?;
        let mut out = Vec::with_capacity(bundles.len());
        for (b, r) in bundles.chunks(self.batch).zip(rngs.chunks_mut(self.batch)) {
            out.extend(self.chunk(b, r)?);
        }
        Ok(out)
    }
}

/// Ancestral sampling of the Gaussian baseline; the mask is the sign of the final state.
pub struct GaussianSampler<'a> {
    pub predictor: &'a dyn NoisePredictor,
    pub sched: &'a NoiseSchedule,
    pub batch: usize,
    pub one_step: bool,
}

impl GaussianSampler<'_> {
    fn chunk(
        &self,
        bundles: &[&ConditionBundle],
        rngs: &mut [RngStream],
    ) -> Result<Vec<MemberOutput>> {
        let big_t = self.sched.steps();
        let mut xs: Vec<Vec<f64>> = bundles
            .iter()
            .zip(rngs.iter_mut())
            .map(|(b, r)| (0..b.height() * b.width()).map(|_| r.normal()).collect())
            .collect();
        let n = xs.len();
        let finish = |x0: Vec<f64>, b: &ConditionBundle| -> Result<MemberOutput> {
            Ok(MemberOutput {
                mask: sign_mask(b.height(), b.width(), &x0, 0)?,
                prob: x0
                    .iter()
                    .map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
                    .collect(),
            })
        };
        if self.one_step {
            let eps = self.predictor.eps_batch(&xs, &vec![big_t; n], bundles)?;
            let abar = self.sched.alpha_bar(big_t);
            return xs
                .iter()
                .zip(&eps)
                .zip(bundles)
                .map(|((x, e), b)| finish(predict_x0(x, e, abar), b))
                .collect();
        }
        for t in (1..=big_t).rev() {
            let eps = self.predictor.eps_batch(&xs, &vec![t; n], bundles)?;
            for ((x, e), r) in xs.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
                *x = gaussian_reverse_step(x, e, t, self.sched, r)?;
            }
        }
        xs.into_iter()
            .zip(bundles)
            .map(|(x, b)| finish(x, b))
            .collect()
    }
}

impl MaskSampler for GaussianSampler<'_> {
    fn sample_batch(
        &self,
        bundles: &[&ConditionBundle],
        rngs: &mut [RngStream],
    ) -> Result<Vec<MemberOutput>> {
        check_batch(bundles, rngs, self.batch)?;
        check_steps(self.sched, self.predictor.max_step())?;
        let mut out = Vec::with_capacity(bundles.len());
        for (b, r) in bundles.chunks(self.batch).zip(rngs.chunks_mut(self.batch)) {
            out.extend(self.chunk(b, r)?);
        }
        Ok(out)
    }
}

/// A single reverse-chain sample.
pub fn sample_mask(
    sampler: &dyn MaskSampler,
    bundle: &ConditionBundle,
    rng: &mut RngStream,
) -> Result<MaskState> {
    let mut rngs = [rng.clone()];
    let out = sampler.sample_batch(&[bundle], &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().expect("one output per input").mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub members: Vec<MaskState>,
    /// Fraction of members calling each pixel tampered.
    pub vote_probs: Vec<f64>,
    /// Tampered where the vote is strictly above one half.
    pub final_mask: MaskState,
    /// `2 * min(p, 1 - p)` of the vote: 0 when unanimous, 1 at an even split.
    pub uncertainty: Vec<f64>,
    /// Mean over members of the final tampered probability.
    pub prob_map: Vec<f64>,
}

impl EnsembleResult {
    pub fn mean_uncertainty(&self) -> f64 {
        self.uncertainty.iter().sum::<f64>() / self.uncertainty.len() as f64
    }
}

/// Voting reduction over member outputs.
pub fn aggregate(members: &[MemberOutput]) -> Result<EnsembleResult> {
    let first = members
        .first()
        .ok_or_else(|| invalid("ensemble needs at least one member"))?;
    let (h, w) = (first.mask.height(), first.mask.width());
    let n = members.len() as f64;
    let mut votes = vec![0.0; h * w];
    let mut prob = vec![0.0; h * w];
    for m in members {
        first.mask.same_size(&m.mask)?;
        for (i, &l) in m.mask.labels().iter().enumerate() {
            if l == TAMPERED {
                votes[i] += 1.0;
            }
        }
        for (acc, &p) in prob.iter_mut().zip(&m.prob) {
            *acc += p;
        }
    }
    let vote_probs: Vec<f64> = votes.iter().map(|v| v / n).collect();
    let final_mask = MaskState::new(
        h,
        w,
        vote_probs.iter().map(|&p| u8::from(p > 0.5)).collect(),
        0,
    )?;
    Ok(EnsembleResult {
        members: members.iter().map(|m| m.mask.clone()).collect(),
        uncertainty: vote_probs.iter().map(|&p| 2.0 * p.min(1.0 - p)).collect(),
        vote_probs,
        final_mask,
        prob_map: prob.iter().map(|p| p / n).collect(),
    })
}

/// Member streams for `n` members: the `i`-th is `rng.split(i)`.
pub fn member_streams(rng: &RngStream, n: usize) -> Vec<RngStream> {
    (0..n as u64).map(|i| rng.split(i)).collect()
}

/// `n` independent samples for one image, voted into a final mask.
pub fn sample_ensemble(
    sampler: &dyn MaskSampler,
    bundle: &ConditionBundle,
    n: usize,
    rng: &RngStream,
) -> Result<EnsembleResult> {
    Ok(sample_ensembles(sampler, &[bundle], n, std::slice::from_ref(rng))?.remove(0))
}

/// Ensembles for several images at once, sharing network batches. `rngs[j]` seeds the
/// members of image `j`.
pub fn sample_ensembles(
    sampler: &dyn MaskSampler,
    bundles: &[&ConditionBundle],
    n: usize,
    rngs: &[RngStream],
) -> Result<Vec<EnsembleResult>> {
    if n == 0 {
        return Err(invalid("ensemble size must be at least 1"));
    }
    if bundles.len() != rngs.len() {
        return Err(invalid(format!(
            "{} bundles for {} streams",
            bundles.len(),
            rngs.len()
        )));
    }
    let mut items = Vec::with_capacity(n * bundles.len());
    let mut streams = Vec::with_capacity(n * bundles.len());
    for (b, r) in bundles.iter().zip(rngs) {
        for s in member_streams(r, n) {
            items.push(*b);
            streams.push(s);
        }
    }
    let out = sampler.sample_batch(&items, &mut streams)?;
    out.chunks(n).map(aggregate).collect()
}

/// Per-image statistics written next to the PNGs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub id: String,
    pub members: usize,
    pub tampered_fraction: f64,
    pub mean_vote: f64,
    pub mean_uncertainty: f64,
    pub max_uncertainty: f64,
    /// Pixels where not all members agree.
    pub contested_pixels: usize,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub provenance: serde_json::Value,
}

impl EnsembleSummary {
    pub fn new(id: &str, r: &EnsembleResult, provenance: serde_json::Value) -> Self {
        let len = r.vote_probs.len() as f64;
        EnsembleSummary {
            id: id.to_string(),
            members: r.members.len(),
            tampered_fraction: r.final_mask.tampered_fraction(),
            mean_vote: r.vote_probs.iter().sum::<f64>() / len,
            mean_uncertainty: r.mean_uncertainty(),
            max_uncertainty: r.uncertainty.iter().copied().fold(0.0, f64::max),
            contested_pixels: r.uncertainty.iter().filter(|&&u| u > 0.0).count(),
            provenance,
        }
    }
}

/// Writes `dir/<id>/member_<k>.png`, `vote.png`, `uncertainty.png`, `final.png` and
/// `summary.json`.
pub fn write_ensemble(
    dir: &Path,
    id: &str,
    r: &EnsembleResult,
    provenance: serde_json::Value,
) -> Result<()> {
    let d = dir.join(id);
    let (h, w) = (r.final_mask.height(), r.final_mask.width());
    for (k, m) in r.members.iter().enumerate() {
        write_mask_png(&d.join(format!("member_{k}.png")), m)?;
    }
    write_gray_png(&d.join("vote.png"), h, w, &r.vote_probs)?;
    write_gray_png(&d.join("uncertainty.png"), h, w, &r.uncertainty)?;
    write_mask_png(&d.join("final.png"), &r.final_mask)?;
    let summary = EnsembleSummary::new(id, r, provenance);
    write_file(
        &d.join("summary.json"),
        &serde_json::to_vec_pretty(&summary)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;

    fn bundle(seed: u64) -> (ConditionBundle, MaskState) {
        let mut rng = RngStream::new(seed);
        let image = Image::new(4, 4, (0..48).map(|_| rng.uniform()).collect()).unwrap();
        let mask = MaskState::new(4, 4, (0..16).map(|_| rng.below(2) as u8).collect(), 0).unwrap();
        let b = ConditionBundle {
            image,
            residual: vec![0.0; 16],
            pyramid: Vec::new(),
        };
        (b, mask)
    }

    fn output(labels: &[u8]) -> MemberOutput {
        MemberOutput {
            mask: MaskState::new(1, labels.len(), labels.to_vec(), 0).unwrap(),
            prob: labels.iter().map(|&l| l as f64).collect(),
        }
    }

    #[test]
    fn oracle_recovers_truth_for_any_length() {
        let (b, gt) = bundle(3);
        let oracle = OraclePredictor::new(vec![(b.image.clone(), gt.clone())], 50);
        for steps in [1, 10, 50] {
            let sched = make_linear_schedule(steps, 0.01, 0.2).unwrap();
            let s = BernoulliSampler {
                predictor: &oracle,
                sched: &sched,
                batch: 4,
                one_step: false,
            };
            for seed in 0..5 {
                let m = sample_mask(&s, &b, &mut RngStream::new(seed)).unwrap();
                assert_eq!(m.labels(), gt.labels());
            }
        }
    }

    #[test]
    fn unanimous_members() {
        let r = aggregate(&[output(&[1, 0, 1]), output(&[1, 0, 1])]).unwrap();
        assert_eq!(r.final_mask.labels(), &[1, 0, 1]);
        assert_eq!(r.uncertainty, vec![0.0; 3]);
    }

    #[test]
    fn even_split_is_untampered_and_maximally_uncertain() {
        let members: Vec<_> = (0..8).map(|k| output(&[u8::from(k < 4)])).collect();
        let r = aggregate(&members).unwrap();
        assert_eq!(r.vote_probs, vec![0.5]);
        assert_eq!(r.final_mask.labels(), &[0]);
        assert_eq!(r.uncertainty, vec![1.0]);
    }

    #[test]
    fn empty_ensemble_is_rejected() {
        assert!(aggregate(&[]).is_err());
        let (b, gt) = bundle(1);
        let oracle = OraclePredictor::new(vec![(b.image.clone(), gt)], 5);
        let sched = make_linear_schedule(5, 0.01, 0.2).unwrap();
        let s = BernoulliSampler {
            predictor: &oracle,
            sched: &sched,
            batch: 4,
            one_step: false,
        };
        assert!(sample_ensemble(&s, &b, 0, &RngStream::new(0)).is_err());
    }

    #[test]
    fn schedule_longer_than_network_is_rejected() {
        let (b, gt) = bundle(1);
        let oracle = OraclePredictor::new(vec![(b.image.clone(), gt)], 5);
        let sched = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let s = BernoulliSampler {
            predictor: &oracle,
            sched: &sched,
            batch: 4,
            one_step: false,
        };
        assert!(sample_mask(&s, &b, &mut RngStream::new(0)).is_err());
    }
}
