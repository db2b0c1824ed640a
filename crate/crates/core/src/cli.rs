//! The `maskdiff` command line: dataset generation, training, sampling, evaluation and
//! the verification suite.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::conditioning::{extract_bundle, ConditionBundle, PyramidEncoder};
use crate::config::{provenance, RunConfig};
use crate::data::{
    class_balance, generate_dataset, read_dataset, read_manifest, read_mask_png, split,
    write_dataset, Sample,
};
use crate::denoiser::Denoiser;
use crate::image::{read_gray_png, write_file};
use crate::inference::{
    sample_ensembles, write_ensemble, BernoulliSampler, GaussianSampler, MaskSampler,
};
use crate::metrics::{auc, dataset_entry, f1, ImageScore, MetricsReport};
use crate::numerics::{DType, Real};
use crate::rng::RngStream;
use crate::schedule::{ScheduleKind, ScheduleSpec};
use crate::training::{load_checkpoint, save_checkpoint, LossLog, NoiseKind, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "maskdiff", version = crate::BUILD_ID, about = "Bernoulli diffusion for forgery masks")]
pub struct Cli {
    /// JSON run configuration; flags given on the command line take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic forgery dataset.
    GenData(GenDataArgs),
    /// Train a denoiser and write a checkpoint plus a loss CSV.
    Train(TrainArgs),
    /// Draw mask ensembles for every image of a dataset.
    Sample(SampleArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Run the oracle suite; exits 2 on any failure.
    Verify,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ambiguous_frac: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of diffusion steps.
    #[arg(long = "T")]
    pub steps: Option<usize>,
    /// `cosine` or `linear`.
    #[arg(long)]
    pub schedule: Option<String>,
    /// `bernoulli` or `gaussian`.
    #[arg(long)]
    pub noise: Option<NoiseKind>,
    /// Repeatable: no-image, no-residual, no-pyramid, no-tsc, plain-ca.
    #[arg(long)]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `f32` or `f64`.
    #[arg(long)]
    pub dtype: Option<String>,
    /// Loss CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ensemble size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Either the checkpoint's T, or 1 for the one-step mode.
    #[arg(long = "T")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `all`, `train` or `test` (the held-out part of the dataset).
    #[arg(long, default_value = "all")]
    pub subset: String,
    /// Only the first N images of the subset.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction directory; repeat together with --gt for several datasets.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    /// Dataset directory with the ground-truth masks.
    #[arg(long, required = true)]
    pub gt: Vec<PathBuf>,
    /// JSON report path; a plain-text table is written next to it.
    #[arg(long)]
    pub report: PathBuf,
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<i32> {
    let base = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData(a) => gen_data(base, a),
        Command::Train(a) => train(base, a),
        Command::Sample(a) => sample(cli.config.is_some().then_some(base), a),
        Command::Eval(a) => eval(base, a),
        Command::Verify => Ok(verify()),
    }
}

fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> anyhow::Result<i32> {
    let d = &mut cfg.data;
    d.count = a.count.unwrap_or(d.count);
    d.size = a.size.unwrap_or(d.size);
    d.seed = a.seed.unwrap_or(d.seed);
    d.ambiguous_frac = a.ambiguous_frac.unwrap_or(d.ambiguous_frac);
    if !(0.0..=1.0).contains(&d.ambiguous_frac) {
        bail!("--ambiguous-frac must lie in [0, 1]");
    }
    let samples = generate_dataset(&cfg.data)?;
    write_dataset(&samples, &a.out, cfg.data.seed, provenance(&cfg))
        .with_context(|| format!("writing dataset to {}", a.out.display()))?;
    println!("{}", class_balance(&samples));
    Ok(EXIT_OK)
}

/// Applies `train` flags on top of the file configuration.
pub fn train_config(mut cfg: RunConfig, a: &TrainArgs) -> anyhow::Result<RunConfig> {
    if let Some(t) = a.steps {
        cfg.schedule.steps = t;
    }
    if let Some(s) = &a.schedule {
        cfg.schedule = ScheduleSpec {
            steps: cfg.schedule.steps,
            kind: match s.as_str() {
                "cosine" => ScheduleKind::Cosine {
                    s: crate::config::DEFAULT_COSINE_S,
                },
                "linear" => ScheduleKind::Linear {
                    beta_start: 0.01,
                    beta_end: 0.2,
                },
                other => bail!("unknown schedule '{other}' (cosine|linear)"),
            },
        };
    }
    if let Some(n) = a.noise {
        cfg.noise = n;
    }
    for name in &a.ablate {
        cfg.denoiser.ablation.set(name)?;
    }
    let tc = &mut cfg.train;
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.max_steps = a.max_steps.or(tc.max_steps);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.lr_init = a.lr.unwrap_or(tc.lr_init);
    if let Some(s) = a.seed {
        tc.seed = s;
        cfg.init_seed = s;
    }
    if let Some(d) = &a.dtype {
        cfg.dtype = match d.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => bail!("unknown dtype '{other}' (f32|f64)"),
        };
    }
    Ok(cfg.resolve()?)
}

fn check_size(cfg: &RunConfig, h: usize, w: usize) -> anyhow::Result<()> {
    let div = (1usize << cfg.denoiser.depth).max(8);
    if !h.is_multiple_of(div) || !w.is_multiple_of(div) {
        bail!("images are {h}x{w}; both sides must be multiples of {div}");
    }
    Ok(())
}

fn train(cfg: RunConfig, a: TrainArgs) -> anyhow::Result<i32> {
    let cfg = train_config(cfg, &a)?;
    let (manifest, samples) = read_dataset(&a.data)?;
    check_size(&cfg, manifest.height, manifest.width)?;
    let (train_set, _) = split(&samples, cfg.train_frac);
    if train_set.is_empty() {
        bail!("the training split of {} is empty", a.data.display());
    }
    let log = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    match cfg.dtype {
        DType::F32 => train_as::<f32>(cfg, train_set, &a.out, &log),
        DType::F64 => train_as::<f64>(cfg, train_set, &a.out, &log),
    }?;
    Ok(EXIT_OK)
}

fn train_as<T: Real>(
    cfg: RunConfig,
    samples: &[Sample],
    out: &Path,
    log_path: &Path,
) -> anyhow::Result<()> {
    let mut trainer = Trainer::<T>::new(cfg)?;
    let total = trainer.config().train.total_steps(samples.len());
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = std::fs::File::create(log_path)
        .with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = LossLog::new(file);
    eprintln!(
        "training {} parameters on {} samples for {total} steps",
        trainer.denoiser().num_params(),
        samples.len()
    );
    trainer.run(samples, |r| {
        log.write(r)?;
        if r.step % 10 == 0 || r.step == total {
            eprintln!(
                "step {:>6}/{total}  epoch {:>3}  loss {:.5}  lr {:.2e}",
                r.step, r.epoch, r.loss, r.lr
            );
        }
        Ok(())
    })?;
    save_checkpoint(out, &trainer.checkpoint())?;
    Ok(())
}

fn select<'a>(
    samples: &'a [Sample],
    cfg: &RunConfig,
    subset: &str,
    limit: Option<usize>,
) -> anyhow::Result<&'a [Sample]> {
    let (tr, te) = split(samples, cfg.train_frac);
    let s = match subset {
        "all" => samples,
        "train" => tr,
        "test" => te,
        other => bail!("unknown subset '{other}' (all|train|test)"),
    };
    Ok(&s[..limit.unwrap_or(s.len()).min(s.len())])
}

fn sample(file_cfg: Option<RunConfig>, a: SampleArgs) -> anyhow::Result<i32> {
    let ckpt = load_checkpoint::<f64>(&a.ckpt)?;
    let mut cfg = ckpt.header.config.clone();
    if let Some(fc) = &file_cfg {
        ckpt.check_compatible(fc)?;
        cfg.inference = fc.inference.clone();
    }
    let one_step = match a.steps {
        None => false,
        Some(t) if t == cfg.schedule.steps => false,
        Some(1) => true,
        Some(t) => {
            return Err(crate::Error::IncompatibleCheckpoint(format!(
                "checkpoint was trained with T={}; --T must be {} or 1 (one-step mode), got {t}",
                cfg.schedule.steps, cfg.schedule.steps
            ))
            .into())
        }
    };
    cfg.inference.members = a.n.unwrap_or(cfg.inference.members);
    cfg.inference.seed = a.seed.unwrap_or(cfg.inference.seed);
    cfg.validate()?;
    let (manifest, samples) = read_dataset(&a.data)?;
    check_size(&cfg, manifest.height, manifest.width)?;
    let chosen = select(&samples, &cfg, &a.subset, a.limit)?;
    let net = ckpt.denoiser()?;
    let prov = serde_json::json!({
        "build": crate::BUILD_ID,
        "config": cfg.to_json(),
        "checkpoint": a.ckpt.display().to_string(),
        "one_step": one_step,
    });
    match cfg.dtype {
        DType::F32 => sample_as(&net.cast::<f32>(), &cfg, one_step, chosen, &a.out, &prov),
        DType::F64 => sample_as(&net, &cfg, one_step, chosen, &a.out, &prov),
    }?;
    eprintln!("wrote {} ensembles to {}", chosen.len(), a.out.display());
    Ok(EXIT_OK)
}

/// Member streams for one image depend only on the inference seed and the sample.
pub fn image_stream(seed: u64, sample: &Sample) -> RngStream {
    RngStream::keyed(&[0x7361_6d70, seed, sample.seed])
}

fn sample_as<T: Real>(
    net: &Denoiser<T>,
    cfg: &RunConfig,
    one_step: bool,
    samples: &[Sample],
    out: &Path,
    prov: &serde_json::Value,
) -> anyhow::Result<()> {
    let sched = cfg.build_schedule()?;
    let encoder = PyramidEncoder::new(cfg.extractor_seed, cfg.denoiser.pyramid_channels)?;
    let ic = &cfg.inference;
    let bern;
    let gauss;
    let sampler: &dyn MaskSampler = match cfg.noise {
        NoiseKind::Bernoulli => {
            bern = BernoulliSampler {
                predictor: net,
                sched: &sched,
                batch: ic.batch,
                one_step,
            };
            &bern
        }
        NoiseKind::Gaussian => {
            gauss = GaussianSampler {
                predictor: net,
                sched: &sched,
                batch: ic.batch,
                one_step,
            };
            &gauss
        }
    };
    let per_group = (ic.batch / ic.members).max(1);
    for group in samples.chunks(per_group) {
        let bundles = group
            .iter()
            .map(|s| extract_bundle(&s.image, &encoder))
            .collect::<crate::Result<Vec<ConditionBundle>>>()?;
        let brefs: Vec<&ConditionBundle> = bundles.iter().collect();
        let rngs: Vec<RngStream> = group.iter().map(|s| image_stream(ic.seed, s)).collect();
        let results = sample_ensembles(sampler, &brefs, ic.members, &rngs)?;
        for (s, r) in group.iter().zip(&results) {
            write_ensemble(out, &s.id, r, prov.clone())?;
        }
    }
    Ok(())
}

/// Scores one prediction directory against one dataset. F1 uses `final.png`; AUC uses
/// the vote map `vote.png` as the tampered probability.
pub fn score_dataset(pred: &Path, gt: &Path) -> anyhow::Result<Vec<ImageScore>> {
    let manifest = read_manifest(gt)?;
    let ids: BTreeSet<String> = manifest.samples.iter().map(|e| e.id.clone()).collect();
    let mut found = BTreeSet::new();
    for entry in std::fs::read_dir(pred).with_context(|| format!("reading {}", pred.display()))? {
        let entry = entry?;
        if entry.path().join("final.png").is_file() {
            found.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    let missing: Vec<&String> = ids.difference(&found).collect();
    let extra: Vec<&String> = found.difference(&ids).collect();
    if !missing.is_empty() || !extra.is_empty() {
        bail!(
            "predictions in {} do not match {}: missing {:?}, unexpected {:?}",
            pred.display(),
            gt.display(),
            missing,
            extra
        );
    }
    let mut scores = Vec::with_capacity(ids.len());
    for e in &manifest.samples {
        let truth = read_mask_png(&gt.join(&e.mask))?;
        let dir = pred.join(&e.id);
        let fin = read_mask_png(&dir.join("final.png"))?;
        let (h, w, vote) = read_gray_png(&dir.join("vote.png"))?;
        if h != truth.height() || w != truth.width() {
            bail!(
                "{}: vote map is {h}x{w}, ground truth {}x{}",
                e.id,
                truth.height(),
                truth.width()
            );
        }
        let probs: Vec<f64> = vote.iter().map(|&v| v as f64 / 255.0).collect();
        let pixel_auc = match auc(&probs, &truth) {
            Ok(v) => Some(v),
            Err(crate::Error::InvalidArgument(_))
                if truth.tampered_fraction() == 0.0 || truth.tampered_fraction() == 1.0 =>
            {
                None
            }
            Err(err) => return Err(err.into()),
        };
        scores.push(ImageScore {
            id: e.id.clone(),
            f1: f1(&fin, &truth).with_context(|| format!("scoring {}", e.id))?,
            auc: pixel_auc,
        });
    }
    Ok(scores)
}

fn eval(cfg: RunConfig, a: EvalArgs) -> anyhow::Result<i32> {
    if a.pred.len() != a.gt.len() {
        bail!(
            "{} --pred directories for {} --gt directories",
            a.pred.len(),
            a.gt.len()
        );
    }
    let mut entries = Vec::new();
    for (p, g) in a.pred.iter().zip(&a.gt) {
        let name = g
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| g.display().to_string());
        let scores = score_dataset(p, g)?;
        entries.push(dataset_entry(&name, &scores)?);
    }
    let mut prov = provenance(&cfg);
    if let Some(first) = a.pred.first() {
        // The sampling run's own record, taken from any one of its summaries.
        let summary = std::fs::read_dir(first)?
            .filter_map(|e| e.ok())
            .map(|e| e.path().join("summary.json"))
            .find(|p| p.is_file());
        if let Some(s) = summary {
            let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&s)?)?;
            prov["predictions"] = v["provenance"].clone();
        }
    }
    let report = MetricsReport::from_entries(entries, prov)?;
    write_file(&a.report, &serde_json::to_vec_pretty(&report)?)?;
    let table = report.table();
    write_file(&a.report.with_extension("txt"), table.as_bytes())?;
    print!("{table}");
    Ok(EXIT_OK)
}

fn verify() -> i32 {
    if cfg!(feature = "float32-only") {
        eprintln!(
            "verify needs the float64 paths; this build has the float32-only feature enabled"
        );
        return EXIT_VERIFY;
    }
    let checks = crate::verify::run_suite();
    for c in &checks {
        println!("{c}");
    }
    if checks.iter().all(|c| c.passed) {
        EXIT_OK
    } else {
        EXIT_VERIFY
    }
}
