use std::path::{Path, PathBuf};
use std::process::Command;

use maskdiff::config::RunConfig;
use maskdiff::data::{read_dataset, read_manifest, read_mask_png, write_mask_png, Difficulty};
use maskdiff::image::write_gray_png;
use maskdiff::metrics::MetricsReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_maskdiff"))
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A network small enough to train for a few steps on 32x32 images in a test.
fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.denoiser.base_channels = 16;
    cfg.denoiser.time_embed_dim = 16;
    cfg.denoiser.attention_heads = 2;
    cfg.denoiser.pyramid_channels = [8, 8, 8];
    cfg.train.batch_size = 4;
    cfg.inference.batch = 8;
    cfg.data.size = 32;
    cfg.data.count = 8;
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn gen(dir: &Path, cfg: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["--config", s(cfg), "gen-data", "--out", s(&out)];
    args.extend_from_slice(extra);
    let (code, _, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    out
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible_and_respects_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = gen(tmp.path(), &cfg, "a", &["--count", "8"]);
    let b = gen(tmp.path(), &cfg, "b", &["--count", "8"]);
    assert_eq!(read_manifest(&a).unwrap().samples.len(), 8);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));

    let easy = gen(
        tmp.path(),
        &cfg,
        "easy",
        &["--count", "6", "--ambiguous-frac", "0"],
    );
    let m = read_manifest(&easy).unwrap();
    assert!(m.samples.iter().all(|e| e.difficulty == Difficulty::Easy));
    assert_eq!(m.samples.len(), 6);
}

#[test]
fn train_sample_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = gen(tmp.path(), &cfg, "data", &[]);
    let ckpt = tmp.path().join("model.ckpt");
    let (code, _, err) = run(&[
        "--config",
        s(&cfg),
        "train",
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
        "--T",
        "10",
        "--max-steps",
        "2",
    ]);
    assert_eq!(code, 0, "{err}");
    let log = std::fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    assert!(log.starts_with("step,epoch,loss,lr,kl_count,ce_count"));
    assert_eq!(log.lines().count(), 3);

    let pred = tmp.path().join("pred");
    let sample = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "sample",
            "--ckpt",
            s(&ckpt),
            "--data",
            s(&data),
            "--out",
            s(out),
            "--limit",
            "2",
        ];
        args.extend_from_slice(extra);
        let (code, _, err) = run(&args);
        assert_eq!(code, 0, "{err}");
    };
    sample(&pred, &["--n", "3", "--seed", "4"]);
    let (_, samples) = read_dataset(&data).unwrap();
    let first = pred.join(&samples[0].id);
    let pngs = std::fs::read_dir(&first)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "png")
        })
        .count();
    assert_eq!(pngs, 3 + 3);
    assert!(first.join("summary.json").is_file());

    let again = tmp.path().join("again");
    sample(&again, &["--n", "3", "--seed", "4"]);
    assert_eq!(tree_bytes(&pred), tree_bytes(&again));

    let one = tmp.path().join("one");
    sample(&one, &["--n", "1", "--T", "1"]);
    assert!(one.join(&samples[1].id).join("final.png").is_file());

    let (code, _, err) = run(&[
        "sample",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&one),
        "--T",
        "7",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("T=10"), "{err}");

    // Only two of the eight images were sampled, so scoring against the full set must fail.
    let report = tmp.path().join("report.json");
    let (code, _, err) = run(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&data),
        "--report",
        s(&report),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("missing"), "{err}");
}

#[test]
fn ablation_and_noise_flags_reach_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = gen(tmp.path(), &cfg, "data", &["--count", "4"]);
    let ckpt = tmp.path().join("g.ckpt");
    let (code, _, err) = run(&[
        "--config",
        s(&cfg),
        "train",
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
        "--T",
        "5",
        "--max-steps",
        "1",
        "--noise",
        "gaussian",
        "--ablate",
        "plain-ca",
    ]);
    assert_eq!(code, 0, "{err}");
    let c = maskdiff::training::load_checkpoint::<f64>(&ckpt).unwrap();
    assert_eq!(
        c.header.config.noise,
        maskdiff::training::NoiseKind::Gaussian
    );
    assert!(c.header.config.denoiser.ablation.plain_ca);
    assert_eq!(c.header.steps, 5);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = gen(tmp.path(), &cfg, "data", &["--count", "5"]);
    let pred = tmp.path().join("pred");
    for e in read_manifest(&data).unwrap().samples {
        let mask = read_mask_png(&data.join(&e.mask)).unwrap();
        let dir = pred.join(&e.id);
        write_mask_png(&dir.join("final.png"), &mask).unwrap();
        let levels: Vec<f64> = mask.labels().iter().map(|&l| l as f64).collect();
        write_gray_png(&dir.join("vote.png"), mask.height(), mask.width(), &levels).unwrap();
    }
    let report = tmp.path().join("report.json");
    let (code, out, err) = run(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&data),
        "--report",
        s(&report),
    ]);
    assert_eq!(code, 0, "{err}");
    let r: MetricsReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r.ave_f1, 1.0);
    assert_eq!(r.ave_auc, Some(1.0));
    assert_eq!(r.datasets[0].num, 5);
    assert!(report.with_extension("txt").is_file());
    assert!(out.contains("data"), "{out}");
}

#[test]
fn verify_passes_and_usage_errors_exit_one() {
    let (code, out, _) = run(&["verify"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(
        out.lines().filter(|l| l.starts_with("PASS")).count(),
        6,
        "{out}"
    );

    assert_eq!(run(&["train"]).0, 1);
    assert_eq!(run(&["no-such-command"]).0, 1);
    assert_eq!(run(&["--help"]).0, 0);
    let (code, _, err) = run(&["--config", "/nonexistent/run.json", "verify"]);
    assert_eq!(code, 1);
    assert!(err.contains("/nonexistent/run.json"), "{err}");
}
