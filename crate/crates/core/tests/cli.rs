use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blurrep::dataset::read_dataset;
use blurrep::image::load_image;
use blurrep::metrics::psnr;
use blurrep::training::{Checkpoint, TrainConfig};

fn blurrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blurrep")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = blurrep(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TRAIN_TOML: &str = r#"
stage = 1
batch_size = 2
total_iters = 4
eval_every = 2
crop_size = 32
augment = true

[encoder]
widths = [4, 4, 8, 8]
latent_channels = 4

[reblur_generator]
base_channels = 4
max_channels = 8
degradation_channels = 4

[deblur_generator]
base_channels = 4
max_channels = 8
degradation_channels = 4

[discriminator]
base_width = 4
"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new(pairs: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("data.toml");
        std::fs::write(&cfg, format!("num_pairs = {pairs}\npatch_size = 32\nseed = 3\n")).unwrap();
        std::fs::write(root.join("stage1.toml"), TRAIN_TOML).unwrap();
        std::fs::write(root.join("stage2.toml"), TRAIN_TOML.replace("stage = 1", "stage = 2")).unwrap();
        let data = root.join("data");
        ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
        Self { _dir: dir, root, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn train1(&self, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let cfg = self.path("stage1.toml");
        let mut args = vec!["train-stage1", "--config", s(&cfg), "--data", s(&self.data), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn synth_writes_pairs_deterministically_and_validates_first() {
    let f = Fixture::new(8);
    let mut names: Vec<String> = std::fs::read_dir(&f.data)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".png")).count(), 16);
    assert_eq!(names.iter().filter(|n| n.ends_with(".json")).count(), 1);

    let again = f.path("again");
    ok(&["synth", "--config", s(&f.path("data.toml")), "--out", s(&again)]);
    for n in &names {
        assert_eq!(std::fs::read(f.data.join(n)).unwrap(), std::fs::read(again.join(n)).unwrap(), "{n}");
    }

    let bad = f.path("bad.toml");
    std::fs::write(&bad, "patch_size = 50\n").unwrap();
    let out = blurrep(&["synth", "--config", s(&bad), "--out", s(&f.path("never"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("patch_size"));
    assert!(!f.path("never").exists());
}

#[test]
fn usage_errors_write_nothing() {
    let f = Fixture::new(4);
    let out_dir = f.path("s2");
    let out = blurrep(&[
        "train-stage2", "--config", s(&f.path("stage2.toml")), "--data", s(&f.data), "--out", s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());

    let out = blurrep(&[
        "train-stage1", "--config", s(&f.path("stage1.toml")), "--data", s(&f.data), "--out", s(&out_dir),
        "--ablation", "w/o everything",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("w/o degradation") && err.contains("injection w/o multi-scale"));
    assert!(!out_dir.exists());

    assert_eq!(blurrep(&["eval", "--nope"]).status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_an_io_class_failure() {
    let f = Fixture::new(4);
    let bad = f.path("bad.ckpt");
    std::fs::write(&bad, b"BLRPCKPT garbage").unwrap();
    let out = blurrep(&["deblur", "--ckpt", s(&bad), "--input", s(&f.data), "--out", s(&f.path("o"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn ablation_flag_changes_config_hash() {
    let f = Fixture::new(4);
    let full = f.train1("full", &["--ablation", "full"]);
    let ablated = f.train1("nodeg", &["--ablation", "Ours w/o degradation"]);
    let a = TrainConfig::load(full.join("config.toml")).unwrap();
    let b = TrainConfig::load(ablated.join("config.toml")).unwrap();
    assert_eq!(a.hash(), TrainConfig::load(f.path("stage1.toml")).unwrap().hash());
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn resume_continues_the_loss_trace() {
    let f = Fixture::new(4);
    let whole = f.train1("whole", &[]);
    assert!(whole.join("step0000002.ckpt").exists());
    assert!(whole.join("step0000004.ckpt").exists());

    let resumed = f.path("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    let mid = whole.join("step0000002.ckpt");
    ok(&["train-stage1", "--resume", s(&mid), "--data", s(&f.data), "--out", s(&resumed)]);
    let lines = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .filter(|l| l.contains("\"step\""))
            .map(String::from)
            .collect()
    };
    let tail: Vec<String> = lines(&whole).into_iter().skip_while(|l| !l.contains("\"step\":3")).collect();
    assert!(!tail.is_empty());
    assert_eq!(lines(&resumed), tail);
    assert_eq!(
        Checkpoint::load(whole.join("final.ckpt")).unwrap(),
        Checkpoint::load(resumed.join("final.ckpt")).unwrap()
    );
}

#[test]
fn inference_and_analysis_commands() {
    let f = Fixture::new(4);
    let s1 = f.train1("s1", &[]);
    let enc = s1.join("final.ckpt");
    let s2 = f.path("s2");
    ok(&[
        "train-stage2", "--config", s(&f.path("stage2.toml")), "--data", s(&f.data), "--out", s(&s2),
        "--encoder", s(&enc),
    ]);
    let stage2 = Checkpoint::load(s2.join("final.ckpt")).unwrap();
    assert_eq!(stage2.stage, 2);
    assert!(stage2.reblur.is_none());
    assert_eq!(stage2.encoder, Checkpoint::load(&enc).unwrap().encoder);

    // deblur over a directory, then score against ground truth
    let blurry_dir = f.path("blurry");
    std::fs::create_dir_all(&blurry_dir).unwrap();
    let pairs = read_dataset(&f.data).unwrap();
    for p in &pairs {
        std::fs::copy(f.data.join(format!("{}_blur.png", p.id)), blurry_dir.join(format!("{}.png", p.id))).unwrap();
    }
    let ckpt = s2.join("final.ckpt");
    let restored = f.path("restored");
    ok(&["deblur", "--ckpt", s(&ckpt), "--input", s(&blurry_dir), "--out", s(&restored)]);
    assert_eq!(std::fs::read_dir(&restored).unwrap().count(), pairs.len());
    let mean = pairs
        .iter()
        .map(|p| psnr(&load_image(restored.join(format!("{}.png", p.id))).unwrap(), &p.sharp).unwrap())
        .sum::<f64>()
        / pairs.len() as f64;

    let eval_dir = f.path("eval");
    let stdout = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&f.data), "--out", s(&eval_dir), "--fraction", "0.25"]);
    let report: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    for key in ["psnr", "ssim", "blurriest_psnr", "sharpest_psnr", "n"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert!((report["psnr"].as_f64().unwrap() - mean).abs() < 1e-6);

    // reblur with each image's own blurry counterpart as the degradation source
    let sharp_dir = f.path("sharp");
    std::fs::create_dir_all(&sharp_dir).unwrap();
    for p in &pairs {
        std::fs::copy(f.data.join(format!("{}_sharp.png", p.id)), sharp_dir.join(format!("{}.png", p.id))).unwrap();
    }
    let reblurred = f.path("reblurred");
    ok(&[
        "reblur", "--ckpt", s(&enc), "--input", s(&sharp_dir), "--out", s(&reblurred), "--degradation-source",
        s(&blurry_dir),
    ]);
    assert_eq!(std::fs::read_dir(&reblurred).unwrap().count(), pairs.len());

    let interp = f.path("interp");
    ok(&["interpolate", "--ckpt", s(&enc), "--data", s(&f.data), "--out", s(&interp), "--alphas", "0,0.5,1"]);
    let sheet = load_image(interp.join(format!("interp_{}.png", pairs[0].id))).unwrap();
    assert_eq!(sheet.dims(), (32, 3 * 32 + 2 * 2));

    let swap = f.path("swap");
    ok(&["swap", "--ckpt", s(&enc), "--data", s(&f.data), "--out", s(&swap)]);
    assert!(swap.join("swap.jsonl").exists());

    let dec = f.path("decouple");
    ok(&["decouple", "--ckpt", s(&enc), "--data", s(&f.data), "--out", s(&dec)]);
    let table: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dec.join("decouple.json")).unwrap()).unwrap();
    assert_eq!(table["pairs"], 2);
}

#[test]
fn deblur_pads_odd_sizes_and_crops_back() {
    let f = Fixture::new(2);
    let s1 = f.train1("s1", &[]);
    let pairs = read_dataset(&f.data).unwrap();
    let odd = pairs[0].blurry.crop(0, 0, 27, 30).unwrap();
    let input = f.path("odd.png");
    blurrep::image::save_image(&odd, &input).unwrap();
    let out = f.path("odd_out");
    ok(&["deblur", "--ckpt", s(&s1.join("final.ckpt")), "--input", s(&input), "--out", s(&out)]);
    assert_eq!(load_image(out.join("odd.png")).unwrap().dims(), (27, 30));
}
