//! Command-line front end.

use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{
    decoupleness_report, interpolate_degradations, score_restorations, swap_reblur, BLUR_RANKING,
};
use crate::dataset::{make_dataset_with_manifest, read_dataset, write_dataset, DatasetConfig, ImagePair};
use crate::encoder::{DegradationEncoder, LATENT_STRIDE};
use crate::error::{Error, Result};
use crate::image::{contact_sheet, load_image, save_image, save_image16, write_atomic, Image};
use crate::losses::FrozenFeatureExtractor;
use crate::metrics::{contextual_similarity, sharpness};
use crate::msdi::Generator;
use crate::training::{
    infer_deblur, infer_reblur, split_holdout, Ablation, Checkpoint, Event, MetricsLog, Stage1Trainer, Stage2Trainer,
    TrainConfig, Trainer,
};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Parser)]
#[command(name = "blurrep", version, about = "Blur-degradation representations for reblurring and deblurring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    Synth {
        /// Dataset config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint training of the encoder, both generators and the discriminator.
    #[command(name = "train-stage1")]
    TrainStage1(TrainArgs),
    /// Retrain the deblurring generator against a frozen encoder.
    #[command(name = "train-stage2")]
    TrainStage2 {
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint holding the trained encoder.
        #[arg(long, required_unless_present = "resume")]
        encoder: Option<PathBuf>,
    },
    /// Deblur a PNG or every PNG in a directory.
    Deblur {
        #[command(flatten)]
        io: InferArgs,
    },
    /// Reblur sharp images with the degradation of another image.
    Reblur {
        #[command(flatten)]
        io: InferArgs,
        /// Blurry PNG, or a directory of PNGs matched by file name.
        #[arg(long)]
        degradation_source: PathBuf,
    },
    /// Mean PSNR/SSIM with blurriest/sharpest subsets.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
    },
    /// Contact sheets of reblurs under interpolated degradations.
    Interpolate {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated interpolation weights in [0, 1].
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        alphas: Vec<f64>,
    },
    /// Reblur each sharp image with its neighbour's degradation.
    Swap {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Contextual-similarity table for degradation swaps.
    Decouple {
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (TOML). Optional when resuming.
    #[arg(long, required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    /// Dataset directory with a manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by the same stage.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Component-study variant, e.g. "w/o degradation".
    #[arg(long)]
    pub ablation: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PNG file or directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } => 3,
        Error::Io { .. } | Error::Image { .. } | Error::Integrity(_) => 4,
        Error::Config { .. } | Error::UnknownAblation { .. } | Error::Dimension(_) | Error::Invalid(_) => 2,
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => synth(&config, &out),
        Command::TrainStage1(args) => train_stage1(&args),
        Command::TrainStage2 { train, encoder } => train_stage2(&train, encoder.as_deref()),
        Command::Deblur { io } => deblur_files(&io),
        Command::Reblur { io, degradation_source } => reblur_files(&io, &degradation_source),
        Command::Eval { data, fraction } => eval(&data, fraction),
        Command::Interpolate { data, alphas } => interpolate(&data, &alphas),
        Command::Swap { data } => swap(&data),
        Command::Decouple { data } => decouple(&data),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

fn write_jsonl<S: Serialize>(path: &Path, kind: &str, rows: &[S]) -> Result<()> {
    let mut log = MetricsLog::new(Vec::new());
    for row in rows {
        log.write(kind, row)?;
    }
    write_atomic(path, &log.into_inner())
}

fn synth(config: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let cfg: DatasetConfig = toml::from_str(&text).map_err(|e| Error::config("dataset", e.message().to_string()))?;
    cfg.validate()?;
    let (pairs, manifest) = make_dataset_with_manifest(&cfg)?;
    write_dataset(out, &pairs, &manifest)?;
    let mean = pairs.iter().map(ImagePair::input_psnr).sum::<f64>() / pairs.len() as f64;
    println!("wrote {} pairs to {}; mean input PSNR {mean:.3} dB", pairs.len(), out.display());
    Ok(())
}

fn load_pairs(dir: &Path) -> Result<Vec<ImagePair>> {
    let pairs = read_dataset(dir)?;
    if pairs.is_empty() {
        return Err(Error::Invalid(format!("{} holds no pairs", dir.display())));
    }
    Ok(pairs)
}

fn train_config(args: &TrainArgs, stage: u8) -> Result<TrainConfig> {
    let path = args.config.as_ref().ok_or_else(|| Error::config("config", "required unless resuming"))?;
    let mut cfg = TrainConfig::load(path)?;
    if cfg.stage != stage {
        return Err(Error::config("stage", format!("config is for stage {}, command trains stage {stage}", cfg.stage)));
    }
    if let Some(name) = &args.ablation {
        cfg = Ablation::parse(name)?.apply(&cfg);
    }
    Ok(cfg)
}

/// Drive a trainer, logging metrics and writing periodic checkpoints.
fn drive<T: Trainer>(trainer: &mut T, out: &Path, resumed: bool) -> Result<()> {
    let path = out.join(METRICS_FILE);
    let file = if resumed {
        OpenOptions::new().create(true).append(true).open(&path)
    } else {
        File::create(&path)
    }
    .map_err(|e| Error::io(&path, e))?;
    let mut log = MetricsLog::new(BufWriter::new(file));
    write_atomic(&out.join("config.toml"), trainer.config().to_toml().as_bytes())?;
    let result = trainer.run(|event, t| {
        log.event(&event)?;
        if let Event::Eval(r) = event {
            println!(
                "step {}: deblur {:.3} dB (input {:.3} dB){}",
                r.step,
                r.deblur_psnr,
                r.input_psnr,
                r.reblur_psnr.map(|p| format!(", reblur {p:.3} dB")).unwrap_or_default()
            );
            t.checkpoint().save(out.join(format!("step{:07}.ckpt", r.step)))?;
        }
        Ok(())
    });
    std::io::Write::flush(&mut log.into_inner()).map_err(|e| Error::io(&path, e))?;
    result?;
    trainer.checkpoint().save(out.join(FINAL_CHECKPOINT))
}

fn train_stage1(args: &TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(ckpt) => {
            let ckpt = Checkpoint::load(ckpt)?;
            let (train, val) = split_holdout(load_pairs(&args.data)?, ckpt.config.holdout)?;
            Stage1Trainer::resume(&ckpt, train, val)?
        }
        None => {
            let cfg = train_config(args, 1)?;
            let (train, val) = split_holdout(load_pairs(&args.data)?, cfg.holdout)?;
            Stage1Trainer::new(cfg, train, val)?
        }
    };
    create_dir(&args.out)?;
    drive(&mut trainer, &args.out, args.resume.is_some())
}

fn train_stage2(args: &TrainArgs, encoder: Option<&Path>) -> Result<()> {
    let mut trainer = match (&args.resume, encoder) {
        (Some(ckpt), _) => {
            let ckpt = Checkpoint::load(ckpt)?;
            let (train, val) = split_holdout(load_pairs(&args.data)?, ckpt.config.holdout)?;
            Stage2Trainer::resume(&ckpt, train, val)?
        }
        (None, Some(enc)) => {
            let cfg = train_config(args, 2)?;
            let encoder = Checkpoint::load(enc)?.encoder()?.freeze();
            let (train, val) = split_holdout(load_pairs(&args.data)?, cfg.holdout)?;
            Stage2Trainer::new(cfg, encoder, train, val)?
        }
        (None, None) => return Err(Error::config("encoder", "stage 2 needs --encoder")),
    };
    create_dir(&args.out)?;
    drive(&mut trainer, &args.out, args.resume.is_some())
}

/// PNG files under `input`, or `input` itself, in name order.
pub fn list_pngs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(input).map_err(|e| Error::io(input, e))? {
        let path = entry.map_err(|e| Error::io(input, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    if files.is_empty() {
        return Err(Error::Invalid(format!("no PNG files in {}", input.display())));
    }
    files.sort();
    Ok(files)
}

fn output_path(out: &Path, input: &Path) -> PathBuf {
    out.join(input.file_name().expect("listed files have names"))
}

fn padded(img: &Image) -> Image {
    img.pad_reflect_to_multiple(LATENT_STRIDE)
}

fn crop_back(img: &Image, like: &Image) -> Result<Image> {
    let (h, w) = like.dims();
    img.crop(0, 0, h, w)
}

/// Deblur one image of any size, padding reflectively to the latent stride.
pub fn deblur_any(encoder: &DegradationEncoder<f32>, g_d: &Generator<f32>, blurry: &Image) -> Result<Image> {
    let out = infer_deblur(encoder, g_d, &[&padded(blurry)])?;
    crop_back(&out[0], blurry)
}

fn deblur_files(args: &InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let (encoder, g_d) = (ckpt.encoder()?, ckpt.deblur_generator()?);
    let files = list_pngs(&args.input)?;
    create_dir(&args.out)?;
    for file in &files {
        let restored = deblur_any(&encoder, &g_d, &load_image(file)?)?;
        save_image16(&restored, output_path(&args.out, file))?;
    }
    println!("deblurred {} images into {}", files.len(), args.out.display());
    Ok(())
}

fn reblur_files(args: &InferArgs, source: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let (encoder, g_r) = (ckpt.encoder()?, ckpt.reblur_generator()?);
    let files = list_pngs(&args.input)?;
    let shared = if source.is_dir() { None } else { Some(load_image(source)?) };
    create_dir(&args.out)?;
    for file in &files {
        let sharp = load_image(file)?;
        let src = match &shared {
            Some(img) => img.clone(),
            None => load_image(source.join(file.file_name().expect("listed files have names")))?,
        };
        if src.dims() != sharp.dims() {
            return Err(Error::Dimension(format!(
                "{} is {:?} but its degradation source is {:?}",
                file.display(),
                sharp.dims(),
                src.dims()
            )));
        }
        let out = infer_reblur(&encoder, &g_r, &[&padded(&sharp)], &[&padded(&src)])?;
        save_image16(&crop_back(&out[0], &sharp)?, output_path(&args.out, file))?;
    }
    println!("reblurred {} images into {}", files.len(), args.out.display());
    Ok(())
}

fn eval(args: &DataArgs, fraction: f64) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let (encoder, g_d) = (ckpt.encoder()?, ckpt.deblur_generator()?);
    let pairs = load_pairs(&args.data)?;
    // Scores match what `deblur` writes to disk.
    let restored = pairs
        .iter()
        .map(|p| Ok(deblur_any(&encoder, &g_d, &p.blurry)?.quantized16()))
        .collect::<Result<Vec<_>>>()?;
    let report = score_restorations(&pairs, &restored, fraction)?;
    create_dir(&args.out)?;
    write_json(&args.out.join("eval.json"), &report)?;
    println!("{}", serde_json::to_string(&report).map_err(|e| Error::Invalid(e.to_string()))?);
    Ok(())
}

#[derive(Serialize)]
struct InterpolationRow<'a> {
    id: &'a str,
    alphas: &'a [f64],
    sharpness: Vec<f64>,
}

fn interpolate(args: &DataArgs, alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::Invalid("--alphas needs at least one weight".into()));
    }
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let (encoder, g_r) = (ckpt.encoder()?, ckpt.reblur_generator()?);
    let pairs = load_pairs(&args.data)?;
    create_dir(&args.out)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let sweep = interpolate_degradations(&p.sharp, &p.blurry, &encoder, &g_r, alphas)?;
        save_image(&contact_sheet(&[sweep.clone()])?, args.out.join(format!("interp_{}.png", p.id)))?;
        rows.push(InterpolationRow {
            id: &p.id,
            alphas,
            sharpness: sweep.iter().map(sharpness).collect(),
        });
    }
    write_jsonl(&args.out.join("interpolation.jsonl"), "interpolation", &rows)?;
    println!("wrote {} interpolation sheets to {}", rows.len(), args.out.display());
    Ok(())
}

fn even_pairs(pairs: &[ImagePair]) -> Result<&[ImagePair]> {
    if pairs.len() < 2 || pairs.len() % 2 != 0 {
        return Err(Error::Invalid(format!("need an even number of pairs, got {}", pairs.len())));
    }
    Ok(pairs)
}

fn swap(args: &DataArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let (encoder, g_r) = (ckpt.encoder()?, ckpt.reblur_generator()?);
    let pairs = load_pairs(&args.data)?;
    let ext = FrozenFeatureExtractor::default();
    create_dir(&args.out)?;
    let mut rows = Vec::new();
    for ab in even_pairs(&pairs)?.chunks(2) {
        let (a, b) = (&ab[0], &ab[1]);
        let swapped = swap_reblur(&a.sharp, &b.blurry, &encoder, &g_r)?;
        let sheet = contact_sheet(&[vec![a.sharp.clone(), b.blurry.clone(), swapped.clone()]])?;
        save_image(&sheet, args.out.join(format!("swap_{}_{}.png", a.id, b.id)))?;
        rows.push(serde_json::json!({
            "a": a.id,
            "b": b.id,
            "cx_swap_a": contextual_similarity(&swapped, &a.sharp, &ext)?,
            "cx_swap_b": contextual_similarity(&swapped, &b.sharp, &ext)?,
            "sharpness_a": sharpness(&a.sharp),
            "sharpness_swap": sharpness(&swapped),
        }));
    }
    write_jsonl(&args.out.join("swap.jsonl"), "swap", &rows)?;
    println!("wrote {} swap triplets to {}", rows.len(), args.out.display());
    Ok(())
}

fn decouple(args: &DataArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let (encoder, g_r) = (ckpt.encoder()?, ckpt.reblur_generator()?);
    let pairs = load_pairs(&args.data)?;
    let report = decoupleness_report(even_pairs(&pairs)?, &encoder, &g_r, &FrozenFeatureExtractor::default())?;
    create_dir(&args.out)?;
    write_jsonl(&args.out.join("decouple.jsonl"), "pairing", &report.rows)?;
    let summary = serde_json::json!({
        "cx_blur_a_vs_a": report.blur_a_vs_a,
        "cx_swap_vs_a": report.swap_vs_a,
        "cx_blur_a_vs_b": report.blur_a_vs_b,
        "cx_swap_vs_b": report.swap_vs_b,
        "pairs": report.pairs,
        "content_kept_fraction": report.content_kept_fraction,
        "ranking": BLUR_RANKING,
    });
    write_json(&args.out.join("decouple.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn stage2_requires_encoder_or_resume() {
        let base = ["blurrep", "train-stage2", "--config", "c.toml", "--data", "d", "--out", "o"];
        let err = Cli::try_parse_from(base).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(Cli::try_parse_from(base.iter().copied().chain(["--encoder", "e.ckpt"])).is_ok());
        assert!(Cli::try_parse_from(["blurrep", "deblur", "--bogus"]).is_err());
    }

    #[test]
    fn alphas_parse_as_a_list() {
        let cli = Cli::try_parse_from([
            "blurrep", "interpolate", "--ckpt", "c", "--data", "d", "--out", "o", "--alphas", "0,0.5,1",
        ])
        .unwrap();
        match cli.command {
            Command::Interpolate { alphas, .. } => assert_eq!(alphas, vec![0.0, 0.5, 1.0]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Divergence { step: 1, loss: "x".into(), value: f64::NAN }), 3);
        assert_eq!(exit_code(&Error::Integrity("x".into())), 4);
        assert_eq!(exit_code(&Error::config("a", "b")), 2);
    }
}
