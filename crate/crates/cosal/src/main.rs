use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cosal::checkpoint::{AblationFlags, Checkpoint};
use cosal::data::{self, GenConfig, Split};
use cosal::engine;
use cosal::error::{CosalError, Result};
use cosal::image;
use cosal::losses::LossWeights;
use cosal::model::ModelConfig;
use cosal::Tensor32;

#[derive(Parser)]
#[command(name = "cosal", about = "Group-collaborative co-salient object detection", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape benchmark
    GenData {
        #[arg(long, default_value_t = 12)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Force at least this many distractors into every image
        #[arg(long, default_value_t = 0)]
        min_distractors: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 3.0)]
        lambda1: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda2: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda3: f64,
        /// Replace attention consensus by plain mean pooling
        #[arg(long)]
        no_gam: bool,
        /// Disable the collaborating (cross-consensus) branch
        #[arg(long)]
        no_gcm: bool,
        /// Disable the auxiliary classifier
        #[arg(long)]
        no_acm: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Continue from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-episode loss log (CSV)
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write a metrics report
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predict saliency maps for one directory of images
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        group: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-image attention maps with min/max sidecars
    DumpAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        group: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export sub-batch consensus vectors and separability statistics
    ExportConsensus {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "eval" => Ok(Split::Eval),
        other => Err(CosalError::invalid(format!("unknown split {other:?}"))),
    }
}

/// All .ppm files of a directory, name-sorted, as one image tensor.
fn load_group_dir(dir: &Path) -> Result<(Tensor32, Vec<String>, usize)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CosalError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.len() < 2 {
        return Err(CosalError::invalid("group directory needs at least 2 .ppm images"));
    }
    let first = image::read_image(&paths[0])?;
    let (w, h) = (first.width, first.height);
    if w != h {
        return Err(CosalError::invalid("images must be square"));
    }
    let n = paths.len();
    let mut images = Tensor32::zeros(&[n, 3, h, w])?;
    let mut names = Vec::with_capacity(n);
    for (slot, p) in paths.iter().enumerate() {
        let img = if slot == 0 { first.clone() } else { image::read_image(p)? };
        if img.width != w || img.height != h {
            return Err(CosalError::invalid(format!("size mismatch in {}", p.display())));
        }
        for pix in 0..w * h {
            for ch in 0..3 {
                images.data[(slot * 3 + ch) * w * h + pix] = img.data[pix * 3 + ch] as f32 / 255.0;
            }
        }
        names.push(p.file_stem().unwrap().to_string_lossy().into_owned());
    }
    Ok((images, names, w))
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { classes, per_class, size, seed, min_distractors, out } => {
            let cfg = GenConfig { num_classes: classes, per_class, size, seed, min_distractors };
            let manifest = data::generate_dataset(&cfg, &out)?;
            println!(
                "wrote {} images across {} classes to {}",
                manifest.records.len(),
                classes,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data: data_dir,
            epochs,
            k,
            lr,
            lambda1,
            lambda2,
            lambda3,
            no_gam,
            no_gcm,
            no_acm,
            seed,
            resume,
            loss_csv,
            out,
        } => {
            let manifest = data::load_manifest(&data_dir)?;
            let resume_ck = resume.map(|p| Checkpoint::<f32>::load(&p)).transpose()?;
            let cfg = engine::TrainConfig {
                model: ModelConfig { input_size: manifest.size, ..ModelConfig::default() },
                epochs,
                k,
                lr,
                weights: LossWeights {
                    lambda_sal: lambda1,
                    lambda_ctm: lambda2,
                    lambda_cls: lambda3,
                },
                flags: AblationFlags { use_gam: !no_gam, use_gcm: !no_gcm, use_acm: !no_acm },
                seed,
            };
            let ck = engine::train::<f32>(&cfg, &manifest, &out, loss_csv.as_deref(), resume_ck)?;
            println!("trained {} episodes, checkpoint at {}", ck.episode, out.display());
            Ok(())
        }
        Command::Eval { ckpt, data: data_dir, split, report } => {
            let ck = Checkpoint::<f32>::load(&ckpt)?;
            let manifest = data::load_manifest(&data_dir)?;
            let result = engine::evaluate_dataset(&ck, &manifest, parse_split(&split)?)?;
            if let Some(path) = report {
                fs::write(&path, result.to_csv()).map_err(|e| CosalError::io(&path, e))?;
            }
            print!("{}", result.table());
            Ok(())
        }
        Command::Infer { ckpt, group, out } => {
            let ck = Checkpoint::<f32>::load(&ckpt)?;
            let (images, names, size) = load_group_dir(&group)?;
            let preds = engine::infer_group(&ck, &images)?;
            fs::create_dir_all(&out).map_err(|e| CosalError::io(&out, e))?;
            let hw = size * size;
            for (i, name) in names.iter().enumerate() {
                let bytes: Vec<u8> = preds.data[i * hw..(i + 1) * hw]
                    .iter()
                    .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
                    .collect();
                image::write_gray(&out.join(format!("{name}.sal.pgm")), size, size, &bytes)?;
            }
            println!("wrote {} saliency maps to {}", names.len(), out.display());
            Ok(())
        }
        Command::DumpAttention { ckpt, group, out } => {
            let ck = Checkpoint::<f32>::load(&ckpt)?;
            let (images, names, _) = load_group_dir(&group)?;
            let (a_s, ranges) = engine::attention_maps(&ck, &images)?;
            fs::create_dir_all(&out).map_err(|e| CosalError::io(&out, e))?;
            let (h, w) = (a_s.shape[2], a_s.shape[3]);
            let hw = h * w;
            for (i, name) in names.iter().enumerate() {
                let (lo, hi) = ranges[i];
                let span = if hi > lo { hi - lo } else { 1.0 };
                let bytes: Vec<u8> = a_s.data[i * hw..(i + 1) * hw]
                    .iter()
                    .map(|&v| (((v as f64 - lo) / span) * 255.0).round() as u8)
                    .collect();
                image::write_gray(&out.join(format!("{name}.att.pgm")), w, h, &bytes)?;
                let sidecar = format!("min={lo:.9}\nmax={hi:.9}\n");
                let sp = out.join(format!("{name}.att.txt"));
                fs::write(&sp, sidecar).map_err(|e| CosalError::io(&sp, e))?;
            }
            println!("wrote {} attention maps to {}", names.len(), out.display());
            Ok(())
        }
        Command::ExportConsensus { ckpt, data: data_dir, split, out } => {
            let ck = Checkpoint::<f32>::load(&ckpt)?;
            let manifest = data::load_manifest(&data_dir)?;
            let (csv, stats) = engine::export_consensus(&ck, &manifest, parse_split(&split)?)?;
            fs::write(&out, csv).map_err(|e| CosalError::io(&out, e))?;
            println!("d1={:.6} d2={:.6} ratio={:.6}", stats.d1, stats.d2, stats.ratio);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
