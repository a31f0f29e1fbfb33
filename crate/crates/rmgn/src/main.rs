//! Command-line entry point: data generation, training, inference, and
//! evaluation as reproducible runs. Exit codes: 0 success, 2 usage error,
//! 1 runtime error. `RMGN_SEED` overrides every seed source for CI.

use clap::{Parser, Subcommand, ValueEnum};
use rmgn::atelier::{
    generate_dataset, load_manifest, render_cloth, render_person, save_manifest,
};
use rmgn::config::{load_config, save_config, TrainConfig};
use rmgn::domain::{load_image, save_image, save_mask};
use rmgn::error::{Result, RmgnError};
use rmgn::eval::{
    evaluate_model, results_to_csv, run_ablation, run_fakeset_sweep,
};
use rmgn::train::{embedder_for, infer, load_checkpoint, train};
use rmgn::Real;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "rmgn", about = "Parser-free virtual try-on at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic dataset (manifest + cached renders).
    GenData {
        /// Number of persons.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 48)]
        width: usize,
    },
    /// Train on a generated dataset, producing a self-describing run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest file.
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Synthesize a try-on image from a person photo and a cloth photo.
    Infer {
        #[arg(long)]
        person: PathBuf,
        #[arg(long)]
        cloth: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Config file; defaults to the run directory's copy next to the
        /// checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also export the per-level selector masks as mask_L{i}.png.
        #[arg(long)]
        dump_masks: bool,
    },
    /// Compute metric tables.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value = "eval_out")]
        out: PathBuf,
        /// Seeds for the training harness modes.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Fake-set sizes for sweep mode.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3])]
        n_values: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Fid,
    Ablation,
    Sweep,
    MaskScore,
}

fn env_seed(fallback: u64) -> Result<u64> {
    match std::env::var("RMGN_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map_err(|e| RmgnError::Config(format!("RMGN_SEED: {e}"))),
        Err(_) => Ok(fallback),
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| RmgnError::io(path.display().to_string(), e))
}

fn cmd_gen_data(n: u64, seed: u64, out: &Path, h: usize, w: usize) -> Result<String> {
    let seed = env_seed(seed)?;
    mkdir(out)?;
    let manifest = generate_dataset(n as usize, seed)?;
    let manifest_path = out.join("manifest.toml");
    save_manifest(&manifest, &manifest_path)?;
    for (i, item) in manifest.items.iter().enumerate() {
        let render = render_person::<Real>(&item.person, h, w);
        save_image(&render.image, out.join(format!("person_{i:03}.png")))?;
        let mask = render
            .cloth_region
            .clone()
            .insert_axis(ndarray::Axis(0));
        save_mask(&mask, out.join(format!("mask_{i:03}.png")))?;
        for (j, cloth) in item.clothes.iter().enumerate() {
            let img = render_cloth::<Real>(cloth, h, w);
            save_image(&img, out.join(format!("cloth_{i:03}_{j}.png")))?;
        }
    }
    Ok(format!(
        "gen-data ok n={n} seed={seed} manifest={}",
        manifest_path.display()
    ))
}

fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let mut best: Option<PathBuf> = None;
    let entries =
        std::fs::read_dir(dir).map_err(|e| RmgnError::io(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| RmgnError::io(dir.display().to_string(), e))?;
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "ckpt")
            && best.as_ref().is_none_or(|b| p > *b)
        {
            best = Some(p);
        }
    }
    best.ok_or_else(|| {
        RmgnError::Checkpoint(format!("no checkpoint found in {}", dir.display()))
    })
}

fn cmd_train(config: &Path, data: &Path, out: &Path, resume: bool) -> Result<String> {
    let mut cfg = load_config(config)?;
    cfg.seed = env_seed(cfg.seed)?;
    cfg.validate()?;
    let manifest = load_manifest(data)?;
    mkdir(out)?;
    mkdir(&out.join("outputs"))?;
    mkdir(&out.join("masks"))?;
    // the run directory is self-describing: effective config + manifest copy
    save_config(&cfg, out.join("config.toml"))?;
    save_manifest(&manifest, out.join("manifest.toml"))?;
    let resume_from = if resume {
        Some(latest_checkpoint(&out.join("checkpoints"))?)
    } else {
        None
    };
    let state = train::<Real>(&cfg, &manifest, out, resume_from.as_deref())?;
    Ok(format!(
        "train ok steps={} checkpoint={} metrics={}",
        state.step,
        state.last_checkpoint,
        out.join("metrics.csv").display()
    ))
}

fn config_near_ckpt(ckpt: &Path, config: Option<&Path>) -> Result<TrainConfig> {
    match config {
        Some(p) => load_config(p),
        None => {
            let run_dir = ckpt
                .parent()
                .and_then(Path::parent)
                .ok_or_else(|| RmgnError::Config("cannot locate run directory".into()))?;
            load_config(run_dir.join("config.toml"))
        }
    }
}

fn cmd_infer(
    person: &Path,
    cloth: &Path,
    ckpt: &Path,
    config: Option<&Path>,
    out: &Path,
    dump_masks: bool,
) -> Result<String> {
    let cfg = config_near_ckpt(ckpt, config)?;
    let person_img = load_image::<Real>(person)?;
    let cloth_img = load_image::<Real>(cloth)?;
    for (label, img) in [("person", &person_img), ("cloth", &cloth_img)] {
        if img.height() != cfg.height || img.width() != cfg.width {
            return Err(RmgnError::shape(
                format!("{}x{} {label} image (checkpoint config)", cfg.height, cfg.width),
                format!("{}x{}", img.height(), img.width()),
            ));
        }
    }
    let state = load_checkpoint::<Real>(ckpt, &cfg)?;
    let (tryon, masks) = infer(&person_img, &cloth_img, &state)?;
    mkdir(out)?;
    let tryon_path = out.join("tryon.png");
    save_image(&tryon, &tryon_path)?;
    if dump_masks {
        for (i, m) in masks.iter().enumerate() {
            save_mask(m.values(), out.join(format!("mask_L{i}.png")))?;
        }
    }
    Ok(format!(
        "infer ok tryon={} masks={}",
        tryon_path.display(),
        if dump_masks { masks.len() } else { 0 }
    ))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| RmgnError::io(path.display().to_string(), e))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: Option<&Path>,
    config: Option<&Path>,
    data: &Path,
    mode: Mode,
    out: &Path,
    seeds: &[u64],
    n_values: &[usize],
) -> Result<String> {
    let manifest = load_manifest(data)?;
    mkdir(out)?;
    let need_ckpt = || {
        ckpt.ok_or_else(|| RmgnError::Checkpoint("--ckpt is required for this mode".into()))
    };
    let (csv_path, csv) = match mode {
        Mode::Fid | Mode::MaskScore => {
            let ckpt = need_ckpt()?;
            let cfg = config_near_ckpt(ckpt, config)?;
            let state = load_checkpoint::<Real>(ckpt, &cfg)?;
            let emb = embedder_for::<Real>(&cfg)?;
            let m = evaluate_model(&state, &cfg, &manifest, &emb)?;
            match mode {
                Mode::Fid => (
                    out.join("fid.csv"),
                    format!(
                        "metric,value\npixel_l1,{}\nfid,{}\nmask_score,{}\n",
                        m.pixel_l1,
                        m.fid.map_or("nan".into(), |v| v.to_string()),
                        m.mask_score
                    ),
                ),
                _ => (
                    out.join("mask_score.csv"),
                    format!("metric,value\nmask_score,{}\n", m.mask_score),
                ),
            }
        }
        Mode::Ablation => {
            let cfg = match (config, ckpt) {
                (Some(p), _) => load_config(p)?,
                (None, Some(c)) => config_near_ckpt(c, None)?,
                (None, None) => {
                    return Err(RmgnError::Config(
                        "--config (or --ckpt) is required for ablation".into(),
                    ))
                }
            };
            let rows = run_ablation::<Real>(&cfg, &manifest, seeds, out)?;
            (out.join("ablation.csv"), results_to_csv(&rows))
        }
        Mode::Sweep => {
            let cfg = match (config, ckpt) {
                (Some(p), _) => load_config(p)?,
                (None, Some(c)) => config_near_ckpt(c, None)?,
                (None, None) => {
                    return Err(RmgnError::Config(
                        "--config (or --ckpt) is required for sweep".into(),
                    ))
                }
            };
            let rows = run_fakeset_sweep::<Real>(&cfg, &manifest, n_values, seeds, out)?;
            (out.join("sweep.csv"), results_to_csv(&rows))
        }
    };
    write_text(&csv_path, &csv)?;
    Ok(format!("eval ok mode={mode:?} csv={}", csv_path.display()))
}

fn run(cmd: Cmd) -> Result<String> {
    match cmd {
        Cmd::GenData {
            n,
            seed,
            out,
            height,
            width,
        } => cmd_gen_data(n, seed, &out, height, width),
        Cmd::Train {
            config,
            data,
            out,
            resume,
        } => cmd_train(&config, &data, &out, resume),
        Cmd::Infer {
            person,
            cloth,
            ckpt,
            config,
            out,
            dump_masks,
        } => cmd_infer(&person, &cloth, &ckpt, config.as_deref(), &out, dump_masks),
        Cmd::Eval {
            ckpt,
            config,
            data,
            mode,
            out,
            seeds,
            n_values,
        } => cmd_eval(
            ckpt.as_deref(),
            config.as_deref(),
            &data,
            mode,
            &out,
            &seeds,
            &n_values,
        ),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
