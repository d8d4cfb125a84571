//! Command-line front end: dataset generation, experiment runs, and
//! checkpoint evaluation.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use fedseg::config::ExperimentConfig;
use fedseg::data::{generate_synthetic, load_pgm_dataset, save_pair, Style};
use fedseg::error::{Error, Result};
use fedseg::federation::{self, report};
use fedseg::metrics::MetricResult;
use fedseg::models::checkpoint::{load_checkpoint, save_checkpoint};
use fedseg::models::{SegNet, SegNetConfig};

#[derive(Parser)]
#[command(
    name = "fedseg",
    version,
    about = "Teacher-guided federated semi-supervised segmentation on synthetic shapes"
)]
struct Cli {
    /// Worker threads for read-only evaluation (0 = one per CPU core).
    /// Training is single-threaded so results never depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic image/mask PGM pairs plus a manifest.
    Generate {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of image/mask pairs.
        #[arg(long)]
        n: usize,
        /// Square image side length (even, >= 8).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Shape family: blob, ring, or multiblob.
        #[arg(long, default_value = "blob")]
        style: String,
        /// Gaussian pixel-noise standard deviation in [0, 1].
        #[arg(long, default_value_t = 0.15)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a federated experiment described by a config file.
    Run {
        /// Path to a flat `key = value` config file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint file against a PGM dataset directory, or a
    /// directory of client<i>.bin checkpoints against client<i>_test
    /// subdirectories.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let threads = if cli.threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cli.threads
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot build thread pool: {e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = pool.install(|| dispatch(cli.command)) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { out, n, size, style, noise, seed } => {
            cmd_generate(&out, n, size, &style, noise, seed)
        }
        Command::Run { config } => cmd_run(&config),
        Command::Eval { ckpt, data } => cmd_eval(&ckpt, &data),
    }
}

fn cmd_generate(out: &Path, n: usize, size: usize, style: &str, noise: f64, seed: u64) -> Result<()> {
    let style = Style::parse(style)?;
    let pairs = generate_synthetic(n, size, style, noise, seed)?;
    std::fs::create_dir_all(out)?;
    let mut manifest = format!(
        "count = {n}\nsize = {size}\nstyle = {}\nnoise_sd = {noise}\nseed = {seed}\n",
        style.name()
    );
    for (i, (image, mask)) in pairs.iter().enumerate() {
        save_pair(out, i, image, mask)?;
        manifest.push_str(&format!("pair {i}: img_{i:04}.pgm mask_{i:04}.pgm\n"));
    }
    std::fs::write(out.join("manifest.txt"), manifest)?;
    println!("wrote {n} pairs to {}", out.display());
    Ok(())
}

fn cmd_run(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    let (exp, reports) = federation::run_experiment(&cfg, Some(&out))?;
    report::write_csv(&out.join("report.csv"), &reports)?;

    let ckpt_dir = out.join("ckpt");
    std::fs::create_dir_all(&ckpt_dir)?;
    save_checkpoint(&ckpt_dir.join("teacher.bin"), &exp.server.teacher_params)?;
    save_checkpoint(&ckpt_dir.join("global.bin"), &exp.server.global_params)?;
    for c in &exp.clients {
        save_checkpoint(&ckpt_dir.join(format!("client{}.bin", c.index + 1)), &c.params)?;
        let split_dir = out.join("data").join(format!("client{}_test", c.index + 1));
        std::fs::create_dir_all(&split_dir)?;
        for (i, (img, mask)) in c.test.iter().enumerate() {
            save_pair(&split_dir, i, img, mask)?;
        }
    }
    if let Some(last) = reports.last() {
        println!(
            "round {}: mean dice {:.6}, mean hd95 {:.6}",
            last.round, last.mean_dice, last.mean_hd95
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path) -> Result<()> {
    let mut rows: Vec<(String, MetricResult)> = Vec::new();
    if ckpt.is_dir() {
        let mut found: Vec<(usize, PathBuf)> = Vec::new();
        for entry in std::fs::read_dir(ckpt)? {
            let path = entry?.path();
            let idx = path
                .file_name()
                .and_then(|s| s.to_str())
                .and_then(|n| n.strip_prefix("client"))
                .and_then(|r| r.strip_suffix(".bin"))
                .and_then(|d| d.parse::<usize>().ok());
            if let Some(idx) = idx {
                found.push((idx, path));
            }
        }
        found.sort();
        if found.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "no client<i>.bin checkpoints in {}",
                ckpt.display()
            )));
        }
        for (idx, path) in found {
            let split = data.join(format!("client{idx}_test"));
            rows.push((format!("C{idx}"), eval_one(&path, &split)?));
        }
    } else {
        rows.push(("model".to_string(), eval_one(ckpt, data)?));
    }
    let n = rows.len() as f64;
    let avg = MetricResult {
        dice: rows.iter().map(|(_, m)| m.dice).sum::<f64>() / n,
        hd95: rows.iter().map(|(_, m)| m.hd95).sum::<f64>() / n,
    };
    println!("client,dice,hd95");
    for (name, m) in &rows {
        println!("{name},{:.6},{:.6}", m.dice, m.hd95);
    }
    println!("avg,{:.6},{:.6}", avg.dice, avg.hd95);
    Ok(())
}

fn eval_one(ckpt: &Path, data: &Path) -> Result<MetricResult> {
    let params = load_checkpoint(ckpt)?;
    let num_classes = params
        .get("head.bias")
        .map(|t| t.shape[0])
        .ok_or_else(|| Error::MalformedCheckpoint("missing head.bias entry".into()))?;
    let pairs = load_pgm_dataset(data, num_classes)?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = SegNetConfig::infer(&params, (pairs[0].0.h, pairs[0].0.w))?;
    let net = SegNet::new(cfg)?;
    federation::evaluate_model(&net, &params, &pairs, num_classes)
}
