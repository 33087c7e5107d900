use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pcanet::ablate::run_ablation;
use pcanet::cam::{grad_cam, render_heatmap};
use pcanet::config::{Precision, TrainConfig};
use pcanet::data::{export_synthetic, generate_synthetic, load_image_folder, transform_eval, Dataset};
use pcanet::train::{
    checkpoint_precision, evaluate, fit, load_checkpoint, save_checkpoint, EvalSet, MetricsLog, TrainData, TrainState,
};
use pcanet::{Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "pcanet", version, about = "Progressive co-attention network at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as <out>/{train,test}/<class>/*.ppm plus manifest.json
    Gendata(Common),
    /// Train a model; writes <out>/checkpoint.pcan and <out>/metrics.jsonl
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from --checkpoint instead of starting fresh
        #[arg(long)]
        resume: bool,
    },
    /// Print the top-1 test accuracy of a checkpoint
    Eval(Common),
    /// Train the base model and the five module combinations; writes report.json and report.txt
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Extra center-loss weights for the full model, comma separated
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
    /// Grad-CAM heatmaps of test images for a full and a baseline checkpoint
    Visualize {
        #[command(flatten)]
        common: Common,
        /// Baseline checkpoint shown next to --checkpoint
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Number of test images
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Write PNG instead of PPM
        #[arg(long)]
        png: bool,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Flat JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset (desk or paper) used when no --config is given
    #[arg(long)]
    preset: Option<String>,
    /// Random seed; repeat for several seeds with ablate
    #[arg(long)]
    seed: Vec<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory (train/ and test/ subfolders, or class folders for eval)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Config override, key=value
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                TrainConfig::from_json(&text)?
            }
            (None, Some(name)) => TrainConfig::preset(name)?,
            (None, None) => TrainConfig::default(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(&seed) = self.seed.first() {
            cfg.seed = seed;
        }
        for s in &self.set {
            cfg.set(s)?;
        }
        Ok(())
    }

    fn out(&self, default: &str) -> Result<PathBuf> {
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        fs::create_dir_all(&out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        Ok(out)
    }

    fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("--checkpoint is required".into()))
    }
}

fn sub_or_self(dir: &Path, name: &str) -> PathBuf {
    let sub = dir.join(name);
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn load_train_data(cfg: &TrainConfig, data: Option<&Path>) -> Result<TrainData> {
    match data {
        Some(dir) => {
            let train = load_image_folder(&dir.join("train"), cfg.input_size)?;
            let test = load_image_folder(&dir.join("test"), cfg.input_size)?;
            TrainData::new(&train, &test, cfg.input_size)
        }
        None => TrainData::synthetic(cfg),
    }
}

fn load_test_set(cfg: &TrainConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(dir) => load_image_folder(&sub_or_self(dir, "test"), cfg.input_size),
        None => Ok(generate_synthetic(&cfg.synthetic(), cfg.seed)?.1),
    }
}

fn cmd_gendata(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let out = common.out("data")?;
    let m = export_synthetic(&out, &cfg.synthetic(), cfg.seed)?;
    println!(
        "wrote {} train and {} test images to {}",
        m.train_images,
        m.test_images,
        out.display()
    );
    Ok(())
}

fn train_with<T: Scalar>(common: &Common, resume: bool) -> Result<()> {
    let out = common.out("run")?;
    let metrics = out.join("metrics.jsonl");
    let (mut state, mut log) = if resume {
        let mut state: TrainState<T> = load_checkpoint(common.checkpoint()?)?;
        common.apply(&mut state.config)?;
        state.config.validate()?;
        (state, MetricsLog::append_to(&metrics)?)
    } else {
        let cfg = common.config()?;
        let data_names = load_train_data(&cfg, common.data.as_deref())?.class_names;
        (TrainState::new(cfg, data_names)?, MetricsLog::create(&metrics)?)
    };
    let data = load_train_data(&state.config, common.data.as_deref())?;
    let start = Instant::now();
    let ckpt = out.join("checkpoint.pcan");
    fit(&mut state, &data, Some(&mut log), |r| {
        eprintln!(
            "epoch {:>3}  lr {:.6}  loss {:.4}  train {:.3}  test {:.3}  ({:.0}s)",
            r.epoch,
            r.lr,
            r.loss_total,
            r.acc_train,
            r.acc_test,
            start.elapsed().as_secs_f64()
        );
    })?;
    save_checkpoint(&state, &ckpt)?;
    let acc = evaluate(&state, &data.test)?;
    println!("{acc}");
    Ok(())
}

fn cmd_train(common: &Common, resume: bool) -> Result<()> {
    let precision = if resume {
        checkpoint_precision(common.checkpoint()?)?
    } else {
        common.config()?.precision
    };
    match precision {
        Precision::F32 => train_with::<f32>(common, resume),
        Precision::F64 => train_with::<f64>(common, resume),
    }
}

fn eval_with<T: Scalar>(common: &Common) -> Result<()> {
    let state: TrainState<T> = load_checkpoint(common.checkpoint()?)?;
    let test = load_test_set(&state.config, common.data.as_deref())?;
    if test.class_names != state.class_names {
        return Err(Error::Dataset(format!(
            "dataset classes {:?} differ from checkpoint classes {:?}",
            test.class_names, state.class_names
        )));
    }
    let acc = evaluate(&state, &EvalSet::new(&test, state.config.input_size)?)?;
    println!("{acc}");
    Ok(())
}

fn cmd_eval(common: &Common) -> Result<()> {
    match checkpoint_precision(common.checkpoint()?)? {
        Precision::F32 => eval_with::<f32>(common),
        Precision::F64 => eval_with::<f64>(common),
    }
}

fn cmd_ablate(common: &Common, lambdas: &[f64]) -> Result<()> {
    let cfg = common.config()?;
    let out = common.out("ablation")?;
    let seeds = if common.seed.is_empty() {
        vec![cfg.seed]
    } else {
        common.seed.clone()
    };
    let data = common.data.clone();
    let report = run_ablation(
        &cfg,
        &seeds,
        lambdas,
        |c| load_train_data(c, data.as_deref()),
        |row| eprintln!("{:<22} seed {:<4} accuracy {:.4} ({:.0}s)", row.name, row.seed, row.accuracy, row.seconds),
    )?;
    report.write(&out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn heatmaps_for<T: Scalar>(path: &Path, tag: &str, images: &[Dataset], out: &Path, ext: &str) -> Result<usize> {
    let state: TrainState<T> = load_checkpoint(path)?;
    let mut written = 0;
    for img in images.iter().flat_map(|d| d.images.iter()) {
        let view = transform_eval(img)?;
        let cam = grad_cam(&state, &view, img.label)?;
        render_heatmap(&cam, &view, &out.join(format!("{}_{tag}.{ext}", img.id)))?;
        written += 1;
    }
    Ok(written)
}

fn heatmaps(path: &Path, tag: &str, images: &[Dataset], out: &Path, ext: &str) -> Result<usize> {
    match checkpoint_precision(path)? {
        Precision::F32 => heatmaps_for::<f32>(path, tag, images, out, ext),
        Precision::F64 => heatmaps_for::<f64>(path, tag, images, out, ext),
    }
}

fn cmd_visualize(common: &Common, baseline: Option<&Path>, count: usize, png: bool) -> Result<()> {
    let full = common.checkpoint()?;
    let cfg = match checkpoint_precision(full)? {
        Precision::F32 => load_checkpoint::<f32>(full)?.config,
        Precision::F64 => load_checkpoint::<f64>(full)?.config,
    };
    let out = common.out("heatmaps")?;
    let mut test = load_test_set(&cfg, common.data.as_deref())?;
    // spread the picks over the classes
    let stride = (test.len() / count.max(1)).max(1);
    test.images = test.images.into_iter().step_by(stride).take(count).collect();
    let ext = if png { "png" } else { "ppm" };
    let sets = [test];
    let mut n = heatmaps(full, "full", &sets, &out, ext)?;
    if let Some(base) = baseline {
        n += heatmaps(base, "base", &sets, &out, ext)?;
    }
    println!("wrote {n} heatmaps to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gendata(c) => cmd_gendata(c),
        Command::Train { common, resume } => cmd_train(common, *resume),
        Command::Eval(c) => cmd_eval(c),
        Command::Ablate { common, lambdas } => cmd_ablate(common, lambdas),
        Command::Visualize {
            common,
            baseline,
            count,
            png,
        } => cmd_visualize(common, baseline.as_deref(), *count, *png),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
