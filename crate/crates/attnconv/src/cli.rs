//! Command-line front end. Exit codes: 0 success, 1 failed check or
//! runtime error, 2 usage or configuration error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::activation::ActivationVariant;
use crate::complexity::{count_with, format_table, CostModel};
use crate::data::{generate_synthetic, load_dataset, Dataset, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, AttentionKind, ModelConfig, PositionMode};
use crate::train::{ablate, apply_variant, train, Schedule, TrainConfig};
use crate::verify::{equivalence_suite, gradient_suite, Check};

#[derive(Parser, Debug)]
#[command(name = "attnconv", version, about = "Attention as dynamic convolution: checks, counts and toy training")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare attention against its convolution form and related identities.
    VerifyEquivalence {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        c: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks for blocks and the toy model.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Toy-model parameter coordinates to probe.
        #[arg(long, default_value_t = 200)]
        coords: usize,
    },
    /// FLOPs, parameters and activations of a preset.
    Count {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        activation: Option<ActivationVariant>,
        #[arg(long)]
        pos: Option<PositionMode>,
        #[arg(long, value_enum)]
        attention: Option<Attention>,
        #[arg(long)]
        image_size: Option<usize>,
        /// Count 2 FLOPs per multiply-add and all elementwise work.
        #[arg(long)]
        analytic: bool,
        /// Print the full report with per-layer breakdown as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Train one model and print its epoch log as CSV.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Save the trained model to this directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train several variants on identical data and seed.
    Ablate {
        /// Comma-separated variants, e.g. softmax,scaling+relu,depthwise.
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        #[arg(long, default_value = "toy-vit")]
        preset: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a seeded synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Attention {
    Standard,
    Depthwise,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value = "toy-vit")]
    preset: String,
    /// Activation encoding or `depthwise`.
    #[arg(long, default_value = "softmax")]
    variant: String,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Training set; a seeded synthetic set is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    constant_lr: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    log: Option<PathBuf>,
}

impl RunArgs {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
            None => TrainConfig::default(),
        };
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.constant_lr {
            cfg.schedule = Schedule::Constant;
        }
        for w in cfg.warnings() {
            eprintln!("{w}");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn datasets(&self, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        let train_set = match &self.data {
            Some(p) => load_dataset(p)?,
            None => generate_synthetic(&SyntheticConfig::new(512, 1000 + seed), Split::Train)?,
        };
        let val_set = match (&self.val, &self.data) {
            (Some(p), _) => Some(load_dataset(p)?),
            (None, None) => Some(generate_synthetic(&SyntheticConfig::new(256, 2000 + seed), Split::Val)?),
            (None, Some(_)) => None,
        };
        Ok((train_set, val_set))
    }

    fn emit(&self, csv: &str) -> Result<()> {
        match &self.log {
            Some(p) => Ok(std::fs::write(p, csv)?),
            None => {
                print!("{csv}");
                Ok(())
            }
        }
    }
}

fn print_checks(checks: &[Check], unit: &str) -> bool {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in checks {
        let mark = if c.passed() { "ok" } else { "FAIL" };
        let tol = if c.tolerance == 0.0 { "exact".to_string() } else { format!("tol {:.0e}", c.tolerance) };
        println!("{:width$}  {unit} = {:.3e}  ({tol})  {mark}", c.name, c.value);
    }
    checks.iter().all(Check::passed)
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::VerifyEquivalence { n, c, heads, seed } => {
            let checks = equivalence_suite(n, c, heads, seed)?;
            let ok = print_checks(&checks, "max |Δ|");
            let tol = checks.iter().map(|c| c.tolerance).fold(0.0, f64::max);
            let worst = checks.iter().map(|c| c.value).fold(0.0, f64::max);
            if ok {
                println!("all {} checks passed: max |Δ| = {worst:.3e} < {tol:e}", checks.len());
            }
            Ok(if ok { 0 } else { 1 })
        }
        Command::GradCheck { seed, coords } => {
            let checks = gradient_suite(seed, coords)?;
            let ok = print_checks(&checks, "rel err");
            if ok {
                println!("all {} gradient checks passed", checks.len());
            }
            Ok(if ok { 0 } else { 1 })
        }
        Command::Count {
            preset,
            activation,
            pos,
            attention,
            image_size,
            analytic,
            json,
        } => {
            let mut cfg = ModelConfig::preset(&preset)?;
            if let Some(a) = activation {
                cfg = cfg.with_activation(a);
            }
            if let Some(p) = pos {
                cfg = cfg.with_position(p);
            }
            if let Some(a) = attention {
                cfg = cfg.with_attention(match a {
                    Attention::Standard => AttentionKind::Standard,
                    Attention::Depthwise => AttentionKind::Depthwise,
                });
            }
            let cost = if analytic { CostModel::ANALYTIC } else { CostModel::MAC };
            let size = image_size.unwrap_or(cfg.image_size);
            let report = count_with(&cfg, size, &cost)?;
            if json {
                println!("{}", report.to_json()?);
            } else {
                print!("{}", format_table(&[(cfg, report)]));
            }
            Ok(0)
        }
        Command::Train { model, run, checkpoint } => {
            let tc = run.train_config()?;
            let cfg = apply_variant(&ModelConfig::preset(&model.preset)?, &model.variant)?;
            let (train_set, val_set) = run.datasets(tc.seed)?;
            let mut m = build_model(&cfg, tc.seed)?;
            let log = train(&mut m, &train_set, val_set.as_ref(), &tc)?;
            run.emit(&log.to_csv())?;
            if let Some(dir) = checkpoint {
                m.save(dir)?;
            }
            Ok(0)
        }
        Command::Ablate { variants, preset, run } => {
            let tc = run.train_config()?;
            let base = ModelConfig::preset(&preset)?;
            let (train_set, val_set) = run.datasets(tc.seed)?;
            let names: Vec<&str> = variants.iter().map(String::as_str).collect();
            let bundle = ablate(&names, &base, &train_set, val_set.as_ref(), &tc)?;
            run.emit(&bundle.to_csv())?;
            Ok(0)
        }
        Command::GenData {
            out,
            samples,
            seed,
            image_size,
            classes,
            noise,
            split,
        } => {
            let mut sc = SyntheticConfig::new(samples, seed);
            sc.image_size = image_size;
            sc.num_classes = classes;
            if let Some(v) = noise {
                sc.noise = v;
            }
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let ds = generate_synthetic(&sc, split)?;
            ds.save(&out)?;
            println!("wrote {} images ({}x{}, {} classes) to {}", ds.len(), image_size, image_size, classes, out.display());
            Ok(0)
        }
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}
