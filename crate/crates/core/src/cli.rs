//! Command-line front end: `gen-data`, `augment`, `train`, `eval`,
//! `gradcheck` and `sweep`.
//!
//! Settings resolve as defaults, then `--config FILE`, then `--set` and
//! `--seed`. Every command prints the resolved configuration first; fed
//! back through `--config` it reproduces the run.

use std::fs;
use std::io::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evalkit::{embed_with, evaluate_split, metrics_csv, metrics_table, threads_from_env, EmbeddingSet, SearchMode};
use crate::netpbm;
use crate::pedmix::{mix_pair, sample_masks, ImagePair};
use crate::pipeline::total_loss_gradcheck;
use crate::rng::derive_rng;
use crate::synthdata::{generate, Modality, Split};
use crate::tensor::primitive_suite;
use crate::trainer::{dataset_for, resume, Checkpoint, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "tmpa", version, about = "Visible-infrared re-identification on synthetic pedestrians")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N` (`data.seed` for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into --out.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Mix one visible/infrared pair and write images and masks to --out.
    Augment {
        #[command(flatten)]
        common: Common,
        /// Visible image (P6); defaults to a generated sample.
        #[arg(long, value_name = "PATH", requires = "infrared")]
        visible: Option<PathBuf>,
        /// Infrared image (P6); defaults to a generated sample.
        #[arg(long, value_name = "PATH", requires = "visible")]
        infrared: Option<PathBuf>,
    },
    /// Train, writing losses.csv and per-epoch checkpoints to --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// v2i or i2v; both when omitted.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Finite-difference checks of every primitive and of the full objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate once per value of one key; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        mode: Option<String>,
    },
}

fn resolve(base: TrainConfig, common: &Common, seed_key: &str) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    for item in &common.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        cfg.set(seed_key, &seed.to_string())?;
    }
    Ok(cfg)
}

fn print_config(cfg: &TrainConfig) {
    println!("# resolved config");
    print!("{}", cfg.to_text());
    println!("# end config");
}

fn out_dir(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --out DIR".into()))
}

fn modes(mode: &Option<String>) -> Result<Vec<SearchMode>> {
    match mode {
        Some(m) => Ok(vec![SearchMode::parse(m)?]),
        None => Ok(vec![SearchMode::VisibleToInfrared, SearchMode::InfraredToVisible]),
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = resolve(TrainConfig::default(), common, "data.seed")?;
    print_config(&cfg);
    cfg.data.validate(cfg.patch_size)?;
    let dir = out_dir(common)?;
    let ds = generate(&cfg.data);
    ds.save(dir)?;
    println!("wrote {} images to {}", ds.records.len(), dir.display());
    Ok(())
}

fn augment(common: &Common, visible: &Option<PathBuf>, infrared: &Option<PathBuf>) -> Result<()> {
    let cfg = resolve(TrainConfig::default(), common, "seed")?;
    print_config(&cfg);
    let dir = out_dir(common)?;
    let pair = match (visible, infrared) {
        (Some(v), Some(i)) => ImagePair {
            x_v: netpbm::read(v)?,
            x_i: netpbm::read(i)?,
            identity: 0,
        },
        _ => {
            let ds = dataset_for(&cfg)?;
            let pick = |m| {
                ds.select(Split::Train, m)
                    .next()
                    .expect("generated dataset has training images")
                    .image
                    .clone()
            };
            ImagePair {
                x_v: pick(Modality::Visible),
                x_i: pick(Modality::Infrared),
                identity: 0,
            }
        }
    };
    let (h, w) = (pair.x_v.shape()[1], pair.x_v.shape()[2]);
    let map = crate::pedmix::partition_regions(h, w, cfg.patch_size, cfg.phi1, cfg.phi2)?;
    let mut rng = derive_rng(cfg.seed, &[0x6175_676d]);
    let mask_v = sample_masks(&map, &cfg.ratios, &mut rng);
    let mask_i = sample_masks(&map, &cfg.ratios, &mut rng);
    let (mv, mi) = mix_pair(&pair, &mask_v, &mask_i, cfg.patch_size)?;
    fs::create_dir_all(dir)?;
    netpbm::write(&dir.join("visible.ppm"), &pair.x_v)?;
    netpbm::write(&dir.join("infrared.ppm"), &pair.x_i)?;
    netpbm::write(&dir.join("mixed_visible.ppm"), &mv)?;
    netpbm::write(&dir.join("mixed_infrared.ppm"), &mi)?;
    netpbm::write(&dir.join("mask_visible.pgm"), &netpbm::mask_image(&mask_v, cfg.patch_size))?;
    netpbm::write(&dir.join("mask_infrared.pgm"), &netpbm::mask_image(&mask_i, cfg.patch_size))?;
    println!("wrote mixed images and masks to {}", dir.display());
    Ok(())
}

fn train_cmd(common: &Common, checkpoint: &Option<PathBuf>) -> Result<()> {
    let from = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let base = match &from {
        Some(ck) => ck.train_config()?,
        None => TrainConfig::default(),
    };
    let cfg = resolve(base, common, "seed")?;
    print_config(&cfg);
    let dir = out_dir(common)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let ds = dataset_for(&cfg)?;
    let ck = resume(&ds, &cfg, from, Some(dir))?;
    ck.save(&dir.join("checkpoint.bin"))?;
    println!("trained to epoch {}; checkpoint at {}", ck.epoch, dir.join("checkpoint.bin").display());
    Ok(())
}

fn export_embeddings(dir: &Path, ck: &Checkpoint, cfg: &TrainConfig, ds: &crate::synthdata::SynthDataset) -> Result<()> {
    for m in [Modality::Visible, Modality::Infrared] {
        let (x, labels) = ds.stacked(Split::Test, m);
        let v = embed_with(&ck.params, cfg, &x, m, threads_from_env());
        let set = EmbeddingSet::new(v, labels.clone(), vec![m; labels.len()])?;
        fs::write(dir.join(format!("embeddings_{}.csv", m.as_str())), set.to_csv())?;
    }
    Ok(())
}

fn eval_cmd(common: &Common, checkpoint: &Path, mode: &Option<String>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = resolve(ck.train_config()?, common, "seed")?;
    print_config(&cfg);
    let ds = dataset_for(&cfg)?;
    let rows = modes(mode)?
        .into_iter()
        .map(|m| evaluate_split(&ck.params, &cfg, &ds, m))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", metrics_table(&rows));
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&rows))?;
        export_embeddings(dir, &ck, &cfg, &ds)?;
    }
    Ok(())
}

/// Returns whether every check passed.
fn gradcheck_cmd(common: &Common) -> Result<bool> {
    let cfg = resolve(TrainConfig::default(), common, "seed")?;
    print_config(&cfg);
    let (h, tol) = (1e-5, 1e-4);
    let mut ok = true;
    let mut line = |name: &str, passed: bool, err: f64| {
        ok &= passed;
        println!("{} {name} (max rel err {err:.2e})", if passed { "PASS" } else { "FAIL" });
    };
    for (name, r) in primitive_suite(h, tol) {
        line(name, r.passed, r.max_rel_error());
    }
    for mft in [true, false] {
        let r = total_loss_gradcheck(cfg.seed, mft, h, tol);
        let name = if mft { "L_Total, full model" } else { "L_Total, baseline" };
        line(name, r.passed, r.max_rel_error());
    }
    Ok(ok)
}

fn sweep(common: &Common, key: &str, values: &[String], mode: &Option<String>) -> Result<()> {
    let base = resolve(TrainConfig::default(), common, "seed")?;
    print_config(&base);
    let dir = out_dir(common)?;
    fs::create_dir_all(dir)?;
    let modes = modes(mode)?;
    let mut csv = String::from("key,value,mode,rank1,rank10,rank20,map\n");
    for value in values {
        let mut cfg = base.clone();
        cfg.set(key, value)?;
        let run_dir = dir.join(format!("{key}={value}"));
        fs::create_dir_all(&run_dir)?;
        fs::write(run_dir.join("config.txt"), cfg.to_text())?;
        let ds = dataset_for(&cfg)?;
        let ck = resume(&ds, &cfg, None, Some(&run_dir))?;
        for &m in &modes {
            let r = evaluate_split(&ck.params, &cfg, &ds, m)?;
            csv.push_str(&format!(
                "{key},{value},{},{},{},{},{}\n",
                m.as_str(),
                r.rank(1),
                r.rank(10),
                r.rank(20),
                r.map
            ));
            println!("{key}={value} {}: Rank-1 {:.2} mAP {:.2}", m.as_str(), 100.0 * r.rank(1), 100.0 * r.map);
        }
        fs::write(dir.join("sweep.csv"), &csv)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::GenData { common } => gen_data(common)?,
        Command::Augment {
            common,
            visible,
            infrared,
        } => augment(common, visible, infrared)?,
        Command::Train { common, checkpoint } => train_cmd(common, checkpoint)?,
        Command::Eval {
            common,
            checkpoint,
            mode,
        } => eval_cmd(common, checkpoint, mode)?,
        Command::Gradcheck { common } => {
            if !gradcheck_cmd(common)? {
                return Ok(EXIT_FAILURE);
            }
        }
        Command::Sweep {
            common,
            key,
            values,
            mode,
        } => sweep(common, key, values, mode)?,
    }
    Ok(EXIT_OK)
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to standard error.
pub fn run<I, S>(argv: I) -> i32
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
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| dispatch(cli)));
    let _ = std::io::stdout().flush();
    match outcome {
        Ok(Ok(code)) => code,
        Ok(Err(e @ Error::Config(_))) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
        // The panic hook has already reported the message.
        Err(_) => EXIT_FAILURE,
    }
}
