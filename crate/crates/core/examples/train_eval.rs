//! Trains a small model on generated data and reports retrieval metrics in
//! both search directions.
//!
//! `cargo run --release --example train_eval -- [epochs] [steps_per_epoch] [mft:0|1]`

use std::time::Instant;

use tmpa::evalkit::{evaluate, metrics_table, SearchMode};
use tmpa::trainer::{dataset_for, train, TrainConfig};

fn main() -> tmpa::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let mut cfg = TrainConfig::default();
    cfg.epochs = arg(0, 4);
    cfg.steps_per_epoch = arg(1, 8);
    cfg.enable_mft = arg(2, 1) == 1;
    let ds = dataset_for(&cfg)?;

    let t = Instant::now();
    let ck = train(&ds, &cfg, None)?;
    let steps = cfg.epochs * cfg.steps_per_epoch;
    println!(
        "trained {steps} steps in {:.1}s ({:.3}s/step)",
        t.elapsed().as_secs_f64(),
        t.elapsed().as_secs_f64() / steps.max(1) as f64
    );

    let t = Instant::now();
    let rows = vec![
        evaluate(&ck, &ds, SearchMode::VisibleToInfrared)?,
        evaluate(&ck, &ds, SearchMode::InfraredToVisible)?,
    ];
    println!("evaluated in {:.1}s", t.elapsed().as_secs_f64());
    print!("{}", metrics_table(&rows));
    Ok(())
}
