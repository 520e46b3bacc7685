//! Baseline, baseline + PedMix and the full model on generated data,
//! averaged over seeds.
//!
//! `cargo run --release --example ablation -- [seeds] [epochs]`

use std::time::Instant;

use tmpa::evalkit::{evaluate_split, SearchMode};
use tmpa::trainer::{dataset_for, train, TrainConfig};

fn main() -> tmpa::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(3);
    let epochs = args.get(1).and_then(|s| s.parse().ok());
    let variants = [("B", false, false), ("B+PedMix", true, false), ("B+PedMix+MFT", true, true)];
    let t0 = Instant::now();
    println!("{:<14} {:>5} {:>8} {:>8} {:>8} {:>8}", "config", "seed", "i2v R1", "i2v mAP", "v2i R1", "v2i mAP");
    for (name, pedmix, mft) in variants {
        let mut sum = [0.0; 4];
        for seed in 1..=seeds {
            let mut cfg = TrainConfig::default();
            cfg.seed = seed;
            cfg.enable_pedmix = pedmix;
            cfg.enable_mft = mft;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let ds = dataset_for(&cfg)?;
            let ck = train(&ds, &cfg, None)?;
            let i2v = evaluate_split(&ck.params, &cfg, &ds, SearchMode::InfraredToVisible)?;
            let v2i = evaluate_split(&ck.params, &cfg, &ds, SearchMode::VisibleToInfrared)?;
            let row = [i2v.rank(1), i2v.map, v2i.rank(1), v2i.map].map(|v| 100.0 * v);
            println!(
                "{name:<14} {seed:>5} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                row[0], row[1], row[2], row[3]
            );
            for (s, r) in sum.iter_mut().zip(row) {
                *s += r / seeds as f64;
            }
        }
        println!(
            "{name:<14} {:>5} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            "mean", sum[0], sum[1], sum[2], sum[3]
        );
    }
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}
