//! Short training runs over the central mix ratio.
//!
//! `cargo run --release --example sweep -- [epochs]`

use tmpa::evalkit::{evaluate_split, SearchMode};
use tmpa::trainer::{dataset_for, train, TrainConfig};

fn main() -> tmpa::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    println!("{:>6} {:>8} {:>8}", "a_c", "i2v R1", "i2v mAP");
    for a_c in ["0.55", "0.65", "0.75", "0.85"] {
        let mut cfg = TrainConfig::default();
        cfg.epochs = epochs;
        cfg.set("mix.ladder", a_c)?;
        let ds = dataset_for(&cfg)?;
        let ck = train(&ds, &cfg, None)?;
        let m = evaluate_split(&ck.params, &cfg, &ds, SearchMode::InfraredToVisible)?;
        println!("{a_c:>6} {:>8.2} {:>8.2}", 100.0 * m.rank(1), 100.0 * m.map);
    }
    Ok(())
}
