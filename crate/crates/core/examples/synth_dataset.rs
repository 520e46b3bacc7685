//! Generates the default two-modality dataset, prints its layout and writes
//! one visible/infrared pair per test identity as PPM files.
//!
//! `cargo run --release --example synth_dataset -- [out_dir]`

use std::path::PathBuf;

use tmpa::netpbm;
use tmpa::synthdata::{generate, Modality, Split, SynthSpec};

fn main() -> tmpa::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_preview".into()));
    let spec = SynthSpec::default();
    let ds = generate(&spec);
    for split in [Split::Train, Split::Test] {
        for m in [Modality::Visible, Modality::Infrared] {
            let n = ds.select(split, m).count();
            println!("{:<5} {:<8} {n:>4} images, {} identities", split.as_str(), m.as_str(), ds.identities(split).len());
        }
    }
    std::fs::create_dir_all(&out)?;
    for id in ds.identities(Split::Test) {
        for m in [Modality::Visible, Modality::Infrared] {
            let rec = ds
                .select(Split::Test, m)
                .find(|r| r.identity == id)
                .expect("every identity has images in both modalities");
            netpbm::write(&out.join(format!("id{id:03}_{}.ppm", m.as_str())), &rec.image)?;
        }
    }
    println!("wrote previews to {}", out.display());
    Ok(())
}
