//! Region layout and sampled masks of the patch mixer, drawn as text.
//!
//! `cargo run --example pedmix_preview -- [seed]`

use tmpa::pedmix::{partition_regions, sample_masks, MixRatios, PatchMask, Region, RegionMap, PHI1, PHI2};
use tmpa::rng::derive_rng;

fn draw(map: &RegionMap, cell: impl Fn(usize, usize) -> char) {
    for r in 0..map.grid_h {
        let row: String = (0..map.grid_w).map(|c| cell(r, c)).collect();
        println!("  {row}");
    }
}

fn main() -> tmpa::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let map = partition_regions(288, 144, 12, PHI1, PHI2)?;
    let ratios = MixRatios::default();
    println!("{}x{} grid", map.grid_h, map.grid_w);
    draw(&map, |r, c| match map.region_of(r, c) {
        Region::Center => 'C',
        Region::SubCenter => 'S',
        Region::Outer => 'O',
    });
    let mut rng = derive_rng(seed, &[]);
    let mask: PatchMask = sample_masks(&map, &ratios, &mut rng);
    println!("mask (# keeps the source modality, . takes the partner)");
    draw(&map, |r, c| if mask.keeps(r, c) { '#' } else { '.' });
    for g in Region::ALL {
        println!(
            "{g:?}: {} patches, ratio {:.2}, kept {}",
            map.count(g),
            ratios.get(g),
            mask.popcount_in(&map, g)
        );
    }
    Ok(())
}
