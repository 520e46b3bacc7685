//! CMC and mAP on a hand-made gallery.

use tmpa::evalkit::{cmc_map, metrics_table, EmbeddingSet};
use tmpa::synthdata::Modality;
use tmpa::tensor::Tensor;

fn main() -> tmpa::Result<()> {
    // Two infrared queries on a line; the gallery holds two images each of
    // identities 0 and 1.
    let query = EmbeddingSet::new(Tensor::new(&[2, 1], vec![0.0, 10.0]), vec![0, 1], vec![Modality::Infrared; 2])?;
    let gallery = EmbeddingSet::new(
        Tensor::new(&[4, 1], vec![1.0, 4.0, 2.0, 9.0]),
        vec![0, 0, 1, 1],
        vec![Modality::Visible; 4],
    )?;
    let m = cmc_map(&query, &gallery)?;
    println!("cmc {:?}", m.cmc);
    print!("{}", metrics_table(&[m]));
    Ok(())
}
