//! The cross attention used for feature transfer on a toy map: two spatial
//! positions, one query aligned with the first key.

use tmpa::mft::cross_attention;
use tmpa::tensor::{Tape, Tensor};

fn main() {
    let mut tape = Tape::new();
    // [N=1, d=1, H=1, W=2]
    let q = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![3.0, 0.0]));
    let k = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, -1.0]));
    let v = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![10.0, 20.0]));
    let out = cross_attention(&mut tape, q, k, v);
    let w = 1.0 / (1.0 + (-6.0f64).exp());
    println!("attended values {:?}", tape.value(out).data());
    println!("position 0 by hand {:.6}", w * 10.0 + (1.0 - w) * 20.0);
}
