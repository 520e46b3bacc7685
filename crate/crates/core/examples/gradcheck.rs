//! Finite-difference check of every differentiable primitive and of the
//! complete training objective on a micro model.
//!
//! `cargo run --release --example gradcheck`

use tmpa::pipeline::total_loss_gradcheck;
use tmpa::tensor::primitive_suite;

fn main() {
    let (h, tol) = (1e-5, 1e-4);
    let mut reports = primitive_suite(h, tol);
    reports.push(("total loss, full model", total_loss_gradcheck(1, true, h, tol)));
    reports.push(("total loss, baseline", total_loss_gradcheck(1, false, h, tol)));
    for (name, r) in &reports {
        let verdict = if r.passed { "ok " } else { "BAD" };
        println!("{verdict} {name:<48} max rel err {:.2e}", r.max_rel_error());
    }
}
