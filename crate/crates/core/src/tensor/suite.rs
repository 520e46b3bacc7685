//! Finite-difference checks of every differentiable primitive on small
//! random inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, BnMode, GradCheckReport, RunningStats, Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fixed random weights turning a tensor output into a scalar.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let p = tape.mul(y, w);
    tape.sum(p)
}

/// Runs each named check and returns its report.
pub fn primitive_suite(h: f64, tol: f64) -> Vec<(&'static str, GradCheckReport)> {
    let mut out = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]| {
        out.push((name, grad_check(f, inputs, h, tol)));
    };
    let mut r = rng(10);

    let x = Tensor::randn(&[3, 4], 1.0, &mut r);
    run(
        "softmax+cross_entropy",
        &|t, v| {
            let s = t.softmax(v[0]);
            let s = t.scale(s, 5.0);
            t.cross_entropy(s, &[0, 3, 1])
        },
        &[x],
    );

    let x = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut r);
    let k = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut r);
    run(
        "conv2d stride 1",
        &|t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1);
            weighted_sum(t, y, 1)
        },
        &[x, k],
    );
    let x = Tensor::randn(&[2, 2, 6, 4], 1.0, &mut r);
    let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
    run(
        "conv2d stride 2",
        &|t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1);
            weighted_sum(t, y, 2)
        },
        &[x, k],
    );

    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    run(
        "matmul",
        &|t, v| {
            let y = t.matmul(v[0], v[1]);
            weighted_sum(t, y, 3)
        },
        &[a, b],
    );
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[2, 3, 5], 1.0, &mut r);
    run(
        "transpose+bmm",
        &|t, v| {
            let at = t.transpose(v[0]);
            let y = t.bmm(at, v[1]);
            weighted_sum(t, y, 4)
        },
        &[a, b],
    );

    let x = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut r);
    let g = Tensor::uniform(&[2], 0.5, 1.5, &mut r);
    let b = Tensor::randn(&[2], 1.0, &mut r);
    for (name, mode) in [("batch_norm train", BnMode::Train), ("batch_norm eval", BnMode::Eval)] {
        run(
            name,
            &|t, v| {
                let mut stats = RunningStats::new(2);
                stats.var = vec![0.7, 1.3];
                let y = t.batch_norm(v[0], v[1], v[2], mode, &mut stats);
                weighted_sum(t, y, 5)
            },
            &[x.clone(), g.clone(), b.clone()],
        );
    }

    let a = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
    let b = Tensor::randn(&[2, 1, 2, 2], 1.0, &mut r);
    let c = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
    let bias = Tensor::randn(&[4], 1.0, &mut r);
    run(
        "elementwise, concat, slice, pool, bias, reshape, mean",
        &|t, v| {
            let cat = t.concat_channels(&[v[0], v[1]]);
            let bb = t.concat_batch(&[v[1], v[1]]);
            let s = t.slice_batch(bb, 1, 2);
            let cat2 = t.concat_channels(&[v[2], s]);
            let m = t.mul(cat, cat2);
            let d = t.sub(m, cat2);
            let d = t.add(d, cat);
            let d = t.scale(d, 0.3);
            let d = t.shift(d, 0.1);
            let d = t.relu(d);
            let p = t.global_avg_pool(d);
            let p = t.add_bias(p, v[3]);
            let p = t.reshape(p, &[8]);
            let total = weighted_sum(t, p, 6);
            let mean = t.mean(v[0]);
            t.add(total, mean)
        },
        &[a, b, c, bias],
    );

    let x = Tensor::randn(&[6, 3], 1.0, &mut r);
    let y = Tensor::randn(&[6, 3], 1.0, &mut r);
    run(
        "l2_distance, group_mean, hinge, pairwise_distance, weighted_triplet",
        &|t, v| {
            let d = t.l2_distance(v[0], v[1]);
            let gm = t.group_mean(d, &[0, 1, 0, 2, 1, 2], 3);
            let h = t.hinge(gm, 3.0);
            let h = t.sum(h);
            let pd = t.pairwise_distance(v[0]);
            let w = t.weighted_triplet(pd, &[0, 0, 1, 1, 2, 2]);
            t.add(h, w)
        },
        &[x, y],
    );
    out
}
