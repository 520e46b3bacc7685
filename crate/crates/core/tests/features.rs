use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tmpa::mfe::{self, extract, mfe_loss, mss_from_distances, paired_identity_loss, FeatureBundle};
use tmpa::mft::{compose_specific, conv_branch, cross_attention, fuse_complete, project_qkv, transfer};
use tmpa::model::{is_transfer_param, Forward, ModelConfig, Params, EXTRACTORS};
use tmpa::objective::{total_loss, wrt_loss, LossWeights};
use tmpa::tensor::{grad_check, BnMode, Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ── extraction ────────────────────────────────────────────────────────

#[test]
fn extraction_shapes_at_desk_scale() {
    let mut params = Params::init(&ModelConfig::default(), 3);
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &mut params, BnMode::Train);
    let mut r = rng(1);
    let xs = fwd.tape.constant(Tensor::uniform(&[16, 3, 48, 24], 0.0, 1.0, &mut r));
    let xv = fwd.tape.constant(Tensor::uniform(&[8, 3, 48, 24], 0.0, 1.0, &mut r));
    let xi = fwd.tape.constant(Tensor::uniform(&[8, 3, 48, 24], 0.0, 1.0, &mut r));
    let b = extract(&mut fwd, xs, xv, xi, &[0, 0, 1, 1, 2, 2, 3, 3]);
    assert_eq!(fwd.tape.shape(b.f_sh), &[16, 64, 6, 3]);
    assert_eq!(fwd.tape.shape(b.f_sp_v), &[8, 64, 6, 3]);
    assert_eq!(fwd.tape.shape(b.f_sp_i), &[8, 64, 6, 3]);
    let sp = fwd.tape.value(b.f_sp).data().to_vec();
    let half = sp.len() / 2;
    assert_eq!(&sp[..half], fwd.tape.value(b.f_sp_v).data());
    assert_eq!(&sp[half..], fwd.tape.value(b.f_sp_i).data());
}

#[test]
#[should_panic(expected = "contract violation")]
fn extraction_rejects_misaligned_batches() {
    let mut params = Params::init(&ModelConfig::default(), 3);
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &mut params, BnMode::Train);
    let xs = fwd.tape.constant(Tensor::zeros(&[4, 3, 48, 24]));
    let xv = fwd.tape.constant(Tensor::zeros(&[2, 3, 48, 24]));
    let xi = fwd.tape.constant(Tensor::zeros(&[3, 3, 48, 24]));
    extract(&mut fwd, xs, xv, xi, &[0, 1]);
}

#[test]
fn zero_weight_extractor_outputs_zero() {
    let mut params = Params::init(&ModelConfig::default(), 3);
    for (name, t) in params.tensors.iter_mut() {
        if name.starts_with("esh.") && (name.ends_with(".conv") || name.ends_with(".beta")) {
            *t = Tensor::zeros(t.shape());
        }
    }
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &mut params, BnMode::Eval);
    let x = fwd.tape.constant(Tensor::uniform(&[2, 3, 48, 24], -1.0, 1.0, &mut rng(2)));
    let f = mfe::extractor(&mut fwd, "esh", x);
    assert!(fwd.tape.value(f).data().iter().all(|&v| v == 0.0));
}

#[test]
fn extractor_parameters_are_disjoint() {
    let params = Params::init(&ModelConfig::default(), 0);
    for (i, a) in EXTRACTORS.iter().enumerate() {
        let mine: Vec<&String> = params.tensors.keys().filter(|k| k.starts_with(&format!("{a}."))).collect();
        assert_eq!(mine.len(), 9, "{a}");
        for b in &EXTRACTORS[i + 1..] {
            assert!(!mine.iter().any(|k| k.starts_with(&format!("{b}."))));
        }
    }
    // Independent draws: no two stacks start from the same weights.
    assert_ne!(params.get("esh.b0.conv"), params.get("espv.b0.conv"));
    assert_ne!(params.get("espv.b0.conv"), params.get("espi.b0.conv"));
}

// ── MSS / MSI / MFE ───────────────────────────────────────────────────

fn identical_bundle(tape: &mut Tape, ids: usize) -> FeatureBundle {
    let f = Tensor::full(&[ids, 4, 2, 2], 0.3);
    let f2 = Tensor::full(&[2 * ids, 4, 2, 2], 0.3);
    let f_sp_v = tape.leaf(&f);
    let f_sp_i = tape.leaf(&f);
    let f_sh = tape.leaf(&f2);
    let f_sp = tape.concat_batch(&[f_sp_v, f_sp_i]);
    FeatureBundle {
        f_sh,
        f_sp_v,
        f_sp_i,
        f_sp,
        labels: (0..ids).collect(),
    }
}

#[test]
fn mss_identical_features_is_ids_times_rho() {
    let mut params = Params::init(&ModelConfig::default(), 0);
    let mut tape = Tape::new();
    let b = identical_bundle(&mut tape, 8);
    let mut fwd = Forward::new(&mut tape, &mut params, BnMode::Train);
    let l = mfe::mss_loss(&mut fwd, &b, 0.65);
    assert!(close(fwd.tape.value(l).item(), 5.2, 1e-9));
}

#[test]
fn mss_hand_hinge_and_saturation() {
    let mut t = Tape::new();
    let d_sp = t.constant(Tensor::new(&[1], vec![0.2]));
    let d_ss = t.constant(Tensor::new(&[2], vec![0.3, 0.3]));
    let l = mss_from_distances(&mut t, d_sp, d_ss, &[4], 0.65);
    assert!(close(t.value(l).item(), 0.15, 1e-12));

    let d_sp = t.param(&Tensor::new(&[2], vec![0.5, 0.1]));
    let d_ss = t.param(&Tensor::new(&[4], vec![0.3, 0.05, 0.3, 0.05]));
    let l = mss_from_distances(&mut t, d_sp, d_ss, &[0, 1], 0.65);
    // Identity 0 is saturated (0.8 >= 0.65); identity 1 contributes 0.5.
    assert!(close(t.value(l).item(), 0.5, 1e-12));
    t.backward(l);
    assert_eq!(t.grad(d_sp).unwrap()[0], 0.0);
    assert!(t.grad(d_sp).unwrap()[1] < 0.0);
}

#[test]
fn mss_decreases_when_specific_features_separate() {
    let mut r = rng(5);
    let f_v = Tensor::randn(&[2, 3, 1, 1], 0.05, &mut r);
    let u = Tensor::randn(&[2, 3, 1, 1], 1.0, &mut r);
    let sh = Tensor::randn(&[4, 3, 1, 1], 0.05, &mut r);
    // f_sp_i = f_sp_v + s u, so d_sp grows linearly in s.
    let loss_and_grad = |s: f64| {
        let mut tape = Tape::new();
        let mut fi = f_v.clone();
        for (x, d) in fi.data_mut().iter_mut().zip(u.data()) {
            *x += s * d;
        }
        let f_sp_v = tape.constant(f_v.clone());
        let f_sp_i = tape.param(&fi);
        let f_sh = tape.constant(sh.clone());
        let f_sp = tape.concat_batch(&[f_sp_v, f_sp_i]);
        let b = FeatureBundle {
            f_sh,
            f_sp_v,
            f_sp_i,
            f_sp,
            labels: vec![0, 1],
        };
        let mut params = Params::init(&ModelConfig::default(), 0);
        let mut fwd = Forward::new(&mut tape, &mut params, BnMode::Train);
        let l = mfe::mss_loss(&mut fwd, &b, 10.0);
        let v = tape.value(l).item();
        tape.backward(l);
        let dir: f64 = tape.grad(f_sp_i).unwrap().iter().zip(u.data()).map(|(g, d)| g * d).sum();
        (v, dir)
    };
    let s = 0.3;
    let h = 1e-5;
    let (l0, analytic) = loss_and_grad(s);
    let numeric = (loss_and_grad(s + h).0 - loss_and_grad(s - h).0) / (2.0 * h);
    assert!(l0 > 0.0, "hinge must be active");
    assert!(numeric < 0.0 && analytic < 0.0);
    assert!(close(analytic, numeric, 1e-6 * analytic.abs().max(1.0)));
    assert!(loss_and_grad(s + 0.1).0 < l0);
}

proptest! {
    #[test]
    fn mss_is_bounded(
        d in proptest::collection::vec(0.0f64..2.0, 12),
        rho in 0.0f64..2.0,
    ) {
        let mut t = Tape::new();
        let d_sp = t.constant(Tensor::new(&[4], d[..4].to_vec()));
        let d_ss = t.constant(Tensor::new(&[8], d[4..].to_vec()));
        let labels = [0, 1, 0, 2];
        let l = mss_from_distances(&mut t, d_sp, d_ss, &labels, rho);
        let v = t.value(l).item();
        prop_assert!(v >= 0.0 && v <= 3.0 * rho + 1e-12);
    }
}

fn logits(t: &mut Tape, rows: &[[f64; 2]]) -> Var {
    t.constant(Tensor::new(&[rows.len(), 2], rows.concat()))
}

#[test]
fn msi_closed_forms() {
    let mut t = Tape::new();
    let u = t.constant(Tensor::zeros(&[4, 8]));
    let l = paired_identity_loss(&mut t, u, u, &[0, 3, 5, 7]);
    assert!(close(t.value(l).item(), 2.0 * 8f64.ln(), 1e-9));

    // Both rows put probability 3/4 on the true class.
    let l3 = 3f64.ln();
    let lv = logits(&mut t, &[[0.0, l3]]);
    let li = logits(&mut t, &[[l3, 0.0]]);
    let ce_v = t.cross_entropy(lv, &[1]);
    let ce_i = t.cross_entropy(li, &[0]);
    let oracle = t.value(ce_v).item() + t.value(ce_i).item();
    assert!(close(oracle, 2.0 * -(0.75f64.ln()), 1e-12));
    assert!(close(oracle, 0.5754, 1e-4));
    // The paired loss shares one label per row; mirror the infrared logits.
    let li_mirror = logits(&mut t, &[[0.0, l3]]);
    let l = paired_identity_loss(&mut t, lv, li_mirror, &[1]);
    assert!(close(t.value(l).item(), oracle, 1e-12));
}

#[test]
fn mfe_combination() {
    let mut t = Tape::new();
    let msi = t.constant(Tensor::scalar(1.0));
    let mss = t.constant(Tensor::scalar(0.5));
    let zero = t.constant(Tensor::scalar(0.0));
    let a = mfe_loss(&mut t, msi, mss, 0.2);
    let b = mfe_loss(&mut t, msi, mss, 0.0);
    let c = mfe_loss(&mut t, msi, zero, 0.2);
    assert!(close(t.value(a).item(), 1.1, 1e-12));
    assert_eq!(t.value(b).item(), 1.0);
    assert_eq!(t.value(c).item(), 1.0);
}

// ── attention ─────────────────────────────────────────────────────────

/// Straightforward per-sample loops: weights, then weighted value sums.
fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let l = q.shape()[2] * q.shape()[3];
    let at = |t: &Tensor, s: usize, c: usize, p: usize| t.data()[(s * d + c) * l + p];
    let mut out = vec![0.0; n * d * l];
    for s in 0..n {
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|c| at(q, s, c, i) * at(k, s, c, j)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|x| x.exp()).sum();
            for c in 0..d {
                out[(s * d + c) * l + i] = (0..l).map(|j| scores[j].exp() / z * at(v, s, c, j)).sum();
            }
        }
    }
    out
}

fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let o = cross_attention(&mut t, q, k, v);
    t.value(o).clone()
}

#[test]
fn attention_matches_oracle() {
    let mut r = rng(7);
    for shape in [[1, 2, 2, 1], [2, 3, 2, 3], [3, 4, 6, 3]] {
        let q = Tensor::randn(&shape, 1.0, &mut r);
        let k = Tensor::randn(&shape, 1.0, &mut r);
        let v = Tensor::randn(&shape, 1.0, &mut r);
        let got = attend(&q, &k, &v);
        for (a, b) in got.data().iter().zip(attention_oracle(&q, &k, &v)) {
            assert!(close(*a, b, 1e-12), "{shape:?}");
        }
    }
}

#[test]
fn attention_two_position_enumeration() {
    // d = 1, L = 2: scores 0 and ln 3 give weights 1/4 and 3/4.
    let q = Tensor::new(&[1, 1, 2, 1], vec![1.0, 1.0]);
    let k = Tensor::new(&[1, 1, 2, 1], vec![0.0, 3f64.ln()]);
    let v = Tensor::new(&[1, 1, 2, 1], vec![4.0, 8.0]);
    let out = attend(&q, &k, &v);
    for &o in out.data() {
        assert!(close(o, 0.25 * 4.0 + 0.75 * 8.0, 1e-12));
    }
}

#[test]
fn identical_keys_average_the_values() {
    let mut r = rng(8);
    let q = Tensor::randn(&[1, 2, 3, 1], 1.0, &mut r);
    let k = Tensor::new(&[1, 2, 3, 1], vec![0.4, 0.4, 0.4, -1.0, -1.0, -1.0]);
    let v = Tensor::randn(&[1, 2, 3, 1], 1.0, &mut r);
    let out = attend(&q, &k, &v);
    for c in 0..2 {
        let mean = v.data()[c * 3..c * 3 + 3].iter().sum::<f64>() / 3.0;
        for p in 0..3 {
            assert!(close(out.data()[c * 3 + p], mean, 1e-12));
        }
    }
}

proptest! {
    #[test]
    fn attention_outputs_stay_within_value_range(seed in 0u64..500) {
        let mut r = rng(seed);
        let q = Tensor::randn(&[1, 3, 2, 2], 2.0, &mut r);
        let k = Tensor::randn(&[1, 3, 2, 2], 2.0, &mut r);
        let v = Tensor::randn(&[1, 3, 2, 2], 1.0, &mut r);
        let out = attend(&q, &k, &v);
        for c in 0..3 {
            let row = &v.data()[c * 4..c * 4 + 4];
            let (lo, hi) = row.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            for &o in &out.data()[c * 4..c * 4 + 4] {
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }
}

#[test]
#[should_panic(expected = "contract violation")]
fn attention_rejects_shape_mismatch() {
    let q = Tensor::zeros(&[1, 2, 2, 2]);
    let k = Tensor::zeros(&[1, 2, 2, 1]);
    attend(&q, &k, &q);
}

#[test]
fn projection_to_narrower_width_and_identity_kernel() {
    let mut t = Tape::new();
    let mut r = rng(9);
    let f = t.constant(Tensor::randn(&[8, 64, 6, 3], 1.0, &mut r));
    let w = t.constant(Tensor::randn(&[32, 64, 1, 1], 0.1, &mut r));
    let q = t.conv2d(f, w, 1, 0);
    assert_eq!(t.shape(q), &[8, 32, 6, 3]);

    let mut eye = Tensor::zeros(&[4, 4, 1, 1]);
    for c in 0..4 {
        eye.data_mut()[c * 4 + c] = 1.0;
    }
    let x = t.constant(Tensor::randn(&[2, 4, 3, 2], 1.0, &mut r));
    let e = t.constant(eye);
    let y = t.conv2d(x, e, 1, 0);
    assert_eq!(t.value(y), t.value(x));
}

/// Bundle of random features at desk-model channel width.
fn random_bundle(fwd: &mut Forward, n: usize, seed: u64) -> FeatureBundle {
    let mut r = rng(seed);
    let c = 64;
    let f_sp_v = fwd.tape.leaf(&Tensor::randn(&[n, c, 2, 2], 1.0, &mut r));
    let f_sp_i = fwd.tape.leaf(&Tensor::randn(&[n, c, 2, 2], 1.0, &mut r));
    let f_sh = fwd.tape.leaf(&Tensor::randn(&[2 * n, c, 2, 2], 1.0, &mut r));
    let f_sp = fwd.tape.concat_batch(&[f_sp_v, f_sp_i]);
    FeatureBundle {
        f_sh,
        f_sp_v,
        f_sp_i,
        f_sp,
        labels: (0..n).collect(),
    }
}

#[test]
fn projections_are_computed_once_and_reused() {
    let mut params = Params::init(&ModelConfig::default(), 1);
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &mut params, BnMode::Train);
    let b = random_bundle(&mut fwd, 2, 3);
    let p = project_qkv(&mut fwd, &b);
    assert_eq!(fwd.tape.count_ops("conv2d"), 4);
    let _att = transfer(fwd.tape, &p);
    let _conv = tmpa::mft::conv_branches(&mut fwd, &p);
    // Four 1x1 projections, then two 3x3 convs per branch and none
    // repeated for the attention path.
    assert_eq!(fwd.tape.count_ops("conv2d"), 4 + 6);
    // Queries feed attention and a conv branch; the shared value map feeds
    // both attention halves (via slices) and the shared conv branch.
    assert_eq!(fwd.tape.consumers(p.q_v), 2);
    assert_eq!(fwd.tape.consumers(p.q_i), 2);
    assert_eq!(fwd.tape.consumers(p.v_sh), 3);
    assert_eq!(fwd.tape.consumers(p.k_sh), 2);
}

#[test]
fn transfer_is_symmetric_under_modality_swap() {
    let mut r = rng(11);
    let qv = Tensor::randn(&[2, 4, 2, 2], 1.0, &mut r);
    let qi = Tensor::randn(&[2, 4, 2, 2], 1.0, &mut r);
    let k = Tensor::randn(&[4, 4, 2, 2], 1.0, &mut r);
    let v = Tensor::randn(&[4, 4, 2, 2], 1.0, &mut r);
    let swap = |t: &Tensor| Tensor::stack_outer(&[&t.slice_outer(2, 2), &t.slice_outer(0, 2)]);
    let run = |qv: &Tensor, qi: &Tensor, k: &Tensor, v: &Tensor| {
        let mut t = Tape::new();
        let k_sh = t.constant(k.clone());
        let v_sh = t.constant(v.clone());
        let p = tmpa::mft::Projections {
            q_v: t.constant(qv.clone()),
            q_i: t.constant(qi.clone()),
            k_sh,
            v_sh,
            k_v: t.slice_batch(k_sh, 0, 2),
            k_i: t.slice_batch(k_sh, 2, 2),
            v_v: t.slice_batch(v_sh, 0, 2),
            v_i: t.slice_batch(v_sh, 2, 2),
        };
        let a = transfer(&mut t, &p);
        (t.value(a.f_ca_v).clone(), t.value(a.f_ca_i).clone())
    };
    let (av, ai) = run(&qv, &qi, &k, &v);
    let (bv, bi) = run(&qi, &qv, &swap(&k), &swap(&v));
    assert_eq!(av, bi);
    assert_eq!(ai, bv);

    let (zv, zi) = run(&qv, &qi, &k, &Tensor::zeros(&[4, 4, 2, 2]));
    assert!(zv.data().iter().chain(zi.data()).all(|&x| x == 0.0));
}

#[test]
fn conv_branches_preserve_spatial_dims() {
    let mut params = Params::init(&ModelConfig::default(), 1);
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &mut params, BnMode::Train);
    let b = random_bundle(&mut fwd, 2, 4);
    let p = project_qkv(&mut fwd, &b);
    let conv = tmpa::mft::conv_branches(&mut fwd, &p);
    assert_eq!(fwd.tape.shape(conv.f_conv_v), &[2, 64, 2, 2]);
    assert_eq!(fwd.tape.shape(conv.f_conv_i), &[2, 64, 2, 2]);
    assert_eq!(fwd.tape.shape(conv.f_conv_sh), &[4, 128, 2, 2]);
    let x = fwd.tape.constant(Tensor::zeros(&[8, 64, 6, 3]));
    let y = conv_branch(&mut fwd, "convv", x);
    assert_eq!(fwd.tape.shape(y), &[8, 64, 6, 3]);
}

#[test]
fn composition_and_fusion_match_elementwise_oracle() {
    let mut r = rng(12);
    let mk = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, r);
    let (ca_v, ca_i, cv, ci) = (
        mk(&[2, 4, 2, 2], &mut r),
        mk(&[2, 4, 2, 2], &mut r),
        mk(&[2, 4, 2, 2], &mut r),
        mk(&[2, 4, 2, 2], &mut r),
    );
    let (sp_v, sp_i, sh) = (mk(&[2, 4, 2, 2], &mut r), mk(&[2, 4, 2, 2], &mut r), mk(&[4, 8, 2, 2], &mut r));
    let mut t = Tape::new();
    let att = tmpa::mft::AttentionOutput {
        f_ca_v: t.constant(ca_v.clone()),
        f_ca_i: t.constant(ca_i.clone()),
    };
    let (cvv, civ) = (t.constant(cv.clone()), t.constant(ci.clone()));
    let (gv, gi) = compose_specific(&mut t, &att, cvv, civ);
    for (i, &g) in t.value(gv).data().iter().enumerate() {
        assert!(close(g, ca_v.data()[i] + cv.data()[i], 1e-12));
    }
    let (spv, spi, shv) = (t.constant(sp_v.clone()), t.constant(sp_i.clone()), t.constant(sh.clone()));
    let (l2, l3) = (0.3, 0.7);
    let fc = fuse_complete(&mut t, spv, spi, gv, gi, shv, l2, l3);
    let fc = t.value(fc).clone();
    let gvt = t.value(gv).clone();
    let git = t.value(gi).clone();
    assert_eq!(fc.shape(), &[4, 8, 2, 2]);
    for s in 0..4 {
        for c in 0..8 {
            for p in 0..4 {
                let (vis, ir, lam) = if s < 2 { (&sp_v, &git, l3) } else { (&gvt, &sp_i, l2) };
                let row = s % 2;
                let spec = if c < 4 {
                    vis.data()[(row * 4 + c) * 4 + p]
                } else {
                    ir.data()[(row * 4 + c - 4) * 4 + p]
                };
                let want = lam * spec + sh.data()[(s * 8 + c) * 4 + p];
                assert!(close(fc.data()[(s * 8 + c) * 4 + p], want, 1e-12));
            }
        }
    }
}

#[test]
fn mft_loss_gradient_check_on_micro_batch() {
    let mut r = rng(13);
    let (n, c, classes) = (2, 3, 2);
    let inputs = vec![
        Tensor::randn(&[n, c, 2, 1], 1.0, &mut r),
        Tensor::randn(&[n, c, 2, 1], 1.0, &mut r),
        Tensor::randn(&[2 * n, c, 2, 1], 1.0, &mut r),
        Tensor::randn(&[2 * n, c, 2, 1], 1.0, &mut r),
        Tensor::randn(&[c, classes], 1.0, &mut r),
        Tensor::randn(&[c, classes], 1.0, &mut r),
    ];
    let report = grad_check(
        |t, v| {
            let p = tmpa::mft::Projections {
                q_v: v[0],
                q_i: v[1],
                k_sh: v[2],
                v_sh: v[3],
                k_v: t.slice_batch(v[2], 0, n),
                k_i: t.slice_batch(v[2], n, n),
                v_v: t.slice_batch(v[3], 0, n),
                v_i: t.slice_batch(v[3], n, n),
            };
            let a = transfer(t, &p);
            let (gv, gi) = compose_specific(t, &a, v[0], v[1]);
            let pv = t.global_avg_pool(gv);
            let pi = t.global_avg_pool(gi);
            let lv = t.matmul(pv, v[4]);
            let li = t.matmul(pi, v[5]);
            paired_identity_loss(t, lv, li, &[0, 1])
        },
        &inputs,
        1e-5,
        1e-4,
    );
    assert!(report.passed, "{report:?}");
}

// ── task losses ───────────────────────────────────────────────────────

#[test]
fn id_loss_closed_forms() {
    let mut t = Tape::new();
    let u = t.constant(Tensor::zeros(&[6, 8]));
    let l = t.cross_entropy(u, &[0, 1, 2, 3, 4, 5]);
    assert!(close(t.value(l).item(), 8f64.ln(), 1e-9));
    let l3 = 3f64.ln();
    let lg = logits(&mut t, &[[0.0, l3], [l3, 0.0]]);
    let l = t.cross_entropy(lg, &[1, 0]);
    assert!(close(t.value(l).item(), -(0.75f64.ln()), 1e-12));
}

fn dist_matrix(t: &mut Tape, n: usize, f: impl Fn(usize, usize) -> f64) -> Var {
    let data = (0..n * n).map(|e| if e / n == e % n { 0.0 } else { f(e / n, e % n) }).collect();
    t.constant(Tensor::new(&[n, n], data))
}

#[test]
fn wrt_closed_forms() {
    let mut t = Tape::new();
    let labels = [0, 0, 1, 1, 2, 2];
    let d = dist_matrix(&mut t, 6, |_, _| 1.7);
    let l = t.weighted_triplet(d, &labels);
    assert!(close(t.value(l).item(), 2f64.ln(), 1e-9));

    let lab4 = [0, 0, 1, 1];
    let d = dist_matrix(&mut t, 4, |i, j| if lab4[i] == lab4[j] { 1.0 } else { 2.0 });
    let l = t.weighted_triplet(d, &lab4);
    assert!(close(t.value(l).item(), (1.0 + (-1f64).exp()).ln(), 1e-12));
    assert!(close(t.value(l).item(), 0.3133, 1e-4));

    let d = dist_matrix(&mut t, 4, |i, j| if lab4[i] == lab4[j] { 0.0 } else { 50.0 });
    let l = t.weighted_triplet(d, &lab4);
    assert!(t.value(l).item() < 1e-20);
}

#[test]
#[should_panic(expected = "contract violation")]
fn wrt_rejects_anchor_without_positive() {
    let mut t = Tape::new();
    let d = dist_matrix(&mut t, 3, |_, _| 1.0);
    t.weighted_triplet(d, &[0, 0, 1]);
}

/// Softmax weights over one anchor's positives or negatives.
fn weights(ds: &[f64]) -> Vec<f64> {
    let z: f64 = ds.iter().map(|d| d.exp()).sum();
    ds.iter().map(|d| d.exp() / z).collect()
}

proptest! {
    #[test]
    fn wrt_weights_sum_to_one_and_loss_is_nonnegative(seed in 0u64..300) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[6, 3], 1.0, &mut r);
        let labels = [0, 1, 2, 0, 1, 2];
        let mut t = Tape::new();
        let xv = t.constant(x);
        let d = t.pairwise_distance(xv);
        let dm = t.value(d).clone();
        let l = wrt_loss(&mut t, xv, &labels);
        prop_assert!(t.value(l).item() >= 0.0);
        for i in 0..6 {
            let pos: Vec<f64> = (0..6).filter(|&j| j != i && labels[j] == labels[i]).map(|j| dm.at(&[i, j])).collect();
            let neg: Vec<f64> = (0..6).filter(|&j| labels[j] != labels[i]).map(|j| dm.at(&[i, j])).collect();
            prop_assert!(close(weights(&pos).iter().sum::<f64>(), 1.0, 1e-9));
            prop_assert!(close(weights(&neg).iter().sum::<f64>(), 1.0, 1e-9));
        }
    }

    #[test]
    fn wrt_is_invariant_under_partition_preserving_permutation(seed in 0u64..300) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[6, 3], 1.0, &mut r);
        let labels = [0, 0, 1, 1, 2, 2];
        let perm = [4, 2, 5, 0, 3, 1];
        // Relabel identities 0->2, 1->0, 2->1 and reorder rows.
        let relabel = [2, 0, 1];
        let px = Tensor::new(&[6, 3], perm.iter().flat_map(|&p| x.data()[p * 3..p * 3 + 3].to_vec()).collect());
        let plab: Vec<usize> = perm.iter().map(|&p| relabel[labels[p]]).collect();
        let mut t = Tape::new();
        let (a, b) = (t.constant(x), t.constant(px));
        let la = wrt_loss(&mut t, a, &labels);
        let lb = wrt_loss(&mut t, b, &plab);
        prop_assert!(close(t.value(la).item(), t.value(lb).item(), 1e-12));
    }
}

#[test]
fn total_loss_is_linear_in_each_component() {
    let w = LossWeights::default();
    let base = [1.0, 0.5, 2.0, 1.0];
    let eval = |v: [f64; 4]| {
        let mut t = Tape::new();
        let c: Vec<Var> = v.iter().map(|&x| t.constant(Tensor::scalar(x))).collect();
        let l = total_loss(&mut t, c[0], c[1], Some(c[2]), Some(c[3]), &w);
        t.value(l).item()
    };
    assert!(close(eval(base), 2.4, 1e-12));
    let coef = [w.alpha, w.alpha, w.beta, w.beta];
    for k in 0..4 {
        let (mut up, mut dn) = (base, base);
        up[k] += 1e-3;
        dn[k] -= 1e-3;
        let slope = (eval(up) - eval(dn)) / 2e-3;
        assert!(close(slope, coef[k], 1e-9), "component {k}: {slope}");
    }
}

#[test]
fn transfer_parameters_are_named_consistently() {
    let params = Params::init(&ModelConfig::default(), 0);
    let transfer: Vec<&String> = params.tensors.keys().filter(|k| is_transfer_param(k)).collect();
    assert!(transfer.iter().any(|k| k.starts_with("proj.k")));
    assert!(!is_transfer_param("proj.v"));
    assert!(!is_transfer_param("convsh.b0.conv"));
    assert!(!is_transfer_param("cls.fc.w"));
    assert!(!is_transfer_param("esh.b0.conv"));
}
