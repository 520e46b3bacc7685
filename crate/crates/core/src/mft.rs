//! Modality feature transfer.
//!
//! Four 1x1 projections are computed once per batch and feed two consumers:
//! a symmetric single-head cross attention that synthesizes the missing
//! modality's specific feature, and small convolution branches. The
//! synthesized features are concatenated with the real ones and added to the
//! shared branch to form the modality-complete representation.

use crate::mfe::{classify, paired_identity_loss, FeatureBundle};
use crate::model::Forward;
use crate::tensor::{Tape, Var};

/// Projected queries, keys and values. `k_sh`/`v_sh` are `[2N,d,H',W']`; the
/// `_v`/`_i` fields are their visible and infrared halves.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub q_v: Var,
    pub q_i: Var,
    pub k_sh: Var,
    pub v_sh: Var,
    pub k_v: Var,
    pub k_i: Var,
    pub v_v: Var,
    pub v_i: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub f_ca_v: Var,
    pub f_ca_i: Var,
}

/// Outputs of the three convolution branches.
#[derive(Clone, Copy, Debug)]
pub struct ConvOutputs {
    pub f_conv_v: Var,
    pub f_conv_i: Var,
    pub f_conv_sh: Var,
}

pub fn project(fwd: &mut Forward, name: &str, x: Var) -> Var {
    let w = fwd.param(name);
    fwd.tape.conv2d(x, w, 1, 0)
}

pub fn project_qkv(fwd: &mut Forward, bundle: &FeatureBundle) -> Projections {
    let n = bundle.n();
    let q_v = project(fwd, "proj.qv", bundle.f_sp_v);
    let q_i = project(fwd, "proj.qi", bundle.f_sp_i);
    let k_sh = project(fwd, "proj.k", bundle.f_sh);
    let v_sh = project(fwd, "proj.v", bundle.f_sh);
    let t = &mut *fwd.tape;
    Projections {
        q_v,
        q_i,
        k_sh,
        v_sh,
        k_v: t.slice_batch(k_sh, 0, n),
        k_i: t.slice_batch(k_sh, n, n),
        v_v: t.slice_batch(v_sh, 0, n),
        v_i: t.slice_batch(v_sh, n, n),
    }
}

/// Per-sample `softmax(q k^T / sqrt(d)) v` over the `L = H'W'` spatial
/// positions of one feature map.
pub fn cross_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Var {
    let shape = tape.shape(q).to_vec();
    assert!(
        shape.len() == 4 && tape.shape(k) == shape.as_slice() && tape.shape(v) == shape.as_slice(),
        "contract violation: attention shapes {:?} / {:?} / {:?}",
        shape,
        tape.shape(k),
        tape.shape(v)
    );
    let (n, d, l) = (shape[0], shape[1], shape[2] * shape[3]);
    let q = tape.reshape(q, &[n, d, l]);
    let k = tape.reshape(k, &[n, d, l]);
    let v = tape.reshape(v, &[n, d, l]);
    let qt = tape.transpose(q);
    let scores = tape.bmm(qt, k);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let att = tape.softmax(scores);
    let vt = tape.transpose(v);
    let out = tape.bmm(att, vt);
    let out = tape.transpose(out);
    tape.reshape(out, &shape)
}

/// The generated visible feature attends with the infrared query over the
/// infrared image's shared keys/values, and symmetrically.
pub fn transfer(tape: &mut Tape, p: &Projections) -> AttentionOutput {
    AttentionOutput {
        f_ca_v: cross_attention(tape, p.q_i, p.k_i, p.v_i),
        f_ca_i: cross_attention(tape, p.q_v, p.k_v, p.v_v),
    }
}

/// Two stride-1 conv blocks.
pub fn conv_branch(fwd: &mut Forward, prefix: &str, x: Var) -> Var {
    let h = fwd.conv_block(&format!("{prefix}.b0"), x, 1);
    fwd.conv_block(&format!("{prefix}.b1"), h, 1)
}

/// Each specific branch reads the query that its attention counterpart
/// reads, so a generated feature depends on the opposite modality only.
pub fn conv_branches(fwd: &mut Forward, p: &Projections) -> ConvOutputs {
    ConvOutputs {
        f_conv_v: conv_branch(fwd, "convv", p.q_i),
        f_conv_i: conv_branch(fwd, "convi", p.q_v),
        f_conv_sh: conv_branch(fwd, "convsh", p.v_sh),
    }
}

/// `(F_CA^V + F_Conv^V, F_CA^I + F_Conv^I)`.
pub fn compose_specific(tape: &mut Tape, att: &AttentionOutput, f_conv_v: Var, f_conv_i: Var) -> (Var, Var) {
    (tape.add(att.f_ca_v, f_conv_v), tape.add(att.f_ca_i, f_conv_i))
}

/// One half of the complete feature: `lambda * (vis ‖ ir) + shared`.
pub fn fuse_half(tape: &mut Tape, vis: Var, ir: Var, shared: Var, lambda: f64) -> Var {
    let cat = tape.concat_channels(&[vis, ir]);
    assert!(
        tape.shape(cat) == tape.shape(shared),
        "contract violation: fused {:?} vs shared {:?}",
        tape.shape(cat),
        tape.shape(shared)
    );
    let s = tape.scale(cat, lambda);
    tape.add(s, shared)
}

/// Visible rows pair the real visible feature with the generated infrared
/// one (weight `lambda3`); infrared rows pair the generated visible feature
/// with the real infrared one (weight `lambda2`).
#[allow(clippy::too_many_arguments)]
pub fn fuse_complete(
    tape: &mut Tape,
    f_sp_v: Var,
    f_sp_i: Var,
    gen_v: Var,
    gen_i: Var,
    f_conv_sh: Var,
    lambda2: f64,
    lambda3: f64,
) -> Var {
    let n = tape.shape(f_sp_v)[0];
    let sh_v = tape.slice_batch(f_conv_sh, 0, n);
    let sh_i = tape.slice_batch(f_conv_sh, n, n);
    let vis = fuse_half(tape, f_sp_v, gen_i, sh_v, lambda3);
    let ir = fuse_half(tape, gen_v, f_sp_i, sh_i, lambda2);
    tape.concat_batch(&[vis, ir])
}

/// Identity loss of the modality-specific classifiers on the generated features.
pub fn mft_loss(fwd: &mut Forward, gen_v: Var, gen_i: Var, labels: &[usize]) -> Var {
    let p_v = fwd.tape.global_avg_pool(gen_v);
    let p_i = fwd.tape.global_avg_pool(gen_i);
    let lv = classify(fwd, "clsv", p_v);
    let li = classify(fwd, "clsi", p_i);
    paired_identity_loss(fwd.tape, lv, li, labels)
}
