//! End-to-end wiring of extraction, transfer and losses, for training and
//! for single-modality inference.

use crate::mfe::{self, extract};
use crate::mft::{self, compose_specific, conv_branch, conv_branches, fuse_complete, project, project_qkv, transfer};
use crate::model::{Forward, ModelConfig, Params};
use crate::objective::{id_loss, total_loss, wrt_loss, LossWeights};
use crate::pedmix::{partition_regions, MixRatios, PedMix, PHI1, PHI2};
use crate::rng::derive_rng;
use crate::synthdata::Modality;
use crate::tensor::{grad_check, BnMode, GradCheckReport, Tape, Tensor, Var};

/// Handles of every loss term of one forward pass. The feature terms are
/// absent when the transfer stage is disabled.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_id: Var,
    pub l_wrt: Var,
    pub l_mss: Option<Var>,
    pub l_msi: Option<Var>,
    pub l_mfe: Option<Var>,
    pub l_mft: Option<Var>,
    pub l_total: Var,
}

/// Training objective for one batch.
///
/// `x_sh` is the `[2N,3,H,W]` input of the shared extractor; `x_v`/`x_i`
/// are the raw `[N,3,H,W]` halves, index-aligned with `labels`. With
/// `enable_mft` off only the shared path runs and the total is
/// `alpha (L_ID + L_WRT)`.
pub fn training_losses(
    fwd: &mut Forward,
    x_sh: Var,
    x_v: Var,
    x_i: Var,
    labels: &[usize],
    enable_mft: bool,
    w: &LossWeights,
) -> LossTerms {
    let labels2: Vec<usize> = labels.iter().chain(labels).copied().collect();
    if !enable_mft {
        let f_sh = mfe::extractor(fwd, "esh", x_sh);
        let v_sh = project(fwd, "proj.v", f_sh);
        let f_c = conv_branch(fwd, "convsh", v_sh);
        let pooled = fwd.tape.global_avg_pool(f_c);
        let l_id = id_loss(fwd, pooled, &labels2);
        let l_wrt = wrt_loss(fwd.tape, pooled, &labels2);
        let l_total = total_loss(fwd.tape, l_id, l_wrt, None, None, w);
        return LossTerms {
            l_id,
            l_wrt,
            l_mss: None,
            l_msi: None,
            l_mfe: None,
            l_mft: None,
            l_total,
        };
    }
    let bundle = extract(fwd, x_sh, x_v, x_i, labels);
    let l_mss = mfe::mss_loss(fwd, &bundle, w.rho);
    let l_msi = mfe::msi_loss(fwd, &bundle);
    let l_mfe = mfe::mfe_loss(fwd.tape, l_msi, l_mss, w.lambda1);
    let proj = project_qkv(fwd, &bundle);
    let att = transfer(fwd.tape, &proj);
    let conv = conv_branches(fwd, &proj);
    let (gen_v, gen_i) = compose_specific(fwd.tape, &att, conv.f_conv_v, conv.f_conv_i);
    let f_c = fuse_complete(
        fwd.tape,
        bundle.f_sp_v,
        bundle.f_sp_i,
        gen_v,
        gen_i,
        conv.f_conv_sh,
        w.lambda2,
        w.lambda3,
    );
    let l_mft = mft::mft_loss(fwd, gen_v, gen_i, labels);
    let pooled = fwd.tape.global_avg_pool(f_c);
    let l_id = id_loss(fwd, pooled, &labels2);
    let l_wrt = wrt_loss(fwd.tape, pooled, &labels2);
    let l_total = total_loss(fwd.tape, l_id, l_wrt, Some(l_mfe), Some(l_mft), w);
    LossTerms {
        l_id,
        l_wrt,
        l_mss: Some(l_mss),
        l_msi: Some(l_msi),
        l_mfe: Some(l_mfe),
        l_mft: Some(l_mft),
        l_total,
    }
}

/// Complete feature map `[M,2d,H',W']` of images that all come from one
/// modality; only that modality's specific extractor runs, and the other
/// modality's specific feature is generated from it.
pub fn complete_feature(
    fwd: &mut Forward,
    x: Var,
    modality: Modality,
    enable_mft: bool,
    w: &LossWeights,
) -> Var {
    let f_sh = mfe::extractor(fwd, "esh", x);
    let v = project(fwd, "proj.v", f_sh);
    if !enable_mft {
        return conv_branch(fwd, "convsh", v);
    }
    let k = project(fwd, "proj.k", f_sh);
    let shared = conv_branch(fwd, "convsh", v);
    match modality {
        Modality::Visible => {
            let f_sp_v = mfe::extractor(fwd, "espv", x);
            let q_v = project(fwd, "proj.qv", f_sp_v);
            let ca = mft::cross_attention(fwd.tape, q_v, k, v);
            let conv = conv_branch(fwd, "convi", q_v);
            let gen_i = fwd.tape.add(ca, conv);
            mft::fuse_half(fwd.tape, f_sp_v, gen_i, shared, w.lambda3)
        }
        Modality::Infrared => {
            let f_sp_i = mfe::extractor(fwd, "espi", x);
            let q_i = project(fwd, "proj.qi", f_sp_i);
            let ca = mft::cross_attention(fwd.tape, q_i, k, v);
            let conv = conv_branch(fwd, "convv", q_i);
            let gen_v = fwd.tape.add(ca, conv);
            mft::fuse_half(fwd.tape, gen_v, f_sp_i, shared, w.lambda2)
        }
    }
}

/// Widths, image size, patch and identity count of the micro model used by
/// the end-to-end gradient check.
pub const MICRO_WIDTHS: [usize; 3] = [2, 3, 4];
pub const MICRO_HW: (usize, usize) = (16, 8);
pub const MICRO_PATCH: usize = 4;
pub const MICRO_IDS: usize = 2;

/// Central-difference check of `L_Total` with respect to every parameter of
/// a micro model on a 2-identity batch (one image per identity and modality).
pub fn total_loss_gradcheck(seed: u64, enable_mft: bool, h: f64, tol: f64) -> GradCheckReport {
    let cfg = ModelConfig {
        widths: MICRO_WIDTHS,
        num_classes: MICRO_IDS,
    };
    let params = Params::init(&cfg, seed);
    let mut rng = derive_rng(seed, &[0x6763]);
    let (hh, ww) = MICRO_HW;
    let n = MICRO_IDS;
    let x_v = Tensor::uniform(&[n, 3, hh, ww], 0.0, 1.0, &mut rng);
    let x_i = Tensor::uniform(&[n, 3, hh, ww], 0.0, 1.0, &mut rng);
    let map = partition_regions(hh, ww, MICRO_PATCH, PHI1, PHI2).expect("micro grid divides");
    let x_sh = PedMix::new(map, MixRatios::default())
        .expect("default ratios")
        .mix_batch(&x_v, &x_i, &mut rng)
        .expect("aligned batch");
    let labels: Vec<usize> = (0..n).collect();
    let w = LossWeights::default();

    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor> = params.tensors.values().cloned().collect();
    let f = |tape: &mut Tape, vars: &[Var]| {
        let mut stats = params.stats.clone();
        let mut fwd = Forward::from_parts(tape, &params.tensors, &mut stats, BnMode::Train);
        for (name, &v) in names.iter().zip(vars) {
            fwd.bind(name, v);
        }
        let xs = fwd.tape.constant(x_sh.clone());
        let xv = fwd.tape.constant(x_v.clone());
        let xi = fwd.tape.constant(x_i.clone());
        training_losses(&mut fwd, xs, xv, xi, &labels, enable_mft, &w).l_total
    };
    grad_check(f, &inputs, h, tol)
}
