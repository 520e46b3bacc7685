//! Modality feature extraction: one shared and two modality-specific
//! extractors, the shared/specific separation hinge and the per-modality
//! identity loss.

use crate::model::Forward;
use crate::tensor::{Tape, Var};

/// Decomposed features of one batch. `f_sh` and `f_sp` are `[2N,C,H',W']`
/// with the visible half first; the specific maps are `[N,C,H',W']`.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub f_sh: Var,
    pub f_sp_v: Var,
    pub f_sp_i: Var,
    pub f_sp: Var,
    /// Identity of row `j` in each half.
    pub labels: Vec<usize>,
}

impl FeatureBundle {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Labels of the `2N` concatenated rows.
    pub fn labels2(&self) -> Vec<usize> {
        self.labels.iter().chain(&self.labels).copied().collect()
    }
}

/// Three stride-2 conv blocks: `[B,3,H,W] -> [B,C,H/8,W/8]`.
pub fn extractor(fwd: &mut Forward, prefix: &str, x: Var) -> Var {
    let mut h = x;
    for b in 0..3 {
        h = fwd.conv_block(&format!("{prefix}.b{b}"), h, 2);
    }
    h
}

/// `x_sh` is what the shared extractor sees (the mixed batch, or the plain
/// concatenation of both modalities when mixing is off).
pub fn extract(fwd: &mut Forward, x_sh: Var, x_v: Var, x_i: Var, labels: &[usize]) -> FeatureBundle {
    let n = labels.len();
    let (sv, si, ss) = (fwd.tape.shape(x_v), fwd.tape.shape(x_i), fwd.tape.shape(x_sh));
    assert!(
        sv[0] == n && si[0] == n && ss[0] == 2 * n,
        "contract violation: batch misalignment {sv:?} / {si:?} / {ss:?} for {n} labels"
    );
    let f_sh = extractor(fwd, "esh", x_sh);
    let f_sp_v = extractor(fwd, "espv", x_v);
    let f_sp_i = extractor(fwd, "espi", x_i);
    let f_sp = fwd.tape.concat_batch(&[f_sp_v, f_sp_i]);
    FeatureBundle {
        f_sh,
        f_sp_v,
        f_sp_i,
        f_sp,
        labels: labels.to_vec(),
    }
}

/// Batch norm -> fully connected; returns logits (the softmax lives in the
/// cross-entropy).
pub fn classify(fwd: &mut Forward, name: &str, pooled: Var) -> Var {
    let x = fwd.batch_norm(&format!("{name}.bn"), pooled);
    let w = fwd.param(&format!("{name}.fc.w"));
    let b = fwd.param(&format!("{name}.fc.b"));
    let y = fwd.tape.matmul(x, w);
    fwd.tape.add_bias(y, b)
}

/// Dense `0..G` group ids in order of first appearance.
pub fn compact_groups(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut seen: Vec<usize> = Vec::new();
    let groups = labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(g) => g,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        })
        .collect();
    (groups, seen.len())
}

/// Per-identity hinge `sum_p max(rho - d_sp^p - d_ss^p, 0)` from per-row
/// distances: `d_sp` has one entry per pair (`N`), `d_ss` one per row of the
/// concatenated batch (`2N`, labels repeated).
pub fn mss_from_distances(tape: &mut Tape, d_sp: Var, d_ss: Var, labels: &[usize], rho: f64) -> Var {
    let (groups, g) = compact_groups(labels);
    let groups2: Vec<usize> = groups.iter().chain(&groups).copied().collect();
    let m_sp = tape.group_mean(d_sp, &groups, g);
    let m_ss = tape.group_mean(d_ss, &groups2, g);
    let total = tape.add(m_sp, m_ss);
    let h = tape.hinge(total, rho);
    tape.sum(h)
}

/// Shared/specific separation on globally pooled features.
pub fn mss_loss(fwd: &mut Forward, bundle: &FeatureBundle, rho: f64) -> Var {
    let t = &mut *fwd.tape;
    let p_v = t.global_avg_pool(bundle.f_sp_v);
    let p_i = t.global_avg_pool(bundle.f_sp_i);
    let p_sh = t.global_avg_pool(bundle.f_sh);
    let p_sp = t.global_avg_pool(bundle.f_sp);
    let d_sp = t.l2_distance(p_v, p_i);
    let d_ss = t.l2_distance(p_sh, p_sp);
    mss_from_distances(t, d_sp, d_ss, &bundle.labels, rho)
}

/// `CE(logits_v) + CE(logits_i)`.
pub fn paired_identity_loss(tape: &mut Tape, logits_v: Var, logits_i: Var, labels: &[usize]) -> Var {
    let a = tape.cross_entropy(logits_v, labels);
    let b = tape.cross_entropy(logits_i, labels);
    tape.add(a, b)
}

/// Identity loss of the visible classifier on pooled visible-specific
/// features plus the infrared classifier on pooled infrared-specific ones.
pub fn msi_loss(fwd: &mut Forward, bundle: &FeatureBundle) -> Var {
    let p_v = fwd.tape.global_avg_pool(bundle.f_sp_v);
    let p_i = fwd.tape.global_avg_pool(bundle.f_sp_i);
    let lv = classify(fwd, "clsv", p_v);
    let li = classify(fwd, "clsi", p_i);
    paired_identity_loss(fwd.tape, lv, li, &bundle.labels)
}

pub fn mfe_loss(tape: &mut Tape, msi: Var, mss: Var, lambda1: f64) -> Var {
    assert!(lambda1 >= 0.0, "contract violation: lambda1 must be non-negative");
    let w = tape.scale(mss, lambda1);
    tape.add(msi, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn groups_are_compacted_in_order() {
        assert_eq!(compact_groups(&[7, 3, 7, 9]), (vec![0, 1, 0, 2], 3));
    }

    #[test]
    fn hinge_hand_value() {
        let mut t = Tape::new();
        let d_sp = t.constant(Tensor::new(&[1], vec![0.2]));
        let d_ss = t.constant(Tensor::new(&[2], vec![0.3, 0.3]));
        let l = mss_from_distances(&mut t, d_sp, d_ss, &[4], 0.65);
        assert!((t.value(l).item() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn mfe_combination() {
        let mut t = Tape::new();
        let msi = t.constant(Tensor::scalar(1.0));
        let mss = t.constant(Tensor::scalar(0.5));
        let l = mfe_loss(&mut t, msi, mss, 0.2);
        assert!((t.value(l).item() - 1.1).abs() < 1e-12);
        let l0 = mfe_loss(&mut t, msi, mss, 0.0);
        assert_eq!(t.value(l0).item(), 1.0);
    }
}
