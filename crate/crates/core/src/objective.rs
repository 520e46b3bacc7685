//! Task losses on the complete representation and the weighted total.

use crate::error::{ensure, Result};
use crate::mfe::classify;
use crate::model::Forward;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.8,
            beta: 0.4,
            lambda1: 0.2,
            lambda2: 0.25,
            lambda3: 0.25,
            rho: 0.65,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("rho", self.rho),
        ] {
            ensure!(v >= 0.0 && v.is_finite(), "loss weight {name} = {v} must be finite and >= 0");
        }
        Ok(())
    }
}

/// Cross-entropy of the shared classifier over all `2N` pooled rows.
pub fn id_loss(fwd: &mut Forward, pooled_fc: Var, labels: &[usize]) -> Var {
    let logits = classify(fwd, "cls", pooled_fc);
    fwd.tape.cross_entropy(logits, labels)
}

/// Weighted regularization triplet over the batch's pairwise distances.
pub fn wrt_loss(tape: &mut Tape, pooled_fc: Var, labels: &[usize]) -> Var {
    let d = tape.pairwise_distance(pooled_fc);
    tape.weighted_triplet(d, labels)
}

/// `alpha (l_id + l_wrt) + beta (l_mfe + l_mft)`; absent feature terms count as zero.
pub fn total_loss(
    tape: &mut Tape,
    l_id: Var,
    l_wrt: Var,
    l_mfe: Option<Var>,
    l_mft: Option<Var>,
    w: &LossWeights,
) -> Var {
    let base = tape.add(l_id, l_wrt);
    let mut total = tape.scale(base, w.alpha);
    let mf = match (l_mfe, l_mft) {
        (Some(a), Some(b)) => Some(tape.add(a, b)),
        (a, b) => a.or(b),
    };
    if let Some(mf) = mf {
        let s = tape.scale(mf, w.beta);
        total = tape.add(total, s);
    }
    total
}
