//! Training loop: PK sampling, augmentation, the full objective, SGD with
//! momentum under a milestone schedule, per-step loss logs and per-epoch
//! checkpoints.

mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::Rng;

pub use checkpoint::{Checkpoint, MAGIC};
pub use config::TrainConfig;

use crate::error::{Error, Result};
use crate::model::{Forward, Params};
use crate::pedmix::{channel_augment, PedMix};
use crate::pipeline::training_losses;
use crate::rng::derive_rng;
use crate::synthdata::{generate, pk_sample, Batch, SynthDataset};
use crate::tensor::{BnMode, Tape, Tensor};

/// `lr0` times the factor of the latest milestone at or before `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let factor = cfg
        .milestones
        .iter()
        .filter(|(e, _)| *e <= epoch)
        .last()
        .map_or(1.0, |&(_, f)| f);
    cfg.lr0 * factor
}

/// Component losses of one step; feature terms are `None` without transfer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_id: f64,
    pub l_wrt: f64,
    pub l_mss: Option<f64>,
    pub l_msi: Option<f64>,
    pub l_mft: Option<f64>,
    pub l_total: f64,
}

impl StepLosses {
    pub const CSV_HEADER: &'static str = "epoch,step,l_id,l_wrt,l_mss,l_msi,l_mft,l_total";

    pub fn csv_row(&self, epoch: usize, step: usize) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{epoch},{step},{},{},{},{},{},{}",
            self.l_id,
            self.l_wrt,
            opt(self.l_mss),
            opt(self.l_msi),
            opt(self.l_mft),
            self.l_total
        )
    }

    fn all_finite(&self) -> bool {
        [self.l_id, self.l_wrt, self.l_total]
            .into_iter()
            .chain(self.l_mss)
            .chain(self.l_msi)
            .chain(self.l_mft)
            .all(f64::is_finite)
    }
}

/// Parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Params,
    pub momentum: BTreeMap<String, Tensor>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Self {
        TrainState {
            params: Params::init(&cfg.model(), cfg.seed),
            momentum: BTreeMap::new(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        TrainState {
            params: ck.params,
            momentum: ck.momentum,
        }
    }

    pub fn checkpoint(&self, epoch: usize, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            momentum: self.momentum.clone(),
            epoch,
            config: cfg.to_text(),
        }
    }

    /// `v = mu v + g; p -= lr v` for every parameter that received a gradient.
    pub fn sgd_update(&mut self, grads: &BTreeMap<String, Vec<f64>>, lr: f64, mu: f64) {
        for (name, g) in grads {
            let p = self
                .params
                .tensors
                .get_mut(name)
                .unwrap_or_else(|| panic!("contract violation: gradient for unknown parameter {name}"));
            let v = self
                .momentum
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Applies channel augmentation (if enabled) and PedMix (if enabled) to a
/// batch. Returns the visible images actually used and the shared-extractor
/// input.
pub fn prepare_inputs<R: Rng + ?Sized>(batch: &Batch, cfg: &TrainConfig, rng: &mut R) -> Result<(Tensor, Tensor)> {
    let x_v = if cfg.enable_channel_aug {
        let n = batch.x_v.shape()[0];
        let imgs: Vec<Tensor> = (0..n)
            .map(|j| {
                let img = batch.x_v.slice_outer(j, 1).reshape(&batch.x_v.shape()[1..]);
                channel_augment(&img, rng)
            })
            .collect();
        Tensor::stack(&imgs.iter().collect::<Vec<_>>())
    } else {
        batch.x_v.clone()
    };
    let x_sh = if cfg.enable_pedmix {
        PedMix::new(cfg.region_map()?, cfg.ratios)?.mix_batch(&x_v, &batch.x_i, rng)?
    } else {
        Tensor::stack_outer(&[&x_v, &batch.x_i])
    };
    Ok((x_v, x_sh))
}

/// Forward, backward and parameter update on one batch.
///
/// The loss is checked before the update; a non-finite value leaves the
/// state untouched and returns [`Error::NonFinite`].
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
    at: (usize, usize),
) -> Result<StepLosses> {
    let (x_v, x_sh) = prepare_inputs(batch, cfg, rng)?;
    let mut tape = Tape::new();
    let mut stats = state.params.stats.clone();
    let mut fwd = Forward::from_parts(&mut tape, &state.params.tensors, &mut stats, BnMode::Train);
    let xs = fwd.tape.constant(x_sh);
    let xv = fwd.tape.constant(x_v);
    let xi = fwd.tape.constant(batch.x_i.clone());
    let terms = training_losses(&mut fwd, xs, xv, xi, &batch.labels, cfg.enable_mft, &cfg.weights);
    let bound = fwd.into_bound();
    let item = |v| tape.value(v).item();
    let losses = StepLosses {
        l_id: item(terms.l_id),
        l_wrt: item(terms.l_wrt),
        l_mss: terms.l_mss.map(item),
        l_msi: terms.l_msi.map(item),
        l_mft: terms.l_mft.map(item),
        l_total: item(terms.l_total),
    };
    if !losses.all_finite() {
        return Err(Error::NonFinite {
            epoch: at.0,
            step: at.1,
            detail: format!("{losses:?}; labels {:?}", batch.labels),
        });
    }
    tape.backward(terms.l_total);
    let grads: BTreeMap<String, Vec<f64>> = bound
        .iter()
        .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.to_vec())))
        .collect();
    state.params.stats = stats;
    state.sgd_update(&grads, lr, cfg.momentum);
    Ok(losses)
}

/// The dataset a config describes: loaded from `data.dir` or generated.
pub fn dataset_for(cfg: &TrainConfig) -> Result<SynthDataset> {
    match &cfg.data_dir {
        Some(dir) => SynthDataset::load(dir),
        None => Ok(generate(&cfg.data)),
    }
}

/// Runs `cfg.epochs` epochs from scratch.
pub fn train(ds: &SynthDataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<Checkpoint> {
    resume(ds, cfg, None, out)
}

/// Continues from `from` (or starts fresh) up to `cfg.epochs` epochs. Every
/// step draws from a stream derived from `(seed, epoch, step)`, so a resumed
/// run matches an uninterrupted one bitwise.
///
/// With `out` set, per-step losses are appended to `losses.csv` and each
/// epoch writes `checkpoint.bin` plus `checkpoint_epochNNN.bin`.
pub fn resume(ds: &SynthDataset, cfg: &TrainConfig, from: Option<Checkpoint>, out: Option<&Path>) -> Result<Checkpoint> {
    cfg.validate()?;
    let start = from.as_ref().map_or(0, |c| c.epoch);
    let mut state = match from {
        Some(ck) => TrainState::from_checkpoint(ck),
        None => TrainState::init(cfg),
    };
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("losses.csv");
            let fresh = start == 0 || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(path)?;
            if fresh {
                writeln!(f, "{}", StepLosses::CSV_HEADER)?;
            }
            Some(f)
        }
        None => None,
    };
    for epoch in start..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        for step in 0..cfg.steps_per_epoch {
            let mut rng = derive_rng(cfg.seed, &[0x7472_6169_6e, epoch as u64, step as u64]);
            let batch = pk_sample(ds, cfg.p, cfg.k, &mut rng)?;
            let losses = match train_step(&mut state, &batch, cfg, lr, &mut rng, (epoch, step)) {
                Ok(l) => l,
                Err(e) => {
                    if let Some(dir) = out {
                        fs::write(dir.join("nonfinite_dump.txt"), format!("{e}\n"))?;
                    }
                    return Err(e);
                }
            };
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", losses.csv_row(epoch, step))?;
            }
        }
        if let Some(dir) = out {
            let ck = state.checkpoint(epoch + 1, cfg);
            ck.save(&dir.join(format!("checkpoint_epoch{:03}.bin", epoch + 1)))?;
            ck.save(&dir.join("checkpoint.bin"))?;
        }
    }
    Ok(state.checkpoint(cfg.epochs.max(start), cfg))
}
