//! Named parameters, their initialization, and the forward context that
//! binds them onto a tape.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::rng::{derive_rng, name_hash};
use crate::tensor::{BnMode, RunningStats, Tape, Tensor, Var};

/// Architecture knobs shared by every component.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output channels of the three extractor blocks; the last is `C`.
    pub widths: [usize; 3],
    /// Number of training identities `P`.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: [16, 32, 64],
            num_classes: 32,
        }
    }
}

impl ModelConfig {
    /// Channels of every extracted feature map.
    pub fn c(&self) -> usize {
        self.widths[2]
    }

    /// Attention dimension. Equal to `C` so that generated and real specific
    /// features can share a classifier and concatenate to `2d` channels.
    pub fn d(&self) -> usize {
        self.c()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.widths.iter().all(|&w| w > 0), "model widths must be positive");
        ensure!(self.num_classes >= 2, "need at least 2 identity classes");
        Ok(())
    }
}

pub const EXTRACTORS: [&str; 3] = ["esh", "espv", "espi"];
pub const PROJECTIONS: [&str; 4] = ["proj.qv", "proj.qi", "proj.k", "proj.v"];
pub const CLASSIFIERS: [&str; 3] = ["cls", "clsv", "clsi"];

/// Parameters that only the transfer stage and the specific branches use.
pub fn is_transfer_param(name: &str) -> bool {
    ["espv.", "espi.", "proj.qv", "proj.qi", "proj.k", "convv.", "convi.", "clsv.", "clsi."]
        .iter()
        .any(|p| name.starts_with(p))
}

/// Every trainable tensor plus batch-norm running statistics, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub tensors: BTreeMap<String, Tensor>,
    pub stats: BTreeMap<String, RunningStats>,
}

enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn { gain: f64, fan_in: usize },
    Const(f64),
}

impl Params {
    /// Deterministic initialization: each tensor draws from a stream derived
    /// from `seed` and its own name, so adding a parameter never perturbs
    /// the others.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Params {
        let mut p = Params {
            tensors: BTreeMap::new(),
            stats: BTreeMap::new(),
        };
        let (c, d, classes) = (cfg.c(), cfg.d(), cfg.num_classes);
        for e in EXTRACTORS {
            let mut c_in = 3;
            for (b, &w) in cfg.widths.iter().enumerate() {
                p.conv_block(&format!("{e}.b{b}"), c_in, w, seed);
                c_in = w;
            }
        }
        for name in PROJECTIONS {
            p.add(name, &[d, c, 1, 1], Init::FanIn { gain: 1.0, fan_in: c }, seed);
        }
        for (branch, width) in [("convv", d), ("convi", d), ("convsh", 2 * d)] {
            p.conv_block(&format!("{branch}.b0"), d, width, seed);
            p.conv_block(&format!("{branch}.b1"), width, width, seed);
        }
        for (name, dim) in [("cls", 2 * d), ("clsv", c), ("clsi", c)] {
            p.batch_norm(&format!("{name}.bn"), dim);
            p.add(
                &format!("{name}.fc.w"),
                &[dim, classes],
                Init::FanIn { gain: 1.0, fan_in: dim },
                seed,
            );
            p.add(&format!("{name}.fc.b"), &[classes], Init::Const(0.0), seed);
        }
        p
    }

    fn add(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) {
        let t = match init {
            Init::FanIn { gain, fan_in } => {
                let std = gain / (fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let mut rng = derive_rng(seed, &[name_hash(name)]);
                let n: usize = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
            }
            Init::Const(v) => Tensor::full(shape, v),
        };
        self.tensors.insert(name.to_string(), t);
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.tensors.insert(format!("{prefix}.gamma"), Tensor::ones(&[c]));
        self.tensors.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
        self.stats.insert(prefix.to_string(), RunningStats::new(c));
    }

    fn conv_block(&mut self, prefix: &str, c_in: usize, c_out: usize, seed: u64) {
        self.add(
            &format!("{prefix}.conv"),
            &[c_out, c_in, 3, 3],
            Init::FanIn {
                gain: 2f64.sqrt(),
                fan_in: c_in * 9,
            },
            seed,
        );
        self.batch_norm(&format!("{prefix}.bn"), c_out);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("contract violation: unknown parameter {name}"))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// One forward pass: a tape, the parameters it reads, and the running
/// statistics that train-mode batch norm updates.
///
/// Parameters are bound onto the tape on first use; [`Forward::bind`] lets a
/// caller supply its own leaf instead (used by gradient checks).
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    params: &'a BTreeMap<String, Tensor>,
    stats: &'a mut BTreeMap<String, RunningStats>,
    bound: BTreeMap<String, Var>,
    pub mode: BnMode,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a mut Params, mode: BnMode) -> Self {
        Forward {
            tape,
            params: &params.tensors,
            stats: &mut params.stats,
            bound: BTreeMap::new(),
            mode,
        }
    }

    /// Same as [`Forward::new`] with the tensors and statistics borrowed separately.
    pub fn from_parts(
        tape: &'a mut Tape,
        tensors: &'a BTreeMap<String, Tensor>,
        stats: &'a mut BTreeMap<String, RunningStats>,
        mode: BnMode,
    ) -> Self {
        Forward {
            tape,
            params: tensors,
            stats,
            bound: BTreeMap::new(),
            mode,
        }
    }

    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("contract violation: unknown parameter {name}"));
        let v = self.tape.param(t);
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Parameters touched by this pass, with their tape handles.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn into_bound(self) -> BTreeMap<String, Var> {
        self.bound
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Var {
        let g = self.param(&format!("{prefix}.gamma"));
        let b = self.param(&format!("{prefix}.beta"));
        let stats = self
            .stats
            .get_mut(prefix)
            .unwrap_or_else(|| panic!("contract violation: unknown batch norm {prefix}"));
        self.tape.batch_norm(x, g, b, self.mode, stats)
    }

    /// 3x3 conv (padding 1) -> batch norm -> ReLU.
    pub fn conv_block(&mut self, prefix: &str, x: Var, stride: usize) -> Var {
        let k = self.param(&format!("{prefix}.conv"));
        let y = self.tape.conv2d(x, k, stride, 1);
        let y = self.batch_norm(&format!("{prefix}.bn"), y);
        self.tape.relu(y)
    }
}
