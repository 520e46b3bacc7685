//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{ensure, Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossWeights;
use crate::pedmix::{partition_regions, BoxFrac, MixRatios, RegionMap, PHI1, PHI2};
use crate::synthdata::SynthSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr0: f64,
    /// `(epoch, factor)`: from `epoch` on the rate is `lr0 * factor`.
    pub milestones: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weights: LossWeights,
    pub ratios: MixRatios,
    pub patch_size: usize,
    pub phi1: BoxFrac,
    pub phi2: BoxFrac,
    pub p: usize,
    pub k: usize,
    pub enable_pedmix: bool,
    pub enable_mft: bool,
    pub enable_channel_aug: bool,
    pub widths: [usize; 3],
    pub data: SynthSpec,
    /// Load the dataset from this directory instead of generating it.
    pub data_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            epochs: 60,
            steps_per_epoch: 8,
            lr0: 0.1,
            milestones: vec![(20, 0.1), (50, 0.01)],
            momentum: 0.9,
            weights: LossWeights::default(),
            ratios: MixRatios::default(),
            patch_size: 6,
            phi1: PHI1,
            phi2: PHI2,
            p: 8,
            k: 4,
            enable_pedmix: true,
            enable_mft: true,
            enable_channel_aug: false,
            widths: [16, 32, 64],
            data: SynthSpec::default(),
            data_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected `h,w`, got {v:?}")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn parse_milestones(key: &str, v: &str) -> Result<Vec<(usize, f64)>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let (e, f) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("{key}: expected `epoch:factor`, got {item:?}")))?;
            Ok((parse(key, e.trim())?, parse(key, f.trim())?))
        })
        .collect()
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            widths: self.widths,
            num_classes: self.data.num_ids,
        }
    }

    pub fn region_map(&self) -> Result<RegionMap> {
        partition_regions(self.data.height, self.data.width, self.patch_size, self.phi1, self.phi2)
    }

    /// Sets one key. `mix.ladder = A` is shorthand for `A, A+0.05, A+0.1`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, v)?,
            "lr0" => self.lr0 = parse(key, v)?,
            "lr.milestones" => self.milestones = parse_milestones(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "loss.alpha" => self.weights.alpha = parse(key, v)?,
            "loss.beta" => self.weights.beta = parse(key, v)?,
            "loss.lambda1" => self.weights.lambda1 = parse(key, v)?,
            "loss.lambda2" => self.weights.lambda2 = parse(key, v)?,
            "loss.lambda3" => self.weights.lambda3 = parse(key, v)?,
            "loss.rho" => self.weights.rho = parse(key, v)?,
            "mix.a_c" => self.ratios.a_c = parse(key, v)?,
            "mix.a_s" => self.ratios.a_s = parse(key, v)?,
            "mix.a_o" => self.ratios.a_o = parse(key, v)?,
            "mix.ladder" => {
                let a: f64 = parse(key, v)?;
                self.ratios = MixRatios {
                    a_c: a,
                    a_s: a + 0.05,
                    a_o: a + 0.10,
                };
            }
            "pedmix.patch_size" => self.patch_size = parse(key, v)?,
            "pedmix.phi1" => self.phi1 = parse_pair(key, v)?,
            "pedmix.phi2" => self.phi2 = parse_pair(key, v)?,
            "batch.p" => self.p = parse(key, v)?,
            "batch.k" => self.k = parse(key, v)?,
            "enable_pedmix" => self.enable_pedmix = parse_bool(key, v)?,
            "enable_mft" => self.enable_mft = parse_bool(key, v)?,
            "enable_channel_aug" => self.enable_channel_aug = parse_bool(key, v)?,
            "model.widths" => {
                let ws: Vec<usize> = v.split(',').map(|w| parse(key, w.trim())).collect::<Result<_>>()?;
                self.widths = ws
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three widths, got {v:?}")))?;
            }
            "data.num_ids" => self.data.num_ids = parse(key, v)?,
            "data.num_test_ids" => self.data.num_test_ids = parse(key, v)?,
            "data.imgs_per_id" => self.data.imgs_per_id_per_modality = parse(key, v)?,
            "data.height" => self.data.height = parse(key, v)?,
            "data.width" => self.data.width = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.noise_sigma" => self.data.noise_sigma = parse(key, v)?,
            "data.dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file's lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key with its resolved value; feeding this back through
    /// [`TrainConfig::from_text`] reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("steps_per_epoch", self.steps_per_epoch.to_string());
        kv("lr0", format!("{:?}", self.lr0));
        kv(
            "lr.milestones",
            self.milestones
                .iter()
                .map(|(e, f)| format!("{e}:{f:?}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("momentum", format!("{:?}", self.momentum));
        let w = &self.weights;
        kv("loss.alpha", format!("{:?}", w.alpha));
        kv("loss.beta", format!("{:?}", w.beta));
        kv("loss.lambda1", format!("{:?}", w.lambda1));
        kv("loss.lambda2", format!("{:?}", w.lambda2));
        kv("loss.lambda3", format!("{:?}", w.lambda3));
        kv("loss.rho", format!("{:?}", w.rho));
        kv("mix.a_c", format!("{:?}", self.ratios.a_c));
        kv("mix.a_s", format!("{:?}", self.ratios.a_s));
        kv("mix.a_o", format!("{:?}", self.ratios.a_o));
        kv("pedmix.patch_size", self.patch_size.to_string());
        kv("pedmix.phi1", format!("{:?},{:?}", self.phi1.0, self.phi1.1));
        kv("pedmix.phi2", format!("{:?},{:?}", self.phi2.0, self.phi2.1));
        kv("batch.p", self.p.to_string());
        kv("batch.k", self.k.to_string());
        kv("enable_pedmix", self.enable_pedmix.to_string());
        kv("enable_mft", self.enable_mft.to_string());
        kv("enable_channel_aug", self.enable_channel_aug.to_string());
        kv(
            "model.widths",
            self.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        let d = &self.data;
        kv("data.num_ids", d.num_ids.to_string());
        kv("data.num_test_ids", d.num_test_ids.to_string());
        kv("data.imgs_per_id", d.imgs_per_id_per_modality.to_string());
        kv("data.height", d.height.to_string());
        kv("data.width", d.width.to_string());
        kv("data.seed", d.seed.to_string());
        kv("data.noise_sigma", format!("{:?}", d.noise_sigma));
        kv(
            "data.dir",
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps_per_epoch > 0, "steps_per_epoch must be positive");
        ensure!(self.lr0 >= 0.0 && self.lr0.is_finite(), "lr0 must be finite and >= 0");
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)");
        for pair in self.milestones.windows(2) {
            ensure!(pair[0].0 < pair[1].0, "milestones must be strictly ascending");
        }
        for &(_, f) in &self.milestones {
            ensure!(f > 0.0 && f <= 1.0, "milestone factor {f} outside (0, 1]");
        }
        self.weights.validate()?;
        self.ratios.validate()?;
        self.data.validate(self.patch_size)?;
        self.region_map()?;
        self.model().validate()?;
        ensure!(self.p >= 2, "batch.p must be >= 2 so every anchor has negatives");
        ensure!(self.k >= 1, "batch.k must be >= 1");
        ensure!(
            self.p <= self.data.num_ids && self.k <= self.data.imgs_per_id_per_modality,
            "batch {}x{} does not fit {} identities with {} images each",
            self.p,
            self.k,
            self.data.num_ids,
            self.data.imgs_per_id_per_modality
        );
        Ok(())
    }
}
