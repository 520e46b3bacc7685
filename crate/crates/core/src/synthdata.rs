//! Procedural two-modality pedestrian images.
//!
//! Every identity is a stick figure (head, striped torso, two legs) with its
//! own proportions and colors. Visible images draw it in color over a noisy
//! background; infrared images collapse the same kind of render to luminance,
//! add an identity-specific intensity offset and sensor noise. Color, the
//! most salient visible cue, is therefore unavailable across modalities.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Error, Result};
use crate::netpbm;
use crate::rng::derive_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "visible" => Ok(Modality::Visible),
            "infrared" => Ok(Modality::Infrared),
            _ => Err(Error::Format(format!("unknown modality {s:?}"))),
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Training identities; labels `0..num_ids`.
    pub num_ids: usize,
    /// Test identities; labels `num_ids..num_ids + num_test_ids`.
    pub num_test_ids: usize,
    pub imgs_per_id_per_modality: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_ids: 32,
            num_test_ids: 16,
            imgs_per_id_per_modality: 8,
            height: 48,
            width: 24,
            seed: 7,
            noise_sigma: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        ensure!(self.num_ids >= 2, "need at least 2 training identities");
        ensure!(self.num_test_ids >= 2, "need at least 2 test identities");
        ensure!(self.imgs_per_id_per_modality >= 2, "need at least 2 images per identity and modality");
        ensure!(
            patch_size > 0 && self.height % patch_size == 0 && self.width % patch_size == 0,
            "{}x{} images are not divisible into {patch_size}px patches",
            self.height,
            self.width
        );
        ensure!(self.noise_sigma >= 0.0, "noise_sigma must be non-negative");
        Ok(())
    }

    pub fn total_ids(&self) -> usize {
        self.num_ids + self.num_test_ids
    }

    fn to_text(&self) -> String {
        format!(
            "num_ids = {}\nnum_test_ids = {}\nimgs_per_id_per_modality = {}\nheight = {}\nwidth = {}\nseed = {}\nnoise_sigma = {:?}\n",
            self.num_ids,
            self.num_test_ids,
            self.imgs_per_id_per_modality,
            self.height,
            self.width,
            self.seed,
            self.noise_sigma
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad spec line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            kv.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("spec.txt: missing or bad {key}")))
        }
        Ok(SynthSpec {
            num_ids: get(&kv, "num_ids")?,
            num_test_ids: get(&kv, "num_test_ids")?,
            imgs_per_id_per_modality: get(&kv, "imgs_per_id_per_modality")?,
            height: get(&kv, "height")?,
            width: get(&kv, "width")?,
            seed: get(&kv, "seed")?,
            noise_sigma: get(&kv, "noise_sigma")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub image: Tensor,
    pub identity: usize,
    pub modality: Modality,
    pub split: Split,
    /// Position among this identity's images of this modality.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub records: Vec<Record>,
}

/// Identity-aligned PK mini-batch: row `j` of `x_v` and of `x_i` share `labels[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x_v: Tensor,
    pub x_i: Tensor,
    pub labels: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

struct Figure {
    head_r: f64,
    torso_h: f64,
    torso_w: f64,
    leg_h: f64,
    leg_w: f64,
    leg_gap: f64,
    head_color: [f64; 3],
    torso_color: [f64; 3],
    leg_color: [f64; 3],
    stripe_freq: f64,
    stripe_phase: f64,
    stripe_amp: f64,
    ir_offset: f64,
}

impl Figure {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let mut color = || [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let (head_color, torso_color, leg_color) = (color(), color(), color());
        Figure {
            head_r: rng.gen_range(0.06..0.10),
            torso_h: rng.gen_range(0.28..0.40),
            torso_w: rng.gen_range(0.16..0.32),
            leg_h: rng.gen_range(0.30..0.42),
            leg_w: rng.gen_range(0.05..0.10),
            leg_gap: rng.gen_range(0.04..0.09),
            head_color,
            torso_color,
            leg_color,
            stripe_freq: rng.gen_range(2.0..9.0),
            stripe_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            stripe_amp: rng.gen_range(0.0..0.45),
            ir_offset: rng.gen_range(-0.15..0.15),
        }
    }

    /// Color at figure coordinates (units of image height, `fy` from the
    /// top of the head, `fx` from the body axis), or `None` for background.
    fn color_at(&self, fx: f64, fy: f64) -> Option<[f64; 3]> {
        let r = self.head_r;
        if fx * fx + (fy - r) * (fy - r) <= r * r {
            return Some(self.head_color);
        }
        let torso_top = 2.0 * r;
        let torso_bottom = torso_top + self.torso_h;
        if fy >= torso_top && fy < torso_bottom && fx.abs() < self.torso_w / 2.0 {
            let t = (fy - torso_top) / self.torso_h;
            let s = 1.0 + self.stripe_amp * (std::f64::consts::TAU * self.stripe_freq * t + self.stripe_phase).sin();
            return Some(self.torso_color.map(|c| (c * s).clamp(0.0, 1.0)));
        }
        if fy >= torso_bottom && fy < torso_bottom + self.leg_h {
            let d = fx.abs() - self.leg_gap;
            if d.abs() < self.leg_w / 2.0 {
                return Some(self.leg_color);
            }
        }
        None
    }
}

/// Color render with per-image jitter: ±10% translation and scale, global
/// brightness, random background level.
fn render<R: Rng>(fig: &Figure, h: usize, w: usize, sigma: f64, rng: &mut R) -> Tensor {
    let scale = rng.gen_range(0.9..1.1);
    let dx = rng.gen_range(-0.1..0.1) * w as f64;
    let dy = rng.gen_range(-0.1..0.1) * h as f64;
    let brightness = rng.gen_range(0.85..1.15);
    let bg = [rng.gen_range(0.15..0.65); 3].map(|b: f64| b + rng.gen_range(-0.05..0.05));
    let unit = scale * h as f64;
    let ox = w as f64 / 2.0 + dx;
    let oy = 0.06 * h as f64 + dy;
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let fx = (x as f64 + 0.5 - ox) / unit;
            let fy = (y as f64 + 0.5 - oy) / unit;
            let rgb = match fig.color_at(fx, fy) {
                Some(c) => c.map(|v| v * brightness),
                None => bg,
            };
            for ch in 0..3 {
                let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                data[(ch * h + y) * w + x] = (rgb[ch] + n).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Luminance collapse replicated to three channels, shifted by the identity
/// offset, plus sensor noise.
fn to_infrared<R: Rng>(color: &Tensor, offset: f64, sigma: f64, rng: &mut R) -> Tensor {
    let plane = color.shape()[1] * color.shape()[2];
    let d = color.data();
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        let lum = 0.3 * d[p] + 0.6 * d[plane + p] + 0.1 * d[2 * plane + p];
        let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        let v = (lum + offset + n).clamp(0.0, 1.0);
        for ch in 0..3 {
            out[ch * plane + p] = v;
        }
    }
    Tensor::new(color.shape(), out)
}

/// Deterministic in `spec.seed`; identities are generated independently.
pub fn generate(spec: &SynthSpec) -> SynthDataset {
    let (h, w, sigma) = (spec.height, spec.width, spec.noise_sigma);
    let mut records = Vec::with_capacity(2 * spec.total_ids() * spec.imgs_per_id_per_modality);
    for id in 0..spec.total_ids() {
        let split = if id < spec.num_ids { Split::Train } else { Split::Test };
        let fig = Figure::sample(&mut derive_rng(spec.seed, &[0, id as u64]));
        for modality in [Modality::Visible, Modality::Infrared] {
            for index in 0..spec.imgs_per_id_per_modality {
                let mut rng = derive_rng(spec.seed, &[1, id as u64, modality as u64, index as u64]);
                // Noise is drawn after the jitter, so sigma = 0 leaves the scene unchanged.
                let color = render(&fig, h, w, 0.0, &mut rng);
                let mut noise_rng = derive_rng(spec.seed, &[2, id as u64, modality as u64, index as u64]);
                let image = match modality {
                    Modality::Visible => add_noise(color, sigma, &mut noise_rng),
                    Modality::Infrared => to_infrared(&color, fig.ir_offset, sigma, &mut noise_rng),
                };
                records.push(Record {
                    image,
                    identity: id,
                    modality,
                    split,
                    index,
                });
            }
        }
    }
    SynthDataset {
        spec: spec.clone(),
        records,
    }
}

fn add_noise<R: Rng>(mut img: Tensor, sigma: f64, rng: &mut R) -> Tensor {
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        for v in img.data_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    img
}

impl SynthDataset {
    pub fn select(&self, split: Split, modality: Modality) -> impl Iterator<Item = &Record> {
        self.records
            .iter()
            .filter(move |r| r.split == split && r.modality == modality)
    }

    /// Stacked `[M,3,H,W]` images of one split and modality with their labels.
    pub fn stacked(&self, split: Split, modality: Modality) -> (Tensor, Vec<usize>) {
        let recs: Vec<&Record> = self.select(split, modality).collect();
        let imgs: Vec<&Tensor> = recs.iter().map(|r| &r.image).collect();
        (Tensor::stack(&imgs), recs.iter().map(|r| r.identity).collect())
    }

    pub fn identities(&self, split: Split) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.identity)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn by_identity(&self, modality: Modality) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.split == Split::Train && r.modality == modality {
                map.entry(r.identity).or_default().push(i);
            }
        }
        map
    }

    /// Writes `labels.csv`, `spec.txt` and one P6 file per image.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut csv = String::from("path,identity,modality,split\n");
        for r in &self.records {
            let rel = format!("{}/{}/{:04}_{:02}.ppm", r.split.as_str(), r.modality.as_str(), r.identity, r.index);
            let path = dir.join(&rel);
            fs::create_dir_all(path.parent().expect("file has a parent"))?;
            netpbm::write(&path, &r.image)?;
            writeln!(csv, "{rel},{},{},{}", r.identity, r.modality.as_str(), r.split.as_str()).expect("string write");
        }
        fs::write(dir.join("labels.csv"), csv)?;
        fs::write(dir.join("spec.txt"), self.spec.to_text())?;
        Ok(())
    }

    /// Reads a directory written by [`SynthDataset::save`]. Pixels come back
    /// quantized to 8 bits.
    pub fn load(dir: &Path) -> Result<Self> {
        let spec = SynthSpec::from_text(&fs::read_to_string(dir.join("spec.txt"))?)?;
        let csv = fs::read_to_string(dir.join("labels.csv"))?;
        let mut counters: BTreeMap<(usize, Modality), usize> = BTreeMap::new();
        let mut records = Vec::new();
        for line in csv.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::Format(format!("labels.csv: bad row {line:?}")));
            }
            let identity: usize = cols[1]
                .parse()
                .map_err(|_| Error::Format(format!("labels.csv: bad identity {:?}", cols[1])))?;
            let modality = Modality::parse(cols[2])?;
            let split = Split::parse(cols[3])?;
            let image = netpbm::read(&dir.join(cols[0]))?;
            if image.shape() != [3, spec.height, spec.width] {
                return Err(Error::Format(format!("{}: unexpected shape {:?}", cols[0], image.shape())));
            }
            let counter = counters.entry((identity, modality)).or_insert(0);
            records.push(Record {
                image,
                identity,
                modality,
                split,
                index: *counter,
            });
            *counter += 1;
        }
        Ok(SynthDataset { spec, records })
    }
}

/// Samples `p` training identities and, per identity, `k` visible and `k`
/// infrared images without replacement.
pub fn pk_sample<R: Rng + ?Sized>(ds: &SynthDataset, p: usize, k: usize, rng: &mut R) -> Result<Batch> {
    ensure!(p >= 2, "pk sampling needs p >= 2 identities, got {p}");
    ensure!(k >= 1, "pk sampling needs k >= 1");
    let vis = ds.by_identity(Modality::Visible);
    let ir = ds.by_identity(Modality::Infrared);
    let ids: Vec<usize> = vis.keys().copied().filter(|id| ir.contains_key(id)).collect();
    ensure!(p <= ids.len(), "asked for {p} identities, only {} available", ids.len());
    let mut xs_v = Vec::with_capacity(p * k);
    let mut xs_i = Vec::with_capacity(p * k);
    let mut labels = Vec::with_capacity(p * k);
    for pick in index::sample(rng, ids.len(), p).into_vec() {
        let id = ids[pick];
        let (v, i) = (&vis[&id], &ir[&id]);
        ensure!(
            k <= v.len() && k <= i.len(),
            "identity {id} has {} visible / {} infrared images, need {k}",
            v.len(),
            i.len()
        );
        let sv = index::sample(rng, v.len(), k).into_vec();
        let si = index::sample(rng, i.len(), k).into_vec();
        for j in 0..k {
            xs_v.push(&ds.records[v[sv[j]]].image);
            xs_i.push(&ds.records[i[si[j]]].image);
            labels.push(id);
        }
    }
    Ok(Batch {
        x_v: Tensor::stack(&xs_v),
        x_i: Tensor::stack(&xs_i),
        labels,
        p,
        k,
    })
}
