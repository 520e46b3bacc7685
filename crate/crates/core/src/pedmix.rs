//! Region-based cross-modality mixing.
//!
//! An image is cut into a grid of square patches. Two centered rectangles
//! split the grid into a center region (inside the inner box), a sub-center
//! ring (inside the outer box only) and the outer remainder. Per region, a
//! fixed fraction of patches keeps the source modality and the rest is taken
//! from the identity-paired image of the other modality.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Center,
    SubCenter,
    Outer,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Center, Region::SubCenter, Region::Outer];
}

/// Centered rectangle as (height fraction, width fraction) of the image.
pub type BoxFrac = (f64, f64);

/// Default inner box.
pub const PHI1: BoxFrac = (2.0 / 3.0, 1.0 / 3.0);
/// Default outer box.
pub const PHI2: BoxFrac = (5.0 / 6.0, 2.0 / 3.0);

/// Patch grid with its center / sub-center / outer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub phi1: BoxFrac,
    pub phi2: BoxFrac,
    labels: Vec<Region>,
}

/// Row/column span `[top, bottom) x [left, right)` in patch units.
fn centered_span(grid: usize, frac: f64) -> (usize, usize) {
    let len = ((frac * grid as f64).round() as usize).min(grid);
    let start = (grid - len) / 2;
    (start, start + len)
}

/// Splits an `h x w` image into `patch_size` patches grouped by two centered boxes.
pub fn partition_regions(
    h: usize,
    w: usize,
    patch_size: usize,
    phi1: BoxFrac,
    phi2: BoxFrac,
) -> Result<RegionMap> {
    ensure!(patch_size > 0, "patch size must be positive");
    ensure!(
        h % patch_size == 0 && w % patch_size == 0 && h > 0 && w > 0,
        "image {h}x{w} is not divisible into {patch_size}px patches"
    );
    for (name, (fh, fw)) in [("phi1", phi1), ("phi2", phi2)] {
        ensure!(
            fh > 0.0 && fh <= 1.0 && fw > 0.0 && fw <= 1.0,
            "{name} fractions must lie in (0, 1], got ({fh}, {fw})"
        );
    }
    ensure!(
        phi1.0 <= phi2.0 && phi1.1 <= phi2.1,
        "inner box {phi1:?} must not exceed outer box {phi2:?}"
    );
    let (grid_h, grid_w) = (h / patch_size, w / patch_size);
    let (r1, c1) = (centered_span(grid_h, phi1.0), centered_span(grid_w, phi1.1));
    let (r2, c2) = (centered_span(grid_h, phi2.0), centered_span(grid_w, phi2.1));
    let inside = |(r, c): (usize, usize), rs: (usize, usize), cs: (usize, usize)| {
        r >= rs.0 && r < rs.1 && c >= cs.0 && c < cs.1
    };
    let labels = (0..grid_h)
        .flat_map(|r| (0..grid_w).map(move |c| (r, c)))
        .map(|rc| {
            if inside(rc, r1, c1) {
                Region::Center
            } else if inside(rc, r2, c2) {
                Region::SubCenter
            } else {
                Region::Outer
            }
        })
        .collect();
    Ok(RegionMap {
        grid_h,
        grid_w,
        patch_size,
        phi1,
        phi2,
        labels,
    })
}

impl RegionMap {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn region_of(&self, row: usize, col: usize) -> Region {
        self.labels[row * self.grid_w + col]
    }

    pub fn labels(&self) -> &[Region] {
        &self.labels
    }

    /// Row-major patch indices belonging to `region`.
    pub fn patches(&self, region: Region) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == region).collect()
    }

    pub fn count(&self, region: Region) -> usize {
        self.labels.iter().filter(|&&r| r == region).count()
    }

    pub fn image_height(&self) -> usize {
        self.grid_h * self.patch_size
    }

    pub fn image_width(&self) -> usize {
        self.grid_w * self.patch_size
    }
}

/// Fraction of patches per region that keep the source modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixRatios {
    pub a_c: f64,
    pub a_s: f64,
    pub a_o: f64,
}

impl Default for MixRatios {
    fn default() -> Self {
        MixRatios {
            a_c: 0.65,
            a_s: 0.70,
            a_o: 0.75,
        }
    }
}

impl MixRatios {
    pub fn new(a_c: f64, a_s: f64, a_o: f64) -> Result<Self> {
        let r = MixRatios { a_c, a_s, a_o };
        r.validate()?;
        Ok(r)
    }

    /// `a_c`, then each further region `step` higher.
    pub fn ladder(a_c: f64, step: f64) -> Result<Self> {
        Self::new(a_c, a_c + step, a_c + 2.0 * step)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.a_c, self.a_s, self.a_o] {
            ensure!((0.0..=1.0).contains(&v), "mix ratio {v} outside [0, 1]");
        }
        Ok(())
    }

    pub fn get(&self, region: Region) -> f64 {
        match region {
            Region::Center => self.a_c,
            Region::SubCenter => self.a_s,
            Region::Outer => self.a_o,
        }
    }

    /// `floor(ratio * n)`; the epsilon absorbs binary representation error
    /// (0.29 * 100 evaluates to 28.999...).
    pub fn kept(&self, region: Region, n: usize) -> usize {
        ((self.get(region) * n as f64 + 1e-9).floor() as usize).min(n)
    }
}

/// Binary patch mask: `true` keeps the source-modality patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    pub grid_h: usize,
    pub grid_w: usize,
    keep: Vec<bool>,
}

impl PatchMask {
    pub fn filled(grid_h: usize, grid_w: usize, keep: bool) -> Self {
        PatchMask {
            grid_h,
            grid_w,
            keep: vec![keep; grid_h * grid_w],
        }
    }

    pub fn from_fn(grid_h: usize, grid_w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let keep = (0..grid_h)
            .flat_map(|r| (0..grid_w).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        PatchMask {
            grid_h,
            grid_w,
            keep,
        }
    }

    pub fn keeps(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.grid_w + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn popcount(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn popcount_in(&self, map: &RegionMap, region: Region) -> usize {
        map.patches(region).iter().filter(|&&i| self.keep[i]).count()
    }
}

/// Draws one mask: in each region exactly `floor(A_i * |r_i|)` patches, chosen
/// uniformly without replacement, keep the source modality.
///
/// Every region is shuffled regardless of its ratio, so for a fixed seed the
/// kept set grows monotonically with the ratio.
pub fn sample_masks<R: Rng + ?Sized>(map: &RegionMap, ratios: &MixRatios, rng: &mut R) -> PatchMask {
    let mut mask = PatchMask::filled(map.grid_h, map.grid_w, false);
    for region in Region::ALL {
        let mut idx = map.patches(region);
        idx.shuffle(rng);
        let n = ratios.kept(region, idx.len());
        for &i in &idx[..n] {
            mask.keep[i] = true;
        }
    }
    mask
}

/// A visible/infrared pair of one identity, each `[3, H, W]`.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub x_v: Tensor,
    pub x_i: Tensor,
    pub identity: usize,
}

/// Pixel-wise selection: where `mask` keeps, copy `source`, else `other`.
pub fn apply_mask(source: &Tensor, other: &Tensor, mask: &PatchMask, patch: usize) -> Result<Tensor> {
    ensure!(
        source.shape() == other.shape() && source.ndim() == 3,
        "mixing needs equal [C,H,W] images, got {:?} and {:?}",
        source.shape(),
        other.shape()
    );
    let (c, h, w) = (source.shape()[0], source.shape()[1], source.shape()[2]);
    ensure!(
        mask.grid_h * patch == h && mask.grid_w * patch == w,
        "mask grid {}x{} (patch {patch}) does not cover {h}x{w}",
        mask.grid_h,
        mask.grid_w
    );
    let mut out = source.clone();
    let (dst, alt) = (out.data_mut(), other.data());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if !mask.keeps(y / patch, x / patch) {
                    let i = (ch * h + y) * w + x;
                    dst[i] = alt[i];
                }
            }
        }
    }
    Ok(out)
}

/// Mixed visible and mixed infrared images for one pair.
pub fn mix_pair(
    pair: &ImagePair,
    mask_v: &PatchMask,
    mask_i: &PatchMask,
    patch: usize,
) -> Result<(Tensor, Tensor)> {
    let mixed_v = apply_mask(&pair.x_v, &pair.x_i, mask_v, patch)?;
    let mixed_i = apply_mask(&pair.x_i, &pair.x_v, mask_i, patch)?;
    Ok((mixed_v, mixed_i))
}

/// Batch concatenation `[x̂_v...; x̂_i...]`, visible half first.
pub fn concat_mixed(batch_v: &[Tensor], batch_i: &[Tensor]) -> Result<Tensor> {
    ensure!(
        batch_v.len() == batch_i.len() && !batch_v.is_empty(),
        "mixed batches must be non-empty and equal length ({} vs {})",
        batch_v.len(),
        batch_i.len()
    );
    let shape = batch_v[0].shape();
    ensure!(
        batch_v.iter().chain(batch_i).all(|t| t.shape() == shape),
        "mixed images differ in shape"
    );
    let all: Vec<&Tensor> = batch_v.iter().chain(batch_i).collect();
    Ok(Tensor::stack(&all))
}

/// With probability 1/2 returns the image unchanged, otherwise replicates one
/// uniformly chosen channel into all three.
pub fn channel_augment<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Tensor {
    let pick = if rng.gen_bool(0.5) {
        None
    } else {
        Some(rng.gen_range(0..3))
    };
    replicate_channel(x, pick)
}

/// `None` is the identity; `Some(c)` copies channel `c` into every channel.
pub fn replicate_channel(x: &Tensor, channel: Option<usize>) -> Tensor {
    assert!(
        x.ndim() == 3 && x.shape()[0] == 3,
        "contract violation: channel augmentation needs a [3,H,W] image"
    );
    let Some(c) = channel else { return x.clone() };
    let plane = x.shape()[1] * x.shape()[2];
    let src = x.data()[c * plane..(c + 1) * plane].to_vec();
    let mut out = x.clone();
    for ch in 0..3 {
        out.data_mut()[ch * plane..(ch + 1) * plane].copy_from_slice(&src);
    }
    out
}

/// Region map plus ratios: everything needed to mix a training batch.
#[derive(Clone, Debug)]
pub struct PedMix {
    pub map: RegionMap,
    pub ratios: MixRatios,
}

impl PedMix {
    pub fn new(map: RegionMap, ratios: MixRatios) -> Result<Self> {
        ratios.validate()?;
        Ok(PedMix { map, ratios })
    }

    /// Mixes index-aligned `[N,3,H,W]` visible/infrared batches into `[2N,3,H,W]`,
    /// drawing an independent mask for every output image.
    pub fn mix_batch<R: Rng + ?Sized>(&self, x_v: &Tensor, x_i: &Tensor, rng: &mut R) -> Result<Tensor> {
        ensure!(
            x_v.shape() == x_i.shape() && x_v.ndim() == 4,
            "pedmix batches must match, got {:?} and {:?}",
            x_v.shape(),
            x_i.shape()
        );
        let n = x_v.shape()[0];
        let mut mixed_v = Vec::with_capacity(n);
        let mut mixed_i = Vec::with_capacity(n);
        for k in 0..n {
            let pair = ImagePair {
                x_v: x_v.slice_outer(k, 1).reshape(&x_v.shape()[1..]),
                x_i: x_i.slice_outer(k, 1).reshape(&x_i.shape()[1..]),
                identity: k,
            };
            let mask_v = sample_masks(&self.map, &self.ratios, rng);
            let mask_i = sample_masks(&self.map, &self.ratios, rng);
            let (a, b) = mix_pair(&pair, &mask_v, &mask_i, self.map.patch_size)?;
            mixed_v.push(a);
            mixed_i.push(b);
        }
        concat_mixed(&mixed_v, &mixed_i)
    }
}
