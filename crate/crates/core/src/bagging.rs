//! Volume to bag conversion: optional cropping, intensity normalization and
//! slicing into K instances of m adjacent slices along one axis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::Volume;

pub const BAG_MAGIC: &str = "DGABAG1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// Standardize over all voxels.
    #[serde(rename = "zscore")]
    ZScore,
    /// Standardize over nonzero voxels; zeros stay zero.
    #[default]
    #[serde(rename = "zscore-nonzero")]
    ZScoreNonzero,
    #[serde(rename = "minmax")]
    MinMax,
    #[serde(rename = "none")]
    None,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::ZScore => "zscore",
            Normalization::ZScoreNonzero => "zscore-nonzero",
            Normalization::MinMax => "minmax",
            Normalization::None => "none",
        }
    }
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(Self::ZScore),
            "zscore-nonzero" => Ok(Self::ZScoreNonzero),
            "minmax" => Ok(Self::MinMax),
            "none" => Ok(Self::None),
            other => Err(Error::config(format!("unknown normalization {other:?}"))),
        }
    }
}

/// Minimal bounding box of strictly positive voxels.
pub fn crop_to_mask(volume: &Volume) -> Result<Volume> {
    let [dx, dy, dz] = volume.shape;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for x in 0..dx {
        for y in 0..dy {
            for z in 0..dz {
                if volume.get(x, y, z) > 0.0 {
                    for (a, c) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c);
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(Error::Degenerate("volume has no positive voxels".into()));
    }
    let shape = [0, 1, 2].map(|a| hi[a] - lo[a] + 1);
    let mut voxels = Vec::with_capacity(shape.iter().product());
    for x in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for z in lo[2]..=hi[2] {
                voxels.push(volume.get(x, y, z));
            }
        }
    }
    let a = volume.axis;
    let shift = |s: usize| s.saturating_sub(lo[a]).min(shape[a] - 1);
    Ok(Volume {
        voxels,
        shape,
        signal_slab: (shift(volume.signal_slab.0), shift(volume.signal_slab.1)),
        ..volume.clone()
    })
}

pub fn normalize_volume(volume: &Volume, mode: Normalization) -> Result<Volume> {
    let v = &volume.voxels;
    let voxels = match mode {
        Normalization::None => v.clone(),
        Normalization::ZScore | Normalization::ZScoreNonzero => {
            let nonzero = mode == Normalization::ZScoreNonzero;
            let sel = || v.iter().map(|&x| x as f64).filter(move |&x| !nonzero || x != 0.0);
            let n = sel().count();
            if n == 0 {
                return Err(Error::Degenerate("no voxels to standardize".into()));
            }
            let mean = sel().sum::<f64>() / n as f64;
            let var = sel().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if std <= 1e-12 * mean.abs().max(1.0) {
                return Err(Error::Degenerate("constant volume cannot be standardized".into()));
            }
            v.iter()
                .map(|&x| if nonzero && x == 0.0 { 0.0 } else { ((x as f64 - mean) / std) as f32 })
                .collect()
        }
        Normalization::MinMax => {
            let lo = v.iter().copied().fold(f32::INFINITY, f32::min) as f64;
            let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let range = hi - lo;
            v.iter()
                .map(|&x| if range > 0.0 { (((x as f64 - lo) / range) as f32).clamp(0.0, 1.0) } else { 0.0 })
                .collect()
        }
    };
    Ok(Volume { voxels, ..volume.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagConfig {
    pub m: usize,
    /// Instances per bag; `None` takes as many as fit.
    pub k: Option<usize>,
    pub axis: usize,
    pub norm: Normalization,
    /// In-plane sizes are zero padded symmetrically up to a multiple of this.
    pub pad_multiple: usize,
    pub crop: bool,
}

impl Default for BagConfig {
    fn default() -> Self {
        Self { m: 3, k: None, axis: 1, norm: Normalization::default(), pad_multiple: 1, crop: false }
    }
}

impl BagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == Some(0) || self.pad_multiple == 0 {
            return Err(Error::config("m, k and pad multiple must be positive"));
        }
        if self.axis > 2 {
            return Err(Error::config(format!("bagging axis {} must be 0, 1 or 2", self.axis)));
        }
        Ok(())
    }

    pub fn bag_size(&self, axis_len: usize) -> Result<usize> {
        let k = self.k.unwrap_or(axis_len / self.m);
        if k == 0 || k * self.m > axis_len {
            return Err(Error::config(format!("{k} instances of {} slices exceed axis length {axis_len}", self.m)));
        }
        Ok(k)
    }

    /// Padded in-plane size for a volume of `shape`.
    pub fn plane_shape(&self, shape: [usize; 3]) -> [usize; 2] {
        let p = plane_axes(self.axis);
        [shape[p[0]], shape[p[1]]].map(|d| d.div_ceil(self.pad_multiple) * self.pad_multiple)
    }
}

fn plane_axes(axis: usize) -> [usize; 2] {
    match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    /// `[K, m, H, W]` row-major.
    pub data: Vec<f32>,
    pub k: usize,
    pub m: usize,
    pub height: usize,
    pub width: usize,
    pub age: f64,
    pub subject_id: u64,
    /// Half-open slice range of each instance along the bagging axis.
    pub instance_ranges: Vec<(usize, usize)>,
    /// Inclusive range of instances overlapping the planted signal, if known.
    pub signal_instances: Option<(usize, usize)>,
}

impl Bag {
    pub fn shape(&self) -> [usize; 4] {
        [self.k, self.m, self.height, self.width]
    }

    pub fn instance(&self, j: usize) -> &[f32] {
        let n = self.m * self.height * self.width;
        &self.data[j * n..(j + 1) * n]
    }

    /// `[K, m, H, W]` in double precision.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn in_signal(&self, j: usize) -> bool {
        self.signal_instances.is_some_and(|(a, b)| j >= a && j <= b)
    }
}

/// Cuts `volume` into a bag. The K·m slices used are centred along the axis;
/// instance j channel c is slice `offset + j·m + c`.
pub fn make_bag(volume: &Volume, cfg: &BagConfig) -> Result<Bag> {
    cfg.validate()?;
    volume.validate()?;
    let volume = if cfg.crop { crop_to_mask(volume)? } else { volume.clone() };
    let volume = normalize_volume(&volume, cfg.norm)?;
    let len = volume.shape[cfg.axis];
    let k = cfg.bag_size(len)?;
    let m = cfg.m;
    let offset = (len - k * m) / 2;
    let plane = plane_axes(cfg.axis);
    let (h0, w0) = (volume.shape[plane[0]], volume.shape[plane[1]]);
    let [h, w] = cfg.plane_shape(volume.shape);
    let (ph, pw) = ((h - h0) / 2, (w - w0) / 2);

    let mut data = vec![0.0f32; k * m * h * w];
    for j in 0..k {
        for c in 0..m {
            let s = offset + j * m + c;
            let base = (j * m + c) * h * w;
            for a in 0..h0 {
                for b in 0..w0 {
                    let mut p = [0usize; 3];
                    p[cfg.axis] = s;
                    p[plane[0]] = a;
                    p[plane[1]] = b;
                    data[base + (a + ph) * w + b + pw] = volume.get(p[0], p[1], p[2]);
                }
            }
        }
    }
    let instance_ranges: Vec<_> = (0..k).map(|j| (offset + j * m, offset + (j + 1) * m)).collect();
    let signal_instances = (cfg.axis == volume.axis)
        .then(|| {
            let (s0, s1) = volume.signal_slab;
            let hit: Vec<usize> =
                (0..k).filter(|&j| instance_ranges[j].0 <= s1 && instance_ranges[j].1 > s0).collect();
            Some((*hit.first()?, *hit.last()?))
        })
        .flatten();
    Ok(Bag {
        data,
        k,
        m,
        height: h,
        width: w,
        age: volume.age,
        subject_id: volume.subject_seed,
        instance_ranges,
        signal_instances,
    })
}

pub fn write_bag(bag: &Bag, path: &Path) -> Result<()> {
    let offset = bag.instance_ranges.first().map_or(0, |r| r.0);
    let signal = bag.signal_instances.map_or("none".to_string(), |(a, b)| format!("{a},{b}"));
    Container::new(BAG_MAGIC, bag.shape().to_vec(), bag.data.clone())
        .with("age", bag.age)
        .with("subject_id", bag.subject_id)
        .with("offset", offset)
        .with("signal_instances", signal)
        .write(path)
}

pub fn read_bag(path: &Path) -> Result<Bag> {
    let c = Container::read(path, BAG_MAGIC)?;
    let [k, m, height, width]: [usize; 4] =
        c.shape.clone().try_into().map_err(|_| Error::format("shape", "expected K,m,H,W"))?;
    let offset: usize = c.parse_field("offset")?;
    let signal_instances = match c.field("signal_instances")? {
        "none" => None,
        s => {
            let (a, b) = s.split_once(',').ok_or_else(|| Error::format("signal_instances", "expected A,B"))?;
            let p = |t: &str| t.parse::<usize>().map_err(|e| Error::format("signal_instances", e.to_string()));
            Some((p(a)?, p(b)?))
        }
    };
    Ok(Bag {
        k,
        m,
        height,
        width,
        age: c.parse_field("age")?,
        subject_id: c.parse_field("subject_id")?,
        instance_ranges: (0..k).map(|j| (offset + j * m, offset + (j + 1) * m)).collect(),
        signal_instances,
        data: c.payload,
    })
}
