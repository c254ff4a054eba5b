//! Synthetic aging phantoms.
//!
//! A phantom is a smooth two-Gaussian template inside an ellipsoidal head
//! mask, plus an age-independent per-subject perturbation (random Gaussian
//! blobs), plus an age signal: an attenuated ellipsoid confined to a slab of
//! slices along the bagging axis whose in-plane radius grows linearly with
//! age, plus voxel noise. Everything random is seeded by the subject seed only,
//! so two ages of one subject differ only inside the slab.

mod dataset;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use dataset::{synth_dataset, DatasetManifest, ManifestEntry, Split, SplitFractions, MANIFEST_VERSION};

use crate::container::Container;
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &str = "DGAVOL1";

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// Row-major over `shape` (last axis fastest).
    pub voxels: Vec<f32>,
    pub shape: [usize; 3],
    pub age: f64,
    pub subject_seed: u64,
    /// Axis along which instances are cut and the signal slab is measured.
    pub axis: usize,
    /// Inclusive slice range holding the planted signal.
    pub signal_slab: (usize, usize),
}

impl Volume {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Mean intensity over the slices of the signal slab.
    pub fn slab_mean(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for x in 0..self.shape[0] {
            for y in 0..self.shape[1] {
                for z in 0..self.shape[2] {
                    let c = [x, y, z][self.axis];
                    if c >= self.signal_slab.0 && c <= self.signal_slab.1 {
                        sum += self.get(x, y, z) as f64;
                        n += 1;
                    }
                }
            }
        }
        sum / n.max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxels.len() != self.shape.iter().product::<usize>() {
            return Err(Error::shape(self.shape, self.voxels.len()));
        }
        if self.axis > 2 {
            return Err(Error::config(format!("axis {} out of range", self.axis)));
        }
        let len = self.shape[self.axis];
        if self.signal_slab.0 > self.signal_slab.1 || self.signal_slab.1 >= len {
            return Err(Error::config(format!("signal slab {:?} outside axis of length {len}", self.signal_slab)));
        }
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite voxel".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub shape: [usize; 3],
    pub axis: usize,
    /// Slices per instance; the slab is aligned to multiples of it.
    pub instance_size: usize,
    /// Smallest bag the volume must support along `axis`.
    pub min_bag_size: usize,
    pub age_min: f64,
    pub age_max: f64,
    /// Noise std as a fraction of the template's dynamic range.
    pub noise: f64,
    /// Peak amplitude of each per-subject blob (template peak is about 1).
    pub perturbation: f64,
    pub perturbation_blobs: usize,
    /// Signal region diameter as a fraction of each in-plane axis, at `age_min` and `age_max`.
    pub signal_extent: (f64, f64),
    /// Intensity multiplier inside the signal region.
    pub signal_contrast: f64,
    /// Slab length in instances; `None` uses a quarter of the instances.
    pub slab_instances: Option<usize>,
    /// Slab start as a fraction of the instance count.
    pub slab_position: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            shape: [24, 48, 24],
            axis: 1,
            instance_size: 3,
            min_bag_size: 1,
            age_min: 44.0,
            age_max: 82.0,
            noise: 0.1,
            perturbation: 0.3,
            perturbation_blobs: 6,
            signal_extent: (0.20, 0.45),
            signal_contrast: 0.6,
            slab_instances: None,
            slab_position: 0.55,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.axis > 2 {
            return Err(Error::config(format!("bagging axis {} must be 0, 1 or 2", self.axis)));
        }
        if self.instance_size == 0 || self.min_bag_size == 0 {
            return Err(Error::config("instance size and minimum bag size must be positive"));
        }
        if let Some(i) = self.shape.iter().position(|&d| d < self.instance_size) {
            return Err(Error::config(format!(
                "degenerate shape {:?}: axis {i} shorter than instance size {}",
                self.shape, self.instance_size
            )));
        }
        if self.shape[self.axis] < self.instance_size * self.min_bag_size {
            return Err(Error::config(format!(
                "bagging axis length {} < {} x {}",
                self.shape[self.axis], self.instance_size, self.min_bag_size
            )));
        }
        if !(self.age_min.is_finite() && self.age_max.is_finite() && self.age_min < self.age_max) {
            return Err(Error::config(format!("invalid age range [{}, {}]", self.age_min, self.age_max)));
        }
        if self.noise < 0.0 || self.perturbation < 0.0 {
            return Err(Error::config("noise and perturbation amplitudes must be non-negative"));
        }
        let (lo, hi) = self.signal_extent;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::config(format!("signal extent ({lo}, {hi}) must satisfy 0 < lo <= hi < 1")));
        }
        if !(0.0..=1.0).contains(&self.signal_contrast) {
            return Err(Error::config("signal contrast must lie in [0, 1]"));
        }
        if self.slab_instances == Some(0) {
            return Err(Error::config("slab must span at least one instance"));
        }
        Ok(())
    }

    pub fn instances(&self) -> usize {
        self.shape[self.axis] / self.instance_size
    }

    /// Inclusive slice range of the signal slab, aligned to instance boundaries.
    pub fn signal_slab(&self) -> (usize, usize) {
        let k = self.instances();
        let len = self.slab_instances.unwrap_or((k / 4).max(1)).min(k);
        let start = ((self.slab_position * k as f64).round() as usize).min(k - len);
        // instances are counted from the centred crop used at bagging time
        let offset = (self.shape[self.axis] - k * self.instance_size) / 2;
        let m = self.instance_size;
        (offset + start * m, offset + (start + len) * m - 1)
    }

    /// In-plane signal-region radius in voxels along each in-plane axis.
    pub fn signal_radius(&self, age: f64) -> [f64; 2] {
        let t = (age - self.age_min) / (self.age_max - self.age_min);
        let frac = self.signal_extent.0 + t * (self.signal_extent.1 - self.signal_extent.0);
        let plane = self.plane_axes();
        [0.5 * frac * self.shape[plane[0]] as f64, 0.5 * frac * self.shape[plane[1]] as f64]
    }

    fn plane_axes(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    pub fn check_age(&self, age: f64) -> Result<()> {
        if !(age >= self.age_min && age <= self.age_max) {
            return Err(Error::config(format!(
                "age {age} outside configured range [{}, {}]",
                self.age_min, self.age_max
            )));
        }
        Ok(())
    }
}

struct Blob {
    center: [f64; 3],
    sigma: [f64; 3],
    amplitude: f64,
}

impl Blob {
    fn eval(&self, p: [f64; 3]) -> f64 {
        let mut q = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.sigma[a];
            q += d * d;
        }
        self.amplitude * (-0.5 * q).exp()
    }
}

fn template_blobs(shape: [usize; 3]) -> [Blob; 2] {
    let s = shape.map(|d| d as f64);
    [
        // head
        Blob { center: s.map(|d| 0.5 * (d - 1.0)), sigma: s.map(|d| 0.3 * d), amplitude: 1.0 },
        // cortex band
        Blob {
            center: [0.5 * (s[0] - 1.0), 0.3 * s[1], 0.5 * (s[2] - 1.0)],
            sigma: [0.35 * s[0], 0.12 * s[1], 0.35 * s[2]],
            amplitude: 0.5,
        },
    ]
}

/// Generates one subject. Deterministic in `(subject_seed, age, config)`.
pub fn synth_subject(subject_seed: u64, age: f64, config: &GeneratorConfig) -> Result<Volume> {
    config.validate()?;
    config.check_age(age)?;
    let shape = config.shape;
    let s = shape.map(|d| d as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);

    let blobs: Vec<Blob> = (0..config.perturbation_blobs)
        .map(|_| {
            let center = [0, 1, 2].map(|a| rng.random_range(0.2..0.8) * s[a]);
            let width = rng.random_range(0.05..0.12);
            let sigma = s.map(|d| width * d);
            let amplitude = config.perturbation * rng.random_range(-1.0..1.0);
            Blob { center, sigma, amplitude }
        })
        .collect();

    let template = template_blobs(shape);
    let n: usize = shape.iter().product();
    let mut base = vec![0.0f64; n];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut idx = 0;
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let p = [x as f64, y as f64, z as f64];
                let t = template[0].eval(p) + template[1].eval(p);
                lo = lo.min(t);
                hi = hi.max(t);
                base[idx] = t;
                idx += 1;
            }
        }
    }
    let sigma = config.noise * (hi - lo);
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::config(e.to_string()))?;

    let slab = config.signal_slab();
    let slab_center = 0.5 * (slab.0 + slab.1) as f64;
    let slab_half = 0.5 * (slab.1 - slab.0 + 1) as f64;
    let radius = config.signal_radius(age);
    let plane = config.plane_axes();
    let center = s.map(|d| 0.5 * (d - 1.0));

    let mut voxels = vec![0.0f32; n];
    let mut idx = 0;
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let p = [x as f64, y as f64, z as f64];
                // noise is drawn for every voxel so its stream is independent of age and mask
                let eps = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let head: f64 = (0..3).map(|a| ((p[a] - center[a]) / (0.45 * s[a])).powi(2)).sum();
                if head > 1.0 {
                    idx += 1;
                    continue;
                }
                let mut v = base[idx] + blobs.iter().map(|b| b.eval(p)).sum::<f64>();
                let da = (p[config.axis] - slab_center) / slab_half;
                let d0 = (p[plane[0]] - center[plane[0]]) / radius[0];
                let d1 = (p[plane[1]] - center[plane[1]]) / radius[1];
                if da * da + d0 * d0 + d1 * d1 <= 1.0 {
                    v *= config.signal_contrast;
                }
                voxels[idx] = (v + eps) as f32;
                idx += 1;
            }
        }
    }
    Ok(Volume { voxels, shape, age, subject_seed, axis: config.axis, signal_slab: slab })
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    volume.validate()?;
    Container::new(VOLUME_MAGIC, volume.shape.to_vec(), volume.voxels.clone())
        .with("age", volume.age)
        .with("subject_seed", volume.subject_seed)
        .with("axis", volume.axis)
        .with("signal_slab", format!("{},{}", volume.signal_slab.0, volume.signal_slab.1))
        .write(path)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let c = Container::read(path, VOLUME_MAGIC)?;
    let shape: [usize; 3] = c.shape.clone().try_into().map_err(|_| Error::format("shape", "expected three axes"))?;
    let slab = c.field("signal_slab")?;
    let (a, b) = slab.split_once(',').ok_or_else(|| Error::format("signal_slab", "expected START,END"))?;
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::format("signal_slab", e.to_string()));
    let volume = Volume {
        voxels: c.payload.clone(),
        shape,
        age: c.parse_field("age")?,
        subject_seed: c.parse_field("subject_seed")?,
        axis: c.parse_field("axis")?,
        signal_slab: (parse(a)?, parse(b)?),
    };
    if volume.axis > 2 || volume.signal_slab.1 >= shape[volume.axis] || volume.signal_slab.0 > volume.signal_slab.1 {
        return Err(Error::format("signal_slab", format!("{slab} invalid for shape {shape:?}")));
    }
    Ok(volume)
}
