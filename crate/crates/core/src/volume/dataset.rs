//! On-disk phantom datasets: one volume file per subject plus a text manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{read_volume, synth_subject, write_volume, GeneratorConfig, Volume};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_MAGIC: &str = "# DGAMANIFEST";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::format("split", format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    /// 28,675 / 1,323 / 5,293 subjects, rescaled to sum to one.
    fn default() -> Self {
        let total = 28_675.0 + 1_323.0 + 5_293.0;
        Self { train: 28_675.0 / total, val: 1_323.0 / total, test: 5_293.0 / total }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::config(format!("split fractions must be non-negative: {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions must sum to 1, got {parts:?}")));
        }
        Ok(())
    }

    /// Floors the val and test sizes; train takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = (n as f64 * self.val).floor() as usize;
        let test = (n as f64 * self.test).floor() as usize;
        let val = val.min(n);
        let test = test.min(n - val);
        (n - val - test, val, test)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub age: f64,
    pub subject_seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: GeneratorConfig,
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<Volume> {
        read_volume(&self.resolve(entry))
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = format!("{MANIFEST_MAGIC} v{}\n[config]\n", self.version);
        let _ = writeln!(s, "shape={},{},{}", c.shape[0], c.shape[1], c.shape[2]);
        let _ = writeln!(s, "axis={}", c.axis);
        let _ = writeln!(s, "instance_size={}", c.instance_size);
        let _ = writeln!(s, "min_bag_size={}", c.min_bag_size);
        let _ = writeln!(s, "age_min={}", c.age_min);
        let _ = writeln!(s, "age_max={}", c.age_max);
        let _ = writeln!(s, "noise={}", c.noise);
        let _ = writeln!(s, "perturbation={}", c.perturbation);
        let _ = writeln!(s, "perturbation_blobs={}", c.perturbation_blobs);
        let _ = writeln!(s, "signal_extent={},{}", c.signal_extent.0, c.signal_extent.1);
        let _ = writeln!(s, "signal_contrast={}", c.signal_contrast);
        if let Some(k) = c.slab_instances {
            let _ = writeln!(s, "slab_instances={k}");
        }
        let _ = writeln!(s, "slab_position={}", c.slab_position);
        s.push_str("[entries]\n");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.path.display(), e.age, e.subject_seed, e.split.as_str());
        }
        s
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().unwrap_or("");
        let version = head
            .strip_prefix(MANIFEST_MAGIC)
            .and_then(|r| r.trim().strip_prefix('v'))
            .ok_or_else(|| Error::format("magic", format!("not a manifest header: {head:?}")))?
            .parse::<u32>()
            .map_err(|e| Error::format("version", e.to_string()))?;
        if version != MANIFEST_VERSION {
            return Err(Error::format("version", format!("unsupported manifest version {version}")));
        }
        let mut config = GeneratorConfig { slab_instances: None, ..Default::default() };
        let mut entries = Vec::new();
        let mut section = "";
        for line in lines {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                section = line;
                continue;
            }
            match section {
                "[config]" => apply_config_line(&mut config, line)?,
                "[entries]" => entries.push(parse_entry(line)?),
                _ => return Err(Error::format("section", format!("line outside a section: {line:?}"))),
            }
        }
        let manifest = Self { version, config, entries, root };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(Error::format("path", format!("duplicate entry {}", e.path.display())));
            }
            self.config.check_age(e.age).map_err(|_| Error::format("age", format!("{} out of range", e.age)))?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    /// SHA-256 of the manifest text, hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn apply_config_line(c: &mut GeneratorConfig, line: &str) -> Result<()> {
    let (k, v) = line.split_once('=').ok_or_else(|| Error::format("config", format!("malformed line {line:?}")))?;
    let f = |s: &str| s.parse::<f64>().map_err(|e| Error::format(k, e.to_string()));
    let u = |s: &str| s.parse::<usize>().map_err(|e| Error::format(k, e.to_string()));
    match k {
        "shape" => {
            let parts = v.split(',').map(u).collect::<Result<Vec<_>>>()?;
            c.shape = parts.try_into().map_err(|_| Error::format(k, "expected three axes"))?;
        }
        "axis" => c.axis = u(v)?,
        "instance_size" => c.instance_size = u(v)?,
        "min_bag_size" => c.min_bag_size = u(v)?,
        "age_min" => c.age_min = f(v)?,
        "age_max" => c.age_max = f(v)?,
        "noise" => c.noise = f(v)?,
        "perturbation" => c.perturbation = f(v)?,
        "perturbation_blobs" => c.perturbation_blobs = u(v)?,
        "signal_extent" => {
            let (a, b) = v.split_once(',').ok_or_else(|| Error::format(k, "expected LO,HI"))?;
            c.signal_extent = (f(a)?, f(b)?);
        }
        "signal_contrast" => c.signal_contrast = f(v)?,
        "slab_instances" => c.slab_instances = Some(u(v)?),
        "slab_position" => c.slab_position = f(v)?,
        other => return Err(Error::format(other, "unknown config key")),
    }
    Ok(())
}

fn parse_entry(line: &str) -> Result<ManifestEntry> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 4 {
        return Err(Error::format("entry", format!("expected 4 tab-separated columns: {line:?}")));
    }
    Ok(ManifestEntry {
        path: PathBuf::from(cols[0]),
        age: cols[1].parse().map_err(|e: std::num::ParseFloatError| Error::format("age", e.to_string()))?,
        subject_seed: cols[2].parse().map_err(|e: std::num::ParseIntError| Error::format("seed", e.to_string()))?,
        split: cols[3].parse()?,
    })
}

/// Generates `n_subjects` phantoms with uniformly drawn ages, writes them and a
/// `manifest.txt` under `out_dir`, and returns the manifest.
pub fn synth_dataset(
    config: &GeneratorConfig,
    n_subjects: usize,
    fractions: SplitFractions,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    fractions.validate()?;
    if n_subjects < 3 {
        return Err(Error::config(format!("need at least 3 subjects, got {n_subjects}")));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_train, n_val, _) = fractions.sizes(n_subjects);
    let mut entries = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        let age = rng.random_range(config.age_min..=config.age_max);
        let subject_seed: u64 = rng.random();
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let path = PathBuf::from(format!("subject_{i:05}.vol"));
        let volume = synth_subject(subject_seed, age, config)?;
        write_volume(&volume, &out_dir.join(&path))?;
        entries.push(ManifestEntry { path, age, subject_seed, split });
    }
    let manifest =
        DatasetManifest { version: MANIFEST_VERSION, config: config.clone(), entries, root: out_dir.to_path_buf() };
    manifest.write(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}
