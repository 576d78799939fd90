//! Seeded synthetic phantoms: an ellipsoidal organ containing a spherical
//! lesion on background, with exact voxel labels.

pub(crate) mod io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use io::{decode_volume, encode_volume, read_dataset, read_volume, write_dataset, write_volume, VOLUME_FORMAT_VERSION, VOLUME_MAGIC};

pub const BACKGROUND: u8 = 0;
pub const ORGAN: u8 = 1;
pub const LESION: u8 = 2;

/// Single-channel intensity grid, D-major (`index = (z·H + y)·W + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    /// Voxel spacing, informational only.
    pub spacing: [f64; 3],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        let n: usize = extents.iter().product();
        if n == 0 || voxels.len() != n {
            return Err(Error::Contract(format!(
                "volume extents {extents:?} need {n} voxels, got {}",
                voxels.len()
            )));
        }
        Ok(Self {
            extents,
            spacing: [1.0; 3],
            voxels,
        })
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }
}

/// Per-voxel class ids in `[0, num_classes)`, same layout as [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub extents: [usize; 3],
    pub num_classes: u8,
    pub classes: Vec<u8>,
}

impl LabelMap {
    pub fn new(extents: [usize; 3], num_classes: u8, classes: Vec<u8>) -> Result<Self> {
        let n: usize = extents.iter().product();
        if n == 0 || classes.len() != n {
            return Err(Error::Contract(format!(
                "label extents {extents:?} need {n} entries, got {}",
                classes.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        if let Some(bad) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Data(format!(
                "class id {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            extents,
            num_classes,
            classes,
        })
    }

    pub fn count(&self, class: u8) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub extents: [usize; 3],
    /// 2 (background, organ) or 3 (background, organ, lesion).
    pub num_classes: usize,
    /// Organ semi-axis range as fractions of each extent.
    pub organ_radius: [f64; 2],
    /// Lesion radius range as fractions of the smallest extent.
    pub lesion_radius: [f64; 2],
    /// Mean intensity per class.
    pub intensity_means: Vec<f64>,
    pub noise_sigma: f64,
    pub spacing: [f64; 3],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            extents: [32, 32, 32],
            num_classes: 3,
            organ_radius: [0.22, 0.38],
            lesion_radius: [0.08, 0.14],
            intensity_means: vec![0.0, 1.0, 2.0],
            noise_sigma: 0.15,
            spacing: [1.0, 1.0, 1.0],
        }
    }
}

impl PhantomConfig {
    pub fn with_extents(extents: [usize; 3]) -> Self {
        Self {
            extents,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(2..=3).contains(&self.num_classes) {
            return err(format!(
                "phantoms define 2 or 3 classes, got {}",
                self.num_classes
            ));
        }
        if self.intensity_means.len() != self.num_classes {
            return err(format!(
                "{} intensity means for {} classes",
                self.intensity_means.len(),
                self.num_classes
            ));
        }
        for (what, [lo, hi]) in [("organ", self.organ_radius), ("lesion", self.lesion_radius)] {
            if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
                return err(format!("{what} radius range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 0.5"));
            }
        }
        if !(self.noise_sigma >= 0.0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return err("noise sigma must be >= 0 and spacing positive".into());
        }
        let min_extent = *self.extents.iter().min().expect("3 extents") as f64;
        let organ_min = self.organ_radius[0] * min_extent;
        if organ_min < 2.0 {
            return err(format!(
                "extents {:?} too small: minimum organ radius {organ_min:.2} voxels < 2",
                self.extents
            ));
        }
        if self.num_classes == 3 {
            let lesion_min = self.lesion_radius[0] * min_extent;
            if lesion_min < 1.0 {
                return err(format!(
                    "extents {:?} too small: minimum lesion radius {lesion_min:.2} voxels < 1",
                    self.extents
                ));
            }
            if self.lesion_radius[1] >= self.organ_radius[0] {
                return err("lesion radius range must lie below the organ radius range".into());
            }
        }
        Ok(())
    }
}

/// Continuous shapes behind one phantom, in voxel units (voxel `i` spans
/// `[i, i+1)`, its center is `i + 0.5`).
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomGeometry {
    pub organ_center: [f64; 3],
    pub organ_radii: [f64; 3],
    pub lesion: Option<([f64; 3], f64)>,
}

impl PhantomGeometry {
    pub fn in_organ(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.organ_center[a]) / self.organ_radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    pub fn in_lesion(&self, p: [f64; 3]) -> bool {
        self.lesion.is_some_and(|(c, r)| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r)
    }

    fn sample(cfg: &PhantomConfig, rng: &mut Rng) -> Self {
        let e = cfg.extents.map(|v| v as f64);
        let mut organ_radii = [0.0; 3];
        let mut organ_center = [0.0; 3];
        for a in 0..3 {
            organ_radii[a] = rng.uniform_in(cfg.organ_radius[0], cfg.organ_radius[1]) * e[a];
            organ_center[a] = rng.uniform_in(organ_radii[a], e[a] - organ_radii[a]);
        }
        let lesion = (cfg.num_classes == 3).then(|| {
            let min_extent = e.iter().cloned().fold(f64::INFINITY, f64::min);
            let r = rng.uniform_in(cfg.lesion_radius[0], cfg.lesion_radius[1]) * min_extent;
            let r_min = organ_radii.iter().cloned().fold(f64::INFINITY, f64::min);
            // a center at normalized ellipsoid radius s keeps the ball inside
            // as long as s + r / r_min <= 1
            let s_max = 1.0 - r / r_min;
            let dir = loop {
                let v = [rng.normal(), rng.normal(), rng.normal()];
                let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    break v.map(|c| c / norm);
                }
            };
            let s = rng.uniform().cbrt() * s_max;
            let center = [0, 1, 2].map(|a| organ_center[a] + organ_radii[a] * s * dir[a]);
            (center, r)
        });
        Self {
            organ_center,
            organ_radii,
            lesion,
        }
    }
}

/// One phantom and its labels; deterministic in `rng`'s seed and stream.
pub fn generate_phantom(cfg: &PhantomConfig, rng: &mut Rng) -> Result<(Volume, LabelMap)> {
    let (v, l, _) = generate_phantom_with_geometry(cfg, rng)?;
    Ok((v, l))
}

pub fn generate_phantom_with_geometry(cfg: &PhantomConfig, rng: &mut Rng) -> Result<(Volume, LabelMap, PhantomGeometry)> {
    cfg.validate()?;
    let geom = PhantomGeometry::sample(cfg, rng);
    let [d, h, w] = cfg.extents;
    let mut classes = Vec::with_capacity(d * h * w);
    let mut voxels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let c = if geom.in_lesion(p) {
                    LESION
                } else if geom.in_organ(p) {
                    ORGAN
                } else {
                    BACKGROUND
                };
                classes.push(c);
                let noise = if cfg.noise_sigma > 0.0 { cfg.noise_sigma * rng.normal() } else { 0.0 };
                voxels.push((cfg.intensity_means[c as usize] + noise) as f32);
            }
        }
    }
    let mut volume = Volume::new(cfg.extents, voxels)?;
    volume.spacing = cfg.spacing;
    let labels = LabelMap::new(cfg.extents, cfg.num_classes as u8, classes)?;
    Ok((volume, labels, geom))
}

/// Z-scores all voxels; a constant volume maps to zeros.
pub fn normalize_volume(v: &Volume) -> Volume {
    let n = v.voxels.len() as f64;
    let mean = v.voxels.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.voxels.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let voxels = if std < 1e-12 {
        vec![0.0; v.voxels.len()]
    } else {
        v.voxels.iter().map(|&x| ((x as f64 - mean) / std) as f32).collect()
    };
    Volume {
        extents: v.extents,
        spacing: v.spacing,
        voxels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    PretrainUnlabeled,
    TrainLabeled,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::PretrainUnlabeled, Split::TrainLabeled, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::PretrainUnlabeled => "pretrain-unlabeled",
            Split::TrainLabeled => "train-labeled",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Item counts per split, in [`Split::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub pretrain_unlabeled: usize,
    pub train_labeled: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn new(pretrain_unlabeled: usize, train_labeled: usize, validation: usize, test: usize) -> Self {
        Self {
            pretrain_unlabeled,
            train_labeled,
            validation,
            test,
        }
    }

    pub fn get(&self, s: Split) -> usize {
        match s {
            Split::PretrainUnlabeled => self.pretrain_unlabeled,
            Split::TrainLabeled => self.train_labeled,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        Split::ALL.iter().map(|&s| self.get(s)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub volume: Volume,
    pub labels: Option<LabelMap>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitIndices {
    pub pretrain_unlabeled: Vec<usize>,
    pub train_labeled: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn get(&self, s: Split) -> &[usize] {
        match s {
            Split::PretrainUnlabeled => &self.pretrain_unlabeled,
            Split::TrainLabeled => &self.train_labeled,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, s: Split) -> &mut Vec<usize> {
        match s {
            Split::PretrainUnlabeled => &mut self.pretrain_unlabeled,
            Split::TrainLabeled => &mut self.train_labeled,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub splits: SplitIndices,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[usize] {
        self.splits.get(s)
    }

    pub fn items_in(&self, s: Split) -> impl Iterator<Item = &Item> {
        self.split(s).iter().map(move |&i| &self.items[i])
    }

    /// Splits are disjoint, in range, and only the unlabeled split may lack labels
    /// (it must lack them).
    pub fn validate(&self) -> Result<()> {
        let mut owner = vec![None; self.items.len()];
        for s in Split::ALL {
            for &i in self.split(s) {
                let slot = owner
                    .get_mut(i)
                    .ok_or_else(|| Error::Data(format!("split {} references item {i} of {}", s.as_str(), self.items.len())))?;
                if let Some(prev) = slot.replace(s) {
                    return Err(Error::Data(format!(
                        "item {i} appears in both {} and {}",
                        Split::as_str(prev),
                        s.as_str()
                    )));
                }
                let labeled = self.items[i].labels.is_some();
                if (s == Split::PretrainUnlabeled) == labeled {
                    return Err(Error::Data(format!(
                        "item {i} in {} {} labels",
                        s.as_str(),
                        if labeled { "carries" } else { "lacks" }
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Builds a dataset whose item `k` of split `s` is drawn from the stream
/// `data/<split>/<k>` of `seed`.
pub fn generate_dataset(cfg: &PhantomConfig, counts: SplitCounts, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let jobs: Vec<(Split, usize)> = Split::ALL
        .iter()
        .flat_map(|&s| (0..counts.get(s)).map(move |k| (s, k)))
        .collect();
    let items = jobs
        .par_iter()
        .map(|&(s, k)| {
            let mut rng = Rng::new(seed, format!("data/{}/{k}", s.as_str()));
            let (volume, labels) = generate_phantom(cfg, &mut rng)?;
            let labels = (s != Split::PretrainUnlabeled).then_some(labels);
            Ok(Item { volume, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut splits = SplitIndices::default();
    for (i, &(s, _)) in jobs.iter().enumerate() {
        splits.get_mut(s).push(i);
    }
    let ds = Dataset { items, splits };
    ds.validate()?;
    Ok(ds)
}
