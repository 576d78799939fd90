//! Non-overlapping 3D patch decomposition, fixed sinusoidal positions and
//! the random masked/visible partition used for pretraining.

use serde::{Deserialize, Serialize};

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const AXES: [&str; 3] = ["depth", "height", "width"];

/// A volume tiled by equal patches; patch index is z-major over the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub volume: [usize; 3],
    pub patch: [usize; 3],
    pub grid: [usize; 3],
}

impl PatchGrid {
    pub fn new(volume: [usize; 3], patch: [usize; 3]) -> Result<Self> {
        let mut grid = [0; 3];
        for a in 0..3 {
            if patch[a] == 0 || volume[a] == 0 || volume[a] % patch[a] != 0 {
                return Err(Error::Config(format!(
                    "{} axis: patch extent {} does not divide volume extent {}",
                    AXES[a], patch[a], volume[a]
                )));
            }
            grid[a] = volume[a] / patch[a];
        }
        Ok(Self { volume, patch, grid })
    }

    /// Number of patches `N`.
    pub fn len(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxels per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn coord(&self, i: usize) -> [usize; 3] {
        let [_, gh, gw] = self.grid;
        [i / (gh * gw), (i / gw) % gh, i % gw]
    }

    pub fn index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.grid[1] + c[1]) * self.grid[2] + c[2]
    }

    /// Patch index and local z-major offset of voxel `(z, y, x)`.
    pub fn locate(&self, v: [usize; 3]) -> (usize, [usize; 3]) {
        let cell = [0, 1, 2].map(|a| v[a] / self.patch[a]);
        let local = [0, 1, 2].map(|a| v[a] % self.patch[a]);
        (self.index(cell), local)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenForm {
    /// `patch_dim` voxel values per token.
    Raw,
    /// Learned embedding per token.
    Embedded,
}

/// Tokens of one volume, `n × width`.
#[derive(Debug, Clone)]
pub struct PatchSequence<T: Scalar> {
    pub grid: PatchGrid,
    pub tokens: Tensor<T>,
    pub form: TokenForm,
    /// Original patch indices when the sequence is a subset of the grid.
    pub source: Option<Vec<usize>>,
}

impl<T: Scalar> PatchSequence<T> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flattens the volume into `N × patch_dim` values (no tensor).
pub fn patch_values(v: &Volume, grid: &PatchGrid) -> Vec<f32> {
    let [pd, ph, pw] = grid.patch;
    let mut out = Vec::with_capacity(v.voxels.len());
    for i in 0..grid.len() {
        let [gz, gy, gx] = grid.coord(i);
        for lz in 0..pd {
            for ly in 0..ph {
                let start = v.index(gz * pd + lz, gy * ph + ly, gx * pw);
                out.extend_from_slice(&v.voxels[start..start + pw]);
            }
        }
    }
    out
}

pub fn patchify<T: Scalar>(v: &Volume, patch: [usize; 3]) -> Result<PatchSequence<T>> {
    let grid = PatchGrid::new(v.extents, patch)?;
    let data = patch_values(v, &grid).into_iter().map(|x| T::lit(x as f64)).collect();
    Ok(PatchSequence {
        grid,
        tokens: Tensor::from_vec(&[grid.len(), grid.patch_dim()], data)?,
        form: TokenForm::Raw,
        source: None,
    })
}

pub fn unpatchify<T: Scalar>(p: &PatchSequence<T>) -> Result<Volume> {
    let grid = p.grid;
    if p.form != TokenForm::Raw || p.source.is_some() || p.tokens.shape() != [grid.len(), grid.patch_dim()] {
        return Err(Error::Contract(format!(
            "unpatchify needs a full raw sequence of shape [{}, {}], got {:?} {:?}",
            grid.len(),
            grid.patch_dim(),
            p.form,
            p.tokens.shape()
        )));
    }
    let [pd, ph, pw] = grid.patch;
    let mut voxels = vec![0f32; grid.volume.iter().product()];
    let mut vol = Volume::new(grid.volume, vec![0.0; voxels.len()])?;
    let src = p.tokens.data();
    for i in 0..grid.len() {
        let [gz, gy, gx] = grid.coord(i);
        let tok = &src[i * grid.patch_dim()..(i + 1) * grid.patch_dim()];
        for lz in 0..pd {
            for ly in 0..ph {
                let start = vol.index(gz * pd + lz, gy * ph + ly, gx * pw);
                let row = &tok[(lz * ph + ly) * pw..(lz * ph + ly + 1) * pw];
                for (d, s) in voxels[start..start + pw].iter_mut().zip(row) {
                    *d = s.as_f64() as f32;
                }
            }
        }
    }
    vol.voxels = voxels;
    Ok(vol)
}

/// Fixed 3D sinusoidal encoding, `N × dim`: `dim/3` channels per axis as
/// interleaved `sin, cos` pairs over the usual geometric frequency ladder,
/// concatenated in `(z, y, x)` order.
pub fn positional_encoding<T: Scalar>(grid: &PatchGrid, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 6 != 0 {
        return Err(Error::Config(format!(
            "positional encoding width {dim} must be a positive multiple of 6"
        )));
    }
    let per_axis = dim / 3;
    let freqs: Vec<f64> = (0..per_axis / 2)
        .map(|j| 1.0 / 10000f64.powf(2.0 * j as f64 / per_axis as f64))
        .collect();
    let mut data = Vec::with_capacity(grid.len() * dim);
    for i in 0..grid.len() {
        for pos in grid.coord(i) {
            for &w in &freqs {
                let angle = pos as f64 * w;
                data.push(T::lit(angle.sin()));
                data.push(T::lit(angle.cos()));
            }
        }
    }
    Tensor::from_vec(&[grid.len(), dim], data)
}

/// A partition of the patch indices into masked and visible sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub grid: PatchGrid,
    pub ratio: f64,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

/// `ceil(ratio · n)`, tolerant of representation error in `ratio`.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64 - 1e-9).ceil().max(0.0) as usize
}

pub fn sample_mask(grid: &PatchGrid, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Param(format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    let n = grid.len();
    let k = masked_count(n, ratio);
    if k == 0 || k >= n {
        return Err(Error::Param(format!(
            "mask ratio {ratio} masks {k} of {n} patches; both sets must be non-empty"
        )));
    }
    let order = rng.permutation(n);
    let mut masked = order[..k].to_vec();
    let mut visible = order[k..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan {
        grid: *grid,
        ratio,
        masked,
        visible,
    })
}

impl MaskPlan {
    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }

    /// For each patch, its row in `[visible tokens; mask token]`.
    pub fn scatter_index(&self) -> Vec<usize> {
        let v = self.visible.len();
        let mut idx = vec![v; self.grid.len()];
        for (row, &i) in self.visible.iter().enumerate() {
            idx[i] = row;
        }
        idx
    }
}

/// Keeps the visible tokens, ascending by original index.
pub fn gather_visible<T: Scalar>(p: &PatchSequence<T>, m: &MaskPlan) -> Result<PatchSequence<T>> {
    if p.grid != m.grid || p.source.is_some() {
        return Err(Error::Contract(format!(
            "gather_visible: sequence grid {:?} does not match mask grid {:?}",
            p.grid.grid, m.grid.grid
        )));
    }
    Ok(PatchSequence {
        grid: p.grid,
        tokens: p.tokens.index_select(0, &m.visible)?,
        form: p.form,
        source: Some(m.visible.clone()),
    })
}

/// Restores visible tokens to their slots and fills masked slots with
/// `mask_token`.
pub fn scatter_full<T: Scalar>(visible: &PatchSequence<T>, mask_token: &Tensor<T>, m: &MaskPlan) -> Result<PatchSequence<T>> {
    let width = visible.tokens.shape()[1];
    if visible.len() != m.visible.len() || visible.grid != m.grid {
        return Err(Error::Contract(format!(
            "scatter_full: {} visible tokens for a plan with {} visible patches",
            visible.len(),
            m.visible.len()
        )));
    }
    if mask_token.numel() != width {
        return Err(Error::Shape {
            op: "scatter_full",
            lhs: visible.tokens.shape().to_vec(),
            rhs: mask_token.shape().to_vec(),
        });
    }
    let rows = Tensor::concat(&[&visible.tokens, &mask_token.reshape(&[1, width])?], 0)?;
    Ok(PatchSequence {
        grid: m.grid,
        tokens: rows.index_select(0, &m.scatter_index())?,
        form: visible.form,
        source: None,
    })
}
