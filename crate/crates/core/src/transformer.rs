//! Hierarchical volumetric transformer encoder: pre-norm blocks with
//! window-local or global multi-head self-attention, and 2×2×2 patch
//! merging between stages.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, ParamStore};
use crate::patch::{positional_encoding, PatchGrid};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub volume: [usize; 3],
    pub patch: [usize; 3],
    /// Token width per stage; doubles from stage to stage.
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    /// Window extents in stage-grid units, for local stages.
    pub window: [usize; 3],
    pub kinds: Vec<AttentionKind>,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            volume: [32, 32, 32],
            patch: [4, 4, 4],
            dims: vec![24, 48, 96],
            depths: vec![2, 2, 2],
            heads: vec![2, 4, 8],
            window: [2, 2, 2],
            kinds: vec![AttentionKind::Local, AttentionKind::Local, AttentionKind::Global],
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    /// Two stages of width 6 and 12, one block each.
    pub fn tiny(volume: [usize; 3]) -> Self {
        Self {
            volume,
            patch: [4, 4, 4],
            dims: vec![6, 12],
            depths: vec![1, 1],
            heads: vec![1, 2],
            window: [2, 2, 2],
            kinds: vec![AttentionKind::Local, AttentionKind::Global],
            mlp_ratio: 2,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.dims.len()
    }

    pub fn patch_grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.volume, self.patch)
    }

    /// Grid extents of stage `s` (halved per merge).
    pub fn stage_grid(&self, s: usize) -> Result<[usize; 3]> {
        let g = self.patch_grid()?.grid;
        Ok(g.map(|e| e >> s))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let s = self.dims.len();
        if s == 0 || self.depths.len() != s || self.heads.len() != s || self.kinds.len() != s {
            return err(format!(
                "dims/depths/heads/kinds need one entry per stage: {:?} {:?} {:?} {:?}",
                self.dims, self.depths, self.heads, self.kinds
            ));
        }
        if self.kinds[s - 1] != AttentionKind::Global {
            return err("the final stage must use global attention".into());
        }
        if self.dims[0] == 0 || self.dims[0] % 6 != 0 {
            return err(format!(
                "stage-0 width {} must be a positive multiple of 6 (3 axes × sin/cos)",
                self.dims[0]
            ));
        }
        if self.mlp_ratio == 0 || self.depths.contains(&0) {
            return err("mlp ratio and per-stage depth must be >= 1".into());
        }
        let mut grid = self.patch_grid()?.grid;
        for st in 0..s {
            if st > 0 {
                if self.dims[st] != 2 * self.dims[st - 1] {
                    return err(format!("stage widths must double: {:?}", self.dims));
                }
                if grid.iter().any(|e| e % 2 != 0) {
                    return err(format!("stage {} grid {grid:?} has an odd extent; cannot merge", st - 1));
                }
                grid = grid.map(|e| e / 2);
            }
            if self.heads[st] == 0 || self.dims[st] % self.heads[st] != 0 {
                return err(format!(
                    "stage {st}: {} heads do not divide width {}",
                    self.heads[st], self.dims[st]
                ));
            }
            if self.kinds[st] == AttentionKind::Local && (0..3).any(|a| self.window[a] == 0 || grid[a] % self.window[a] != 0) {
                return err(format!(
                    "stage {st}: window {:?} does not divide grid {grid:?}",
                    self.window
                ));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

pub(crate) fn fingerprint_of<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Which tokens of a stage grid a `B × n × d` tensor holds.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenSet {
    /// Every grid position, in z-major order.
    Full,
    /// Per batch item, ascending grid indices (same count per item).
    Subset(Vec<Vec<usize>>),
}

#[derive(Debug, Clone)]
pub struct StageOutput<T: Scalar> {
    pub tokens: Tensor<T>,
    pub grid: [usize; 3],
    pub set: TokenSet,
}

/// Outputs of every encoder stage; the last one is the bottleneck.
#[derive(Debug, Clone)]
pub struct StageFeatures<T: Scalar> {
    pub stages: Vec<StageOutput<T>>,
}

impl<T: Scalar> StageFeatures<T> {
    pub fn bottleneck(&self) -> &StageOutput<T> {
        self.stages.last().expect("at least one stage")
    }
}

fn dims3<T: Scalar>(x: &Tensor<T>, op: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, n, d] => Ok((b, n, d)),
        _ => Err(Error::Contract(format!("{op} expects B × N × d tokens, got {:?}", x.shape()))),
    }
}

/// `B × N × d` over `grid` → `(B·windows) × window_len × d`.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, grid: [usize; 3], window: [usize; 3]) -> Result<Tensor<T>> {
    let (b, n, d) = dims3(x, "window_partition")?;
    if (0..3).any(|a| window[a] == 0 || grid[a] % window[a] != 0) || n != grid.iter().product::<usize>() {
        return Err(Error::Config(format!(
            "window {window:?} does not tile grid {grid:?} ({n} tokens)"
        )));
    }
    let [nd, nh, nw] = [0, 1, 2].map(|a| grid[a] / window[a]);
    let [wd, wh, ww] = window;
    x.reshape(&[b, nd, wd, nh, wh, nw, ww, d])?
        .permute(&[0, 1, 3, 5, 2, 4, 6, 7])?
        .reshape(&[b * nd * nh * nw, wd * wh * ww, d])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(x: &Tensor<T>, batch: usize, grid: [usize; 3], window: [usize; 3]) -> Result<Tensor<T>> {
    let (_, _, d) = dims3(x, "window_reverse")?;
    let [nd, nh, nw] = [0, 1, 2].map(|a| grid[a] / window[a]);
    let [wd, wh, ww] = window;
    x.reshape(&[batch, nd, nh, nw, wd, wh, ww, d])?
        .permute(&[0, 1, 4, 2, 5, 3, 6, 7])?
        .reshape(&[batch, grid.iter().product(), d])
}

/// Scaled dot-product multi-head self-attention with learned q, k, v and
/// output projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, init: &Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            q: Linear::new(ps, init, &format!("{name}.q"), dim, dim, true)?,
            // A key bias only shifts each query's logits uniformly; softmax
            // cancels it, so it would never receive gradient.
            k: Linear::new(ps, init, &format!("{name}.k"), dim, dim, false)?,
            v: Linear::new(ps, init, &format!("{name}.v"), dim, dim, true)?,
            proj: Linear::new(ps, init, &format!("{name}.proj"), dim, dim, true)?,
            heads,
        })
    }

    /// Attention over all tokens of each sequence; accepts `N × d` or `B × N × d`.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() == 2 {
            let (n, d) = (x.shape()[0], x.shape()[1]);
            return self.forward(ps, &x.reshape(&[1, n, d])?)?.reshape(&[n, d]);
        }
        let (b, n, d) = dims3(x, "attention")?;
        let (h, dh) = (self.heads, d / self.heads);
        let split = |t: Tensor<T>, perm: &[usize]| t.reshape(&[b, n, h, dh])?.permute(perm);
        let q = split(self.q.forward(ps, x)?, &[0, 2, 1, 3])?;
        let k = split(self.k.forward(ps, x)?, &[0, 2, 3, 1])?;
        let v = split(self.v.forward(ps, x)?, &[0, 2, 1, 3])?;
        let weights = q.matmul(&k)?.scale(1.0 / (dh as f64).sqrt())?.softmax(3)?;
        let out = weights.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, d])?;
        self.proj.forward(ps, &out)
    }

    /// Independent attention inside each window of a full grid.
    pub fn forward_local<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>, grid: [usize; 3], window: [usize; 3]) -> Result<Tensor<T>> {
        let (b, _, _) = dims3(x, "local attention")?;
        let windows = window_partition(x, grid, window)?;
        window_reverse(&self.forward(ps, &windows)?, b, grid, window)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, init: &Init, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, init, &format!("{name}.fc1"), dim, dim * ratio, true)?,
            fc2: Linear::new(ps, init, &format!("{name}.fc2"), dim * ratio, dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(ps, &self.fc1.forward(ps, x)?.gelu()?)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `+ mlp(ln(·))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub kind: AttentionKind,
    pub window: [usize; 3],
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        init: &Init,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        kind: AttentionKind,
        window: [usize; 3],
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, init, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(ps, init, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(ps, init, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(ps, init, &format!("{name}.mlp"), dim, mlp_ratio)?,
            kind,
            window,
        })
    }

    /// `full_grid` says whether `x` covers every position of `grid`; local
    /// attention is only honored when it does, otherwise the same weights
    /// attend globally over the tokens present.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>, grid: [usize; 3], full_grid: bool) -> Result<Tensor<T>> {
        let h = self.norm1.forward(ps, x)?;
        let a = match self.kind {
            AttentionKind::Local if full_grid => self.attn.forward_local(ps, &h, grid, self.window)?,
            _ => self.attn.forward(ps, &h)?,
        };
        let x = x.add(&a)?;
        let m = self.mlp.forward(ps, &self.norm2.forward(ps, &x)?)?;
        x.add(&m)
    }
}

/// Concatenates each 2×2×2 neighborhood (8d), normalizes, projects to 2d.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub dim: usize,
}

impl PatchMerge {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, init: &Init, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(ps, init, &format!("{name}.norm"), 8 * dim)?,
            reduction: Linear::new(ps, init, &format!("{name}.reduction"), 8 * dim, 2 * dim, false)?,
            dim,
        })
    }

    /// `B × N × d` on `grid` → `B × N/8 × 2d` on the halved grid.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>, grid: [usize; 3]) -> Result<(Tensor<T>, [usize; 3])> {
        if grid.iter().any(|e| e % 2 != 0) {
            return Err(Error::Config(format!("patch merge needs even grid extents, got {grid:?}")));
        }
        let (b, n, d) = dims3(x, "patch merge")?;
        let merged = window_partition(x, grid, [2, 2, 2])?.reshape(&[b, n / 8, 8 * d])?;
        let y = self.reduction.forward(ps, &self.norm.forward(ps, &merged)?)?;
        Ok((y, grid.map(|e| e / 2)))
    }
}

/// Fills absent grid positions with zeros: `B × n × d` subset → `B × N × d`.
pub fn densify<T: Scalar>(x: &Tensor<T>, grid: [usize; 3], subsets: &[Vec<usize>]) -> Result<Tensor<T>> {
    let (b, n, d) = dims3(x, "densify")?;
    let total: usize = grid.iter().product();
    if subsets.len() != b || subsets.iter().any(|s| s.len() != n) {
        return Err(Error::Contract(format!(
            "densify: {b} items of {n} tokens vs subsets of sizes {:?}",
            subsets.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let zero_row = b * n;
    let mut index = vec![zero_row; b * total];
    for (item, subset) in subsets.iter().enumerate() {
        for (row, &g) in subset.iter().enumerate() {
            index[item * total + g] = item * n + row;
        }
    }
    let rows = Tensor::concat(&[&x.reshape(&[b * n, d])?, &Tensor::zeros(&[1, d])], 0)?;
    rows.index_select(0, &index)?.reshape(&[b, total, d])
}

/// Patch embedding, stage blocks and merges. Fixed positions are owned by the
/// encoder but added by [`Encoder::embed`], before any token selection.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub stages: Vec<Vec<Block>>,
    pub merges: Vec<PatchMerge>,
    positions: Vec<f64>,
}

impl Encoder {
    pub const PREFIX: &'static str = "encoder";

    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, init: &Init, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.patch_grid()?;
        let p = Self::PREFIX;
        let patch_embed = Linear::new(ps, init, &format!("{p}.patch_embed"), grid.patch_dim(), config.dims[0], true)?;
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for s in 0..config.num_stages() {
            if s > 0 {
                merges.push(PatchMerge::new(ps, init, &format!("{p}.merge{}", s - 1), config.dims[s - 1])?);
            }
            let blocks = (0..config.depths[s])
                .map(|b| {
                    Block::new(
                        ps,
                        init,
                        &format!("{p}.stage{s}.block{b}"),
                        config.dims[s],
                        config.heads[s],
                        config.mlp_ratio,
                        config.kinds[s],
                        config.window,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        let positions = positional_encoding::<f64>(&grid, config.dims[0])?.to_vec();
        Ok(Self {
            config: config.clone(),
            patch_embed,
            stages,
            merges,
            positions,
        })
    }

    /// Raw patches `B × N × patch_dim` → embedded tokens with positions.
    pub fn embed<T: Scalar>(&self, ps: &ParamStore<T>, raw: &Tensor<T>) -> Result<Tensor<T>> {
        let tokens = self.patch_embed.forward(ps, raw)?;
        let b = tokens.shape()[0];
        let pos: Vec<T> = (0..b).flat_map(|_| self.positions.iter().map(|&v| T::lit(v))).collect();
        tokens.add(&Tensor::from_vec(tokens.shape(), pos)?)
    }

    /// Runs every stage; `set` describes which stage-0 positions `x` holds.
    /// Subsets are densified with zeros before the first merge.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>, set: TokenSet) -> Result<StageFeatures<T>> {
        let (_, n, d) = dims3(x, "encoder")?;
        let mut grid = self.config.stage_grid(0)?;
        let expect_n = match &set {
            TokenSet::Full => grid.iter().product(),
            TokenSet::Subset(s) => s.first().map_or(0, Vec::len),
        };
        if n != expect_n || d != self.config.dims[0] {
            return Err(Error::Contract(format!(
                "encoder expects {expect_n} tokens of width {}, got {:?}",
                self.config.dims[0],
                x.shape()
            )));
        }
        let mut x = x.clone();
        let mut set = set;
        let mut stages = Vec::with_capacity(self.stages.len());
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                let dense = match &set {
                    TokenSet::Full => x.clone(),
                    TokenSet::Subset(subsets) => densify(&x, grid, subsets)?,
                };
                (x, grid) = self.merges[s - 1].forward(ps, &dense, grid)?;
                set = TokenSet::Full;
            }
            let full = set == TokenSet::Full;
            for block in blocks {
                x = block.forward(ps, &x, grid, full)?;
            }
            stages.push(StageOutput {
                tokens: x.clone(),
                grid,
                set: set.clone(),
            });
        }
        Ok(StageFeatures { stages })
    }
}
