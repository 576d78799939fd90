//! Masked-autoencoder pretraining: the encoder sees only visible patches, a
//! light decoder reconstructs the masked ones, and only the encoder is kept.

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Provenance};
use crate::data::{normalize_volume, Dataset, Split, Volume};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::optim::{AdamW, OptimConfig, Schedule};
use crate::params::{Init, ParamId, ParamStore};
use crate::patch::{patch_values, positional_encoding, sample_mask, MaskPlan, PatchGrid};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformer::{fingerprint_of, AttentionKind, Block, Encoder, EncoderConfig, TokenSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeConfig {
    pub encoder: EncoderConfig,
    pub mask_ratio: f64,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Normalize each target patch to zero mean, unit variance.
    pub norm_pix_loss: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            mask_ratio: 0.75,
            decoder_dim: 48,
            decoder_depth: 2,
            decoder_heads: 4,
            epochs: 30,
            batch_size: 2,
            optim: OptimConfig::pretrain(),
            seed: 0,
            norm_pix_loss: false,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.optim.validate()?;
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio must lie in (0, 1), got {}", self.mask_ratio)));
        }
        if self.decoder_depth == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("decoder depth, epochs and batch size must be >= 1".into()));
        }
        if self.decoder_dim % 6 != 0 || self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} must be a multiple of 6 and divisible by {} heads",
                self.decoder_dim, self.decoder_heads
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

/// Encoder plus reconstruction decoder. Decoder parameters live under `mae.`.
#[derive(Debug, Clone)]
pub struct MaeModel {
    pub config: MaeConfig,
    pub encoder: Encoder,
    pub enc_to_dec: Linear,
    pub skip_to_dec: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
    grid: PatchGrid,
    positions: Vec<f64>,
}

impl MaeModel {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, init: &Init, config: &MaeConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(ps, init, &config.encoder)?;
        let grid = config.encoder.patch_grid()?;
        let d = config.decoder_dim;
        let last = *config.encoder.dims.last().expect("validated");
        let enc_to_dec = Linear::new(ps, init, "mae.enc_to_dec", last, d, true)?;
        let skip_to_dec = Linear::new(ps, init, "mae.skip_to_dec", config.encoder.dims[0], d, false)?;
        let mask_token = init.normal(ps, "mae.mask_token", &[d])?;
        let blocks = (0..config.decoder_depth)
            .map(|i| {
                let name = format!("mae.block{i}");
                Block::new(ps, init, &name, d, config.decoder_heads, config.encoder.mlp_ratio, AttentionKind::Global, [1, 1, 1])
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(ps, init, "mae.norm", d)?;
        let head = Linear::new(ps, init, "mae.head", d, grid.patch_dim(), true)?;
        let positions = positional_encoding::<f64>(&grid, d)?.to_vec();
        Ok(Self {
            config: config.clone(),
            encoder,
            enc_to_dec,
            skip_to_dec,
            mask_token,
            blocks,
            norm,
            head,
            grid,
            positions,
        })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    /// Raw patches `B × N × patch_dim` and per-item masks → reconstruction
    /// `B × N × patch_dim` over every position.
    pub fn reconstruct<T: Scalar>(&self, ps: &ParamStore<T>, raw: &Tensor<T>, masks: &[MaskPlan]) -> Result<Tensor<T>> {
        let g = &self.grid;
        let n = g.len();
        let b = masks.len();
        if raw.shape() != [b, n, g.patch_dim()] || masks.iter().any(|m| m.grid != *g) {
            return Err(Error::Contract(format!(
                "MAE expects {b} × {n} × {} patches on grid {:?}, got {:?}",
                g.patch_dim(),
                g.grid,
                raw.shape()
            )));
        }
        let v = masks[0].visible.len();
        if masks.iter().any(|m| m.visible.len() != v) {
            return Err(Error::Contract("all masks in a batch must keep the same number of patches".into()));
        }

        let tokens = self.encoder.embed(ps, raw)?;
        let d0 = tokens.shape()[2];
        let rows: Vec<usize> = masks
            .iter()
            .enumerate()
            .flat_map(|(i, m)| m.visible.iter().map(move |&p| i * n + p))
            .collect();
        let visible = tokens.reshape(&[b * n, d0])?.index_select(0, &rows)?.reshape(&[b, v, d0])?;
        let subsets = masks.iter().map(|m| m.visible.clone()).collect();
        let feats = self.encoder.forward(ps, &visible, TokenSet::Subset(subsets))?;

        // Every patch takes the bottleneck token of the coarse cell covering
        // it; visible patches add their own stage-0 feature, masked patches
        // the mask token.
        let bottleneck = feats.bottleneck();
        let nb: usize = bottleneck.grid.iter().product();
        let d = self.config.decoder_dim;
        let shift = self.config.encoder.num_stages() - 1;
        let coarse = self.enc_to_dec.forward(ps, &bottleneck.tokens)?.reshape(&[b * nb, d])?;
        let [_, bh, bw] = bottleneck.grid;
        let cells: Vec<usize> = (0..b * n)
            .map(|r| {
                let [z, y, x] = g.coord(r % n).map(|c| c >> shift);
                (r / n) * nb + (z * bh + y) * bw + x
            })
            .collect();
        let fine = self.skip_to_dec.forward(ps, &feats.stages[0].tokens)?.reshape(&[b * v, d])?;
        let table = Tensor::concat(&[&fine, &ps.get(self.mask_token).reshape(&[1, d])?], 0)?;
        let mut index = vec![b * v; b * n];
        for (row, &r) in rows.iter().enumerate() {
            index[r] = row;
        }
        let x = coarse.index_select(0, &cells)?.add(&table.index_select(0, &index)?)?;
        let pos: Vec<T> = (0..b).flat_map(|_| self.positions.iter().map(|&x| T::lit(x))).collect();
        let mut x = x.reshape(&[b, n, d])?.add(&Tensor::from_vec(&[b, n, d], pos)?)?;
        for block in &self.blocks {
            x = block.forward(ps, &x, g.grid, true)?;
        }
        self.head.forward(ps, &self.norm.forward(ps, &x)?)
    }

    /// Reconstruction and masked loss for a batch of normalized volumes.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, batch: &[&Volume], masks: &[MaskPlan]) -> Result<(Tensor<T>, Tensor<T>)> {
        if batch.len() != masks.len() || batch.is_empty() {
            return Err(Error::Contract(format!("{} volumes for {} masks", batch.len(), masks.len())));
        }
        let raw = stack_patches::<T>(batch, &self.grid)?;
        let pred = self.reconstruct(ps, &raw, masks)?;
        let target = if self.config.norm_pix_loss { normalize_patches(&raw)? } else { raw };
        let loss = batch_masked_mse_loss(&pred, &target, masks)?;
        Ok((pred, loss))
    }
}

/// Patches of each volume stacked into a `B × N × patch_dim` constant.
pub fn stack_patches<T: Scalar>(batch: &[&Volume], grid: &PatchGrid) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(batch.len() * grid.len() * grid.patch_dim());
    for v in batch {
        if v.extents != grid.volume {
            return Err(Error::Contract(format!(
                "volume extents {:?} do not match grid volume {:?}",
                v.extents, grid.volume
            )));
        }
        data.extend(patch_values(v, grid).into_iter().map(|x| T::lit(x as f64)));
    }
    Tensor::from_vec(&[batch.len(), grid.len(), grid.patch_dim()], data)
}

fn normalize_patches<T: Scalar>(raw: &Tensor<T>) -> Result<Tensor<T>> {
    let p = *raw.shape().last().expect("rank 3");
    let mut data = raw.to_f64_vec();
    for patch in data.chunks_mut(p) {
        let mean = patch.iter().sum::<f64>() / p as f64;
        let var = patch.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / p as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        patch.iter_mut().for_each(|x| *x = (*x - mean) * inv);
    }
    Tensor::from_f64(raw.shape(), &data)
}

/// Mean squared error over the masked tokens' values only, normalized by
/// `|masked| · patch_dim`. `pred` and `target` are `N × patch_dim`.
pub fn masked_mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, m: &MaskPlan) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() || pred.rank() != 2 || pred.shape()[0] != m.grid.len() {
        return Err(Error::Shape {
            op: "masked_mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    pred.index_select(0, &m.masked)?.sub(&target.index_select(0, &m.masked)?)?.square()?.mean()
}

/// [`masked_mse_loss`] over a batch `B × N × patch_dim`, pooled over all
/// masked tokens of all items.
pub fn batch_masked_mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, masks: &[MaskPlan]) -> Result<Tensor<T>> {
    let (b, n, p) = match *pred.shape() {
        [b, n, p] if pred.shape() == target.shape() && b == masks.len() => (b, n, p),
        _ => {
            return Err(Error::Shape {
                op: "masked_mse_loss",
                lhs: pred.shape().to_vec(),
                rhs: target.shape().to_vec(),
            })
        }
    };
    let rows: Vec<usize> = masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| m.masked.iter().map(move |&t| i * n + t))
        .collect();
    let pick = |t: &Tensor<T>| t.reshape(&[b * n, p])?.index_select(0, &rows);
    pick(pred)?.sub(&pick(target)?)?.square()?.mean()
}

/// The mask used for pretraining item `item` (position in the split) in
/// `epoch` (0-based).
pub fn epoch_mask(grid: &PatchGrid, ratio: f64, seed: u64, epoch: usize, item: usize) -> Result<MaskPlan> {
    sample_mask(grid, ratio, &mut Rng::new(seed, format!("mask/{epoch}/{item}")))
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    /// Encoder parameters only, tagged `mae-pretrained`.
    pub checkpoint: Checkpoint<f32>,
    /// Mean masked reconstruction loss per epoch.
    pub losses: Vec<f64>,
}

pub fn pretrain(ds: &Dataset, config: &MaeConfig) -> Result<PretrainOutput> {
    config.validate()?;
    let split = ds.split(Split::PretrainUnlabeled);
    if split.is_empty() {
        return Err(Error::Config("the pretrain-unlabeled split is empty".into()));
    }
    let volumes: Vec<Volume> = split.iter().map(|&i| normalize_volume(&ds.items[i].volume)).collect();

    let mut ps = ParamStore::<f32>::new();
    let model = MaeModel::new(&mut ps, &Init::new(config.seed), config)?;
    let grid = *model.grid();
    let steps_per_epoch = volumes.len().div_ceil(config.batch_size);
    let schedule = Schedule::new(&config.optim, steps_per_epoch, config.epochs);
    let mut opt = AdamW::new(config.optim.clone(), &ps);
    let mut losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = Rng::new(config.seed, format!("pretrain/order/{epoch}")).permutation(volumes.len());
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Volume> = chunk.iter().map(|&i| &volumes[i]).collect();
            let masks = chunk
                .iter()
                .map(|&i| epoch_mask(&grid, config.mask_ratio, config.seed, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let (_, loss) = model.forward(&ps, &batch, &masks)?;
            let grads = ps.gradients(&loss.backward()?);
            opt.step(&mut ps, &grads, schedule.lr_at(step), |_| true)?;
            total += loss.item()?.as_f64() * chunk.len() as f64;
            step += 1;
        }
        let mean = total / volumes.len() as f64;
        info!("pretrain epoch {}/{}: loss {mean:.5}", epoch + 1, config.epochs);
        losses.push(mean);
    }
    let checkpoint = Checkpoint::from_store(
        &ps,
        |n| n.starts_with(&format!("{}.", Encoder::PREFIX)),
        config.fingerprint(),
        config.encoder.fingerprint(),
        Provenance::MaePretrained,
        config.epochs,
        config.seed,
    );
    Ok(PretrainOutput { checkpoint, losses })
}
