//! U-shaped segmentation network on top of the shared encoder, the compound
//! Dice + cross-entropy loss, encoder transfer and fine-tuning.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Provenance};
use crate::data::{normalize_volume, Dataset, LabelMap, Split, Volume};
use crate::error::{Error, Result};
use crate::mae::stack_patches;
use crate::metrics::{evaluate, MetricReport, Segmenter};
use crate::nn::{LayerNorm, Linear};
use crate::optim::{AdamW, OptimConfig, Schedule};
use crate::params::{Init, ParamStore};
use crate::patch::PatchGrid;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor};
use crate::transformer::{fingerprint_of, window_reverse, Block, Encoder, EncoderConfig, StageFeatures, TokenSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    /// Must equal the pretraining encoder config for transfer.
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub dice_eps: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            num_classes: 3,
            epochs: 40,
            batch_size: 1,
            optim: OptimConfig::finetune(),
            seed: 0,
            freeze_encoder: false,
            dice_weight: 1.0,
            ce_weight: 1.0,
            dice_eps: 1e-5,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.optim.validate()?;
        if !(2..=u8::MAX as usize).contains(&self.num_classes) {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        if self.dice_weight < 0.0 || self.ce_weight < 0.0 || !(self.dice_eps > 0.0) {
            return Err(Error::Config("loss weights must be >= 0 and the Dice epsilon > 0".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

/// One decoder level: expand the coarser tokens, fuse with the skip, refine.
#[derive(Debug, Clone)]
pub struct UpStage {
    pub expand: Linear,
    pub fuse: Linear,
    pub block: Block,
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: SegConfig,
    pub encoder: Encoder,
    /// `ups[s]` produces stage-`s` resolution from stage `s + 1`.
    pub ups: Vec<UpStage>,
    pub norm: LayerNorm,
    pub head: Linear,
    grid: PatchGrid,
}

impl SegModel {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, init: &Init, config: &SegConfig) -> Result<Self> {
        config.validate()?;
        let e = &config.encoder;
        let encoder = Encoder::new(ps, init, e)?;
        let ups = (0..e.num_stages() - 1)
            .map(|s| {
                let d = e.dims[s];
                Ok(UpStage {
                    expand: Linear::new(ps, init, &format!("seg.up{s}.expand"), e.dims[s + 1], 8 * d, true)?,
                    fuse: Linear::new(ps, init, &format!("seg.up{s}.fuse"), 2 * d, d, true)?,
                    block: Block::new(ps, init, &format!("seg.up{s}.block"), d, e.heads[s], e.mlp_ratio, e.kinds[s], e.window)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let grid = e.patch_grid()?;
        let norm = LayerNorm::new(ps, init, "seg.norm", e.dims[0])?;
        let head = Linear::new(ps, init, "seg.head", e.dims[0], grid.patch_dim() * config.num_classes, true)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            ups,
            norm,
            head,
            grid,
        })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    /// Full-grid encoder features for raw patches `B × N × patch_dim`.
    pub fn encode<T: Scalar>(&self, ps: &ParamStore<T>, raw: &Tensor<T>) -> Result<StageFeatures<T>> {
        self.encoder.forward(ps, &self.encoder.embed(ps, raw)?, TokenSet::Full)
    }

    /// Logits `B × C × D × H × W` from encoder features.
    pub fn decode<T: Scalar>(&self, ps: &ParamStore<T>, feats: &StageFeatures<T>) -> Result<Tensor<T>> {
        let stages = &feats.stages;
        if stages.len() != self.ups.len() + 1 || stages.iter().any(|s| s.set != TokenSet::Full) {
            return Err(Error::Config(format!(
                "decoder expects {} full-grid stages, got {}",
                self.ups.len() + 1,
                stages.len()
            )));
        }
        let mut x = feats.bottleneck().tokens.clone();
        for s in (0..self.ups.len()).rev() {
            let up = &self.ups[s];
            let skip = &stages[s];
            let (b, n, _) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let d = self.config.encoder.dims[s];
            let expanded = up.expand.forward(ps, &x)?.reshape(&[b * n, 8, d])?;
            let expanded = window_reverse(&expanded, b, skip.grid, [2, 2, 2])?;
            let fused = up.fuse.forward(ps, &Tensor::concat(&[&expanded, &skip.tokens], 2)?)?;
            x = up.block.forward(ps, &fused, skip.grid, true)?;
        }
        let logits = self.head.forward(ps, &self.norm.forward(ps, &x)?)?;
        let b = logits.shape()[0];
        let [gd, gh, gw] = self.grid.grid;
        let [pd, ph, pw] = self.grid.patch;
        let c = self.config.num_classes;
        let [d, h, w] = self.grid.volume;
        logits
            .reshape(&[b, gd, gh, gw, pd, ph, pw, c])?
            .permute(&[0, 7, 1, 4, 2, 5, 3, 6])?
            .reshape(&[b, c, d, h, w])
    }

    /// Logits for a batch of normalized volumes.
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, batch: &[&Volume]) -> Result<Tensor<T>> {
        let raw = stack_patches::<T>(batch, &self.grid)?;
        self.decode(ps, &self.encode(ps, &raw)?)
    }
}

/// Logits `C × D × H × W` for one volume and their argmax labels.
#[derive(Debug, Clone)]
pub struct SegPrediction<T: Scalar> {
    pub logits: Tensor<T>,
    pub labels: LabelMap,
}

/// A model bundled with its parameters, usable for inference.
#[derive(Debug, Clone)]
pub struct TrainedSegmenter<T: Scalar> {
    pub model: SegModel,
    pub params: ParamStore<T>,
}

impl<T: Scalar> TrainedSegmenter<T> {
    /// Normalizes `volume` and predicts it.
    pub fn predict(&self, volume: &Volume) -> Result<SegPrediction<T>> {
        let v = normalize_volume(volume);
        no_grad(|| {
            let logits = self.model.forward(&self.params, &[&v])?;
            let s = logits.shape()[1..].to_vec();
            let logits = logits.reshape(&s)?;
            let classes = logits.argmax(0)?.data().iter().map(|c| c.as_f64() as u8).collect();
            let labels = LabelMap::new(volume.extents, self.model.config.num_classes as u8, classes)?;
            Ok(SegPrediction { logits, labels })
        })
    }
}

impl<T: Scalar> Segmenter for TrainedSegmenter<T> {
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    fn segment(&self, volume: &Volume) -> Result<LabelMap> {
        Ok(self.predict(volume)?.labels)
    }
}

/// `w_ce · mean voxel CE + w_dice · (1 − mean soft Dice)`, the Dice mean taken
/// over every (item, class) pair. `logits` is `B × C × D × H × W` (or
/// `C × D × H × W` for one item).
pub fn dice_ce_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[&LabelMap],
    weights: (f64, f64),
    eps: f64,
) -> Result<Tensor<T>> {
    let logits = if logits.rank() == 4 {
        let mut s = vec![1];
        s.extend_from_slice(logits.shape());
        logits.reshape(&s)?
    } else {
        logits.clone()
    };
    let shape = logits.shape().to_vec();
    if shape.len() != 5 || shape[0] != labels.len() {
        return Err(Error::Contract(format!(
            "dice_ce_loss: logits {shape:?} for {} label maps",
            labels.len()
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    let v: usize = shape[2..].iter().product();
    let mut onehot = vec![T::zero(); b * c * v];
    for (i, l) in labels.iter().enumerate() {
        if l.extents[..] != shape[2..] {
            return Err(Error::Contract(format!(
                "dice_ce_loss: label extents {:?} vs logits {shape:?}",
                l.extents
            )));
        }
        for (j, &k) in l.classes.iter().enumerate() {
            if k as usize >= c {
                return Err(Error::Data(format!("label {k} at voxel {j} is not below {c} classes")));
            }
            onehot[(i * c + k as usize) * v + j] = T::one();
        }
    }
    let g = Tensor::from_vec(&[b, c, v], onehot)?;
    let logp = logits.reshape(&[b, c, v])?.log_softmax(1)?;
    let ce = logp.mul(&g)?.sum()?.scale(-1.0 / (b * v) as f64)?;
    let p = logp.exp()?;
    let inter = p.mul(&g)?.sum_axis(2)?;
    let denom = p.sum_axis(2)?.add(&g.sum_axis(2)?)?.add_scalar(eps)?;
    let dice = inter.scale(2.0)?.add_scalar(eps)?.div(&denom)?.mean()?;
    let (w_dice, w_ce) = weights;
    ce.scale(w_ce)?.add(&dice.scale(-w_dice)?.add_scalar(w_dice)?)
}

/// Copies every encoder parameter of `c` into `ps`. Returns the names copied.
pub fn transfer_encoder<T: Scalar>(c: &Checkpoint<T>, model: &SegModel, ps: &mut ParamStore<T>) -> Result<Vec<String>> {
    if c.provenance != Provenance::MaePretrained {
        warn!("transferring encoder weights from a `{}` checkpoint", c.provenance);
    }
    let prefix = format!("{}.", Encoder::PREFIX);
    let first_incompatible = || {
        let mismatch = c
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .find(|(n, t)| ps.by_name(n).is_none_or(|p| p.shape() != t.shape()))
            .map(|(n, _)| n.clone());
        let missing = || {
            ps.iter()
                .map(|(n, _)| n)
                .find(|n| n.starts_with(&prefix) && c.get(n).is_none())
                .map(str::to_string)
        };
        mismatch.or_else(missing)
    };
    if c.encoder_fingerprint != model.config.encoder.fingerprint() {
        return Err(Error::Transfer(match first_incompatible() {
            Some(name) => format!("encoder fingerprint mismatch; first incompatible parameter `{name}`"),
            None => "encoder fingerprint mismatch (same parameter shapes, different encoder config)".into(),
        }));
    }
    if let Some(name) = first_incompatible() {
        return Err(Error::Transfer(format!("incompatible parameter `{name}`")));
    }
    let encoder_only = Checkpoint {
        params: c.params.iter().filter(|(n, _)| n.starts_with(&prefix)).cloned().collect(),
        ..c.clone()
    };
    encoder_only.load_into(ps)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    /// Every parameter, tagged `finetuned`.
    pub checkpoint: Checkpoint<f32>,
    pub train_loss: Vec<f64>,
    pub val_dice: Vec<f64>,
    /// Names copied from the pretrained checkpoint (empty for scratch).
    pub transferred: Vec<String>,
    pub segmenter: TrainedSegmenter<f32>,
}

impl FinetuneOutput {
    pub fn evaluate(&self, ds: &Dataset, indices: &[usize]) -> Result<MetricReport> {
        evaluate(&self.segmenter, ds, indices)
    }
}

/// Fine-tunes on the whole train-labeled split.
pub fn finetune(ds: &Dataset, config: &SegConfig, pretrained: Option<&Checkpoint<f32>>) -> Result<FinetuneOutput> {
    finetune_on(ds, ds.split(Split::TrainLabeled), config, pretrained)
}

/// Fine-tunes on the dataset items at `train`, validating on the validation
/// split after every epoch.
pub fn finetune_on(ds: &Dataset, train: &[usize], config: &SegConfig, pretrained: Option<&Checkpoint<f32>>) -> Result<FinetuneOutput> {
    config.validate()?;
    let val = ds.split(Split::Validation);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("fine-tuning needs non-empty training and validation sets".into()));
    }
    let mut volumes = Vec::with_capacity(train.len());
    let mut labels = Vec::with_capacity(train.len());
    for &i in train {
        let item = ds.items.get(i).ok_or_else(|| Error::Data(format!("item {i} does not exist")))?;
        let l = item.labels.as_ref().ok_or_else(|| Error::Data(format!("training item {i} has no labels")))?;
        if l.num_classes as usize != config.num_classes {
            return Err(Error::Data(format!(
                "item {i} has {} classes, model has {}",
                l.num_classes, config.num_classes
            )));
        }
        volumes.push(normalize_volume(&item.volume));
        labels.push(l);
    }

    let mut ps = ParamStore::<f32>::new();
    let model = SegModel::new(&mut ps, &Init::new(config.seed), config)?;
    let transferred = match pretrained {
        Some(c) => transfer_encoder(c, &model, &mut ps)?,
        None => Vec::new(),
    };
    let steps_per_epoch = volumes.len().div_ceil(config.batch_size);
    let schedule = Schedule::new(&config.optim, steps_per_epoch, config.epochs);
    let mut opt = AdamW::new(config.optim.clone(), &ps);
    let freeze = config.freeze_encoder;
    let prefix = format!("{}.", Encoder::PREFIX);
    let trainable = |name: &str| !(freeze && name.starts_with(&prefix));

    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut val_dice = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let mut segmenter = TrainedSegmenter {
        model: model.clone(),
        params: ps.clone(),
    };
    for epoch in 0..config.epochs {
        let order = Rng::new(config.seed, format!("finetune/order/{epoch}")).permutation(volumes.len());
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Volume> = chunk.iter().map(|&i| &volumes[i]).collect();
            let batch_labels: Vec<&LabelMap> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = model.forward(&ps, &batch)?;
            let loss = dice_ce_loss(&logits, &batch_labels, (config.dice_weight, config.ce_weight), config.dice_eps)?;
            let grads = ps.gradients(&loss.backward()?);
            opt.step(&mut ps, &grads, schedule.lr_at(step), trainable)?;
            total += loss.item()?.as_f64() * chunk.len() as f64;
            step += 1;
        }
        segmenter.params = ps.clone();
        let dice = evaluate(&segmenter, ds, val)?.mean_dice;
        let mean = total / volumes.len() as f64;
        info!("finetune epoch {}/{}: loss {mean:.5}, validation Dice {dice:.4}", epoch + 1, config.epochs);
        train_loss.push(mean);
        val_dice.push(dice);
    }
    let checkpoint = Checkpoint::from_store(
        &ps,
        |_| true,
        config.fingerprint(),
        config.encoder.fingerprint(),
        Provenance::Finetuned,
        config.epochs,
        config.seed,
    );
    Ok(FinetuneOutput {
        checkpoint,
        train_loss,
        val_dice,
        transferred,
        segmenter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class_cross_entropy_is_ln2() {
        let logits = Tensor::<f64>::zeros(&[2, 1, 2, 2]);
        let l = LabelMap::new([1, 2, 2], 2, vec![0, 1, 1, 0]).unwrap();
        let ce = dice_ce_loss(&logits, &[&l], (0.0, 1.0), 1e-5).unwrap().item().unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-6, "{ce}");
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let logits = Tensor::<f64>::zeros(&[2, 1, 1, 2]);
        let l = LabelMap::new([1, 1, 2], 3, vec![0, 2]).unwrap();
        let err = dice_ce_loss(&logits, &[&l], (1.0, 1.0), 1e-5).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn config_validation() {
        SegConfig::default().validate().unwrap();
        let c = SegConfig {
            num_classes: 1,
            ..SegConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
