//! Overlap metrics and convergence statistics.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMap, Volume, BACKGROUND};
use crate::error::{Error, Result};

/// Dice overlap of class `c`: `2|A∩B| / (|A|+|B|)`; 1 when both sets are empty.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, c: u8) -> Result<f64> {
    if pred.extents != gt.extents {
        return Err(Error::Contract(format!(
            "dice_score: prediction extents {:?} vs ground truth {:?}",
            pred.extents, gt.extents
        )));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.classes.iter().zip(&gt.classes) {
        let (ip, ig) = (p == c, g == c);
        a += ip as usize;
        b += ig as usize;
        both += (ip && ig) as usize;
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

/// Anything that labels a raw volume.
pub trait Segmenter {
    fn num_classes(&self) -> usize;
    fn segment(&self, volume: &Volume) -> Result<LabelMap>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Dice per class id (background included), averaged over items.
    pub per_class: Vec<f64>,
    /// Mean of `per_class` over foreground classes.
    pub mean_dice: f64,
    /// `per_item[i][c]`: Dice of class `c` on item `i`.
    pub per_item: Vec<Vec<f64>>,
    pub items: usize,
}

/// Per-class Dice averaged over items, and the foreground mean.
pub fn aggregate(per_item: Vec<Vec<f64>>, num_classes: usize) -> MetricReport {
    let items = per_item.len();
    let per_class: Vec<f64> = (0..num_classes)
        .map(|c| per_item.iter().map(|row| row[c]).sum::<f64>() / items.max(1) as f64)
        .collect();
    let fg: Vec<f64> = per_class.iter().enumerate().filter(|(c, _)| *c as u8 != BACKGROUND).map(|(_, v)| *v).collect();
    let mean_dice = fg.iter().sum::<f64>() / fg.len().max(1) as f64;
    MetricReport {
        per_class,
        mean_dice,
        per_item,
        items,
    }
}

/// Scores `model` on the dataset items at `indices`.
pub fn evaluate(model: &impl Segmenter, ds: &Dataset, indices: &[usize]) -> Result<MetricReport> {
    let c = model.num_classes();
    let mut per_item = Vec::with_capacity(indices.len());
    for &i in indices {
        let item = ds.items.get(i).ok_or_else(|| Error::Data(format!("item {i} does not exist")))?;
        let gt = item.labels.as_ref().ok_or_else(|| Error::Data(format!("item {i} has no labels")))?;
        let pred = model.segment(&item.volume)?;
        per_item.push((0..c).map(|k| dice_score(&pred, gt, k as u8)).collect::<Result<Vec<_>>>()?);
    }
    Ok(aggregate(per_item, c))
}

/// 1-based index of the first epoch whose value reaches `t`.
pub fn epochs_to_threshold(curve: &[f64], t: f64) -> Option<usize> {
    curve.iter().position(|&v| v >= t).map(|i| i + 1)
}
