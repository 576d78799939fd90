//! Scratch vs MAE-pretrained fine-tuning across label fractions and seeds,
//! with grouped medians and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{generate_dataset, Dataset, PhantomConfig, Split, SplitCounts};
use crate::error::{Error, Result};
use crate::mae::{pretrain, MaeConfig};
use crate::metrics::{epochs_to_threshold, MetricReport};
use crate::patch::masked_count;
use crate::rng::Rng;
use crate::seg::{finetune_on, SegConfig};
use crate::transformer::fingerprint_of;

pub const REFERENCE_STATUS: &str = "paper-reported, not reproduced";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    Scratch,
    MaePretrained,
}

impl InitStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            InitStrategy::Scratch => "scratch",
            InitStrategy::MaePretrained => "mae-pretrained",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub phantom: PhantomConfig,
    pub counts: SplitCounts,
    pub data_seed: u64,
    pub label_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub inits: Vec<InitStrategy>,
    /// Validation mean Dice that counts as converged.
    pub threshold: f64,
    pub mae: MaeConfig,
    pub seg: SegConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            counts: SplitCounts::new(32, 40, 8, 8),
            data_seed: 0,
            label_fractions: vec![0.1, 0.25, 1.0],
            seeds: (0..5).collect(),
            inits: vec![InitStrategy::Scratch, InitStrategy::MaePretrained],
            threshold: 0.6,
            mae: MaeConfig::default(),
            seg: SegConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.mae.validate()?;
        self.seg.validate()?;
        let err = |m: String| Err(Error::Config(m));
        if self.mae.encoder != self.seg.encoder {
            return err("pretraining and segmentation encoders must share one config".into());
        }
        if self.seg.num_classes != self.phantom.num_classes {
            return err(format!(
                "segmentation has {} classes, phantoms have {}",
                self.seg.num_classes, self.phantom.num_classes
            ));
        }
        if self.mae.encoder.volume != self.phantom.extents {
            return err(format!(
                "encoder volume {:?} differs from phantom extents {:?}",
                self.mae.encoder.volume, self.phantom.extents
            ));
        }
        if self.label_fractions.is_empty() || self.seeds.is_empty() || self.inits.is_empty() {
            return err("label fractions, seeds and inits must be non-empty".into());
        }
        for &f in &self.label_fractions {
            if !(f > 0.0 && f <= 1.0) || subset_size(self.counts.train_labeled, f) == 0 {
                return err(format!(
                    "label fraction {f} of {} labeled items selects no items",
                    self.counts.train_labeled
                ));
            }
        }
        if has_duplicates(&self.seeds) || has_duplicates(&self.inits) || has_duplicates(&self.label_fractions.iter().map(|f| f.to_bits()).collect::<Vec<_>>()) {
            return err("seeds, inits and label fractions must not repeat".into());
        }
        if self.inits.contains(&InitStrategy::MaePretrained) && self.counts.pretrain_unlabeled == 0 {
            return err("mae-pretrained arms need a non-empty pretrain-unlabeled split".into());
        }
        if self.counts.validation == 0 || self.counts.test == 0 {
            return err("validation and test splits must be non-empty".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return err(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

fn has_duplicates<T: PartialEq>(v: &[T]) -> bool {
    v.iter().enumerate().any(|(i, a)| v[..i].contains(a))
}

/// `⌈fraction · n⌉`.
pub fn subset_size(n: usize, fraction: f64) -> usize {
    masked_count(n, fraction).min(n)
}

/// The labeled items an arm trains on: a seeded shuffle of the labeled split,
/// truncated to `⌈fraction · n⌉`. Both inits of a seed see the same subset.
pub fn labeled_subset(ds: &Dataset, seed: u64, fraction: f64) -> Vec<usize> {
    let labeled = ds.split(Split::TrainLabeled);
    let order = Rng::new(seed, format!("subsample/{fraction}")).permutation(labeled.len());
    order[..subset_size(labeled.len(), fraction)].iter().map(|&i| labeled[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub init: InitStrategy,
    pub label_fraction: f64,
    pub seed: u64,
    pub train_items: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub val_dice: Vec<f64>,
    pub test: MetricReport,
    pub epochs_to_threshold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub init: InitStrategy,
    pub label_fraction: f64,
    pub seeds: usize,
    pub median_test_dice: f64,
    /// `None` when the median arm never reached the threshold.
    pub median_epochs_to_threshold: Option<f64>,
    pub reached_threshold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub seed: u64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScore {
    pub label: String,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStatement {
    pub label: String,
    pub value: String,
}

/// Published clinical scores, quoted for context only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBlock {
    pub status: String,
    pub note: String,
    pub initialization_comparison: Vec<ReferenceScore>,
    pub model_comparison: Vec<ReferenceScore>,
    pub average_dice_statements: Vec<ReferenceStatement>,
}

impl ReferenceBlock {
    pub fn published() -> Self {
        let score = |label: &str, dice: f64| ReferenceScore {
            label: label.into(),
            dice,
        };
        let said = |label: &str, value: &str| ReferenceStatement {
            label: label.into(),
            value: value.into(),
        };
        Self {
            status: REFERENCE_STATUS.into(),
            note: "Clinical brain-tumor Dice scores (%). The baseline is quoted as 86.3, 86.4 and 86% in \
                   different places; all three are kept verbatim. Synthetic phantom results in this report \
                   are not comparable in absolute terms."
                .into(),
            initialization_comparison: vec![score("Base nnFormer (Random Initialization)", 86.3), score("MAE nnFormer (MAE Pretrained Initialization)", 88.7)],
            model_comparison: vec![
                score("TransUNet", 83.6),
                score("Swin-UNETR", 85.1),
                score("UNETR", 84.3),
                score("nnFormer (Baseline)", 86.4),
                score("Proposed Method (MAE + nnFormer)", 88.7),
            ],
            average_dice_statements: vec![said("baseline nnFormer", "86%"), said("MAE-pretrained model", "88%")],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub fingerprint: String,
    pub threshold: f64,
    pub pretraining: Vec<PretrainSummary>,
    pub arms: Vec<ArmResult>,
    pub cells: Vec<CellSummary>,
    pub reference: ReferenceBlock,
}

impl ExperimentReport {
    pub fn cell(&self, init: InitStrategy, fraction: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.init == init && c.label_fraction == fraction)
    }
}

/// Median of the values; `None` entries sort last as "never". An even count
/// averages the middle pair, and is `None` if either of them is.
pub fn median_option(values: &[Option<f64>]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let n = v.len();
    if n == 0 {
        return None;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        Some((v[n / 2 - 1]? + v[n / 2]?) / 2.0)
    }
}

pub fn median(values: &[f64]) -> f64 {
    median_option(&values.iter().map(|&v| Some(v)).collect::<Vec<_>>()).unwrap_or(f64::NAN)
}

/// Groups arms by (init, fraction) in descriptor order.
pub fn summarize(cfg: &ExperimentConfig, arms: &[ArmResult]) -> Vec<CellSummary> {
    let mut cells = Vec::new();
    for &init in &cfg.inits {
        for &f in &cfg.label_fractions {
            let group: Vec<&ArmResult> = arms.iter().filter(|a| a.init == init && a.label_fraction == f).collect();
            let dice: Vec<f64> = group.iter().map(|a| a.test.mean_dice).collect();
            let ett: Vec<Option<f64>> = group.iter().map(|a| a.epochs_to_threshold.map(|e| e as f64)).collect();
            cells.push(CellSummary {
                init,
                label_fraction: f,
                seeds: group.len(),
                median_test_dice: median(&dice),
                median_epochs_to_threshold: median_option(&ett),
                reached_threshold: ett.iter().flatten().count(),
            });
        }
    }
    cells
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
}

/// Runs every (init, fraction, seed) arm. `threads` only changes how many arms
/// run at once (0 = one per core); results are identical for any value.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    thread_pool(threads)?.install(|| run_inner(cfg))
}

fn run_inner(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let ds = generate_dataset(&cfg.phantom, cfg.counts, cfg.data_seed)?;
    let pretrained: Vec<(u64, Checkpoint<f32>, Vec<f64>)> = if cfg.inits.contains(&InitStrategy::MaePretrained) {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let mae = MaeConfig { seed, ..cfg.mae.clone() };
                info!("pretraining seed {seed}");
                let out = pretrain(&ds, &mae)?;
                Ok((seed, out.checkpoint, out.losses))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let jobs: Vec<(InitStrategy, f64, u64)> = cfg
        .inits
        .iter()
        .flat_map(|&i| cfg.label_fractions.iter().flat_map(move |&f| cfg.seeds.iter().map(move |&s| (i, f, s))))
        .collect();
    let arms = jobs
        .par_iter()
        .map(|&(init, fraction, seed)| {
            let train = labeled_subset(&ds, seed, fraction);
            let ckpt = match init {
                InitStrategy::Scratch => None,
                InitStrategy::MaePretrained => pretrained.iter().find(|p| p.0 == seed).map(|p| &p.1),
            };
            let seg = SegConfig { seed, ..cfg.seg.clone() };
            info!("arm {} fraction {fraction} seed {seed}: {} training items", init.as_str(), train.len());
            let out = finetune_on(&ds, &train, &seg, ckpt)?;
            let test = out.evaluate(&ds, ds.split(Split::Test))?;
            info!("arm {} fraction {fraction} seed {seed}: test mean Dice {:.4}", init.as_str(), test.mean_dice);
            Ok(ArmResult {
                init,
                label_fraction: fraction,
                seed,
                train_items: train,
                epochs_to_threshold: epochs_to_threshold(&out.val_dice, cfg.threshold),
                train_loss: out.train_loss,
                val_dice: out.val_dice,
                test,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ExperimentReport {
        fingerprint: cfg.fingerprint(),
        threshold: cfg.threshold,
        pretraining: pretrained.into_iter().map(|(seed, _, losses)| PretrainSummary { seed, losses }).collect(),
        cells: summarize(cfg, &arms),
        arms,
        reference: ReferenceBlock::published(),
    })
}

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CURVES_FILE: &str = "curves.csv";

pub fn report_json(r: &ExperimentReport) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), |v| v.to_string())
}

pub fn summary_csv(r: &ExperimentReport) -> String {
    let mut s = String::from("init,label_fraction,seeds,median_test_mean_dice,median_epochs_to_threshold,reached_threshold\n");
    for c in &r.cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.init.as_str(),
            c.label_fraction,
            c.seeds,
            c.median_test_dice,
            opt(&c.median_epochs_to_threshold),
            c.reached_threshold
        );
    }
    s
}

pub fn curves_csv(r: &ExperimentReport) -> String {
    let mut s = String::from("init,label_fraction,seed,epoch,train_loss,val_mean_dice\n");
    for a in &r.arms {
        for (e, (l, d)) in a.train_loss.iter().zip(&a.val_dice).enumerate() {
            let _ = writeln!(s, "{},{},{},{},{l},{d}", a.init.as_str(), a.label_fraction, a.seed, e + 1);
        }
    }
    s
}

/// Writes the JSON report and both CSV tables into `dir`.
pub fn emit_report(r: &ExperimentReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (REPORT_FILE, report_json(r)),
        (SUMMARY_FILE, summary_csv(r)),
        (CURVES_FILE, curves_csv(r)),
    ];
    let mut paths = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ExperimentReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians_treat_never_as_infinite() {
        assert_eq!(median_option(&[Some(3.0), None, Some(1.0)]), Some(3.0));
        assert_eq!(median_option(&[None, None, Some(1.0)]), None);
        assert_eq!(median_option(&[Some(2.0), Some(4.0)]), Some(3.0));
        assert_eq!(median_option(&[Some(2.0), None]), None);
        assert_eq!(median(&[0.5, 0.1, 0.9, 0.3]), 0.4);
    }

    #[test]
    fn default_descriptor_is_valid() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(subset_size(40, 0.1), 4);
        assert_eq!(subset_size(40, 0.25), 10);
        assert_eq!(subset_size(40, 1.0), 40);
    }

    #[test]
    fn bad_descriptors_rejected() {
        let mut c = ExperimentConfig::default();
        c.label_fractions = vec![0.0];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.seg.encoder.mlp_ratio = 2;
        assert!(c.validate().is_err());
    }
}
