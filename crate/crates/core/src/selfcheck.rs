//! Finite-difference sweep over every differentiable op and both tiny models,
//! shared by the `gradcheck` command and the acceptance run.

use serde::Serialize;

use crate::data::{LabelMap, Volume};
use crate::error::Result;
use crate::mae::{masked_mse_loss, MaeConfig, MaeModel};
use crate::params::{Init, ParamStore};
use crate::patch::{sample_mask, PatchGrid};
use crate::rng::Rng;
use crate::seg::{dice_ce_loss, SegConfig, SegModel};
use crate::tensor::{grad_check, layer_norm, Tensor};
use crate::transformer::EncoderConfig;

type T64 = Tensor<f64>;

pub const EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;
const TRIALS: u64 = 3;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> T64 {
    let n = shape.iter().product();
    T64::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

// random positive weights keep every output coordinate in play
fn weighted_sum(y: &T64, rng: &mut Rng) -> Result<T64> {
    let w = (0..y.numel()).map(|_| rng.uniform_in(0.5, 1.5)).collect();
    y.mul(&T64::from_vec(y.shape(), w)?)?.sum()
}

type OpFn = fn(&[T64]) -> Result<T64>;

fn ops() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("add", vec![vec![2, 3], vec![2, 3]], |x| x[0].add(&x[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |x| x[0].sub(&x[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |x| x[0].mul(&x[1])),
        ("div", vec![vec![2, 3], vec![2, 3]], |x| x[0].div(&x[1].square()?.add_scalar(0.5)?)),
        ("square", vec![vec![5]], |x| x[0].square()),
        ("add_bias", vec![vec![2, 3, 4], vec![4]], |x| x[0].add_bias(&x[1])),
        ("scale", vec![vec![5]], |x| x[0].scale(-1.7)),
        ("add_scalar", vec![vec![5]], |x| x[0].add_scalar(0.3)),
        ("exp", vec![vec![5]], |x| x[0].exp()),
        ("ln", vec![vec![5]], |x| x[0].square()?.add_scalar(0.5)?.ln()),
        ("gelu", vec![vec![4, 4]], |x| x[0].gelu()),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |x| x[0].matmul(&x[1])),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], |x| x[0].matmul(&x[1])),
        ("matmul_broadcast", vec![vec![2, 3, 4], vec![4, 5]], |x| x[0].matmul(&x[1])),
        ("reshape", vec![vec![2, 6]], |x| x[0].reshape(&[3, 4])),
        ("permute", vec![vec![2, 3, 4]], |x| x[0].permute(&[2, 0, 1])),
        ("transpose_last2", vec![vec![2, 3, 4]], |x| x[0].transpose_last2()),
        ("concat", vec![vec![2, 3], vec![2, 2]], |x| T64::concat(&[&x[0], &x[1]], 1)),
        ("index_select", vec![vec![4, 3]], |x| x[0].index_select(0, &[3, 1, 1, 0])),
        ("softmax", vec![vec![3, 5]], |x| x[0].softmax(1)),
        ("log_softmax", vec![vec![4, 3]], |x| x[0].log_softmax(0)),
        ("sum", vec![vec![2, 3]], |x| x[0].sum()),
        ("mean", vec![vec![2, 3]], |x| x[0].mean()),
        ("sum_axis", vec![vec![2, 3, 4]], |x| x[0].sum_axis(1)),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |x| layer_norm(&x[0], &x[1], &x[2], 1e-5)),
    ]
}

/// Every op over three random draws, worst error kept.
pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, shapes, f) in ops() {
        let mut worst = CheckResult {
            name: name.into(),
            max_rel_error: 0.0,
            tolerance: OP_TOLERANCE,
            coordinates: 0,
        };
        for trial in 0..TRIALS {
            let mut rng = Rng::new(seed, format!("gradcheck/{name}/{trial}"));
            let inputs: Vec<T64> = shapes.iter().map(|s| randn(s, &mut rng)).collect();
            let r = grad_check(|xs| weighted_sum(&f(xs)?, &mut rng.clone()), &inputs, EPS)?;
            worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
            worst.coordinates += r.coordinates_checked;
        }
        out.push(worst);
    }
    out.extend(check_losses(seed)?);
    Ok(out)
}

fn check_losses(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed, "gradcheck/losses");
    let labels = random_labels([2, 2, 2], 3, &mut rng)?;
    let logits = randn(&[3, 2, 2, 2], &mut rng);
    let dice = grad_check(|xs| dice_ce_loss(&xs[0], &[&labels], (1.0, 1.0), 1e-5), &[logits], EPS)?;

    let grid = PatchGrid::new([4, 4, 4], [2, 2, 2])?;
    let mask = sample_mask(&grid, 0.5, &mut rng)?;
    let target = randn(&[8, 8], &mut rng);
    let pred = randn(&[8, 8], &mut rng);
    let mse = grad_check(|xs| masked_mse_loss(&xs[0], &target, &mask), &[pred], EPS)?;
    Ok(vec![
        CheckResult {
            name: "dice_ce_loss".into(),
            max_rel_error: dice.max_rel_error,
            tolerance: OP_TOLERANCE,
            coordinates: dice.coordinates_checked,
        },
        CheckResult {
            name: "masked_mse_loss".into(),
            max_rel_error: mse.max_rel_error,
            tolerance: OP_TOLERANCE,
            coordinates: mse.coordinates_checked,
        },
    ])
}

fn random_labels(extents: [usize; 3], c: u8, rng: &mut Rng) -> Result<LabelMap> {
    let n = extents.iter().product();
    LabelMap::new(extents, c, (0..n).map(|_| (rng.uniform() * c as f64) as u8).collect())
}

fn random_volume(extents: [usize; 3], rng: &mut Rng) -> Result<Volume> {
    let n = extents.iter().product();
    Volume::new(extents, (0..n).map(|_| rng.normal() as f32).collect())
}

/// 8³ volumes with 2³ patches: a 4³ grid, so local windows are real.
fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        patch: [2, 2, 2],
        ..EncoderConfig::tiny([8, 8, 8])
    }
}

/// Whole-model checks in double precision: every parameter of the tiny
/// pretraining model and of the tiny segmenter.
pub fn check_models(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed, "gradcheck/models");
    let init = Init::new(seed).with_std(0.3);

    let mae_cfg = MaeConfig {
        encoder: tiny_encoder(),
        decoder_dim: 6,
        decoder_depth: 1,
        decoder_heads: 2,
        ..MaeConfig::default()
    };
    let mut ps = ParamStore::<f64>::new();
    let mae = MaeModel::new(&mut ps, &init, &mae_cfg)?;
    let vols = [random_volume([8, 8, 8], &mut rng)?, random_volume([8, 8, 8], &mut rng)?];
    let masks = [sample_mask(mae.grid(), 0.5, &mut rng)?, sample_mask(mae.grid(), 0.5, &mut rng)?];
    let r = grad_check(
        |xs| Ok(mae.forward(&ps.with_tensors(xs)?, &[&vols[0], &vols[1]], &masks)?.1),
        ps.tensors(),
        EPS,
    )?;
    let mut out = vec![CheckResult {
        name: "mae_model".into(),
        max_rel_error: r.max_rel_error,
        tolerance: MODEL_TOLERANCE,
        coordinates: r.coordinates_checked,
    }];

    let seg_cfg = SegConfig {
        encoder: tiny_encoder(),
        ..SegConfig::default()
    };
    let mut ps = ParamStore::<f64>::new();
    let seg = SegModel::new(&mut ps, &init, &seg_cfg)?;
    let labels = random_labels([8, 8, 8], 3, &mut rng)?;
    let r = grad_check(
        |xs| dice_ce_loss(&seg.forward(&ps.with_tensors(xs)?, &[&vols[0]])?, &[&labels], (1.0, 1.0), 1e-5),
        ps.tensors(),
        EPS,
    )?;
    out.push(CheckResult {
        name: "segmentation_model".into(),
        max_rel_error: r.max_rel_error,
        tolerance: MODEL_TOLERANCE,
        coordinates: r.coordinates_checked,
    });
    Ok(out)
}
