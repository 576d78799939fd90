use voxmae::checkpoint::{Checkpoint, Provenance};
use voxmae::data::{generate_dataset, LabelMap, PhantomConfig, Split, SplitCounts, Volume};
use voxmae::mae::{pretrain, MaeConfig, MaeModel};
use voxmae::seg::{dice_ce_loss, finetune, finetune_on, transfer_encoder, SegConfig, SegModel, TrainedSegmenter};
use voxmae::transformer::EncoderConfig;
use voxmae::{grad_check, no_grad, Error, Init, ParamStore, ParamStore64, Rng, Tensor32, Tensor64};

fn tiny_seg(volume: [usize; 3]) -> SegConfig {
    SegConfig {
        encoder: EncoderConfig::tiny(volume),
        epochs: 2,
        batch_size: 2,
        ..SegConfig::default()
    }
}

fn random_labels(extents: [usize; 3], c: u8, rng: &mut Rng) -> LabelMap {
    let n = extents.iter().product();
    LabelMap::new(extents, c, (0..n).map(|_| (rng.uniform() * c as f64) as u8).collect()).unwrap()
}

fn random_volume(extents: [usize; 3], rng: &mut Rng) -> Volume {
    let n = extents.iter().product();
    Volume::new(extents, (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
}

fn pretrained_encoder(encoder: &EncoderConfig, provenance: Provenance) -> Checkpoint<f32> {
    let cfg = MaeConfig {
        encoder: encoder.clone(),
        decoder_dim: 6,
        decoder_heads: 1,
        ..MaeConfig::default()
    };
    let mut ps = ParamStore::<f32>::new();
    MaeModel::new(&mut ps, &Init::new(77), &cfg).unwrap();
    Checkpoint::from_store(&ps, |n| n.starts_with("encoder."), cfg.fingerprint(), encoder.fingerprint(), provenance, 1, 77)
}

#[test]
fn transfer_copies_exactly_the_encoder() {
    let cfg = tiny_seg([16, 16, 16]);
    let ckpt = pretrained_encoder(&cfg.encoder, Provenance::MaePretrained);
    let mut ps = ParamStore::<f32>::new();
    let model = SegModel::new(&mut ps, &Init::new(1), &cfg).unwrap();
    let before = ps.clone();
    let names = transfer_encoder(&ckpt, &model, &mut ps).unwrap();

    assert!(ps.iter().zip(before.iter()).any(|((n, t), (_, old))| n.starts_with("encoder.") && !t.bit_eq(old)));
    let encoder_names: Vec<&str> = ps.iter().map(|(n, _)| n).filter(|n| n.starts_with("encoder.")).collect();
    assert_eq!(names, encoder_names);
    for ((name, t), (_, old)) in ps.iter().zip(before.iter()) {
        if name.starts_with("encoder.") {
            assert!(t.bit_eq(ckpt.get(name).unwrap()), "{name} not copied");
        } else {
            assert!(t.bit_eq(old), "{name} touched by transfer");
        }
    }
}

#[test]
fn wrong_provenance_still_transfers() {
    let cfg = tiny_seg([16, 16, 16]);
    let ckpt = pretrained_encoder(&cfg.encoder, Provenance::Finetuned);
    let mut ps = ParamStore::<f32>::new();
    let model = SegModel::new(&mut ps, &Init::new(1), &cfg).unwrap();
    assert!(!transfer_encoder(&ckpt, &model, &mut ps).unwrap().is_empty());
}

#[test]
fn width_mismatch_is_a_transfer_error_naming_the_parameter() {
    let narrow = EncoderConfig::default();
    let ckpt = pretrained_encoder(&narrow, Provenance::MaePretrained);
    let mut wide = SegConfig::default();
    wide.encoder.dims = vec![48, 96, 192];
    let mut ps = ParamStore::<f32>::new();
    let model = SegModel::new(&mut ps, &Init::new(1), &wide).unwrap();
    let err = transfer_encoder(&ckpt, &model, &mut ps).unwrap_err();
    assert!(matches!(err, Error::Transfer(_)), "{err}");
    assert!(err.to_string().contains("encoder.patch_embed.weight"), "{err}");
}

#[test]
fn default_logits_shape_and_softmax_normalization() {
    let cfg = SegConfig::default();
    let mut ps = ParamStore::<f32>::new();
    let model = SegModel::new(&mut ps, &Init::new(0), &cfg).unwrap();
    let seg = TrainedSegmenter { model, params: ps };
    let v = random_volume([32, 32, 32], &mut Rng::new(0, "v"));
    let pred = seg.predict(&v).unwrap();
    assert_eq!(pred.logits.shape(), &[3, 32, 32, 32]);
    let p = no_grad(|| pred.logits.softmax(0)).unwrap();
    let n = 32 * 32 * 32;
    for i in 0..n {
        let s: f64 = (0..3).map(|c| p.data()[c * n + i] as f64).sum();
        assert!((s - 1.0).abs() <= 1e-6, "voxel {i}: {s}");
    }
    assert_eq!(pred.labels.extents, [32, 32, 32]);
}

#[test]
fn zeroed_skips_still_give_finite_logits() {
    let cfg = SegConfig::default();
    let mut ps = ParamStore::<f32>::new();
    let model = SegModel::new(&mut ps, &Init::new(0), &cfg).unwrap();
    let v = random_volume([32, 32, 32], &mut Rng::new(1, "v"));
    let raw = voxmae::mae::stack_patches::<f32>(&[&v], model.grid()).unwrap();
    let logits = no_grad(|| {
        let mut feats = model.encode(&ps, &raw)?;
        let last = feats.stages.len() - 1;
        for s in &mut feats.stages[..last] {
            s.tokens = Tensor32::zeros(s.tokens.shape());
        }
        model.decode(&ps, &feats)
    })
    .unwrap();
    assert_eq!(logits.shape(), &[1, 3, 32, 32, 32]);
    assert!(logits.data().iter().all(|x| x.is_finite()));
}

#[test]
fn dice_ce_gradient_check() {
    let mut rng = Rng::new(2, "dc");
    let labels = random_labels([2, 2, 2], 3, &mut rng);
    let logits = Tensor64::from_vec(&[3, 2, 2, 2], (0..24).map(|_| rng.normal()).collect()).unwrap();
    let report = grad_check(|xs| dice_ce_loss(&xs[0], &[&labels], (1.0, 1.0), 1e-5), &[logits], 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-5, "{:e}", report.max_rel_error);
}

#[test]
fn saturated_logits_give_near_zero_loss() {
    let labels = LabelMap::new([2, 2, 2], 3, vec![0, 1, 2, 1, 0, 2, 2, 1]).unwrap();
    let mut data = vec![0.0; 24];
    for (i, &c) in labels.classes.iter().enumerate() {
        data[c as usize * 8 + i] = 20.0;
    }
    let logits = Tensor64::from_vec(&[3, 2, 2, 2], data).unwrap();
    let loss = dice_ce_loss(&logits, &[&labels], (1.0, 1.0), 1e-5).unwrap().item().unwrap();
    assert!((0.0..0.01).contains(&loss), "{loss}");
}

#[test]
fn loss_is_nonnegative_on_random_inputs() {
    let mut rng = Rng::new(8, "nn");
    for _ in 0..20 {
        let labels = random_labels([2, 3, 2], 3, &mut rng);
        let logits = Tensor64::from_vec(&[3, 2, 3, 2], (0..36).map(|_| 5.0 * rng.normal()).collect()).unwrap();
        assert!(dice_ce_loss(&logits, &[&labels], (1.0, 1.0), 1e-5).unwrap().item().unwrap() >= 0.0);
    }
}

#[test]
fn encoder_decoder_gradient_check() {
    let mut cfg = tiny_seg([8, 8, 8]);
    cfg.encoder.patch = [2, 2, 2];
    let mut ps = ParamStore64::new();
    let model = SegModel::new(&mut ps, &Init::new(5).with_std(0.3), &cfg).unwrap();
    let mut rng = Rng::new(6, "g");
    let v = random_volume([8, 8, 8], &mut rng);
    let labels = random_labels([8, 8, 8], 3, &mut rng);
    let report = grad_check(
        |xs| {
            let store = ps.with_tensors(xs)?;
            dice_ce_loss(&model.forward(&store, &[&v])?, &[&labels], (1.0, 1.0), 1e-5)
        },
        ps.tensors(),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{:e} at {:?}", report.max_rel_error, report.worst);
}

fn tiny_dataset() -> voxmae::data::Dataset {
    generate_dataset(&PhantomConfig::with_extents([16, 16, 16]), SplitCounts::new(2, 3, 1, 1), 3).unwrap()
}

#[test]
fn finetuning_is_deterministic_with_curves_per_epoch() {
    let ds = tiny_dataset();
    let cfg = tiny_seg([16, 16, 16]);
    let a = finetune(&ds, &cfg, None).unwrap();
    let b = finetune(&ds, &cfg, None).unwrap();
    assert_eq!((a.train_loss.len(), a.val_dice.len()), (cfg.epochs, cfg.epochs));
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.train_loss, b.train_loss);
    assert_eq!(a.val_dice, b.val_dice);
    assert_eq!(a.checkpoint.provenance, Provenance::Finetuned);
    assert!(a.transferred.is_empty());
}

#[test]
fn finetuning_from_pretrained_and_frozen_encoder() {
    let ds = tiny_dataset();
    let cfg = tiny_seg([16, 16, 16]);
    let mae = MaeConfig {
        encoder: cfg.encoder.clone(),
        decoder_dim: 6,
        decoder_heads: 1,
        epochs: 1,
        ..MaeConfig::default()
    };
    let pre = pretrain(&ds, &mae).unwrap().checkpoint;
    let frozen = SegConfig {
        freeze_encoder: true,
        ..cfg.clone()
    };
    let out = finetune(&ds, &frozen, Some(&pre)).unwrap();
    assert_eq!(out.transferred.len(), pre.params.len());
    for (name, t) in &pre.params {
        assert!(out.checkpoint.get(name).unwrap().bit_eq(t), "{name} moved while frozen");
    }
    let thawed = finetune(&ds, &cfg, Some(&pre)).unwrap();
    assert!(pre.params.iter().any(|(n, t)| !thawed.checkpoint.get(n).unwrap().bit_eq(t)));
}

#[test]
fn empty_training_set_is_a_config_error() {
    let ds = tiny_dataset();
    let err = finetune_on(&ds, &[], &tiny_seg([16, 16, 16]), None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let unlabeled = ds.split(Split::PretrainUnlabeled)[0];
    let err = finetune_on(&ds, &[unlabeled], &tiny_seg([16, 16, 16]), None).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}
