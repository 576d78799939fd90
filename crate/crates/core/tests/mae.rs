use voxmae::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use voxmae::data::{generate_dataset, normalize_volume, PhantomConfig, SplitCounts, Volume};
use voxmae::mae::{epoch_mask, masked_mse_loss, pretrain, stack_patches, MaeConfig, MaeModel};
use voxmae::patch::sample_mask;
use voxmae::transformer::EncoderConfig;
use voxmae::{grad_check, Error, FormatError, Init, ParamStore, ParamStore64, Rng, Tensor64};

fn tiny_config(volume: [usize; 3]) -> MaeConfig {
    MaeConfig {
        encoder: EncoderConfig::tiny(volume),
        decoder_dim: 6,
        decoder_depth: 1,
        decoder_heads: 2,
        epochs: 2,
        batch_size: 2,
        ..MaeConfig::default()
    }
}

fn random_volume(extents: [usize; 3], rng: &mut Rng) -> Volume {
    let n = extents.iter().product();
    normalize_volume(&Volume::new(extents, (0..n).map(|_| rng.normal() as f32).collect()).unwrap())
}

#[test]
fn reconstruction_shape_and_loss() {
    let cfg = tiny_config([8, 8, 8]);
    let mut ps = ParamStore64::new();
    let model = MaeModel::new(&mut ps, &Init::new(0), &cfg).unwrap();
    let mut rng = Rng::new(1, "v");
    let vols = [random_volume([8, 8, 8], &mut rng), random_volume([8, 8, 8], &mut rng)];
    let masks: Vec<_> = (0..2).map(|_| sample_mask(model.grid(), 0.75, &mut rng).unwrap()).collect();
    let (pred, loss) = model.forward(&ps, &[&vols[0], &vols[1]], &masks).unwrap();
    assert_eq!(pred.shape(), &[2, 8, 64]);
    let l = loss.item().unwrap();
    assert!(l.is_finite() && l >= 0.0);

    let wrong = random_volume([16, 8, 8], &mut rng);
    assert!(matches!(model.forward(&ps, &[&wrong], &masks[..1]), Err(Error::Contract(_))));
}

#[test]
fn full_pipeline_gradient_check() {
    let cfg = tiny_config([8, 8, 8]);
    let mut ps = ParamStore64::new();
    let model = MaeModel::new(&mut ps, &Init::new(2).with_std(0.3), &cfg).unwrap();
    let mut rng = Rng::new(3, "v");
    let vols = [random_volume([8, 8, 8], &mut rng), random_volume([8, 8, 8], &mut rng)];
    let masks: Vec<_> = (0..2).map(|_| sample_mask(model.grid(), 0.5, &mut rng).unwrap()).collect();
    let report = grad_check(
        |xs| {
            let store = ps.with_tensors(xs)?;
            Ok(model.forward(&store, &[&vols[0], &vols[1]], &masks)?.1)
        },
        ps.tensors(),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{:e} at {:?}", report.max_rel_error, report.worst);
}

#[test]
fn every_parameter_receives_gradient() {
    // 16³ keeps two tokens per axis at the coarsest stage; a lone token
    // makes q and k inert.
    let cfg = tiny_config([16, 16, 16]);
    let mut ps = ParamStore64::new();
    let model = MaeModel::new(&mut ps, &Init::new(4), &cfg).unwrap();
    let mut rng = Rng::new(5, "v");
    let vols = [random_volume([16, 16, 16], &mut rng), random_volume([16, 16, 16], &mut rng)];
    let masks: Vec<_> = (0..2).map(|_| sample_mask(model.grid(), 0.75, &mut rng).unwrap()).collect();
    let (_, loss) = model.forward(&ps, &[&vols[0], &vols[1]], &masks).unwrap();
    let grads = ps.gradients(&loss.backward().unwrap());
    for ((name, _), g) in ps.iter().zip(&grads) {
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} has no gradient");
    }
}

#[test]
fn visible_targets_get_exactly_zero_gradient() {
    let grid = voxmae::patch::PatchGrid::new([4, 4, 4], [2, 2, 2]).unwrap();
    let m = sample_mask(&grid, 0.75, &mut Rng::new(0, "m")).unwrap();
    let mut rng = Rng::new(1, "t");
    let pred = Tensor64::from_vec(&[8, 8], (0..64).map(|_| rng.normal()).collect()).unwrap();
    let target = Tensor64::from_vec(&[8, 8], (0..64).map(|_| rng.normal()).collect()).unwrap().to_parameter();
    let loss = masked_mse_loss(&pred, &target, &m).unwrap();
    let g = loss.backward().unwrap().wrt(&target);
    for i in 0..8 {
        let row = &g.data()[i * 8..(i + 1) * 8];
        if m.is_masked(i) {
            assert!(row.iter().all(|&v| v != 0.0));
        } else {
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn raw_stacking_matches_patchify() {
    let mut rng = Rng::new(0, "s");
    let v = random_volume([8, 8, 8], &mut rng);
    let grid = voxmae::patch::PatchGrid::new([8, 8, 8], [4, 4, 4]).unwrap();
    let stacked = stack_patches::<f64>(&[&v], &grid).unwrap();
    let seq = voxmae::patch::patchify::<f64>(&v, [4, 4, 4]).unwrap();
    assert_eq!(stacked.data(), seq.tokens.data());
}

fn tiny_dataset() -> voxmae::data::Dataset {
    generate_dataset(&PhantomConfig::with_extents([16, 16, 16]), SplitCounts::new(4, 0, 0, 0), 9).unwrap()
}

#[test]
fn pretraining_is_deterministic_and_encoder_only() {
    let ds = tiny_dataset();
    let cfg = tiny_config([16, 16, 16]);
    let a = pretrain(&ds, &cfg).unwrap();
    let b = pretrain(&ds, &cfg).unwrap();
    assert_eq!(a.losses.len(), cfg.epochs);
    assert_eq!(a.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert!(a.checkpoint.params.iter().all(|(n, _)| n.starts_with("encoder.")));
    assert_eq!(a.checkpoint.provenance, voxmae::checkpoint::Provenance::MaePretrained);
    assert_eq!(a.checkpoint.encoder_fingerprint, cfg.encoder.fingerprint());
}

#[test]
fn masks_are_resampled_across_epochs() {
    let grid = voxmae::patch::PatchGrid::new([32, 32, 32], [4, 4, 4]).unwrap();
    let differs = (0..32).any(|i| epoch_mask(&grid, 0.75, 0, 0, i).unwrap() != epoch_mask(&grid, 0.75, 0, 1, i).unwrap());
    assert!(differs);
    assert_eq!(epoch_mask(&grid, 0.75, 0, 3, 7).unwrap(), epoch_mask(&grid, 0.75, 0, 3, 7).unwrap());
}

#[test]
fn empty_pretrain_split_is_a_config_error() {
    let ds = generate_dataset(&PhantomConfig::with_extents([16, 16, 16]), SplitCounts::new(0, 1, 1, 1), 0).unwrap();
    assert!(matches!(pretrain(&ds, &tiny_config([16, 16, 16])), Err(Error::Config(_))));
}

fn sample_checkpoint() -> Checkpoint<f32> {
    let cfg = tiny_config([8, 8, 8]);
    let mut ps = ParamStore::<f32>::new();
    MaeModel::new(&mut ps, &Init::new(0), &cfg).unwrap();
    Checkpoint::from_store(
        &ps,
        |n| n.starts_with("encoder."),
        cfg.fingerprint(),
        cfg.encoder.fingerprint(),
        voxmae::checkpoint::Provenance::MaePretrained,
        2,
        0,
    )
}

#[test]
fn checkpoint_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let c = sample_checkpoint();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&p1, &c).unwrap();
    let loaded: Checkpoint<f32> = load_checkpoint(&p1).unwrap();
    save_checkpoint(&p2, &loaded).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn edited_manifest_shape_names_the_parameter() {
    let bytes = sample_checkpoint().to_bytes();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let header_end = text.find('\n').unwrap();
    let header = &text[..header_end];
    let needle = r#""name":"encoder.patch_embed.weight","shape":[64,6]"#;
    assert!(header.contains(needle), "{header}");
    let edited = header.replace(needle, r#""name":"encoder.patch_embed.weight","shape":[64,7]"#);
    let mut corrupted = edited.into_bytes();
    corrupted.extend_from_slice(&bytes[header_end..]);
    let err = Checkpoint::<f32>::from_bytes(&corrupted).unwrap_err();
    assert!(
        matches!(&err, Error::Format(FormatError::Parameter { name, .. }) if name == "encoder.patch_embed.weight"),
        "{err}"
    );
    assert!(err.to_string().contains("encoder.patch_embed.weight"));
}

#[test]
fn unknown_version_is_rejected() {
    let bytes = sample_checkpoint().to_bytes();
    let text = String::from_utf8_lossy(&bytes).replacen(r#""version":1"#, r#""version":9"#, 1);
    let err = Checkpoint::<f32>::from_bytes(text.as_bytes()).unwrap_err();
    assert!(matches!(err, Error::Format(FormatError::UnknownVersion { found: 9, .. })), "{err}");
}

#[test]
fn fingerprints_track_configs() {
    let a = MaeConfig::default();
    let mut b = a.clone();
    b.mask_ratio = 0.6;
    assert_ne!(a.fingerprint(), b.fingerprint());
    assert_eq!(a.encoder.fingerprint(), b.encoder.fingerprint());
    b.encoder.dims = vec![48, 96, 192];
    assert_ne!(a.encoder.fingerprint(), b.encoder.fingerprint());
}
