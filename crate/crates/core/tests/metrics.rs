use proptest::prelude::*;
use voxmae::data::{generate_dataset, LabelMap, PhantomConfig, Split, SplitCounts, Volume};
use voxmae::metrics::{dice_score, epochs_to_threshold, evaluate, Segmenter};
use voxmae::{Error, Result, Rng};

fn labels(classes: Vec<u8>) -> LabelMap {
    let n = classes.len();
    LabelMap::new([1, 1, n], 3, classes).unwrap()
}

fn brute_force(pred: &LabelMap, gt: &LabelMap, c: u8) -> f64 {
    let a: Vec<usize> = (0..pred.classes.len()).filter(|&i| pred.classes[i] == c).collect();
    let b: Vec<usize> = (0..gt.classes.len()).filter(|&i| gt.classes[i] == c).collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.iter().filter(|i| b.contains(i)).count();
    2.0 * inter as f64 / (a.len() + b.len()) as f64
}

#[test]
fn hand_computed_overlaps() {
    // |A| = 4, |B| = 6, |A∩B| = 3
    let pred = labels(vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
    let gt = labels(vec![0, 1, 1, 1, 1, 1, 1, 0, 0, 0]);
    assert_eq!(dice_score(&pred, &gt, 1).unwrap(), 0.6);
    assert_eq!(dice_score(&pred, &pred, 1).unwrap(), 1.0);
    assert_eq!(dice_score(&labels(vec![1, 0]), &labels(vec![0, 1]), 1).unwrap(), 0.0);
    assert_eq!(dice_score(&labels(vec![0, 0]), &labels(vec![0, 0]), 2).unwrap(), 1.0);
    assert_eq!(dice_score(&labels(vec![2, 0]), &labels(vec![0, 0]), 2).unwrap(), 0.0);
}

#[test]
fn extent_mismatch_is_a_contract_error() {
    let err = dice_score(&labels(vec![0; 4]), &labels(vec![0; 5]), 1).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn matches_brute_force_on_random_pairs() {
    let mut rng = Rng::new(0, "dice");
    for k in 0..1000 {
        // vary class balance so that empty sets occur too
        let c = 1 + (k % 3) as u8;
        let gen = |rng: &mut Rng| LabelMap::new([8, 8, 8], 3, (0..512).map(|_| (rng.uniform() * c as f64) as u8).collect()).unwrap();
        let (p, g) = (gen(&mut rng), gen(&mut rng));
        for class in 0..3 {
            let d = dice_score(&p, &g, class).unwrap();
            assert_eq!(d, brute_force(&p, &g, class), "pair {k} class {class}");
            assert_eq!(d, dice_score(&g, &p, class).unwrap());
            assert!((0.0..=1.0).contains(&d));
        }
    }
}

#[test]
fn threshold_scan() {
    assert_eq!(epochs_to_threshold(&[0.2, 0.5, 0.7], 0.6), Some(3));
    assert_eq!(epochs_to_threshold(&[0.2, 0.3], 0.6), None);
    assert_eq!(epochs_to_threshold(&[0.6], 0.6), Some(1));
}

#[test]
fn raising_the_threshold_never_decreases_epochs() {
    let mut rng = Rng::new(1, "curves");
    for _ in 0..1000 {
        let len = 1 + (rng.uniform() * 30.0) as usize;
        let curve: Vec<f64> = (0..len).map(|_| rng.uniform()).collect();
        let (a, b) = (0.01 + 0.98 * rng.uniform(), 0.01 + 0.98 * rng.uniform());
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        match (epochs_to_threshold(&curve, lo), epochs_to_threshold(&curve, hi)) {
            (Some(x), Some(y)) => assert!(x <= y),
            (None, Some(_)) => panic!("lower threshold never reached but higher one was"),
            _ => {}
        }
    }
}

struct Oracle<'a>(&'a voxmae::data::Dataset);

impl Segmenter for Oracle<'_> {
    fn num_classes(&self) -> usize {
        3
    }

    fn segment(&self, volume: &Volume) -> Result<LabelMap> {
        let item = self.0.items.iter().find(|it| &it.volume == volume).unwrap();
        Ok(item.labels.clone().unwrap())
    }
}

struct Background;

impl Segmenter for Background {
    fn num_classes(&self) -> usize {
        3
    }

    fn segment(&self, volume: &Volume) -> Result<LabelMap> {
        LabelMap::new(volume.extents, 3, vec![0; volume.len()])
    }
}

struct Noisy(u64);

impl Segmenter for Noisy {
    fn num_classes(&self) -> usize {
        3
    }

    fn segment(&self, volume: &Volume) -> Result<LabelMap> {
        let mut rng = Rng::new(self.0, format!("noisy/{}", volume.voxels[0]));
        LabelMap::new(volume.extents, 3, (0..volume.len()).map(|_| (rng.uniform() * 3.0) as u8).collect())
    }
}

fn dataset() -> voxmae::data::Dataset {
    generate_dataset(&PhantomConfig::with_extents([16, 16, 16]), SplitCounts::new(1, 2, 2, 3), 4).unwrap()
}

#[test]
fn oracle_and_degenerate_models() {
    let ds = dataset();
    let test = ds.split(Split::Test);
    let r = evaluate(&Oracle(&ds), &ds, test).unwrap();
    assert_eq!(r.mean_dice, 1.0);
    assert_eq!(r.items, test.len());
    let r = evaluate(&Background, &ds, test).unwrap();
    assert_eq!((r.per_class[1], r.per_class[2], r.mean_dice), (0.0, 0.0, 0.0));
    assert!(r.per_class[0] > 0.0);
}

#[test]
fn aggregation_matches_recomputation() {
    let ds = dataset();
    let idx: Vec<usize> = ds.split(Split::Test).iter().chain(ds.split(Split::Validation)).copied().collect();
    let model = Noisy(9);
    let r = evaluate(&model, &ds, &idx).unwrap();
    let mut per_class = [0.0; 3];
    for &i in &idx {
        let pred = model.segment(&ds.items[i].volume).unwrap();
        for (c, acc) in per_class.iter_mut().enumerate() {
            *acc += dice_score(&pred, ds.items[i].labels.as_ref().unwrap(), c as u8).unwrap();
        }
    }
    for (c, acc) in per_class.iter().enumerate() {
        assert!((r.per_class[c] - acc / idx.len() as f64).abs() <= 1e-12);
    }
    let mean = (per_class[1] + per_class[2]) / (2.0 * idx.len() as f64);
    assert!((r.mean_dice - mean).abs() <= 1e-12);
}

#[test]
fn unlabeled_items_are_a_data_error() {
    let ds = dataset();
    let err = evaluate(&Background, &ds, ds.split(Split::PretrainUnlabeled)).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

proptest! {
    #[test]
    fn dice_is_symmetric(a in proptest::collection::vec(0u8..3, 27), b in proptest::collection::vec(0u8..3, 27), c in 0u8..3) {
        let (p, g) = (LabelMap::new([3, 3, 3], 3, a).unwrap(), LabelMap::new([3, 3, 3], 3, b).unwrap());
        prop_assert_eq!(dice_score(&p, &g, c).unwrap(), dice_score(&g, &p, c).unwrap());
    }
}
