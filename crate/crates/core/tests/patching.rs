use voxmae::data::Volume;
use voxmae::patch::{
    gather_visible, masked_count, patch_values, patchify, positional_encoding, sample_mask, scatter_full, unpatchify,
    PatchGrid, TokenForm,
};
use voxmae::{Error, Rng, Tensor64};

fn random_volume(extents: [usize; 3], rng: &mut Rng) -> Volume {
    let n = extents.iter().product();
    Volume::new(extents, (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
}

#[test]
fn patchify_is_a_bijection() {
    let combos = [([8, 8, 8], [4, 4, 4]), ([6, 4, 8], [3, 2, 4]), ([4, 6, 2], [1, 3, 2]), ([5, 5, 5], [5, 5, 5])];
    let mut rng = Rng::new(0, "bijection");
    for k in 0..200 {
        let (e, p) = combos[k % combos.len()];
        let v = random_volume(e, &mut rng);
        let seq = patchify::<f32>(&v, p).unwrap();
        assert_eq!(seq.tokens.shape(), &[seq.grid.len(), seq.grid.patch_dim()]);
        let back = unpatchify(&seq).unwrap();
        assert!(back.voxels.iter().zip(&v.voxels).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn eight_cubed_in_four_cubed_patches() {
    let grid = PatchGrid::new([8, 8, 8], [4, 4, 4]).unwrap();
    assert_eq!((grid.len(), grid.patch_dim()), (8, 64));
    assert_eq!(grid.locate([5, 2, 7]), (grid.index([1, 0, 1]), [1, 2, 3]));
    // Every voxel lands where integer division says it should.
    let v = Volume::new([8, 8, 8], (0..512).map(|i| i as f32).collect()).unwrap();
    let values = patch_values(&v, &grid);
    for z in 0..8 {
        for y in 0..8 {
            for x in 0..8 {
                let patch = (z / 4) * 4 + (y / 4) * 2 + x / 4;
                let local = (z % 4) * 16 + (y % 4) * 4 + x % 4;
                assert_eq!(values[patch * 64 + local], v.at(z, y, x));
            }
        }
    }
}

#[test]
fn non_divisible_axis_is_named() {
    let err = PatchGrid::new([8, 6, 8], [4, 4, 4]).unwrap_err();
    assert!(err.to_string().contains("height"), "{err}");
}

#[test]
fn unpatchify_contracts() {
    let grid_v = Volume::new([4, 4, 4], vec![0.0; 64]).unwrap();
    let mut seq = patchify::<f64>(&grid_v, [2, 2, 2]).unwrap();
    assert!(unpatchify(&seq).unwrap().voxels.iter().all(|&x| x == 0.0));
    seq.form = TokenForm::Embedded;
    assert!(matches!(unpatchify(&seq), Err(Error::Contract(_))));
}

#[test]
fn swapping_tokens_swaps_blocks() {
    let mut rng = Rng::new(1, "swap");
    let v = random_volume([8, 8, 8], &mut rng);
    let mut seq = patchify::<f32>(&v, [4, 4, 4]).unwrap();
    let (a, b) = (1, 6);
    let mut order: Vec<usize> = (0..8).collect();
    order.swap(a, b);
    seq.tokens = seq.tokens.index_select(0, &order).unwrap();
    let w = unpatchify(&seq).unwrap();
    let grid = seq.grid;
    for z in 0..8 {
        for y in 0..8 {
            for x in 0..8 {
                let (p, local) = grid.locate([z, y, x]);
                let src = if p == a { b } else if p == b { a } else { p };
                let c = grid.coord(src);
                let expected = v.at(c[0] * 4 + local[0], c[1] * 4 + local[1], c[2] * 4 + local[2]);
                assert_eq!(w.at(z, y, x).to_bits(), expected.to_bits());
            }
        }
    }
}

#[test]
fn positional_encoding_properties() {
    let grid = PatchGrid::new([8, 8, 8], [2, 2, 2]).unwrap();
    let pe = positional_encoding::<f64>(&grid, 24).unwrap();
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let row = |i: usize| &pe.data()[i * 24..(i + 1) * 24];
    let (p, q) = (grid.index([1, 2, 0]), grid.index([1, 2, 3]));
    assert_eq!(row(p)[..16], row(q)[..16]);
    assert_ne!(row(p)[16..], row(q)[16..]);

    let small = PatchGrid::new([2, 2, 2], [1, 1, 1]).unwrap();
    let pe = positional_encoding::<f64>(&small, 12).unwrap();
    for i in 0..8 {
        for j in 0..i {
            assert_ne!(pe.data()[i * 12..(i + 1) * 12], pe.data()[j * 12..(j + 1) * 12], "rows {i} and {j}");
        }
    }
    assert!(matches!(positional_encoding::<f64>(&small, 8), Err(Error::Config(_))));
}

#[test]
fn mask_counts_follow_integer_ceiling() {
    let extents = [[2, 2, 2], [4, 2, 2], [3, 3, 3], [4, 4, 4], [5, 3, 2], [7, 1, 1]];
    let ratios = [(1, 10), (1, 4), (1, 2), (3, 4), (2, 3), (9, 10), (1, 3), (3, 5), (7, 8), (1, 5)];
    let mut combos = 0;
    for e in extents {
        let grid = PatchGrid::new(e, [1, 1, 1]).unwrap();
        let n = grid.len();
        for (num, den) in ratios {
            let ratio = num as f64 / den as f64;
            let expected = (num * n).div_ceil(den);
            if expected == 0 || expected >= n {
                continue;
            }
            let m = sample_mask(&grid, ratio, &mut Rng::new(combos, "count")).unwrap();
            assert_eq!(m.masked.len(), expected, "n={n} ratio={num}/{den}");
            assert_eq!(masked_count(n, ratio), expected);
            let mut all: Vec<usize> = m.masked.iter().chain(&m.visible).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(m.masked.windows(2).all(|w| w[0] < w[1]) && m.visible.windows(2).all(|w| w[0] < w[1]));
            combos += 1;
        }
    }
    assert!(combos >= 50, "only {combos} combinations");
}

#[test]
fn mask_sampling_is_seeded_uniform_and_validated() {
    let grid = PatchGrid::new([2, 2, 2], [1, 1, 1]).unwrap();
    let m = sample_mask(&grid, 0.75, &mut Rng::new(1, "m")).unwrap();
    assert_eq!((m.masked.len(), m.visible.len()), (6, 2));
    assert_eq!(m, sample_mask(&grid, 0.75, &mut Rng::new(1, "m")).unwrap());

    let mut hits = [0usize; 8];
    let mut rng = Rng::new(2, "monte-carlo");
    let draws = 10_000;
    for _ in 0..draws {
        for i in sample_mask(&grid, 0.5, &mut rng).unwrap().masked {
            hits[i] += 1;
        }
    }
    for h in hits {
        let f = h as f64 / draws as f64;
        assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
    }
    for bad in [0.0, 1.0, -0.1, 1.5] {
        assert!(matches!(sample_mask(&grid, bad, &mut rng), Err(Error::Param(_))));
    }
}

#[test]
fn gather_then_scatter_restores_visible_tokens() {
    let mut rng = Rng::new(3, "gs");
    let v = random_volume([8, 8, 8], &mut rng);
    let seq = patchify::<f64>(&v, [2, 2, 2]).unwrap();
    let m = sample_mask(&seq.grid, 1.0 / 64.0, &mut rng).unwrap();
    let vis = gather_visible(&seq, &m).unwrap();
    assert_eq!(vis.len(), 63);
    assert_eq!(vis.source.as_deref(), Some(&m.visible[..]));

    let m = sample_mask(&seq.grid, 0.75, &mut rng).unwrap();
    let vis = gather_visible(&seq, &m).unwrap();
    let token = Tensor64::from_vec(&[8], (0..8).map(|i| i as f64 * 0.1 - 3.0).collect()).unwrap();
    let full = scatter_full(&vis, &token, &m).unwrap();
    let (src, out) = (seq.tokens.data(), full.tokens.data());
    for i in 0..seq.grid.len() {
        let row = &out[i * 8..(i + 1) * 8];
        if m.is_masked(i) {
            assert_eq!(row, token.data());
        } else {
            assert_eq!(row, &src[i * 8..(i + 1) * 8]);
        }
    }

    let other = patchify::<f64>(&random_volume([4, 4, 4], &mut rng), [2, 2, 2]).unwrap();
    assert!(matches!(gather_visible(&other, &m), Err(Error::Contract(_))));
    let short = gather_visible(&seq, &sample_mask(&seq.grid, 0.5, &mut rng).unwrap()).unwrap();
    assert!(matches!(scatter_full(&short, &token, &m), Err(Error::Contract(_))));
}
