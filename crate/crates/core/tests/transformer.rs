use voxmae::transformer::{window_partition, Attention, AttentionKind, Block, Encoder, EncoderConfig, PatchMerge, TokenSet};
use voxmae::{grad_check, Error, Init, ParamStore64, Rng, Tensor64};

const GRAD_TOL: f64 = 1e-5;
const EPS: f64 = 1e-5;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor64 {
    let n: usize = shape.iter().product();
    Tensor64::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn weighted_sum(y: &Tensor64, seed: u64) -> voxmae::Result<Tensor64> {
    let mut rng = Rng::new(seed, "weights");
    let w: Vec<f64> = (0..y.numel()).map(|_| rng.uniform_in(0.5, 1.5)).collect();
    y.mul(&Tensor64::from_vec(y.shape(), w)?)?.sum()
}

/// Larger than the training init so gradients are well above rounding noise.
fn check_init() -> Init {
    Init::new(3).with_std(0.3)
}

/// Gradient check over every parameter of `ps` plus the input `x`.
fn check_model(ps: &ParamStore64, x: &Tensor64, f: impl Fn(&ParamStore64, &Tensor64) -> voxmae::Result<Tensor64>) -> f64 {
    let mut inputs = ps.tensors().to_vec();
    inputs.push(x.clone());
    let np = ps.len();
    let report = grad_check(
        |xs| {
            let store = ps.with_tensors(&xs[..np])?;
            weighted_sum(&f(&store, &xs[np])?, 11)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    report.max_rel_error
}

fn attention(dim: usize, heads: usize) -> (ParamStore64, Attention) {
    let mut ps = ParamStore64::new();
    let attn = Attention::new(&mut ps, &Init::new(1).with_std(0.3), "attn", dim, heads).unwrap();
    (ps, attn)
}

#[test]
fn heads_must_divide_width() {
    let mut ps = ParamStore64::new();
    let err = Attention::new(&mut ps, &Init::new(0), "a", 6, 4).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn single_token_attention_is_output_of_value_path() {
    let (ps, attn) = attention(6, 2);
    let x = randn(&[1, 6], &mut Rng::new(0, "x"));
    let y = attn.forward(&ps, &x).unwrap();
    let expected = attn.proj.forward(&ps, &attn.v.forward(&ps, &x).unwrap()).unwrap();
    assert!(y.bit_eq(&expected));
}

#[test]
fn global_attention_is_permutation_equivariant() {
    let (ps, attn) = attention(8, 2);
    let mut rng = Rng::new(5, "perm");
    for _ in 0..5 {
        let x = randn(&[1, 10, 8], &mut rng);
        let perm = rng.permutation(10);
        let y = attn.forward(&ps, &x).unwrap();
        let yp = attn.forward(&ps, &x.index_select(1, &perm).unwrap()).unwrap();
        let py = y.index_select(1, &perm).unwrap();
        for (a, b) in yp.data().iter().zip(py.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn full_grid_window_equals_global_bitwise() {
    let (ps, attn) = attention(6, 3);
    let x = randn(&[2, 8, 6], &mut Rng::new(2, "x"));
    let local = attn.forward_local(&ps, &x, [2, 2, 2], [2, 2, 2]).unwrap();
    assert!(local.bit_eq(&attn.forward(&ps, &x).unwrap()));
}

#[test]
fn four_cubed_grid_partitions_into_eight_windows() {
    let x = Tensor64::zeros(&[1, 64, 6]);
    let w = window_partition(&x, [4, 4, 4], [2, 2, 2]).unwrap();
    assert_eq!(w.shape(), &[8, 8, 6]);
    let err = window_partition(&x, [4, 4, 4], [3, 2, 2]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn local_attention_has_no_cross_window_influence() {
    let (ps, attn) = attention(6, 2);
    let grid = [4, 4, 4];
    let x = randn(&[1, 64, 6], &mut Rng::new(9, "x"));
    let base = attn.forward_local(&ps, &x, grid, [2, 2, 2]).unwrap();
    // Token (0,0,0) lives in window (0,0,0); perturb it.
    let mut data = x.to_vec();
    for v in &mut data[..6] {
        *v += 3.0;
    }
    let moved = attn.forward_local(&ps, &Tensor64::from_vec(&[1, 64, 6], data).unwrap(), grid, [2, 2, 2]).unwrap();
    for t in 0..64 {
        let (z, y, xx) = (t / 16, (t / 4) % 4, t % 4);
        let same = base.data()[t * 6..(t + 1) * 6] == moved.data()[t * 6..(t + 1) * 6];
        let in_window = z < 2 && y < 2 && xx < 2;
        assert_eq!(same, !in_window, "token {t}");
    }
}

fn block(kind: AttentionKind) -> (ParamStore64, Block) {
    let mut ps = ParamStore64::new();
    let b = Block::new(&mut ps, &check_init(), "blk", 6, 2, 2, kind, [2, 2, 2]).unwrap();
    (ps, b)
}

#[test]
fn zeroed_output_projections_make_block_identity() {
    for kind in [AttentionKind::Local, AttentionKind::Global] {
        let (mut ps, b) = block(kind);
        for name in ["blk.attn.proj.weight", "blk.attn.proj.bias", "blk.mlp.fc2.weight", "blk.mlp.fc2.bias"] {
            let id = ps.id(name).unwrap();
            let shape = ps.get(id).shape().to_vec();
            ps.set(id, Tensor64::zeros(&shape)).unwrap();
        }
        let x = randn(&[2, 64, 6], &mut Rng::new(1, "x"));
        let y = b.forward(&ps, &x, [4, 4, 4], true).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.bit_eq(&x));
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    for kind in [AttentionKind::Local, AttentionKind::Global] {
        let (ps, b) = block(kind);
        let x = randn(&[1, 8, 6], &mut Rng::new(4, "x"));
        let err = check_model(&ps, &x, |ps, x| b.forward(ps, x, [2, 2, 2], true));
        assert!(err < GRAD_TOL, "{kind:?}: {err:e}");
    }
}

#[test]
fn patch_merge_shapes_locality_and_gradients() {
    let mut ps = ParamStore64::new();
    let merge = PatchMerge::new(&mut ps, &check_init(), "merge", 3).unwrap();
    let x = randn(&[1, 64, 3], &mut Rng::new(6, "x"));
    let (y, g) = merge.forward(&ps, &x, [4, 4, 4]).unwrap();
    assert_eq!(g, [2, 2, 2]);
    assert_eq!(y.shape(), &[1, 8, 6]);

    // Source token (3,2,1) feeds merged token (1,1,0) = index 6 only.
    let src = 3 * 16 + 2 * 4 + 1;
    let mut data = x.to_vec();
    data[src * 3] += 1.0;
    let (y2, _) = merge.forward(&ps, &Tensor64::from_vec(&[1, 64, 3], data).unwrap(), [4, 4, 4]).unwrap();
    for t in 0..8 {
        let same = y.data()[t * 6..(t + 1) * 6] == y2.data()[t * 6..(t + 1) * 6];
        assert_eq!(same, t != 6, "merged token {t}");
    }

    let err = merge.forward(&ps, &Tensor64::zeros(&[1, 12, 3]), [3, 2, 2]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));

    let small = randn(&[1, 8, 3], &mut Rng::new(7, "x"));
    let rel = check_model(&ps, &small, |ps, x| Ok(merge.forward(ps, x, [2, 2, 2])?.0));
    assert!(rel < GRAD_TOL, "{rel:e}");
}

/// 8³ volume with 2³ patches: a 4³ stage-0 grid with real 2³ windows.
fn tiny() -> EncoderConfig {
    let mut c = EncoderConfig::tiny([8, 8, 8]);
    c.patch = [2, 2, 2];
    c
}

#[test]
fn default_encoder_stage_arithmetic() {
    let c = EncoderConfig::default();
    let mut ps = ParamStore64::new();
    let enc = Encoder::new(&mut ps, &Init::new(0), &c).unwrap();
    let raw = randn(&[1, 512, 64], &mut Rng::new(0, "x"));
    let feats = voxmae::no_grad(|| enc.forward(&ps, &enc.embed(&ps, &raw)?, TokenSet::Full)).unwrap();
    let got: Vec<_> = feats.stages.iter().map(|s| (s.grid, s.tokens.shape().to_vec())).collect();
    assert_eq!(
        got,
        vec![
            ([8, 8, 8], vec![1, 512, 24]),
            ([4, 4, 4], vec![1, 64, 48]),
            ([2, 2, 2], vec![1, 8, 96]),
        ]
    );
    let again = voxmae::no_grad(|| enc.forward(&ps, &enc.embed(&ps, &raw)?, TokenSet::Full)).unwrap();
    for (a, b) in feats.stages.iter().zip(&again.stages) {
        assert!(a.tokens.bit_eq(&b.tokens));
    }
}

#[test]
fn tiny_encoder_gradient_check() {
    let mut ps = ParamStore64::new();
    let enc = Encoder::new(&mut ps, &check_init(), &tiny()).unwrap();
    let raw = randn(&[1, 64, 8], &mut Rng::new(8, "x"));
    let err = check_model(&ps, &raw, |ps, x| {
        let f = enc.forward(ps, &enc.embed(ps, x)?, TokenSet::Full)?;
        // Touch every stage so skip features are checked too.
        f.stages[0].tokens.sum()?.add(&weighted_sum(&f.bottleneck().tokens, 2)?)
    });
    assert!(err < GRAD_TOL, "{err:e}");
}

#[test]
fn tiny_encoder_has_no_dead_parameters() {
    let mut ps = ParamStore64::new();
    let enc = Encoder::new(&mut ps, &Init::new(4), &tiny()).unwrap();
    let raw = randn(&[2, 64, 8], &mut Rng::new(1, "x"));
    let subsets = vec![vec![0, 5, 17, 40, 63], vec![1, 2, 3, 30, 50]];
    for set in [TokenSet::Full, TokenSet::Subset(subsets.clone())] {
        let x = enc.embed(&ps, &raw).unwrap();
        let x = match &set {
            TokenSet::Full => x,
            TokenSet::Subset(s) => {
                let rows: Vec<usize> = s.iter().enumerate().flat_map(|(b, g)| g.iter().map(move |&i| b * 64 + i)).collect();
                x.reshape(&[128, 6]).unwrap().index_select(0, &rows).unwrap().reshape(&[2, 5, 6]).unwrap()
            }
        };
        let f = enc.forward(&ps, &x, set.clone()).unwrap();
        let loss = weighted_sum(&f.bottleneck().tokens, 5).unwrap();
        let grads = ps.gradients(&loss.backward().unwrap());
        for ((name, _), g) in ps.iter().zip(&grads) {
            assert!(g.data().iter().any(|v| *v != 0.0), "{set:?}: {name} has zero gradient");
        }
    }
}
