use super::*;
use ndarray::{array, Array};
use proptest::prelude::*;

fn tiny_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        variant: Variant::Nano,
        dim: 8,
        enc_depth: 2,
        dec_depth: 1,
        heads: 2,
        ffb_mult: 2,
        patch: 1,
        mode,
        shared_encoder: true,
    }
}

fn map(h: usize, w: usize, c: usize, salt: f64) -> Array3<f64> {
    Array::from_shape_fn((h, w, c), |(y, x, ch)| ((y * 13 + x * 7 + ch * 3) as f64 * 0.41 + salt).sin())
}

fn lat(rows: &[[f64; 2]], indices: &[usize]) -> LatentSubset<f64> {
    LatentSubset {
        tokens: Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j]),
        indices: indices.to_vec(),
    }
}

#[test]
fn transition_two_tokens_swaps() {
    let f = transition_reassemble(&lat(&[[1.0, 1.0]], &[0]), &lat(&[[2.0, 2.0]], &[1])).unwrap();
    assert_eq!(f, array![[2.0, 2.0], [1.0, 1.0]]);
}

#[test]
fn transition_four_tokens_order_preserving() {
    let (a, a2, b, b2) = ([1.0, 0.0], [1.5, 0.0], [2.0, 0.0], [2.5, 0.0]);
    let f = transition_reassemble(&lat(&[a, a2], &[0, 3]), &lat(&[b, b2], &[1, 2])).unwrap();
    assert_eq!(f, array![[2.0, 0.0], [1.0, 0.0], [1.5, 0.0], [2.5, 0.0]]);
}

#[test]
fn transition_rejects_non_partitions() {
    let overlap = transition_reassemble(&lat(&[[0.0; 2]], &[0]), &lat(&[[0.0; 2]], &[0]));
    assert!(matches!(overlap, Err(Error::Invariant(_))));
    let unsorted = transition_reassemble(&lat(&[[0.0; 2]; 2], &[3, 0]), &lat(&[[0.0; 2]; 2], &[1, 2]));
    assert!(matches!(unsorted, Err(Error::Invariant(_))));
}

/// All ways of choosing `k` of `0..n`, ascending.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut with = combinations(n - 1, k - 1);
    with.iter_mut().for_each(|c| c.push(n - 1));
    let mut out = combinations(n - 1, k);
    out.extend(with);
    out
}

#[test]
fn transition_always_crosses_subsets_for_every_small_partition() {
    for n in (2..=12).step_by(2) {
        for idx1 in combinations(n, n / 2) {
            let idx2: Vec<usize> = (0..n).filter(|i| !idx1.contains(i)).collect();
            // Token j of each subset carries its own source position as payload.
            let src1 = Array2::from_shape_fn((n / 2, 1), |(j, _)| idx1[j] as f64);
            let src2 = Array2::from_shape_fn((n / 2, 1), |(j, _)| idx2[j] as f64);
            let f = transition_reassemble(
                &LatentSubset { tokens: src1, indices: idx1.clone() },
                &LatentSubset { tokens: src2, indices: idx2.clone() },
            )
            .unwrap();
            let mut used = vec![false; n];
            for pos in 0..n {
                let from = f[[pos, 0]] as usize;
                assert!(!std::mem::replace(&mut used[from], true));
                assert_ne!(idx1.contains(&pos), idx1.contains(&from));
            }
        }
    }
}

#[test]
fn shared_encoder_is_order_independent() {
    let grid = GridShape::new(4, 4, 3, 1).unwrap();
    let model = StMae::<f64>::new(tiny_config(Mode::StMae), grid, 0).unwrap();
    let seq = model.embed(fptd::unfold(map(4, 4, 3, 0.0).view(), grid).view()).unwrap();
    let pair = fptd::decouple(&seq, 9).unwrap();
    let a1 = model.encode_subset(&pair.subset1, pair.indices1.clone(), Branch::First).unwrap();
    let a2 = model.encode_subset(&pair.subset2, pair.indices2.clone(), Branch::Second).unwrap();
    let b2 = model.encode_subset(&pair.subset2, pair.indices2.clone(), Branch::Second).unwrap();
    let b1 = model.encode_subset(&pair.subset1, pair.indices1.clone(), Branch::First).unwrap();
    assert_eq!((a1, a2), (b1, b2));
}

#[test]
fn full_size_sequence_splits_into_two_halves_of_128() {
    let grid = GridShape::new(64, 64, 2, 4).unwrap();
    let mut cfg = tiny_config(Mode::StMae);
    cfg.patch = 4;
    let model = StMae::<f32>::new(cfg, grid, 0).unwrap();
    let data = map(64, 64, 2, 0.3).mapv(|v| v as f32);
    let seq = model.embed(fptd::unfold(data.view(), grid).view()).unwrap();
    assert_eq!(seq.len(), 256);
    let pair = fptd::decouple(&seq, 1).unwrap();
    let l1 = model.encode_subset(&pair.subset1, pair.indices1, Branch::First).unwrap();
    let l2 = model.encode_subset(&pair.subset2, pair.indices2, Branch::Second).unwrap();
    assert_eq!((l1.tokens.nrows(), l2.tokens.nrows()), (128, 128));
}

#[test]
fn empty_encoder_returns_normalized_tokens() {
    let grid = GridShape::new(2, 2, 3, 1).unwrap();
    let mut cfg = tiny_config(Mode::StMae);
    cfg.enc_depth = 1;
    cfg.dec_depth = 0;
    let mut model = StMae::<f64>::new(cfg, grid, 0).unwrap();
    model.encoder.blocks.clear();
    let x = map(2, 8, 1, 0.2).into_shape_with_order((2, 8)).unwrap();
    let l = model.encode_subset(&x, vec![0, 3], Branch::First).unwrap();
    assert_eq!(l.tokens, model.encoder.norm.forward(&x).0);
}

/// Rows with zero mean and unit variance are fixed points of a fresh norm.
fn normalized_rows(n: usize, d: usize) -> Array2<f64> {
    let mut x = Array2::from_shape_fn((n, d), |(i, j)| ((i * 3 + j * 5) as f64 * 0.77).cos());
    for mut row in x.rows_mut() {
        let mean = row.mean().unwrap();
        row -= mean;
        let std = row.mapv(|v| v * v).mean().unwrap().sqrt();
        row /= std;
    }
    x
}

#[test]
fn empty_decoder_with_zero_positions_is_identity_up_to_norm_epsilon() {
    let grid = GridShape::new(2, 2, 3, 1).unwrap();
    let mut cfg = tiny_config(Mode::StMae);
    cfg.dec_depth = 0;
    let mut model = StMae::<f64>::new(cfg, grid, 0).unwrap();
    model.dec_pos.value.fill(0.0);
    let x = normalized_rows(4, 8);
    let y = model.decode(&x).unwrap();
    for (a, b) in x.iter().zip(y.iter()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn decoder_positions_reach_the_output() {
    let grid = GridShape::new(2, 2, 3, 1).unwrap();
    let mut model = StMae::<f64>::new(tiny_config(Mode::StMae), grid, 2).unwrap();
    let x = normalized_rows(4, 8);
    let before = model.decode(&x).unwrap();
    let p = model.dec_pos.value.clone();
    for (i, src) in [2, 0, 3, 1].into_iter().enumerate() {
        model.dec_pos.value.row_mut(i).assign(&p.row(src));
    }
    assert_ne!(before, model.decode(&x).unwrap());
}

#[test]
fn identity_head_folds_raw_patches_back_bitwise() {
    let grid = GridShape::new(8, 8, 2, 2).unwrap();
    let mut cfg = tiny_config(Mode::StMae);
    cfg.patch = 2;
    let mut model = StMae::<f64>::new(cfg, grid, 0).unwrap();
    model.head = Linear::zeros(8, 8, true);
    model.head.weight.value = Array2::eye(8);
    let m = map(8, 8, 2, 0.9);
    let patches = fptd::unfold(m.view(), grid);
    assert_eq!(model.project_and_fold(&patches).unwrap(), m);
}

#[test]
fn default_geometry_folds_to_64x64x960() {
    let grid = GridShape::new(64, 64, 960, 4).unwrap();
    let mut model = StMae::<f32>::new(ModelConfig::from_variant(Variant::Nano, 4), grid, 0).unwrap();
    model.head = Linear::zeros(128, grid.patch_len(), true);
    let carf = model.project_and_fold(&Array2::ones((256, 128))).unwrap();
    assert_eq!(carf.dim(), (64, 64, 960));
    assert!(carf.iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic_and_shape_preserving() {
    for (size, k) in [(8, 1), (16, 2), (16, 4)] {
        let grid = GridShape::new(size, size, 3, k).unwrap();
        let mut cfg = tiny_config(Mode::StMae);
        cfg.patch = k;
        let model = StMae::<f32>::new(cfg, grid, 5).unwrap();
        let pfdf = Pfdf {
            data: map(size, size, 3, 0.1).mapv(|v| v as f32),
            source: "x".into(),
        };
        let a = model.forward(&pfdf, 11).unwrap();
        assert_eq!(a.data.dim(), pfdf.dim());
        assert_eq!(a, model.forward(&pfdf, 11).unwrap());
    }
}

#[test]
fn forward_rejects_mismatched_maps() {
    let grid = GridShape::new(4, 4, 3, 1).unwrap();
    let model = StMae::<f32>::new(tiny_config(Mode::StMae), grid, 0).unwrap();
    let pfdf = Pfdf {
        data: Array3::zeros((4, 4, 5)),
        source: "x".into(),
    };
    assert!(matches!(model.forward(&pfdf, 0), Err(Error::InvalidInput(_))));
}

#[test]
fn config_validation() {
    let mut c = tiny_config(Mode::StMae);
    c.dec_depth = 2;
    assert!(c.validate().is_err());
    let mut c = tiny_config(Mode::StMae);
    c.heads = 3;
    assert!(c.validate().is_err());
    for v in Variant::ALL {
        let c = ModelConfig::from_variant(v, 4);
        c.validate().unwrap();
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    let odd = GridShape::new(3, 3, 1, 1).unwrap();
    assert!(StMae::<f32>::new(tiny_config(Mode::StMae), odd, 0).is_err());
    assert!(StMae::<f32>::new(tiny_config(Mode::Ae), odd, 0).is_ok());
}

#[test]
fn batched_pass_matches_the_staged_pass() {
    let grid = GridShape::new(4, 4, 3, 1).unwrap();
    for mode in Mode::ALL {
        for shared in [true, false] {
            let mut cfg = tiny_config(mode);
            cfg.shared_encoder = shared;
            if cfg.validate().is_err() {
                continue;
            }
            let model = StMae::<f64>::new(cfg, grid, 3).unwrap();
            let maps = [map(4, 4, 3, 0.0), map(4, 4, 3, 1.0)];
            let seeds = [21, 22];
            let patches = ndarray::concatenate![
                Axis(0),
                fptd::unfold(maps[0].view(), grid),
                fptd::unfold(maps[1].view(), grid)
            ];
            let (out, _) = model.forward_batch(&patches, &seeds).unwrap();
            for i in 0..2 {
                let staged = model.forward_map(maps[i].view(), seeds[i]).unwrap();
                let batched = fptd::fold(out.slice(s![i * 16..(i + 1) * 16, ..]), grid);
                for (a, b) in staged.iter().zip(batched.iter()) {
                    assert!((a - b).abs() < 1e-12, "{mode} shared={shared}");
                }
            }
        }
    }
}

#[test]
fn modes_share_a_parameter_count() {
    let grid = GridShape::new(4, 4, 3, 1).unwrap();
    let counts: Vec<usize> = Mode::ALL
        .iter()
        .map(|&m| StMae::<f32>::new(tiny_config(m), grid, 0).unwrap().param_count())
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn autoencoder_mode_ignores_the_seed() {
    let grid = GridShape::new(4, 4, 3, 1).unwrap();
    let model = StMae::<f64>::new(tiny_config(Mode::Ae), grid, 0).unwrap();
    let m = map(4, 4, 3, 0.4);
    assert_eq!(model.forward_map(m.view(), 1).unwrap(), model.forward_map(m.view(), 2).unwrap());
}

/// Loss `Σ w ⊙ out` so that `∂L/∂out = w`.
fn probe_loss(model: &StMae<f64>, patches: &Array2<f64>, seeds: &[u64], w: &Array2<f64>) -> f64 {
    (&model.forward_batch(patches, seeds).unwrap().0 * w).sum()
}

fn shift_param(model: &mut StMae<f64>, which: usize, idx: usize, delta: f64) {
    let mut k = 0;
    model.visit_mut(&mut |p: ParamMut<'_, f64>| {
        if k == which {
            p.value[idx] += delta;
        }
        k += 1;
    });
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let grid = GridShape::new(2, 4, 3, 1).unwrap();
    for mode in Mode::ALL {
        for shared in [true, false] {
            let mut cfg = tiny_config(mode);
            cfg.shared_encoder = shared;
            if cfg.validate().is_err() {
                continue;
            }
            let mut model = StMae::<f64>::new(cfg, grid, 7).unwrap();
            // Larger weights make attention non-trivial.
            model.visit_mut(&mut |p: ParamMut<'_, f64>| {
                if p.decay {
                    p.value.iter_mut().for_each(|v| *v *= 10.0);
                }
            });
            let patches = ndarray::concatenate![
                Axis(0),
                fptd::unfold(map(2, 4, 3, 0.0).view(), grid),
                fptd::unfold(map(2, 4, 3, 2.0).view(), grid)
            ];
            let seeds = [4, 5];
            let (out, tape) = model.forward_batch(&patches, &seeds).unwrap();
            let w = Array2::from_shape_fn(out.raw_dim(), |(i, j)| ((i * 3 + j) as f64 * 0.53).sin());
            model.zero_grad();
            model.backward(&tape, &w);

            let mut analytic = Vec::new();
            model.visit(&mut |name, _, _| analytic.push(name.to_string()));
            let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
            model.visit_mut(&mut |p: ParamMut<'_, f64>| grads.push((p.name.to_string(), p.grad.to_vec())));
            for (pi, (name, grad)) in grads.iter().enumerate() {
                assert!(grad.iter().any(|&g| g != 0.0), "{mode}: {name} has no gradient");
                for idx in [0, grad.len() / 2, grad.len() - 1] {
                    let h = 1e-5;
                    shift_param(&mut model, pi, idx, h);
                    let up = probe_loss(&model, &patches, &seeds, &w);
                    shift_param(&mut model, pi, idx, -2.0 * h);
                    let down = probe_loss(&model, &patches, &seeds, &w);
                    shift_param(&mut model, pi, idx, h);
                    let num = (up - down) / (2.0 * h);
                    let err = (num - grad[idx]).abs() / num.abs().max(grad[idx].abs()).max(1e-6);
                    assert!(err < 1e-4, "{mode} {name}[{idx}]: {num} vs {}", grad[idx]);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn transition_is_a_crossing_bijection(half in 1usize..=32, seed in any::<u64>()) {
        let n = half * 2;
        let (idx1, idx2) = fptd::decouple_indices(n, seed).unwrap();
        let tag = |idx: &[usize]| Array2::from_shape_fn((half, 1), |(j, _)| idx[j] as f64);
        let f = transition_reassemble(
            &LatentSubset { tokens: tag(&idx1), indices: idx1.clone() },
            &LatentSubset { tokens: tag(&idx2), indices: idx2.clone() },
        ).unwrap();
        let mut seen = vec![false; n];
        for pos in 0..n {
            let from = f[[pos, 0]] as usize;
            prop_assert!(!std::mem::replace(&mut seen[from], true));
            prop_assert_ne!(idx1.binary_search(&pos).is_ok(), idx1.binary_search(&from).is_ok());
        }
    }
}
