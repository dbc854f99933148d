mod common;

use std::sync::Arc;

use common::{gradcheck, random_tensor};
use ditune_core::model::{
    modulated_weight, patchify, rope_apply, timestep_embedding, unpatchify, DiT, DiTConfig, ModelLayout, ParamRole,
    RopeGrid,
};
use ditune_core::{Error, Graph, RotationTable, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> DiTConfig {
    DiTConfig {
        image_size: 8,
        patch: 4,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        steps: 50,
        ..DiTConfig::default()
    }
}

fn small() -> DiTConfig {
    DiTConfig {
        dim: 32,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        steps: 100,
        ..DiTConfig::default()
    }
}

/// Randomises every parameter so zero-initialised layers stop masking paths.
fn perturb<F: Scalar>(model: &mut DiT<F>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut().iter_mut() {
        if matches!(p.role, ParamRole::Weight | ParamRole::Bias) {
            for v in p.value.data_mut() {
                *v = *v + F::of(scale * rng.random_range(-1.0..1.0));
            }
        }
    }
}

fn image<F: Scalar>(cfg: &DiTConfig, seed: u64) -> Tensor<F> {
    random_tensor(&cfg.image_shape(), seed, -1.0, 1.0).cast()
}

#[test]
fn patchify_examples() {
    let x = Tensor::new(&[4, 4, 1], (0..16).map(|v| v as f64).collect()).unwrap();
    let p = patchify(&x, 2).unwrap();
    assert_eq!(p.shape(), &[4, 4]);
    assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(unpatchify(&p, 2, 4, 4, 1).unwrap(), x);

    let whole = patchify(&x, 4).unwrap();
    assert_eq!(whole.shape(), &[1, 16]);
    assert_eq!(whole.data(), x.data());

    let img = random_tensor(&[32, 32, 3], 3, -1.0, 1.0);
    let t = patchify(&img, 4).unwrap();
    assert_eq!(t.shape(), &[64, 48]);
    assert_eq!(unpatchify(&t, 4, 32, 32, 3).unwrap(), img);
    assert!(patchify(&img, 5).is_err());
}

#[test]
fn timestep_embedding_examples() {
    let e0 = timestep_embedding(0, 16);
    assert!(e0[..8].iter().all(|v| *v == 0.0));
    assert!(e0[8..].iter().all(|v| *v == 1.0));
    let all: Vec<Vec<f64>> = (0..=1000).map(|t| timestep_embedding(t, 32)).collect();
    for e in &all {
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            let d: f64 = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 1e-9, "t={i} and t={j} collide");
        }
    }
}

#[test]
fn config_validation() {
    let mut c = DiTConfig::default();
    assert!(c.validate().is_ok());
    assert_eq!(c.tokens(), 64);
    c.dim = 24; // 24 % 16 != 0
    assert!(c.validate().is_err());
    let mut c = DiTConfig::default();
    c.patch = 5;
    assert!(c.validate().is_err());
}

#[test]
fn rope_preserves_norms_on_default_grid() {
    let grid = RopeGrid::new(8, 8, 32).unwrap();
    let table: RotationTable<f64> = grid.table().unwrap();
    let v = random_tensor(&[64, 32], 1, -1.0, 1.0);
    let r = rope_apply(&v, &table).unwrap();
    for i in 0..64 {
        let n0: f64 = v.data()[i * 32..(i + 1) * 32].iter().map(|x| x * x).sum();
        let n1: f64 = r.data()[i * 32..(i + 1) * 32].iter().map(|x| x * x).sum();
        assert!((n0.sqrt() - n1.sqrt()).abs() < 1e-5, "position {i}");
    }
    assert!(rope_apply(&random_tensor(&[64, 16], 1, -1.0, 1.0), &table).is_err());
    assert!(RopeGrid::new(8, 8, 6).is_err());
}

fn logits(q: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    q.matmul(&k.transpose2().unwrap()).unwrap()
}

#[test]
fn rope_logits_depend_only_on_relative_position() {
    let grid = RopeGrid::new(8, 8, 16).unwrap();
    let q = random_tensor(&[64, 16], 10, -1.0, 1.0);
    let k = random_tensor(&[64, 16], 11, -1.0, 1.0);
    let base = grid.table::<f64>().unwrap();
    let l0 = logits(&rope_apply(&q, &base).unwrap(), &rope_apply(&k, &base).unwrap());

    for (di, dj) in [(1.0, 0.0), (0.0, 3.0), (-2.5, 7.0)] {
        let t = grid.table_with_offset::<f64>(di, dj).unwrap();
        let l1 = logits(&rope_apply(&q, &t).unwrap(), &rope_apply(&k, &t).unwrap());
        assert!(l0.max_abs_diff(&l1) < 1e-5);
    }

    // (P_a q)ᵀ (P_b k) = qᵀ P_{b−a} k with the dense block-diagonal form.
    let d = 16;
    for (a, b) in [(0usize, 0usize), (3, 17), (63, 8), (40, 41)] {
        let (ai, aj) = ((a / 8) as f64, (a % 8) as f64);
        let (bi, bj) = ((b / 8) as f64, (b % 8) as f64);
        let rel = grid.dense_matrix(bi - ai, bj - aj);
        let qa = &q.data()[a * d..(a + 1) * d];
        let kb = &k.data()[b * d..(b + 1) * d];
        let pk: Vec<f64> = (0..d).map(|r| (0..d).map(|c| rel[r * d + c] * kb[c]).sum()).collect();
        let expected: f64 = qa.iter().zip(&pk).map(|(x, y)| x * y).sum();
        assert!((l0.at2(a, b) - expected).abs() < 1e-5, "{a},{b}");
        if a == b {
            let plain: f64 = qa.iter().zip(kb).map(|(x, y)| x * y).sum();
            assert!((l0.at2(a, b) - plain).abs() < 1e-12);
        }
    }
}

#[test]
fn modulated_weight_example_and_rank_bounds() {
    let t = |r: &[&[f64]]| Tensor::<f64>::from_rows(r).unwrap();
    let w = modulated_weight(
        &t(&[&[1.0, 2.0], &[3.0, 4.0]]),
        &t(&[&[1.0], &[2.0]]),
        &t(&[&[3.0, 4.0]]),
        &t(&[&[1.0], &[0.0]]),
        &t(&[&[0.5, 0.5]]),
    )
    .unwrap();
    assert_eq!(w, t(&[&[3.5, 8.5], &[18.0, 32.0]]));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = DiT::<f32>::new(tiny(), &mut rng).unwrap();
    assert!(matches!(m.wrap_modulation(9, &mut rng), Err(Error::Param(_))));
    assert!(m.clone().wrap_modulation(0, &mut rng).is_err());
    m.wrap_modulation(8, &mut rng).unwrap();
    assert!(m.wrap_modulation(2, &mut rng).is_err());
}

#[test]
fn modulation_factor_gradients_match_finite_differences() {
    for seed in 0..10 {
        let w = random_tensor(&[5, 4], seed, -1.0, 1.0);
        let x = random_tensor(&[3, 4], seed + 1, -1.0, 1.0);
        let bias = random_tensor(&[5], seed + 2, -1.0, 1.0);
        let go = random_tensor(&[5, 2], seed + 3, -1.0, 1.0);
        let gi = random_tensor(&[2, 4], seed + 4, -1.0, 1.0);
        let bo = random_tensor(&[5, 2], seed + 5, -1.0, 1.0);
        let bi = random_tensor(&[2, 4], seed + 6, -1.0, 1.0);
        let err = gradcheck(&[go, gi, bo, bi], &|g, v| {
            let (w, x, bias) = (g.constant(w.clone()), g.constant(x.clone()), g.constant(bias.clone()));
            let gamma = g.matmul(v[0], v[1])?;
            let shift = g.matmul(v[2], v[3])?;
            let wt = g.mul(w, gamma)?;
            let wt = g.add(wt, shift)?;
            let y = g.matmul_nt(x, wt)?;
            let y = g.add_row(y, bias)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn identity_init_is_bitwise_neutral() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut base = DiT::<f32>::new(cfg.clone(), &mut rng).unwrap();
    perturb(&mut base, 2, 0.05);
    let xs: Vec<Tensor<f32>> = (0..8).map(|i| image(&cfg, 100 + i)).collect();
    let ts: Vec<usize> = (0..8).map(|i| 1 + i * 12).collect();
    let ys: Vec<usize> = (0..8).collect();
    let before = base.forward_batch(&xs, &ts, &ys).unwrap();

    let mut wrapped = base.clone();
    wrapped.wrap_modulation(4, &mut rng).unwrap();
    wrapped.expand_conditions(5, &mut rng).unwrap();
    let after = wrapped.forward_batch(&xs, &ts, &ys).unwrap();
    assert_eq!(before, after);

    for layer in wrapped.target_layers() {
        let a = layer.adapter.unwrap();
        let p = wrapped.params();
        let gamma = p.get(a.gamma_out).value.matmul(&p.get(a.gamma_in).value).unwrap();
        assert!(gamma.data().iter().all(|v| *v == 1.0));
        let shift = p.get(a.b_out).value.matmul(&p.get(a.b_in).value).unwrap();
        assert!(shift.data().iter().all(|v| *v == 0.0));
        assert!(p.get(a.b_in).value.data().iter().any(|v| *v != 0.0));
    }
}

#[test]
fn adapter_accounting_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = DiT::<f32>::new(DiTConfig::default(), &mut rng).unwrap();
    let total_before = m.params().total_count();
    m.wrap_modulation(4, &mut rng).unwrap();
    m.expand_conditions(5, &mut rng).unwrap();
    let d = 128;
    // cond fc1 (d→d), cond fc2 (d→26d), and per block qkv (d→3d), proj (d→d).
    let expected = 2 * 4 * ((d + d) + (26 * d + d) + 4 * ((3 * d + d) + (d + d)));
    assert_eq!(m.adapter_param_count(), expected);
    let new = m.params().total_count() - total_before;
    assert_eq!(new, expected + 5 * d);
    let frac = (expected + 5 * d) as f64 / m.params().total_count() as f64;
    assert!(frac < 0.05, "{frac}");
}

#[test]
fn single_token_attention_is_the_value_projection() {
    let cfg = DiTConfig {
        image_size: 4,
        patch: 4,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 1,
        steps: 10,
        ..DiTConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = DiT::<f64>::new(cfg, &mut rng).unwrap();
    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let block = &m.blocks()[0];
    let x = g.constant(random_tensor(&[1, 8], 5, -1.0, 1.0));
    let out = m.attention(&mut g, &b, block, x).unwrap();
    let qkv = m.linear_forward(&mut g, &b, &block.qkv, x).unwrap();
    let v = g.slice_cols(qkv, 16, 8).unwrap();
    let expected = m.linear_forward(&mut g, &b, &block.proj, v).unwrap();
    assert!(g.value(out).max_abs_diff(g.value(expected)) < 1e-12);
}

#[test]
fn attention_is_permutation_equivariant() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = DiT::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let grid = m.rope_grid();
    let n = cfg.tokens();
    let perm = [2usize, 0, 3, 1];
    let x = random_tensor(&[n, cfg.dim], 7, -1.0, 1.0);
    let mut xp = x.clone();
    let mut angles = Vec::new();
    for (dst, &src) in perm.iter().enumerate() {
        xp.data_mut()[dst * cfg.dim..(dst + 1) * cfg.dim]
            .copy_from_slice(&x.data()[src * cfg.dim..(src + 1) * cfg.dim]);
        angles.extend(grid.angles_at((src / grid.cols) as f64, (src % grid.cols) as f64));
    }
    let permuted = Arc::new(RotationTable::from_angles(n, grid.pairs(), &angles).unwrap());
    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let block = &m.blocks()[0];
    let vx = g.constant(x);
    let vxp = g.constant(xp);
    let out = m.attention(&mut g, &b, block, vx).unwrap();
    let outp = m.attention_with_table(&mut g, &b, block, vxp, permuted).unwrap();
    let (o, op) = (g.value(out).data(), g.value(outp).data());
    let d = cfg.dim;
    for (dst, &src) in perm.iter().enumerate() {
        for c in 0..d {
            assert!((op[dst * d + c] - o[src * d + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_gates_make_blocks_identity() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut m = DiT::<f64>::new(cfg.clone(), &mut rng).unwrap();
    perturb(&mut m, 1, 0.3);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let x = g.constant(random_tensor(&[cfg.tokens(), cfg.dim], 9, -1.0, 1.0));
    let shift = g.constant(random_tensor(&[1, cfg.dim], 10, -1.0, 1.0));
    let scale = g.constant(random_tensor(&[1, cfg.dim], 11, -1.0, 1.0));
    let zero = g.constant(Tensor::zeros(&[1, cfg.dim]));
    let out = m
        .block_forward(&mut g, &b, &m.blocks()[0], x, &[shift, scale, zero, shift, scale, zero])
        .unwrap();
    assert_eq!(g.value(out), g.value(x));
}

#[test]
fn condition_changes_signals() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut m = DiT::<f32>::new(cfg.clone(), &mut rng).unwrap();
    perturb(&mut m, 3, 0.05);
    m.expand_conditions(5, &mut rng).unwrap();
    let mut g = Graph::new();
    let b = m.bind(&mut g, false).unwrap();
    let sigs: Vec<Vec<f32>> = (0..15)
        .map(|y| {
            let s = m.condition_signals(&mut g, &b, 40, y).unwrap();
            g.value(s).data().to_vec()
        })
        .collect();
    for i in 0..15 {
        for j in i + 1..15 {
            assert_ne!(sigs[i], sigs[j], "{i} vs {j}");
        }
    }
    assert!(matches!(
        m.condition_signals(&mut g, &b, 40, 15),
        Err(Error::Index { .. })
    ));
    assert!(m.condition_signals(&mut g, &b, 101, 0).is_err());
}

#[test]
fn forward_shape_determinism_and_errors() {
    for cfg in [tiny(), small()] {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut m = DiT::<f32>::new(cfg.clone(), &mut rng).unwrap();
        perturb(&mut m, 4, 0.05);
        let x = image(&cfg, 1);
        let a = m.forward(&x, 7, 2).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert!(a.all_finite());
        assert_eq!(a, m.forward(&x, 7, 2).unwrap());
        assert!(m.forward(&x, 7, cfg.num_classes).is_err());
        assert!(m.forward(&Tensor::zeros(&[4, 4, 3]), 7, 0).is_err());
    }
}

/// Mean-squared ε loss of one sample, in token layout.
fn sample_loss(
    m: &DiT<f64>,
    g: &mut Graph<f64>,
    b: &ditune_core::model::Bound,
    x: &Tensor<f64>,
    t: usize,
    y: usize,
    target: &Tensor<f64>,
) -> ditune_core::Var {
    let c = m.config();
    let tok = g.constant(patchify(x, c.patch).unwrap());
    let out = m.forward_tokens(g, b, tok, t, y).unwrap();
    let tgt = g.constant(patchify(target, c.patch).unwrap());
    let r = g.sub(out, tgt).unwrap();
    let r2 = g.mul(r, r).unwrap();
    g.mean(r2).unwrap()
}

#[test]
fn gradient_reaches_only_the_used_embedding_row() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut m = DiT::<f64>::new(cfg.clone(), &mut rng).unwrap();
    perturb(&mut m, 5, 0.2);
    m.expand_conditions(5, &mut rng).unwrap();
    let x = image::<f64>(&cfg, 2);
    let target = image::<f64>(&cfg, 3);
    for y in [3usize, 12] {
        let mut g = Graph::new();
        let b = m.bind(&mut g, true).unwrap();
        let loss = sample_loss(&m, &mut g, &b, &x, 10, y, &target);
        g.backward(loss).unwrap();
        let emb = m.embeddings();
        let zeros = |n: usize| Tensor::zeros(&[n, cfg.dim]);
        let base = g.grad(b.var(emb.base)).cloned().unwrap_or_else(|| zeros(10));
        let exp = g
            .grad(b.var(emb.expanded.unwrap()))
            .cloned()
            .unwrap_or_else(|| zeros(5));
        let d = cfg.dim;
        for row in 0..15 {
            let grad = if row < 10 {
                &base.data()[row * d..(row + 1) * d]
            } else {
                &exp.data()[(row - 10) * d..(row - 9) * d]
            };
            let nonzero = grad.iter().any(|v| *v != 0.0);
            assert_eq!(nonzero, row == y, "row {row} for y={y}");
        }
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut m = DiT::<f64>::new(cfg.clone(), &mut rng).unwrap();
    perturb(&mut m, 6, 0.2);
    m.wrap_modulation(2, &mut rng).unwrap();
    // Move the adapters off identity so every factor carries signal.
    for p in m.params_mut().iter_mut() {
        if matches!(p.role, ParamRole::AdapterGamma | ParamRole::AdapterShift) {
            for v in p.value.data_mut() {
                *v += 0.1 * rng.random_range(-1.0..1.0);
            }
        }
    }
    let x = image::<f64>(&cfg, 4);
    let target = image::<f64>(&cfg, 5);
    let loss_at = |m: &DiT<f64>| {
        let mut g = Graph::new();
        let b = m.bind(&mut g, false).unwrap();
        let l = sample_loss(m, &mut g, &b, &x, 17, 4, &target);
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let b = m.bind(&mut g, true).unwrap();
    let l = sample_loss(&m, &mut g, &b, &x, 17, 4, &target);
    g.backward(l).unwrap();
    let ids: Vec<_> = (0..m.params().len()).collect();
    let mut worst = 0.0f64;
    for idx in ids {
        let id = m
            .params()
            .find(&m.params().iter().nth(idx).unwrap().name.clone())
            .unwrap();
        let grad = g.grad(b.var(id)).map(|t| t.data().to_vec());
        let n = m.params().get(id).value.len();
        for j in (0..n).step_by((n / 3).max(1)) {
            let h = 1e-5;
            let mut plus = m.clone();
            plus.params_mut().get_mut(id).value.data_mut()[j] += h;
            let mut minus = m.clone();
            minus.params_mut().get_mut(id).value.data_mut()[j] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let an = grad.as_ref().map_or(0.0, |gr| gr[j]);
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn layout_roundtrips_and_cast_preserves_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut m = DiT::<f32>::new(small(), &mut rng).unwrap();
    m.expand_conditions(5, &mut rng).unwrap();
    m.wrap_modulation(3, &mut rng).unwrap();
    let layout = m.layout();
    let parsed = ModelLayout::from_text(&layout.to_text()).unwrap();
    assert_eq!(parsed, layout);
    let mut rebuilt = DiT::<f32>::from_layout(&parsed).unwrap();
    let names: Vec<_> = m.params().iter().map(|p| p.name.clone()).collect();
    assert_eq!(
        names,
        rebuilt.params().iter().map(|p| p.name.clone()).collect::<Vec<_>>()
    );
    for p in m.params().iter() {
        rebuilt.set_param(&p.name, p.value.clone()).unwrap();
    }
    let x = image(&small(), 9);
    assert_eq!(m.forward(&x, 3, 12).unwrap(), rebuilt.forward(&x, 3, 12).unwrap());
    assert!(rebuilt.set_param("nope", Tensor::zeros(&[1])).is_err());
    assert!(rebuilt.set_param("final.linear.bias", Tensor::zeros(&[1])).is_err());
    assert!(ModelLayout::from_text("dim=banana").is_err());
    assert!(ModelLayout::from_text("colour=3").is_err());

    let wide: DiT<f64> = m.cast().unwrap();
    assert_eq!(wide.params().total_count(), m.params().total_count());
}
