use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_identity_and_scalar() {
    let mut g = Graph::<f64>::new();
    let eye = g
        .constant_f64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
        .unwrap();
    let x = g.constant_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let y = g.matmul(eye, x).unwrap();
    assert_eq!(g.values_f64(y), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

    let a = g.constant_f64(&[1, 1], &[2.0]).unwrap();
    let b = g.constant_f64(&[1, 1], &[3.0]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.values_f64(c), vec![6.0]);
}

#[test]
fn matmul_shape_mismatch_is_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant_f64(&[2, 3], &[0.0; 6]).unwrap();
    let b = g.constant_f64(&[2, 2], &[0.0; 4]).unwrap();
    assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn matmul_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new(7);
    store.insert("a", vec![4, 5], rand_vals(&mut rng, 20));
    store.insert("b", vec![5, 3], rand_vals(&mut rng, 15));
    let report = grad_check(&store, 1e-5, |s, g| {
        let a = g.param(s, "a")?;
        let b = g.param(s, "b")?;
        let c = g.matmul(a, b)?;
        let flat = g.reshape(c, &[12])?;
        // square the outputs so the gradient is input dependent
        let sq = g.mul(flat, flat)?;
        g.mean_elems(sq)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "max rel err {} at {}", report.max_rel_err, report.worst_param);
}

#[test]
fn softmax_symmetry_cases() {
    let mut g = Graph::<f64>::new();
    let a = g.constant_f64(&[2], &[0.0, 0.0]).unwrap();
    let s = g.softmax(a, 1.0).unwrap();
    assert_eq!(g.values_f64(s), vec![0.5, 0.5]);

    let b = g.constant_f64(&[4], &[3.3; 4]).unwrap();
    let s = g.softmax(b, 0.37).unwrap();
    for v in g.values_f64(s) {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_direct_formula() {
    let mut g = Graph::<f64>::new();
    let a = g.constant_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
    let s = g.softmax(a, 1.0).unwrap();
    // independent direct evaluation
    let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
    let z: f64 = exps.iter().sum();
    for (got, want) in g.values_f64(s).iter().zip(exps.iter().map(|e| e / z)) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn softmax_sum_and_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let vals = rand_vals(&mut rng, 9);
        let shift: f64 = rng.gen_range(-5.0..5.0);
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let mut g = Graph::<f64>::new();
        let a = g.constant_f64(&[9], &vals).unwrap();
        let b = g.constant_f64(&[9], &shifted).unwrap();
        let sa = g.softmax(a, 1.0).unwrap();
        let sb = g.softmax(b, 1.0).unwrap();
        let va = g.values_f64(sa);
        let vb = g.values_f64(sb);
        assert!((va.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn softmax_rejects_nonpositive_temperature() {
    let mut g = Graph::<f64>::new();
    let a = g.constant_f64(&[2], &[1.0, 2.0]).unwrap();
    assert!(g.softmax(a, 0.0).is_err());
    assert!(g.softmax(a, -1.0).is_err());
}

#[test]
fn cosine_identity_antipodal_orthogonal() {
    let mut g = Graph::<f64>::new();
    let a = g.constant_f64(&[3], &[0.3, -0.2, 0.9]).unwrap();
    let na = g.scale(a, -1.0).unwrap();
    let e1 = g.constant_f64(&[3], &[1.0, 0.0, 0.0]).unwrap();
    let e2 = g.constant_f64(&[3], &[0.0, 1.0, 0.0]).unwrap();
    let self_sim = g.cosine_sim(a, a).unwrap();
    let anti = g.cosine_sim(a, na).unwrap();
    let ortho = g.cosine_sim(e1, e2).unwrap();
    assert!((g.scalar(self_sim) - 1.0).abs() < 1e-12);
    assert!((g.scalar(anti) + 1.0).abs() < 1e-12);
    assert_eq!(g.scalar(ortho), 0.0);
}

#[test]
fn cosine_symmetric_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let av = rand_vals(&mut rng, 6);
        let bv = rand_vals(&mut rng, 6);
        let mut g = Graph::<f64>::new();
        let a = g.constant_f64(&[6], &av).unwrap();
        let b = g.constant_f64(&[6], &bv).unwrap();
        let sim_ab = g.cosine_sim(a, b).unwrap();
        let sim_ba = g.cosine_sim(b, a).unwrap();
        let ab = g.scalar(sim_ab);
        let ba = g.scalar(sim_ba);
        assert_eq!(ab, ba);
        assert!(ab.abs() <= 1.0 + 1e-12);
    }
}

#[test]
fn cosine_zero_norm_is_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant_f64(&[3], &[0.0, 0.0, 0.0]).unwrap();
    let b = g.constant_f64(&[3], &[1.0, 0.0, 0.0]).unwrap();
    assert!(g.cosine_sim(a, b).is_err());
}

#[test]
fn layer_norm_constant_input_and_identity() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant_f64(&[4], &[1.0; 4]).unwrap();
    let bias = g.constant_f64(&[4], &[0.0; 4]).unwrap();
    let x = g.constant_f64(&[4], &[2.5; 4]).unwrap();
    let y = g.layer_norm(x, gain, bias).unwrap();
    for v in g.values_f64(y) {
        assert!(v.abs() < 1e-6);
    }

    let gain2 = g.constant_f64(&[2], &[1.0; 2]).unwrap();
    let bias2 = g.constant_f64(&[2], &[0.0; 2]).unwrap();
    let x2 = g.constant_f64(&[2], &[1.0, -1.0]).unwrap();
    let y2 = g.layer_norm(x2, gain2, bias2).unwrap();
    let v = g.values_f64(y2);
    assert!((v[0] - 1.0).abs() < 1e-6 && (v[1] + 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_pre_affine_mean_zero_var_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vals = rand_vals(&mut rng, 8);
    let mut g = Graph::<f64>::new();
    let gain = g.constant_f64(&[8], &[1.0; 8]).unwrap();
    let bias = g.constant_f64(&[8], &[0.0; 8]).unwrap();
    let x = g.constant_f64(&[8], &vals).unwrap();
    let y = g.layer_norm(x, gain, bias).unwrap();
    let v = g.values_f64(y);
    let mean: f64 = v.iter().sum::<f64>() / 8.0;
    let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_rejects_short_input() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant_f64(&[1], &[1.0]).unwrap();
    let bias = g.constant_f64(&[1], &[0.0]).unwrap();
    let x = g.constant_f64(&[1], &[1.0]).unwrap();
    assert!(g.layer_norm(x, gain, bias).is_err());
}

#[test]
fn layer_norm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new(13);
    store.insert("x", vec![8], rand_vals(&mut rng, 8));
    store.insert("gain", vec![8], rand_vals(&mut rng, 8));
    store.insert("bias", vec![8], rand_vals(&mut rng, 8));
    let report = grad_check(&store, 1e-5, |s, g| {
        let x = g.param(s, "x")?;
        let gain = g.param(s, "gain")?;
        let bias = g.param(s, "bias")?;
        let y = g.layer_norm(x, gain, bias)?;
        let sq = g.mul(y, y)?;
        g.mean_elems(sq)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn cross_entropy_uniform_and_margin() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant_f64(&[4], &[0.7; 4]).unwrap();
    let loss = g.cross_entropy(logits, 2).unwrap();
    assert!((g.scalar(loss) - 4.0f64.ln()).abs() < 1e-12);

    let margin = g.constant_f64(&[4], &[0.0, 10.0, 0.0, 0.0]).unwrap();
    let loss = g.cross_entropy(margin, 1).unwrap();
    assert!(g.scalar(loss) < 1e-3);
    assert!(g.scalar(loss) >= 0.0);
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant_f64(&[4], &[0.0; 4]).unwrap();
    assert!(g.cross_entropy(logits, 4).is_err());
}

#[test]
fn cross_entropy_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new(17);
    store.insert("logits", vec![6], rand_vals(&mut rng, 6));
    let report = grad_check(&store, 1e-5, |s, g| {
        let l = g.param(s, "logits")?;
        g.cross_entropy(l, 3)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn grad_check_linear_is_exact() {
    let mut store = ParamStore::new(0);
    store.insert("w", vec![4], vec![0.3, -0.7, 1.2, 0.05]);
    let report = grad_check(&store, 1e-5, |s, g| {
        let w = g.param(s, "w")?;
        let c = g.constant_f64(&[4], &[2.0, -1.0, 0.5, 3.0])?;
        let p = g.mul(w, c)?;
        g.mean_elems(p)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-8, "{report:?}");
}

#[test]
fn composite_ops_gradcheck_many_seeds() {
    // relu/sigmoid/softmax/normalize/concat/slice/smooth_l1 chained together
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(seed);
        store.insert("w", vec![5, 4], rand_vals(&mut rng, 20));
        store.insert("v", vec![4], rand_vals(&mut rng, 4));
        let report = grad_check(&store, 1e-5, |s, g| {
            let w = g.param(s, "w")?;
            let v = g.param(s, "v")?;
            let h = g.matvec(w, v)?;
            let r = g.relu(h)?;
            let sg = g.sigmoid(r)?;
            let sm = g.softmax(sg, 0.5)?;
            let nv = g.normalize_rows(v)?;
            let part = g.slice_vec(sm, 1, 3)?;
            let cat = g.concat_vec(&[part, nv])?;
            let l1 = g.smooth_l1(cat, &[0.1, 0.2, 0.3, 0.0, -0.1, 0.4, 0.2], 0.1)?;
            let cos = g.cosine_sim(nv, v)?;
            let both = g.stack_scalars(&[l1, cos])?;
            g.mean_elems(both)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn im2col_gradcheck_and_shapes() {
    let spec = ConvSpec { h: 4, w: 4, c: 2, k: 3, stride: 2, pad: 1 };
    assert_eq!(spec.out_h(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::new(23);
    store.insert("x", vec![16, 2], rand_vals(&mut rng, 32));
    store.insert("w", vec![18, 3], rand_vals(&mut rng, 54));
    let report = grad_check(&store, 1e-5, |s, g| {
        let x = g.param(s, "x")?;
        let w = g.param(s, "w")?;
        let cols = g.im2col(x, spec)?;
        let y = g.matmul(cols, w)?;
        let sq = g.mul(y, y)?;
        g.mean_elems(sq)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let vals = rand_vals(&mut rng, 12);
        let mut g = Graph::<f64>::new();
        let a = g.constant_f64(&[3, 4], &vals).unwrap();
        let b = g.constant_f64(&[4, 3], &vals).unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 0.7).unwrap();
        g.values_f64(s)
    };
    let x = run();
    let y = run();
    assert_eq!(x, y, "bit-identical outputs for identical inputs");
}

#[test]
fn nonfinite_is_error_not_silent() {
    let mut g = Graph::<f64>::new();
    let a = g.constant_f64(&[2], &[1e308, 1e308]).unwrap();
    let doubled = g.add(a, a);
    assert!(matches!(doubled, Err(TensorError::NonFinite { .. })));
    assert!(g.constant_f64(&[1], &[f64::NAN]).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new(42);
    store.init_uniform("layer.weight", &[3, 5], 5);
    store.init_uniform("layer.bias", &[5], 5);
    store.init_ones("norm.gain", &[5]);
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    store.save(&p1).unwrap();
    let loaded = ParamStore::load(&p1, 42).unwrap();
    loaded.save(&p2).unwrap();
    let b1 = std::fs::read(&p1).unwrap();
    let b2 = std::fs::read(&p2).unwrap();
    assert_eq!(b1, b2);
    assert_eq!(&b1[..8], CHECKPOINT_MAGIC);
}

#[test]
fn checkpoint_rejects_bad_magic_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ckpt");
    std::fs::write(&p, b"NOTMAGIC").unwrap();
    assert!(ParamStore::load(&p, 0).is_err());

    let mut store = ParamStore::new(0);
    store.init_uniform("w", &[4, 4], 4);
    let good = dir.path().join("good.ckpt");
    store.save(&good).unwrap();
    let bytes = std::fs::read(&good).unwrap();
    let trunc = dir.path().join("trunc.ckpt");
    std::fs::write(&trunc, &bytes[..bytes.len() - 5]).unwrap();
    assert!(ParamStore::load(&trunc, 0).is_err());
}

#[test]
fn param_iteration_is_lexicographic() {
    let mut store = ParamStore::new(1);
    store.init_zeros("zeta", &[1]);
    store.init_zeros("alpha", &[1]);
    store.init_zeros("mid", &[1]);
    assert_eq!(store.names(), vec!["alpha", "mid", "zeta"]);
}

#[test]
fn init_is_order_independent() {
    let mut s1 = ParamStore::new(5);
    s1.init_uniform("a", &[4], 4);
    s1.init_uniform("b", &[4], 4);
    let mut s2 = ParamStore::new(5);
    s2.init_uniform("b", &[4], 4);
    s2.init_uniform("a", &[4], 4);
    assert_eq!(s1.get("a").unwrap().values, s2.get("a").unwrap().values);
    assert_eq!(s1.get("b").unwrap().values, s2.get("b").unwrap().values);
}
