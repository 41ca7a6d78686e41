use super::*;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::BoundingBox;
use crate::scene::{
    generate_scene, render_with_boxes, Background, Color, GenConfig, Image, ObjSize, ObjectSpec,
    SceneSpec, Shape, TOKEN_VOCAB,
};
use crate::tensor::{grad_check, Graph, ParamStore};

fn tiny_setup() -> (ParamStore, ModelConfig) {
    let cfg = ModelConfig::tiny();
    cfg.validate().unwrap();
    let mut store = ParamStore::new(7);
    init_params(&mut store, &cfg);
    (store, cfg)
}

fn tiny_scene(seed: u64) -> Image {
    let config = GenConfig { image_side: 32, ..Default::default() };
    generate_scene(seed, &config).unwrap().1
}

fn toks(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn map_from(grid: usize, entries: &[(usize, usize, f64)], base: f64) -> AttentionMap {
    let mut w = vec![base; grid * grid];
    for &(r, c, v) in entries {
        w[r * grid + c] = v;
    }
    let sum: f64 = w.iter().sum();
    AttentionMap::new(grid, w.iter().map(|x| x / sum).collect()).unwrap()
}

// ---- proposal extraction ----

#[test]
fn proposals_delta_map_single_patch() {
    let map = map_from(8, &[(2, 3, 1.0)], 0.0);
    let ps = extract_proposals(&map, 1, 0.25).unwrap();
    assert_eq!(ps.len(), 1);
    assert_eq!(ps[0].peak, (2, 3));
    assert!((ps[0].score - 1.0).abs() < 1e-12);
    let b = &ps[0].bbox;
    assert_eq!((b.x0, b.y0, b.x1, b.y1), (3.0 / 8.0, 2.0 / 8.0, 4.0 / 8.0, 3.0 / 8.0));
}

#[test]
fn proposals_uniform_map_row_major_tie_break() {
    let map = map_from(8, &[], 1.0);
    let ps = extract_proposals(&map, 1, 0.0).unwrap();
    assert_eq!(ps.len(), 1);
    assert_eq!(ps[0].peak, (0, 0));
    assert!((ps[0].score - 1.0).abs() < 1e-12);
}

#[test]
fn proposals_two_equal_spikes_row_major_order() {
    let map = map_from(8, &[(0, 0, 1.0), (5, 5, 1.0)], 0.01);
    let ps = extract_proposals(&map, 2, 0.25).unwrap();
    assert_eq!(ps.len(), 2);
    assert_eq!(ps[0].peak, (0, 0));
    assert_eq!(ps[1].peak, (5, 5));

    // Brute-force oracle: enumerate grid cells that dominate their
    // 4-neighborhood and clear the floor.
    let mut maxima = Vec::new();
    for r in 0..8usize {
        for c in 0..8usize {
            let w = map.at(r, c);
            let mut peak = w > 0.25 * map.max();
            if r > 0 {
                peak &= w >= map.at(r - 1, c);
            }
            if r < 7 {
                peak &= w >= map.at(r + 1, c);
            }
            if c > 0 {
                peak &= w >= map.at(r, c - 1);
            }
            if c < 7 {
                peak &= w >= map.at(r, c + 1);
            }
            if peak {
                maxima.push((r, c));
            }
        }
    }
    assert_eq!(maxima, vec![(0, 0), (5, 5)]);
}

#[test]
fn proposals_well_formed_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let raw: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0f64).exp()).collect();
        let sum: f64 = raw.iter().sum();
        let map = AttentionMap::new(8, raw.iter().map(|x| x / sum).collect()).unwrap();
        let ps = extract_proposals(&map, 4, 0.25).unwrap();
        assert!(ps.len() <= 4);
        for w in ps.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for p in &ps {
            let b = &p.bbox;
            assert!(b.well_ordered() && b.in_unit_square());
            assert!(b.area() >= 1.0 / 64.0 - 1e-12);
            assert!(p.score > 0.25 && p.score <= 1.0);
            // every returned peak dominates its neighborhood
            let (r, c) = p.peak;
            let w = map.at(r, c);
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if (0..8).contains(&nr) && (0..8).contains(&nc) {
                    assert!(w >= map.at(nr as usize, nc as usize));
                }
            }
        }
    }
}

#[test]
fn proposals_transpose_covariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let raw: Vec<f64> = (0..36).map(|_| rng.gen_range(0.1..1.0f64)).collect();
        let sum: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / sum).collect();
        let mut wt = vec![0.0; 36];
        for r in 0..6 {
            for c in 0..6 {
                wt[c * 6 + r] = w[r * 6 + c];
            }
        }
        let a = extract_proposals(&AttentionMap::new(6, w).unwrap(), 4, 0.25).unwrap();
        let b = extract_proposals(&AttentionMap::new(6, wt).unwrap(), 4, 0.25).unwrap();
        assert_eq!(a.len(), b.len());
        // With distinct weights ordering is by weight, identical on both
        // sides; boxes and peaks transpose.
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.peak, (pb.peak.1, pb.peak.0));
            assert_eq!(
                (pa.bbox.x0, pa.bbox.y0, pa.bbox.x1, pa.bbox.y1),
                (pb.bbox.y0, pb.bbox.x0, pb.bbox.y1, pb.bbox.x1)
            );
        }
    }
}

#[test]
fn proposals_reject_bad_args() {
    let map = map_from(4, &[], 1.0);
    assert!(extract_proposals(&map, 0, 0.25).is_err());
    assert!(extract_proposals(&map, 4, 1.0).is_err());
    assert!(extract_proposals(&map, 4, -0.1).is_err());
}

// ---- crop ----

#[test]
fn crop_rect_arithmetic() {
    let r = crop_rect(0.25, 0.25, 0.75, 0.75, 64);
    assert_eq!(r, PixelRect { x0: 16, y0: 16, x1: 48, y1: 48 });
}

#[test]
fn crop_rect_clamps_out_of_range() {
    let r = crop_rect(-0.1, 0.0, 0.5, 0.5, 64);
    assert_eq!(r, PixelRect { x0: 0, y0: 0, x1: 32, y1: 32 });
}

#[test]
fn crop_rect_expands_to_min_size() {
    let r = crop_rect(0.5, 0.5, 0.51, 0.505, 64);
    assert!(r.x1 - r.x0 >= 4 && r.y1 - r.y0 >= 4);
    let r = crop_rect(0.99, 0.99, 1.0, 1.0, 64);
    assert!(r.x1 - r.x0 >= 4 && r.y1 - r.y0 >= 4);
    assert!(r.x1 <= 64 && r.y1 <= 64);
}

fn proposal_for(bbox: BoundingBox) -> RegionProposal {
    RegionProposal { bbox, score: 1.0, peak: (0, 0) }
}

#[test]
fn crop_solid_color_is_uniform() {
    let img = Image { side: 32, pixels: vec![0.5; 32 * 32 * 3] };
    let p = proposal_for(BoundingBox { x0: 0.1, y0: 0.2, x1: 0.6, y1: 0.9 });
    let patch = crop_region(&img, &p, 16);
    assert_eq!(patch.res, 16);
    assert!(patch.pixels.iter().all(|&v| (v - 0.5).abs() < 1e-12));
}

#[test]
fn crop_of_object_box_has_object_modal_color() {
    let spec = SceneSpec {
        objects: vec![ObjectSpec {
            shape: Shape::Square,
            color: Color::Red,
            size: ObjSize::Large,
            frac: 0.4,
            center: (0.5, 0.5),
        }],
        background: Background::Black,
        seed: 0,
    };
    let (img, boxes) = render_with_boxes(&spec, 64);
    let patch = crop_region(&img, &proposal_for(boxes[0].unwrap()), 32);
    let mut counts = std::collections::HashMap::new();
    for px in patch.pixels.chunks(3) {
        let key = (
            (px[0] * 255.0).round() as u8,
            (px[1] * 255.0).round() as u8,
            (px[2] * 255.0).round() as u8,
        );
        *counts.entry(key).or_insert(0usize) += 1;
    }
    let modal = counts.iter().max_by_key(|(_, &n)| n).unwrap().0;
    let rgb = Color::Red.rgb();
    assert_eq!(*modal, (rgb[0], rgb[1], rgb[2]));
}

#[test]
fn crop_pixels_stay_in_unit_range() {
    let img = tiny_scene(5);
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
        let bbox = BoundingBox { x0: a, y0: b, x1: a + 0.2, y1: b + 0.2 };
        let patch = crop_region(&img, &proposal_for(bbox), 32);
        assert!(patch.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

// ---- encoders ----

#[test]
fn encode_text_unit_norm_and_deterministic() {
    let (store, cfg) = tiny_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut first: Option<Vec<f64>> = None;
    for i in 0..100 {
        let len = rng.gen_range(1..=9);
        let tokens: Vec<String> =
            (0..len).map(|_| TOKEN_VOCAB[rng.gen_range(0..TOKEN_VOCAB.len())].to_string()).collect();
        let mut g = Graph::<f64>::new();
        let p = BoundParams::bind(&mut g, &store).unwrap();
        let e = encode_text(&mut g, &p, &cfg, &tokens).unwrap();
        let v = g.values_f64(e);
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        if i == 0 {
            first = Some(v);
        }
    }
    // determinism: re-encode the same query
    let tokens = toks(&["what", "color", "is", "the", "circle"]);
    let run = |tokens: &[String]| {
        let mut g = Graph::<f64>::new();
        let p = BoundParams::bind(&mut g, &store).unwrap();
        let e = encode_text(&mut g, &p, &cfg, tokens).unwrap();
        g.values_f64(e)
    };
    assert_eq!(run(&tokens), run(&tokens));
    assert!(first.is_some());
}

#[test]
fn encode_text_rejects_bad_queries() {
    let (store, cfg) = tiny_setup();
    let mut g = Graph::<f64>::new();
    let p = BoundParams::bind(&mut g, &store).unwrap();
    assert!(encode_text(&mut g, &p, &cfg, &[]).is_err());
    assert!(encode_text(&mut g, &p, &cfg, &toks(&["zebra"])).is_err());
    let long: Vec<String> = vec!["the".to_string(); 13];
    assert!(encode_text(&mut g, &p, &cfg, &long).is_err());
}

#[test]
fn encode_image_deterministic() {
    let (store, cfg) = tiny_setup();
    let img = tiny_scene(1);
    let run = || {
        let mut g = Graph::<f64>::new();
        let p = BoundParams::bind(&mut g, &store).unwrap();
        let f = encode_image_global(&mut g, &p, &cfg, &img).unwrap();
        g.values_f64(f)
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.len(), cfg.num_patches() * cfg.dim);
    let mut g = Graph::<f64>::new();
    let p = BoundParams::bind(&mut g, &store).unwrap();
    let wrong = Image { side: 16, pixels: vec![0.0; 16 * 16 * 3] };
    assert!(encode_image_global(&mut g, &p, &cfg, &wrong).is_err());
}

#[test]
fn cross_attend_uniform_for_identical_patches() {
    let (store, cfg) = tiny_setup();
    let d = cfg.dim;
    let n = cfg.num_patches();
    let mut g = Graph::<f64>::new();
    let p = BoundParams::bind(&mut g, &store).unwrap();
    let mut row = vec![0.0; d];
    row[0] = 1.0;
    row[1] = -0.5;
    let feats: Vec<f64> = (0..n).flat_map(|_| row.clone()).collect();
    let feats = g.constant(&[n, d], feats).unwrap();
    let mut q = vec![0.0; d];
    q[0] = 1.0;
    let q = g.constant(&[d], q).unwrap();
    let out = cross_attend(&mut g, &p, &cfg, feats, q).unwrap();
    let map = g.values_f64(out.map);
    let sum: f64 = map.iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
    for w in &map {
        assert!((w - 1.0 / n as f64).abs() < 1e-9);
    }
}

#[test]
fn cross_attend_spike_wins_argmax() {
    let (store, cfg) = tiny_setup();
    let d = cfg.dim;
    let n = cfg.num_patches();
    let grid = cfg.grid();
    let mut g = Graph::<f64>::new();
    let p = BoundParams::bind(&mut g, &store).unwrap();
    let target = 2 * grid + 3;
    let mut feats = vec![0.01; n * d];
    feats[target * d] = 5.0;
    let feats = g.constant(&[n, d], feats).unwrap();
    let mut q = vec![0.0; d];
    q[0] = 1.0;
    let q = g.constant(&[d], q).unwrap();
    let out = cross_attend(&mut g, &p, &cfg, feats, q).unwrap();
    let map = g.values_f64(out.map);
    assert_eq!(argmax(&map), target);
    let emb = g.values_f64(out.embedding);
    let norm: f64 = emb.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
}

#[test]
fn encode_local_unit_norm_and_deterministic() {
    let (store, cfg) = tiny_setup();
    let img = tiny_scene(9);
    let bbox = BoundingBox { x0: 0.25, y0: 0.25, x1: 0.75, y1: 0.75 };
    let patch = crop_region(&img, &proposal_for(bbox), cfg.local_res);
    let run = || {
        let mut g = Graph::<f64>::new();
        let p = BoundParams::bind(&mut g, &store).unwrap();
        let f = encode_local(&mut g, &p, &cfg, &patch).unwrap();
        g.values_f64(f)
    };
    let v = run();
    assert_eq!(v, run());
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
}

// ---- consistency losses ----

fn unit_vec(d: usize, axis: usize, sign: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[axis] = sign;
    v
}

#[test]
fn consistency_loss_two_pair_analytic() {
    // scores: diag = 1, off-diag = -1, tau = 1
    let mut g = Graph::<f64>::new();
    let f0 = g.constant(&[4], unit_vec(4, 0, 1.0)).unwrap();
    let f1 = g.constant(&[4], unit_vec(4, 0, -1.0)).unwrap();
    let loss = consistency_loss(&mut g, &[f0, f1], &[f0, f1], 1.0).unwrap();
    let expected = (1.0 + (-2.0f64).exp()).ln();
    assert!((g.scalar(loss) - expected).abs() < 1e-12);
    assert!((expected - 0.12693).abs() < 1e-5);
}

#[test]
fn consistency_loss_uniform_scores_is_ln_n() {
    let mut g = Graph::<f64>::new();
    let e = g.constant(&[4], unit_vec(4, 0, 1.0)).unwrap();
    let loss = consistency_loss(&mut g, &[e, e, e], &[e, e, e], 0.07).unwrap();
    assert!((g.scalar(loss) - 3.0f64.ln()).abs() < 1e-12);
}

#[test]
fn consistency_loss_rejects_bad_args() {
    let mut g = Graph::<f64>::new();
    let e = g.constant(&[4], unit_vec(4, 0, 1.0)).unwrap();
    assert!(consistency_loss(&mut g, &[e], &[e], 0.07).is_err());
    assert!(consistency_loss(&mut g, &[e, e], &[e], 0.07).is_err());
    assert!(consistency_loss(&mut g, &[e, e], &[e, e], 0.0).is_err());
    assert!(consistency_loss(&mut g, &[e, e], &[e, e], -1.0).is_err());
}

#[test]
fn infonce_decreases_when_diagonal_grows() {
    // Hold every other entry fixed and raise one diagonal score.
    let eval = |diag: f64| {
        let mut g = Graph::<f64>::new();
        let mut ids = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                let v = if i == j {
                    if i == 0 {
                        diag
                    } else {
                        0.6
                    }
                } else {
                    0.1
                };
                ids.push(g.constant(&[1], vec![v]).unwrap());
            }
        }
        let loss = infonce_from_scores(&mut g, &ids, 3, 0.5).unwrap();
        g.scalar(loss)
    };
    assert!(eval(0.7) < eval(0.6));
    assert!(eval(0.9) < eval(0.7));
}

#[test]
fn infonce_gradcheck() {
    let mut store = ParamStore::new(13);
    for i in 0..3 {
        store.init_uniform(&format!("f{i}"), &[5], 1);
        store.init_uniform(&format!("q{i}"), &[5], 1);
    }
    let report = grad_check(&store, 1e-5, |s, g| {
        let mut fs = Vec::new();
        let mut qs = Vec::new();
        for i in 0..3 {
            let f = g.param(s, &format!("f{i}"))?;
            fs.push(g.normalize_rows(f)?);
            let q = g.param(s, &format!("q{i}"))?;
            qs.push(g.normalize_rows(q)?);
        }
        consistency_loss(g, &fs, &qs, 0.07)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn triplet_loss_examples() {
    let mut g = Graph::<f64>::new();
    let anchor = g.constant(&[4], unit_vec(4, 0, 1.0)).unwrap();
    let opposite = g.constant(&[4], unit_vec(4, 0, -1.0)).unwrap();

    // satisfied margin: S+ = 1, S- = -1, margin 0.5 -> 0
    let l = triplet_consistency_loss(&mut g, anchor, anchor, opposite, 0.5).unwrap();
    assert_eq!(g.scalar(l), 0.0);

    // equal similarities -> loss = margin
    let l = triplet_consistency_loss(&mut g, anchor, opposite, opposite, 0.2).unwrap();
    assert!((g.scalar(l) - 0.2).abs() < 1e-12);

    assert!(triplet_consistency_loss(&mut g, anchor, anchor, opposite, 0.0).is_err());
}

#[test]
fn triplet_loss_flat_in_satisfied_region() {
    let mut g = Graph::<f64>::new();
    let anchor = g.constant(&[4], unit_vec(4, 0, 1.0)).unwrap();
    let pos = g.leaf(&[4], unit_vec(4, 0, 1.0)).unwrap();
    let neg = g.leaf(&[4], unit_vec(4, 1, 1.0)).unwrap();
    let l = triplet_consistency_loss(&mut g, anchor, pos, neg, 0.5).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let grads = g.backward(l).unwrap();
    for id in [pos, neg] {
        if let Some(gr) = grads.get(id) {
            assert!(gr.iter().all(|&x| x == 0.0));
        }
    }
}

// ---- fusion and heads ----

#[test]
fn fuse_equal_scores_matches_uniform() {
    let (store, cfg) = tiny_setup();
    let d = cfg.dim;
    let mut g = Graph::<f64>::new();
    let p = BoundParams::bind(&mut g, &store).unwrap();
    let emb = g.constant(&[d], unit_vec(d, 0, 1.0)).unwrap();
    let f0 = g.constant(&[d], unit_vec(d, 1, 1.0)).unwrap();
    let f1 = g.constant(&[d], unit_vec(d, 2, 1.0)).unwrap();
    let s = g.constant(&[1], vec![0.4]).unwrap();
    let soft = adaptive_fuse(&mut g, &p, &cfg, emb, &[f0, f1], &[s, s], false).unwrap();
    let unif = adaptive_fuse(&mut g, &p, &cfg, emb, &[f0, f1], &[s, s], true).unwrap();
    assert_eq!(g.values_f64(soft), g.values_f64(unif));
}

#[test]
fn fuse_single_proposal_ignores_score() {
    let (store, cfg) = tiny_setup();
    let d = cfg.dim;
    let mut g = Graph::<f64>::new();
    let p = BoundParams::bind(&mut g, &store).unwrap();
    let emb = g.constant(&[d], unit_vec(d, 0, 1.0)).unwrap();
    let f0 = g.constant(&[d], unit_vec(d, 1, 1.0)).unwrap();
    let lo = g.constant(&[1], vec![-0.9]).unwrap();
    let hi = g.constant(&[1], vec![0.9]).unwrap();
    let a = adaptive_fuse(&mut g, &p, &cfg, emb, &[f0], &[lo], false).unwrap();
    let b = adaptive_fuse(&mut g, &p, &cfg, emb, &[f0], &[hi], false).unwrap();
    assert_eq!(g.values_f64(a), g.values_f64(b));
}

#[test]
fn fusion_weights_concentrate_and_stay_normalized() {
    // S = (10, -10), tau = 1: essentially all weight on the first feature.
    let mut g = Graph::<f64>::new();
    let s0 = g.constant(&[1], vec![10.0]).unwrap();
    let s1 = g.constant(&[1], vec![-10.0]).unwrap();
    let s = g.stack_scalars(&[s0, s1]).unwrap();
    let w = g.softmax(s, 1.0).unwrap();
    let wv = g.values_f64(w);
    assert!(wv[0] >= 1.0 - 1e-8);
    assert!((wv.iter().sum::<f64>() - 1.0).abs() < 1e-6);

    // Monotonicity: raising one score raises its weight.
    let mut g = Graph::<f64>::new();
    let mk = |g: &mut Graph<f64>, v: f64| g.constant(&[1], vec![v]).unwrap();
    let base = [mk(&mut g, 0.3), mk(&mut g, 0.1), mk(&mut g, -0.2)];
    let s = g.stack_scalars(&base).unwrap();
    let soft = g.softmax(s, 0.25).unwrap();
    let before = g.values_f64(soft)[1];
    let bumped = [mk(&mut g, 0.3), mk(&mut g, 0.4), mk(&mut g, -0.2)];
    let s2 = g.stack_scalars(&bumped).unwrap();
    let soft2 = g.softmax(s2, 0.25).unwrap();
    let after = g.values_f64(soft2)[1];
    assert!(after > before);
}

#[test]
fn fuse_rejects_length_mismatch() {
    let (store, cfg) = tiny_setup();
    let d = cfg.dim;
    let mut g = Graph::<f64>::new();
    let p = BoundParams::bind(&mut g, &store).unwrap();
    let emb = g.constant(&[d], unit_vec(d, 0, 1.0)).unwrap();
    let f0 = g.constant(&[d], unit_vec(d, 1, 1.0)).unwrap();
    let s = g.constant(&[1], vec![0.4]).unwrap();
    assert!(adaptive_fuse(&mut g, &p, &cfg, emb, &[f0], &[s, s], false).is_err());
}

#[test]
fn bbox_head_zero_preactivation_is_centered() {
    let mut g = Graph::<f64>::new();
    let pre = g.constant(&[4], vec![0.0; 4]).unwrap();
    let b = bbox_from_pre(&mut g, pre).unwrap();
    let v = g.values_f64(b);
    for (got, want) in v.iter().zip([0.25, 0.25, 0.75, 0.75]) {
        assert!((got - want).abs() < 1e-12, "{v:?}");
    }
}

#[test]
fn bbox_head_corners_always_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let pre: Vec<f64> = (0..4).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let mut g = Graph::<f64>::new();
        let pre = g.constant(&[4], pre).unwrap();
        let b = bbox_from_pre(&mut g, pre).unwrap();
        let v = g.values_f64(b);
        let bb = BoundingBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] };
        assert!(bb.well_ordered() && bb.in_unit_square(), "{v:?}");
    }
}

#[test]
fn answer_head_zero_input_zero_bias_uniform() {
    let (mut store, cfg) = tiny_setup();
    store.init_zeros("fuse.ans.b", &[crate::scene::ANSWER_VOCAB.len()]);
    let mut g = Graph::<f64>::new();
    let p = BoundParams::bind(&mut g, &store).unwrap();
    let zero = g.constant(&[cfg.dim], vec![0.0; cfg.dim]).unwrap();
    let logits = answer_head(&mut g, &p, zero).unwrap();
    let v = g.values_f64(logits);
    assert!(v.iter().all(|&x| x == v[0]));
}

#[test]
fn abstention_rule() {
    let bbox = BoundingBox { x0: 0.1, y0: 0.1, x1: 0.5, y1: 0.5 };
    let out = FusedOutput::new(vec![0.0, 2.0, 1.0], bbox, vec![]);
    let a = apply_abstention(out.clone(), 0.1).unwrap();
    assert!(a.abstained);
    assert_eq!(a.answer_label, crate::scene::NOT_PRESENT_LABEL);
    // idempotent
    let b = apply_abstention(a.clone(), 0.1).unwrap();
    assert_eq!(a, b);

    let confident = FusedOutput::new(vec![0.0, 2.0, 1.0], bbox, vec![0.9, -0.3]);
    let c = apply_abstention(confident.clone(), 0.1).unwrap();
    assert!(!c.abstained);
    assert_eq!(c.answer_label, 1);

    let low = FusedOutput::new(vec![0.0, 2.0, 1.0], bbox, vec![0.05]);
    assert!(apply_abstention(low, 0.1).unwrap().abstained);

    assert!(apply_abstention(confident, 1.0).is_err());
}

// ---- full pipeline ----

#[test]
fn forward_invariants_all_variants() {
    let (store, cfg) = tiny_setup();
    let tokens = toks(&["what", "color", "is", "the", "circle"]);
    for seed in [1u64, 2, 3] {
        let img = tiny_scene(seed);
        for variant in ALL_VARIANTS {
            let mut g = Graph::<f64>::new();
            let p = BoundParams::bind(&mut g, &store).unwrap();
            let fwd = forward_sample(&mut g, &p, &cfg, variant, &img, &tokens).unwrap();
            let sum: f64 = fwd.attention.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(fwd.attention.weights.iter().all(|&w| w >= 0.0));
            for id in [fwd.query_emb, fwd.global.embedding] {
                let v = g.values_f64(id);
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-6);
            }
            for &f in &fwd.local_features {
                let v = g.values_f64(f);
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-6);
            }
            for &s in &fwd.scores {
                assert!(s.abs() <= 1.0 + 1e-12);
            }
            if variant.uses_local_stage() {
                assert!(fwd.proposals.len() <= cfg.max_proposals);
                assert_eq!(fwd.proposals.len(), fwd.local_features.len());
            } else {
                assert!(fwd.proposals.is_empty());
            }
            let out = fwd.fused_output(&g);
            assert!(out.bbox.well_ordered() && out.bbox.in_unit_square());
            assert_eq!(out.answer_logits.len(), crate::scene::ANSWER_VOCAB.len());
        }
    }
}

#[test]
fn no_scv_forward_matches_full_path_with_scv_disabled() {
    let (store, cfg) = tiny_setup();
    let tokens = toks(&["the", "red", "square"]);
    for seed in [4u64, 5] {
        let img = tiny_scene(seed);
        let mut ga = Graph::<f64>::new();
        let pa = BoundParams::bind(&mut ga, &store).unwrap();
        let a = forward_sample(&mut ga, &pa, &cfg, Variant::NoScv, &img, &tokens).unwrap();
        let mut gb = Graph::<f64>::new();
        let pb = BoundParams::bind(&mut gb, &store).unwrap();
        let b = forward_hierarchical(&mut gb, &pb, &cfg, &img, &tokens, true, true).unwrap();
        assert_eq!(ga.values_f64(a.final_logits), gb.values_f64(b.final_logits));
        assert_eq!(ga.values_f64(a.final_box), gb.values_f64(b.final_box));
    }
}

#[test]
fn init_params_deterministic_across_stores() {
    let (store_a, cfg) = tiny_setup();
    let mut store_b = ParamStore::new(7);
    init_params(&mut store_b, &cfg);
    let img = tiny_scene(6);
    let tokens = toks(&["is", "a", "blue", "circle", "present"]);
    let run = |store: &ParamStore| {
        let mut g = Graph::<f64>::new();
        let p = BoundParams::bind(&mut g, store).unwrap();
        let fwd = forward_sample(&mut g, &p, &cfg, Variant::Full, &img, &tokens).unwrap();
        g.values_f64(fwd.final_logits)
    };
    assert_eq!(run(&store_a), run(&store_b));
}

#[test]
fn local_encoder_gradcheck() {
    let (store, cfg) = tiny_setup();
    let img = tiny_scene(8);
    let bbox = BoundingBox { x0: 0.2, y0: 0.2, x1: 0.7, y1: 0.7 };
    let patch = crop_region(&img, &proposal_for(bbox), cfg.local_res);
    let target: Vec<f64> = (0..cfg.dim).map(|i| (i as f64 * 0.37).sin() * 0.5).collect();
    let tracked = [
        "local.conv0.w",
        "local.conv0.b",
        "local.conv1.w",
        "local.conv2.w",
        "local.proj.w",
        "local.proj.b",
    ];
    let report = grad_check(&store, 1e-5, |s, g| {
        let p = BoundParams::bind_tracked(g, s, &tracked)?;
        let f = encode_local(g, &p, &cfg, &patch)?;
        g.smooth_l1(f, &target, 0.1)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn full_pipeline_gradcheck() {
    let (store, cfg) = tiny_setup();
    let img = tiny_scene(12);
    let tokens = toks(&["what", "shape", "is", "the", "red", "object"]);
    let tracked = [
        "vis.block0.attn.wq",
        "vis.ln_out.g",
        "vis.patch_embed.b",
        "text.pos_emb",
        "text.block0.mlp.w1",
        "local.conv0.w",
        "local.proj.b",
        "global.ans.b",
        "fuse.w2",
        "fuse.ans.b",
        "fuse.box.b",
    ];
    let target = [0.2, 0.3, 0.6, 0.7];
    let report = grad_check(&store, 1e-5, |s, g| {
        let p = BoundParams::bind_tracked(g, s, &tracked)?;
        let fwd = forward_sample(g, &p, &cfg, Variant::Full, &img, &tokens)?;
        let ce = g.cross_entropy(fwd.final_logits, 2)?;
        let box_loss = g.smooth_l1(fwd.final_box, &target, 0.1)?;
        let aux = g.cross_entropy(fwd.global.answer_logits, 2)?;
        let a = g.add(ce, box_loss)?;
        g.add(a, aux)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}
