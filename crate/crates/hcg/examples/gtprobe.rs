use hcg::geom::BoundingBox;
use hcg::model::{
    consistency_score, crop_region, encode_local, encode_text, BoundParams, ModelConfig,
    RegionProposal,
};
use hcg::scene::dataset_read;
use hcg::tensor::{Graph, ParamStore};
use std::path::Path;

fn pct(v: &mut Vec<f64>, p: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[((v.len() - 1) as f64 * p) as usize]
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ds = dataset_read(Path::new("/tmp/hcgtune/eval")).unwrap();
    let store = ParamStore::load(Path::new(&args[1]), 0).unwrap();
    let cfg = ModelConfig::default();
    let recs: Vec<_> = ds.records.iter().filter(|r| r.bbox.is_some()).collect();
    let mut matched = Vec::new();
    let mut mismatched = Vec::new();
    for (i, r) in recs.iter().enumerate() {
        let mut g = Graph::<f64>::new();
        let p = BoundParams::bind(&mut g, &store).unwrap();
        let b = r.bbox.unwrap();
        let prop = RegionProposal {
            bbox: BoundingBox { x0: b[0], y0: b[1], x1: b[2], y1: b[3] },
            score: 1.0,
            peak: (0, 0),
        };
        let patch = crop_region(ds.image_for(r), &prop, cfg.local_res);
        let f = encode_local(&mut g, &p, &cfg, &patch).unwrap();
        let eq = encode_text(&mut g, &p, &cfg, &r.tokens).unwrap();
        let other = recs[(i + 7) % recs.len()];
        let eo = encode_text(&mut g, &p, &cfg, &other.tokens).unwrap();
        let s1 = consistency_score(&mut g, f, eq).unwrap();
        let s2 = consistency_score(&mut g, f, eo).unwrap();
        matched.push(g.scalar(s1));
        mismatched.push(g.scalar(s2));
    }
    for (name, v) in [("matched", &mut matched), ("mismatched", &mut mismatched)] {
        println!("{name}: n={} p5={:.3} p50={:.3} p95={:.3}", v.len(), pct(v, 0.05), pct(v, 0.5), pct(v, 0.95));
    }
}
