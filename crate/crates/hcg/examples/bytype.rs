use hcg::eval::predict;
use hcg::model::{ModelConfig, Variant};
use hcg::scene::dataset_read;
use hcg::tensor::ParamStore;
use std::collections::BTreeMap;
use std::path::Path;

fn kind(tokens: &[String]) -> &'static str {
    let joined = tokens.join(" ");
    if joined.contains("color") {
        "color"
    } else if joined.contains("shape") {
        "shape"
    } else if joined.contains("size") {
        "size"
    } else if joined.starts_with("is there") || joined.starts_with("there is") {
        "presence"
    } else {
        "other"
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ds = dataset_read(Path::new("/tmp/hcgtune/eval")).unwrap();
    let store_a = ParamStore::load(Path::new(&args[1]), 0).unwrap();
    let store_b = ParamStore::load(Path::new(&args[2]), 0).unwrap();
    let cfg = ModelConfig::default();
    let mut per: BTreeMap<&'static str, (usize, usize, usize, usize)> = BTreeMap::new();
    for r in ds.records.iter().filter(|r| !r.probe && r.answer_label.is_some()) {
        let oa = predict(&store_a, &cfg, Variant::Full, &ds, r).unwrap();
        let ob = predict(&store_b, &cfg, Variant::BaseGlobalOnly, &ds, r).unwrap();
        let pa = hcg::model::argmax(&oa.answer_logits);
        let pb = hcg::model::argmax(&ob.answer_logits);
        let e = per.entry(kind(&r.tokens)).or_default();
        e.0 += 1;
        if Some(pa) == r.answer_label {
            e.1 += 1;
        }
        if Some(pb) == r.answer_label {
            e.2 += 1;
        }
        if pa == pb {
            e.3 += 1;
        }
    }
    for (k, (n, ca, cb, agree)) in per {
        println!(
            "{k:9} n={n:4}  full={:.3}  base={:.3}  agree={:.3}",
            ca as f64 / n as f64,
            cb as f64 / n as f64,
            agree as f64 / n as f64
        );
    }
}
