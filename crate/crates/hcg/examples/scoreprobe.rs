use hcg::eval::predict;
use hcg::model::{ModelConfig, Variant};
use hcg::scene::dataset_read;
use hcg::tensor::ParamStore;
use std::path::Path;

fn pct(v: &mut Vec<f64>, p: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[((v.len() - 1) as f64 * p) as usize]
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ds = dataset_read(Path::new(args.get(2).map(String::as_str).unwrap_or("/tmp/hcgtune/eval"))).unwrap();
    let store = ParamStore::load(Path::new(&args[1]), 0).unwrap();
    let cfg = ModelConfig::default();
    let mut real = Vec::new();
    let mut probe = Vec::new();
    let mut yes = Vec::new();
    let mut no = Vec::new();
    for r in &ds.records {
        let out = predict(&store, &cfg, Variant::NoScv, &ds, r).unwrap();
        let m = out.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            continue;
        }
        if r.probe {
            probe.push(m);
        } else if r.answer_label.is_some() {
            real.push(m);
            let j = r.tokens.join(" ");
            if j.contains("present") {
                match r.answer_label {
                    Some(10) => yes.push(m),
                    Some(11) => no.push(m),
                    _ => {}
                }
            }
        }
    }
    for (name, v) in [("real", &mut real), ("probe", &mut probe), ("pres-yes", &mut yes), ("pres-no", &mut no)] {
        if v.is_empty() {
            println!("{name}: empty");
            continue;
        }
        println!(
            "{name}: n={} p5={:.3} p50={:.3} p95={:.3}",
            v.len(),
            pct(v, 0.05),
            pct(v, 0.5),
            pct(v, 0.95)
        );
    }
}
