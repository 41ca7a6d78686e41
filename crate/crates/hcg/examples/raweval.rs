use hcg::eval::predict;
use hcg::model::{ModelConfig, Variant, FusedOutput};
use hcg::scene::dataset_read;
use hcg::tensor::ParamStore;
use std::path::Path;
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ds = dataset_read(Path::new("/tmp/hcgtune/eval")).unwrap();
    let store = ParamStore::load(Path::new(&args[1]), 0).unwrap();
    let variant = Variant::from_name(&args[2]).unwrap();
    let cfg = ModelConfig::default();
    let (mut n, mut correct) = (0, 0);
    for r in ds.records.iter().filter(|r| !r.probe && r.answer_label.is_some()) {
        let out = predict(&store, &cfg, variant, &ds, r).unwrap();
        let raw = FusedOutput::new(out.answer_logits.clone(), out.bbox, out.scores.clone());
        n += 1;
        if Some(raw.answer_label) == r.answer_label { correct += 1; }
    }
    println!("{} raw_acc {:.4}", &args[1], correct as f64 / n as f64);
}
