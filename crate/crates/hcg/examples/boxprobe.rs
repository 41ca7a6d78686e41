use hcg::model::{ModelConfig, Variant};
use hcg::scene::dataset_read;
use hcg::tensor::{Graph, ParamStore};
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ds = dataset_read(Path::new("/tmp/hcgtune/train")).unwrap();
    let store = ParamStore::load(Path::new(&args[1]), 0).unwrap();
    for name in ["global.box.b", "global.box.w", "global.box.gw"] {
        let p = store.get(name).unwrap();
        let norm: f64 = p.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{name} shape {:?} l2 {:.5} first {:?}", p.shape, norm, &p.values[..4.min(p.values.len())]);
    }
    // gradient of box loss wrt box params on first REC record
    let r = ds.records.iter().find(|r| r.bbox.is_some() && !r.probe).unwrap();
    let mut g = Graph::<f64>::new();
    let p = hcg::model::BoundParams::bind(&mut g, &store).unwrap();
    let cfg = ModelConfig::default();
    let fwd = hcg::model::forward_sample(&mut g, &p, &cfg, Variant::BaseGlobalOnly, ds.image_for(r), &r.tokens).unwrap();
    let corners = g.values_f64(fwd.final_box);
    println!("gt {:?} pred {:?}", r.bbox.unwrap(), corners);
    let loss = g.smooth_l1(fwd.final_box, &r.bbox.unwrap(), 0.1).unwrap();
    println!("loss {}", g.scalar(loss));
    let grads = g.backward(loss).unwrap();
    for (name, id) in g.param_leaves() {
        if name.starts_with("global.box") {
            if let Some(gr) = grads.get(*id) {
                let n: f64 = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
                println!("grad {name} l2 {:.6}", n);
            } else {
                println!("grad {name} MISSING");
            }
        }
    }
}
