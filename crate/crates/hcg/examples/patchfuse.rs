use hcg::model::{init_params, ModelConfig};
use hcg::tensor::ParamStore;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args[2].parse().unwrap();
    let old = ParamStore::load(Path::new(&args[1]), seed).unwrap();
    let mut fresh = ParamStore::new(seed);
    init_params(&mut fresh, &ModelConfig::default());
    for name in old.names() {
        if name.starts_with("fuse.w1") || name.starts_with("fuse.b1") || name.starts_with("fuse.w2")
        {
            continue;
        }
        let src = old.get(&name).unwrap().clone();
        let dst = fresh.get_mut(&name).unwrap();
        assert_eq!(dst.shape, src.shape, "{name}");
        dst.values = src.values;
    }
    fresh.save(Path::new(&args[1])).unwrap();
    println!("patched {}", &args[1]);
}
