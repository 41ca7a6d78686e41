use hcg::eval::predict;
use hcg::geom::{iou, BoundingBox};
use hcg::model::{ModelConfig, Variant};
use hcg::scene::dataset_read;
use hcg::tensor::ParamStore;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ds = dataset_read(Path::new("/tmp/hcgtune/eval")).unwrap();
    let store = ParamStore::load(Path::new(&args[1]), 0).unwrap();
    let cfg = ModelConfig::default();
    let mut n = 0usize;
    let mut miou = 0.0;
    let mut const_iou = 0.0;
    let mut sum_box = [0.0f64; 4];
    let mut gt_area = 0.0;
    let mut pred_area = 0.0;
    let mut prop_hit = 0usize;
    let mut best_prop_iou = 0.0;
    for r in ds.records.iter().filter(|r| r.bbox.is_some() && !r.probe) {
        let gt = BoundingBox::from_array(r.bbox.unwrap());
        let out = predict(&store, &cfg, Variant::Full, &ds, r).unwrap();
        let b = out.bbox;
        n += 1;
        miou += iou(&b, &gt).unwrap_or(0.0);
        let c = BoundingBox { x0: 0.3, y0: 0.3, x1: 0.7, y1: 0.7 };
        const_iou += iou(&c, &gt).unwrap_or(0.0);
        sum_box[0] += b.x0;
        sum_box[1] += b.y0;
        sum_box[2] += b.x1;
        sum_box[3] += b.y1;
        gt_area += (gt.x1 - gt.x0) * (gt.y1 - gt.y0);
        pred_area += (b.x1 - b.x0) * (b.y1 - b.y0);
        // Proposal quality: best IoU among proposals against gt.
        let mut g = hcg::tensor::Graph::<f64>::new();
        let p = hcg::model::BoundParams::bind(&mut g, &store).unwrap();
        let fwd = hcg::model::forward_sample(
            &mut g,
            &p,
            &cfg,
            Variant::Full,
            ds.image_for(r),
            &r.tokens,
        )
        .unwrap();
        let best = fwd
            .proposals
            .iter()
            .map(|p| iou(&p.bbox, &gt).unwrap_or(0.0))
            .fold(0.0f64, f64::max);
        best_prop_iou += best;
        if best > 0.3 {
            prop_hit += 1;
        }
    }
    let nf = n as f64;
    println!("n={n} mIoU={:.4} const_box_iou={:.4}", miou / nf, const_iou / nf);
    println!(
        "mean pred box = [{:.3},{:.3},{:.3},{:.3}] mean gt area {:.4} pred area {:.4}",
        sum_box[0] / nf,
        sum_box[1] / nf,
        sum_box[2] / nf,
        sum_box[3] / nf,
        gt_area / nf,
        pred_area / nf
    );
    println!(
        "proposal best-IoU mean {:.4}, hit(>0.3) {:.3}",
        best_prop_iou / nf,
        prop_hit as f64 / nf
    );
}
