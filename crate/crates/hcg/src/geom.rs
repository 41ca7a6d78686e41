//! Normalized bounding boxes and IoU.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized image coordinates, corners ordered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoundingBox { x0, y0, x1, y1 }
    }

    pub fn well_ordered(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn in_unit_square(&self) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= 1.0 && self.y1 <= 1.0
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoundingBox::new(a[0], a[1], a[2], a[3])
    }
}

/// Intersection-over-union of two well-ordered boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, &'static str> {
    if !a.well_ordered() || !b.well_ordered() {
        return Err("degenerate box");
    }
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identity_disjoint_analytic() {
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = BoundingBox::new(0.2, 0.2, 0.4, 0.4);
        let c = BoundingBox::new(0.6, 0.6, 0.9, 0.9);
        assert_eq!(iou(&b, &c).unwrap(), 0.0);
        // (0,0,1,1) vs (0.5,0,1.5,1): intersection 0.5, union 1.5
        let d = BoundingBox::new(0.5, 0.0, 1.5, 1.0);
        assert!((iou(&a, &d).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0);
        let z = BoundingBox::new(0.5, 0.5, 0.5, 0.9);
        assert!(iou(&a, &z).is_err());
    }

    #[test]
    fn iou_symmetric_and_bounded() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let x0 = rng.gen_range(0.0..0.8);
                let y0 = rng.gen_range(0.0..0.8);
                BoundingBox::new(
                    x0,
                    y0,
                    x0 + rng.gen_range(0.01..0.2),
                    y0 + rng.gen_range(0.01..0.2),
                )
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
        }
    }
}
