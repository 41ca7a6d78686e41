//! Procedural scene benchmark: deterministic generation and rasterization
//! of simple colored shapes with exact ground truth. Stands in for the
//! real VQA / referring-expression datasets at desk scale.

mod dataset;
mod query;

pub use dataset::{
    dataset_hash, dataset_read, dataset_write, generate_dataset, Dataset, DatasetCounts,
    DatasetManifest, FORMAT_VERSION,
};
pub use query::{
    color_label, color_word, descriptor_from_tokens, make_hallucination_probe, make_query,
    shape_label, shape_word, size_label, size_word, token_id, Descriptor, QueryContent,
    QueryKind, QueryRecord, Task, ANSWER_VOCAB, NOT_PRESENT_LABEL, NO_LABEL,
    RELATION_DEAD_ZONE, TOKEN_VOCAB, YES_LABEL,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::BoundingBox;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("could not place {0} non-overlapping objects after 1000 attempts")]
    Unsatisfiable(usize),
    #[error("no valid query for this scene")]
    NoQuery,
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, SceneError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

pub const COLORS: [Color; 5] =
    [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple];

impl Color {
    pub fn rgb(&self) -> [u8; 3] {
        match self {
            Color::Red => [230, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [235, 220, 50],
            Color::Purple => [160, 50, 210],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjSize {
    Small,
    Large,
}

pub const SIZES: [ObjSize; 2] = [ObjSize::Small, ObjSize::Large];

impl ObjSize {
    /// Side-fraction range for this size class.
    pub fn range(&self) -> (f64, f64) {
        match self {
            ObjSize::Small => (0.10, 0.18),
            ObjSize::Large => (0.24, 0.36),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Black,
    Gray,
    White,
}

impl Background {
    pub fn rgb(&self) -> [u8; 3] {
        match self {
            Background::Black => [10, 10, 10],
            Background::Gray => [120, 120, 120],
            Background::White => [245, 245, 245],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: ObjSize,
    /// Extent as a fraction of the image side.
    pub frac: f64,
    /// Center in normalized coordinates.
    pub center: (f64, f64),
}

impl ObjectSpec {
    /// Circumradius used for the non-overlap check.
    fn radius(&self) -> f64 {
        match self.shape {
            Shape::Circle => self.frac / 2.0,
            // square and triangle vertices reach the bounding-box corner
            Shape::Square | Shape::Triangle => self.frac * std::f64::consts::FRAC_1_SQRT_2,
        }
    }

    /// Pixel-center-inside test in normalized coordinates; boundary inclusive.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (cx, cy) = self.center;
        let h = self.frac / 2.0;
        let (dx, dy) = (px - cx, py - cy);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= h * h,
            Shape::Square => dx.abs() <= h && dy.abs() <= h,
            Shape::Triangle => {
                // apex up: (cx, cy-h), base corners (cx-h, cy+h), (cx+h, cy+h)
                if dy < -h || dy > h {
                    return false;
                }
                // width grows linearly from 0 at the apex to h at the base
                let t = (dy + h) / (2.0 * h);
                dx.abs() <= t * h
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub background: Background,
    pub seed: u64,
}

/// Dense pixel grid, row-major, 3 channels, values in [0,1] quantized to
/// 1/255 steps so PPM round trips are bit exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub side: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.side + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(side: usize, bytes: &[u8]) -> Self {
        Image { side, pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    pub image_side: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Fraction of records that are REC (box) tasks.
    pub rec_frac: f64,
    /// Fraction of VQA records that are hallucination probes.
    pub probe_frac: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_side: 64,
            min_objects: 2,
            max_objects: 4,
            rec_frac: 0.35,
            probe_frac: 0.15,
        }
    }
}

impl GenConfig {
    /// 224x224 matches the full-scale data pipeline; the toy default is 64.
    pub fn paper_parity() -> Self {
        GenConfig { image_side: 224, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(32..=256).contains(&self.image_side) {
            return Err(SceneError::InvalidConfig(format!(
                "image_side {} outside 32..=256",
                self.image_side
            )));
        }
        if self.min_objects < 1 || self.max_objects > 4 || self.min_objects > self.max_objects {
            return Err(SceneError::InvalidConfig("object count must be 1..=4".into()));
        }
        if !(0.0..=1.0).contains(&self.rec_frac) || !(0.0..=1.0).contains(&self.probe_frac) {
            return Err(SceneError::InvalidConfig("fractions must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Derive an independent RNG stream for record `index` of a master seed, so
/// records can be generated in any order (or in parallel) identically.
pub fn record_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut z = master_seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Deterministically sample a scene and rasterize it.
pub fn generate_scene(seed: u64, config: &GenConfig) -> Result<(SceneSpec, Image)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = sample_scene_spec(&mut rng, seed, config)?;
    let img = render(&spec, config.image_side);
    Ok((spec, img))
}

pub(crate) fn sample_scene_spec(
    rng: &mut ChaCha8Rng,
    seed: u64,
    config: &GenConfig,
) -> Result<SceneSpec> {
    let n = rng.gen_range(config.min_objects..=config.max_objects);
    let background = [Background::Black, Background::Gray, Background::White]
        [rng.gen_range(0..3usize)];
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _attempt in 0..1000 {
            let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
            let color = COLORS[rng.gen_range(0..COLORS.len())];
            let size = SIZES[rng.gen_range(0..SIZES.len())];
            if objects
                .iter()
                .any(|o| o.shape == shape && o.color == color && o.size == size)
            {
                // identical attribute triples would make referring
                // expressions unresolvable
                continue;
            }
            let (lo, hi) = size.range();
            let frac = rng.gen_range(lo..hi);
            // keep the object fully inside the canvas
            let cmin = (frac / 2.0 + 1.0 / 64.0).max(0.1);
            let cmax = (1.0 - frac / 2.0 - 1.0 / 64.0).min(0.9);
            let cx = rng.gen_range(cmin..cmax);
            let cy = rng.gen_range(cmin..cmax);
            let cand = ObjectSpec { shape, color, size, frac, center: (cx, cy) };
            let ok = objects.iter().all(|o| {
                let dx = o.center.0 - cx;
                let dy = o.center.1 - cy;
                (dx * dx + dy * dy).sqrt() > o.radius() + cand.radius()
            });
            if ok {
                objects.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::Unsatisfiable(n));
        }
    }
    Ok(SceneSpec { objects, background, seed })
}

/// Pure rasterization, no anti-aliasing: a pixel belongs to an object iff
/// its center lies inside the shape. Objects never overlap by construction.
pub fn render(spec: &SceneSpec, side: usize) -> Image {
    render_with_boxes(spec, side).0
}

/// Rasterize and return each object's tight box: the exact min/max extents
/// of its rendered pixels in normalized coordinates (None if no pixel).
pub fn render_with_boxes(spec: &SceneSpec, side: usize) -> (Image, Vec<Option<BoundingBox>>) {
    let bg = spec.background.rgb();
    let mut pixels = vec![0.0f64; side * side * 3];
    let mut extents: Vec<Option<(usize, usize, usize, usize)>> = vec![None; spec.objects.len()];
    for y in 0..side {
        let py = (y as f64 + 0.5) / side as f64;
        for x in 0..side {
            let px = (x as f64 + 0.5) / side as f64;
            let mut rgb = bg;
            for (k, obj) in spec.objects.iter().enumerate() {
                if obj.contains(px, py) {
                    rgb = obj.color.rgb();
                    let e = extents[k].get_or_insert((x, y, x, y));
                    e.0 = e.0.min(x);
                    e.1 = e.1.min(y);
                    e.2 = e.2.max(x);
                    e.3 = e.3.max(y);
                    break;
                }
            }
            let i = (y * side + x) * 3;
            pixels[i] = rgb[0] as f64 / 255.0;
            pixels[i + 1] = rgb[1] as f64 / 255.0;
            pixels[i + 2] = rgb[2] as f64 / 255.0;
        }
    }
    let boxes = extents
        .into_iter()
        .map(|e| {
            e.map(|(x0, y0, x1, y1)| {
                BoundingBox::new(
                    x0 as f64 / side as f64,
                    y0 as f64 / side as f64,
                    (x1 + 1) as f64 / side as f64,
                    (y1 + 1) as f64 / side as f64,
                )
            })
        })
        .collect();
    (Image { side, pixels }, boxes)
}
