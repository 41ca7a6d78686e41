//! Templated queries over scene specs: attribute questions, spatial
//! relations, presence checks, referring expressions, and hallucination
//! probes about absent objects. Answers are correct by construction
//! (attribute lookup or center comparison on the spec).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Color, ObjSize, ObjectSpec, SceneSpec, SceneError, Shape, COLORS, SHAPES, SIZES};
use crate::geom::BoundingBox;
use serde::{Deserialize, Serialize};

/// Closed token vocabulary for queries.
pub const TOKEN_VOCAB: &[&str] = &[
    "what", "color", "shape", "size", "is", "the", "a", "object", "present", "left-of",
    "right-of", "above", "below", "circle", "square", "triangle", "red", "green", "blue",
    "yellow", "purple", "small", "large",
];

/// Closed answer vocabulary.
pub const ANSWER_VOCAB: &[&str] = &[
    "red", "green", "blue", "yellow", "purple", "small", "large", "circle", "square",
    "triangle", "yes", "no", "not-present",
];

pub const YES_LABEL: usize = 10;
pub const NO_LABEL: usize = 11;
pub const NOT_PRESENT_LABEL: usize = 12;

/// Center-comparison dead zone: pairs closer than this along the relation
/// axis are considered ambiguous and never asked about.
pub const RELATION_DEAD_ZONE: f64 = 0.05;

pub fn token_id(tok: &str) -> Option<usize> {
    TOKEN_VOCAB.iter().position(|&t| t == tok)
}

pub fn color_word(c: Color) -> &'static str {
    match c {
        Color::Red => "red",
        Color::Green => "green",
        Color::Blue => "blue",
        Color::Yellow => "yellow",
        Color::Purple => "purple",
    }
}

pub fn shape_word(s: Shape) -> &'static str {
    match s {
        Shape::Circle => "circle",
        Shape::Square => "square",
        Shape::Triangle => "triangle",
    }
}

pub fn size_word(s: ObjSize) -> &'static str {
    match s {
        ObjSize::Small => "small",
        ObjSize::Large => "large",
    }
}

pub fn color_label(c: Color) -> usize {
    COLORS.iter().position(|&x| x == c).unwrap()
}

pub fn size_label(s: ObjSize) -> usize {
    5 + SIZES.iter().position(|&x| x == s).unwrap()
}

pub fn shape_label(s: Shape) -> usize {
    7 + SHAPES.iter().position(|&x| x == s).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vqa,
    Rec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    ColorOf,
    ShapeOf,
    SizeOf,
    Relation,
    Presence,
}

/// One benchmark sample as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: u64,
    pub tokens: Vec<String>,
    pub task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_label: Option<usize>,
    #[serde(rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    pub probe: bool,
    pub image_file: String,
}

/// Partial attribute description; matches an object when every stated
/// attribute agrees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Descriptor {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub size: Option<ObjSize>,
}

impl Descriptor {
    pub fn matches(&self, obj: &ObjectSpec) -> bool {
        self.shape.map_or(true, |s| s == obj.shape)
            && self.color.map_or(true, |c| c == obj.color)
            && self.size.map_or(true, |s| s == obj.size)
    }

    pub fn match_count(&self, spec: &SceneSpec) -> usize {
        spec.objects.iter().filter(|o| self.matches(o)).count()
    }

    pub fn find_unique(&self, spec: &SceneSpec) -> Option<usize> {
        let mut it = spec.objects.iter().enumerate().filter(|(_, o)| self.matches(o));
        match (it.next(), it.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    }

    fn words(&self) -> Vec<String> {
        let mut w = Vec::new();
        if let Some(s) = self.size {
            w.push(size_word(s).to_string());
        }
        if let Some(c) = self.color {
            w.push(color_word(c).to_string());
        }
        if let Some(s) = self.shape {
            w.push(shape_word(s).to_string());
        } else {
            w.push("object".to_string());
        }
        w
    }
}

/// Extract every attribute word appearing in a token sequence. Used by the
/// exhaustive probe matcher.
pub fn descriptor_from_tokens(tokens: &[String]) -> Descriptor {
    let mut d = Descriptor::default();
    for t in tokens {
        match t.as_str() {
            "circle" => d.shape = Some(Shape::Circle),
            "square" => d.shape = Some(Shape::Square),
            "triangle" => d.shape = Some(Shape::Triangle),
            "red" => d.color = Some(Color::Red),
            "green" => d.color = Some(Color::Green),
            "blue" => d.color = Some(Color::Blue),
            "yellow" => d.color = Some(Color::Yellow),
            "purple" => d.color = Some(Color::Purple),
            "small" => d.size = Some(ObjSize::Small),
            "large" => d.size = Some(ObjSize::Large),
            _ => {}
        }
    }
    d
}

/// Tokens + ground truth, before being wrapped into a [`QueryRecord`].
#[derive(Debug, Clone)]
pub struct QueryContent {
    pub tokens: Vec<String>,
    pub answer_label: Option<usize>,
    pub bbox: Option<BoundingBox>,
    pub probe: bool,
}

/// Build one query of the given task for this scene. `boxes` are the tight
/// rendered-pixel boxes aligned with `spec.objects`.
pub fn make_query(
    spec: &SceneSpec,
    boxes: &[Option<BoundingBox>],
    task: Task,
    rng: &mut ChaCha8Rng,
) -> super::Result<QueryContent> {
    if spec.objects.is_empty() {
        return Err(SceneError::NoQuery);
    }
    match task {
        Task::Rec => make_rec(spec, boxes, rng),
        Task::Vqa => {
            for _ in 0..50 {
                let kind = pick_kind(rng);
                if let Some(q) = try_vqa(spec, kind, rng) {
                    return Ok(q);
                }
            }
            // presence questions are always constructible for a non-empty
            // scene with <= 4 objects
            try_vqa(spec, QueryKind::Presence, rng).ok_or(SceneError::NoQuery)
        }
    }
}

fn pick_kind(rng: &mut ChaCha8Rng) -> QueryKind {
    let u: f64 = rng.gen();
    if u < 0.30 {
        QueryKind::ColorOf
    } else if u < 0.50 {
        QueryKind::ShapeOf
    } else if u < 0.70 {
        QueryKind::SizeOf
    } else if u < 0.85 {
        QueryKind::Relation
    } else {
        QueryKind::Presence
    }
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn try_vqa(spec: &SceneSpec, kind: QueryKind, rng: &mut ChaCha8Rng) -> Option<QueryContent> {
    match kind {
        QueryKind::ColorOf => {
            for i in shuffled_indices(spec.objects.len(), rng) {
                let obj = &spec.objects[i];
                for d in [
                    Descriptor { shape: Some(obj.shape), ..Default::default() },
                    Descriptor {
                        shape: Some(obj.shape),
                        size: Some(obj.size),
                        ..Default::default()
                    },
                ] {
                    if d.find_unique(spec) == Some(i) {
                        let mut tokens = svec(&["what", "color", "is", "the"]);
                        tokens.extend(d.words());
                        return Some(QueryContent {
                            tokens,
                            answer_label: Some(color_label(obj.color)),
                            bbox: None,
                            probe: false,
                        });
                    }
                }
            }
            None
        }
        QueryKind::ShapeOf => {
            for i in shuffled_indices(spec.objects.len(), rng) {
                let obj = &spec.objects[i];
                for d in [
                    Descriptor { color: Some(obj.color), ..Default::default() },
                    Descriptor {
                        color: Some(obj.color),
                        size: Some(obj.size),
                        ..Default::default()
                    },
                ] {
                    if d.find_unique(spec) == Some(i) {
                        let mut tokens = svec(&["what", "shape", "is", "the"]);
                        tokens.extend(d.words());
                        return Some(QueryContent {
                            tokens,
                            answer_label: Some(shape_label(obj.shape)),
                            bbox: None,
                            probe: false,
                        });
                    }
                }
            }
            None
        }
        QueryKind::SizeOf => {
            for i in shuffled_indices(spec.objects.len(), rng) {
                let obj = &spec.objects[i];
                for d in [
                    Descriptor {
                        color: Some(obj.color),
                        shape: Some(obj.shape),
                        ..Default::default()
                    },
                    Descriptor { shape: Some(obj.shape), ..Default::default() },
                ] {
                    if d.find_unique(spec) == Some(i) {
                        let mut tokens = svec(&["what", "size", "is", "the"]);
                        tokens.extend(d.words());
                        return Some(QueryContent {
                            tokens,
                            answer_label: Some(size_label(obj.size)),
                            bbox: None,
                            probe: false,
                        });
                    }
                }
            }
            None
        }
        QueryKind::Relation => try_relation(spec, rng),
        QueryKind::Presence => {
            let want_yes = rng.gen_bool(0.5);
            let mut present = Vec::new();
            let mut absent = Vec::new();
            for &c in &COLORS {
                for &s in &SHAPES {
                    let d = Descriptor { color: Some(c), shape: Some(s), ..Default::default() };
                    if d.match_count(spec) > 0 {
                        present.push((c, s));
                    } else {
                        absent.push((c, s));
                    }
                }
            }
            let pool = if want_yes { &present } else { &absent };
            let pool = if pool.is_empty() {
                if want_yes {
                    &absent
                } else {
                    &present
                }
            } else {
                pool
            };
            let (c, s) = pool[rng.gen_range(0..pool.len())];
            let is_present = present.contains(&(c, s));
            let tokens = vec![
                "is".into(),
                "a".into(),
                color_word(c).into(),
                shape_word(s).into(),
                "present".into(),
            ];
            Some(QueryContent {
                tokens,
                answer_label: Some(if is_present { YES_LABEL } else { NO_LABEL }),
                bbox: None,
                probe: false,
            })
        }
    }
}

fn unique_descriptor(spec: &SceneSpec, i: usize) -> Option<Descriptor> {
    let obj = &spec.objects[i];
    let candidates = [
        Descriptor { color: Some(obj.color), shape: Some(obj.shape), ..Default::default() },
        Descriptor { color: Some(obj.color), ..Default::default() },
        Descriptor { shape: Some(obj.shape), ..Default::default() },
        Descriptor {
            size: Some(obj.size),
            color: Some(obj.color),
            shape: Some(obj.shape),
        },
    ];
    candidates.into_iter().find(|d| d.find_unique(spec) == Some(i))
}

fn try_relation(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<QueryContent> {
    if spec.objects.len() < 2 {
        return None;
    }
    let n = spec.objects.len();
    let want_yes = rng.gen_bool(0.5);
    for i in shuffled_indices(n, rng) {
        for j in shuffled_indices(n, rng) {
            if i == j {
                continue;
            }
            let (Some(da), Some(db)) = (unique_descriptor(spec, i), unique_descriptor(spec, j))
            else {
                continue;
            };
            let (ax, ay) = spec.objects[i].center;
            let (bx, by) = spec.objects[j].center;
            let dx = bx - ax;
            let dy = by - ay;
            // axis must be unambiguous: beyond the dead zone
            let mut rels = Vec::new();
            if dx.abs() > RELATION_DEAD_ZONE {
                // true relation of a w.r.t. b on x
                rels.push(if dx > 0.0 { ("left-of", true) } else { ("left-of", false) });
                rels.push(if dx < 0.0 { ("right-of", true) } else { ("right-of", false) });
            }
            if dy.abs() > RELATION_DEAD_ZONE {
                // image coordinates: smaller y is higher in the image
                rels.push(if dy > 0.0 { ("above", true) } else { ("above", false) });
                rels.push(if dy < 0.0 { ("below", true) } else { ("below", false) });
            }
            let pick: Vec<&(&str, bool)> =
                rels.iter().filter(|(_, holds)| *holds == want_yes).collect();
            if let Some((rel, holds)) = pick.first() {
                let mut tokens = svec(&["is", "the"]);
                tokens.extend(da.words());
                tokens.push((*rel).into());
                tokens.push("the".into());
                tokens.extend(db.words());
                return Some(QueryContent {
                    tokens,
                    answer_label: Some(if *holds { YES_LABEL } else { NO_LABEL }),
                    bbox: None,
                    probe: false,
                });
            }
        }
    }
    None
}

fn make_rec(
    spec: &SceneSpec,
    boxes: &[Option<BoundingBox>],
    rng: &mut ChaCha8Rng,
) -> super::Result<QueryContent> {
    for i in shuffled_indices(spec.objects.len(), rng) {
        let Some(d) = unique_descriptor(spec, i) else { continue };
        let Some(b) = boxes.get(i).copied().flatten() else { continue };
        let mut tokens = vec!["the".to_string()];
        tokens.extend(d.words());
        return Ok(QueryContent {
            tokens,
            answer_label: None,
            bbox: Some(b),
            probe: false,
        });
    }
    Err(SceneError::NoQuery)
}

/// Build a probe about an object that is certifiably absent from the scene.
/// With at most 4 objects and 30 attribute combinations an absent
/// combination always exists.
pub fn make_hallucination_probe(
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
) -> super::Result<QueryContent> {
    let mut candidates: Vec<Vec<String>> = Vec::new();
    for &s in &SHAPES {
        let d = Descriptor { shape: Some(s), ..Default::default() };
        if d.match_count(spec) == 0 {
            let mut t = svec(&["what", "color", "is", "the"]);
            t.push(shape_word(s).into());
            candidates.push(t);
        }
    }
    for &sz in &SIZES {
        for &s in &SHAPES {
            let d = Descriptor { size: Some(sz), shape: Some(s), ..Default::default() };
            if d.match_count(spec) == 0 {
                let mut t = svec(&["what", "color", "is", "the"]);
                t.push(size_word(sz).into());
                t.push(shape_word(s).into());
                candidates.push(t);
            }
        }
    }
    for &c in &COLORS {
        let d = Descriptor { color: Some(c), ..Default::default() };
        if d.match_count(spec) == 0 {
            let mut t = svec(&["what", "shape", "is", "the"]);
            t.push(color_word(c).into());
            t.push("object".into());
            candidates.push(t);
        }
    }
    if candidates.is_empty() {
        return Err(SceneError::NoQuery);
    }
    let tokens = candidates[rng.gen_range(0..candidates.len())].clone();
    debug_assert_eq!(descriptor_from_tokens(&tokens).match_count(spec), 0);
    Ok(QueryContent {
        tokens,
        answer_label: Some(NOT_PRESENT_LABEL),
        bbox: None,
        probe: true,
    })
}

fn svec(words: &[&str]) -> Vec<String> {
    words.iter().map(|s| s.to_string()).collect()
}
