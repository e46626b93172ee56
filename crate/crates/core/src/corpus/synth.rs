use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::regions::{BBox, DetectionSet, RegionSet};

pub const CANVAS: f32 = 100.0;
pub const GRID_SIDE: usize = 10;
pub const DEFAULT_FEATURE_DIM: usize = 64;
const MIN_FEATURE_DIM: usize = 17;

// Disjoint feature blocks: shape one-hot, color one-hot, size one-hot,
// objectness, background, then normalized center coordinates.
const SHAPE_BLOCK: usize = 0;
const COLOR_BLOCK: usize = 3;
const SIZE_BLOCK: usize = 11;
const OBJECTNESS: usize = 13;
const BACKGROUND: usize = 14;
const CENTER_X: usize = 15;
const CENTER_Y: usize = 16;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn plural(&self) -> &'static str {
        match self {
            Shape::Circle => "circles",
            Shape::Square => "squares",
            Shape::Triangle => "triangles",
        }
    }

    fn index(&self) -> usize {
        Shape::ALL.iter().position(|s| s == self).expect("listed")
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
    Purple,
    Orange,
    Black,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::Black,
        Color::White,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Black => "black",
            Color::White => "white",
        }
    }

    fn index(&self) -> usize {
        Color::ALL.iter().position(|c| c == self).expect("listed")
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ObjectSize {
    Small,
    Large,
}

impl ObjectSize {
    pub fn word(&self) -> &'static str {
        match self {
            ObjectSize::Small => "small",
            ObjectSize::Large => "large",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: ObjectSize,
    pub bbox: BBox,
}

impl SceneObject {
    fn center(&self) -> (f32, f32) {
        ((self.bbox.x1 + self.bbox.x2) / 2.0, (self.bbox.y1 + self.bbox.y2) / 2.0)
    }
}

/// A shape-world image: one to six colored shapes on a square canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub canvas: f32,
    pub objects: Vec<SceneObject>,
}

pub const NUMBER_WORDS: [&str; 7] = ["zero", "one", "two", "three", "four", "five", "six"];

/// Splitmix-style seed derivation so per-scene streams never collide.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E3779B97F4A7C15) ^ index.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on open-interval uniforms.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate a scene with 1..=6 objects whose boxes overlap at most lightly
/// (pairwise IoU <= 0.2), so per-class suppression never merges two real
/// objects.
pub fn gen_scene(seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=6);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
        let size = if rng.random_range(0..2) == 0 { ObjectSize::Small } else { ObjectSize::Large };
        let side = match size {
            ObjectSize::Small => rng.random_range(8.0..14.0),
            ObjectSize::Large => rng.random_range(18.0..28.0),
        };
        let mut bbox = place_box(&mut rng, side);
        for _ in 0..100 {
            if objects.iter().all(|o| crate::regions::iou(&o.bbox, &bbox) <= 0.2) {
                break;
            }
            bbox = place_box(&mut rng, side);
        }
        objects.push(SceneObject { shape, color, size, bbox });
    }
    SyntheticScene { canvas: CANVAS, objects }
}

fn place_box(rng: &mut ChaCha8Rng, side: f32) -> BBox {
    let x1 = rng.random_range(0.0..CANVAS - side);
    let y1 = rng.random_range(0.0..CANVAS - side);
    BBox::new(x1, y1, x1 + side, y1 + side).expect("side positive")
}

fn object_feature(obj: &SceneObject, canvas: f32, dim: usize) -> Vec<f32> {
    let mut f = vec![0.0f32; dim];
    f[SHAPE_BLOCK + obj.shape.index()] = 1.0;
    f[COLOR_BLOCK + obj.color.index()] = 1.0;
    f[SIZE_BLOCK + if obj.size == ObjectSize::Small { 0 } else { 1 }] = 1.0;
    f[OBJECTNESS] = 1.0;
    let (cx, cy) = obj.center();
    f[CENTER_X] = cx / canvas;
    f[CENTER_Y] = cy / canvas;
    f
}

fn background_feature(dim: usize) -> Vec<f32> {
    let mut f = vec![0.0f32; dim];
    f[BACKGROUND] = 1.0;
    f
}

fn add_noise(f: &mut [f32], noise: f64, rng: &mut ChaCha8Rng) {
    if noise > 0.0 {
        for v in f.iter_mut() {
            *v = (*v as f64 + noise * gaussian(rng)) as f32;
        }
    }
}

fn assert_dim(dim: usize) {
    assert!(dim >= MIN_FEATURE_DIM, "feature dim {dim} too small for the attribute blocks");
}

/// Noiseless attribute-block feature for one object; exposed for the
/// separability checks.
pub fn clean_object_feature(obj: &SceneObject, canvas: f32, dim: usize) -> Vec<f32> {
    assert_dim(dim);
    object_feature(obj, canvas, dim)
}

/// Simulate detector output: per object one confident box plus a couple of
/// jittered duplicates (fodder for per-class suppression), and a few
/// low-confidence background distractors.
pub fn scene_to_detections(scene: &SyntheticScene, dim: usize, noise: f64, seed: u64) -> DetectionSet {
    assert_dim(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = Shape::ALL.len();
    let mut boxes = Vec::new();
    let mut probs: Vec<f32> = Vec::new();
    let mut features: Vec<f32> = Vec::new();

    let mut push = |bbox: BBox, class_probs: Vec<f32>, mut feat: Vec<f32>, rng: &mut ChaCha8Rng| {
        boxes.push(bbox);
        probs.extend(class_probs);
        add_noise(&mut feat, noise, rng);
        features.extend(feat);
    };

    for obj in &scene.objects {
        let mut class_probs = vec![0.0f32; num_classes];
        for (c, p) in class_probs.iter_mut().enumerate() {
            *p = if c == obj.shape.index() {
                rng.random_range(0.75..0.95)
            } else {
                rng.random_range(0.01..0.08)
            };
        }
        push(obj.bbox, class_probs, object_feature(obj, scene.canvas, dim), &mut rng);

        // Jittered duplicates overlap the primary well above the suppression
        // threshold and carry strictly lower scores.
        for _ in 0..rng.random_range(1..=3u32) {
            let jitter = (obj.bbox.x2 - obj.bbox.x1) * 0.06;
            let dx = rng.random_range(-jitter..jitter);
            let dy = rng.random_range(-jitter..jitter);
            let dup = BBox::new(
                (obj.bbox.x1 + dx).max(0.0),
                (obj.bbox.y1 + dy).max(0.0),
                (obj.bbox.x2 + dx).min(scene.canvas),
                (obj.bbox.y2 + dy).min(scene.canvas),
            )
            .expect("jitter keeps the box valid");
            let mut dup_probs = vec![0.0f32; num_classes];
            for (c, p) in dup_probs.iter_mut().enumerate() {
                *p = if c == obj.shape.index() {
                    rng.random_range(0.4..0.7)
                } else {
                    rng.random_range(0.01..0.08)
                };
            }
            push(dup, dup_probs, object_feature(obj, scene.canvas, dim), &mut rng);
        }
    }

    for _ in 0..rng.random_range(1..=3u32) {
        let side = rng.random_range(6.0..20.0);
        let distractor = place_box(&mut rng, side);
        let class_probs: Vec<f32> = (0..num_classes).map(|_| rng.random_range(0.01..0.15)).collect();
        push(distractor, class_probs, background_feature(dim), &mut rng);
    }

    DetectionSet::new(boxes, num_classes, probs, dim, features).expect("rows built consistently")
}

/// Uniform-grid baseline features: each cell mixes the objects overlapping it
/// in proportion to covered cell area, with pure background elsewhere.
pub fn scene_to_grid_features(
    scene: &SyntheticScene,
    grid: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> RegionSet {
    assert_dim(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = scene.canvas / grid as f32;
    let mut features = Vec::with_capacity(grid * grid * dim);
    let mut boxes = Vec::with_capacity(grid * grid);
    let bg = background_feature(dim);

    for row in 0..grid {
        for col in 0..grid {
            let cell_box = BBox::new(
                col as f32 * cell,
                row as f32 * cell,
                (col + 1) as f32 * cell,
                (row + 1) as f32 * cell,
            )
            .expect("grid cells valid");
            let mut feat = vec![0.0f32; dim];
            let mut covered = 0.0f32;
            for obj in &scene.objects {
                let ix = (cell_box.x2.min(obj.bbox.x2) - cell_box.x1.max(obj.bbox.x1)).max(0.0);
                let iy = (cell_box.y2.min(obj.bbox.y2) - cell_box.y1.max(obj.bbox.y1)).max(0.0);
                let frac = (ix * iy) / (cell * cell);
                if frac > 0.0 {
                    let of = object_feature(obj, scene.canvas, dim);
                    for (fv, ov) in feat.iter_mut().zip(of) {
                        *fv += frac * ov;
                    }
                    covered += frac;
                }
            }
            let bg_weight = (1.0 - covered).max(0.0);
            for (fv, &bv) in feat.iter_mut().zip(&bg) {
                *fv += bg_weight * bv;
            }
            add_noise(&mut feat, noise, &mut rng);
            features.extend(feat);
            boxes.push(cell_box);
        }
    }
    RegionSet::new(dim, features, Some(boxes)).expect("grid rows consistent")
}

fn article(obj: &SceneObject) -> String {
    format!("a {} {} {}", obj.size.word(), obj.color.word(), obj.shape.word())
}

/// Relation word from the first object to the second, judged by the dominant
/// center offset.
fn relation(a: &SceneObject, b: &SceneObject) -> (&'static str, &'static str) {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    if (ax - bx).abs() >= (ay - by).abs() {
        if ax <= bx {
            ("left", "right")
        } else {
            ("right", "left")
        }
    } else if ay <= by {
        ("above", "below")
    } else {
        ("below", "above")
    }
}

/// Templated captions: an enumeration, an object count, a relation pair when
/// possible, and a shape count.
pub fn scene_to_captions(scene: &SyntheticScene) -> Vec<String> {
    let mut objects = scene.objects.clone();
    objects.sort_by(|a, b| {
        let (ax, ay) = a.center();
        let (bx, by) = b.center();
        ax.partial_cmp(&bx).unwrap().then(ay.partial_cmp(&by).unwrap())
    });
    let n = objects.len();
    let mut captions = Vec::new();

    let listing = objects.iter().map(article).collect::<Vec<_>>().join(" and ");
    captions.push(listing);

    captions.push(if n == 1 {
        "there is one object".to_string()
    } else {
        format!("there are {} objects", NUMBER_WORDS[n])
    });

    if n >= 2 {
        let (first, last) = (&objects[0], &objects[n - 1]);
        let (fwd, rev) = relation(first, last);
        captions.push(format!("{} {} of {}", article(first), fwd, article(last)));
        captions.push(format!("{} {} of {}", article(last), rev, article(first)));
    } else {
        captions.push(format!("there is {}", article(&objects[0])));
    }

    let mut shape_counts = [0usize; 3];
    for obj in &objects {
        shape_counts[obj.shape.index()] += 1;
    }
    let (best_shape, &count) = Shape::ALL
        .iter()
        .zip(&shape_counts)
        .max_by_key(|&(s, c)| (*c, std::cmp::Reverse(s.index())))
        .expect("three shapes");
    captions.push(if count == 1 {
        format!("there is one {}", best_shape.word())
    } else {
        format!("there are {} {}", NUMBER_WORDS[count], best_shape.plural())
    });

    captions
}

/// Broad answer category, recoverable from the question text.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum QuestionType {
    YesNo,
    Number,
    Other,
}

impl QuestionType {
    pub fn label(&self) -> &'static str {
        match self {
            QuestionType::YesNo => "yes/no",
            QuestionType::Number => "number",
            QuestionType::Other => "other",
        }
    }
}

pub fn classify_question(question: &str) -> QuestionType {
    let q = question.to_lowercase();
    if q.starts_with("is ") || q.starts_with("are ") {
        QuestionType::YesNo
    } else if q.starts_with("how many") {
        QuestionType::Number
    } else {
        QuestionType::Other
    }
}

/// One generated question with its ten simulated annotator answers.
#[derive(Clone, Debug, PartialEq)]
pub struct QaItem {
    pub question: String,
    pub answers: Vec<String>,
    pub true_answer: String,
}

fn annotator_answers(truth: &str, distractor: &str, rng: &mut ChaCha8Rng) -> Vec<String> {
    // Nine matching annotators plus one dissenter 30% of the time.
    let mut answers = vec![truth.to_string(); 10];
    if rng.random_range(0.0..1.0) < 0.3 {
        answers[9] = distractor.to_string();
    }
    answers
}

fn other_than<'a, T: PartialEq + Copy>(all: &'a [T], avoid: T, rng: &mut ChaCha8Rng) -> T {
    loop {
        let pick = all[rng.random_range(0..all.len())];
        if pick != avoid {
            return pick;
        }
    }
}

/// Three questions per scene: a count question, an attribute question and a
/// yes/no existence question, with answers balanced across scenes by
/// construction.
pub fn scene_to_qa(scene: &SyntheticScene, seed: u64) -> Vec<QaItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(3);
    let objects = &scene.objects;
    let number_answers: Vec<&str> = NUMBER_WORDS.to_vec();

    let mut shape_counts = [0usize; 3];
    for obj in objects {
        shape_counts[obj.shape.index()] += 1;
    }

    // Count question: object total or a shape count (sometimes of an absent
    // shape, so "zero" occurs).
    let count_item = if rng.random_range(0..2) == 0 {
        QaItem {
            question: "how many objects are there".into(),
            true_answer: NUMBER_WORDS[objects.len()].into(),
            answers: vec![],
        }
    } else {
        let shape = if rng.random_range(0.0..1.0) < 0.2 {
            Shape::ALL[rng.random_range(0..3)]
        } else {
            let present: Vec<Shape> = Shape::ALL
                .iter()
                .copied()
                .filter(|s| shape_counts[s.index()] > 0)
                .collect();
            present[rng.random_range(0..present.len())]
        };
        QaItem {
            question: format!("how many {} are there", shape.plural()),
            true_answer: NUMBER_WORDS[shape_counts[shape.index()]].into(),
            answers: vec![],
        }
    };
    let distractor = other_than(&number_answers, count_item.true_answer.as_str(), &mut rng);
    items.push(QaItem {
        answers: annotator_answers(&count_item.true_answer, distractor, &mut rng),
        ..count_item
    });

    // Attribute question about a uniquely identified object.
    let unique_shape = Shape::ALL.iter().find(|s| shape_counts[s.index()] == 1);
    let mut color_counts = [0usize; 8];
    for obj in objects {
        color_counts[obj.color.index()] += 1;
    }
    let unique_color = Color::ALL.iter().find(|c| color_counts[c.index()] == 1);
    if let Some(&shape) = unique_shape {
        let obj = objects.iter().find(|o| o.shape == shape).expect("counted");
        let truth = obj.color.word();
        let distractor = other_than(&Color::ALL, obj.color, &mut rng).word();
        items.push(QaItem {
            question: format!("what color is the {}", shape.word()),
            answers: annotator_answers(truth, distractor, &mut rng),
            true_answer: truth.into(),
        });
    } else if let Some(&color) = unique_color {
        let obj = objects.iter().find(|o| o.color == color).expect("counted");
        let truth = obj.shape.word();
        let distractor = other_than(&Shape::ALL, obj.shape, &mut rng).word();
        items.push(QaItem {
            question: format!("what shape is the {} object", color.word()),
            answers: annotator_answers(truth, distractor, &mut rng),
            true_answer: truth.into(),
        });
    } else {
        items.push(existence_question(scene, &mut rng));
    }

    items.push(existence_question(scene, &mut rng));
    items
}

fn existence_question(scene: &SyntheticScene, rng: &mut ChaCha8Rng) -> QaItem {
    let present: Vec<(Color, Shape)> = scene.objects.iter().map(|o| (o.color, o.shape)).collect();
    let want_present = rng.random_range(0..2) == 0;
    let (color, shape, truth) = if want_present {
        let (c, s) = present[rng.random_range(0..present.len())];
        (c, s, "yes")
    } else {
        loop {
            let c = Color::ALL[rng.random_range(0..8)];
            let s = Shape::ALL[rng.random_range(0..3)];
            if !present.contains(&(c, s)) {
                break (c, s, "no");
            }
        }
    };
    let distractor = if truth == "yes" { "no" } else { "yes" };
    QaItem {
        question: format!("is there a {} {}", color.word(), shape.word()),
        answers: annotator_answers(truth, distractor, rng),
        true_answer: truth.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::{select_regions, SelectionConfig};
    use std::collections::HashMap;

    #[test]
    fn same_seed_reproduces_scene_features_captions() {
        let a = gen_scene(42);
        let b = gen_scene(42);
        assert_eq!(a, b);

        let da = scene_to_detections(&a, 32, 0.02, 7);
        let db = scene_to_detections(&b, 32, 0.02, 7);
        assert_eq!(da.features, db.features);
        assert_eq!(da.class_probs, db.class_probs);

        assert_eq!(scene_to_captions(&a), scene_to_captions(&b));
        assert_eq!(scene_to_qa(&a, 3), scene_to_qa(&b, 3));

        let ga = scene_to_grid_features(&a, GRID_SIDE, 32, 0.02, 9);
        let gb = scene_to_grid_features(&b, GRID_SIDE, 32, 0.02, 9);
        assert_eq!(ga, gb);
    }

    #[test]
    fn single_object_scene_selects_one_region_and_grid_background() {
        // Find a seed with a single object.
        let seed = (0..).find(|&s| gen_scene(s).objects.len() == 1).unwrap();
        let scene = gen_scene(seed);
        let d = scene_to_detections(&scene, 32, 0.0, 1);
        let r = select_regions(&d, &SelectionConfig::default()).unwrap();
        assert_eq!(r.k(), 1, "exactly the primary detection survives");
        assert!(!r.fallback());

        let grid = scene_to_grid_features(&scene, GRID_SIDE, 32, 0.0, 1);
        let obj = &scene.objects[0];
        let mut background_cells = 0;
        for (i, cell) in grid.boxes().unwrap().iter().enumerate() {
            if crate::regions::iou(cell, &obj.bbox) == 0.0
                && (cell.x2.min(obj.bbox.x2) - cell.x1.max(obj.bbox.x1)).max(0.0) == 0.0
            {
                let feat = grid.feature_row(i);
                assert_eq!(feat[BACKGROUND], 1.0, "cell {i} should be pure background");
                assert_eq!(feat[OBJECTNESS], 0.0);
                background_cells += 1;
            }
        }
        assert!(background_cells > 0);
    }

    #[test]
    fn captions_follow_templates() {
        let scene = SyntheticScene {
            canvas: CANVAS,
            objects: vec![
                SceneObject {
                    shape: Shape::Circle,
                    color: Color::Red,
                    size: ObjectSize::Large,
                    bbox: BBox::new(5.0, 40.0, 25.0, 60.0).unwrap(),
                },
                SceneObject {
                    shape: Shape::Square,
                    color: Color::Blue,
                    size: ObjectSize::Small,
                    bbox: BBox::new(70.0, 40.0, 80.0, 50.0).unwrap(),
                },
            ],
        };
        let captions = scene_to_captions(&scene);
        assert_eq!(
            captions,
            vec![
                "a large red circle and a small blue square",
                "there are two objects",
                "a large red circle left of a small blue square",
                "a small blue square right of a large red circle",
                "there is one circle",
            ]
        );
    }

    #[test]
    fn answer_distribution_is_balanced_per_type() {
        let mut per_type: HashMap<QuestionType, HashMap<String, usize>> = HashMap::new();
        for i in 0..500u64 {
            let scene = gen_scene(derive_seed(99, 0, i));
            for item in scene_to_qa(&scene, derive_seed(99, 1, i)) {
                let qtype = classify_question(&item.question);
                *per_type.entry(qtype).or_default().entry(item.true_answer).or_insert(0) += 1;
            }
        }
        for (qtype, counts) in &per_type {
            let total: usize = counts.values().sum();
            for (answer, &count) in counts {
                let frac = count as f64 / total as f64;
                assert!(
                    frac <= 0.60,
                    "{:?} answer {answer:?} dominates: {count}/{total}",
                    qtype
                );
            }
        }
        assert_eq!(per_type.len(), 3, "all three question types occur");
    }

    #[test]
    fn noiseless_features_are_linearly_separable_by_probe() {
        // One-vs-rest ridge probe on clean object features must recover
        // shape, color and size exactly.
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut shapes = Vec::new();
        let mut colors = Vec::new();
        let mut sizes = Vec::new();
        for seed in 0..120u64 {
            let scene = gen_scene(seed);
            for obj in &scene.objects {
                rows.push(
                    clean_object_feature(obj, scene.canvas, 32)
                        .into_iter()
                        .map(|v| v as f64)
                        .collect(),
                );
                shapes.push(obj.shape.index());
                colors.push(obj.color.index());
                sizes.push(if obj.size == ObjectSize::Small { 0 } else { 1 });
            }
        }
        assert_eq!(probe_accuracy(&rows, &shapes, 3), 1.0);
        assert_eq!(probe_accuracy(&rows, &colors, 8), 1.0);
        assert_eq!(probe_accuracy(&rows, &sizes, 2), 1.0);
    }

    /// Least-squares one-vs-rest probe solved by Gaussian elimination.
    fn probe_accuracy(rows: &[Vec<f64>], labels: &[usize], classes: usize) -> f64 {
        let d = rows[0].len();
        let n = rows.len();
        let ridge = 1e-8;
        // gram = X^T X + ridge I
        let mut gram = vec![vec![0.0f64; d]; d];
        for row in rows {
            for i in 0..d {
                for j in 0..d {
                    gram[i][j] += row[i] * row[j];
                }
            }
        }
        for (i, grow) in gram.iter_mut().enumerate() {
            grow[i] += ridge;
        }
        // rhs[c] = X^T y_c for one-hot labels
        let mut rhs = vec![vec![0.0f64; classes]; d];
        for (row, &label) in rows.iter().zip(labels) {
            for i in 0..d {
                rhs[i][label] += row[i];
            }
        }
        let weights = solve_multi(gram, rhs);
        let mut correct = 0;
        for (row, &label) in rows.iter().zip(labels) {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..classes {
                let score: f64 = (0..d).map(|i| row[i] * weights[i][c]).sum();
                if score > best.1 {
                    best = (c, score);
                }
            }
            if best.0 == label {
                correct += 1;
            }
        }
        correct as f64 / n as f64
    }

    /// Solve A X = B for X with partial pivoting; A is square.
    fn solve_multi(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        let n = a.len();
        let m = b[0].len();
        for col in 0..n {
            let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap()).unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            let diag = a[col][col];
            for row in col + 1..n {
                let factor = a[row][col] / diag;
                for k in col..n {
                    a[row][k] -= factor * a[col][k];
                }
                for k in 0..m {
                    b[row][k] -= factor * b[col][k];
                }
            }
        }
        for col in (0..n).rev() {
            for k in 0..m {
                let mut acc = b[col][k];
                for j in col + 1..n {
                    acc -= a[col][j] * b[j][k];
                }
                b[col][k] = acc / a[col][col];
            }
        }
        b
    }
}
