//! Bottom-up hard attention: reduce raw detector output (boxes, per-class
//! probabilities, pooled features) to the selected region feature set fed to
//! the captioning and VQA models, plus the binary region-file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numcore::Tensor;

const MAGIC: &[u8; 4] = b"UDRF";
const VERSION: u8 = 1;
const FLAG_BOXES: u8 = 0b001;
const FLAG_PADDED: u8 = 0b010;
const FLAG_FALLBACK: u8 = 0b100;

#[derive(Debug, thiserror::Error)]
pub enum RegionError {
    #[error("invalid box: ({x1}, {y1}, {x2}, {y2})")]
    InvalidBox { x1: f32, y1: f32, x2: f32, y2: f32 },
    #[error("detection set is inconsistent: {detail}")]
    InvalidDetections { detail: String },
    #[error("empty detection set")]
    EmptyDetections,
    #[error("invalid region set: {detail}")]
    InvalidRegionSet { detail: String },
    #[error("bad magic: expected \"UDRF\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported region file version {found}")]
    BadVersion { found: u8 },
    #[error("corrupt region file: {detail}")]
    Corrupt { detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box in continuous image coordinates; area is
/// (x2 - x1) * (y2 - y1) with no pixel correction.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self, RegionError> {
        if !(x2 > x1 && y2 > y1) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(RegionError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) as f64 * (self.y2 - self.y1) as f64
    }
}

/// Intersection over union of two boxes, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0) as f64;
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0) as f64;
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Raw detector output for one image: n boxes, an n x num_classes matrix of
/// per-class detection probabilities, and n mean-pooled feature rows.
#[derive(Clone, Debug)]
pub struct DetectionSet {
    pub boxes: Vec<BBox>,
    pub num_classes: usize,
    /// Row-major n x num_classes, entries in [0, 1].
    pub class_probs: Vec<f32>,
    pub feature_dim: usize,
    /// Row-major n x feature_dim.
    pub features: Vec<f32>,
}

impl DetectionSet {
    pub fn new(
        boxes: Vec<BBox>,
        num_classes: usize,
        class_probs: Vec<f32>,
        feature_dim: usize,
        features: Vec<f32>,
    ) -> Result<Self, RegionError> {
        let n = boxes.len();
        if class_probs.len() != n * num_classes {
            return Err(RegionError::InvalidDetections {
                detail: format!("{} boxes but {} class probabilities", n, class_probs.len()),
            });
        }
        if features.len() != n * feature_dim {
            return Err(RegionError::InvalidDetections {
                detail: format!("{} boxes but {} feature values", n, features.len()),
            });
        }
        if class_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(RegionError::InvalidDetections {
                detail: "class probabilities outside [0, 1]".into(),
            });
        }
        Ok(DetectionSet { boxes, num_classes, class_probs, feature_dim, features })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    fn class_prob(&self, det: usize, class: usize) -> f32 {
        self.class_probs[det * self.num_classes + class]
    }

    fn feature_row(&self, det: usize) -> &[f32] {
        &self.features[det * self.feature_dim..(det + 1) * self.feature_dim]
    }
}

/// The selected feature set: k rows of feature_dim values with optional
/// geometry. `padded` marks top-k padding by row repetition; `fallback` marks
/// a whole-image mean row substituted for an empty selection.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    feature_dim: usize,
    features: Vec<f32>,
    boxes: Option<Vec<BBox>>,
    padded: bool,
    fallback: bool,
}

impl RegionSet {
    pub fn new(
        feature_dim: usize,
        features: Vec<f32>,
        boxes: Option<Vec<BBox>>,
    ) -> Result<Self, RegionError> {
        Self::with_flags(feature_dim, features, boxes, false, false)
    }

    pub fn with_flags(
        feature_dim: usize,
        features: Vec<f32>,
        boxes: Option<Vec<BBox>>,
        padded: bool,
        fallback: bool,
    ) -> Result<Self, RegionError> {
        if feature_dim == 0 || features.is_empty() || features.len() % feature_dim != 0 {
            return Err(RegionError::InvalidRegionSet {
                detail: format!("{} values do not form rows of {}", features.len(), feature_dim),
            });
        }
        let k = features.len() / feature_dim;
        if let Some(b) = &boxes {
            if b.len() != k {
                return Err(RegionError::InvalidRegionSet {
                    detail: format!("{} boxes for {} feature rows", b.len(), k),
                });
            }
        }
        Ok(RegionSet { feature_dim, features, boxes, padded, fallback })
    }

    pub fn k(&self) -> usize {
        self.features.len() / self.feature_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn feature_row(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn boxes(&self) -> Option<&[BBox]> {
        self.boxes.as_deref()
    }

    pub fn padded(&self) -> bool {
        self.padded
    }

    pub fn fallback(&self) -> bool {
        self.fallback
    }

    /// k x feature_dim tensor of 64-bit copies for the models.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.features.iter().map(|&v| v as f64).collect();
        Tensor::new(vec![self.k(), self.feature_dim], data).expect("valid by construction")
    }
}

/// Greedy non-maximum suppression. Returns kept indices sorted by descending
/// score; score ties break toward the lower index.
pub fn greedy_nms(boxes: &[BBox], scores: &[f32], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &candidate in &order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[candidate]) <= iou_threshold) {
            kept.push(candidate);
        }
    }
    kept
}

/// Knobs for the hard selection stage. Defaults follow the detection pipeline
/// this module models: confidence 0.2, class suppression IoU 0.3, at most 100
/// regions, or a fixed top-36 alternative.
#[derive(Clone, Copy, Debug)]
pub struct SelectionConfig {
    pub conf_threshold: f32,
    pub class_nms_iou: f64,
    pub max_k: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { conf_threshold: 0.2, class_nms_iou: 0.3, max_k: 100 }
    }
}

/// Per-class suppressed probabilities: entries of suppressed (box, class)
/// pairs are zeroed, everything else is kept.
fn surviving_probs(d: &DetectionSet, class_nms_iou: f64) -> Vec<f32> {
    let n = d.len();
    let mut surviving = vec![0.0f32; n * d.num_classes];
    for class in 0..d.num_classes {
        let scores: Vec<f32> = (0..n).map(|i| d.class_prob(i, class)).collect();
        for idx in greedy_nms(&d.boxes, &scores, class_nms_iou) {
            surviving[idx * d.num_classes + class] = scores[idx];
        }
    }
    surviving
}

/// Detections ordered by descending max surviving class probability
/// (ties toward the lower index), with that score attached.
fn ranked_by_max_prob(d: &DetectionSet, surviving: &[f32]) -> Vec<(usize, f32)> {
    let mut ranked: Vec<(usize, f32)> = (0..d.len())
        .map(|i| {
            let row = &surviving[i * d.num_classes..(i + 1) * d.num_classes];
            (i, row.iter().cloned().fold(0.0f32, f32::max))
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });
    ranked
}

fn gather(d: &DetectionSet, indices: &[usize], padded: bool, fallback: bool) -> RegionSet {
    let mut features = Vec::with_capacity(indices.len() * d.feature_dim);
    let mut boxes = Vec::with_capacity(indices.len());
    for &i in indices {
        features.extend_from_slice(d.feature_row(i));
        boxes.push(d.boxes[i]);
    }
    RegionSet::with_flags(d.feature_dim, features, Some(boxes), padded, fallback)
        .expect("rows gathered consistently")
}

/// Threshold selection: per-class greedy NMS, then keep every region whose
/// best surviving class probability exceeds the confidence threshold, capped
/// at `max_k` by descending score. An empty selection falls back to a single
/// whole-image mean feature row with the fallback flag set.
pub fn select_regions(d: &DetectionSet, config: &SelectionConfig) -> Result<RegionSet, RegionError> {
    if d.is_empty() {
        return Err(RegionError::EmptyDetections);
    }
    let surviving = surviving_probs(d, config.class_nms_iou);
    let mut ranked = ranked_by_max_prob(d, &surviving);
    ranked.retain(|&(_, score)| score > config.conf_threshold);
    ranked.truncate(config.max_k);

    if ranked.is_empty() {
        let n = d.len() as f32;
        let mut mean = vec![0.0f32; d.feature_dim];
        for i in 0..d.len() {
            for (m, &v) in mean.iter_mut().zip(d.feature_row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let whole = whole_image_box(&d.boxes);
        return RegionSet::with_flags(d.feature_dim, mean, Some(vec![whole]), false, true);
    }

    let indices: Vec<usize> = ranked.iter().map(|&(i, _)| i).collect();
    Ok(gather(d, &indices, false, false))
}

fn whole_image_box(boxes: &[BBox]) -> BBox {
    let x1 = boxes.iter().map(|b| b.x1).fold(f32::INFINITY, f32::min);
    let y1 = boxes.iter().map(|b| b.y1).fold(f32::INFINITY, f32::min);
    let x2 = boxes.iter().map(|b| b.x2).fold(f32::NEG_INFINITY, f32::max);
    let y2 = boxes.iter().map(|b| b.y2).fold(f32::NEG_INFINITY, f32::max);
    BBox { x1, y1, x2, y2 }
}

/// Fixed-size selection: the k best regions by max surviving class
/// probability after per-class NMS, padded by repeating the last row when
/// fewer than k survive.
pub fn top_k_select(d: &DetectionSet, k: usize) -> Result<RegionSet, RegionError> {
    if d.is_empty() {
        return Err(RegionError::EmptyDetections);
    }
    let surviving = surviving_probs(d, SelectionConfig::default().class_nms_iou);
    let ranked = ranked_by_max_prob(d, &surviving);
    let mut indices: Vec<usize> = ranked.iter().take(k).map(|&(i, _)| i).collect();
    let padded = indices.len() < k;
    while indices.len() < k {
        indices.push(*indices.last().expect("non-empty detections"));
    }
    Ok(gather(d, &indices, padded, false))
}

pub fn write_region_file(path: &Path, r: &RegionSet) -> Result<(), RegionError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    let mut flags = 0u8;
    if r.boxes.is_some() {
        flags |= FLAG_BOXES;
    }
    if r.padded {
        flags |= FLAG_PADDED;
    }
    if r.fallback {
        flags |= FLAG_FALLBACK;
    }
    w.write_all(&[flags])?;
    w.write_all(&(r.k() as u32).to_le_bytes())?;
    w.write_all(&(r.feature_dim as u32).to_le_bytes())?;
    if let Some(boxes) = &r.boxes {
        for b in boxes {
            for v in [b.x1, b.y1, b.x2, b.y2] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    for &v in &r.features {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_region_file(path: &Path) -> Result<RegionSet, RegionError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(RegionError::BadMagic { found: magic.to_vec() });
    }
    let version = read_u8(&mut r)?;
    if version != VERSION {
        return Err(RegionError::BadVersion { found: version });
    }
    let flags = read_u8(&mut r)?;
    let k = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    if k == 0 || dim == 0 {
        return Err(RegionError::Corrupt { detail: format!("k = {k}, dim = {dim}") });
    }
    let boxes = if flags & FLAG_BOXES != 0 {
        let mut boxes = Vec::with_capacity(k);
        for _ in 0..k {
            let vals: [f32; 4] = [read_f32(&mut r)?, read_f32(&mut r)?, read_f32(&mut r)?, read_f32(&mut r)?];
            boxes.push(BBox { x1: vals[0], y1: vals[1], x2: vals[2], y2: vals[3] });
        }
        Some(boxes)
    } else {
        None
    };
    let mut features = Vec::with_capacity(k * dim);
    for _ in 0..k * dim {
        features.push(read_f32(&mut r)?);
    }
    RegionSet::with_flags(dim, features, boxes, flags & FLAG_PADDED != 0, flags & FLAG_FALLBACK != 0)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), RegionError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            RegionError::Corrupt { detail: "file truncated".into() }
        } else {
            RegionError::Io(e)
        }
    })
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, RegionError> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, RegionError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32, RegionError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}
