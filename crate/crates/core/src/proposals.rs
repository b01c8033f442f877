//! From heatmaps to face proposals.
//!
//! Face-class peaks map straight to boxes. Part-class peaks (eye, nose,
//! mouth) are turned into face boxes through per-part templates, and those
//! part-inferred boxes are merged cluster by cluster: the highest-scoring
//! remaining box absorbs every remaining box with IoU above `tau_iou`, the
//! cluster's box is the mean of its members' coordinates, and its score is
//! `1 - prod(1 - p_j)`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::network::{HeatmapSet, ScoreGrid, EYE_CLASS, FACE_CLASS, MOUTH_CLASS, NOSE_CLASS, STRIDE, WINDOW};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProposalError {
    #[error("no template for part class {0}")]
    MissingTemplate(usize),
    #[error("heatmap set has {0} classes; the face map is missing")]
    NoFaceMap(usize),
    #[error("template line {line}: {msg}")]
    TemplateSyntax { line: usize, msg: String },
    #[error("invalid template for class {part}: {msg}")]
    InvalidTemplate { part: usize, msg: String },
    #[error("invalid proposal config: {0}")]
    Config(String),
}

/// Axis-aligned box in original-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    /// Class whose heatmap produced the box.
    pub source: usize,
    /// Scale of the pyramid level the box came from.
    pub level_scale: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            score,
            source: FACE_CLASS,
            level_scale: 1.0,
        }
    }

    pub fn with_source(mut self, source: usize) -> Self {
        self.source = source;
        self
    }

    pub fn with_level_scale(mut self, level_scale: f64) -> Self {
        self.level_scale = level_scale;
        self
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clips to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clamp(mut self, width: usize, height: usize) -> Option<Self> {
        let (w, h) = (width as f64, height as f64);
        self.x1 = self.x1.clamp(0.0, w);
        self.x2 = self.x2.clamp(0.0, w);
        self.y1 = self.y1.clamp(0.0, h);
        self.y2 = self.y2.clamp(0.0, h);
        (self.x2 > self.x1 && self.y2 > self.y1).then_some(self)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.4} {:.4} {:.4} {:.4} {:.4} {}",
            self.x1, self.y1, self.x2, self.y2, self.score, self.source
        )
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Score descending, then coordinates ascending.
pub fn canonical_order(a: &BBox, b: &BBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.x1.total_cmp(&b.x1))
        .then_with(|| a.y1.total_cmp(&b.y1))
        .then_with(|| a.x2.total_cmp(&b.x2))
        .then_with(|| a.y2.total_cmp(&b.y2))
        .then_with(|| a.source.cmp(&b.source))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub score: f32,
}

/// Greedy non-maximum suppression on a score grid.
///
/// Cells scoring at least `tau` are visited from the highest score down
/// (ties by row, then column). A cell is kept unless an already kept cell
/// lies within Chebyshev distance `radius`.
pub fn extract_peaks(map: &ScoreGrid, tau: f64, radius: usize) -> Vec<Peak> {
    let (rows, cols) = (map.rows(), map.cols());
    let mut candidates: Vec<Peak> = (0..rows)
        .flat_map(|row| (0..cols).map(move |col| (row, col)))
        .filter_map(|(row, col)| {
            let score = map.get(row, col);
            (score as f64 >= tau).then_some(Peak { row, col, score })
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });

    let mut suppressed = vec![false; rows * cols];
    let mut peaks = Vec::new();
    for p in candidates {
        if suppressed[p.row * cols + p.col] {
            continue;
        }
        for r in p.row.saturating_sub(radius)..=(p.row + radius).min(rows - 1) {
            for c in p.col.saturating_sub(radius)..=(p.col + radius).min(cols - 1) {
                suppressed[r * cols + c] = true;
            }
        }
        peaks.push(p);
    }
    peaks
}

/// Maps a detected part window to a face box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartTemplate {
    pub part: usize,
    /// Part center within the face box, as fractions of the face side.
    pub anchor_x: f64,
    pub anchor_y: f64,
    /// Face side over part window side.
    pub face_ratio: f64,
}

impl PartTemplate {
    pub fn new(part: usize, anchor_x: f64, anchor_y: f64, face_ratio: f64) -> Result<Self, ProposalError> {
        let t = Self {
            part,
            anchor_x,
            anchor_y,
            face_ratio,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ProposalError> {
        let bad = |msg: &str| ProposalError::InvalidTemplate {
            part: self.part,
            msg: msg.to_string(),
        };
        if self.part <= FACE_CLASS {
            return Err(bad("templates apply to part classes (2 and up)"));
        }
        if !(0.0..=1.0).contains(&self.anchor_x) || !(0.0..=1.0).contains(&self.anchor_y) {
            return Err(bad("anchors must lie in [0, 1]"));
        }
        if !(self.face_ratio > 0.0 && self.face_ratio.is_finite()) {
            return Err(bad("face ratio must be positive"));
        }
        Ok(())
    }

    /// Face box implied by a part centered at `(cx, cy)` with window side `window`.
    pub fn face_box(&self, cx: f64, cy: f64, window: f64, score: f64) -> BBox {
        let side = self.face_ratio * window;
        let x1 = cx - self.anchor_x * side;
        let y1 = cy - self.anchor_y * side;
        BBox::new(x1, y1, x1 + side, y1 + side, score).with_source(self.part)
    }
}

/// Two eye templates (left/right are not told apart), one nose, one mouth.
pub fn default_templates() -> Vec<PartTemplate> {
    vec![
        PartTemplate {
            part: EYE_CLASS,
            anchor_x: 0.31,
            anchor_y: 0.40,
            face_ratio: 3.0,
        },
        PartTemplate {
            part: EYE_CLASS,
            anchor_x: 0.69,
            anchor_y: 0.40,
            face_ratio: 3.0,
        },
        PartTemplate {
            part: NOSE_CLASS,
            anchor_x: 0.50,
            anchor_y: 0.62,
            face_ratio: 3.0,
        },
        PartTemplate {
            part: MOUTH_CLASS,
            anchor_x: 0.50,
            anchor_y: 0.80,
            face_ratio: 3.0,
        },
    ]
}

pub fn part_class(name: &str) -> Option<usize> {
    match name {
        "eye" => Some(EYE_CLASS),
        "nose" => Some(NOSE_CLASS),
        "mouth" => Some(MOUTH_CLASS),
        other => other
            .strip_prefix("class")
            .unwrap_or(other)
            .parse()
            .ok()
            .filter(|&c| c > FACE_CLASS),
    }
}

pub fn part_name(class: usize) -> String {
    match class {
        EYE_CLASS => "eye".into(),
        NOSE_CLASS => "nose".into(),
        MOUTH_CLASS => "mouth".into(),
        other => format!("class{other}"),
    }
}

/// Parses `part_name ax ay k` lines. Blank lines and `#` comments are skipped.
pub fn parse_templates(text: &str) -> Result<Vec<PartTemplate>, ProposalError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |msg: String| ProposalError::TemplateSyntax { line, msg };
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let part = part_class(fields[0]).ok_or_else(|| err(format!("unknown part `{}`", fields[0])))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("`{s}` is not a number")));
        let t = PartTemplate {
            part,
            anchor_x: num(fields[1])?,
            anchor_y: num(fields[2])?,
            face_ratio: num(fields[3])?,
        };
        t.validate().map_err(|e| err(e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

pub fn format_templates(templates: &[PartTemplate]) -> String {
    templates
        .iter()
        .map(|t| format!("{} {} {} {}\n", part_name(t.part), t.anchor_x, t.anchor_y, t.face_ratio))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalConfig {
    pub tau_face: f64,
    /// Part threshold used when a class has no override.
    pub tau_part: f64,
    pub tau_part_by_class: BTreeMap<usize, f64>,
    pub tau_iou: f64,
    pub peak_radius: usize,
    pub face_nms_iou: f64,
    pub cross_scale_nms_iou: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            tau_face: 0.6,
            tau_part: 0.7,
            tau_part_by_class: BTreeMap::new(),
            tau_iou: 0.3,
            peak_radius: 2,
            face_nms_iou: 0.5,
            cross_scale_nms_iou: 0.7,
        }
    }
}

impl ProposalConfig {
    pub fn tau_for_part(&self, class: usize) -> f64 {
        self.tau_part_by_class.get(&class).copied().unwrap_or(self.tau_part)
    }

    pub fn validate(&self) -> Result<(), ProposalError> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(ProposalError::Config(format!("{name} must be in (0, 1), got {v}")))
            }
        };
        unit("tau_face", self.tau_face)?;
        unit("tau_part", self.tau_part)?;
        for (&class, &v) in &self.tau_part_by_class {
            unit(&format!("tau_part for class {class}"), v)?;
        }
        unit("tau_iou", self.tau_iou)?;
        unit("face_nms_iou", self.face_nms_iou)?;
        unit("cross_scale_nms_iou", self.cross_scale_nms_iou)?;
        if self.peak_radius < 1 {
            return Err(ProposalError::Config("peak_radius must be at least 1".into()));
        }
        Ok(())
    }
}

/// Greedy NMS: keep the best box, drop boxes overlapping it by more than
/// `iou_thresh`, repeat. Output is in canonical order.
pub fn nms(mut boxes: Vec<BBox>, iou_thresh: f64) -> Vec<BBox> {
    boxes.sort_by(canonical_order);
    let mut kept: Vec<BBox> = Vec::with_capacity(boxes.len());
    for b in boxes {
        if kept.iter().all(|k| iou(k, &b) <= iou_thresh) {
            kept.push(b);
        }
    }
    kept
}

fn window_box(peak: &Peak, level_scale: f64) -> BBox {
    let x1 = (STRIDE * peak.col) as f64;
    let y1 = (STRIDE * peak.row) as f64;
    let w = WINDOW as f64;
    BBox::new(
        x1 / level_scale,
        y1 / level_scale,
        (x1 + w) / level_scale,
        (y1 + w) / level_scale,
        peak.score as f64,
    )
    .with_level_scale(level_scale)
}

/// Boxes from the face heatmap of one level, after per-level NMS.
pub fn face_boxes(heatmaps: &HeatmapSet, cfg: &ProposalConfig) -> Vec<BBox> {
    let Some(map) = heatmaps.class_map(FACE_CLASS) else {
        return Vec::new();
    };
    let boxes = extract_peaks(map, cfg.tau_face, cfg.peak_radius)
        .iter()
        .filter_map(|p| {
            window_box(p, heatmaps.level_scale)
                .with_source(FACE_CLASS)
                .clamp(heatmaps.image_width, heatmaps.image_height)
        })
        .collect();
    nms(boxes, cfg.face_nms_iou)
}

/// Face boxes inferred from every part peak of one level through the templates.
pub fn part_boxes(
    heatmaps: &HeatmapSet,
    templates: &[PartTemplate],
    cfg: &ProposalConfig,
) -> Result<Vec<BBox>, ProposalError> {
    let s = heatmaps.level_scale;
    let window = WINDOW as f64 / s;
    let mut out = Vec::new();
    for class in (FACE_CLASS + 1)..heatmaps.num_classes() {
        let peaks = extract_peaks(&heatmaps.maps[class], cfg.tau_for_part(class), cfg.peak_radius);
        if peaks.is_empty() {
            continue;
        }
        let mut found = false;
        for t in templates.iter().filter(|t| t.part == class) {
            found = true;
            for p in &peaks {
                let cx = (STRIDE * p.col) as f64 + WINDOW as f64 / 2.0;
                let cy = (STRIDE * p.row) as f64 + WINDOW as f64 / 2.0;
                let b = t.face_box(cx / s, cy / s, window, p.score as f64).with_level_scale(s);
                if let Some(b) = b.clamp(heatmaps.image_width, heatmaps.image_height) {
                    out.push(b);
                }
            }
        }
        if !found {
            return Err(ProposalError::MissingTemplate(class));
        }
    }
    Ok(out)
}

/// One merged group of part-inferred boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeCluster {
    /// Seed first, then absorbed boxes in canonical order.
    pub members: Vec<BBox>,
    pub merged: BBox,
}

/// `1 - prod(1 - p_j)`: the chance that at least one of several independent
/// detections is right.
pub fn combine_scores(scores: impl IntoIterator<Item = f64>) -> f64 {
    let (miss, best) = scores
        .into_iter()
        .fold((1.0, 0.0f64), |(acc, best), p| (acc * (1.0 - p), best.max(p)));
    // `1 - (1 - p)` can round one ulp below `p`.
    (1.0 - miss).max(best).min(1.0)
}

/// Iterative IoU-cluster merge of part-inferred boxes.
pub fn merge_part_boxes(boxes: &[BBox], tau_iou: f64) -> Vec<MergeCluster> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(canonical_order);
    let mut taken = vec![false; sorted.len()];
    let mut clusters = Vec::new();

    for i in 0..sorted.len() {
        if taken[i] {
            continue;
        }
        taken[i] = true;
        let seed = sorted[i];
        let mut members = vec![seed];
        for j in (i + 1)..sorted.len() {
            if !taken[j] && iou(&seed, &sorted[j]) > tau_iou {
                taken[j] = true;
                members.push(sorted[j]);
            }
        }
        let n = members.len() as f64;
        let mean = |f: fn(&BBox) -> f64| members.iter().map(f).sum::<f64>() / n;
        let merged = BBox {
            x1: mean(|b| b.x1),
            y1: mean(|b| b.y1),
            x2: mean(|b| b.x2),
            y2: mean(|b| b.y2),
            score: combine_scores(members.iter().map(|b| b.score)),
            source: seed.source,
            level_scale: seed.level_scale,
        };
        clusters.push(MergeCluster { members, merged });
    }
    clusters
}

/// Face proposals from all pyramid levels.
///
/// Face-map boxes and merged part clusters are pooled, then a final
/// cross-scale NMS removes near duplicates. Levels are processed in
/// parallel; the result does not depend on scheduling.
pub fn generate_proposals(
    levels: &[HeatmapSet],
    templates: &[PartTemplate],
    cfg: &ProposalConfig,
) -> Result<Vec<BBox>, ProposalError> {
    for hm in levels {
        if hm.num_classes() <= FACE_CLASS {
            return Err(ProposalError::NoFaceMap(hm.num_classes()));
        }
    }
    let per_level: Vec<(Vec<BBox>, Vec<BBox>)> = levels
        .par_iter()
        .map(|hm| Ok((face_boxes(hm, cfg), part_boxes(hm, templates, cfg)?)))
        .collect::<Result<_, ProposalError>>()?;

    let mut faces = Vec::new();
    let mut parts = Vec::new();
    for (f, p) in per_level {
        faces.extend(f);
        parts.extend(p);
    }
    let merged = merge_part_boxes(&parts, cfg.tau_iou)
        .into_iter()
        .map(|c| c.merged.with_source(FACE_CLASS));
    faces.extend(merged);
    Ok(nms(faces, cfg.cross_scale_nms_iou))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;

    fn heatmaps_with(
        classes: usize,
        rows: usize,
        cols: usize,
        peaks: &[(usize, usize, usize, f32)],
        scale: f64,
    ) -> HeatmapSet {
        let mut probs = Tensor3::zeros(rows, cols, classes);
        for r in 0..rows {
            for c in 0..cols {
                probs.set(r, c, 0, 1.0);
            }
        }
        for &(class, r, c, v) in peaks {
            probs.set(r, c, class, v);
            probs.set(r, c, 0, 1.0 - v);
        }
        HeatmapSet::from_probabilities(&probs, scale, 1000, 1000)
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0, 1.0)), 0.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn peaks_basic() {
        assert!(extract_peaks(&ScoreGrid::zeros(5, 5), 0.5, 1).is_empty());
        let mut g = ScoreGrid::zeros(5, 5);
        g.set(2, 3, 0.9);
        assert_eq!(
            extract_peaks(&g, 0.5, 2),
            vec![Peak {
                row: 2,
                col: 3,
                score: 0.9
            }]
        );
        g.set(2, 1, 0.8);
        g.set(0, 0, 0.7);
        let p = extract_peaks(&g, 0.5, 1);
        assert_eq!(
            p.iter().map(|p| (p.row, p.col)).collect::<Vec<_>>(),
            vec![(2, 3), (2, 1), (0, 0)]
        );
        let p = extract_peaks(&g, 0.5, 2);
        assert_eq!(
            p.iter().map(|p| (p.row, p.col)).collect::<Vec<_>>(),
            vec![(2, 3), (0, 0)]
        );
    }

    #[test]
    fn peak_ties_break_by_row_then_col() {
        let mut g = ScoreGrid::zeros(3, 6);
        g.set(1, 5, 0.9);
        g.set(1, 4, 0.9);
        g.set(0, 5, 0.9);
        let p = extract_peaks(&g, 0.5, 1);
        assert_eq!((p[0].row, p[0].col), (0, 5));
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn face_box_mapping() {
        let cfg = ProposalConfig::default();
        assert!(face_boxes(&heatmaps_with(5, 8, 8, &[], 1.0), &cfg).is_empty());
        let b = face_boxes(&heatmaps_with(5, 8, 8, &[(1, 0, 0, 0.9)], 1.0), &cfg);
        assert_eq!(b[0].coords(), [0.0, 0.0, 12.0, 12.0]);
        assert!((b[0].score - 0.9f32 as f64).abs() < 1e-12);
        let b = face_boxes(&heatmaps_with(5, 8, 8, &[(1, 3, 5, 0.9)], 0.5), &cfg);
        assert_eq!(b[0].coords(), [20.0, 12.0, 44.0, 36.0]);
        assert_eq!(b[0].source, FACE_CLASS);
    }

    #[test]
    fn face_boxes_are_clamped() {
        let mut hm = heatmaps_with(5, 8, 8, &[(1, 7, 7, 0.9)], 1.0);
        hm.image_height = 20;
        hm.image_width = 25;
        let b = face_boxes(&hm, &ProposalConfig::default());
        assert_eq!(b[0].coords(), [14.0, 14.0, 25.0, 20.0]);
    }

    #[test]
    fn nose_template_substitution() {
        // Cell center (60, 60) at scale 1 is cell (27, 27).
        let hm = heatmaps_with(5, 40, 40, &[(3, 27, 27, 0.9)], 1.0);
        let nose = PartTemplate::new(NOSE_CLASS, 0.50, 0.62, 3.0).unwrap();
        let b = part_boxes(&hm, &[nose], &ProposalConfig::default()).unwrap();
        assert_eq!(b.len(), 1);
        assert!((b[0].x1 - 42.0).abs() < 1e-12);
        assert!((b[0].y1 - 37.68).abs() < 1e-12);
        assert!((b[0].width() - 36.0).abs() < 1e-12);
        assert!((b[0].height() - 36.0).abs() < 1e-12);
        assert_eq!(b[0].source, NOSE_CLASS);
    }

    #[test]
    fn eye_peak_gives_two_mirrored_boxes() {
        let hm = heatmaps_with(5, 40, 40, &[(2, 20, 20, 0.95)], 1.0);
        let b = part_boxes(&hm, &default_templates(), &ProposalConfig::default()).unwrap();
        assert_eq!(b.len(), 2);
        let cx = 46.0;
        assert!(((b[0].x1 + b[0].x2) / 2.0 - cx + (b[1].x1 + b[1].x2) / 2.0 - cx).abs() < 1e-9);
        assert_eq!(b[0].y1, b[1].y1);
        assert!(part_boxes(
            &heatmaps_with(5, 40, 40, &[], 1.0),
            &default_templates(),
            &ProposalConfig::default()
        )
        .unwrap()
        .is_empty());
    }

    #[test]
    fn missing_template_is_an_error() {
        let hm = heatmaps_with(6, 10, 10, &[(5, 2, 2, 0.95)], 1.0);
        assert_eq!(
            part_boxes(&hm, &default_templates(), &ProposalConfig::default()),
            Err(ProposalError::MissingTemplate(5))
        );
    }

    #[test]
    fn merge_single_and_pair() {
        let a = BBox::new(1.0, 2.0, 3.0, 4.0, 0.4);
        let c = merge_part_boxes(&[a], 0.3);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].merged.coords(), a.coords());
        assert_eq!(c[0].merged.score, 0.4);

        let b = BBox::new(1.0, 2.0, 3.0, 4.0, 0.5);
        let c = merge_part_boxes(&[b, b], 0.3);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members.len(), 2);
        assert_eq!(c[0].merged.score, 0.75);
    }

    #[test]
    fn merge_takes_mean_of_overlapping() {
        let boxes = [
            BBox::new(0.0, 0.0, 10.0, 10.0, 0.9),
            BBox::new(2.0, 0.0, 12.0, 10.0, 0.5),
            BBox::new(50.0, 50.0, 60.0, 60.0, 0.7),
        ];
        let c = merge_part_boxes(&boxes, 0.3);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].merged.coords(), [1.0, 0.0, 11.0, 10.0]);
        assert!((c[0].merged.score - 0.95).abs() < 1e-15);
        assert_eq!(c[1].merged.coords(), [50.0, 50.0, 60.0, 60.0]);
    }

    #[test]
    fn templates_roundtrip_through_text() {
        let t = default_templates();
        assert_eq!(parse_templates(&format_templates(&t)).unwrap(), t);
        let parsed = parse_templates("# c\n\neye 0.3 0.4 3\nclass6 0.5 0.5 2.5 # extra\n").unwrap();
        assert_eq!(parsed[1].part, 6);
        assert!(matches!(
            parse_templates("eye 0.3 0.4\n"),
            Err(ProposalError::TemplateSyntax { line: 1, .. })
        ));
        assert!(matches!(
            parse_templates("\nchin 0.3 0.4 3\n"),
            Err(ProposalError::TemplateSyntax { line: 2, .. })
        ));
        assert!(parse_templates("nose 1.3 0.4 3\n").is_err());
        assert!(parse_templates("face 0.3 0.4 3\n").is_err());
    }

    #[test]
    fn proposals_empty_and_face_only() {
        let cfg = ProposalConfig::default();
        let t = default_templates();
        assert!(generate_proposals(&[heatmaps_with(5, 8, 8, &[], 1.0)], &t, &cfg)
            .unwrap()
            .is_empty());
        let hm = heatmaps_with(5, 8, 8, &[(1, 2, 3, 0.8)], 0.5);
        assert_eq!(
            generate_proposals(std::slice::from_ref(&hm), &t, &cfg).unwrap(),
            face_boxes(&hm, &cfg)
        );
    }

    #[test]
    fn config_validation() {
        assert!(ProposalConfig::default().validate().is_ok());
        let mut c = ProposalConfig {
            tau_iou: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.tau_iou = 0.3;
        c.peak_radius = 0;
        assert!(c.validate().is_err());
        c.peak_radius = 1;
        c.tau_part_by_class.insert(3, 0.0);
        assert!(c.validate().is_err());
    }
}
