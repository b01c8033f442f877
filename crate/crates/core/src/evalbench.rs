//! Synthetic scenes, detection metrics and dense-vs-sparse pyramid benchmarks.
//!
//! The synthetic harness skips the network: it plants face and part peaks
//! directly into per-level heatmaps, so the proposal stage can be checked
//! end to end against known face boxes.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::network::{self, HeatmapSet, NetworkWeights, FACE_CLASS, STRIDE, WINDOW};
use crate::pipeline::Detector;
use crate::proposals::{self, canonical_order, iou, BBox, PartTemplate, ProposalConfig};
use crate::pyramid::{self, LevelGeometry, PyramidConfig};
use crate::tensor::Tensor3;

/// A face owns a level when its size there is within this range of 12 px.
pub const LEVEL_MATCH_MIN: f64 = 0.8;
pub const LEVEL_MATCH_MAX: f64 = 1.25;

/// IoU a proposal needs to count as recovering a planted face.
pub const RECOVERY_IOU: f64 = 0.7;
/// Fraction of noisy scenes that must be fully recovered.
pub const RECOVERY_RATE: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("face {index} ({side:.1} px) fits no pyramid level, directly or through its parts")]
    Unrepresentable { index: usize, side: f64 },
    #[error("no template for planted part class {0}")]
    MissingTemplate(usize),
    #[error("level {0}x{1} is smaller than one network window")]
    LevelTooSmall(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedFace {
    pub bbox: BBox,
    /// `(class, x, y)` part centers in original pixels. Empty means
    /// "derive from the templates".
    pub parts: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub width: usize,
    pub height: usize,
    pub faces: Vec<PlantedFace>,
}

impl GroundTruthScene {
    pub fn truth_boxes(&self) -> Vec<BBox> {
        self.faces.iter().map(|f| f.bbox).collect()
    }
}

fn match_ratio(size_at_level: f64, unit: f64) -> f64 {
    size_at_level / unit
}

/// Level whose scale brings `side * scale / unit` closest to 1 inside the
/// matching window.
fn owning_level(side: f64, unit: f64, levels: &[LevelGeometry]) -> Option<usize> {
    levels
        .iter()
        .enumerate()
        .map(|(i, l)| (i, match_ratio(side * l.scale, unit)))
        .filter(|&(_, r)| (LEVEL_MATCH_MIN..=LEVEL_MATCH_MAX).contains(&r))
        .min_by(|a, b| a.1.ln().abs().total_cmp(&b.1.ln().abs()))
        .map(|(i, _)| i)
}

/// Level at which the face itself fills one window.
pub fn face_level(side: f64, levels: &[LevelGeometry]) -> Option<usize> {
    owning_level(side, WINDOW as f64, levels)
}

/// Level at which a part with the given face ratio fills one window.
pub fn part_level(side: f64, face_ratio: f64, levels: &[LevelGeometry]) -> Option<usize> {
    owning_level(side, WINDOW as f64 * face_ratio, levels)
}

/// Grid cell whose window center is nearest `(x, y)` at scale `s`.
fn nearest_cell(x: f64, y: f64, s: f64, rows: usize, cols: usize) -> (usize, usize) {
    let half = WINDOW as f64 / 2.0;
    let idx = |v: f64, n: usize| (((v * s - half) / STRIDE as f64).round().max(0.0) as usize).min(n - 1);
    (idx(y, rows), idx(x, cols))
}

fn part_positions(face: &PlantedFace, templates: &[PartTemplate]) -> Vec<(usize, f64, f64, f64)> {
    let b = &face.bbox;
    let side = b.width();
    if face.parts.is_empty() {
        templates
            .iter()
            .map(|t| (t.part, b.x1 + t.anchor_x * side, b.y1 + t.anchor_y * side, t.face_ratio))
            .collect()
    } else {
        face.parts
            .iter()
            .map(|&(class, x, y)| {
                let k = templates
                    .iter()
                    .find(|t| t.part == class)
                    .map_or(f64::NAN, |t| t.face_ratio);
                (class, x, y, k)
            })
            .collect()
    }
}

/// Builds per-level heatmaps for `scene`.
///
/// Each face gets a face peak at the level where it spans about one window
/// and part peaks at the level where its parts do. Planted peaks score in
/// `[0.8, 0.99]`; every other non-background value is uniform in `[0, noise]`.
pub fn plant_heatmaps(
    scene: &GroundTruthScene,
    levels: &[LevelGeometry],
    templates: &[PartTemplate],
    num_classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<HeatmapSet>, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grids = Vec::with_capacity(levels.len());
    for l in levels {
        let (rows, cols) = network::grid_dims(l.height, l.width).ok_or(SceneError::LevelTooSmall(l.height, l.width))?;
        let mut probs = Tensor3::zeros(rows, cols, num_classes);
        for r in 0..rows {
            for c in 0..cols {
                for ch in 1..num_classes {
                    let v = if noise > 0.0 {
                        rng.random_range(0.0..=noise)
                    } else {
                        0.0
                    };
                    probs.set(r, c, ch, v as f32);
                }
            }
        }
        grids.push((probs, vec![false; rows * cols * num_classes]));
    }

    let mut plant = |level: usize, class: usize, x: f64, y: f64, rng: &mut ChaCha8Rng| {
        if class >= num_classes {
            return;
        }
        let (probs, planted) = &mut grids[level];
        let (r, c) = nearest_cell(x, y, levels[level].scale, probs.height(), probs.width());
        let v: f32 = rng.random_range(0.8..0.99);
        probs.set(r, c, class, v);
        planted[(r * probs.width() + c) * num_classes + class] = true;
    };

    for (index, face) in scene.faces.iter().enumerate() {
        let b = &face.bbox;
        let side = b.width().max(b.height());
        let mut represented = false;
        if let Some(level) = face_level(side, levels) {
            plant(level, FACE_CLASS, (b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0, &mut rng);
            represented = true;
        }
        for (class, x, y, k) in part_positions(face, templates) {
            if k.is_nan() {
                return Err(SceneError::MissingTemplate(class));
            }
            if let Some(level) = part_level(side, k, levels) {
                plant(level, class, x, y, &mut rng);
                represented = true;
            }
        }
        if !represented {
            return Err(SceneError::Unrepresentable { index, side });
        }
    }

    Ok(grids
        .into_iter()
        .zip(levels)
        .map(|((mut probs, planted), l)| {
            let n = num_classes;
            for r in 0..probs.height() {
                for c in 0..probs.width() {
                    let base = (r * probs.width() + c) * n;
                    let (mut fixed, mut free) = (0.0f64, 0.0f64);
                    for ch in 1..n {
                        let v = probs.get(r, c, ch) as f64;
                        if planted[base + ch] {
                            fixed += v;
                        } else {
                            free += v;
                        }
                    }
                    // Keep the planted values; shrink the noise so the cell sums to 1.
                    let room = (1.0 - fixed).max(0.0);
                    let shrink = if free > room { room / free } else { 1.0 };
                    let mut sum = 0.0;
                    for ch in 1..n {
                        let mut v = probs.get(r, c, ch) as f64;
                        if !planted[base + ch] {
                            v *= shrink;
                        }
                        probs.set(r, c, ch, v as f32);
                        sum += v;
                    }
                    probs.set(r, c, 0, (1.0 - sum).max(0.0) as f32);
                }
            }
            HeatmapSet::from_probabilities(&probs, l.scale, scene.height, scene.width)
        })
        .collect())
}

/// Face-size spread around the level-matched size used by [`random_scene`].
pub const SCENE_SIZE_JITTER: (f64, f64) = (0.92, 1.08);

/// Draws a scene of non-overlapping square faces, each sized to be
/// recoverable at one level: either the face fills a window or, with the
/// template face ratio `k`, its parts do.
pub fn random_scene(
    rng: &mut impl Rng,
    width: usize,
    height: usize,
    levels: &[LevelGeometry],
    face_ratio: f64,
    max_faces: usize,
) -> GroundTruthScene {
    let limit = width.min(height) as f64;
    let mut options = Vec::new();
    for l in levels {
        for unit in [WINDOW as f64, WINDOW as f64 * face_ratio] {
            let nominal = unit / l.scale;
            if nominal * SCENE_SIZE_JITTER.1 + 4.0 <= limit {
                options.push(nominal);
            }
        }
    }
    let mut faces: Vec<PlantedFace> = Vec::new();
    if options.is_empty() {
        return GroundTruthScene { width, height, faces };
    }
    let want = rng.random_range(1..=max_faces.max(1));
    let mut attempts = 0;
    while faces.len() < want && attempts < 200 {
        attempts += 1;
        let nominal = options[rng.random_range(0..options.len())];
        let side = nominal * rng.random_range(SCENE_SIZE_JITTER.0..=SCENE_SIZE_JITTER.1);
        let x1 = rng.random_range(2.0..=(width as f64 - side - 2.0));
        let y1 = rng.random_range(2.0..=(height as f64 - side - 2.0));
        let b = BBox::new(x1, y1, x1 + side, y1 + side, 1.0);
        // Keep a gap of half the larger side between faces.
        let clear = faces.iter().all(|f| {
            let gap = 0.5 * side.max(f.bbox.width());
            b.x1 > f.bbox.x2 + gap || f.bbox.x1 > b.x2 + gap || b.y1 > f.bbox.y2 + gap || f.bbox.y1 > b.y2 + gap
        });
        if clear {
            faces.push(PlantedFace {
                bbox: b,
                parts: Vec::new(),
            });
        }
    }
    GroundTruthScene { width, height, faces }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    /// Median wall time of one pass over the image set.
    pub median_run_s: f64,
    pub mean_image_s: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct EvalReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub recall: f64,
    pub precision: f64,
    pub iou_thresh: f64,
    pub images: usize,
    pub levels: usize,
    pub workload_cells: u64,
    pub timing: Option<Timing>,
}

impl EvalReport {
    fn from_counts(tp: usize, fp: usize, fn_: usize, iou_thresh: f64) -> Self {
        let truth = tp + fn_;
        let dets = tp + fp;
        Self {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            recall: if truth == 0 { 1.0 } else { tp as f64 / truth as f64 },
            precision: if dets == 0 { 1.0 } else { tp as f64 / dets as f64 },
            iou_thresh,
            images: 1,
            ..Default::default()
        }
    }

    /// Pools counts from another image or image set.
    pub fn absorb(&mut self, other: &EvalReport) {
        let images = self.images + other.images;
        let levels = self.levels + other.levels;
        let workload = self.workload_cells + other.workload_cells;
        *self = Self::from_counts(
            self.true_positives + other.true_positives,
            self.false_positives + other.false_positives,
            self.false_negatives + other.false_negatives,
            if self.images == 0 {
                other.iou_thresh
            } else {
                self.iou_thresh
            },
        );
        self.images = images;
        self.levels = levels;
        self.workload_cells = workload;
    }

    pub fn empty(iou_thresh: f64) -> Self {
        Self {
            images: 0,
            ..Self::from_counts(0, 0, 0, iou_thresh)
        }
    }
}

/// Greedy matching in descending score order; each truth box is used at
/// most once, by the unmatched truth with the highest IoU >= `iou_thresh`.
pub fn evaluate(detections: &[BBox], truth: &[BBox], iou_thresh: f64) -> EvalReport {
    let mut dets = detections.to_vec();
    dets.sort_by(canonical_order);
    let mut used = vec![false; truth.len()];
    let mut tp = 0;
    for d in &dets {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, t)| (i, iou(d, t)))
            .filter(|&(_, v)| v >= iou_thresh)
            // Ties go to the earlier truth box after sorting by coordinates.
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| coord_cmp(&truth[b.0], &truth[a.0])));
        if let Some((i, _)) = best {
            used[i] = true;
            tp += 1;
        }
    }
    EvalReport::from_counts(tp, dets.len() - tp, truth.len() - tp, iou_thresh)
}

fn coord_cmp(a: &BBox, b: &BBox) -> std::cmp::Ordering {
    a.coords()
        .iter()
        .zip(b.coords().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Result of the synthetic recovery run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthReport {
    pub scenes: usize,
    pub faces: usize,
    pub recovered_scenes: usize,
    pub recovered_faces: usize,
    pub rejected_scenes: usize,
    pub worst_iou: f64,
    pub recovery_rate: f64,
    pub required_rate: f64,
    pub noise: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub scenes: usize,
    pub seed: u64,
    pub noise: f64,
    pub width: usize,
    pub height: usize,
    pub max_faces: usize,
    pub pyramid: PyramidConfig,
    pub proposals: ProposalConfig,
    pub templates: Vec<PartTemplate>,
    pub num_classes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            seed: 7,
            noise: 0.3,
            width: 320,
            height: 240,
            max_faces: 4,
            pyramid: PyramidConfig::new(0.25, 12.0, true).expect("valid"),
            proposals: ProposalConfig::default(),
            templates: proposals::default_templates(),
            num_classes: network::DEFAULT_NUM_CLASSES,
        }
    }
}

/// Best IoU of any proposal against each truth box.
pub fn best_ious(proposals: &[BBox], truth: &[BBox]) -> Vec<f64> {
    truth
        .iter()
        .map(|t| proposals.iter().map(|p| iou(p, t)).fold(0.0, f64::max))
        .collect()
}

/// Plants `cfg.scenes` random scenes and checks that every planted face is
/// recovered with IoU >= 0.7. Noisy runs must fully recover 95% of scenes,
/// noise-free runs all of them.
pub fn run_synthetic(cfg: &SynthConfig) -> Result<SynthReport, proposals::ProposalError> {
    let levels = pyramid::pyramid_geometry(cfg.height, cfg.width, &cfg.pyramid)
        .map_err(|e| proposals::ProposalError::Config(e.to_string()))?;
    let k = cfg.templates.first().map_or(3.0, |t| t.face_ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut faces, mut recovered_faces, mut recovered_scenes, mut rejected) = (0, 0, 0, 0);
    let mut worst = 1.0f64;
    for _ in 0..cfg.scenes {
        let scene = random_scene(&mut rng, cfg.width, cfg.height, &levels, k, cfg.max_faces);
        let noise_seed: u64 = rng.random();
        let maps = match plant_heatmaps(&scene, &levels, &cfg.templates, cfg.num_classes, cfg.noise, noise_seed) {
            Ok(m) => m,
            Err(_) => {
                rejected += 1;
                continue;
            }
        };
        let props = proposals::generate_proposals(&maps, &cfg.templates, &cfg.proposals)?;
        let ious = best_ious(&props, &scene.truth_boxes());
        faces += ious.len();
        let ok = ious.iter().filter(|&&v| v >= RECOVERY_IOU).count();
        recovered_faces += ok;
        if ok == ious.len() {
            recovered_scenes += 1;
        }
        worst = ious.iter().copied().fold(worst, f64::min);
    }
    let evaluated = cfg.scenes - rejected;
    let rate = if evaluated == 0 {
        0.0
    } else {
        recovered_scenes as f64 / evaluated as f64
    };
    let required = if cfg.noise == 0.0 { 1.0 } else { RECOVERY_RATE };
    Ok(SynthReport {
        scenes: cfg.scenes,
        faces,
        recovered_scenes,
        recovered_faces,
        rejected_scenes: rejected,
        worst_iou: if faces == 0 { f64::NAN } else { worst },
        recovery_rate: rate,
        required_rate: required,
        noise: cfg.noise,
        passed: evaluated > 0 && rate >= required,
    })
}

/// An image for benchmarking, with optional annotations.
#[derive(Debug, Clone)]
pub struct BenchImage {
    pub name: String,
    pub image: Tensor3,
    pub truth: Option<Vec<BBox>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub dense: EvalReport,
    pub sparse: EvalReport,
    /// Sparse workload over dense workload; `None` for an empty set.
    pub workload_ratio: Option<f64>,
    pub skipped: Vec<String>,
    /// True when recall/precision were computed from annotations.
    pub annotated: bool,
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort();
    xs[xs.len() / 2]
}

/// Runs the full pipeline under a dense and a sparse pyramid.
///
/// Each configuration gets one warm-up pass over the set, then `runs`
/// timed passes; the median pass is reported. Configurations run one after
/// the other with level parallelism off so timings are comparable.
#[allow(clippy::too_many_arguments)]
pub fn bench_pyramids(
    images: &[BenchImage],
    weights: &NetworkWeights,
    templates: &[PartTemplate],
    dense: &PyramidConfig,
    sparse: &PyramidConfig,
    proposal_cfg: &ProposalConfig,
    runs: usize,
    iou_thresh: f64,
) -> BenchReport {
    let detector = Detector::new(weights, templates, proposal_cfg).sequential();
    let mut skipped = Vec::new();
    let usable: Vec<&BenchImage> = images
        .iter()
        .filter(|img| {
            let ok = pyramid::pyramid_geometry(img.image.height(), img.image.width(), dense).is_ok()
                && pyramid::pyramid_geometry(img.image.height(), img.image.width(), sparse).is_ok();
            if !ok {
                skipped.push(img.name.clone());
            }
            ok
        })
        .collect();
    let annotated = !usable.is_empty() && usable.iter().all(|i| i.truth.is_some());

    let run_config = |cfg: &PyramidConfig, skipped: &mut Vec<String>| -> EvalReport {
        let mut report = EvalReport::empty(iou_thresh);
        if usable.is_empty() {
            return report;
        }
        let mut failed = vec![false; usable.len()];
        // Warm-up pass also produces the detections that get scored.
        for (i, img) in usable.iter().enumerate() {
            match detector.detect(&img.image, cfg) {
                Ok(det) => {
                    let mut r = match (&img.truth, annotated) {
                        (Some(t), true) => evaluate(&det.proposals, t, iou_thresh),
                        _ => EvalReport::from_counts(0, det.proposals.len(), 0, iou_thresh),
                    };
                    r.levels = det.levels.len();
                    r.workload_cells = det.workload();
                    report.absorb(&r);
                }
                Err(e) => {
                    failed[i] = true;
                    skipped.push(format!("{}: {e}", img.name));
                }
            }
        }
        let mut times = Vec::with_capacity(runs.max(1));
        for _ in 0..runs.max(1) {
            let start = Instant::now();
            for (img, _) in usable.iter().zip(&failed).filter(|(_, f)| !**f) {
                let _ = detector.detect(&img.image, cfg);
            }
            times.push(start.elapsed());
        }
        let med = median(times).as_secs_f64();
        report.timing = Some(Timing {
            median_run_s: med,
            mean_image_s: med / report.images.max(1) as f64,
            runs: runs.max(1),
        });
        if !annotated {
            report.recall = f64::NAN;
            report.precision = f64::NAN;
        }
        report
    };

    let dense_report = run_config(dense, &mut skipped);
    let sparse_report = run_config(sparse, &mut skipped);
    let workload_ratio = (dense_report.workload_cells > 0)
        .then(|| sparse_report.workload_cells as f64 / dense_report.workload_cells as f64);
    BenchReport {
        dense: dense_report,
        sparse: sparse_report,
        workload_ratio,
        skipped,
        annotated,
    }
}

/// Pyramid levels and workload of both configurations for one image size.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadComparison {
    pub dense: Vec<LevelGeometry>,
    pub sparse: Vec<LevelGeometry>,
    pub dense_cells: u64,
    pub sparse_cells: u64,
    pub ratio: f64,
}

pub fn compare_workload(
    height: usize,
    width: usize,
    dense: &PyramidConfig,
    sparse: &PyramidConfig,
) -> Result<WorkloadComparison, pyramid::PyramidError> {
    let d = pyramid::pyramid_geometry(height, width, dense)?;
    let s = pyramid::pyramid_geometry(height, width, sparse)?;
    let (dc, sc) = (pyramid::pyramid_workload(&d), pyramid::pyramid_workload(&s));
    Ok(WorkloadComparison {
        dense: d,
        sparse: s,
        dense_cells: dc,
        sparse_cells: sc,
        ratio: sc as f64 / dc as f64,
    })
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("annotation line {line}: {msg}")]
pub struct AnnotationError {
    pub line: usize,
    pub msg: String,
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub path: String,
    pub boxes: Vec<BBox>,
}

/// Parses `<relative-path> <n>` headers, each followed by `n` lines of
/// `x1 y1 x2 y2`. Blank lines are ignored.
pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>, AnnotationError> {
    let mut out = Vec::new();
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    while let Some((line, header)) = lines.next() {
        let err = |line: usize, msg: String| AnnotationError { line, msg };
        let (path, count) = header
            .rsplit_once(char::is_whitespace)
            .ok_or_else(|| err(line, "expected `<path> <count>`".into()))?;
        let count: usize = count
            .parse()
            .map_err(|_| err(line, format!("`{count}` is not a box count")))?;
        let mut boxes = Vec::with_capacity(count);
        for _ in 0..count {
            let (line, text) = lines
                .next()
                .ok_or_else(|| err(line, format!("{} expects {count} boxes, file ended early", path.trim())))?;
            let v: Vec<f64> = text
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| err(line, format!("`{t}` is not a number")))
                })
                .collect::<Result<_, _>>()?;
            if v.len() != 4 {
                return Err(err(line, format!("expected `x1 y1 x2 y2`, found {} fields", v.len())));
            }
            if !(v[2] > v[0] && v[3] > v[1]) || v.iter().any(|x| !x.is_finite()) {
                return Err(err(line, "box must satisfy x1 < x2 and y1 < y2".into()));
            }
            boxes.push(BBox::new(v[0], v[1], v[2], v[3], 1.0));
        }
        out.push(Annotation {
            path: path.trim().to_string(),
            boxes,
        });
    }
    Ok(out)
}
