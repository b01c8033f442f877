use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use super::config::RunConfig;
use super::image::load_image;
use super::{BenchArgs, CliError, DetectArgs, EvalArgs, SynthArgs, WeightsArgs};
use crate::evalbench::{self, Annotation, BenchImage, EvalReport, SynthConfig};
use crate::network::{self, NetworkWeights, WeightsError};
use crate::pipeline::Detector;
use crate::proposals::BBox;
use crate::pyramid::{LevelGeometry, PyramidConfig};

const MIN_RUNS: usize = 5;

fn io_err(what: impl std::fmt::Display, e: io::Error) -> CliError {
    CliError::Io(format!("{what}: {e}"))
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| io_err("stdout", e))
}

fn load_weights(rc: &RunConfig) -> Result<NetworkWeights, CliError> {
    let path = rc
        .weights
        .as_ref()
        .ok_or_else(|| CliError::Usage("missing --weights".into()))?;
    network::load_weights(path).map_err(|e| match e {
        WeightsError::Io(io) if io.kind() != io::ErrorKind::NotFound => io_err(path.display(), io),
        other => CliError::Usage(format!("weights {}: {other}", path.display())),
    })
}

/// One line of a detection file.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub path: String,
    pub bbox: BBox,
}

pub fn format_detection_line(path: &str, b: &BBox) -> String {
    format!("{path} {b}\n")
}

/// Reads detection lines; `#` lines and blank lines are skipped.
pub fn parse_detections(text: &str) -> Result<Vec<DetectionRecord>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.rsplitn(7, char::is_whitespace).collect();
        if fields.len() != 7 {
            return Err(CliError::Usage(format!("detections line {line_no}: expected 7 fields")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| CliError::Usage(format!("detections line {line_no}: `{s}` is not a number")))
        };
        let source = fields[0]
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("detections line {line_no}: bad source `{}`", fields[0])))?;
        let bbox = BBox::new(
            num(fields[5])?,
            num(fields[4])?,
            num(fields[3])?,
            num(fields[2])?,
            num(fields[1])?,
        )
        .with_source(source);
        out.push(DetectionRecord {
            path: fields[6].trim().to_string(),
            bbox,
        });
    }
    Ok(out)
}

pub fn detect(rc: &RunConfig, args: &DetectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let weights = load_weights(rc)?;
    let templates = rc.load_templates()?;
    let detector = Detector::new(&weights, &templates, &rc.proposals).sequential();
    let results: Vec<Result<Vec<BBox>, String>> = args
        .images
        .par_iter()
        .map(|p| {
            let img = load_image(p).map_err(|e| e.to_string())?;
            detector
                .detect(&img, &rc.pyramid)
                .map(|d| d.proposals)
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut text = String::new();
    let (mut failed, mut total) = (0, 0);
    for (path, res) in args.images.iter().zip(results) {
        let name = path.display().to_string();
        match res {
            Ok(boxes) => {
                total += boxes.len();
                for b in &boxes {
                    text.push_str(&format_detection_line(&name, b));
                }
            }
            Err(e) => {
                failed += 1;
                eprintln!("warning: skipping {name}: {e}");
            }
        }
    }
    let _ = writeln!(
        text,
        "# images {} unreadable {} proposals {}",
        args.images.len(),
        failed,
        total
    );
    match &rc.output {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p.display(), e)),
        None => write_out(out, &text),
    }
}

fn eval_record(kind: &str, path: &str, r: &EvalReport) -> String {
    let mut v = json!({
        "kind": kind,
        "path": path,
        "true_positives": r.true_positives,
        "false_positives": r.false_positives,
        "false_negatives": r.false_negatives,
        "recall": r.recall,
        "precision": r.precision,
        "iou_thresh": r.iou_thresh,
    });
    if kind == "total" {
        v["images"] = json!(r.images);
    }
    v.to_string()
}

fn path_matches(detection_path: &str, annotated: &str) -> bool {
    detection_path == annotated || Path::new(detection_path).ends_with(annotated)
}

fn emit_report(rc: &RunConfig, out: &mut dyn Write, table: &str, records: &[String]) -> Result<(), CliError> {
    let mut lines = String::new();
    for r in records {
        lines.push_str(r);
        lines.push('\n');
    }
    match &rc.output {
        Some(p) => {
            fs::write(p, lines).map_err(|e| io_err(p.display(), e))?;
            write_out(out, table)
        }
        None => write_out(out, &format!("{table}{lines}")),
    }
}

fn read_annotations(path: &Path) -> Result<Vec<Annotation>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path.display(), e))?;
    evalbench::parse_annotations(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn eval(rc: &RunConfig, args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ann_path = rc
        .annotations
        .as_ref()
        .ok_or_else(|| CliError::Usage("eval needs --annotations".into()))?;
    let annotations = read_annotations(ann_path)?;
    let det_text = fs::read_to_string(&args.detections).map_err(|e| io_err(args.detections.display(), e))?;
    let detections = parse_detections(&det_text)?;

    let mut by_path: BTreeMap<&str, Vec<BBox>> = BTreeMap::new();
    for d in &detections {
        by_path.entry(d.path.as_str()).or_default().push(d.bbox);
    }
    let mut used: BTreeMap<&str, bool> = by_path.keys().map(|k| (*k, false)).collect();

    let mut rows = Vec::new();
    for ann in &annotations {
        let mut dets = Vec::new();
        for (p, boxes) in &by_path {
            if path_matches(p, &ann.path) {
                dets.extend_from_slice(boxes);
                used.insert(p, true);
            }
        }
        rows.push((ann.path.clone(), evalbench::evaluate(&dets, &ann.boxes, rc.iou_thresh)));
    }
    for (p, boxes) in &by_path {
        if !used[p] {
            rows.push((p.to_string(), evalbench::evaluate(boxes, &[], rc.iou_thresh)));
        }
    }

    let mut total = EvalReport::empty(rc.iou_thresh);
    let mut table = format!(
        "{:<40} {:>5} {:>5} {:>5} {:>8} {:>9}\n",
        "image", "tp", "fp", "fn", "recall", "precision"
    );
    let mut records = Vec::new();
    for (path, r) in &rows {
        total.absorb(r);
        let _ = writeln!(
            table,
            "{:<40} {:>5} {:>5} {:>5} {:>8.4} {:>9.4}",
            path, r.true_positives, r.false_positives, r.false_negatives, r.recall, r.precision
        );
        records.push(eval_record("image", path, r));
    }
    let _ = writeln!(
        table,
        "{:<40} {:>5} {:>5} {:>5} {:>8.4} {:>9.4}",
        "TOTAL", total.true_positives, total.false_positives, total.false_negatives, total.recall, total.precision
    );
    let _ = writeln!(
        table,
        "recall {:.4} precision {:.4} at IoU {}",
        total.recall, total.precision, rc.iou_thresh
    );
    records.push(eval_record("total", "", &total));
    emit_report(rc, out, &table, &records)
}

fn parse_geometry(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--geometry expects WIDTHxHEIGHT, got `{s}`"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        w.trim().parse().map_err(|_| bad())?,
        h.trim().parse().map_err(|_| bad())?,
    ))
}

fn level_list(levels: &[LevelGeometry]) -> String {
    levels
        .iter()
        .map(|l| format!("{:.6}:{}x{}", l.scale, l.width, l.height))
        .collect::<Vec<_>>()
        .join(" ")
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.prec$}"),
        _ => "-".into(),
    }
}

pub fn bench(rc: &RunConfig, args: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let dense_sf = args.dense_scale_factor.unwrap_or(rc.dense_scale_factor);
    let dense =
        PyramidConfig::new(dense_sf, rc.pyramid.min_face, false).map_err(|e| CliError::Usage(format!("dense {e}")))?;
    let sparse = rc.pyramid;
    let describe = |c: &PyramidConfig| {
        format!(
            "f={} min_face={} extra_layer={}",
            c.scale_factor, c.min_face, c.extra_layer
        )
    };

    if let Some(g) = &args.geometry {
        let (w, h) = parse_geometry(g)?;
        let cmp = evalbench::compare_workload(h, w, &dense, &sparse).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut table = String::new();
        let _ = writeln!(table, "image {w}x{h}");
        let _ = writeln!(
            table,
            "dense  {}: {} levels, {} cells",
            describe(&dense),
            cmp.dense.len(),
            cmp.dense_cells
        );
        let _ = writeln!(table, "  levels {}", level_list(&cmp.dense));
        let _ = writeln!(
            table,
            "sparse {}: {} levels, {} cells",
            describe(&sparse),
            cmp.sparse.len(),
            cmp.sparse_cells
        );
        let _ = writeln!(table, "  levels {}", level_list(&cmp.sparse));
        let _ = writeln!(table, "workload ratio (sparse/dense): {:.6}", cmp.ratio);
        let record = json!({
            "kind": "workload",
            "width": w,
            "height": h,
            "dense_scales": cmp.dense.iter().map(|l| l.scale).collect::<Vec<_>>(),
            "sparse_scales": cmp.sparse.iter().map(|l| l.scale).collect::<Vec<_>>(),
            "dense_cells": cmp.dense_cells,
            "sparse_cells": cmp.sparse_cells,
            "workload_ratio": cmp.ratio,
        });
        return emit_report(rc, out, &table, &[record.to_string()]);
    }

    let runs = args.runs.unwrap_or(rc.runs);
    if runs < MIN_RUNS {
        return Err(CliError::Usage(format!("--runs must be at least {MIN_RUNS}")));
    }
    let weights = load_weights(rc)?;
    let templates = rc.load_templates()?;
    let annotations = match &rc.annotations {
        Some(p) => Some(read_annotations(p)?),
        None => None,
    };

    let mut unreadable = Vec::new();
    let mut images = Vec::new();
    for path in &args.images {
        let name = path.display().to_string();
        match load_image(path) {
            Ok(image) => {
                let truth = annotations.as_ref().map(|anns| {
                    anns.iter()
                        .filter(|a| path_matches(&name, &a.path))
                        .flat_map(|a| a.boxes.iter().copied())
                        .collect()
                });
                images.push(BenchImage { name, image, truth });
            }
            Err(e) => {
                eprintln!("warning: skipping {name}: {e}");
                unreadable.push(name);
            }
        }
    }

    let report = evalbench::bench_pyramids(
        &images,
        &weights,
        &templates,
        &dense,
        &sparse,
        &rc.proposals,
        runs,
        rc.iou_thresh,
    );
    for s in &report.skipped {
        eprintln!("warning: skipped {s}");
    }

    let mut table = format!(
        "{:<7} {:<40} {:>6} {:>7} {:>12} {:>12} {:>12} {:>8} {:>9}\n",
        "config", "pyramid", "images", "levels", "workload", "median_s", "per_image_s", "recall", "precision"
    );
    let mut records = Vec::new();
    for (label, cfg, r) in [("dense", &dense, &report.dense), ("sparse", &sparse, &report.sparse)] {
        let t = r.timing;
        let _ = writeln!(
            table,
            "{:<7} {:<40} {:>6} {:>7} {:>12} {:>12} {:>12} {:>8} {:>9}",
            label,
            describe(cfg),
            r.images,
            r.levels,
            r.workload_cells,
            fmt_opt(t.map(|t| t.median_run_s), 6),
            fmt_opt(t.map(|t| t.mean_image_s), 6),
            fmt_opt(Some(r.recall), 4),
            fmt_opt(Some(r.precision), 4),
        );
        records.push(
            json!({
                "kind": "bench",
                "config": label,
                "scale_factor": cfg.scale_factor,
                "min_face": cfg.min_face,
                "extra_layer": cfg.extra_layer,
                "images": r.images,
                "levels": r.levels,
                "workload_cells": r.workload_cells,
                "median_run_s": t.map(|t| t.median_run_s),
                "mean_image_s": t.map(|t| t.mean_image_s),
                "runs": t.map(|t| t.runs),
                "recall": r.recall.is_finite().then_some(r.recall),
                "precision": r.precision.is_finite().then_some(r.precision),
            })
            .to_string(),
        );
    }
    let _ = writeln!(
        table,
        "workload ratio (sparse/dense): {}",
        fmt_opt(report.workload_ratio, 6)
    );
    let _ = writeln!(
        table,
        "skipped images: {} (unreadable {}, unusable {})",
        unreadable.len() + report.skipped.len(),
        unreadable.len(),
        report.skipped.len()
    );
    let _ = writeln!(
        table,
        "timings are wall-clock measurements (median of {runs} runs after 1 warm-up)"
    );
    records.push(
        json!({
            "kind": "ratio",
            "workload_ratio": report.workload_ratio,
            "skipped": unreadable.len() + report.skipped.len(),
        })
        .to_string(),
    );
    emit_report(rc, out, &table, &records)
}

pub fn synth(rc: &RunConfig, args: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let noise = args.noise.unwrap_or(rc.noise);
    if !(0.0..1.0).contains(&noise) {
        return Err(CliError::Usage(format!("--noise must be in [0, 1), got {noise}")));
    }
    let cfg = SynthConfig {
        scenes: args.scenes.unwrap_or(rc.scenes),
        seed: rc.seed,
        noise,
        pyramid: rc.pyramid,
        proposals: rc.proposals.clone(),
        templates: rc.load_templates()?,
        ..SynthConfig::default()
    };
    let report = evalbench::run_synthetic(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let verdict = if report.passed { "PASS" } else { "FAIL" };
    let table = format!(
        "scenes {} faces {} rejected {}\n\
         recovered faces {}/{} scenes {}/{} (rate {:.4}, required {:.2})\n\
         worst best-IoU {}\n\
         {verdict}: IoU >= {} recovery\n",
        report.scenes,
        report.faces,
        report.rejected_scenes,
        report.recovered_faces,
        report.faces,
        report.recovered_scenes,
        report.scenes - report.rejected_scenes,
        report.recovery_rate,
        report.required_rate,
        fmt_opt(Some(report.worst_iou), 4),
        evalbench::RECOVERY_IOU,
    );
    let mut record = serde_json::to_value(&report).expect("serializable");
    record["kind"] = json!("synth");
    record["seed"] = json!(cfg.seed);
    emit_report(rc, out, &table, &[record.to_string()])?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Criterion(format!(
            "recovery rate {:.4} below required {:.2}",
            report.recovery_rate, report.required_rate
        )))
    }
}

pub fn weights(rc: &RunConfig, args: &WeightsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let path: &PathBuf = rc
        .output
        .as_ref()
        .ok_or_else(|| CliError::Usage("weights needs --output".into()))?;
    let w = NetworkWeights::random(rc.seed, args.classes).map_err(|e| CliError::Usage(e.to_string()))?;
    network::save_weights(&w, path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let bytes = w.to_bytes().len();
    write_out(
        out,
        &format!(
            "wrote {}: {} classes, {} parameters, {} bytes\n",
            path.display(),
            w.num_classes(),
            w.parameter_count(),
            bytes
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_lines_roundtrip() {
        let b = BBox::new(1.23456, 2.0, 30.5, 40.25, 0.87654).with_source(1);
        let line = format_detection_line("dir/my img.ppm", &b);
        assert_eq!(line, "dir/my img.ppm 1.2346 2.0000 30.5000 40.2500 0.8765 1\n");
        let parsed = parse_detections(&format!("# header\n{line}\n")).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].path, "dir/my img.ppm");
        assert_eq!(parsed[0].bbox.coords(), [1.2346, 2.0, 30.5, 40.25]);
        assert!(parse_detections("a.ppm 1 2 3\n").is_err());
    }

    #[test]
    fn geometry_flag() {
        assert_eq!(parse_geometry("1280x720").unwrap(), (1280, 720));
        assert!(parse_geometry("1280").is_err());
    }

    #[test]
    fn annotated_paths_match_suffix() {
        assert!(path_matches("data/imgs/a.ppm", "imgs/a.ppm"));
        assert!(path_matches("a.ppm", "a.ppm"));
        assert!(!path_matches("data/imgs/ba.ppm", "a.ppm"));
    }
}
