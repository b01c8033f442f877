//! Run configuration: defaults, then `--config` file, then flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use super::CliError;
use crate::proposals::{self, PartTemplate, ProposalConfig};
use crate::pyramid::PyramidConfig;

pub const DEFAULT_DENSE_SCALE_FACTOR: f64 = 0.79;
pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_SCENES: usize = 200;
pub const DEFAULT_NOISE: f64 = 0.3;
pub const DEFAULT_IOU_THRESH: f64 = 0.5;
pub const DEFAULT_RUNS: usize = 5;

/// Keys accepted in a `--config` TOML file. Names match the long flags
/// with `-` replaced by `_`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub weights: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub scale_factor: Option<f64>,
    pub dense_scale_factor: Option<f64>,
    pub min_face: Option<f64>,
    pub extra_layer: Option<bool>,
    pub tau_face: Option<f64>,
    pub tau_part: Option<f64>,
    /// Per-part overrides, e.g. `eye = 0.8`.
    pub tau_part_by_part: Option<BTreeMap<String, f64>>,
    pub tau_iou: Option<f64>,
    pub peak_radius: Option<usize>,
    pub face_nms_iou: Option<f64>,
    pub cross_scale_nms_iou: Option<f64>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub scenes: Option<usize>,
    pub noise: Option<f64>,
    pub annotations: Option<PathBuf>,
    pub iou_thresh: Option<f64>,
    pub runs: Option<usize>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Default, Clone, Args)]
pub struct Settings {
    /// TOML file with the same keys as the flags; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Network weight file.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Part template file (`part ax ay k` per line).
    #[arg(long, global = true)]
    pub templates: Option<PathBuf>,
    /// Ratio between consecutive pyramid scales.
    #[arg(long, global = true)]
    pub scale_factor: Option<f64>,
    /// Smallest face to detect, in pixels.
    #[arg(long, global = true)]
    pub min_face: Option<f64>,
    /// Add a pyramid level at half the base scale.
    #[arg(long, global = true, conflicts_with = "no_extra_layer")]
    pub extra_layer: bool,
    /// Disable the extra level even if the config file enables it.
    #[arg(long, global = true)]
    pub no_extra_layer: bool,
    /// Face heatmap threshold.
    #[arg(long, global = true)]
    pub tau_face: Option<f64>,
    /// Part threshold for all parts.
    #[arg(long, global = true)]
    pub tau_part: Option<f64>,
    /// Per-part threshold, `part=value`; may repeat.
    #[arg(long = "tau-part-for", global = true, value_name = "PART=VALUE")]
    pub tau_part_for: Vec<String>,
    /// IoU above which part-inferred boxes are merged.
    #[arg(long, global = true)]
    pub tau_iou: Option<f64>,
    /// Suppression radius for heatmap peaks, in grid cells.
    #[arg(long, global = true)]
    pub peak_radius: Option<usize>,
    /// Per-level NMS threshold for face-map boxes.
    #[arg(long, global = true)]
    pub face_nms_iou: Option<f64>,
    /// Final NMS threshold across pyramid levels.
    #[arg(long, global = true)]
    pub cross_scale_nms_iou: Option<f64>,
    /// Output file (detections, report records or weights).
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Seed for synthetic scenes and random weights.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Ground-truth file: `path count` then one `x1 y1 x2 y2` line per face.
    #[arg(long, global = true)]
    pub annotations: Option<PathBuf>,
    /// IoU needed for a detection to match a ground-truth face.
    #[arg(long, global = true)]
    pub iou_thresh: Option<f64>,
}

/// Fully resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub pyramid: PyramidConfig,
    pub dense_scale_factor: f64,
    pub proposals: ProposalConfig,
    pub weights: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub seed: u64,
    pub scenes: usize,
    pub noise: f64,
    pub iou_thresh: f64,
    pub runs: usize,
}

impl RunConfig {
    pub fn resolve(settings: &Settings) -> Result<Self, CliError> {
        let file = match &settings.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        Self::from_parts(settings, file)
    }

    pub fn from_parts(s: &Settings, f: FileConfig) -> Result<Self, CliError> {
        let pdef = PyramidConfig::default();
        let extra_layer = if s.extra_layer {
            true
        } else if s.no_extra_layer {
            false
        } else {
            f.extra_layer.unwrap_or(pdef.extra_layer)
        };
        let pyramid = PyramidConfig {
            scale_factor: s.scale_factor.or(f.scale_factor).unwrap_or(pdef.scale_factor),
            min_face: s.min_face.or(f.min_face).unwrap_or(pdef.min_face),
            extra_layer,
        };
        pyramid.validate().map_err(|e| CliError::Usage(e.to_string()))?;

        let dense_scale_factor = f.dense_scale_factor.unwrap_or(DEFAULT_DENSE_SCALE_FACTOR);
        PyramidConfig {
            scale_factor: dense_scale_factor,
            ..pyramid
        }
        .validate()
        .map_err(|e| CliError::Usage(format!("dense {e}")))?;

        let d = ProposalConfig::default();
        let mut by_class = BTreeMap::new();
        for (name, v) in f.tau_part_by_part.unwrap_or_default() {
            by_class.insert(part_or_usage(&name)?, v);
        }
        for spec in &s.tau_part_for {
            let (name, v) = spec
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--tau-part-for expects PART=VALUE, got `{spec}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("--tau-part-for: `{v}` is not a number")))?;
            by_class.insert(part_or_usage(name.trim())?, v);
        }
        let proposals = ProposalConfig {
            tau_face: s.tau_face.or(f.tau_face).unwrap_or(d.tau_face),
            tau_part: s.tau_part.or(f.tau_part).unwrap_or(d.tau_part),
            tau_part_by_class: by_class,
            tau_iou: s.tau_iou.or(f.tau_iou).unwrap_or(d.tau_iou),
            peak_radius: s.peak_radius.or(f.peak_radius).unwrap_or(d.peak_radius),
            face_nms_iou: s.face_nms_iou.or(f.face_nms_iou).unwrap_or(d.face_nms_iou),
            cross_scale_nms_iou: s
                .cross_scale_nms_iou
                .or(f.cross_scale_nms_iou)
                .unwrap_or(d.cross_scale_nms_iou),
        };
        proposals.validate().map_err(|e| CliError::Usage(e.to_string()))?;

        let iou_thresh = s.iou_thresh.or(f.iou_thresh).unwrap_or(DEFAULT_IOU_THRESH);
        if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
            return Err(CliError::Usage(format!(
                "iou_thresh must be in (0, 1], got {iou_thresh}"
            )));
        }
        let noise = f.noise.unwrap_or(DEFAULT_NOISE);
        if !(0.0..1.0).contains(&noise) {
            return Err(CliError::Usage(format!("noise must be in [0, 1), got {noise}")));
        }

        Ok(Self {
            pyramid,
            dense_scale_factor,
            proposals,
            weights: s.weights.clone().or(f.weights),
            templates: s.templates.clone().or(f.templates),
            output: s.output.clone().or(f.output),
            annotations: s.annotations.clone().or(f.annotations),
            seed: s.seed.or(f.seed).unwrap_or(DEFAULT_SEED),
            scenes: f.scenes.unwrap_or(DEFAULT_SCENES),
            noise,
            iou_thresh,
            runs: f.runs.unwrap_or(DEFAULT_RUNS),
        })
    }

    pub fn dense_pyramid(&self) -> PyramidConfig {
        PyramidConfig {
            scale_factor: self.dense_scale_factor,
            min_face: self.pyramid.min_face,
            extra_layer: false,
        }
    }

    pub fn load_templates(&self) -> Result<Vec<PartTemplate>, CliError> {
        match &self.templates {
            None => Ok(proposals::default_templates()),
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| CliError::Io(format!("templates {}: {e}", p.display())))?;
                proposals::parse_templates(&text)
                    .map_err(|e| CliError::Usage(format!("templates {}: {e}", p.display())))
            }
        }
    }
}

fn part_or_usage(name: &str) -> Result<usize, CliError> {
    proposals::part_class(name).ok_or_else(|| CliError::Usage(format!("unknown part `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file =
            FileConfig::parse("scale_factor = 0.5\nmin_face = 40\nextra_layer = true\ntau_face = 0.8\n").unwrap();
        let s = Settings {
            scale_factor: Some(0.25),
            no_extra_layer: true,
            ..Default::default()
        };
        let rc = RunConfig::from_parts(&s, file).unwrap();
        assert_eq!(rc.pyramid.scale_factor, 0.25);
        assert_eq!(rc.pyramid.min_face, 40.0);
        assert!(!rc.pyramid.extra_layer);
        assert_eq!(rc.proposals.tau_face, 0.8);
        assert_eq!(rc.proposals.tau_part, 0.7);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            FileConfig::parse("scale_factr = 0.5\n"),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn per_part_thresholds() {
        let file = FileConfig::parse("[tau_part_by_part]\neye = 0.8\n").unwrap();
        let s = Settings {
            tau_part_for: vec!["nose=0.9".into()],
            ..Default::default()
        };
        let rc = RunConfig::from_parts(&s, file).unwrap();
        assert_eq!(rc.proposals.tau_for_part(2), 0.8);
        assert_eq!(rc.proposals.tau_for_part(3), 0.9);
        assert_eq!(rc.proposals.tau_for_part(4), 0.7);
        let bad = Settings {
            tau_part_for: vec!["chin=0.9".into()],
            ..Default::default()
        };
        assert!(RunConfig::from_parts(&bad, FileConfig::default()).is_err());
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let s = Settings {
            scale_factor: Some(1.5),
            ..Default::default()
        };
        assert!(matches!(
            RunConfig::from_parts(&s, FileConfig::default()),
            Err(CliError::Usage(_))
        ));
        let s = Settings {
            tau_iou: Some(0.0),
            ..Default::default()
        };
        assert!(RunConfig::from_parts(&s, FileConfig::default()).is_err());
    }
}
