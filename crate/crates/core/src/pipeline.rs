//! Image in, face proposals out.

use rayon::prelude::*;
use thiserror::Error;

use crate::network::{HeatmapSet, NetworkError, NetworkWeights};
use crate::proposals::{self, BBox, PartTemplate, ProposalConfig, ProposalError};
use crate::pyramid::{self, LevelGeometry, PyramidConfig, PyramidError};
use crate::tensor::Tensor3;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub proposals: Vec<BBox>,
    pub levels: Vec<LevelGeometry>,
}

impl Detection {
    pub fn workload(&self) -> u64 {
        pyramid::pyramid_workload(&self.levels)
    }
}

/// Proposal stage with shared read-only weights.
pub struct Detector<'a> {
    pub weights: &'a NetworkWeights,
    pub templates: &'a [PartTemplate],
    pub config: &'a ProposalConfig,
    /// Run pyramid levels on the rayon pool.
    pub parallel: bool,
}

impl<'a> Detector<'a> {
    pub fn new(weights: &'a NetworkWeights, templates: &'a [PartTemplate], config: &'a ProposalConfig) -> Self {
        Self {
            weights,
            templates,
            config,
            parallel: true,
        }
    }

    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }

    /// Heatmaps for every level of the pyramid built from `image`.
    pub fn heatmaps(&self, image: &Tensor3, pyramid_cfg: &PyramidConfig) -> Result<Vec<HeatmapSet>, DetectError> {
        let levels = pyramid::build_pyramid(image, pyramid_cfg)?;
        let (h, w) = (image.height(), image.width());
        let run = |level: &pyramid::PyramidLevel| {
            self.weights
                .forward_fcn(&level.image)
                .map(|hm| hm.at_level(level.scale, h, w))
        };
        let maps = if self.parallel {
            levels.par_iter().map(run).collect::<Result<Vec<_>, _>>()?
        } else {
            levels.iter().map(run).collect::<Result<Vec<_>, _>>()?
        };
        Ok(maps)
    }

    pub fn detect(&self, image: &Tensor3, pyramid_cfg: &PyramidConfig) -> Result<Detection, DetectError> {
        let levels = pyramid::pyramid_geometry(image.height(), image.width(), pyramid_cfg)?;
        let maps = self.heatmaps(image, pyramid_cfg)?;
        let proposals = proposals::generate_proposals(&maps, self.templates, self.config)?;
        Ok(Detection { proposals, levels })
    }
}
