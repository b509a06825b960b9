//! Perception-provider interfaces.
//!
//! The mapping pipeline never talks to a camera or a network directly; it
//! consumes descriptors, pairwise pointmap predictions and keypoint
//! correspondences through these traits. [`crate::synthworld`] implements
//! them against a generated ground-truth world; a deployment would back them
//! with real models instead.

use nalgebra::Vector3;
use thiserror::Error;

use crate::se3::Pose;

#[derive(Debug, Error)]
pub enum ProviderError {
    /// The two views share too little frustum overlap for any pairwise model
    /// to produce a usable prediction.
    #[error("views share no usable visual overlap")]
    NoSharedVisibility,
    /// Hard provider failure; merges abort atomically on this.
    #[error("provider failure: {0}")]
    Failure(String),
}

/// Identifies one capture (a node's source image) to a provider.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewKey {
    pub session: u32,
    pub timestamp: f64,
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub principal: (f64, f64),
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// Projects a camera-frame point; `None` when it falls behind the camera
    /// or outside the image bounds.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        let u = self.focal * p.x / p.z + self.principal.0;
        let v = self.focal * p.y / p.z + self.principal.1;
        if u < 0.0 || u >= self.width as f64 || v < 0.0 || v >= self.height as f64 {
            return None;
        }
        Some((u, v))
    }
}

/// Row-major grid of scalars (confidence maps, weight maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().sum::<f64>() / self.data.len() as f64
        }
    }
}

/// Row-major grid of 3D points (pointmaps).
#[derive(Debug, Clone, PartialEq)]
pub struct PointGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vector3<f64>>,
}

impl PointGrid {
    pub fn len(&self) -> usize {
        self.data.len()
    }
}

/// Output of one pairwise stereo prediction for an ordered view pair
/// `(a, b)`: both pointmaps live in the coordinate frame of view `a`.
#[derive(Debug, Clone)]
pub struct PairwisePrediction {
    pub pointmap_a_in_a: PointGrid,
    pub pointmap_b_in_a: PointGrid,
    pub confidence_a: Grid,
    pub confidence_b: Grid,
    /// Pose of view `b` expressed in view `a`'s frame.
    pub predicted_relative: Pose,
    pub predicted_focal: f64,
}

impl PairwisePrediction {
    /// Mean confidence over both grids; the overlap measure used when
    /// deciding whether a pair becomes an alignment edge.
    pub fn mean_confidence(&self) -> f64 {
        let n = (self.confidence_a.len() + self.confidence_b.len()) as f64;
        if n == 0.0 {
            return 0.0;
        }
        (self.confidence_a.data.iter().sum::<f64>() + self.confidence_b.data.iter().sum::<f64>())
            / n
    }
}

/// One keypoint correspondence in pixel coordinates. `planted_outlier` is
/// ground-truth bookkeeping for test oracles; pipeline code must not read it.
#[derive(Debug, Clone, Copy)]
pub struct KeypointMatch {
    pub pixel_a: (f64, f64),
    pub pixel_b: (f64, f64),
    pub planted_outlier: bool,
}

/// Supplies pixel correspondences between two views, for geometric
/// verification and covisibility validation.
pub trait MatchProvider {
    fn matches(
        &self,
        a: ViewKey,
        b: ViewKey,
        count: usize,
    ) -> Result<Vec<KeypointMatch>, ProviderError>;
}

/// Supplies pairwise pointmap predictions and per-view intrinsics.
pub trait PairwiseProvider {
    fn pairwise(&self, a: ViewKey, b: ViewKey) -> Result<PairwisePrediction, ProviderError>;

    fn intrinsics(&self, view: ViewKey) -> CameraIntrinsics;
}
