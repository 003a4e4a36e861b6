//! Domain values shared by every stage of the engine.

use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::str::FromStr;

/// A position or displacement in working-resolution pixels.
///
/// x grows to the right, y grows downwards, and `(0, 0)` is the center of the
/// top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ZERO: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (*self - *other).norm()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Isotropic 2-D Gaussian: covariance is `sigma² · I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianEstimate {
    pub mean: Point2,
    pub sigma: f64,
}

impl GaussianEstimate {
    pub const fn new(mean: Point2, sigma: f64) -> Self {
        Self { mean, sigma }
    }

    /// Zero-variance estimate used for the query-frame anchor.
    pub const fn anchor(mean: Point2) -> Self {
        Self { mean, sigma: 0.0 }
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    pub fn is_valid(&self) -> bool {
        self.mean.is_finite() && self.sigma.is_finite() && self.sigma >= 0.0
    }
}

/// Identifier of an object mask track inside a container.
pub type ObjectId = u32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryPoint {
    pub query_frame: usize,
    pub position: Point2,
    pub object_id: ObjectId,
}

/// Where a track state came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Anchor,
    Forward,
    Backward,
    KeypointOnly,
    Occluded,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Anchor => "anchor",
            Provenance::Forward => "forward",
            Provenance::Backward => "backward",
            Provenance::KeypointOnly => "keypoint_only",
            Provenance::Occluded => "occluded",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "anchor" => Provenance::Anchor,
            "forward" => Provenance::Forward,
            "backward" => Provenance::Backward,
            "keypoint_only" => Provenance::KeypointOnly,
            "occluded" => Provenance::Occluded,
            other => return Err(format!("unknown provenance '{other}'")),
        })
    }
}

/// Per-frame state of one tracked query.
///
/// Occluded states keep the last estimate of the pass that produced them so
/// downstream consumers always have a finite position to draw, but that
/// position carries no meaning for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    pub estimate: GaussianEstimate,
    pub visible: bool,
    pub provenance: Provenance,
}

impl TrackState {
    pub fn anchor(position: Point2) -> Self {
        Self {
            estimate: GaussianEstimate::anchor(position),
            visible: true,
            provenance: Provenance::Anchor,
        }
    }

    pub fn visible(estimate: GaussianEstimate, provenance: Provenance) -> Self {
        debug_assert!(provenance != Provenance::Occluded);
        Self {
            estimate,
            visible: true,
            provenance,
        }
    }

    pub fn occluded(last: GaussianEstimate) -> Self {
        Self {
            estimate: last,
            visible: false,
            provenance: Provenance::Occluded,
        }
    }

    /// Checks the visibility/provenance coupling.
    pub fn is_consistent(&self) -> bool {
        if !self.visible {
            return self.provenance == Provenance::Occluded;
        }
        if self.provenance == Provenance::Occluded || !self.estimate.is_valid() {
            return false;
        }
        self.provenance == Provenance::Anchor || self.estimate.sigma > 0.0
    }
}

/// Direction of a tracking pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn provenance(&self) -> Provenance {
        match self {
            Direction::Forward => Provenance::Forward,
            Direction::Backward => Provenance::Backward,
        }
    }
}
