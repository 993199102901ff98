//! Landmark point sets and the twelve-point synthetic face layout.

use serde::{Deserialize, Serialize};

/// A 2-D point; `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn scale(self, factor: f64) -> Point {
        Point::new(self.x * factor, self.y * factor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    InterOcular,
    InterPupil,
    Diagonal,
}

impl std::str::FromStr for NormKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "inter-ocular" => Ok(Self::InterOcular),
            "inter-pupil" => Ok(Self::InterPupil),
            "diagonal" => Ok(Self::Diagonal),
            other => Err(crate::Error::Config(format!(
                "unknown normalization `{other}`"
            ))),
        }
    }
}

/// Points plus the face-scale distance used to normalize errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Point>,
    pub norm_distance: f64,
    pub norm_kind: NormKind,
}

/// Index pairs that define the inter-ocular and inter-pupil distances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormPairs {
    pub ocular: (usize, usize),
    pub pupil: (usize, usize),
}

/// Landmark ordering of the synthetic faces.
pub mod face {
    use super::NormPairs;

    pub const LANDMARKS: usize = 12;

    pub const JAW_LEFT: usize = 0;
    pub const CHIN: usize = 1;
    pub const JAW_RIGHT: usize = 2;
    pub const LEFT_EYE_OUTER: usize = 3;
    pub const LEFT_EYE_INNER: usize = 4;
    pub const RIGHT_EYE_INNER: usize = 5;
    pub const RIGHT_EYE_OUTER: usize = 6;
    pub const LEFT_PUPIL: usize = 7;
    pub const RIGHT_PUPIL: usize = 8;
    pub const NOSE: usize = 9;
    pub const MOUTH_LEFT: usize = 10;
    pub const MOUTH_RIGHT: usize = 11;

    /// Index of each landmark's mirror image under a horizontal flip.
    pub const FLIP: [usize; LANDMARKS] = [2, 1, 0, 6, 5, 4, 3, 8, 7, 9, 11, 10];

    /// Boundary chains: left jaw arc, right jaw arc, mouth line.
    pub const BOUNDARIES: [&[usize]; 3] = [
        &[JAW_LEFT, CHIN],
        &[CHIN, JAW_RIGHT],
        &[MOUTH_LEFT, MOUTH_RIGHT],
    ];

    pub const NORM_PAIRS: NormPairs = NormPairs {
        ocular: (LEFT_EYE_OUTER, RIGHT_EYE_OUTER),
        pupil: (LEFT_PUPIL, RIGHT_PUPIL),
    };

    pub fn boundaries() -> Vec<Vec<usize>> {
        BOUNDARIES.iter().map(|c| c.to_vec()).collect()
    }
}
