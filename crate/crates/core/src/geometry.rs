//! On-axis projection and apical foreshortening.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Depth values closer to zero than this cannot be projected.
pub const Z_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    /// Depth along the beam axis.
    pub z: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// `(-d x / z, d y / z)`. The sign asymmetry between x and y is kept as
/// published.
pub fn perspective_project(p: Point3, d: f64) -> Result<Point2> {
    if p.z.abs() <= Z_EPSILON {
        return Err(Error::Singular(p.z.abs()));
    }
    if !(d > 0.0) {
        return Err(invalid(format!("projection distance {d} must be positive")));
    }
    Ok(Point2::new(-d * p.x / p.z, d * p.y / p.z))
}

/// Homogeneous projection matrix with `a = d`.
///
/// The last row is `(0, 0, -1/a, 0)` so that `w = -z/a`; the y row is
/// reflected so that dividing by `w` lands on `(-d x/z, d y/z)`.
pub fn projection_matrix(a: f64) -> [[f64; 4]; 4] {
    [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, -1.0 / a, 0.0],
    ]
}

/// Same projection through the matrix: multiply, then divide by `w`.
pub fn perspective_project_homogeneous(p: Point3, d: f64) -> Result<Point2> {
    if p.z.abs() <= Z_EPSILON {
        return Err(Error::Singular(p.z.abs()));
    }
    if !(d > 0.0) {
        return Err(invalid(format!("projection distance {d} must be positive")));
    }
    let m = projection_matrix(d);
    let v = [p.x, p.y, p.z, 1.0];
    let mut out = [0.0; 4];
    for (row, o) in m.iter().zip(out.iter_mut()) {
        *o = row.iter().zip(&v).map(|(a, b)| a * b).sum();
    }
    Ok(Point2::new(out[0] / out[3], out[1] / out[3]))
}

/// Apex landmark per frame plus the ED/ES frame indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApexTrack {
    pub apex_positions: Vec<Point2>,
    pub ed_index: usize,
    pub es_index: usize,
    /// Frame height in pixels, used to normalize displacements.
    pub frame_height: usize,
}

impl ApexTrack {
    pub fn new(
        apex_positions: Vec<Point2>,
        ed_index: usize,
        es_index: usize,
        frame_height: usize,
    ) -> Result<Self> {
        let n = apex_positions.len();
        if ed_index == es_index || ed_index >= n || es_index >= n {
            return Err(invalid(format!(
                "ED {ed_index} / ES {es_index} must be distinct indices below {n}"
            )));
        }
        if frame_height == 0 {
            return Err(invalid("frame height must be positive"));
        }
        Ok(Self {
            apex_positions,
            ed_index,
            es_index,
            frame_height,
        })
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            apex_positions: self
                .apex_positions
                .iter()
                .map(|p| Point2::new(p.x + dx, p.y + dy))
                .collect(),
            ..self.clone()
        }
    }
}

/// ED-to-ES apex displacement as a fraction of frame height.
pub fn foreshortening_index(track: &ApexTrack) -> f64 {
    let ed = track.apex_positions[track.ed_index];
    let es = track.apex_positions[track.es_index];
    ed.distance(es) / track.frame_height as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Zero,
    Mild,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Zero, Severity::Mild, Severity::Severe];

    pub fn ordinal(self) -> usize {
        self as usize
    }
}

/// Lower bounds of the mild and severe classes, in fractions of frame
/// height. A value equal to a bound belongs to the higher class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityThresholds {
    pub mild: f64,
    pub severe: f64,
}

impl Default for SeverityThresholds {
    fn default() -> Self {
        Self {
            mild: 0.02,
            severe: 0.06,
        }
    }
}

pub fn foreshortening_severity(index: f64, t: SeverityThresholds) -> Severity {
    if index >= t.severe {
        Severity::Severe
    } else if index >= t.mild {
        Severity::Mild
    } else {
        Severity::Zero
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn on_axis_and_unit_depth() {
        for z in [-3.0, 0.5, 7.0] {
            let p = perspective_project(Point3 { x: 0.0, y: 0.0, z }, 2.0).unwrap();
            assert_eq!((p.x.abs(), p.y.abs()), (0.0, 0.0));
        }
        let p = perspective_project(Point3 { x: 1.0, y: 1.0, z: 4.0 }, 4.0).unwrap();
        assert_eq!(p, Point2::new(-1.0, 1.0));
    }

    #[test]
    fn singular_depth() {
        let p = Point3 { x: 1.0, y: 1.0, z: 0.0 };
        assert!(matches!(perspective_project(p, 1.0), Err(Error::Singular(_))));
        assert!(perspective_project_homogeneous(p, 1.0).is_err());
    }

    #[test]
    fn index_and_severity() {
        let mut pts = vec![Point2::new(50.0, 20.0); 20];
        let track = ApexTrack::new(pts.clone(), 0, 10, 200).unwrap();
        assert_eq!(foreshortening_index(&track), 0.0);
        pts[10].y += 20.0;
        let track = ApexTrack::new(pts, 0, 10, 200).unwrap();
        assert!((foreshortening_index(&track) - 0.1).abs() < 1e-15);

        let t = SeverityThresholds::default();
        assert_eq!(foreshortening_severity(0.0, t), Severity::Zero);
        assert_eq!(foreshortening_severity(0.02, t), Severity::Mild);
        assert_eq!(foreshortening_severity(0.06, t), Severity::Severe);
        assert_eq!(foreshortening_severity(0.059, t), Severity::Mild);
    }

    #[test]
    fn track_validation() {
        let pts = vec![Point2::default(); 20];
        assert!(ApexTrack::new(pts.clone(), 3, 3, 10).is_err());
        assert!(ApexTrack::new(pts, 0, 20, 10).is_err());
    }
}
