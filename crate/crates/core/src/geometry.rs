//! Gaze angle conventions and point-of-gaze projection.
//!
//! Camera coordinates: x right, y down, z forward away from the camera. The
//! screen lies in the `z = 0` plane with the camera at its top-centre, so a
//! subject in front of the screen sits at positive z and looks along negative z.
//! Positive pitch looks up, positive yaw looks towards camera +x.

use serde::{Deserialize, Serialize};

use crate::autodiff::ScreenProjection;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GazeAngles {
    pub pitch: f64,
    pub yaw: f64,
}

impl GazeAngles {
    pub fn new(pitch: f64, yaw: f64) -> Self {
        GazeAngles { pitch, yaw }
    }

    pub fn from_degrees(pitch: f64, yaw: f64) -> Self {
        GazeAngles {
            pitch: pitch.to_radians(),
            yaw: yaw.to_radians(),
        }
    }

    /// Horizontal mirror image of this gaze.
    pub fn mirrored(self) -> Self {
        GazeAngles {
            pitch: self.pitch,
            yaw: -self.yaw,
        }
    }

    pub fn to_vector(self) -> GazeVector {
        angles_to_vector(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl GazeVector {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        GazeVector { x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(self, o: GazeVector) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn scaled(self, s: f64) -> Self {
        GazeVector::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
        }
        Ok(self.scaled(1.0 / n))
    }

    pub fn to_angles(self) -> GazeAngles {
        vector_to_angles(self)
    }
}

pub fn angles_to_vector(g: GazeAngles) -> GazeVector {
    let (sp, cp) = g.pitch.sin_cos();
    let (sy, cy) = g.yaw.sin_cos();
    GazeVector::new(cp * sy, -sp, -cp * cy)
}

/// Inverse of [`angles_to_vector`]. When `cos(pitch) ≈ 0` the yaw is whatever
/// `atan2` yields for the residual components.
pub fn vector_to_angles(v: GazeVector) -> GazeAngles {
    GazeAngles {
        pitch: (-v.y).clamp(-1.0, 1.0).asin(),
        yaw: v.x.atan2(-v.z),
    }
}

/// Angle between two directions in degrees, with the cosine clamped to [−1, 1].
pub fn angular_error_deg(a: GazeVector, b: GazeVector) -> Result<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("angular error of a zero-norm vector"));
    }
    let c = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(c.acos().to_degrees())
}

pub fn angular_error_angles_deg(a: GazeAngles, b: GazeAngles) -> f64 {
    angular_error_deg(a.to_vector(), b.to_vector()).expect("unit vectors")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenGeometry {
    pub width_cm: f64,
    pub height_cm: f64,
    pub width_px: u32,
    pub height_px: u32,
}

impl Default for ScreenGeometry {
    fn default() -> Self {
        ScreenGeometry {
            width_cm: 60.0,
            height_cm: 33.75,
            width_px: 1920,
            height_px: 1080,
        }
    }
}

impl ScreenGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_cm > 0.0 && self.height_cm > 0.0 && self.width_px > 0 && self.height_px > 0) {
            return Err(Error::invalid(format!("screen geometry must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn px_per_cm(&self) -> (f64, f64) {
        (
            self.width_px as f64 / self.width_cm,
            self.height_px as f64 / self.height_cm,
        )
    }

    pub fn projection(&self) -> ScreenProjection {
        let (sx, sy) = self.px_per_cm();
        ScreenProjection {
            width_cm: self.width_cm,
            px_per_cm_x: sx,
            px_per_cm_y: sy,
        }
    }
}

/// Point in screen centimetres: x from the left edge, y down from the top edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenPoint {
    pub x: f64,
    pub y: f64,
}

impl ScreenPoint {
    pub fn distance(self, o: ScreenPoint) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }
}

/// Intersects the ray `origin + s·g` (s > 0) with the screen plane.
pub fn pog_cm(g: GazeVector, origin: [f64; 3], geom: &ScreenGeometry) -> Result<ScreenPoint> {
    if g.z * origin[2] >= 0.0 {
        return Err(Error::NoIntersection(format!(
            "direction {g:?} from origin {origin:?} never reaches z = 0"
        )));
    }
    let s = -origin[2] / g.z;
    Ok(ScreenPoint {
        x: origin[0] + s * g.x + geom.width_cm / 2.0,
        y: origin[1] + s * g.y,
    })
}

/// Scales a centimetre point to pixels; off-screen points are not clamped.
pub fn pog_px(p: ScreenPoint, geom: &ScreenGeometry) -> ScreenPoint {
    let (sx, sy) = geom.px_per_cm();
    ScreenPoint {
        x: p.x * sx,
        y: p.y * sy,
    }
}
