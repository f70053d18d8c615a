//! Planar points, projective warps and similarity transforms.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const W_EPS: f64 = 1e-9;
const DET_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A 3x3 projective map, normalized so the bottom-right entry is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    matrix: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let matrix = Matrix3::from_fn(|r, c| m[r][c]);
        Self::normalized(matrix)
    }

    fn normalized(matrix: Matrix3<f64>) -> Result<Self> {
        let s = matrix[(2, 2)];
        if s.abs() < W_EPS || !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::Shape("homography with zero scale entry".into()));
        }
        let matrix = matrix / s;
        if matrix.determinant().abs() < DET_EPS {
            return Err(Error::Shape("singular homography".into()));
        }
        Ok(Self { matrix })
    }

    /// Direct linear transform from four point correspondences (h33 fixed to 1).
    pub fn from_correspondences(src: &[Point2; 4], dst: &[Point2; 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (s, d)) in src.iter().zip(dst).enumerate() {
            let r = 2 * i;
            a.row_mut(r).copy_from_slice(&[s.x, s.y, 1.0, 0.0, 0.0, 0.0, -d.x * s.x, -d.x * s.y]);
            a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, s.x, s.y, 1.0, -d.y * s.x, -d.y * s.y]);
            b[r] = d.x;
            b[r + 1] = d.y;
        }
        let h = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Shape("degenerate point correspondences".into()))?;
        Self::normalized(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
    }

    pub fn entries(&self) -> [[f64; 3]; 3] {
        let m = &self.matrix;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn determinant(&self) -> f64 {
        self.matrix.determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| Error::Shape("singular homography".into()))?;
        Self::normalized(inv)
    }

    /// Applies the map to a point and dehomogenizes.
    pub fn warp_point(&self, p: Point2) -> Result<Point2> {
        let v = self.matrix * Vector3::new(p.x, p.y, 1.0);
        if v.z.abs() < W_EPS {
            return Err(Error::PointAtInfinity(v.z));
        }
        Ok(Point2::new(v.x / v.z, v.y / v.z))
    }
}

/// Convex (and non-degenerate) test for a quadrilateral given in order.
pub fn is_convex_quad(q: &[Point2; 4]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let a = q[i];
        let b = q[(i + 1) % 4];
        let c = q[(i + 2) % 4];
        let cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
        if cross.abs() < 1e-12 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Rotation, isotropic zoom and translation about a fixed center.
///
/// With angle `a` the offset `(dx, dy)` from the center maps to
/// `scale * (cos a * dx + sin a * dy, -sin a * dx + cos a * dy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub angle_rad: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    pub center: Point2,
}

impl Similarity {
    pub fn identity(center: Point2) -> Self {
        Self {
            angle_rad: 0.0,
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
            center,
        }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let (s, c) = self.angle_rad.sin_cos();
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        Point2::new(
            self.center.x + self.scale * (c * dx + s * dy) + self.tx,
            self.center.y + self.scale * (-s * dx + c * dy) + self.ty,
        )
    }

    pub fn apply_inverse(&self, p: Point2) -> Point2 {
        let (s, c) = self.angle_rad.sin_cos();
        let dx = (p.x - self.center.x - self.tx) / self.scale;
        let dy = (p.y - self.center.y - self.ty) / self.scale;
        Point2::new(
            self.center.x + c * dx - s * dy,
            self.center.y + s * dx + c * dy,
        )
    }
}
