//! Differentiable surface-detail inverse rendering.
//!
//! A coarse triangle mesh is deformed by per-vertex offsets along its
//! normals, rasterized into a G-buffer, and refined per pixel by a scalar
//! offset field living in UV space. Offset surface points are converted into
//! shading normals with a five-point cross-product stencil, then shaded under
//! a lat-long grid of learnable light probes with ray-cast visibility.
//! Every stage carries an explicit adjoint so the whole chain can be
//! optimized with Adam and verified against finite differences.

pub mod deshade;
pub mod engine;
pub mod error;
pub mod fields;
pub mod geom;
pub mod image;
pub mod io;
pub mod o2n;
pub mod parallel;
pub mod raster;
pub mod shade;

pub use error::{Error, Result};

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Rotation followed by translation: `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const ORTHONORMAL_TOL: f64 = 1e-6;

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn translation(t: Vec3) -> Self {
        RigidTransform {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit).
    pub fn axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        RigidTransform {
            rotation: *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let off = (r.transpose() * r - Mat3::identity()).abs().max();
        let det = r.determinant();
        if !off.is_finite() || off > Self::ORTHONORMAL_TOL || (det - 1.0).abs() > Self::ORTHONORMAL_TOL {
            return Err(Error::arg(format!(
                "rotation not orthonormal (|RᵀR-I|={off:e}, det={det})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::arg("non-finite translation"));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Mat3::identity() && self.translation == Vec3::zeros()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}
