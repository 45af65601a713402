use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::Vec3;

/// Lat-long grid of RGB radiance cells. +Z is up; row 0 touches the north
/// pole (θ = 0) and column `j` spans azimuth `[j, j+1)·2π/n_lon`, with
/// `ω = (sin θ cos φ, sin θ sin φ, cos θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LightProbeSphere {
    pub n_lat: usize,
    pub n_lon: usize,
    /// `3 · n_lat · n_lon` values, cell-major, RGB innermost.
    pub radiance: Vec<f64>,
    pub directions: Vec<Vec3>,
    pub solid_angles: Vec<f64>,
}

fn band_edges(i: usize, n_lat: usize) -> (f64, f64) {
    let c = |k: usize| {
        if k == 0 {
            1.0
        } else if k == n_lat {
            -1.0
        } else {
            (PI * k as f64 / n_lat as f64).cos()
        }
    };
    (c(i), c(i + 1))
}

impl LightProbeSphere {
    /// Geometry for an `n_lat x n_lon` grid with zero radiance.
    pub fn new(n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat == 0 || n_lon == 0 {
            return Err(Error::arg("probe grid needs n_lat, n_lon >= 1"));
        }
        let dphi = 2.0 * PI / n_lon as f64;
        let mut directions = Vec::with_capacity(n_lat * n_lon);
        let mut solid_angles = Vec::with_capacity(n_lat * n_lon);
        for i in 0..n_lat {
            let theta = PI * (i as f64 + 0.5) / n_lat as f64;
            let (top, bot) = band_edges(i, n_lat);
            for j in 0..n_lon {
                let phi = dphi * (j as f64 + 0.5);
                directions.push(Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()));
                solid_angles.push(dphi * (top - bot));
            }
        }
        Ok(LightProbeSphere {
            n_lat,
            n_lon,
            radiance: vec![0.0; 3 * n_lat * n_lon],
            directions,
            solid_angles,
        })
    }

    pub fn uniform(n_lat: usize, n_lon: usize, rgb: Vec3) -> Result<Self> {
        let mut p = Self::new(n_lat, n_lon)?;
        for c in p.radiance.chunks_mut(3) {
            c.copy_from_slice(rgb.as_slice());
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    #[inline]
    pub fn radiance_at(&self, i: usize) -> Vec3 {
        Vec3::new(self.radiance[3 * i], self.radiance[3 * i + 1], self.radiance[3 * i + 2])
    }

    pub fn set_radiance(&mut self, i: usize, rgb: Vec3) {
        self.radiance[3 * i..3 * i + 3].copy_from_slice(rgb.as_slice());
    }

    /// Cell whose solid angle contains `dir` (need not be unit).
    pub fn cell_of(&self, dir: &Vec3) -> usize {
        let d = dir.normalize();
        let theta = d.z.clamp(-1.0, 1.0).acos();
        let mut phi = d.y.atan2(d.x);
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        let i = ((theta / PI * self.n_lat as f64) as usize).min(self.n_lat - 1);
        let j = ((phi / (2.0 * PI) * self.n_lon as f64) as usize).min(self.n_lon - 1);
        i * self.n_lon + j
    }

    /// Clamp radiance at zero (projection after an update).
    pub fn project(&mut self) {
        for v in &mut self.radiance {
            *v = v.max(0.0);
        }
    }

    /// Radiance as an `n_lon x n_lat` RGB image in the equirectangular layout.
    pub fn to_image(&self) -> Image {
        Image {
            width: self.n_lon,
            height: self.n_lat,
            channels: 3,
            data: self.radiance.clone(),
        }
    }

    /// Probes resampled from an equirectangular RGB image with the same
    /// orientation as [`to_image`](Self::to_image). Each cell takes the
    /// solid-angle weighted mean of texels whose centers fall inside it;
    /// cells containing no texel center take the texel under their center.
    pub fn from_envmap(n_lat: usize, n_lon: usize, env: &Image) -> Result<Self> {
        if env.channels != 3 || env.width == 0 || env.height == 0 {
            return Err(Error::arg(format!("envmap must be RGB, got {} channels", env.channels)));
        }
        if env.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("envmap contains non-finite values"));
        }
        let mut probes = Self::new(n_lat, n_lon)?;
        let (w, h) = (env.width, env.height);
        let mut sum = vec![0.0; 3 * probes.len()];
        let mut weight = vec![0.0; probes.len()];
        let dphi = 2.0 * PI / w as f64;
        for y in 0..h {
            let (top, bot) = band_edges(y, h);
            let texel_omega = dphi * (top - bot);
            let i = (((y as f64 + 0.5) / h as f64 * n_lat as f64) as usize).min(n_lat - 1);
            for x in 0..w {
                let j = (((x as f64 + 0.5) / w as f64 * n_lon as f64) as usize).min(n_lon - 1);
                let cell = i * n_lon + j;
                let px = env.pixel(y * w + x);
                for c in 0..3 {
                    sum[3 * cell + c] += texel_omega * px[c];
                }
                weight[cell] += texel_omega;
            }
        }
        for cell in 0..probes.len() {
            if weight[cell] > 0.0 {
                for c in 0..3 {
                    probes.radiance[3 * cell + c] = sum[3 * cell + c] / weight[cell];
                }
            } else {
                // Envmap coarser than the grid: take the texel under the cell center.
                let (i, j) = (cell / n_lon, cell % n_lon);
                let y = (((i as f64 + 0.5) / n_lat as f64 * h as f64) as usize).min(h - 1);
                let x = (((j as f64 + 0.5) / n_lon as f64 * w as f64) as usize).min(w - 1);
                probes.radiance[3 * cell..3 * cell + 3].copy_from_slice(env.pixel(y * w + x));
            }
        }
        Ok(probes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_angles_sum_to_four_pi() {
        let p = LightProbeSphere::new(16, 32).unwrap();
        assert_eq!(p.len(), 512);
        let total: f64 = p.solid_angles.iter().sum();
        assert!((total - 4.0 * PI).abs() < 1e-10);
        assert!(p.directions.iter().all(|d| (d.norm() - 1.0).abs() < 1e-14));
        // Equator bands beat polar bands.
        assert!(p.solid_angles[7 * 32] > p.solid_angles[0]);
        let one = LightProbeSphere::new(1, 1).unwrap();
        assert!((one.solid_angles[0] - 4.0 * PI).abs() < 1e-15);
        assert!(LightProbeSphere::new(0, 4).is_err());
    }

    #[test]
    fn cell_lookup_inverts_directions() {
        let p = LightProbeSphere::new(16, 32).unwrap();
        for (k, d) in p.directions.iter().enumerate() {
            assert_eq!(p.cell_of(d), k);
        }
        assert_eq!(p.cell_of(&Vec3::z()) / 32, 0);
    }

    #[test]
    fn envmap_identity_and_constant() {
        let mut p = LightProbeSphere::new(16, 32).unwrap();
        for (k, v) in p.radiance.iter_mut().enumerate() {
            *v = (k as f64 * 0.37).sin().abs();
        }
        let back = LightProbeSphere::from_envmap(16, 32, &p.to_image()).unwrap();
        for (a, b) in p.radiance.iter().zip(&back.radiance) {
            assert!((a - b).abs() <= 1e-12);
        }
        let env = Image::filled(7, 3, 3, 0.8);
        let q = LightProbeSphere::from_envmap(16, 32, &env).unwrap();
        assert!(q.radiance.iter().all(|v| (v - 0.8).abs() < 1e-12));
        assert!(LightProbeSphere::from_envmap(4, 4, &Image::new(4, 2, 1)).is_err());
    }

    #[test]
    fn envmap_downsampling_preserves_energy() {
        let mut env = Image::new(128, 64, 3);
        for (k, v) in env.data.iter_mut().enumerate() {
            *v = ((k / 3) % 17) as f64 / 16.0;
        }
        let p = LightProbeSphere::from_envmap(16, 32, &env).unwrap();
        let fine = LightProbeSphere::from_envmap(64, 128, &env).unwrap();
        let energy = |p: &LightProbeSphere| -> f64 { (0..p.len()).map(|i| p.radiance[3 * i] * p.solid_angles[i]).sum() };
        assert!((energy(&p) - energy(&fine)).abs() < 1e-9);
    }
}
