//! De-shading and normal-prior providers.
//!
//! Analytic de-shading divides the shaded albedo by the white-albedo shading
//! image where it is well conditioned. External providers read per-frame PFM
//! files named `{frame:06}.pfm` from a directory.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::raster::GBuffer;
use crate::shade::{shading_image, LightProbeSphere, VisibilityBuffer};
use crate::Vec3;

pub const DEFAULT_S_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy)]
pub struct DeshadeRequest<'a> {
    pub width: usize,
    pub height: usize,
    pub albedo_shaded: &'a [Vec3],
    pub n_surf: &'a [Vec3],
    pub mask: &'a [bool],
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deshaded {
    pub albedo: Vec<Vec3>,
    /// 1 where the division was applied, 0 on passthrough and off-mask pixels.
    pub confidence: Vec<f64>,
}

/// `α̂ = α_s / S` per channel on masked pixels whose smallest shading
/// channel is at least `s_floor`; passthrough with zero confidence
/// elsewhere. Output clamped to `[0, 1]`.
pub fn deshade_with_shading(albedo_shaded: &[Vec3], shading: &Image, mask: &[bool], s_floor: f64) -> Result<Deshaded> {
    let n = albedo_shaded.len();
    if shading.pixel_count() != n || shading.channels != 3 || mask.len() != n {
        return Err(Error::arg("de-shading inputs differ in size"));
    }
    let mut albedo = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for p in 0..n {
        let s = shading.vec3(p);
        let a = albedo_shaded[p];
        if mask[p] && s.min() >= s_floor {
            albedo.push(a.component_div(&s).map(|v| v.clamp(0.0, 1.0)));
            confidence.push(1.0);
        } else {
            albedo.push(a.map(|v| v.clamp(0.0, 1.0)));
            confidence.push(0.0);
        }
    }
    Ok(Deshaded { albedo, confidence })
}

/// Analytic de-shader using the shading image of `probes` and `visibility`
/// on the request's normals.
pub fn deshade_analytic(
    request: &DeshadeRequest,
    probes: &LightProbeSphere,
    visibility: &VisibilityBuffer,
    gbuffer: &GBuffer,
    s_floor: f64,
) -> Result<Deshaded> {
    let s = shading_image(gbuffer, request.n_surf, probes, visibility)?;
    deshade_with_shading(request.albedo_shaded, &s, request.mask, s_floor)
}

/// Path of the provider file for `frame` inside `dir`.
pub fn frame_file(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("{frame:06}.pfm"))
}

fn load_frame_map(dir: &Path, frame: usize, width: usize, height: usize) -> Result<Vec<Vec3>> {
    let path = frame_file(dir, frame);
    let img = crate::io::read_pfm(&path)?;
    if img.width != width || img.height != height || img.channels != 3 {
        return Err(Error::io(
            &path,
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!(
                    "frame {frame}: map is {}x{}x{}, expected {width}x{height}x3",
                    img.width, img.height, img.channels
                ),
            ),
        ));
    }
    Ok(img.to_vec3())
}

/// Albedo maps produced offline by another de-shader.
pub fn deshade_external(request: &DeshadeRequest, dir: &Path) -> Result<Vec<Vec3>> {
    load_frame_map(dir, request.frame, request.width, request.height)
}

#[derive(Debug, Clone, Copy)]
pub struct NormalPriorRequest<'a> {
    pub width: usize,
    pub height: usize,
    pub n_surf: &'a [Vec3],
    pub i_rgb: &'a [Vec3],
    pub mask: &'a [bool],
    pub frame: usize,
    /// Camera index; gives each (view, frame) pair its own noise stream.
    pub view: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormalPrior {
    Identity,
    /// Ground-truth normals rotated by `N(0, σ²)` angles about random
    /// tangent axes, independently per pixel, view and frame.
    GtNoisy { sigma_deg: f64, seed: u64 },
    External { dir: PathBuf },
}

/// Rotate `n` by `angle` about a unit axis perpendicular to it.
fn tilt(n: &Vec3, axis: &Vec3, angle: f64) -> Vec3 {
    (n * angle.cos() + axis.cross(n) * angle.sin()).normalize()
}

fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t = n.cross(&helper).normalize();
    (t, n.cross(&t))
}

pub fn normal_prior(request: &NormalPriorRequest, provider: &NormalPrior, gt_normals: Option<&[Vec3]>) -> Result<Vec<Vec3>> {
    let n = request.width * request.height;
    if request.n_surf.len() != n || request.mask.len() != n {
        return Err(Error::arg("normal prior inputs differ in size"));
    }
    match provider {
        NormalPrior::Identity => Ok(request.n_surf.to_vec()),
        NormalPrior::GtNoisy { sigma_deg, seed } => {
            let gt = gt_normals.ok_or_else(|| Error::Config("gt_noisy normal prior needs ground-truth normals".into()))?;
            if gt.len() != n {
                return Err(Error::arg("ground-truth normal map has the wrong size"));
            }
            if !(*sigma_deg >= 0.0) {
                return Err(Error::Config(format!("noise angle must be >= 0, got {sigma_deg}")));
            }
            if *sigma_deg == 0.0 {
                return Ok(gt.to_vec());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(((request.frame as u64) << 32) | request.view as u64);
            let normal = Normal::new(0.0, sigma_deg.to_radians()).expect("sigma is finite and positive");
            Ok((0..n)
                .map(|p| {
                    let phi: f64 = rng.random::<f64>() * std::f64::consts::TAU;
                    let angle = normal.sample(&mut rng);
                    if !request.mask[p] || gt[p] == Vec3::zeros() {
                        return gt[p];
                    }
                    let (t, b) = tangent_basis(&gt[p]);
                    tilt(&gt[p], &(t * phi.cos() + b * phi.sin()), angle)
                })
                .collect())
        }
        NormalPrior::External { dir } => load_frame_map(dir, request.frame, request.width, request.height),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
        a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
    }

    #[test]
    fn unit_shading_is_identity() {
        let a = vec![Vec3::new(0.2, 0.4, 0.9); 4];
        let s = Image::filled(2, 2, 3, 1.0);
        let d = deshade_with_shading(&a, &s, &[true; 4], DEFAULT_S_FLOOR).unwrap();
        assert_eq!(d.albedo, a);
        assert!(d.confidence.iter().all(|c| *c == 1.0));
    }

    #[test]
    fn dark_pixels_pass_through() {
        let a = vec![Vec3::new(0.02, 0.03, 0.01)];
        let s = Image::from_vec3(1, 1, &[Vec3::new(0.5, 0.04, 0.5)]);
        let d = deshade_with_shading(&a, &s, &[true], DEFAULT_S_FLOOR).unwrap();
        assert_eq!(d.albedo[0], a[0]);
        assert_eq!(d.confidence[0], 0.0);
    }

    #[test]
    fn recovers_multiplicative_albedo() {
        let truth: Vec<Vec3> = (0..50).map(|k| Vec3::new(0.1 + 0.015 * k as f64, 0.5, 0.9 - 0.01 * k as f64)).collect();
        let shading: Vec<Vec3> = (0..50).map(|k| Vec3::repeat(0.06 + 0.05 * k as f64)).collect();
        let shaded: Vec<Vec3> = truth.iter().zip(&shading).map(|(a, s)| a.component_mul(s)).collect();
        let img = Image::from_vec3(50, 1, &shading);
        let d = deshade_with_shading(&shaded, &img, &[true; 50], DEFAULT_S_FLOOR).unwrap();
        for k in 0..50 {
            assert_eq!(d.confidence[k], 1.0);
            assert!((d.albedo[k] - truth[k]).amax() < 1e-12);
        }
        // Idempotent: re-shade then de-shade again.
        let again: Vec<Vec3> = d.albedo.iter().zip(&shading).map(|(a, s)| a.component_mul(s)).collect();
        let d2 = deshade_with_shading(&again, &img, &[true; 50], DEFAULT_S_FLOOR).unwrap();
        for k in 0..50 {
            assert!((d2.albedo[k] - d.albedo[k]).amax() < 1e-15);
        }
    }

    #[test]
    fn external_round_trip_and_missing_frame() {
        let dir = tempfile::tempdir().unwrap();
        let maps: Vec<Vec3> = (0..6).map(|k| Vec3::new(k as f64 * 0.125, 0.5, 0.25)).collect();
        crate::io::write_pfm(&frame_file(dir.path(), 3), &Image::from_vec3(3, 2, &maps)).unwrap();
        let req = DeshadeRequest {
            width: 3,
            height: 2,
            albedo_shaded: &maps,
            n_surf: &maps,
            mask: &[true; 6],
            frame: 3,
        };
        assert_eq!(deshade_external(&req, dir.path()).unwrap(), maps);
        let missing = DeshadeRequest { frame: 4, ..req };
        let err = deshade_external(&missing, dir.path()).unwrap_err().to_string();
        assert!(err.contains("000004.pfm"), "{err}");
        let wrong = DeshadeRequest { width: 2, height: 3, ..req };
        assert!(deshade_external(&wrong, dir.path()).is_err());
    }

    fn prior_request<'a>(n: &'a [Vec3], mask: &'a [bool], w: usize, frame: usize) -> NormalPriorRequest<'a> {
        NormalPriorRequest {
            width: w,
            height: n.len() / w,
            n_surf: n,
            i_rgb: n,
            mask,
            frame,
            view: 0,
        }
    }

    #[test]
    fn identity_and_zero_noise() {
        let n: Vec<Vec3> = (0..12).map(|k| Vec3::new(k as f64, 1.0, 2.0).normalize()).collect();
        let mask = vec![true; 12];
        let req = prior_request(&n, &mask, 4, 0);
        assert_eq!(normal_prior(&req, &NormalPrior::Identity, None).unwrap(), n);
        let gt: Vec<Vec3> = n.iter().map(|v| Vec3::new(v.z, v.x, v.y)).collect();
        let p = NormalPrior::GtNoisy { sigma_deg: 0.0, seed: 1 };
        assert_eq!(normal_prior(&req, &p, Some(&gt)).unwrap(), gt);
        assert!(matches!(normal_prior(&req, &p, None), Err(Error::Config(_))));
    }

    #[test]
    fn noisy_prior_has_half_normal_deviation() {
        let n = 128 * 128;
        let gt: Vec<Vec3> = (0..n).map(|k| Vec3::new((k as f64).sin(), 0.3, 1.0).normalize()).collect();
        let mask = vec![true; n];
        let req = prior_request(&gt, &mask, 128, 2);
        let p = NormalPrior::GtNoisy { sigma_deg: 10.0, seed: 42 };
        let out = normal_prior(&req, &p, Some(&gt)).unwrap();
        let mean = out.iter().zip(&gt).map(|(a, b)| angle_deg(a, b)).sum::<f64>() / n as f64;
        let want = 10.0 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((7.0..=13.0).contains(&mean) && (mean - want).abs() < 0.2, "{mean}");
        // Deterministic per frame, independent across frames.
        assert_eq!(normal_prior(&req, &p, Some(&gt)).unwrap(), out);
        let other = normal_prior(&prior_request(&gt, &mask, 128, 3), &p, Some(&gt)).unwrap();
        assert_ne!(other, out);
    }
}
