use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::Vec3;

/// Normal-incidence Fresnel reflectance for dielectrics.
pub const F0: f64 = 0.04;
const UNIT_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BrdfMode {
    /// `R = albedo + roughness`, direction independent.
    #[default]
    Literal,
    /// `albedo/π` plus a GGX / height-correlated Smith / Schlick lobe.
    Microfacet,
}

impl std::str::FromStr for BrdfMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(BrdfMode::Literal),
            "microfacet" => Ok(BrdfMode::Microfacet),
            _ => Err(Error::Config(format!("unknown BRDF mode {s:?} (literal | microfacet)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialSample {
    pub albedo: Vec3,
    pub roughness: f64,
}

/// BRDF value with partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrdfEval {
    pub value: Vec3,
    /// `∂R_c/∂albedo_c` (the Jacobian is diagonal).
    pub d_albedo: f64,
    /// `∂R_c/∂roughness`, equal for every channel.
    pub d_roughness: f64,
    /// `∂R_c/∂n`, equal for every channel (only the specular lobe depends on n).
    pub d_normal: Vec3,
}

fn check_unit(v: &Vec3, what: &str) -> Result<()> {
    if (v.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::arg(format!("{what} is not unit length (|v| = {})", v.norm())));
    }
    Ok(())
}

/// Reflectance `R_s` for one light/view pair.
pub fn brdf_eval(material: &MaterialSample, n: &Vec3, wi: &Vec3, wo: &Vec3, mode: BrdfMode) -> Result<Vec3> {
    check_unit(n, "normal")?;
    check_unit(wi, "incident direction")?;
    check_unit(wo, "outgoing direction")?;
    Ok(brdf_with_grad(material, n, wi, wo, mode).value)
}

/// GGX distribution `D(c_h)` and `dD/dc_h`, `dD/da`.
#[inline]
fn ggx(ch: f64, a: f64) -> (f64, f64, f64) {
    let a2 = a * a;
    let q = ch * ch * (a2 - 1.0) + 1.0;
    let d = a2 / (PI * q * q);
    let d_ch = -4.0 * a2 * ch * (a2 - 1.0) / (PI * q * q * q);
    let d_a = 2.0 * a / (PI * q * q * q) * (q - 2.0 * a2 * ch * ch);
    (d, d_ch, d_a)
}

/// Smith Λ for cosine `c` and its derivatives w.r.t. `c` and `a`.
#[inline]
fn smith_lambda(c: f64, a: f64) -> (f64, f64, f64) {
    let t2 = (1.0 - c * c).max(0.0) / (c * c);
    let s = (1.0 + a * a * t2).sqrt();
    let lambda = 0.5 * (s - 1.0);
    let d_c = -a * a / (2.0 * s * c * c * c);
    let d_a = a * t2 / (2.0 * s);
    (lambda, d_c, d_a)
}

/// Unchecked evaluation with derivatives; `wo` is treated as a constant.
pub fn brdf_with_grad(material: &MaterialSample, n: &Vec3, wi: &Vec3, wo: &Vec3, mode: BrdfMode) -> BrdfEval {
    match mode {
        BrdfMode::Literal => BrdfEval {
            value: material.albedo.add_scalar(material.roughness),
            d_albedo: 1.0,
            d_roughness: 1.0,
            d_normal: Vec3::zeros(),
        },
        BrdfMode::Microfacet => {
            let diffuse = material.albedo / PI;
            let ci = n.dot(wi);
            let co = n.dot(wo);
            let h = wi + wo;
            let hl = h.norm();
            if ci <= 0.0 || co <= 0.0 || hl == 0.0 {
                return BrdfEval {
                    value: diffuse,
                    d_albedo: 1.0 / PI,
                    d_roughness: 0.0,
                    d_normal: Vec3::zeros(),
                };
            }
            let h = h / hl;
            let a = material.roughness;
            let ch = n.dot(&h);
            let (d, dd_ch, dd_a) = ggx(ch, a);
            let (li, dli_c, dli_a) = smith_lambda(ci, a);
            let (lo, dlo_c, dlo_a) = smith_lambda(co, a);
            let g = 1.0 / (1.0 + li + lo);
            let f = F0 + (1.0 - F0) * (1.0 - h.dot(wo)).max(0.0).powi(5);
            let spec = d * f * g / (4.0 * ci * co);
            // Log-derivatives of D·G/(ci·co).
            let dlog_ch = dd_ch / d;
            let dlog_ci = -g * dli_c - 1.0 / ci;
            let dlog_co = -g * dlo_c - 1.0 / co;
            let dlog_a = dd_a / d - g * (dli_a + dlo_a);
            // h depends only on wi and wo, so n enters through ch, ci, co.
            let d_normal = (h * dlog_ch + wi * dlog_ci + wo * dlog_co) * spec;
            BrdfEval {
                value: diffuse.add_scalar(spec),
                d_albedo: 1.0 / PI,
                d_roughness: spec * dlog_a,
                d_normal,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(a: f64, r: f64) -> MaterialSample {
        MaterialSample {
            albedo: Vec3::repeat(a),
            roughness: r,
        }
    }

    #[test]
    fn literal_values() {
        let z = Vec3::z();
        let r = brdf_eval(&mat(0.5, 0.2), &z, &z, &z, BrdfMode::Literal).unwrap();
        assert!((r - Vec3::repeat(0.7)).norm() < 1e-15);
        let r = brdf_eval(&mat(0.3, 0.0), &z, &z, &z, BrdfMode::Literal).unwrap();
        assert_eq!(r, Vec3::repeat(0.3));
        assert!(brdf_eval(&mat(0.3, 0.0), &(z * 1.1), &z, &z, BrdfMode::Literal).is_err());
    }

    #[test]
    fn microfacet_normal_incidence_by_hand() {
        // ω_i = ω_o = n: h = n, D = 1/(π a²), F = F0, G = 1.
        let z = Vec3::z();
        let a: f64 = 0.5;
        let d = 1.0 / (PI * a * a);
        let want = 0.4 / PI + d * 0.04 / 4.0;
        let r = brdf_eval(&mat(0.4, a), &z, &z, &z, BrdfMode::Microfacet).unwrap();
        for c in 0..3 {
            assert!((r[c] - want).abs() < 1e-14, "{} vs {want}", r[c]);
        }
    }

    #[test]
    fn microfacet_below_horizon_has_no_lobe() {
        let z = Vec3::z();
        let wi = Vec3::new(1.0, 0.0, -0.2).normalize();
        let r = brdf_eval(&mat(0.4, 0.3), &z, &wi, &z, BrdfMode::Microfacet).unwrap();
        assert_eq!(r, Vec3::repeat(0.4 / PI));
    }

    #[test]
    fn microfacet_derivatives_match_finite_differences() {
        let n = Vec3::new(0.1, -0.2, 1.0).normalize();
        let wi = Vec3::new(0.5, 0.3, 0.8).normalize();
        let wo = Vec3::new(-0.3, 0.1, 0.9).normalize();
        let m = mat(0.4, 0.35);
        let e = brdf_with_grad(&m, &n, &wi, &wo, BrdfMode::Microfacet);
        let h = 1e-6;
        let spec = |m: &MaterialSample, n: &Vec3| brdf_with_grad(m, n, &wi, &wo, BrdfMode::Microfacet).value[0];
        let fd_r = (spec(&mat(0.4, 0.35 + h), &n) - spec(&mat(0.4, 0.35 - h), &n)) / (2.0 * h);
        assert!((fd_r - e.d_roughness).abs() / fd_r.abs() < 1e-6);
        for k in 0..3 {
            let mut np = n;
            np[k] += h;
            let mut nm = n;
            nm[k] -= h;
            let fd = (spec(&m, &np) - spec(&m, &nm)) / (2.0 * h);
            assert!((fd - e.d_normal[k]).abs() / fd.abs().max(1e-8) < 1e-6, "{k}: {fd} vs {}", e.d_normal[k]);
        }
    }
}
