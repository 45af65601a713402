use crate::error::{Error, Result};
use crate::Vec3;

/// Mean per-channel `|n_t(p) - n_{t+1}(c_t(p))|` over all corresponding pixel
/// pairs of consecutive frames, times 1000. `correspondences[t][p]` maps
/// pixel `p` of frame `t` to a pixel of frame `t + 1`, or `None`.
pub fn temporal_consistency(normals: &[Vec<Vec3>], correspondences: &[Vec<Option<usize>>]) -> Result<f64> {
    if normals.len() < 2 {
        return Ok(0.0);
    }
    if correspondences.len() != normals.len() - 1 {
        return Err(Error::arg(format!(
            "{} frames need {} correspondence maps, got {}",
            normals.len(),
            normals.len() - 1,
            correspondences.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, map) in correspondences.iter().enumerate() {
        let (a, b) = (&normals[t], &normals[t + 1]);
        if map.len() != a.len() {
            return Err(Error::arg(format!("correspondence map {t} has {} entries for {} pixels", map.len(), a.len())));
        }
        for (p, q) in map.iter().enumerate() {
            let Some(q) = *q else { continue };
            if q >= b.len() {
                return Err(Error::arg(format!("frame {t} pixel {p} maps to {q}, outside frame {}", t + 1)));
            }
            sum += (a[p] - b[q]).abs().sum() / 3.0;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64 * 1e3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_maps_score_zero() {
        let n = vec![vec![Vec3::z(); 4]; 3];
        let ident: Vec<Option<usize>> = (0..4).map(Some).collect();
        assert_eq!(temporal_consistency(&n, &[ident.clone(), ident]).unwrap(), 0.0);
    }

    #[test]
    fn known_difference() {
        let a = vec![Vec3::new(0.0, 0.0, 1.0), Vec3::z()];
        let b = vec![Vec3::new(0.0, 0.003, 1.0), Vec3::x()];
        // Only pixel 0 corresponds: |0.003| / 3 per channel.
        let v = temporal_consistency(&[a, b], &[vec![Some(0), None]]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_maps_are_rejected() {
        let n = vec![vec![Vec3::z(); 2]; 2];
        assert!(temporal_consistency(&n, &[]).is_err());
        assert!(temporal_consistency(&n, &[vec![Some(0)]]).is_err());
        assert!(temporal_consistency(&n, &[vec![Some(5), None]]).is_err());
    }
}
