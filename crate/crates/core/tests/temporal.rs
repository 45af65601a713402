use proptest::prelude::*;
use relit_core::deshade::{normal_prior, NormalPrior, NormalPriorRequest};
use relit_core::engine::temporal_consistency;
use relit_core::Vec3;

const W: usize = 64;

fn noisy_frames(gt: &[Vec3], sigma_deg: f64, frames: usize) -> Vec<Vec<Vec3>> {
    let mask = vec![true; gt.len()];
    (0..frames)
        .map(|frame| {
            let req = NormalPriorRequest {
                width: W,
                height: gt.len() / W,
                n_surf: gt,
                i_rgb: gt,
                mask: &mask,
                frame,
                view: 0,
            };
            normal_prior(&req, &NormalPrior::GtNoisy { sigma_deg, seed: 7 }, Some(gt)).unwrap()
        })
        .collect()
}

fn identity_maps(n: usize, frames: usize) -> Vec<Vec<Option<usize>>> {
    vec![(0..n).map(Some).collect(); frames - 1]
}

#[test]
fn temporal_metric_grows_with_prior_noise() {
    let gt: Vec<Vec3> = (0..W * W).map(|k| Vec3::new((k as f64 * 0.1).sin() * 0.3, 0.2, 1.0).normalize()).collect();
    let maps = identity_maps(gt.len(), 4);
    assert_eq!(temporal_consistency(&noisy_frames(&gt, 0.0, 4), &maps).unwrap(), 0.0);
    let scores: Vec<f64> = [2.0, 5.0, 10.0].iter().map(|&s| temporal_consistency(&noisy_frames(&gt, s, 4), &maps).unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] < w[1]), "{scores:?}");
}

proptest! {
    #[test]
    fn identical_frames_score_zero(x in -1.0..1.0f64, y in -1.0..1.0f64, frames in 2usize..5) {
        let n = Vec3::new(x, y, 1.0).normalize();
        let normals = vec![vec![n; 9]; frames];
        prop_assert_eq!(temporal_consistency(&normals, &identity_maps(9, frames)).unwrap(), 0.0);
    }
}
