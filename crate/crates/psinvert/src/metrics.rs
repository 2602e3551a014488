//! Evaluation measures: mean angular error for unit-vector fields and
//! light directions, scale-invariant relative intensity error, and PSNR.

use crate::error::{Error, Result};
use crate::raster::{check_same_shape, Field3, Image, Mask};
use crate::vec3::UnitVec3;
use serde::Serialize;

/// PSNR reported when the mean squared error is exactly zero.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub normal_mae_deg: Option<f64>,
    pub light_dir_mae_deg: Option<f64>,
    pub intensity_si_error: Option<f64>,
    pub psnr_db: Option<f64>,
    pub n_images: usize,
    pub n_pixels: usize,
    pub config_echo: serde_json::Value,
}

/// Mean over the mask of the angle between paired unit vectors, degrees.
/// Also returns the per-pixel angular error map (unmasked pixels 0).
pub fn mean_angular_error(est: &Field3, gt: &Field3, mask: &Mask) -> Result<(f64, Image)> {
    check_same_shape(est.width, est.height, gt.width, gt.height, "est vs gt")?;
    check_same_shape(est.width, est.height, mask.width, mask.height, "fields vs mask")?;
    let mut map = Image::zeros(mask.width, mask.height);
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &m) in mask.data.iter().enumerate() {
        if !m {
            continue;
        }
        let a = est.data[i].normalize()?;
        let b = gt.data[i].normalize()?;
        let deg = a.angle_deg(&b);
        map.data[i] = deg;
        total += deg;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((total / count as f64, map))
}

/// Mean angle between paired light directions, degrees. Lights are paired
/// by index; image order fixes which light belongs to which image.
pub fn light_direction_mae(est: &[UnitVec3], gt: &[UnitVec3]) -> Result<f64> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "light counts: {} vs {}",
            est.len(),
            gt.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(est
        .iter()
        .zip(gt)
        .map(|(a, b)| a.angle_deg(b))
        .sum::<f64>()
        / est.len() as f64)
}

/// Closed-form least-squares scale aligning estimates to ground truth:
/// argmin_s sum (s e_i - gt_i)^2 = (sum e gt) / (sum e^2).
pub fn optimal_scale(est: &[f64], gt: &[f64]) -> Result<f64> {
    let denom: f64 = est.iter().map(|e| e * e).sum();
    if denom == 0.0 {
        return Err(Error::DegenerateEstimate);
    }
    let num: f64 = est.iter().zip(gt).map(|(e, g)| e * g).sum();
    Ok(num / denom)
}

/// Relative intensity error after optimal global rescaling:
/// mean |s e_i - gt_i| / gt_i.
pub fn scale_invariant_intensity_error(est: &[f64], gt: &[f64]) -> Result<f64> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "intensity counts: {} vs {}",
            est.len(),
            gt.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let s = optimal_scale(est, gt)?;
    Ok(est
        .iter()
        .zip(gt)
        .map(|(e, g)| (s * e - g).abs() / g)
        .sum::<f64>()
        / est.len() as f64)
}

pub fn psnr(img: &Image, reference: &Image, peak: f64) -> Result<f64> {
    check_same_shape(
        img.width,
        img.height,
        reference.width,
        reference.height,
        "psnr",
    )?;
    let mse: f64 = img
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / img.data.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

/// PSNR over masked pixels of several image pairs at once.
pub fn psnr_masked(pairs: &[(&Image, &Image)], mask: &Mask, peak: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (img, reference) in pairs {
        check_same_shape(
            img.width,
            img.height,
            mask.width,
            mask.height,
            "psnr vs mask",
        )?;
        check_same_shape(
            reference.width,
            reference.height,
            mask.width,
            mask.height,
            "psnr ref vs mask",
        )?;
        for (i, &m) in mask.data.iter().enumerate() {
            if m {
                let d = img.data[i] - reference.data[i];
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(psnr_from_mse(sum / count as f64, peak))
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vec3::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field_of(vecs: &[Vec3]) -> Field3 {
        Field3 {
            width: vecs.len(),
            height: 1,
            data: vecs.to_vec(),
        }
    }

    #[test]
    fn angular_error_identity_and_orthogonal() {
        let mask = Mask::filled(2, 1, true);
        let a = field_of(&[Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0)]);
        let (mae, _) = mean_angular_error(&a, &a, &mask).unwrap();
        assert_eq!(mae, 0.0);

        let b = field_of(&[Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)]);
        let (mae, map) = mean_angular_error(&a, &b, &mask).unwrap();
        assert!((mae - 90.0).abs() < 1e-12);
        assert!((map.at(0, 0) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn angular_error_mean_of_mixed_pixels() {
        let mask = Mask::filled(2, 1, true);
        let a = field_of(&[Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.0)]);
        let b = field_of(&[Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0)]);
        let (mae, _) = mean_angular_error(&a, &b, &mask).unwrap();
        assert!((mae - 45.0).abs() < 1e-12);
    }

    #[test]
    fn angular_error_symmetric_and_antipodal_safe() {
        let mask = Mask::filled(1, 1, true);
        let a = field_of(&[Vec3::new(0.0, 0.0, 1.0)]);
        let b = field_of(&[Vec3::new(0.0, 0.0, -1.0)]);
        let (ab, _) = mean_angular_error(&a, &b, &mask).unwrap();
        let (ba, _) = mean_angular_error(&b, &a, &mask).unwrap();
        assert_eq!(ab, ba);
        assert!((ab - 180.0).abs() < 1e-9);
        assert!(ab.is_finite());
    }

    #[test]
    fn intensity_error_examples() {
        assert_eq!(
            scale_invariant_intensity_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            0.0
        );
        // doubling the estimates changes nothing
        assert_eq!(
            scale_invariant_intensity_error(&[2.0, 4.0], &[1.0, 2.0]).unwrap(),
            0.0
        );
        // closed form: s = 6/5, errors (0.8/2 + 0.4/2) / 2 = 0.3
        let e = scale_invariant_intensity_error(&[1.0, 2.0], &[2.0, 2.0]).unwrap();
        assert!((e - 0.3).abs() < 1e-15);
        let s = optimal_scale(&[1.0, 2.0], &[2.0, 2.0]).unwrap();
        assert!((s - 1.2).abs() < 1e-15);
    }

    #[test]
    fn intensity_error_scale_invariance_power_of_two_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(2..20);
            let est: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..5.0)).collect();
            let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..5.0)).collect();
            let base = scale_invariant_intensity_error(&est, &gt).unwrap();
            for c in [2.0, 0.5, 1024.0] {
                let scaled: Vec<f64> = est.iter().map(|e| e * c).collect();
                let got = scale_invariant_intensity_error(&scaled, &gt).unwrap();
                assert_eq!(got, base, "power-of-two scaling must be exact");
            }
            let scaled: Vec<f64> = est.iter().map(|e| e * 3.7).collect();
            let got = scale_invariant_intensity_error(&scaled, &gt).unwrap();
            assert!((got - base).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_scale_matches_grid_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n = rng.gen_range(2..12);
            let est: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
            let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
            let s = optimal_scale(&est, &gt).unwrap();
            let objective = |s: f64| -> f64 {
                est.iter().zip(&gt).map(|(e, g)| (s * e - g).powi(2)).sum()
            };
            // brute force over a log grid
            let mut best = f64::INFINITY;
            let mut best_s = 0.0;
            for i in 0..10_000 {
                let cand = 1e-3 * (1e6f64).powf(i as f64 / 9_999.0);
                let v = objective(cand);
                if v < best {
                    best = v;
                    best_s = cand;
                }
            }
            assert!(
                (s - best_s).abs() / s.abs() < 2e-3,
                "closed form {s} vs scan {best_s}"
            );
            assert!(objective(s) <= best + 1e-12);
        }
    }

    #[test]
    fn degenerate_estimates_rejected() {
        assert!(matches!(
            scale_invariant_intensity_error(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::DegenerateEstimate)
        ));
    }

    #[test]
    fn psnr_values() {
        let a = Image {
            width: 2,
            height: 1,
            data: vec![0.5, 0.25],
        };
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);

        // uniform squared error of 1e-4 gives 40 dB
        let mut b = a.clone();
        for v in &mut b.data {
            *v += 0.01;
        }
        let got = psnr(&a, &b, 1.0).unwrap();
        assert!((got - 40.0).abs() < 1e-9);

        let c = Image {
            width: 1,
            height: 1,
            data: vec![0.0],
        };
        assert!(psnr(&a, &c, 1.0).is_err());
    }

    #[test]
    fn masked_psnr_ignores_background() {
        let mut mask = Mask::filled(2, 1, false);
        mask.set(0, 0, true);
        let a = Image {
            width: 2,
            height: 1,
            data: vec![0.5, 0.0],
        };
        let b = Image {
            width: 2,
            height: 1,
            data: vec![0.51, 100.0],
        };
        let got = psnr_masked(&[(&a, &b)], &mask, 1.0).unwrap();
        assert!((got - 40.0).abs() < 1e-9);
    }
}
