//! Gradient-fidelity suite: reverse-mode gradients of the full pipeline
//! (positional encoding, both MLPs, pixel shade, absolute-difference loss)
//! against central differences, at randomized non-kink configurations.

use crate::autodiff::{grad_check, grad_check_params, Real};
use crate::error::Result;
use crate::field::{FieldModel, FieldModelSpec, LightTable, MlpLayout};
use crate::shading::{psb_weights, shade_pixel, PsbLevel};
use crate::vec3::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step for the suite; small enough that the guarded
/// margins below keep every evaluation on one smooth branch.
pub const CHECK_EPS: f64 = 1e-5;

/// Minimum distance from the relu/abs kinks accepted by the sampler.
const KINK_MARGIN: f64 = 1e-3;

impl MlpLayout {
    /// Smallest |preactivation| seen on rectified layers for this input;
    /// used to reject configurations that sit on a relu kink.
    pub fn min_abs_preactivation(&self, values: &[f64], features: &[f64]) -> f64 {
        let mut x = features.to_vec();
        let mut min_abs = f64::INFINITY;
        for (li, &(w, b)) in self.layers.iter().enumerate() {
            let (infan, outfan) = (
                if li == 0 { self.spec.input } else { self.spec.hidden },
                if li + 1 == self.layers.len() {
                    self.spec.output
                } else {
                    self.spec.hidden
                },
            );
            let last = li + 1 == self.layers.len();
            let mut y = Vec::with_capacity(outfan);
            for j in 0..outfan {
                let mut acc = values[b + j];
                for i in 0..infan {
                    acc += values[w + j * infan + i] * x[i];
                }
                if !last {
                    min_abs = min_abs.min(acc.abs());
                    y.push(acc.max(0.0));
                } else {
                    y.push(acc);
                }
            }
            x = y;
        }
        min_abs
    }
}

/// Runs `grad_check` over every scalar primitive at random non-kink
/// points; returns the max relative error seen.
pub fn primitive_checks(count: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let a = rng.gen_range(0.2..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let b = rng.gen_range(0.2..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let err = grad_check(
            |_t, v| {
                let (x, y) = (v[0].clone(), v[1].clone());
                let pos = (x.clone() * x.clone()).shift(0.5);
                Ok(x.clone() * y.clone() + x.clone() / y.clone() - y.clone().exp()
                    + pos.ln()
                    + pos.sqrt()
                    + x.clone().relu()
                    + y.clone().abs_val()
                    + x.softplus())
            },
            &[a, b],
            CHECK_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

struct PipelineConfig {
    model: FieldModel,
    roughness: Vec<f64>,
    weights: Vec<f64>,
    feats: Vec<f64>,
    observation: f64,
}

/// Samples one full-pipeline configuration whose evaluation is bounded
/// away from every kink (relu preactivations, the shadow clamp, the
/// absolute loss), so central differences are trustworthy.
fn sample_config(rng: &mut ChaCha8Rng) -> PipelineConfig {
    loop {
        let k = rng.gen_range(1..=3usize);
        let spec = FieldModelSpec {
            encoding_levels: rng.gen_range(2..=6),
            normal_hidden: rng.gen_range(6..=12),
            normal_layers: rng.gen_range(2..=3),
            material_hidden: rng.gen_range(6..=12),
            material_layers: rng.gen_range(2..=4),
            k,
            initial_diffuse: rng.gen_range(0.1..0.8),
        };
        // one light well inside the visible hemisphere
        let theta = rng.gen_range(0.0..0.6f64);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = Vec3::new(
            theta.sin() * phi.cos(),
            theta.sin() * phi.sin(),
            theta.cos(),
        )
        .normalize()
        .unwrap();
        let lights = LightTable {
            directions: vec![dir],
            intensities: vec![rng.gen_range(0.5..1.5)],
        };
        let mut ladder: Vec<f64> = (0..k).map(|_| -rng.gen_range(1.0..20.0)).collect();
        ladder.sort_by(f64::total_cmp);
        let trainable = rng.gen_bool(0.5);
        let model = FieldModel::new(
            &spec,
            &lights,
            trainable.then_some(&ladder[..]),
            rng.gen(),
        );
        let level = PsbLevel::new(rng.gen_range(0.0..=k as f64), k);
        let weights = psb_weights(&level);
        let (x, y) = (rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
        let feats = model.encoder.encode(x, y).unwrap();

        // reject configurations near any kink
        let values = model.store.values();
        let pre_n = model.normal_mlp.min_abs_preactivation(values, &feats);
        let pre_m = model.material_mlp.min_abs_preactivation(values, &feats);
        if pre_n < KINK_MARGIN || pre_m < KINK_MARGIN {
            continue;
        }
        let n = match model.normal_at(values, x, y) {
            Ok(n) => n,
            Err(_) => continue,
        };
        let n_dot_l = n.dot(&lights.directions[0]);
        if n_dot_l < 0.05 {
            continue;
        }
        // choose the observation away from the rendered value
        let m = {
            let mat = model.material_at(values, x, y).unwrap();
            let light = crate::shading::Light::new(lights.directions[0], lights.intensities[0]);
            let bank = crate::shading::SpecularBasisBank::new(ladder.clone(), trainable).unwrap();
            crate::shading::render_pixel_with_weights(
                &n,
                &mat,
                &light,
                &crate::vec3::UnitVec3::z_axis(),
                &bank,
                &weights,
            )
            .unwrap()
        };
        let observation = m + rng.gen_range(0.05..0.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        if (m - observation).abs() < KINK_MARGIN {
            continue;
        }
        return PipelineConfig {
            roughness: ladder,
            weights,
            feats,
            observation,
            model,
        };
    }
}

/// Max relative error of autodiff vs central differences over `configs`
/// random full-pipeline evaluations.
pub fn pipeline_checks(configs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5049_5045u64);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let c = sample_config(&mut rng);
        let err = grad_check_params(
            |tape| {
                let (l, e) = c.model.light_tape(tape, 0)?;
                let roughness = c.model.roughness_tape(tape, &c.roughness);
                let n = c.model.normal_tape(tape, &c.feats)?;
                let (rho_d, rho_s) = c.model.material_tape(tape, &c.feats);
                let m = shade_pixel(
                    &n,
                    &rho_d,
                    &rho_s,
                    &roughness,
                    &c.weights,
                    &l,
                    &e,
                    Vec3::new(0.0, 0.0, 1.0),
                )?;
                Ok(m.shift(-c.observation).abs_val())
            },
            c.model.store.values(),
            CHECK_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_suite_is_tight() {
        let err = primitive_checks(25, 3).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn pipeline_suite_small_sample() {
        let err = pipeline_checks(10, 4).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}
