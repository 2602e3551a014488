//! Synthetic scenes with full ground truth: analytic geometry, chosen
//! materials, sampled lights, images rendered with the same forward model
//! the optimizer fits (attached shadows included, cast shadows not
//! modeled).

use super::PhotometricDataset;
use crate::error::{Error, Result};
use crate::field::LightTable;
use crate::raster::{Field3, Mask};
use crate::shading::{
    render_image_with_weights, Light, Material, MaterialField, SpecularBasisBank,
};
use crate::vec3::{UnitVec3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthShape {
    Sphere { radius_px: f64 },
    Heightfield { amplitude: f64, frequency: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaterialLayout {
    Uniform,
    TwoRegion,
    TexturedNoise,
}

#[derive(Debug, Clone)]
pub struct SynthSceneSpec {
    pub shape: SynthShape,
    pub width: usize,
    pub height: usize,
    pub material: MaterialLayout,
    pub k: usize,
    pub r_top: f64,
    pub r_bottom: f64,
    pub n_lights: usize,
    /// Lights are sampled in a spherical cap of this half-angle around
    /// the view axis; must stay below 90 so every light has positive z.
    pub cap_deg: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        SynthSceneSpec {
            shape: SynthShape::Sphere { radius_px: 28.0 },
            width: 64,
            height: 64,
            material: MaterialLayout::TwoRegion,
            k: 12,
            r_top: 300.0,
            r_bottom: 10.0,
            n_lights: 16,
            cap_deg: 45.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// A generated dataset together with the exact fields that produced it.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub dataset: PhotometricDataset,
    pub materials: MaterialField,
    pub bank: SpecularBasisBank,
}

fn sphere_geometry(w: usize, h: usize, radius: f64) -> Result<(Mask, Field3)> {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    if radius <= 1.0 || radius > cx || radius > cy {
        return Err(Error::BadSpec(format!(
            "sphere radius {radius} does not fit in {w}x{h}"
        )));
    }
    let mut mask = Mask::filled(w, h, false);
    let mut normals = Field3::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let rho2 = dx * dx + dy * dy;
            if rho2 <= radius * radius {
                mask.set(x, y, true);
                let nz = (1.0 - rho2 / (radius * radius)).max(0.0).sqrt();
                let n = Vec3::new(dx / radius, dy / radius, nz);
                normals.set(x, y, n.normalize()?.as_vec());
            }
        }
    }
    Ok((mask, normals))
}

fn heightfield_geometry(
    w: usize,
    h: usize,
    amplitude: f64,
    frequency: f64,
) -> Result<(Mask, Field3)> {
    if amplitude <= 0.0 || frequency <= 0.0 || w < 4 || h < 4 {
        return Err(Error::BadSpec(format!(
            "bad heightfield: amplitude {amplitude}, frequency {frequency}, {w}x{h}"
        )));
    }
    let mut mask = Mask::filled(w, h, false);
    let mut normals = Field3::zeros(w, h);
    let tau = std::f64::consts::TAU;
    for y in 0..h {
        for x in 0..w {
            // one-pixel border left unmasked so the contour prior has a rim
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                continue;
            }
            mask.set(x, y, true);
            let u = x as f64 / (w - 1) as f64;
            let v = y as f64 / (h - 1) as f64;
            // z(u, v) = A sin(tau f u) sin(tau f v), slopes per pixel
            let dz_dx = amplitude * tau * frequency / (w - 1) as f64
                * (tau * frequency * u).cos()
                * (tau * frequency * v).sin();
            let dz_dy = amplitude * tau * frequency / (h - 1) as f64
                * (tau * frequency * u).sin()
                * (tau * frequency * v).cos();
            let n = Vec3::new(-dz_dx, -dz_dy, 1.0);
            normals.set(x, y, n.normalize()?.as_vec());
        }
    }
    Ok((mask, normals))
}

fn build_materials(
    spec: &SynthSceneSpec,
    mask: &Mask,
    rng: &mut ChaCha8Rng,
) -> MaterialField {
    let (w, h, k) = (spec.width, spec.height, spec.k);
    let mut field = MaterialField::zeros(w, h, k);
    let cx = (w as f64 - 1.0) / 2.0;
    // smooth random sinusoid mix for the textured layout
    let phases: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(1.0..4.0),
                rng.gen_range(1.0..4.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let shiny = 1.min(k - 1); // second-sharpest lobe
    let mid = (k / 3).min(k - 1);
    let broad = (k * 5 / 6).min(k - 1);
    for y in 0..h {
        for x in 0..w {
            if !mask.at(x, y) {
                continue;
            }
            let px = y * w + x;
            let mut m = Material {
                rho_d: 0.0,
                rho_s: vec![0.0; k],
            };
            match spec.material {
                MaterialLayout::Uniform => {
                    m.rho_d = 0.3;
                    m.rho_s[0] = 0.6;
                    m.rho_s[broad] = 0.15;
                }
                MaterialLayout::TwoRegion => {
                    // both regions carry a broad lobe (wide-support
                    // shading cue); the shiny half adds a sharp spike
                    if (x as f64) < cx {
                        m.rho_d = 0.6;
                        m.rho_s[mid] = 0.25;
                        m.rho_s[broad] = 0.2;
                    } else {
                        m.rho_d = 0.25;
                        m.rho_s[shiny] = 0.5;
                        m.rho_s[broad] = 0.25;
                    }
                }
                MaterialLayout::TexturedNoise => {
                    let u = x as f64 / (w - 1) as f64;
                    let v = y as f64 / (h - 1) as f64;
                    let mut t = 0.0;
                    for &(fu, fv, p) in &phases {
                        t += (fu * u + fv * v + p).sin();
                    }
                    let t = (t / 3.0 + 1.0) / 2.0; // in [0, 1]
                    m.rho_d = 0.25 + 0.45 * t;
                    m.rho_s[shiny] = 0.1 + 0.4 * (1.0 - t);
                    m.rho_s[broad] = 0.15;
                }
            }
            field.set(px, &m);
        }
    }
    field
}

fn sample_lights(spec: &SynthSceneSpec, rng: &mut ChaCha8Rng) -> Result<LightTable> {
    if !(spec.cap_deg > 0.0 && spec.cap_deg < 90.0) {
        return Err(Error::BadSpec(format!(
            "light cap angle {} must lie in (0, 90) so all lights face the camera",
            spec.cap_deg
        )));
    }
    if spec.n_lights == 0 {
        return Err(Error::BadSpec("need at least one light".into()));
    }
    let cos_cap = spec.cap_deg.to_radians().cos();
    let mut directions = Vec::with_capacity(spec.n_lights);
    let mut intensities = Vec::with_capacity(spec.n_lights);
    for _ in 0..spec.n_lights {
        let z = rng.gen_range(cos_cap..1.0);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let rho = (1.0 - z * z).sqrt();
        let d = Vec3::new(rho * phi.cos(), rho * phi.sin(), z).normalize()?;
        debug_assert!(d.z() > 0.0);
        directions.push(d);
        intensities.push(rng.gen_range(0.5..1.5));
    }
    Ok(LightTable {
        directions,
        intensities,
    })
}

/// Generates a dataset with ground-truth normals, materials, and lights.
/// Images are rendered with the full (all lobes active) forward model;
/// optional Gaussian pixel noise is added and clamped at zero.
pub fn synth_scene(spec: &SynthSceneSpec) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5359_4e54_48u64);
    let (mask, normals) = match spec.shape {
        SynthShape::Sphere { radius_px } => sphere_geometry(spec.width, spec.height, radius_px)?,
        SynthShape::Heightfield {
            amplitude,
            frequency,
        } => heightfield_geometry(spec.width, spec.height, amplitude, frequency)?,
    };
    let bank = SpecularBasisBank::from_ladder(spec.k, spec.r_top, spec.r_bottom, false)?;
    let materials = build_materials(spec, &mask, &mut rng);
    let lights = sample_lights(spec, &mut rng)?;

    let weights = vec![1.0; spec.k];
    let mut images = Vec::with_capacity(spec.n_lights);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    for j in 0..spec.n_lights {
        let light = Light::new(lights.directions[j], lights.intensities[j]);
        let mut img =
            render_image_with_weights(&normals, &materials, &light, &bank, &weights, &mask)?;
        if spec.noise_sigma > 0.0 {
            for (i, v) in img.data.iter_mut().enumerate() {
                if mask.data[i] {
                    *v = (*v + noise.sample(&mut rng)).max(0.0);
                }
            }
        }
        images.push(img);
    }

    let names = (0..spec.n_lights)
        .map(|j| format!("img_{j:03}.pfm"))
        .collect();
    Ok(SynthScene {
        dataset: PhotometricDataset {
            images,
            names,
            mask,
            view: UnitVec3::z_axis(),
            gt_lights: Some(lights),
            gt_normals: Some(normals),
        },
        materials,
        bank,
    })
}

/// Float32-rounded copy of a generated scene's images and ground truth,
/// matching what a dataset looks like after one save/load cycle.
pub fn quantize_to_f32(ds: &mut PhotometricDataset) {
    for img in &mut ds.images {
        for v in &mut img.data {
            *v = *v as f32 as f64;
        }
    }
    if let Some(n) = &mut ds.gt_normals {
        for v in &mut n.data {
            *v = Vec3::new(v.x as f32 as f64, v.y as f32 as f64, v.z as f32 as f64);
        }
    }
}
