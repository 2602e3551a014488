//! Physically based pixel rendering: diffuse term plus a bank of
//! spherical-Gaussian specular lobes, with progressive activation of the
//! lobes from shiny to rough over the course of an optimization.

use crate::autodiff::{Real, V3};
use crate::error::{Error, Result};
use crate::raster::{check_same_shape, Field3, Image, Mask};
use crate::vec3::{UnitVec3, Vec3, DEGENERACY_EPS};

/// Bank of spherical-Gaussian roughness values, sharpest (most negative)
/// first.
#[derive(Debug, Clone)]
pub struct SpecularBasisBank {
    roughness: Vec<f64>,
    pub trainable: bool,
}

impl SpecularBasisBank {
    pub fn new(roughness: Vec<f64>, trainable: bool) -> Result<Self> {
        if roughness.is_empty()
            || roughness.iter().any(|&r| !(r < 0.0))
            || roughness.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::BadLadder {
                k: roughness.len(),
                r_top: roughness.first().copied().unwrap_or(f64::NAN),
                r_bottom: roughness.last().copied().unwrap_or(f64::NAN),
            });
        }
        Ok(SpecularBasisBank {
            roughness,
            trainable,
        })
    }

    pub fn from_ladder(k: usize, r_top: f64, r_bottom: f64, trainable: bool) -> Result<Self> {
        Self::new(roughness_ladder(k, r_top, r_bottom)?, trainable)
    }

    pub fn k(&self) -> usize {
        self.roughness.len()
    }

    pub fn roughness(&self) -> &[f64] {
        &self.roughness
    }
}

/// Per-pixel reflectance: diffuse albedo plus one specular albedo per basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    pub rho_d: f64,
    pub rho_s: Vec<f64>,
}

impl Material {
    pub fn diffuse(rho_d: f64) -> Self {
        Material {
            rho_d,
            rho_s: Vec::new(),
        }
    }

    pub fn specular_sum(&self) -> f64 {
        self.rho_s.iter().sum()
    }
}

/// One distant light; intensity is stored in log space so it stays positive.
#[derive(Debug, Clone, Copy)]
pub struct Light {
    pub direction: UnitVec3,
    pub log_intensity: f64,
}

impl Light {
    pub fn new(direction: UnitVec3, intensity: f64) -> Self {
        assert!(intensity > 0.0);
        Light {
            direction,
            log_intensity: intensity.ln(),
        }
    }

    pub fn intensity(&self) -> f64 {
        self.log_intensity.exp()
    }
}

/// Activation level of the progressive specular bases, `0 <= alpha <= k`.
#[derive(Debug, Clone, Copy)]
pub struct PsbLevel {
    alpha: f64,
    k: usize,
}

impl PsbLevel {
    pub fn new(alpha: f64, k: usize) -> Self {
        PsbLevel {
            alpha: alpha.clamp(0.0, k as f64),
            k,
        }
    }

    /// All bases active.
    pub fn full(k: usize) -> Self {
        PsbLevel {
            alpha: k as f64,
            k,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Unit bisector of the view and light directions.
pub fn half_vector(v: &UnitVec3, l: &UnitVec3) -> Result<UnitVec3> {
    (v.as_vec() + l.as_vec()).normalize()
}

/// `k` negative roughness values from `-r_top` to `-r_bottom` with
/// logarithmic spacing. Endpoints are pinned exactly.
pub fn roughness_ladder(k: usize, r_top: f64, r_bottom: f64) -> Result<Vec<f64>> {
    if k < 2 || !(r_top > r_bottom) || !(r_bottom > 0.0) {
        return Err(Error::BadLadder {
            k,
            r_top,
            r_bottom,
        });
    }
    let ln_t = r_top.ln();
    let ln_b = r_bottom.ln();
    let mut out = Vec::with_capacity(k);
    for i in 1..=k {
        let r = if i == 1 {
            -r_top
        } else if i == k {
            -r_bottom
        } else {
            -(ln_t - (ln_t - ln_b) * (i - 1) as f64 / (k - 1) as f64).exp()
        };
        out.push(r);
    }
    Ok(out)
}

/// Activation weight of basis `i` (1-based). Basis `i` ramps in with a
/// half-cosine while `alpha` crosses `[i-1, i]`, so the sharpest basis
/// opens first and every basis is fully active at `alpha = k`.
pub fn psb_weight(level: &PsbLevel, i: usize) -> f64 {
    assert!(i >= 1 && i <= level.k, "basis index out of range");
    let t = level.alpha - (i - 1) as f64;
    if t <= 0.0 {
        0.0
    } else if t < 1.0 {
        0.5 * (1.0 - (t * std::f64::consts::PI).cos())
    } else {
        1.0
    }
}

pub fn psb_weights(level: &PsbLevel) -> Vec<f64> {
    (1..=level.k).map(|i| psb_weight(level, i)).collect()
}

/// Weighted sum of specular lobes at a given normal/half-vector pair.
pub fn specular_response(
    n: &UnitVec3,
    h: &UnitVec3,
    material: &Material,
    bank: &SpecularBasisBank,
    level: &PsbLevel,
) -> f64 {
    let one_minus = 1.0 - n.dot(h);
    let mut acc = 0.0;
    for (i, (&r, &rho)) in bank.roughness().iter().zip(&material.rho_s).enumerate() {
        let w = psb_weight(level, i + 1);
        if w != 0.0 {
            acc += w * rho * (r * one_minus).exp();
        }
    }
    acc
}

/// Generic pixel shade shared by the f64 renderer and the training tapes:
/// `e * (rho_d + sum_i w_i rho_s_i exp(r_i (1 - n.h))) * max(n.l, 0)`.
///
/// The per-basis weights are plain constants (the activation schedule is
/// not differentiated). The specular sum is always evaluated and zeroed by
/// the shadow factor, so the recorded graph does not depend on n.l.
pub fn shade_pixel<S: Real>(
    n: &V3<S>,
    rho_d: &S,
    rho_s: &[S],
    roughness: &[S],
    weights: &[f64],
    light_dir: &V3<S>,
    intensity: &S,
    view: Vec3,
) -> Result<S> {
    let h = light_dir.shift_vec(view).normalize(DEGENERACY_EPS)?;
    let one_minus_nh = n.dot(&h).scale(-1.0).shift(1.0);
    let mut brdf = rho_d.clone();
    for i in 0..rho_s.len() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let lobe = (roughness[i].clone() * one_minus_nh.clone()).exp();
        brdf = brdf + (rho_s[i].clone() * lobe).scale(w);
    }
    let shadow = n.dot(light_dir).relu();
    Ok(intensity.clone() * brdf * shadow)
}

pub fn render_pixel(
    n: &UnitVec3,
    material: &Material,
    light: &Light,
    v: &UnitVec3,
    bank: &SpecularBasisBank,
    level: &PsbLevel,
) -> Result<f64> {
    render_pixel_with_weights(n, material, light, v, bank, &psb_weights(level))
}

pub fn render_pixel_with_weights(
    n: &UnitVec3,
    material: &Material,
    light: &Light,
    v: &UnitVec3,
    bank: &SpecularBasisBank,
    weights: &[f64],
) -> Result<f64> {
    shade_pixel(
        &V3::from_vec3(n.as_vec()),
        &material.rho_d,
        &material.rho_s,
        bank.roughness(),
        weights,
        &V3::from_vec3(light.direction.as_vec()),
        &light.intensity(),
        v.as_vec(),
    )
}

/// View direction that produces a mirror specular spike for the given
/// normal and light: the reflection of `l` about `n`.
pub fn specular_spike_view(n: &UnitVec3, l: &UnitVec3) -> UnitVec3 {
    let scaled = n.as_vec().scale(2.0 * l.dot(n));
    (scaled - l.as_vec())
        .normalize()
        .expect("mirror of a unit vector is unit")
}

/// Per-pixel material field with `k` specular albedos per pixel.
#[derive(Debug, Clone)]
pub struct MaterialField {
    pub width: usize,
    pub height: usize,
    pub k: usize,
    pub rho_d: Vec<f64>,
    /// Pixel-major: entry `px * k + i`.
    pub rho_s: Vec<f64>,
}

impl MaterialField {
    pub fn zeros(width: usize, height: usize, k: usize) -> Self {
        MaterialField {
            width,
            height,
            k,
            rho_d: vec![0.0; width * height],
            rho_s: vec![0.0; width * height * k],
        }
    }

    pub fn at(&self, px: usize) -> Material {
        Material {
            rho_d: self.rho_d[px],
            rho_s: self.rho_s[px * self.k..(px + 1) * self.k].to_vec(),
        }
    }

    pub fn set(&mut self, px: usize, m: &Material) {
        assert_eq!(m.rho_s.len(), self.k);
        self.rho_d[px] = m.rho_d;
        self.rho_s[px * self.k..(px + 1) * self.k].copy_from_slice(&m.rho_s);
    }

    pub fn specular_sum(&self, px: usize) -> f64 {
        self.rho_s[px * self.k..(px + 1) * self.k].iter().sum()
    }
}

pub fn render_image(
    normals: &Field3,
    materials: &MaterialField,
    light: &Light,
    bank: &SpecularBasisBank,
    level: &PsbLevel,
    mask: &Mask,
) -> Result<Image> {
    render_image_with_weights(normals, materials, light, bank, &psb_weights(level), mask)
}

pub fn render_image_with_weights(
    normals: &Field3,
    materials: &MaterialField,
    light: &Light,
    bank: &SpecularBasisBank,
    weights: &[f64],
    mask: &Mask,
) -> Result<Image> {
    check_same_shape(
        normals.width,
        normals.height,
        mask.width,
        mask.height,
        "normals vs mask",
    )?;
    check_same_shape(
        materials.width,
        materials.height,
        mask.width,
        mask.height,
        "materials vs mask",
    )?;
    let view = UnitVec3::z_axis();
    let mut img = Image::zeros(mask.width, mask.height);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.at(x, y) {
                continue;
            }
            let px = y * mask.width + x;
            let n = normals.at(x, y).normalize()?;
            let m = materials.at(px);
            let value = render_pixel_with_weights(&n, &m, light, &view, bank, weights)?;
            img.set(x, y, value);
        }
    }
    Ok(img)
}
