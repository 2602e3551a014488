//! The bas-relief ambiguity in executable form.
//!
//! Under a Lambertian model, scaled normals B and scaled lights S can be
//! remapped by any member of the three-parameter transform family below
//! without changing a single pixel, because the diffuse image is the
//! bilinear form B^T S. A specular term breaks that invariance: re-rendering
//! transformed (B, S) matches the observations only at the identity. This
//! module carries the transform group, the single-lobe theory renderer, a
//! brute-force grid disambiguation, and the classical calibrated
//! least-squares solve used as an oracle elsewhere.

use crate::error::{Error, Result};
use crate::vec3::{Mat3, UnitVec3, Vec3};
use rayon::prelude::*;

/// Transform parameters (mu, nu, lambda), lambda != 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GbrParams {
    pub mu: f64,
    pub nu: f64,
    pub lambda: f64,
}

impl GbrParams {
    pub fn identity() -> Self {
        GbrParams {
            mu: 0.0,
            nu: 0.0,
            lambda: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.mu == 0.0 && self.nu == 0.0 && self.lambda == 1.0
    }
}

/// The transform matrix, its inverse, and its inverse-transpose.
#[derive(Debug, Clone, Copy)]
pub struct GbrMatrices {
    pub g: Mat3,
    pub g_inv: Mat3,
    pub g_inv_t: Mat3,
}

pub fn gbr_matrix(p: &GbrParams) -> Result<GbrMatrices> {
    if p.lambda == 0.0 {
        return Err(Error::SingularG);
    }
    let g = Mat3 {
        rows: [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [p.mu, p.nu, p.lambda],
        ],
    };
    let g_inv = Mat3 {
        rows: [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [-p.mu / p.lambda, -p.nu / p.lambda, 1.0 / p.lambda],
        ],
    };
    Ok(GbrMatrices {
        g,
        g_inv,
        g_inv_t: g_inv.transpose(),
    })
}

/// Transformed scaled normal and scaled light: (G^-T b, G s).
/// The bilinear form b.s is preserved exactly.
pub fn gbr_transform(p: &GbrParams, b: &Vec3, s: &Vec3) -> Result<(Vec3, Vec3)> {
    let m = gbr_matrix(p)?;
    Ok((m.g_inv_t.mul_vec(b), m.g.mul_vec(s)))
}

/// Single-lobe theory render of a transformed scene:
/// `b_hat . s_hat + rho_s |s_hat| exp(r (1 - unit(b_hat) . h))`, where h
/// bisects the view direction and unit(s_hat). Stated for illuminated
/// points; no attached-shadow clamp.
pub fn gbr_render(
    p: &GbrParams,
    b: &Vec3,
    s: &Vec3,
    rho_s: f64,
    r: f64,
    v: &UnitVec3,
) -> Result<f64> {
    let (bh, sh) = gbr_transform(p, b, s)?;
    let diffuse = bh.dot(&sh);
    if rho_s == 0.0 {
        return Ok(diffuse);
    }
    let n_hat = bh.normalize()?;
    let l_hat = sh.normalize()?;
    let h = (v.as_vec() + l_hat.as_vec()).normalize()?;
    let spec = rho_s * sh.norm() * (r * (1.0 - n_hat.dot(&h))).exp();
    Ok(diffuse + spec)
}

/// Pixel intensities, `p` pixels by `n` lights, row-major.
#[derive(Debug, Clone)]
pub struct MeasurementMatrix {
    pub pixels: usize,
    pub lights: usize,
    pub data: Vec<f64>,
}

impl MeasurementMatrix {
    pub fn zeros(pixels: usize, lights: usize) -> Self {
        MeasurementMatrix {
            pixels,
            lights,
            data: vec![0.0; pixels * lights],
        }
    }

    pub fn at(&self, pixel: usize, light: usize) -> f64 {
        self.data[pixel * self.lights + light]
    }

    pub fn set(&mut self, pixel: usize, light: usize, v: f64) {
        self.data[pixel * self.lights + light] = v;
    }
}

/// Columns b_j = rho_d_j n_j.
#[derive(Debug, Clone)]
pub struct ScaledNormals(pub Vec<Vec3>);

/// Columns s_j = e_j l_j.
#[derive(Debug, Clone)]
pub struct ScaledLights(pub Vec<Vec3>);

/// Entries below this are treated as attached shadows by the calibrated
/// solve (noiseless data renders them as exact zeros).
pub const SHADOW_THRESHOLD: f64 = 1e-6;

/// Classical calibrated least-squares solve for scaled normals, excluding
/// shadowed entries per pixel. Pixels with fewer than three usable
/// observations come back as zero columns.
pub fn lambertian_solve(m: &MeasurementMatrix, s: &ScaledLights) -> Result<ScaledNormals> {
    if s.0.len() != m.lights {
        return Err(Error::ShapeMismatch(format!(
            "lights: matrix has {}, table has {}",
            m.lights,
            s.0.len()
        )));
    }
    // Global rank check on S S^T.
    let mut gram = [[0.0f64; 3]; 3];
    for sj in &s.0 {
        let c = [sj.x, sj.y, sj.z];
        for i in 0..3 {
            for j in 0..3 {
                gram[i][j] += c[i] * c[j];
            }
        }
    }
    let gram = Mat3 { rows: gram };
    let scale: f64 = s.0.iter().map(|v| v.dot(v)).sum::<f64>().max(1e-300);
    if gram.det().abs() <= 1e-12 * scale.powi(3) {
        return Err(Error::RankDeficientLights);
    }

    let mut out = Vec::with_capacity(m.pixels);
    for p in 0..m.pixels {
        let mut a = [[0.0f64; 3]; 3];
        let mut rhs = Vec3::zero();
        let mut used = 0usize;
        for (j, sj) in s.0.iter().enumerate() {
            let obs = m.at(p, j);
            if obs < SHADOW_THRESHOLD {
                continue;
            }
            used += 1;
            let c = [sj.x, sj.y, sj.z];
            for i in 0..3 {
                for k in 0..3 {
                    a[i][k] += c[i] * c[k];
                }
            }
            rhs = rhs + sj.scale(obs);
        }
        let solved = if used >= 3 {
            Mat3 { rows: a }.solve(&rhs, 1e-12 * scale.powi(3).max(1.0))
        } else {
            None
        };
        out.push(solved.unwrap_or_else(Vec3::zero));
    }
    Ok(ScaledNormals(out))
}

/// A scene expressed in the theory model: per-pixel scaled normals and
/// specular albedos, per-light scaled lights, one shared lobe sharpness.
#[derive(Debug, Clone)]
pub struct GbrScene {
    pub b: Vec<Vec3>,
    pub s: Vec<Vec3>,
    pub rho_s: Vec<f64>,
    pub r: f64,
    pub view: UnitVec3,
    pub observations: MeasurementMatrix,
}

impl GbrScene {
    /// Builds the scene and renders its observations at the identity
    /// transform. Only entries with positive diffuse dot product are
    /// considered illuminated; the rest are left at zero and skipped by
    /// the grid search.
    pub fn render_identity(
        b: Vec<Vec3>,
        s: Vec<Vec3>,
        rho_s: Vec<f64>,
        r: f64,
    ) -> Result<Self> {
        assert_eq!(b.len(), rho_s.len());
        let view = UnitVec3::z_axis();
        let mut obs = MeasurementMatrix::zeros(b.len(), s.len());
        let id = GbrParams::identity();
        for (pi, bp) in b.iter().enumerate() {
            for (li, sl) in s.iter().enumerate() {
                if bp.dot(sl) > SHADOW_THRESHOLD {
                    obs.set(pi, li, gbr_render(&id, bp, sl, rho_s[pi], r, &view)?);
                }
            }
        }
        Ok(GbrScene {
            b,
            s,
            rho_s,
            r,
            view,
            observations: obs,
        })
    }

    fn illuminated(&self, pixel: usize, light: usize) -> bool {
        self.b[pixel].dot(&self.s[light]) > SHADOW_THRESHOLD
    }

    /// Mean absolute re-rendering error of the transformed scene against
    /// the stored observations, over illuminated entries.
    pub fn transform_loss(&self, p: &GbrParams) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (pi, bp) in self.b.iter().enumerate() {
            for (li, sl) in self.s.iter().enumerate() {
                if !self.illuminated(pi, li) {
                    continue;
                }
                let m_hat = gbr_render(p, bp, sl, self.rho_s[pi], self.r, &self.view)?;
                total += (m_hat - self.observations.at(pi, li)).abs();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(total / count as f64)
    }
}

/// Cartesian grid over transform parameters.
#[derive(Debug, Clone)]
pub struct GbrGrid {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl GbrGrid {
    /// mu, nu linearly spaced; lambda log-spaced so that a symmetric range
    /// around 1 actually contains 1.
    pub fn symmetric(mu_max: f64, nu_max: f64, lambda_lo: f64, lambda_hi: f64, steps: usize) -> Self {
        assert!(steps >= 1 && lambda_lo > 0.0 && lambda_hi > lambda_lo);
        let lin = |max: f64| -> Vec<f64> {
            (0..steps)
                .map(|i| {
                    if steps == 1 {
                        0.0
                    } else {
                        -max + 2.0 * max * i as f64 / (steps - 1) as f64
                    }
                })
                .collect()
        };
        let log_ratio = (lambda_hi / lambda_lo).ln();
        let lambda = (0..steps)
            .map(|i| {
                if steps == 1 {
                    1.0
                } else {
                    lambda_lo * (log_ratio * i as f64 / (steps - 1) as f64).exp()
                }
            })
            .collect();
        GbrGrid {
            mu: lin(mu_max),
            nu: lin(nu_max),
            lambda,
        }
    }

    pub fn contains_identity(&self) -> bool {
        let near = |xs: &[f64], v: f64| xs.iter().any(|&x| (x - v).abs() < 1e-9);
        near(&self.mu, 0.0) && near(&self.nu, 0.0) && near(&self.lambda, 1.0)
    }
}

/// One evaluated grid cell.
#[derive(Debug, Clone, Copy)]
pub struct GbrCell {
    pub params: GbrParams,
    pub loss: f64,
}

/// Loss surface over a parameter grid, cells in row-major
/// (mu, nu, lambda) order.
#[derive(Debug, Clone)]
pub struct GbrLossSurface {
    pub cells: Vec<GbrCell>,
    pub argmin: usize,
}

impl GbrLossSurface {
    pub fn argmin_cell(&self) -> &GbrCell {
        &self.cells[self.argmin]
    }
}

/// Exhaustively re-renders the scene under every grid transform. The grid
/// must contain the identity cell.
pub fn gbr_grid_search(scene: &GbrScene, grid: &GbrGrid) -> Result<GbrLossSurface> {
    if !grid.contains_identity() {
        return Err(Error::BadSpec(
            "transform grid must contain the identity".into(),
        ));
    }
    let mut points = Vec::new();
    for &mu in &grid.mu {
        for &nu in &grid.nu {
            for &lambda in &grid.lambda {
                points.push(GbrParams { mu, nu, lambda });
            }
        }
    }
    let cells: Vec<GbrCell> = points
        .into_par_iter()
        .map(|params| {
            let loss = scene.transform_loss(&params)?;
            Ok(GbrCell { params, loss })
        })
        .collect::<Result<_>>()?;
    let argmin = cells
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.loss.total_cmp(&b.1.loss))
        .map(|(i, _)| i)
        .expect("grid is non-empty");
    Ok(GbrLossSurface { cells, argmin })
}
