//! Coordinate-MLP fields for normals and materials, plus the per-image
//! light table.
//!
//! Both fields take a pixel coordinate normalized to [-1, 1] through a
//! Fourier positional encoding. Lights are free variables per image (raw
//! 3-vector direction read out through normalization, log intensity read
//! out through exp), refined jointly with the fields by the optimizer.

use crate::autodiff::{Real, Tape, V3, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::raster::Mask;
use crate::shading::Material;
use crate::vec3::{UnitVec3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Raw light-direction vectors shorter than this are rescaled by the
/// optimization guard.
pub const LIGHT_DIR_MIN_NORM: f64 = 1e-6;

/// Norm the raw light-direction parameters are kept at. The readout
/// normalizes, so this only conditions the optimization: one optimizer
/// step of size lr rotates a direction by about lr / norm radians, and
/// recovering badly wrong lights within a fixed epoch budget needs the
/// faster rotation a sub-unit norm gives.
pub const LIGHT_DIR_RAW_NORM: f64 = 0.05;

/// Multi-frequency sinusoidal features of a scalar coordinate.
#[derive(Debug, Clone, Copy)]
pub struct PositionalEncoder {
    pub levels: usize,
    pub include_raw: bool,
}

impl PositionalEncoder {
    pub fn new(levels: usize) -> Self {
        assert!(levels >= 1);
        PositionalEncoder {
            levels,
            include_raw: true,
        }
    }

    pub fn output_len(&self) -> usize {
        (if self.include_raw { 2 } else { 0 }) + 4 * self.levels
    }

    /// `[x, y, sin(2^j pi x), cos(2^j pi x) ..., sin(2^j pi y), ...]`.
    pub fn encode(&self, x: f64, y: f64) -> Result<Vec<f64>> {
        for t in [x, y] {
            if t.abs() > 1.0 + 1e-9 {
                return Err(Error::OutOfRange(t));
            }
        }
        let mut out = Vec::with_capacity(self.output_len());
        if self.include_raw {
            out.push(x);
            out.push(y);
        }
        for t in [x, y] {
            for j in 0..self.levels {
                let arg = (1u64 << j) as f64 * std::f64::consts::PI * t;
                out.push(arg.sin());
                out.push(arg.cos());
            }
        }
        Ok(out)
    }
}

/// Fully-connected net shape: rectified hidden layers, linear output.
#[derive(Debug, Clone, Copy)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: usize,
    /// Total number of affine layers.
    pub layers: usize,
    pub output: usize,
}

impl MlpSpec {
    fn dims(&self, layer: usize) -> (usize, usize) {
        let infan = if layer == 0 { self.input } else { self.hidden };
        let outfan = if layer + 1 == self.layers {
            self.output
        } else {
            self.hidden
        };
        (infan, outfan)
    }
}

/// An MLP's weight segments inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct MlpLayout {
    pub spec: MlpSpec,
    /// (weight offset, bias offset) per layer.
    pub layers: Vec<(usize, usize)>,
}

impl MlpLayout {
    /// Registers uniformly initialized weights, U(-1/sqrt(fan_in), ..),
    /// the cited framework's default for dense layers.
    pub fn register(store: &mut ParamStore, name: &str, spec: MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        assert!(spec.layers >= 1);
        let mut layers = Vec::with_capacity(spec.layers);
        for li in 0..spec.layers {
            let (infan, outfan) = spec.dims(li);
            let bound = 1.0 / (infan as f64).sqrt();
            let w = store.register(&format!("{name}.w{li}"), &[outfan, infan], || {
                rng.gen_range(-bound..bound)
            });
            let b = store.register(&format!("{name}.b{li}"), &[outfan], || {
                rng.gen_range(-bound..bound)
            });
            layers.push((w, b));
        }
        MlpLayout { spec, layers }
    }

    /// Plain forward pass over a parameter snapshot.
    pub fn forward(&self, values: &[f64], features: &[f64]) -> Vec<f64> {
        assert_eq!(features.len(), self.spec.input, "feature length mismatch");
        let mut x = features.to_vec();
        for (li, &(w, b)) in self.layers.iter().enumerate() {
            let (infan, outfan) = self.spec.dims(li);
            let last = li + 1 == self.layers.len();
            let mut y = Vec::with_capacity(outfan);
            for j in 0..outfan {
                let row = &values[w + j * infan..w + (j + 1) * infan];
                let mut acc = values[b + j];
                for (wi, xi) in row.iter().zip(&x) {
                    acc += wi * xi;
                }
                y.push(if last { acc } else { acc.max(0.0) });
            }
            x = y;
        }
        x
    }

    /// Same forward pass recorded on a tape (weights come from the tape's
    /// bound snapshot through fused affine nodes).
    pub fn forward_tape(&self, tape: &Tape, features: &[f64]) -> Vec<Var> {
        assert_eq!(features.len(), self.spec.input, "feature length mismatch");
        let mut x: Vec<Var> = features.iter().map(|&f| tape.leaf(f)).collect();
        for (li, &(w, b)) in self.layers.iter().enumerate() {
            let (_, outfan) = self.spec.dims(li);
            let last = li + 1 == self.layers.len();
            let y = tape.affine_layer(w, b, &x, outfan);
            x = if last {
                y
            } else {
                y.iter().map(|v| v.relu()).collect()
            };
        }
        x
    }
}

/// Per-image light estimates read out of the parameter store.
#[derive(Debug, Clone)]
pub struct LightTable {
    pub directions: Vec<UnitVec3>,
    pub intensities: Vec<f64>,
}

impl LightTable {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// How the light table is seeded before optimization.
#[derive(Debug, Clone, PartialEq)]
pub enum LightInit {
    /// Directions within the given angle (degrees) of the view axis,
    /// intensities 1.
    ViewJitter(f64),
    /// Exact directions (and intensities, when present) from a text file.
    FromFile(PathBuf),
    /// Ground-truth directions perturbed by up to the given angle
    /// (degrees), intensities reset to 1.
    GtNoise(f64),
}

impl FromStr for LightInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad light-init '{s}', expected kind:arg")))?;
        match kind {
            "view-jitter" => Ok(LightInit::ViewJitter(arg.parse().map_err(|_| {
                Error::Config(format!("bad view-jitter angle '{arg}'"))
            })?)),
            "file" => Ok(LightInit::FromFile(PathBuf::from(arg))),
            "gt-noise" => Ok(LightInit::GtNoise(arg.parse().map_err(|_| {
                Error::Config(format!("bad gt-noise angle '{arg}'"))
            })?)),
            _ => Err(Error::Config(format!("unknown light-init kind '{kind}'"))),
        }
    }
}

/// Rotates `dir` about a uniformly random axis by an angle drawn uniformly
/// from [0, sigma_deg].
pub fn jitter_direction(dir: &UnitVec3, sigma_deg: f64, rng: &mut ChaCha8Rng) -> UnitVec3 {
    if sigma_deg == 0.0 {
        return *dir;
    }
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let rho = (1.0 - z * z).sqrt();
    let axis = Vec3::new(rho * phi.cos(), rho * phi.sin(), z)
        .normalize()
        .expect("unit axis");
    let angle = rng.gen_range(0.0..=sigma_deg.to_radians());
    dir.rotate_about(&axis, angle)
}

/// Parses a lights text file: one light per line, `lx ly lz` or
/// `lx ly lz e`. Directions must be unit within 1e-3 and are renormalized.
pub fn read_lights_file(path: &Path) -> Result<LightTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let bad = |reason: String| Error::FileFormat {
        path: path.display().to_string(),
        reason,
    };
    let mut directions = Vec::new();
    let mut intensities = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("line {}: not numeric", ln + 1)))?;
        if parts.len() != 3 && parts.len() != 4 {
            return Err(bad(format!("line {}: expected 3 or 4 values", ln + 1)));
        }
        let v = Vec3::new(parts[0], parts[1], parts[2]);
        if (v.norm() - 1.0).abs() > 1e-3 {
            return Err(bad(format!("line {}: direction not unit", ln + 1)));
        }
        directions.push(v.normalize()?);
        intensities.push(if parts.len() == 4 { parts[3] } else { 1.0 });
    }
    Ok(LightTable {
        directions,
        intensities,
    })
}

/// Builds the initial light table for a dataset.
pub fn light_init(
    strategy: &LightInit,
    dataset: &crate::data::PhotometricDataset,
    seed: u64,
) -> Result<LightTable> {
    let n = dataset.images.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c49_4748_5453u64);
    match strategy {
        LightInit::ViewJitter(sigma) => {
            let view = UnitVec3::z_axis();
            Ok(LightTable {
                directions: (0..n).map(|_| jitter_direction(&view, *sigma, &mut rng)).collect(),
                intensities: vec![1.0; n],
            })
        }
        LightInit::FromFile(path) => {
            let table = read_lights_file(path)?;
            if table.len() != n {
                return Err(Error::CountMismatch {
                    what: format!("lights in {}", path.display()),
                    expected: n,
                    got: table.len(),
                });
            }
            Ok(table)
        }
        LightInit::GtNoise(sigma) => {
            let gt = dataset
                .gt_lights
                .as_ref()
                .ok_or(Error::MissingGroundTruth("lights"))?;
            Ok(LightTable {
                directions: gt
                    .directions
                    .iter()
                    .map(|d| jitter_direction(d, *sigma, &mut rng))
                    .collect(),
                intensities: vec![1.0; n],
            })
        }
    }
}

/// Normalizing map from pixel indices to the encoder's [-1, 1] domain,
/// anchored to the mask's tight bounding box with aspect preserved.
#[derive(Debug, Clone, Copy)]
pub struct CoordMap {
    cx: f64,
    cy: f64,
    scale: f64,
}

impl CoordMap {
    pub fn from_mask(mask: &Mask) -> Result<Self> {
        let (x0, y0, x1, y1) = mask.bounding_box().ok_or(Error::EmptyMask)?;
        let cx = (x0 + x1) as f64 / 2.0;
        let cy = (y0 + y1) as f64 / 2.0;
        let half = ((x1 - x0).max(y1 - y0) as f64 / 2.0).max(1.0);
        Ok(CoordMap {
            cx,
            cy,
            scale: half,
        })
    }

    pub fn map(&self, x: usize, y: usize) -> (f64, f64) {
        (
            (x as f64 - self.cx) / self.scale,
            (y as f64 - self.cy) / self.scale,
        )
    }
}

/// The full trainable model: both field MLPs, the light table, and the
/// optional trainable roughness, all living in one parameter store.
#[derive(Debug, Clone)]
pub struct FieldModel {
    pub encoder: PositionalEncoder,
    pub normal_mlp: MlpLayout,
    pub material_mlp: MlpLayout,
    pub k: usize,
    pub n_lights: usize,
    pub light_dir_off: usize,
    pub light_logint_off: usize,
    /// Offset of xi with roughness r_i = -exp(xi_i), when trainable.
    pub roughness_off: Option<usize>,
    pub store: ParamStore,
}

pub struct FieldModelSpec {
    pub encoding_levels: usize,
    pub normal_hidden: usize,
    pub normal_layers: usize,
    pub material_hidden: usize,
    pub material_layers: usize,
    pub k: usize,
    /// Initial diffuse albedo readout; callers usually derive it from the
    /// observed image brightness so optimization starts scale-matched.
    pub initial_diffuse: f64,
}

impl FieldModel {
    pub fn new(
        spec: &FieldModelSpec,
        lights: &LightTable,
        trainable_roughness: Option<&[f64]>,
        seed: u64,
    ) -> Self {
        let encoder = PositionalEncoder::new(spec.encoding_levels);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4649_454c_4453u64);
        let normal_mlp = MlpLayout::register(
            &mut store,
            "normal",
            MlpSpec {
                input: encoder.output_len(),
                hidden: spec.normal_hidden,
                layers: spec.normal_layers,
                output: 3,
            },
            &mut rng,
        );
        let material_mlp = MlpLayout::register(
            &mut store,
            "material",
            MlpSpec {
                input: encoder.output_len(),
                hidden: spec.material_hidden,
                layers: spec.material_layers,
                output: 1 + spec.k,
            },
            &mut rng,
        );
        // Albedos read out through softplus. Specular channels start dim
        // (0.13) so there is no spurious highlight sum to unlearn; the
        // diffuse channel starts at the caller-chosen level so the first
        // renders already sit at the right brightness and the lights feel
        // no pull toward the view pole.
        {
            let (_, b_last) = *material_mlp.layers.last().unwrap();
            let out_dim = 1 + spec.k;
            for v in &mut store.values_mut()[b_last..b_last + out_dim] {
                *v = -2.0;
            }
            let y = spec.initial_diffuse.clamp(1e-3, 10.0);
            store.values_mut()[b_last] = y.exp_m1().ln(); // softplus inverse
        }
        // Start the normal field facing the camera: light gradients in the
        // first epochs are then measured against a plausible surface, and
        // the frontal start also selects the convex interpretation.
        {
            let (_, b_last) = *normal_mlp.layers.last().unwrap();
            let vals = store.values_mut();
            vals[b_last] = 0.0;
            vals[b_last + 1] = 0.0;
            vals[b_last + 2] = 1.0;
        }
        let n = lights.len();
        let mut flat = Vec::with_capacity(n * 3);
        for d in &lights.directions {
            flat.extend_from_slice(&[
                d.x() * LIGHT_DIR_RAW_NORM,
                d.y() * LIGHT_DIR_RAW_NORM,
                d.z() * LIGHT_DIR_RAW_NORM,
            ]);
        }
        let mut it = flat.into_iter();
        let light_dir_off = store.register("light_dirs", &[n, 3], || it.next().unwrap());
        let mut es = lights.intensities.iter();
        let light_logint_off =
            store.register("light_log_intensities", &[n], || es.next().unwrap().ln());
        let roughness_off = trainable_roughness.map(|ladder| {
            let mut rs = ladder.iter();
            store.register("roughness_xi", &[ladder.len()], || (-rs.next().unwrap()).ln())
        });
        FieldModel {
            encoder,
            normal_mlp,
            material_mlp,
            k: spec.k,
            n_lights: n,
            light_dir_off,
            light_logint_off,
            roughness_off,
            store,
        }
    }

    /// Normal at a normalized coordinate: MLP output, unit-normalized.
    pub fn normal_at(&self, values: &[f64], x: f64, y: f64) -> Result<UnitVec3> {
        let feats = self.encoder.encode(x, y)?;
        let out = self.normal_mlp.forward(values, &feats);
        let v = Vec3::new(out[0], out[1], out[2]);
        if v.norm() < 1e-9 {
            return Err(Error::DegenerateVector { norm: v.norm() });
        }
        v.normalize()
    }

    /// Material at a normalized coordinate; all channels mapped through
    /// softplus so they are non-negative for any parameter values.
    pub fn material_at(&self, values: &[f64], x: f64, y: f64) -> Result<Material> {
        let feats = self.encoder.encode(x, y)?;
        let out = self.material_mlp.forward(values, &feats);
        Ok(Material {
            rho_d: out[0].softplus(),
            rho_s: out[1..].iter().map(|u| u.softplus()).collect(),
        })
    }

    /// Tape-recorded normal for a precomputed feature vector.
    pub fn normal_tape(&self, tape: &Tape, feats: &[f64]) -> Result<V3<Var>> {
        let out = self.normal_mlp.forward_tape(tape, feats);
        V3::new(out[0].clone(), out[1].clone(), out[2].clone()).normalize(1e-9)
    }

    /// Tape-recorded material (diffuse albedo, specular albedos).
    pub fn material_tape(&self, tape: &Tape, feats: &[f64]) -> (Var, Vec<Var>) {
        let out = self.material_mlp.forward_tape(tape, feats);
        (
            out[0].softplus(),
            out[1..].iter().map(|u| u.softplus()).collect(),
        )
    }

    /// Tape-recorded light for image `j`: unit direction and intensity.
    pub fn light_tape(&self, tape: &Tape, j: usize) -> Result<(V3<Var>, Var)> {
        let d = V3::new(
            tape.param(self.light_dir_off + 3 * j),
            tape.param(self.light_dir_off + 3 * j + 1),
            tape.param(self.light_dir_off + 3 * j + 2),
        );
        let dir = d.normalize(LIGHT_DIR_MIN_NORM)?;
        let e = tape.param(self.light_logint_off + j).exp();
        Ok((dir, e))
    }

    /// Tape-recorded roughness values (constants unless trainable).
    pub fn roughness_tape(&self, tape: &Tape, fixed: &[f64]) -> Vec<Var> {
        match self.roughness_off {
            Some(off) => (0..self.k)
                .map(|i| -tape.param(off + i).exp())
                .collect(),
            None => fixed.iter().map(|&r| tape.leaf(r)).collect(),
        }
    }

    /// Current roughness values from the store (the fixed ladder is passed
    /// through when roughness is not trainable).
    pub fn roughness_values(&self, fixed: &[f64]) -> Vec<f64> {
        match self.roughness_off {
            Some(off) => self.store.values()[off..off + self.k]
                .iter()
                .map(|xi| -xi.exp())
                .collect(),
            None => fixed.to_vec(),
        }
    }

    /// Reads the light table out of the store.
    pub fn light_table(&self) -> LightTable {
        let v = self.store.values();
        let mut directions = Vec::with_capacity(self.n_lights);
        let mut intensities = Vec::with_capacity(self.n_lights);
        for j in 0..self.n_lights {
            let d = Vec3::new(
                v[self.light_dir_off + 3 * j],
                v[self.light_dir_off + 3 * j + 1],
                v[self.light_dir_off + 3 * j + 2],
            );
            directions.push(d.normalize().expect("guarded raw light direction"));
            intensities.push(v[self.light_logint_off + j].exp());
        }
        LightTable {
            directions,
            intensities,
        }
    }

    /// Keeps every raw light direction at [`LIGHT_DIR_RAW_NORM`]. The
    /// readout is unchanged (it normalizes anyway); this pins the angular
    /// step size and enforces the minimum-norm invariant.
    pub fn guard_light_dirs(&mut self) {
        for j in 0..self.n_lights {
            let off = self.light_dir_off + 3 * j;
            let v = {
                let vals = self.store.values();
                Vec3::new(vals[off], vals[off + 1], vals[off + 2])
            };
            let rescaled = if v.norm() < LIGHT_DIR_MIN_NORM {
                Vec3::new(0.0, 0.0, LIGHT_DIR_RAW_NORM)
            } else {
                v.normalize().unwrap().as_vec().scale(LIGHT_DIR_RAW_NORM)
            };
            let vals = self.store.values_mut();
            vals[off] = rescaled.x;
            vals[off + 1] = rescaled.y;
            vals[off + 2] = rescaled.z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_params;
    use std::sync::Arc;

    #[test]
    fn encode_zero_and_one() {
        let enc = PositionalEncoder::new(10);
        let f = enc.encode(0.0, 0.0).unwrap();
        assert_eq!(f.len(), 42);
        // raw coords, then sin/cos pairs
        assert_eq!(&f[0..2], &[0.0, 0.0]);
        for j in 02..42 {
            let expect = if j % 2 == 0 { 0.0 } else { 1.0 };
            assert!((f[j] - expect).abs() < 1e-15, "feature {j}");
        }

        let f = enc.encode(1.0, 0.0).unwrap();
        // x, j=0: sin(pi) ~ 0, cos(pi) = -1; j>=1: cos(2^j pi) = 1
        assert!(f[2].abs() < 1e-12);
        assert!((f[3] + 1.0).abs() < 1e-12);
        for j in 1..10 {
            assert!(f[2 + 2 * j].abs() < 1e-8, "sin(2^{j} pi)");
            assert!((f[3 + 2 * j] - 1.0).abs() < 1e-8, "cos(2^{j} pi)");
        }
    }

    #[test]
    fn encode_out_of_range() {
        let enc = PositionalEncoder::new(4);
        assert!(enc.encode(1.1, 0.0).is_err());
        assert!(enc.encode(0.0, -1.2).is_err());
        assert!(enc.encode(1.0 + 5e-10, 0.0).is_ok());
    }

    #[test]
    fn encode_injective_spot_check() {
        let enc = PositionalEncoder::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let b = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if a == b {
                continue;
            }
            let fa = enc.encode(a.0, a.1).unwrap();
            let fb = enc.encode(b.0, b.1).unwrap();
            assert!(
                fa.iter().zip(&fb).any(|(u, v)| (u - v).abs() > 1e-12),
                "distinct inputs with identical features"
            );
        }
    }

    fn tiny_model(seed: u64) -> FieldModel {
        let lights = LightTable {
            directions: vec![UnitVec3::z_axis(); 3],
            intensities: vec![1.0; 3],
        };
        FieldModel::new(
            &FieldModelSpec {
                encoding_levels: 3,
                normal_hidden: 8,
                normal_layers: 3,
                material_hidden: 8,
                material_layers: 3,
                k: 2,
                initial_diffuse: 0.5,
            },
            &lights,
            None,
            seed,
        )
    }

    #[test]
    fn mlp_zero_weights_give_bias() {
        let mut model = tiny_model(0);
        let n = model.store.len();
        for v in model.store.values_mut()[..n].iter_mut() {
            *v = 0.0;
        }
        // set a recognizable bias on the final normal layer
        let (_, b_last) = *model.normal_mlp.layers.last().unwrap();
        model.store.values_mut()[b_last] = 0.25;
        model.store.values_mut()[b_last + 1] = -0.5;
        model.store.values_mut()[b_last + 2] = 1.0;
        let out = model
            .normal_mlp
            .forward(model.store.values(), &model.encoder.encode(0.3, -0.7).unwrap());
        assert_eq!(out, vec![0.25, -0.5, 1.0]);
    }

    #[test]
    fn single_linear_layer_is_matvec() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layout = MlpLayout::register(
            &mut store,
            "lin",
            MlpSpec {
                input: 3,
                hidden: 0,
                layers: 1,
                output: 2,
            },
            &mut rng,
        );
        let x = [0.3, -1.2, 0.7];
        let out = layout.forward(store.values(), &x);
        let v = store.values();
        for j in 0..2 {
            let expect = v[6 + j] + v[j * 3] * x[0] + v[j * 3 + 1] * x[1] + v[j * 3 + 2] * x[2];
            assert!((out[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_layer_zeroes_negative_preactivations() {
        let mut store = ParamStore::new();
        let layout = MlpLayout::register(
            &mut store,
            "m",
            MlpSpec {
                input: 1,
                hidden: 2,
                layers: 2,
                output: 1,
            },
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        // force hidden preactivations negative
        let vals = store.values_mut();
        vals[0] = -1.0; // w0
        vals[1] = -2.0;
        vals[2] = -0.5; // b0
        vals[3] = -0.5;
        vals[4] = 3.0; // w1
        vals[5] = 4.0;
        vals[6] = 0.125; // b1
        let out = layout.forward(store.values(), &[1.0]);
        assert_eq!(out, vec![0.125]);
    }

    #[test]
    fn forward_and_tape_forward_agree() {
        let model = tiny_model(12);
        let snapshot = Arc::new(model.store.values().to_vec());
        let feats = model.encoder.encode(0.4, -0.2).unwrap();
        let plain = model.normal_mlp.forward(model.store.values(), &feats);
        let tape = Tape::with_params(snapshot);
        let taped = model.normal_mlp.forward_tape(&tape, &feats);
        for (a, b) in plain.iter().zip(&taped) {
            assert!((a - b.value()).abs() < 1e-14);
        }
    }

    #[test]
    fn normal_at_is_unit_and_deterministic() {
        let model = tiny_model(3);
        let n1 = model.normal_at(model.store.values(), 0.1, 0.2).unwrap();
        let n2 = model.normal_at(model.store.values(), 0.1, 0.2).unwrap();
        assert_eq!(n1.as_vec(), n2.as_vec());
        assert!((n1.as_vec().norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn material_at_nonnegative_and_softplus_map() {
        let mut model = tiny_model(4);
        let n = model.store.len();
        for v in model.store.values_mut()[..n].iter_mut() {
            *v = 0.0;
        }
        // zero net: every output channel is softplus(0) = ln 2
        let m = model.material_at(model.store.values(), 0.0, 0.0).unwrap();
        assert!((m.rho_d - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(m.rho_s.len(), 2);
        for r in &m.rho_s {
            assert!((r - std::f64::consts::LN_2).abs() < 1e-15);
        }

        let model = tiny_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let m = model
                .material_at(
                    model.store.values(),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .unwrap();
            assert!(m.rho_d >= 0.0);
            assert!(m.rho_s.iter().all(|&r| r >= 0.0));
        }
    }

    #[test]
    fn normal_gradients_match_finite_differences() {
        let model = tiny_model(7);
        let feats = model.encoder.encode(0.3, 0.6).unwrap();
        let err = grad_check_params(
            |tape| {
                let n = model.normal_tape(tape, &feats)?;
                Ok(n.x.clone() * n.x.clone() + n.y.scale(0.5) + n.z.clone())
            },
            model.store.values(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn light_readout_unit_and_positive() {
        let mut table = LightTable {
            directions: vec![
                Vec3::new(0.3, -0.2, 0.9).normalize().unwrap(),
                UnitVec3::z_axis(),
            ],
            intensities: vec![0.7, 1.9],
        };
        let model = FieldModel::new(
            &FieldModelSpec {
                encoding_levels: 2,
                normal_hidden: 4,
                normal_layers: 2,
                material_hidden: 4,
                material_layers: 2,
                k: 1,
                initial_diffuse: 0.5,
            },
            &table,
            None,
            0,
        );
        let read = model.light_table();
        for j in 0..2 {
            assert!((read.directions[j].as_vec() - table.directions[j].as_vec()).norm() < 1e-12);
            assert!((read.intensities[j] - table.intensities[j]).abs() < 1e-12);
            assert!(read.intensities[j] > 0.0);
        }
        table.intensities[0] = 1.0;
    }

    #[test]
    fn trainable_roughness_roundtrip() {
        let lights = LightTable {
            directions: vec![UnitVec3::z_axis()],
            intensities: vec![1.0],
        };
        let ladder = crate::shading::roughness_ladder(4, 100.0, 10.0).unwrap();
        let model = FieldModel::new(
            &FieldModelSpec {
                encoding_levels: 2,
                normal_hidden: 4,
                normal_layers: 2,
                material_hidden: 4,
                material_layers: 2,
                k: 4,
                initial_diffuse: 0.5,
            },
            &lights,
            Some(&ladder),
            0,
        );
        let r = model.roughness_values(&ladder);
        for (a, b) in r.iter().zip(&ladder) {
            assert!((a - b).abs() < 1e-12 * b.abs());
            assert!(*a < 0.0);
        }
    }

    #[test]
    fn coord_map_bounds() {
        let mut mask = Mask::filled(32, 20, false);
        for y in 4..16 {
            for x in 6..30 {
                mask.set(x, y, true);
            }
        }
        let map = CoordMap::from_mask(&mask).unwrap();
        for y in 4..16 {
            for x in 6..30 {
                let (u, v) = map.map(x, y);
                assert!(u.abs() <= 1.0 + 1e-9 && v.abs() <= 1.0 + 1e-9);
            }
        }
        let (u0, v0) = map.map(6, 4);
        let (u1, v1) = map.map(29, 15);
        assert!((u0 + 1.0).abs() < 1e-12);
        assert!((u1 - 1.0).abs() < 1e-12);
        // aspect preserved: y never reaches the band edges for a wide mask
        assert!(v0 > -1.0 && v1 < 1.0);
    }

    #[test]
    fn light_init_parsing() {
        assert_eq!(
            LightInit::from_str("view-jitter:5").unwrap(),
            LightInit::ViewJitter(5.0)
        );
        assert_eq!(
            LightInit::from_str("gt-noise:30").unwrap(),
            LightInit::GtNoise(30.0)
        );
        assert!(matches!(
            LightInit::from_str("file:/tmp/l.txt").unwrap(),
            LightInit::FromFile(_)
        ));
        assert!(LightInit::from_str("nonsense").is_err());
    }
}
