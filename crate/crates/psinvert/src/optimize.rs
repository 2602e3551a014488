//! Joint optimization of normals, materials, and lights by minimizing the
//! photometric reconstruction error, with progressive activation of the
//! specular bases and early smoothness/contour supervision.

use crate::autodiff::{Real, Tape, Var};
use crate::data::PhotometricDataset;
use crate::error::{Error, Result};
use crate::field::{light_init, CoordMap, FieldModel, FieldModelSpec, LightInit, LightTable};
use crate::metrics::{light_direction_mae, mean_angular_error, psnr_masked, scale_invariant_intensity_error};
use crate::raster::{Field3, Image};
use crate::shading::{
    psb_weights, roughness_ladder, shade_pixel, Light, MaterialField, PsbLevel,
    SpecularBasisBank,
};
use crate::vec3::Vec3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;
use std::sync::Arc;

/// Pixels per photometric tape chunk; bounds per-tape memory.
const PIXEL_CHUNK: usize = 64;
/// Prior items per tape chunk.
const PRIOR_CHUNK: usize = 128;
/// Neighbor pairs sampled per iteration = pixels_per_iteration / this.
const PAIR_DIVISOR: usize = 4;
/// At most this many contour pixels per iteration.
const CONTOUR_CAP: usize = 256;
/// Per-epoch normal error is estimated on at most this many fixed pixels.
const METRIC_SAMPLE: usize = 512;

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub k: usize,
    pub r_top: f64,
    pub r_bottom: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub images_per_iteration: usize,
    pub pixels_per_iteration: usize,
    /// Fraction of epochs over which alpha ramps from 0 to k.
    pub psb_fraction: f64,
    /// When false, every specular basis is active from epoch 0.
    pub progressive_bases: bool,
    pub trainable_roughness: bool,
    pub lambda_smooth: f64,
    pub lambda_contour: f64,
    /// Smoothness/contour terms are dropped after this fraction of epochs.
    pub early_fraction: f64,
    pub seed: u64,
    pub encoding_levels: usize,
    pub normal_hidden: usize,
    pub normal_layers: usize,
    pub material_hidden: usize,
    pub material_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 12,
            r_top: 300.0,
            r_bottom: 10.0,
            epochs: 2000,
            learning_rate: 1e-3,
            images_per_iteration: 8,
            pixels_per_iteration: 2048,
            psb_fraction: 0.5,
            progressive_bases: true,
            trainable_roughness: false,
            lambda_smooth: 0.1,
            lambda_contour: 0.05,
            early_fraction: 0.5,
            seed: 0,
            encoding_levels: 10,
            normal_hidden: 48,
            normal_layers: 4,
            material_hidden: 48,
            material_layers: 6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("r_top", self.r_top),
            ("r_bottom", self.r_bottom),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let counts = [
            ("k", self.k),
            ("epochs", self.epochs),
            ("images_per_iteration", self.images_per_iteration),
            ("pixels_per_iteration", self.pixels_per_iteration),
            ("encoding_levels", self.encoding_levels),
            ("normal_hidden", self.normal_hidden),
            ("normal_layers", self.normal_layers),
            ("material_hidden", self.material_hidden),
            ("material_layers", self.material_layers),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.k < 2 {
            return Err(Error::Config("k must be at least 2".into()));
        }
        for (name, f) in [
            ("psb_fraction", self.psb_fraction),
            ("early_fraction", self.early_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1]")));
            }
        }
        if !(self.lambda_smooth >= 0.0 && self.lambda_contour >= 0.0) {
            return Err(Error::Config("prior weights must be non-negative".into()));
        }
        if self.r_top <= self.r_bottom {
            return Err(Error::Config("r_top must exceed r_bottom".into()));
        }
        Ok(())
    }

    /// Sets one field by its config-file/CLI name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "k" => self.k = parse(key, value)?,
            "r_top" => self.r_top = parse(key, value)?,
            "r_bottom" => self.r_bottom = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "images_per_iteration" => self.images_per_iteration = parse(key, value)?,
            "pixels_per_iteration" => self.pixels_per_iteration = parse(key, value)?,
            "psb_fraction" => self.psb_fraction = parse(key, value)?,
            "progressive_bases" => self.progressive_bases = parse(key, value)?,
            "trainable_roughness" => self.trainable_roughness = parse(key, value)?,
            "lambda_smooth" => self.lambda_smooth = parse(key, value)?,
            "lambda_contour" => self.lambda_contour = parse(key, value)?,
            "early_fraction" => self.early_fraction = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "encoding_levels" => self.encoding_levels = parse(key, value)?,
            "normal_hidden" => self.normal_hidden = parse(key, value)?,
            "normal_layers" => self.normal_layers = parse(key, value)?,
            "material_hidden" => self.material_hidden = parse(key, value)?,
            "material_layers" => self.material_layers = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, unknown keys are
    /// rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let mut cfg = TrainConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", ln + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn field_spec(&self, initial_diffuse: f64) -> FieldModelSpec {
        FieldModelSpec {
            encoding_levels: self.encoding_levels,
            normal_hidden: self.normal_hidden,
            normal_layers: self.normal_layers,
            material_hidden: self.material_hidden,
            material_layers: self.material_layers,
            k: self.k,
            initial_diffuse,
        }
    }
}

/// Adam with bias correction over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One update step. Rejects non-finite gradients before touching any
    /// state, so a skipped iteration leaves parameters and moments intact.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Mean absolute difference between observed and re-rendered intensities.
pub fn photometric_loss(observed: &[f64], rendered: &[f64]) -> Result<f64> {
    if observed.len() != rendered.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch lengths {} vs {}",
            observed.len(),
            rendered.len()
        )));
    }
    if observed.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(observed
        .iter()
        .zip(rendered)
        .map(|(o, r)| (o - r).abs())
        .sum::<f64>()
        / observed.len() as f64)
}

/// Linear ramp of the progressive-bases level: alpha reaches k after
/// `psb_fraction` of the epochs and stays there.
pub fn alpha_schedule(epoch: usize, cfg: &TrainConfig) -> PsbLevel {
    if !cfg.progressive_bases {
        return PsbLevel::full(cfg.k);
    }
    let ramp = (cfg.psb_fraction * cfg.epochs as f64).max(1.0);
    let alpha = cfg.k as f64 * (epoch as f64 / ramp).min(1.0);
    PsbLevel::new(alpha, cfg.k)
}

/// Early supervision value: cosine dissimilarity between neighboring
/// normals plus cosine dissimilarity between contour normals and their
/// outward in-plane directions. Zero once the early stage is over.
pub fn early_priors(
    neighbor_pairs: &[(Vec3, Vec3)],
    contour: &[(Vec3, (f64, f64))],
    epoch: usize,
    cfg: &TrainConfig,
) -> f64 {
    if !early_stage(epoch, cfg) {
        return 0.0;
    }
    let mut total = 0.0;
    if !neighbor_pairs.is_empty() {
        let s: f64 = neighbor_pairs.iter().map(|(a, b)| 1.0 - a.dot(b)).sum();
        total += cfg.lambda_smooth * s / neighbor_pairs.len() as f64;
    }
    if !contour.is_empty() {
        let s: f64 = contour
            .iter()
            .map(|(n, (dx, dy))| 1.0 - (n.x * dx + n.y * dy))
            .sum();
        total += cfg.lambda_contour * s / contour.len() as f64;
    }
    total
}

fn early_stage(epoch: usize, cfg: &TrainConfig) -> bool {
    (epoch as f64) < cfg.early_fraction * cfg.epochs as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub alpha: f64,
    pub normal_mae: Option<f64>,
    pub dir_mae: Option<f64>,
    pub int_err: Option<f64>,
    /// Iterations skipped this epoch because of non-finite gradients.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub normals: Field3,
    pub materials: MaterialField,
    pub lights: LightTable,
    pub roughness: Vec<f64>,
    pub log: Vec<EpochLog>,
    pub skipped_iterations: usize,
    /// Full-image photometric loss before the first update.
    pub initial_full_loss: f64,
    pub final_full_loss: f64,
    /// Exact full-resolution normal error of the initial field, when
    /// ground truth is available.
    pub initial_normal_mae: Option<f64>,
    pub final_normal_mae: Option<f64>,
    /// Masked PSNR of the final re-rendered images against observations.
    pub final_psnr_db: f64,
    pub model: FieldModel,
    pub bank: SpecularBasisBank,
}

/// Builds the deterministic initial model for a dataset/config/light-init
/// triple (the same construction `reconstruct` starts from).
pub fn build_model(
    ds: &PhotometricDataset,
    cfg: &TrainConfig,
    init: &LightInit,
) -> Result<(FieldModel, SpecularBasisBank, CoordMap)> {
    cfg.validate()?;
    let ladder = roughness_ladder(cfg.k, cfg.r_top, cfg.r_bottom)?;
    let bank = SpecularBasisBank::new(ladder.clone(), cfg.trainable_roughness)?;
    let lights0 = light_init(init, ds, cfg.seed)?;

    // Scale-match the diffuse start to the data: the initial field is
    // frontal, so its mean render is rho_d * mean_j(e_j l_z_j).
    let mut obs_sum = 0.0;
    let mut obs_count = 0usize;
    for img in &ds.images {
        for (i, &m) in ds.mask.data.iter().enumerate() {
            if m {
                obs_sum += img.data[i];
                obs_count += 1;
            }
        }
    }
    let mean_obs = obs_sum / obs_count.max(1) as f64;
    let mean_elz = lights0
        .directions
        .iter()
        .zip(&lights0.intensities)
        .map(|(d, e)| e * d.z().max(0.05))
        .sum::<f64>()
        / lights0.len().max(1) as f64;
    let initial_diffuse = mean_obs / mean_elz.max(0.05);

    let model = FieldModel::new(
        &cfg.field_spec(initial_diffuse),
        &lights0,
        cfg.trainable_roughness.then_some(&ladder[..]),
        cfg.seed,
    );
    let coord = CoordMap::from_mask(&ds.mask)?;
    Ok((model, bank, coord))
}

/// Full-resolution evaluation of the normal field under the mask.
pub fn eval_normal_field(
    model: &FieldModel,
    values: &[f64],
    coord: &CoordMap,
    ds: &PhotometricDataset,
) -> Result<Field3> {
    let w = ds.width();
    let mut field = Field3::zeros(w, ds.height());
    for px in ds.mask.indices() {
        let (x, y) = coord.map(px % w, px / w);
        field.data[px] = model.normal_at(values, x, y)?.as_vec();
    }
    Ok(field)
}

fn eval_material_field(
    model: &FieldModel,
    values: &[f64],
    coord: &CoordMap,
    ds: &PhotometricDataset,
) -> Result<MaterialField> {
    let w = ds.width();
    let mut field = MaterialField::zeros(w, ds.height(), model.k);
    for px in ds.mask.indices() {
        let (x, y) = coord.map(px % w, px / w);
        let m = model.material_at(values, x, y)?;
        field.set(px, &m);
    }
    Ok(field)
}

/// Renders every image from the given fields and lights with all bases
/// active, returning (mean absolute loss, rendered images).
pub fn full_render(
    normals: &Field3,
    materials: &MaterialField,
    lights: &LightTable,
    bank: &SpecularBasisBank,
    roughness: &[f64],
    ds: &PhotometricDataset,
) -> Result<(f64, Vec<Image>)> {
    let weights = vec![1.0; bank.k()];
    let bank_now = SpecularBasisBank::new(roughness.to_vec(), bank.trainable)?;
    let mut rendered = Vec::with_capacity(ds.n_images());
    let mut total = 0.0;
    let mut count = 0usize;
    for j in 0..ds.n_images() {
        let light = Light::new(lights.directions[j], lights.intensities[j]);
        let img = crate::shading::render_image_with_weights(
            normals, materials, &light, &bank_now, &weights, &ds.mask,
        )?;
        for (i, &m) in ds.mask.data.iter().enumerate() {
            if m {
                total += (img.data[i] - ds.images[j].data[i]).abs();
                count += 1;
            }
        }
        rendered.push(img);
    }
    Ok((total / count.max(1) as f64, rendered))
}

struct PhotoTask {
    /// (masked-pixel index, per-batch-image observations)
    pixels: Vec<(usize, Vec<f64>)>,
}

struct PriorTask {
    pairs: Vec<(usize, usize)>,
    contour: Vec<(usize, (f64, f64))>,
}

struct IterationSetup<'a> {
    model: &'a FieldModel,
    feats: &'a [Vec<f64>],
    ladder: &'a [f64],
    weights: &'a [f64],
    batch_images: &'a [usize],
    photo_entries: usize,
    pair_total: usize,
    contour_total: usize,
    lambda_smooth: f64,
    lambda_contour: f64,
}

fn photo_chunk_grads(
    setup: &IterationSetup,
    snapshot: &Arc<Vec<f64>>,
    task: &PhotoTask,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::with_params(Arc::clone(snapshot));
    let view = Vec3::new(0.0, 0.0, 1.0);
    let mut lights = Vec::with_capacity(setup.batch_images.len());
    for &j in setup.batch_images {
        lights.push(setup.model.light_tape(&tape, j)?);
    }
    let roughness = setup.model.roughness_tape(&tape, setup.ladder);
    let mut acc: Option<Var> = None;
    for (pi, obs) in &task.pixels {
        let n = setup.model.normal_tape(&tape, &setup.feats[*pi])?;
        let (rho_d, rho_s) = setup.model.material_tape(&tape, &setup.feats[*pi]);
        for (bi, (l, e)) in lights.iter().enumerate() {
            let m = shade_pixel(&n, &rho_d, &rho_s, &roughness, setup.weights, l, e, view)?;
            let diff = m.shift(-obs[bi]).abs_val();
            acc = Some(match acc {
                None => diff,
                Some(a) => a + diff,
            });
        }
    }
    let partial = acc
        .expect("photometric chunk is never empty")
        .scale(1.0 / setup.photo_entries as f64);
    let grads = tape.backward(&partial)?;
    Ok((partial.value(), grads.into_params()))
}

fn prior_chunk_grads(
    setup: &IterationSetup,
    snapshot: &Arc<Vec<f64>>,
    task: &PriorTask,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::with_params(Arc::clone(snapshot));
    let mut acc: Option<Var> = None;
    let add = |term: Var, acc: &mut Option<Var>| {
        *acc = Some(match acc.take() {
            None => term,
            Some(a) => a + term,
        });
    };
    for &(p, q) in &task.pairs {
        let np = setup.model.normal_tape(&tape, &setup.feats[p])?;
        let nq = setup.model.normal_tape(&tape, &setup.feats[q])?;
        let term = np
            .dot(&nq)
            .scale(-1.0)
            .shift(1.0)
            .scale(setup.lambda_smooth / setup.pair_total as f64);
        add(term, &mut acc);
    }
    for &(c, (dx, dy)) in &task.contour {
        let n = setup.model.normal_tape(&tape, &setup.feats[c])?;
        let along = n.x.scale(dx) + n.y.scale(dy);
        let term = along
            .scale(-1.0)
            .shift(1.0)
            .scale(setup.lambda_contour / setup.contour_total as f64);
        add(term, &mut acc);
    }
    let partial = acc.expect("prior chunk is never empty");
    let grads = tape.backward(&partial)?;
    Ok((partial.value(), grads.into_params()))
}

/// Joint reconstruction. Runs `epochs x ceil(n / images_per_iteration)`
/// iterations; each iteration samples a batch of images (round-robin
/// shuffled per epoch) and masked pixels, minimizes the photometric loss
/// plus early priors over all trainable leaves, and applies one Adam step.
pub fn reconstruct(
    ds: &PhotometricDataset,
    cfg: &TrainConfig,
    init: &LightInit,
) -> Result<Solution> {
    reconstruct_with_progress(ds, cfg, init, |_| {})
}

pub fn reconstruct_with_progress(
    ds: &PhotometricDataset,
    cfg: &TrainConfig,
    init: &LightInit,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Solution> {
    cfg.validate()?;
    let n = ds.n_images();
    if n < 4 {
        return Err(Error::TooFewImages { got: n, need: 4 });
    }
    let masked = ds.mask.indices();
    if masked.is_empty() {
        return Err(Error::EmptyMask);
    }

    let (mut model, bank, coord) = build_model(ds, cfg, init)?;
    let ladder = bank.roughness().to_vec();
    let w = ds.width();

    // Features for every masked pixel, plus a reverse lookup.
    let mut masked_pos = vec![usize::MAX; w * ds.height()];
    let mut feats = Vec::with_capacity(masked.len());
    for (mi, &px) in masked.iter().enumerate() {
        masked_pos[px] = mi;
        let (x, y) = coord.map(px % w, px / w);
        feats.push(model.encoder.encode(x, y)?);
    }
    let pairs: Vec<(usize, usize)> = ds
        .mask
        .neighbor_pairs()
        .into_iter()
        .map(|(p, q)| (masked_pos[p], masked_pos[q]))
        .collect();
    let contour: Vec<(usize, (f64, f64))> = ds
        .mask
        .boundary_with_outward()
        .into_iter()
        .map(|(px, d)| (masked_pos[px], d))
        .collect();

    // Initial state diagnostics.
    let values0 = model.store.values().to_vec();
    let normals0 = eval_normal_field(&model, &values0, &coord, ds)?;
    let materials0 = eval_material_field(&model, &values0, &coord, ds)?;
    let lights_now = model.light_table();
    let rough_now = model.roughness_values(&ladder);
    let (initial_full_loss, _) =
        full_render(&normals0, &materials0, &lights_now, &bank, &rough_now, ds)?;
    let initial_normal_mae = match &ds.gt_normals {
        Some(gt) => Some(mean_angular_error(&normals0, gt, &ds.mask)?.0),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metric_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4d45_5452_4943u64);
    let metric_sample: Vec<usize> = (0..METRIC_SAMPLE.min(masked.len()))
        .map(|_| metric_rng.gen_range(0..masked.len()))
        .collect();

    let mut adam = AdamState::new(model.store.len());
    let iters_per_epoch = n.div_ceil(cfg.images_per_iteration);
    let batch_size = cfg.images_per_iteration.min(n);
    let mut image_order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut skipped_total = 0usize;

    for epoch in 0..cfg.epochs {
        let level = alpha_schedule(epoch, cfg);
        let weights = psb_weights(&level);
        image_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let mut skipped = 0usize;

        for iter in 0..iters_per_epoch {
            let start = iter * cfg.images_per_iteration;
            let batch: Vec<usize> = (0..batch_size)
                .map(|i| image_order[(start + i) % n])
                .collect();

            // sample pixels and prior items (all RNG use stays serial)
            let pixel_ids: Vec<usize> = (0..cfg.pixels_per_iteration)
                .map(|_| rng.gen_range(0..masked.len()))
                .collect();
            let (pair_batch, contour_batch) = if early_stage(epoch, cfg)
                && (cfg.lambda_smooth > 0.0 || cfg.lambda_contour > 0.0)
            {
                let pair_count = (cfg.pixels_per_iteration / PAIR_DIVISOR).max(1);
                let pb: Vec<(usize, usize)> = if pairs.is_empty() {
                    Vec::new()
                } else {
                    (0..pair_count)
                        .map(|_| pairs[rng.gen_range(0..pairs.len())])
                        .collect()
                };
                let cb: Vec<(usize, (f64, f64))> = if contour.len() <= CONTOUR_CAP {
                    contour.clone()
                } else {
                    (0..CONTOUR_CAP)
                        .map(|_| contour[rng.gen_range(0..contour.len())])
                        .collect()
                };
                (pb, cb)
            } else {
                (Vec::new(), Vec::new())
            };

            let setup = IterationSetup {
                model: &model,
                feats: &feats,
                ladder: &ladder,
                weights: &weights,
                batch_images: &batch,
                photo_entries: pixel_ids.len() * batch.len(),
                pair_total: pair_batch.len().max(1),
                contour_total: contour_batch.len().max(1),
                lambda_smooth: cfg.lambda_smooth,
                lambda_contour: cfg.lambda_contour,
            };

            let photo_tasks: Vec<PhotoTask> = pixel_ids
                .chunks(PIXEL_CHUNK)
                .map(|chunk| PhotoTask {
                    pixels: chunk
                        .iter()
                        .map(|&mi| {
                            let px = masked[mi];
                            let obs = batch.iter().map(|&j| ds.images[j].data[px]).collect();
                            (mi, obs)
                        })
                        .collect(),
                })
                .collect();
            let prior_tasks: Vec<PriorTask> = {
                let mut tasks = Vec::new();
                for pc in pair_batch.chunks(PRIOR_CHUNK) {
                    tasks.push(PriorTask {
                        pairs: pc.to_vec(),
                        contour: Vec::new(),
                    });
                }
                for cc in contour_batch.chunks(PRIOR_CHUNK) {
                    tasks.push(PriorTask {
                        pairs: Vec::new(),
                        contour: cc.to_vec(),
                    });
                }
                tasks
            };

            let snapshot = model.store.snapshot();
            let photo_results: Result<Vec<(f64, Vec<f64>)>> = photo_tasks
                .par_iter()
                .map(|t| photo_chunk_grads(&setup, &snapshot, t))
                .collect();
            let prior_results: Result<Vec<(f64, Vec<f64>)>> = prior_tasks
                .par_iter()
                .map(|t| prior_chunk_grads(&setup, &snapshot, t))
                .collect();

            // serialized deterministic reduction, in chunk order
            let mut loss_value = 0.0;
            let mut grads = vec![0.0; model.store.len()];
            let mut ok = true;
            match (photo_results, prior_results) {
                (Ok(ps), Ok(rs)) => {
                    for (l, g) in ps.iter().chain(rs.iter()) {
                        loss_value += l;
                        for (acc, gi) in grads.iter_mut().zip(g) {
                            *acc += gi;
                        }
                    }
                }
                // degenerate geometry (light collapsed onto -view) is
                // treated like a non-finite batch: skip and count
                _ => ok = false,
            }

            if ok {
                match adam.step(model.store.values_mut(), &grads, cfg.learning_rate) {
                    Ok(()) => {
                        model.guard_light_dirs();
                        epoch_loss += loss_value;
                        epoch_batches += 1;
                    }
                    Err(Error::NonFiniteGradient) => skipped += 1,
                    Err(e) => return Err(e),
                }
            } else {
                skipped += 1;
            }
        }

        // per-epoch diagnostics; the normal error is a fixed-subsample
        // estimate to keep epochs cheap
        let (normal_mae, dir_mae, int_err) = match (&ds.gt_normals, &ds.gt_lights) {
            (gt_n, gt_l) => {
                let values = model.store.values();
                let nm = match gt_n {
                    Some(gt) => {
                        let mut total = 0.0;
                        for &mi in &metric_sample {
                            let px = masked[mi];
                            let (x, y) = coord.map(px % w, px / w);
                            let n = model.normal_at(values, x, y)?;
                            let g = gt.data[px].normalize()?;
                            total += n.angle_deg(&g);
                        }
                        Some(total / metric_sample.len().max(1) as f64)
                    }
                    None => None,
                };
                let (dm, ie) = match gt_l {
                    Some(gt) => {
                        let est = model.light_table();
                        (
                            Some(light_direction_mae(&est.directions, &gt.directions)?),
                            Some(scale_invariant_intensity_error(
                                &est.intensities,
                                &gt.intensities,
                            )?),
                        )
                    }
                    None => (None, None),
                };
                (nm, dm, ie)
            }
        };

        let entry = EpochLog {
            epoch,
            loss: epoch_loss / epoch_batches.max(1) as f64,
            alpha: level.alpha(),
            normal_mae,
            dir_mae,
            int_err,
            skipped,
        };
        on_epoch(&entry);
        log.push(entry);
        skipped_total += skipped;
    }

    // Final full-resolution readout.
    let values = model.store.values().to_vec();
    let normals = eval_normal_field(&model, &values, &coord, ds)?;
    let materials = eval_material_field(&model, &values, &coord, ds)?;
    let lights = model.light_table();
    let roughness = model.roughness_values(&ladder);
    let (final_full_loss, rendered) =
        full_render(&normals, &materials, &lights, &bank, &roughness, ds)?;
    let pairs_ref: Vec<(&Image, &Image)> = rendered.iter().zip(&ds.images).collect();
    let final_psnr_db = psnr_masked(&pairs_ref, &ds.mask, 1.0)?;
    let final_normal_mae = match &ds.gt_normals {
        Some(gt) => Some(mean_angular_error(&normals, gt, &ds.mask)?.0),
        None => None,
    };

    Ok(Solution {
        normals,
        materials,
        lights,
        roughness,
        log,
        skipped_iterations: skipped_total,
        initial_full_loss,
        final_full_loss,
        initial_normal_mae,
        final_normal_mae,
        final_psnr_db,
        model,
        bank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, MaterialLayout, SynthSceneSpec, SynthShape};
    use crate::raster::Mask;
    use crate::vec3::UnitVec3;

    #[test]
    fn photometric_loss_examples() {
        assert_eq!(photometric_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let delta = photometric_loss(&[0.5, 0.9], &[0.4, 0.8]).unwrap();
        assert!((delta - 0.1).abs() < 1e-15);
        let e = photometric_loss(&[0.2, 0.8], &[0.3, 0.5]).unwrap();
        assert!((e - 0.2).abs() < 1e-15);
        assert!(matches!(
            photometric_loss(&[], &[]),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn alpha_schedule_shape() {
        let cfg = TrainConfig {
            epochs: 100,
            k: 12,
            psb_fraction: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(alpha_schedule(0, &cfg).alpha(), 0.0);
        assert_eq!(alpha_schedule(50, &cfg).alpha(), 12.0);
        assert_eq!(alpha_schedule(25, &cfg).alpha(), 6.0);
        assert_eq!(alpha_schedule(99, &cfg).alpha(), 12.0);
        let mut prev = -1.0;
        for e in 0..100 {
            let a = alpha_schedule(e, &cfg).alpha();
            assert!(a >= prev && (0.0..=12.0).contains(&a));
            prev = a;
        }
        let off = TrainConfig {
            progressive_bases: false,
            ..cfg
        };
        assert_eq!(alpha_schedule(0, &off).alpha(), 12.0);
    }

    #[test]
    fn early_priors_values() {
        let cfg = TrainConfig {
            epochs: 100,
            early_fraction: 0.5,
            lambda_smooth: 0.1,
            lambda_contour: 0.05,
            ..TrainConfig::default()
        };
        let n = Vec3::new(0.0, 0.0, 1.0);
        // constant field: smoothness term vanishes
        assert_eq!(early_priors(&[(n, n), (n, n)], &[], 10, &cfg), 0.0);
        // past the cutoff: zero regardless of content
        let pairs = [(n, Vec3::new(1.0, 0.0, 0.0))];
        assert_eq!(early_priors(&pairs, &[], 50, &cfg), 0.0);
        assert!(early_priors(&pairs, &[], 49, &cfg) > 0.0);
        // contour normal along the outward direction contributes zero
        let c = [(Vec3::new(1.0, 0.0, 0.0), (1.0, 0.0))];
        assert_eq!(early_priors(&[], &c, 0, &cfg), 0.0);
        let c = [(Vec3::new(0.0, 0.0, 1.0), (1.0, 0.0))];
        assert!((early_priors(&[], &c, 0, &cfg) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut adam = AdamState::new(2);
        let mut params = vec![1.0, -0.5];
        adam.step(&mut params, &[0.0, 0.0], 1e-3).unwrap();
        assert_eq!(params, vec![1.0, -0.5]);
        assert_eq!(adam.t(), 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut adam = AdamState::new(1);
        let mut params = vec![0.0];
        adam.step(&mut params, &[0.37], 1e-3).unwrap();
        // bias correction makes m_hat / sqrt(v_hat) = sign(g) on step one
        assert!((params[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_two_steps_match_hand_expansion() {
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
        let mut adam = AdamState::new(1);
        let mut params = vec![0.5];
        adam.step(&mut params, &[1.0], lr).unwrap();
        adam.step(&mut params, &[1.0], lr).unwrap();

        // hand-evaluated recurrences for g = (1, 1)
        let m1 = (1.0 - b1) * 1.0;
        let v1 = (1.0 - b2) * 1.0;
        let x1 = 0.5 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1);
        let v2 = b2 * v1 + (1.0 - b2);
        let x2 = x1
            - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((params[0] - x2).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut adam = AdamState::new(1);
        let mut params = vec![1.0];
        let r = adam.step(&mut params, &[f64::NAN], 1e-3);
        assert!(matches!(r, Err(Error::NonFiniteGradient)));
        assert_eq!(params, vec![1.0]);
        assert_eq!(adam.t(), 0);
    }

    #[test]
    fn config_file_roundtrip_and_unknown_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        std::fs::write(&path, "epochs = 42\nlearning_rate = 0.002\n# note\nk = 6\n").unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.epochs, 42);
        assert_eq!(cfg.k, 6);
        assert!((cfg.learning_rate - 0.002).abs() < 1e-15);

        std::fs::write(&path, "bogus = 1\n").unwrap();
        assert!(matches!(
            TrainConfig::from_file(&path),
            Err(Error::Config(_))
        ));
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            k: 4,
            epochs,
            pixels_per_iteration: 256,
            encoding_levels: 4,
            normal_hidden: 16,
            normal_layers: 3,
            material_hidden: 16,
            material_layers: 3,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn flat_diffuse_dataset() -> PhotometricDataset {
        // constant-normal plane under 8 lights, diffuse only
        let spec = SynthSceneSpec {
            shape: SynthShape::Heightfield {
                amplitude: 1e-9,
                frequency: 1.0,
            },
            width: 20,
            height: 20,
            material: MaterialLayout::Uniform,
            k: 4,
            r_top: 100.0,
            r_bottom: 10.0,
            n_lights: 8,
            cap_deg: 45.0,
            noise_sigma: 0.0,
            seed: 13,
        };
        let mut scene = synth_scene(&spec).unwrap();
        // strip the specular part so the problem is the easy convex one
        for px in 0..scene.materials.rho_d.len() {
            for i in 0..scene.materials.k {
                scene.materials.rho_s[px * scene.materials.k + i] = 0.0;
            }
        }
        let lights = scene.dataset.gt_lights.clone().unwrap();
        let weights = vec![1.0; 4];
        for j in 0..8 {
            scene.dataset.images[j] = crate::shading::render_image_with_weights(
                scene.dataset.gt_normals.as_ref().unwrap(),
                &scene.materials,
                &Light::new(lights.directions[j], lights.intensities[j]),
                &scene.bank,
                &weights,
                &scene.dataset.mask,
            )
            .unwrap();
        }
        scene.dataset
    }

    #[test]
    fn reconstruct_flat_diffuse_plane() {
        let ds = flat_diffuse_dataset();
        let cfg = quick_config(120);
        let sol = reconstruct(&ds, &cfg, &LightInit::GtNoise(0.0)).unwrap();
        let mae = sol.final_normal_mae.unwrap();
        assert!(mae < 1.0, "flat diffuse plane should recover to <1 deg, got {mae}");
        assert!(sol.final_full_loss <= sol.initial_full_loss);
        assert_eq!(sol.skipped_iterations, 0);
        assert!(sol.log.iter().all(|e| e.loss >= 0.0));
    }

    #[test]
    fn reconstruct_deterministic_under_seed() {
        let ds = flat_diffuse_dataset();
        let cfg = quick_config(10);
        let a = reconstruct(&ds, &cfg, &LightInit::ViewJitter(5.0)).unwrap();
        let b = reconstruct(&ds, &cfg, &LightInit::ViewJitter(5.0)).unwrap();
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.alpha.to_bits(), y.alpha.to_bits());
            assert_eq!(x.normal_mae.map(f64::to_bits), y.normal_mae.map(f64::to_bits));
        }
        for (x, y) in a
            .model
            .store
            .values()
            .iter()
            .zip(b.model.store.values())
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn non_finite_observations_skip_iterations() {
        let mut ds = flat_diffuse_dataset();
        // poison one whole image so every batch containing it goes
        // non-finite (all 8 images are drawn each iteration here)
        for &px in &ds.mask.indices() {
            ds.images[0].data[px] = f64::NAN;
        }
        let cfg = quick_config(3);
        let sol = reconstruct(&ds, &cfg, &LightInit::ViewJitter(0.0)).unwrap();
        assert_eq!(sol.skipped_iterations, 3);
        assert!(sol.model.store.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reconstruct_rejects_bad_inputs() {
        let ds = flat_diffuse_dataset();
        let mut few = ds.clone();
        few.images.truncate(3);
        few.names.truncate(3);
        assert!(matches!(
            reconstruct(&few, &quick_config(2), &LightInit::ViewJitter(0.0)),
            Err(Error::TooFewImages { .. })
        ));

        let mut empty = ds;
        empty.mask = Mask::filled(20, 20, false);
        assert!(matches!(
            reconstruct(&empty, &quick_config(2), &LightInit::ViewJitter(0.0)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn gradients_reach_every_parameter_family() {
        // every leaf family (both nets, light dirs, intensities, trainable
        // roughness) receives gradient from the loss on some batch
        let ds = flat_diffuse_dataset();
        let mut cfg = quick_config(2);
        cfg.trainable_roughness = true;
        let (model, bank, coord) = build_model(&ds, &cfg, &LightInit::ViewJitter(3.0)).unwrap();
        let masked = ds.mask.indices();
        let feats: Vec<Vec<f64>> = masked
            .iter()
            .map(|&px| {
                let (x, y) = coord.map(px % ds.width(), px / ds.width());
                model.encoder.encode(x, y).unwrap()
            })
            .collect();
        let setup = IterationSetup {
            model: &model,
            feats: &feats,
            ladder: &bank.roughness().to_vec(),
            weights: &vec![1.0; cfg.k],
            batch_images: &(0..4).collect::<Vec<_>>(),
            photo_entries: 4 * masked.len().min(64),
            pair_total: 1,
            contour_total: 1,
            lambda_smooth: 0.0,
            lambda_contour: 0.0,
        };
        let snapshot = model.store.snapshot();
        let task = PhotoTask {
            pixels: masked
                .iter()
                .take(64)
                .map(|&px| {
                    let mi = feats.len(); // unused marker
                    let _ = mi;
                    let obs = (0..4).map(|j| ds.images[j].data[px]).collect();
                    (masked.iter().position(|&m| m == px).unwrap(), obs)
                })
                .collect(),
        };
        let (_, grads) = photo_chunk_grads(&setup, &snapshot, &task).unwrap();
        for entry in model.store.entries() {
            let seg = &grads[entry.offset..entry.offset + entry.len()];
            assert!(
                seg.iter().any(|&g| g != 0.0),
                "no gradient reached {}",
                entry.name
            );
        }
    }
}
