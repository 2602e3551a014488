//! Dataset model and on-disk layout.
//!
//! A dataset directory holds `filenames.txt` (one image per line, order =
//! light index), the listed PFM images, `mask.pfm`, and optionally
//! `light_directions.txt`, `light_intensities.txt`, `normal_gt.pfm`.
//! Color images are converted to luminance at load; the model is
//! single-channel throughout.

pub mod pfm;
mod synth;

pub use synth::{
    quantize_to_f32, synth_scene, MaterialLayout, SynthScene, SynthSceneSpec, SynthShape,
};

use crate::error::{Error, Result};
use crate::field::{jitter_direction, LightTable};
use crate::raster::{check_same_shape, Field3, Image, Mask};
use crate::vec3::{UnitVec3, Vec3};
use pfm::{read_pfm, write_pfm_gray, write_pfm_rgb, Pfm};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

#[derive(Debug, Clone)]
pub struct PhotometricDataset {
    pub images: Vec<Image>,
    pub names: Vec<String>,
    pub mask: Mask,
    pub view: UnitVec3,
    pub gt_lights: Option<LightTable>,
    pub gt_normals: Option<Field3>,
}

impl PhotometricDataset {
    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }
}

fn luminance(rgb: &[[f64; 3]], width: usize, height: usize) -> Image {
    Image {
        width,
        height,
        data: rgb
            .iter()
            .map(|c| LUMA_WEIGHTS[0] * c[0] + LUMA_WEIGHTS[1] * c[1] + LUMA_WEIGHTS[2] * c[2])
            .collect(),
    }
}

fn read_image_as_gray(path: &Path) -> Result<Image> {
    Ok(match read_pfm(path)? {
        Pfm::Gray(img) => img,
        Pfm::Rgb {
            width,
            height,
            data,
        } => luminance(&data, width, height),
    })
}

/// Loads a dataset directory. `filenames.txt` order defines light indices.
pub fn load_dataset(dir: &Path) -> Result<PhotometricDataset> {
    let names_path = dir.join("filenames.txt");
    let listing = fs::read_to_string(&names_path)
        .map_err(|_| Error::MissingFile(names_path.display().to_string()))?;
    let names: Vec<String> = listing
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::FileFormat {
            path: names_path.display().to_string(),
            reason: "no image names listed".into(),
        });
    }

    let mask_path = dir.join("mask.pfm");
    let mask = match read_pfm(&mask_path)? {
        Pfm::Gray(img) => Mask {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| v > 0.5).collect(),
        },
        Pfm::Rgb { .. } => {
            return Err(Error::FileFormat {
                path: mask_path.display().to_string(),
                reason: "mask must be grayscale".into(),
            })
        }
    };

    let mut images = Vec::with_capacity(names.len());
    for name in &names {
        let img = read_image_as_gray(&dir.join(name))?;
        check_same_shape(img.width, img.height, mask.width, mask.height, name)?;
        images.push(img);
    }

    let n = names.len();
    let dir_path = dir.join("light_directions.txt");
    let gt_lights = if dir_path.exists() {
        let directions = read_direction_lines(&dir_path, n)?;
        let int_path = dir.join("light_intensities.txt");
        let intensities = if int_path.exists() {
            read_intensity_lines(&int_path, n)?
        } else {
            vec![1.0; n]
        };
        Some(LightTable {
            directions,
            intensities,
        })
    } else {
        None
    };

    let gt_path = dir.join("normal_gt.pfm");
    let gt_normals = if gt_path.exists() {
        Some(read_normal_map(&gt_path, &mask)?)
    } else {
        None
    };

    Ok(PhotometricDataset {
        images,
        names,
        mask,
        view: UnitVec3::z_axis(),
        gt_lights,
        gt_normals,
    })
}

fn read_direction_lines(path: &Path, expected: usize) -> Result<Vec<UnitVec3>> {
    let text = fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let bad = |reason: String| Error::FileFormat {
        path: path.display().to_string(),
        reason,
    };
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("line {}: not numeric", ln + 1)))?;
        if vals.len() != 3 {
            return Err(bad(format!("line {}: expected 3 values", ln + 1)));
        }
        let v = Vec3::new(vals[0], vals[1], vals[2]);
        if (v.norm() - 1.0).abs() > 1e-3 {
            return Err(bad(format!("line {}: direction not unit", ln + 1)));
        }
        out.push(v.normalize()?);
    }
    if out.len() != expected {
        return Err(Error::CountMismatch {
            what: path.display().to_string(),
            expected,
            got: out.len(),
        });
    }
    Ok(out)
}

fn read_intensity_lines(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let bad = |reason: String| Error::FileFormat {
        path: path.display().to_string(),
        reason,
    };
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("line {}: not numeric", ln + 1)))?;
        match vals.len() {
            1 => out.push(vals[0]),
            // color intensities are averaged into the scalar model
            3 => out.push((vals[0] + vals[1] + vals[2]) / 3.0),
            _ => return Err(bad(format!("line {}: expected 1 or 3 values", ln + 1))),
        }
    }
    if out.len() != expected {
        return Err(Error::CountMismatch {
            what: path.display().to_string(),
            expected,
            got: out.len(),
        });
    }
    Ok(out)
}

/// Reads a 3-channel PFM as a normal field, renormalizing masked pixels
/// that are not already unit to float32 precision.
pub fn read_normal_map(path: &Path, mask: &Mask) -> Result<Field3> {
    match read_pfm(path)? {
        Pfm::Rgb {
            width,
            height,
            data,
        } => {
            check_same_shape(width, height, mask.width, mask.height, "normal map vs mask")?;
            let mut field = Field3::zeros(width, height);
            for (i, px) in data.iter().enumerate() {
                if !mask.data[i] {
                    continue;
                }
                let v = Vec3::new(px[0], px[1], px[2]);
                let norm = v.norm();
                field.data[i] = if (norm - 1.0).abs() <= 1e-6 {
                    v
                } else {
                    v.normalize()
                        .map_err(|_| Error::FileFormat {
                            path: path.display().to_string(),
                            reason: format!("degenerate normal at pixel {i}"),
                        })?
                        .as_vec()
                };
            }
            Ok(field)
        }
        Pfm::Gray(_) => Err(Error::FileFormat {
            path: path.display().to_string(),
            reason: "normal map must be 3-channel".into(),
        }),
    }
}

pub fn write_normal_map(path: &Path, field: &Field3, mask: &Mask) -> Result<()> {
    check_same_shape(
        field.width,
        field.height,
        mask.width,
        mask.height,
        "normal map vs mask",
    )?;
    let data: Vec<[f64; 3]> = field
        .data
        .iter()
        .zip(&mask.data)
        .map(|(v, &m)| if m { [v.x, v.y, v.z] } else { [0.0; 3] })
        .collect();
    write_pfm_rgb(field.width, field.height, &data, path)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img = Image {
        width: mask.width,
        height: mask.height,
        data: mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    };
    write_pfm_gray(&img, path)
}

/// Writes a dataset directory in the layout understood by
/// [`load_dataset`], including whatever ground truth is present.
pub fn write_dataset(dir: &Path, ds: &PhotometricDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut listing = String::new();
    for (name, img) in ds.names.iter().zip(&ds.images) {
        listing.push_str(name);
        listing.push('\n');
        write_pfm_gray(img, &dir.join(name))?;
    }
    fs::write(dir.join("filenames.txt"), listing)?;
    write_mask(&dir.join("mask.pfm"), &ds.mask)?;
    if let Some(lights) = &ds.gt_lights {
        let mut dirs = String::new();
        let mut ints = String::new();
        for (d, e) in lights.directions.iter().zip(&lights.intensities) {
            dirs.push_str(&format!("{} {} {}\n", d.x(), d.y(), d.z()));
            ints.push_str(&format!("{e}\n"));
        }
        fs::write(dir.join("light_directions.txt"), dirs)?;
        fs::write(dir.join("light_intensities.txt"), ints)?;
    }
    if let Some(normals) = &ds.gt_normals {
        write_normal_map(&dir.join("normal_gt.pfm"), normals, &ds.mask)?;
    }
    Ok(())
}

/// Light-table disturbance used by the noise-robustness protocol: every
/// direction is rotated about a uniformly random axis by an angle drawn
/// uniformly from [0, sigma_deg], and all intensities are reset to one.
pub fn perturb_lights(lights: &LightTable, sigma_deg: f64, seed: u64) -> LightTable {
    assert!(sigma_deg >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5045_5254_5552u64);
    LightTable {
        directions: lights
            .directions
            .iter()
            .map(|d| jitter_direction(d, sigma_deg, &mut rng))
            .collect(),
        intensities: vec![1.0; lights.len()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> PhotometricDataset {
        let mut mask = Mask::filled(4, 3, false);
        mask.set(1, 1, true);
        mask.set(2, 1, true);
        let mut img0 = Image::zeros(4, 3);
        img0.set(1, 1, 0.5);
        let mut img1 = Image::zeros(4, 3);
        img1.set(2, 1, 0.25f32 as f64);
        let mut normals = Field3::zeros(4, 3);
        normals.set(1, 1, Vec3::new(0.0, 0.0, 1.0));
        normals.set(2, 1, Vec3::new(0.6, 0.0, 0.8));
        PhotometricDataset {
            images: vec![img0, img1],
            names: vec!["a.pfm".into(), "b.pfm".into()],
            mask,
            view: UnitVec3::z_axis(),
            gt_lights: Some(LightTable {
                directions: vec![
                    UnitVec3::z_axis(),
                    Vec3::new(0.0, 0.6, 0.8).normalize().unwrap(),
                ],
                intensities: vec![1.0, 1.25],
            }),
            gt_normals: Some(normals),
        }
    }

    #[test]
    fn dataset_write_load_duality() {
        let tmp = tempfile::tempdir().unwrap();
        let d1 = tmp.path().join("ds1");
        let d2 = tmp.path().join("ds2");
        let ds = tiny_dataset();
        write_dataset(&d1, &ds).unwrap();
        let loaded = load_dataset(&d1).unwrap();
        write_dataset(&d2, &loaded).unwrap();
        for name in ["a.pfm", "b.pfm", "mask.pfm", "normal_gt.pfm", "filenames.txt"] {
            let x = fs::read(d1.join(name)).unwrap();
            let y = fs::read(d2.join(name)).unwrap();
            assert_eq!(x, y, "{name} not byte-identical after reload");
        }
        let l0 = ds.gt_lights.as_ref().unwrap();
        let l1 = loaded.gt_lights.as_ref().unwrap();
        for j in 0..2 {
            assert!(
                (l0.directions[j].as_vec() - l1.directions[j].as_vec()).norm() < 1e-12
            );
            assert!((l0.intensities[j] - l1.intensities[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_lights_line_is_count_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("ds");
        write_dataset(&d, &tiny_dataset()).unwrap();
        fs::write(d.join("light_directions.txt"), "0 0 1\n").unwrap();
        assert!(matches!(
            load_dataset(&d),
            Err(Error::CountMismatch { .. })
        ));
    }

    #[test]
    fn color_intensities_averaged() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("ds");
        write_dataset(&d, &tiny_dataset()).unwrap();
        fs::write(d.join("light_intensities.txt"), "1 2 3\n2.5\n").unwrap();
        let loaded = load_dataset(&d).unwrap();
        let ints = &loaded.gt_lights.unwrap().intensities;
        assert_eq!(ints, &vec![2.0, 2.5]);
    }

    #[test]
    fn missing_files_reported() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(tmp.path()),
            Err(Error::MissingFile(_))
        ));
        let d = tmp.path().join("ds");
        write_dataset(&d, &tiny_dataset()).unwrap();
        fs::remove_file(d.join("b.pfm")).unwrap();
        assert!(matches!(load_dataset(&d), Err(Error::MissingFile(_))));
    }

    #[test]
    fn rgb_images_convert_to_luminance() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("ds");
        let ds = tiny_dataset();
        write_dataset(&d, &ds).unwrap();
        // replace one image with a 3-channel version
        let rgb: Vec<[f64; 3]> = (0..12).map(|_| [1.0, 0.5, 0.25]).collect();
        write_pfm_rgb(4, 3, &rgb, &d.join("a.pfm")).unwrap();
        let loaded = load_dataset(&d).unwrap();
        let expect = 0.2126 * 1.0 + 0.7152 * 0.5 + 0.0722 * 0.25;
        let got = loaded.images[0].at(0, 0);
        assert!((got - expect).abs() < 1e-7, "{got} vs {expect}");
        assert!(got >= 0.0);
    }

    #[test]
    fn perturb_zero_keeps_directions_resets_intensities() {
        let lights = tiny_dataset().gt_lights.unwrap();
        let p = perturb_lights(&lights, 0.0, 9);
        for j in 0..2 {
            assert_eq!(
                p.directions[j].as_vec(),
                lights.directions[j].as_vec()
            );
            assert_eq!(p.intensities[j], 1.0);
        }
    }

    #[test]
    fn perturb_respects_angle_bound_and_seed() {
        let lights = LightTable {
            directions: vec![UnitVec3::z_axis(); 64],
            intensities: vec![2.0; 64],
        };
        let a = perturb_lights(&lights, 70.0, 4);
        let b = perturb_lights(&lights, 70.0, 4);
        let mut max_angle: f64 = 0.0;
        for j in 0..64 {
            assert_eq!(a.directions[j].as_vec(), b.directions[j].as_vec());
            let angle = a.directions[j].angle_deg(&lights.directions[j]);
            assert!(angle <= 70.0 + 1e-9);
            max_angle = max_angle.max(angle);
            assert_eq!(a.intensities[j], 1.0);
        }
        assert!(max_angle > 5.0, "perturbation should actually move lights");
    }
}
