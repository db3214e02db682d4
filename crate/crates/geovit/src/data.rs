//! Seeded synthetic scene generation with analytically known labels, plus
//! dataset serialization.
//!
//! Every coefficient below is a frozen constant: tests and the label
//! formulas depend on the exact values, so changing any of them is a
//! breaking change to the dataset format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant, WEATHER_DIM};
use crate::rng::{derive_seed, streams};
use crate::scalar::Scalar;
use crate::tensor::gvt;
use crate::tensor::Tensor;

/// Pixels with plume intensity above this value are labeled plume.
pub const MASK_THRESHOLD: f64 = 0.15;

/// One generated scene. Exactly one of `weather` (CO2) and `s5p` (NO2) is
/// present; `mask` accompanies the CO2 variant.
#[derive(Clone)]
pub struct Sample<T: Scalar> {
    pub s2: Tensor<T>,
    pub weather: Option<Tensor<T>>,
    pub s5p: Option<Tensor<T>>,
    pub mask: Option<Tensor<T>>,
    pub fuel_class: usize,
    /// Label in original (unstandardized) units.
    pub target: f64,
}

impl<T: Scalar> Sample<T> {
    pub fn validate(&self, variant: Variant) -> Result<()> {
        match variant {
            Variant::Co2 => {
                if self.weather.is_none() || self.s5p.is_some() {
                    return Err(Error::contract(
                        "co2 sample must carry weather and no s5p image",
                    ));
                }
                if self.mask.is_none() {
                    return Err(Error::contract("co2 sample must carry a mask"));
                }
            }
            Variant::No2 => {
                if self.s5p.is_none() || self.weather.is_some() || self.mask.is_some() {
                    return Err(Error::contract(
                        "no2 sample must carry an s5p image and neither weather nor mask",
                    ));
                }
            }
        }
        if !self.s2.all_finite() {
            return Err(Error::contract("s2 image contains non-finite values"));
        }
        Ok(())
    }
}

/// Target standardization statistics, always computed on the train split.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub target_mean: f64,
    pub target_std: f64,
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn from_targets(targets: &[f64]) -> Self {
        if targets.is_empty() {
            return Self::identity();
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        NormStats {
            target_mean: mean,
            target_std: if std < 1e-9 { 1.0 } else { std },
        }
    }

    pub fn standardize(&self, t: f64) -> f64 {
        (t - self.target_mean) / self.target_std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }
}

/// Bilinear resize on a plain row-major grid, half-pixel centers with edge
/// clamping. Matches the tensor upsampling op when `dh`/`dw` are integer
/// multiples of the source size.
pub fn bilinear_resize(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    assert_eq!(src.len(), sh * sw);
    let axis = |d: usize, s: usize| -> Vec<(usize, usize, f64)> {
        (0..d)
            .map(|o| {
                let pos: f64 = ((o as f64 + 0.5) * s as f64 / d as f64 - 0.5)
                    .clamp(0.0, (s - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(s - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(dh, sh);
    let xs = axis(dw, sw);
    let mut out = Vec::with_capacity(dh * dw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Smooth low-frequency field: coarse uniform grid, bilinearly resized.
fn smooth_background(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Vec<f64> {
    const COARSE: usize = 5;
    let grid: Vec<f64> = (0..COARSE * COARSE).map(|_| rng.random_range(lo..hi)).collect();
    bilinear_resize(&grid, COARSE, COARSE, h, w)
}

fn cast_image<T: Scalar>(shape: &[usize], data: Vec<f64>) -> Tensor<T> {
    let v: Vec<T> = data.into_iter().map(T::from_f64).collect();
    Tensor::from_vec(shape.to_vec(), v).expect("generator produces matching shapes")
}

/// Emission-plume scene internals kept alongside the sample so tests can
/// recompute the label formula from first principles.
pub struct Co2Meta {
    /// Raw plume intensity field, [H*W] row-major, before thresholding.
    pub plume: Vec<f64>,
    pub amplitude: f64,
    pub wind: f64,
    /// Mean plume intensity over all pixels.
    pub integrated: f64,
    /// 10 * integrated * (1 + 0.3 * wind), before observation noise.
    pub pre_noise_target: f64,
}

const CO2_BANDS_CLASS0: [usize; 3] = [3, 4, 5];
const CO2_BANDS_CLASS1: [usize; 3] = [7, 8, 9];

fn check_co2_config(cfg: &ModelConfig) -> Result<()> {
    let needed = CO2_BANDS_CLASS1[2] + 1;
    if cfg.s2_bands < needed {
        return Err(Error::config(format!(
            "co2 generator needs at least {needed} s2 bands, config has {}",
            cfg.s2_bands
        )));
    }
    Ok(())
}

/// Generate one CO2 scene. Draw order is frozen; `amplitude_override`
/// replaces the drawn plume amplitude (the rng sequence is unchanged).
pub fn generate_co2_sample_with<T: Scalar>(
    cfg: &ModelConfig,
    seed: u64,
    amplitude_override: Option<f64>,
) -> Result<(Sample<T>, Co2Meta)> {
    check_co2_config(cfg)?;
    let h = cfg.image_size;
    let w = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let fuel_class = rng.random_range(0..2usize);
    let weather: Vec<f64> = (0..WEATHER_DIM)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let wind = weather[2];

    let mut image = Vec::with_capacity(cfg.s2_bands * h * w);
    for _ in 0..cfg.s2_bands {
        image.extend(smooth_background(&mut rng, h, w, 0.3, 0.6));
    }

    let margin = h as f64 / 4.0;
    let cy = rng.random_range(margin..h as f64 - margin);
    let cx = rng.random_range(margin..w as f64 - margin);
    let sigma = rng.random_range(0.09..0.14) * h as f64;
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let drawn_amp = rng.random_range(0.5..0.9);
    let amplitude = amplitude_override.unwrap_or(drawn_amp);

    let elongation = 1.0 + 0.25 * wind.abs().min(2.0);
    let sig_major = sigma * elongation;
    let sig_minor = sigma / elongation;
    let (sin_a, cos_a) = angle.sin_cos();

    let mut plume = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let u = dy * cos_a + dx * sin_a;
            let v = -dy * sin_a + dx * cos_a;
            let q = u * u / (sig_major * sig_major) + v * v / (sig_minor * sig_minor);
            plume.push(amplitude * (-0.5 * q).exp());
        }
    }

    let bands = if fuel_class == 0 {
        CO2_BANDS_CLASS0
    } else {
        CO2_BANDS_CLASS1
    };
    for &b in &bands {
        for (px, &p) in image[b * h * w..(b + 1) * h * w].iter_mut().zip(&plume) {
            *px = (*px + p).clamp(0.0, 1.0);
        }
    }

    let mask: Vec<f64> = plume
        .iter()
        .map(|&p| if p > MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();

    let integrated = plume.iter().sum::<f64>() / (h * w) as f64;
    let pre_noise_target = 10.0 * integrated * (1.0 + 0.3 * wind);
    let noise = Normal::new(0.0, 0.05).expect("valid sigma").sample(&mut rng);
    let target = pre_noise_target + noise;

    let sample = Sample {
        s2: cast_image(&[cfg.s2_bands, h, w], image),
        weather: Some(cast_image(&[WEATHER_DIM], weather)),
        s5p: None,
        mask: Some(cast_image(&[h, w], mask)),
        fuel_class,
        target,
    };
    let meta = Co2Meta {
        plume,
        amplitude,
        wind,
        integrated,
        pre_noise_target,
    };
    Ok((sample, meta))
}

pub fn generate_co2_sample<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Sample<T>, Co2Meta)> {
    generate_co2_sample_with(cfg, seed, None)
}

/// NO2 scene internals for label-consistency tests.
pub struct No2Meta {
    /// Hidden 8x8 concentration field, row-major.
    pub field: Vec<f64>,
    pub surface_factor: f64,
    /// 5 * mean(field) + 3 * surface_factor, before observation noise.
    pub pre_noise_target: f64,
}

const NO2_FIELD_SIZE: usize = 8;
const NO2_TEXTURE_BANDS: [usize; 3] = [0, 1, 2];

/// Generate one NO2 scene. The hidden field drives the S5P image, the
/// surface factor drives local S2 texture variance; the label needs both.
pub fn generate_no2_sample_with<T: Scalar>(
    cfg: &ModelConfig,
    seed: u64,
    zero_field: bool,
    zero_surface: bool,
) -> Result<(Sample<T>, No2Meta)> {
    if cfg.s2_bands < NO2_TEXTURE_BANDS.len() {
        return Err(Error::config(format!(
            "no2 generator needs at least {} s2 bands",
            NO2_TEXTURE_BANDS.len()
        )));
    }
    let h = cfg.image_size;
    let w = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let level: f64 = rng.random_range(0.2..0.8);
    let mut field: Vec<f64> = (0..NO2_FIELD_SIZE * NO2_FIELD_SIZE)
        .map(|_| (level + rng.random_range(-0.2..0.2f64)).clamp(0.0, 1.0))
        .collect();
    if zero_field {
        field.iter_mut().for_each(|v| *v = 0.0);
    }

    let noise_dist = Normal::new(0.0, 0.02).expect("valid sigma");
    let coarse = bilinear_resize(&field, NO2_FIELD_SIZE, NO2_FIELD_SIZE, h, w);
    let mut s5p = Vec::with_capacity(cfg.s5p_bands * h * w);
    for _ in 0..cfg.s5p_bands {
        s5p.extend(coarse.iter().map(|&v| v + noise_dist.sample(&mut rng)));
    }

    let drawn_surface = rng.random_range(0.0..1.0);
    let surface_factor = if zero_surface { 0.0 } else { drawn_surface };

    let mut image = Vec::with_capacity(cfg.s2_bands * h * w);
    for _ in 0..cfg.s2_bands {
        image.extend(smooth_background(&mut rng, h, w, 0.35, 0.65));
    }
    // texture amplitude encodes the surface factor through local variance
    for &b in &NO2_TEXTURE_BANDS {
        for px in image[b * h * w..(b + 1) * h * w].iter_mut() {
            let t = rng.random_range(-1.0..1.0) * 0.3 * surface_factor;
            *px = (*px + t).clamp(0.0, 1.0);
        }
    }

    let mean_field = field.iter().sum::<f64>() / field.len() as f64;
    let pre_noise_target = 5.0 * mean_field + 3.0 * surface_factor;
    let noise = Normal::new(0.0, 0.05).expect("valid sigma").sample(&mut rng);
    let target = pre_noise_target + noise;

    let sample = Sample {
        s2: cast_image(&[cfg.s2_bands, h, w], image),
        weather: None,
        s5p: Some(cast_image(&[cfg.s5p_bands, h, w], s5p)),
        mask: None,
        fuel_class: 0,
        target,
    };
    let meta = No2Meta {
        field,
        surface_factor,
        pre_noise_target,
    };
    Ok((sample, meta))
}

pub fn generate_no2_sample<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Sample<T>, No2Meta)> {
    generate_no2_sample_with(cfg, seed, false, false)
}

/// In-memory dataset with its target statistics. The train/eval split is
/// deterministic: the first 80% of indices train, the rest evaluate.
pub struct Dataset<T: Scalar> {
    pub variant: Variant,
    pub samples: Vec<Sample<T>>,
    pub norm: NormStats,
}

impl<T: Scalar> Dataset<T> {
    pub fn generate(cfg: &ModelConfig, count: usize, base_seed: u64) -> Result<Self> {
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let seed = derive_seed(base_seed, streams::SAMPLE, i as u64);
            let sample = match cfg.variant {
                Variant::Co2 => generate_co2_sample::<T>(cfg, seed)?.0,
                Variant::No2 => generate_no2_sample::<T>(cfg, seed)?.0,
            };
            samples.push(sample);
        }
        Ok(Self::from_samples(cfg.variant, samples))
    }

    /// Wrap samples, computing target statistics from the train split.
    pub fn from_samples(variant: Variant, samples: Vec<Sample<T>>) -> Self {
        let n_train = samples.len() * 4 / 5;
        let train_targets: Vec<f64> = samples[..n_train].iter().map(|s| s.target).collect();
        let norm = NormStats::from_targets(&train_targets);
        Dataset {
            variant,
            samples,
            norm,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train_count(&self) -> usize {
        self.samples.len() * 4 / 5
    }

    pub fn train(&self) -> &[Sample<T>] {
        &self.samples[..self.train_count()]
    }

    pub fn eval(&self) -> &[Sample<T>] {
        &self.samples[self.train_count()..]
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    files: BTreeMap<String, String>,
    fuel_class: usize,
    target: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    variant: Variant,
    count: usize,
    samples: Vec<ManifestSample>,
    norm_stats: NormStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

/// Write the dataset as manifest.json plus one .gvt file per tensor.
/// `config_echo` is embedded verbatim when given.
pub fn save_dataset<T: Scalar>(
    ds: &Dataset<T>,
    dir: &Path,
    config_echo: Option<serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        s.validate(ds.variant)?;
        let mut files = BTreeMap::new();
        let mut put = |key: &str, name: String, t: &Tensor<T>| -> Result<()> {
            gvt::write_tensor(&dir.join(&name), t)?;
            files.insert(key.to_string(), name);
            Ok(())
        };
        put("s2", format!("s2_{i:05}.gvt"), &s.s2)?;
        if let Some(w) = &s.weather {
            put("weather", format!("weather_{i:05}.gvt"), w)?;
        }
        if let Some(p) = &s.s5p {
            put("s5p", format!("s5p_{i:05}.gvt"), p)?;
        }
        if let Some(m) = &s.mask {
            let name = format!("mask_{i:05}.gvt");
            gvt::write_mask(&dir.join(&name), m)?;
            files.insert("mask".to_string(), name);
        }
        entries.push(ManifestSample {
            files,
            fuel_class: s.fuel_class,
            target: s.target,
        });
    }
    let manifest = Manifest {
        variant: ds.variant,
        count: ds.len(),
        samples: entries,
        norm_stats: ds.norm,
        config: config_echo,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json).map_err(|e| Error::io(dir.join("manifest.json"), e))
}

/// Load a dataset directory, checking manifest integrity.
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.count != manifest.samples.len() {
        return Err(Error::format(
            &manifest_path,
            format!(
                "manifest count {} disagrees with {} sample entries",
                manifest.count,
                manifest.samples.len()
            ),
        ));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, entry) in manifest.samples.iter().enumerate() {
        let tensor = |key: &str| -> Result<Option<Tensor<T>>> {
            entry
                .files
                .get(key)
                .map(|name| gvt::read_tensor(&dir.join(name)))
                .transpose()
        };
        let s2 = tensor("s2")?.ok_or_else(|| {
            Error::format(&manifest_path, format!("sample {i} lacks an s2 file"))
        })?;
        let mask = entry
            .files
            .get("mask")
            .map(|name| gvt::read_mask(&dir.join(name)))
            .transpose()?;
        let sample = Sample {
            s2,
            weather: tensor("weather")?,
            s5p: tensor("s5p")?,
            mask,
            fuel_class: entry.fuel_class,
            target: entry.target,
        };
        sample.validate(manifest.variant)?;
        samples.push(sample);
    }
    Ok(Dataset {
        variant: manifest.variant,
        samples,
        norm: manifest.norm_stats,
    })
}

/// Load and require a specific variant.
pub fn load_dataset_for<T: Scalar>(dir: &Path, variant: Variant) -> Result<Dataset<T>> {
    let ds = load_dataset(dir)?;
    if ds.variant != variant {
        return Err(Error::contract(format!(
            "dataset at {} holds {} samples but the run expects {variant}",
            dir.display(),
            ds.variant
        )));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use tempfile::tempdir;

    fn co2_cfg() -> ModelConfig {
        let mut c = ModelConfig::tiny(Variant::Co2);
        c.s2_bands = 12;
        c
    }

    fn no2_cfg() -> ModelConfig {
        let mut c = ModelConfig::tiny(Variant::No2);
        c.s2_bands = 12;
        c
    }

    #[test]
    fn co2_sample_is_deterministic_per_seed() {
        let cfg = co2_cfg();
        let (a, _) = generate_co2_sample::<f32>(&cfg, 99).unwrap();
        let (b, _) = generate_co2_sample::<f32>(&cfg, 99).unwrap();
        assert_eq!(a.s2.to_vec(), b.s2.to_vec());
        assert_eq!(
            a.weather.as_ref().unwrap().to_vec(),
            b.weather.as_ref().unwrap().to_vec()
        );
        assert_eq!(a.mask.as_ref().unwrap().to_vec(), b.mask.as_ref().unwrap().to_vec());
        assert_eq!(a.target.to_bits(), b.target.to_bits());
        assert_eq!(a.fuel_class, b.fuel_class);
        let (c, _) = generate_co2_sample::<f32>(&cfg, 100).unwrap();
        assert_ne!(a.s2.to_vec(), c.s2.to_vec());
    }

    #[test]
    fn co2_zero_amplitude_gives_empty_mask_and_near_zero_target() {
        let cfg = co2_cfg();
        for seed in 0..8 {
            let (s, meta) = generate_co2_sample_with::<f64>(&cfg, seed, Some(0.0)).unwrap();
            assert!(s.mask.as_ref().unwrap().to_vec().iter().all(|&m| m == 0.0));
            assert_eq!(meta.integrated, 0.0);
            assert!(s.target.abs() < 0.3, "target {} should be noise-scale", s.target);
        }
    }

    #[test]
    fn co2_label_formula_is_exact_pre_noise() {
        let cfg = co2_cfg();
        for seed in [1u64, 7, 42, 1234] {
            let (_, meta) = generate_co2_sample::<f32>(&cfg, seed).unwrap();
            let n = (cfg.image_size * cfg.image_size) as f64;
            let integrated = meta.plume.iter().sum::<f64>() / n;
            let recomputed = 10.0 * integrated * (1.0 + 0.3 * meta.wind);
            assert_eq!(recomputed.to_bits(), meta.pre_noise_target.to_bits());
        }
    }

    #[test]
    fn co2_mask_matches_plume_threshold_and_is_nonempty() {
        let cfg = co2_cfg();
        let (s, meta) = generate_co2_sample::<f64>(&cfg, 5).unwrap();
        let mask = s.mask.as_ref().unwrap().to_vec();
        let mut any = false;
        for (m, p) in mask.iter().zip(&meta.plume) {
            let want = if *p > MASK_THRESHOLD { 1.0 } else { 0.0 };
            assert_eq!(*m, want);
            any |= *m == 1.0;
        }
        assert!(any, "drawn amplitude >= 0.5 must exceed the threshold somewhere");
    }

    #[test]
    fn co2_sample_respects_type_invariants() {
        let cfg = co2_cfg();
        for seed in 0..6 {
            let (s, _) = generate_co2_sample::<f64>(&cfg, seed).unwrap();
            s.validate(Variant::Co2).unwrap();
            assert!(s.s2.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.fuel_class < 2);
        }
    }

    #[test]
    fn co2_generator_requires_enough_bands() {
        let mut cfg = co2_cfg();
        cfg.s2_bands = 6;
        assert!(generate_co2_sample::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn no2_sample_determinism_and_degenerate_label() {
        let cfg = no2_cfg();
        let (a, _) = generate_no2_sample::<f32>(&cfg, 3).unwrap();
        let (b, _) = generate_no2_sample::<f32>(&cfg, 3).unwrap();
        assert_eq!(a.s2.to_vec(), b.s2.to_vec());
        assert_eq!(a.s5p.as_ref().unwrap().to_vec(), b.s5p.as_ref().unwrap().to_vec());
        assert_eq!(a.target.to_bits(), b.target.to_bits());
        a.validate(Variant::No2).unwrap();

        for seed in 0..6 {
            let (s, meta) = generate_no2_sample_with::<f64>(&cfg, seed, true, true).unwrap();
            assert_eq!(meta.pre_noise_target, 0.0);
            assert!(s.target.abs() < 0.3);
        }
    }

    #[test]
    fn no2_label_formula_is_exact_pre_noise() {
        let cfg = no2_cfg();
        for seed in [2u64, 11, 77] {
            let (_, meta) = generate_no2_sample::<f32>(&cfg, seed).unwrap();
            let mean = meta.field.iter().sum::<f64>() / meta.field.len() as f64;
            let recomputed = 5.0 * mean + 3.0 * meta.surface_factor;
            assert_eq!(recomputed.to_bits(), meta.pre_noise_target.to_bits());
        }
    }

    /// Fitting target from mean(s5p) alone must leave at least the
    /// surface-factor variance unexplained: the S2 stream is informative.
    #[test]
    fn no2_regression_on_s5p_alone_leaves_surface_share() {
        let cfg = no2_cfg();
        let n = 1000;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        let mut surfaces = Vec::with_capacity(n);
        for i in 0..n {
            let (s, meta) = generate_no2_sample::<f32>(&cfg, 10_000 + i as u64).unwrap();
            let s5p = s.s5p.as_ref().unwrap().to_f64_vec();
            xs.push(s5p.iter().sum::<f64>() / s5p.len() as f64);
            ys.push(s.target);
            surfaces.push(meta.surface_factor);
        }
        let nf = n as f64;
        let mx = xs.iter().sum::<f64>() / nf;
        let my = ys.iter().sum::<f64>() / nf;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let slope = sxy / sxx;
        let resid_var = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let r = y - my - slope * (x - mx);
                r * r
            })
            .sum::<f64>()
            / nf;
        let ms = surfaces.iter().sum::<f64>() / nf;
        let surface_share =
            9.0 * surfaces.iter().map(|s| (s - ms) * (s - ms)).sum::<f64>() / nf;
        assert!(
            resid_var >= 0.9 * surface_share,
            "residual variance {resid_var} must retain the surface share {surface_share}"
        );
    }

    #[test]
    fn bilinear_resize_preserves_constants_and_matches_tensor_op() {
        let c = bilinear_resize(&[0.7; 9], 3, 3, 7, 5);
        assert!(c.iter().all(|&v| (v - 0.7).abs() < 1e-12));

        let src = vec![1.0, 2.0, 3.0, 4.0];
        let ours = bilinear_resize(&src, 2, 2, 4, 4);
        let t = Tensor::<f64>::from_vec(vec![1, 2, 2], src).unwrap();
        let up = t.upsample_bilinear(2).unwrap();
        for (a, b) in ours.iter().zip(up.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_80_20_by_index() {
        let cfg = no2_cfg();
        let ds = Dataset::<f32>::generate(&cfg, 10, 1).unwrap();
        assert_eq!(ds.train_count(), 8);
        assert_eq!(ds.train().len(), 8);
        assert_eq!(ds.eval().len(), 2);
        let train_targets: Vec<f64> = ds.train().iter().map(|s| s.target).collect();
        assert_eq!(ds.norm, NormStats::from_targets(&train_targets));
        let z = ds.norm.standardize(ds.samples[0].target);
        assert!((ds.norm.destandardize(z) - ds.samples[0].target).abs() < 1e-12);
    }

    #[test]
    fn dataset_round_trip_is_bitwise() {
        let cfg = co2_cfg();
        let ds = Dataset::<f32>::generate(&cfg, 5, 7).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path(), None).unwrap();
        let back = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(back.variant, Variant::Co2);
        assert_eq!(back.len(), 5);
        assert_eq!(back.norm, ds.norm);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.s2.to_vec(), b.s2.to_vec());
            assert_eq!(
                a.weather.as_ref().unwrap().to_vec(),
                b.weather.as_ref().unwrap().to_vec()
            );
            assert_eq!(a.mask.as_ref().unwrap().to_vec(), b.mask.as_ref().unwrap().to_vec());
            assert_eq!(a.fuel_class, b.fuel_class);
            assert_eq!(a.target.to_bits(), b.target.to_bits());
        }
    }

    #[test]
    fn variant_mismatch_is_an_error() {
        let cfg = co2_cfg();
        let ds = Dataset::<f32>::generate(&cfg, 2, 7).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path(), None).unwrap();
        assert!(load_dataset_for::<f32>(dir.path(), Variant::Co2).is_ok());
        let err = match load_dataset_for::<f32>(dir.path(), Variant::No2) {
            Err(e) => e,
            Ok(_) => panic!("variant mismatch accepted"),
        };
        assert!(err.to_string().contains("expects no2"));
    }

    #[test]
    fn manifest_corruption_is_detected() {
        let cfg = no2_cfg();
        let ds = Dataset::<f32>::generate(&cfg, 3, 2).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path(), None).unwrap();

        // count disagrees with the sample entries
        let mp = dir.path().join("manifest.json");
        let text = fs::read_to_string(&mp).unwrap();
        fs::write(&mp, text.replacen("\"count\": 3", "\"count\": 4", 1)).unwrap();
        assert!(load_dataset::<f32>(dir.path()).is_err());
        fs::write(&mp, text).unwrap();

        // a referenced tensor file is gone
        fs::remove_file(dir.path().join("s5p_00001.gvt")).unwrap();
        assert!(load_dataset::<f32>(dir.path()).is_err());
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = Dataset::<f32>::from_samples(Variant::Co2, Vec::new());
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path(), None).unwrap();
        let back = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.norm, NormStats::identity());
    }
}
