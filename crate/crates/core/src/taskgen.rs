//! Deterministic synthetic segmentation domains.
//!
//! Each sample is a disc with concentric inner discs on a background (class 0,
//! outer disc 1, innermost K−1), rendered at class-dependent base intensities,
//! optionally blurred, affinely rescaled, corrupted with Gaussian noise and
//! clamped to `[0, 1]`. Source and target domains differ only photometrically.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::{LabelTensor, NetError, SplitMix64, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid domain parameters: {0}")]
    InvalidParams(String),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("dataset io at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Net(#[from] NetError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainParams {
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
    pub intensity_scale: f64,
    pub intensity_offset: f64,
    pub noise_std: f64,
    pub blur_sigma: f64,
    /// Outer-disc diameter as a fraction of the image side, drawn uniformly.
    pub shape_size_range: (f64, f64),
}

impl Default for DomainParams {
    fn default() -> Self {
        source_params()
    }
}

/// Source domain of the default shift.
pub fn source_params() -> DomainParams {
    DomainParams {
        image_size: 64,
        channels: 1,
        classes: 3,
        intensity_scale: 1.0,
        intensity_offset: 0.0,
        noise_std: 0.02,
        blur_sigma: 0.0,
        shape_size_range: (0.35, 0.7),
    }
}

/// Target domain of the default shift.
pub fn target_params() -> DomainParams {
    DomainParams {
        intensity_scale: 0.7,
        intensity_offset: 0.15,
        noise_std: 0.08,
        blur_sigma: 1.0,
        ..source_params()
    }
}

impl DomainParams {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidParams(m));
        let (lo, hi) = self.shape_size_range;
        if self.image_size < 8 {
            return bad(format!("image_size must be at least 8, got {}", self.image_size));
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if !(2..=255).contains(&self.classes) {
            return bad(format!("classes must be in 2..=255, got {}", self.classes));
        }
        if !(self.noise_std >= 0.0) || !(self.blur_sigma >= 0.0) {
            return bad("noise_std and blur_sigma must be non-negative".into());
        }
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return bad(format!("shape_size_range must satisfy 0 < min ≤ max < 1, got ({lo}, {hi})"));
        }
        if !self.intensity_scale.is_finite() || !self.intensity_offset.is_finite() {
            return bad("intensity scale/offset must be finite".into());
        }
        Ok(())
    }

    /// Intensity of class `c` before blur, rescaling and noise.
    pub fn base_level(&self, c: usize) -> f64 {
        0.1 + 0.8 * c as f64 / (self.classes - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "taskgen:train",
            Split::Test => "taskgen:test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub params: DomainParams,
    pub seed: u64,
    pub n: usize,
    pub split: Split,
    pub samples: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]` with values in `[0, K)`.
    pub mask: LabelTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegDataset {
    pub manifest: Manifest,
    pub samples: Vec<SegSample>,
}

/// Train and test split of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplits {
    pub train: SegDataset,
    pub test: SegDataset,
}

/// Separable Gaussian blur, kernel truncated at 3σ, edges clamped.
fn gaussian_blur(plane: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * plane[y * size + clamp(x as isize + j as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp[clamp(y as isize + j as isize - radius) * size + x])
                .sum();
        }
    }
    out
}

fn render(params: &DomainParams, rng: &mut SplitMix64) -> Result<SegSample, DataError> {
    let s = params.image_size;
    let k = params.classes;
    let (lo, hi) = params.shape_size_range;
    let outer = rng.uniform(lo, hi) * s as f64 / 2.0;
    let cy = rng.uniform(outer + 1.0, s as f64 - 2.0 - outer);
    let cx = rng.uniform(outer + 1.0, s as f64 - 2.0 - outer);
    // Radii shrink strictly inward with at least 1.5 px between nested boundaries.
    let mut radii = vec![outer];
    for _ in 2..k {
        let prev = *radii.last().expect("non-empty");
        let r = (prev * rng.uniform(0.35, 0.65)).min(prev - 1.5);
        radii.push(r);
    }

    let mut mask = vec![0u8; s * s];
    let mut base = vec![0.0f64; s * s];
    for y in 0..s {
        for x in 0..s {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let c = radii.iter().take_while(|&&r| r > 0.0 && d <= r).count();
            mask[y * s + x] = c as u8;
            base[y * s + x] = params.base_level(c);
        }
    }
    let blurred = gaussian_blur(&base, s, params.blur_sigma);
    let mut image = Vec::with_capacity(params.channels * s * s);
    for _ in 0..params.channels {
        for &v in &blurred {
            let noisy = params.intensity_offset + params.intensity_scale * v + params.noise_std * rng.normal();
            image.push(noisy.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(SegSample {
        image: Tensor::new(vec![params.channels, s, s], image)?,
        mask: LabelTensor::new(vec![s, s], mask)?,
    })
}

fn sample_name(i: usize) -> String {
    format!("sample_{i:05}.bin")
}

/// Generates `n` samples, each a pure function of `(params, seed, split, index)`.
pub fn generate(params: &DomainParams, n: usize, seed: u64, split: Split) -> Result<SegDataset, DataError> {
    params.validate()?;
    if n == 0 {
        return Err(DataError::InvalidParams("dataset needs at least one sample".into()));
    }
    let samples = (0..n)
        .map(|i| render(params, &mut SplitMix64::stream(seed, split.tag(), i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest { params: params.clone(), seed, n, split, samples: (0..n).map(sample_name).collect() };
    Ok(SegDataset { manifest, samples })
}

pub const DEFAULT_TRAIN_SIZE: usize = 400;
pub const DEFAULT_TEST_SIZE: usize = 100;

/// Train/test splits for one domain with the default sizes.
pub fn generate_domain(params: &DomainParams, seed: u64, train: usize, test: usize) -> Result<DomainSplits, DataError> {
    Ok(DomainSplits {
        train: generate(params, train, seed, Split::Train)?,
        test: generate(params, test, seed, Split::Test)?,
    })
}

/// The default source/target pair, 400 train and 100 test samples per domain.
///
/// The two domains draw from different seeds so they share no geometry.
pub fn default_shift_pair(seed: u64) -> Result<(DomainSplits, DomainSplits), DataError> {
    let source = generate_domain(&source_params(), seed, DEFAULT_TRAIN_SIZE, DEFAULT_TEST_SIZE)?;
    let target = generate_domain(&target_params(), seed ^ TARGET_SEED_SALT, DEFAULT_TRAIN_SIZE, DEFAULT_TEST_SIZE)?;
    Ok((source, target))
}

/// Xored into the seed of the target domain.
pub const TARGET_SEED_SALT: u64 = 0x7A26_E7D0_0000_0001;

impl SegDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.params.classes
    }

    /// Images and masks for the given sample indices, stacked to `[B,C,H,W]` and `[B,H,W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, LabelTensor), DataError> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let masks: Vec<&LabelTensor> = indices.iter().map(|&i| &self.samples[i].mask).collect();
        Ok((Tensor::stack(&images)?, LabelTensor::stack(&masks)?))
    }

    /// Writes `manifest.json` plus one binary file per sample.
    ///
    /// Sample layout: u32 C, H, W, C·H·W f32 pixels, then u32 H, W and H·W u8 labels, all little-endian.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;
        for (name, sample) in self.manifest.samples.iter().zip(&self.samples) {
            let path = dir.join(name);
            let mut buf = Vec::new();
            for &d in sample.image.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            buf.extend_from_slice(&sample.image.to_le_bytes());
            for &d in sample.mask.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            buf.extend_from_slice(sample.mask.data());
            let mut f = fs::File::create(&path).map_err(io_err(&path))?;
            f.write_all(&buf).map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SegDataset, DataError> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| DataError::Format(format!("{}: {e}", manifest_path.display())))?;
        if manifest.samples.len() != manifest.n {
            return Err(DataError::Format(format!(
                "manifest lists {} samples but n = {}",
                manifest.samples.len(),
                manifest.n
            )));
        }
        let mut samples = Vec::with_capacity(manifest.n);
        for name in &manifest.samples {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            samples.push(parse_sample(&bytes).map_err(|e| DataError::Format(format!("{}: {e}", path.display())))?);
        }
        Ok(SegDataset { manifest, samples })
    }
}

struct Cursor<'a> {
    rest: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.rest.len() < n {
            return Err("truncated sample".into());
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    fn dims(&mut self, count: usize) -> Result<Vec<usize>, String> {
        (0..count).map(|_| self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)).collect()
    }
}

fn parse_sample(bytes: &[u8]) -> Result<SegSample, String> {
    let mut cur = Cursor { rest: bytes };
    let image_dims = cur.dims(3)?;
    let n: usize = image_dims.iter().product();
    let image = Tensor::from_le_bytes(image_dims, cur.take(n * 4)?).map_err(|e| e.to_string())?;
    let mask_dims = cur.dims(2)?;
    let m: usize = mask_dims.iter().product();
    let mask = LabelTensor::new(mask_dims, cur.take(m)?.to_vec()).map_err(|e| e.to_string())?;
    if !cur.rest.is_empty() {
        return Err("trailing bytes after sample".into());
    }
    Ok(SegSample { image, mask })
}
