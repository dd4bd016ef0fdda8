//! Seeded multimodal clips whose label bits are split across modalities.
//!
//! Every modality renders one Gaussian blob per frame. Four blob attributes can
//! carry a bit: horizontal drift, peak intensity, vertical drift and size. The
//! attribute for label bit `k` is `k % 4`. Modality `m` encodes bit `m % b`
//! (with `b = log2(classes)`); modalities past the first `b` repeat a bit at
//! half contrast. Every attribute a modality does not encode is drawn at
//! random, so a modality says nothing about the bits it does not carry.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Half-contrast factor for modalities that repeat an already-carried bit.
pub const REDUNDANT_CONTRAST: f64 = 0.5;
pub const DIM_LEVEL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    HorizontalDrift,
    Intensity,
    VerticalDrift,
    Size,
}

impl Attribute {
    pub fn for_bit(bit: usize) -> Attribute {
        match bit % 4 {
            0 => Attribute::HorizontalDrift,
            1 => Attribute::Intensity,
            2 => Attribute::VerticalDrift,
            _ => Attribute::Size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipDims {
    pub modalities: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ClipDims {
    pub fn numel(&self) -> usize {
        self.modalities * self.frames * self.height * self.width * self.channels
    }

    pub fn of_model(c: &ModelConfig) -> ClipDims {
        ClipDims {
            modalities: c.modalities,
            frames: c.frames,
            height: c.height,
            width: c.width,
            channels: c.channels,
        }
    }

    /// Row-major offset of pixel `[m, t, y, x, c]`.
    pub fn offset(&self, m: usize, t: usize, y: usize, x: usize, c: usize) -> usize {
        (((m * self.frames + t) * self.height + y) * self.width + x) * self.channels + c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub dims: ClipDims,
    /// Row-major `[M, T, H, W, C]`, values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub label: usize,
    /// Label bit carried by each modality.
    pub bit_assignment: Vec<usize>,
}

impl SyntheticClip {
    pub fn pixels_tensor(&self) -> Tensor {
        let d = self.dims;
        Tensor::new(&[d.modalities, d.frames, d.height, d.width, d.channels], self.pixels.clone())
            .expect("clip dims match pixel count")
    }

    /// Keeps only the listed modalities, in the given order.
    pub fn select_modalities(&self, keep: &[usize]) -> Result<SyntheticClip> {
        if keep.is_empty() || keep.iter().any(|&m| m >= self.dims.modalities) {
            return Err(Error::Config(format!(
                "modality subset {keep:?} invalid for {} modalities",
                self.dims.modalities
            )));
        }
        let per = self.dims.numel() / self.dims.modalities;
        let mut pixels = Vec::with_capacity(per * keep.len());
        for &m in keep {
            pixels.extend_from_slice(&self.pixels[m * per..(m + 1) * per]);
        }
        Ok(SyntheticClip {
            dims: ClipDims {
                modalities: keep.len(),
                ..self.dims
            },
            pixels,
            label: self.label,
            bit_assignment: keep.iter().map(|&m| self.bit_assignment[m]).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dims: ClipDims,
    pub classes: usize,
    pub samples: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn label_bits(&self) -> Result<usize> {
        let c = self.classes;
        if c < 2 || !c.is_power_of_two() {
            return Err(Error::Config(format!("classes {c} must be a power of two >= 2")));
        }
        let bits = c.trailing_zeros() as usize;
        if bits > self.dims.modalities {
            return Err(Error::Config(format!(
                "classes {c} need {bits} bits but only {} modalities",
                self.dims.modalities
            )));
        }
        Ok(bits)
    }

    pub fn bit_assignment(&self) -> Result<Vec<usize>> {
        let bits = self.label_bits()?;
        Ok((0..self.dims.modalities).map(|m| m % bits).collect())
    }

    fn validate(&self) -> Result<()> {
        let d = self.dims;
        if [d.modalities, d.frames, d.height, d.width, d.channels].contains(&0) || self.samples == 0 {
            return Err(Error::Config("dataset extents and sample count must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        let bits = self.label_bits()?;
        let drifts = (0..bits.min(d.modalities)).any(|b| {
            matches!(Attribute::for_bit(b), Attribute::HorizontalDrift | Attribute::VerticalDrift)
        });
        if drifts && d.frames < 2 {
            return Err(Error::Config("drift attributes need at least 2 frames".into()));
        }
        if d.height < 8 || d.width < 8 {
            return Err(Error::Config("frames must be at least 8x8 pixels".into()));
        }
        Ok(())
    }
}

/// Per-modality blob parameters, before rendering.
struct Blob {
    dx: isize,
    dy: isize,
    amplitude: f64,
    sigma: f64,
    x0: isize,
    y0: isize,
}

fn sample_blob(rng: &mut ChaCha8Rng, d: ClipDims, encoded: Option<(Attribute, bool)>, contrast: f64) -> Blob {
    let pick = |rng: &mut ChaCha8Rng, attr: Attribute| match encoded {
        Some((a, bit)) if a == attr => bit,
        _ => rng.random_bool(0.5),
    };
    let right = pick(rng, Attribute::HorizontalDrift);
    let bright = pick(rng, Attribute::Intensity);
    let down = pick(rng, Attribute::VerticalDrift);
    let large = pick(rng, Attribute::Size);

    // About an eighth of the frame per step, total travel at most half of it.
    let span = (d.frames - 1).max(1);
    let step_x = (d.width / 8).min(d.width / 2 / span).max(1) as isize;
    let step_y = (d.height / 8).min(d.height / 2 / span).max(1) as isize;
    let dx = if right { step_x } else { -step_x };
    let dy = if down { step_y } else { -step_y };
    let base = d.width.min(d.height) as f64 / 10.0;
    let sigma = if large { 1.5 * base } else { 0.75 * base };
    let amplitude = contrast * if bright { 1.0 } else { DIM_LEVEL };

    // Keep the whole path at least two pixels inside the frame.
    let travel_x = dx.abs() * (d.frames as isize - 1);
    let travel_y = dy.abs() * (d.frames as isize - 1);
    let lo = 2isize;
    let hi_x = (d.width as isize - 3 - travel_x).max(lo);
    let hi_y = (d.height as isize - 3 - travel_y).max(lo);
    let mut x0 = rng.random_range(lo as i64..=hi_x as i64) as isize;
    let mut y0 = rng.random_range(lo as i64..=hi_y as i64) as isize;
    if dx < 0 {
        x0 += travel_x;
    }
    if dy < 0 {
        y0 += travel_y;
    }
    Blob {
        dx,
        dy,
        amplitude,
        sigma,
        x0,
        y0,
    }
}

fn sample_clip(spec: &DatasetSpec, assignment: &[usize], index: usize) -> SyntheticClip {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let d = spec.dims;
    let bits = assignment.iter().copied().max().unwrap_or(0) + 1;
    let label = rng.random_range(0..spec.classes);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
    let mut pixels = vec![0.0; d.numel()];

    for (m, &bit) in assignment.iter().enumerate() {
        let value = (label >> bit) & 1 == 1;
        let contrast = if m < bits { 1.0 } else { REDUNDANT_CONTRAST };
        let blob = sample_blob(&mut rng, d, Some((Attribute::for_bit(bit), value)), contrast);
        for t in 0..d.frames {
            let cx = (blob.x0 + blob.dx * t as isize) as f64;
            let cy = (blob.y0 + blob.dy * t as isize) as f64;
            for y in 0..d.height {
                for x in 0..d.width {
                    let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let v = blob.amplitude * (-r2 / (2.0 * blob.sigma * blob.sigma)).exp();
                    for c in 0..d.channels {
                        pixels[d.offset(m, t, y, x, c)] = v;
                    }
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        for p in pixels.iter_mut() {
            *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    SyntheticClip {
        dims: d,
        pixels,
        label,
        bit_assignment: assignment.to_vec(),
    }
}

/// Generates `spec.samples` clips. Sample `i` depends only on `(seed, i)`.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Vec<SyntheticClip>> {
    spec.validate()?;
    let assignment = spec.bit_assignment()?;
    Ok((0..spec.samples).map(|i| sample_clip(spec, &assignment, i)).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: DatasetSpec,
    bit_assignment: Vec<usize>,
    sample_count: usize,
    record_bytes: usize,
}

fn record_name(i: usize) -> String {
    format!("sample_{i:06}.bin")
}

/// Writes `manifest.json` plus one `sample_NNNNNN.bin` per clip: a `u32` label
/// followed by the `[M, T, H, W, C]` pixels as `f64`, all little-endian.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, clips: &[SyntheticClip]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        spec: spec.clone(),
        bit_assignment: spec.bit_assignment()?,
        sample_count: clips.len(),
        record_bytes: 4 + 8 * spec.dims.numel(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::load("manifest", e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    for (i, clip) in clips.iter().enumerate() {
        if clip.dims != spec.dims {
            return Err(Error::Contract(format!("clip {i} dims differ from dataset spec")));
        }
        let mut w = BufWriter::new(fs::File::create(dir.join(record_name(i)))?);
        w.write_all(&(clip.label as u32).to_le_bytes())?;
        for p in &clip.pixels {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetSpec, Vec<SyntheticClip>)> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::load("manifest.json", e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::load(
            "format_version",
            format!("unsupported version {}", manifest.format_version),
        ));
    }
    let spec = manifest.spec;
    let n = spec.dims.numel();
    if manifest.record_bytes != 4 + 8 * n {
        return Err(Error::load("record_bytes", "does not match dims"));
    }
    let mut clips = Vec::with_capacity(manifest.sample_count);
    for i in 0..manifest.sample_count {
        let name = record_name(i);
        let bytes = fs::read(dir.join(&name))?;
        if bytes.len() != manifest.record_bytes {
            return Err(Error::load(name, format!("{} bytes, expected {}", bytes.len(), manifest.record_bytes)));
        }
        let label = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        if label >= spec.classes {
            return Err(Error::load(name, format!("label {label} out of range")));
        }
        let pixels = bytes[4..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        clips.push(SyntheticClip {
            dims: spec.dims,
            pixels,
            label,
            bit_assignment: manifest.bit_assignment.clone(),
        });
    }
    Ok((spec, clips))
}
