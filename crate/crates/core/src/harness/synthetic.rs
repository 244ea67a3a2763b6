//! Procedural videos with controlled distortions and a known quality score.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::frame_ingest::{write_manifest, FrameTensorFile, ManifestEntry, VideoSample, CHANNELS};
use crate::numerics::RngState;

pub const MAX_BLUR: f64 = 4.0;
pub const MAX_NOISE: f64 = 0.3;
pub const MIN_CONTRAST: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Radial texture frequencies in cycles per pixel.
    pub frequencies: Vec<f64>,
    /// RMS texture amplitude before clipping, on the `[0, 1]` intensity scale.
    pub amplitude: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 200,
            seed: 7,
            frames: 12,
            height: 20,
            width: 20,
            frequencies: vec![0.1],
            amplitude: 0.4,
        }
    }
}

/// Distortion strengths of one video.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    /// Gaussian blur sigma in pixels, `[0, 4]`.
    pub blur: f64,
    /// Additive Gaussian noise std on the `[0, 1]` intensity scale, `[0, 0.3]`.
    pub noise: f64,
    /// Contrast scale about mid-grey, `[0.3, 1]`.
    pub contrast: f64,
}

impl Distortion {
    pub const NONE: Self = Self {
        blur: 0.0,
        noise: 0.0,
        contrast: 1.0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            blur: rng.random_range(0.0..=MAX_BLUR),
            noise: rng.random_range(0.0..=MAX_NOISE),
            contrast: rng.random_range(MIN_CONTRAST..=1.0),
        }
    }

    /// `5 - 4 clamp(0.5 blur/4 + 0.35 noise/0.3 + 0.15 (1 - contrast)/0.7, 0, 1)`.
    pub fn mos(&self) -> f64 {
        let severity = 0.5 * (self.blur / MAX_BLUR)
            + 0.35 * (self.noise / MAX_NOISE)
            + 0.15 * (1.0 - self.contrast) / (1.0 - MIN_CONTRAST);
        5.0 - 4.0 * severity.clamp(0.0, 1.0)
    }
}

/// Band-limited colour texture: oriented sinusoids at fixed radial
/// frequencies, shared by all channels with a per-channel signed weight.
#[derive(Clone, Debug)]
struct Texture {
    /// (fy, fx, phase) per frequency.
    waves: Vec<(f64, f64, f64)>,
    colour: [f64; CHANNELS],
    base: [f64; CHANNELS],
    /// Scale turning the wave sum into the requested RMS amplitude.
    gain: f64,
}

impl Texture {
    fn sample(rng: &mut impl Rng, frequencies: &[f64], amplitude: f64) -> Self {
        let waves = frequencies
            .iter()
            .map(|&f| {
                let angle = rng.random_range(0.0..PI);
                (f * angle.sin(), f * angle.cos(), rng.random_range(0.0..2.0 * PI))
            })
            .collect::<Vec<_>>();
        let mut channel = || {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (sign * rng.random_range(0.5..1.0), rng.random_range(0.4..0.6))
        };
        let (c0, c1, c2) = (channel(), channel(), channel());
        let gain = amplitude / (waves.len().max(1) as f64 / 2.0).sqrt();
        Self {
            waves,
            colour: [c0.0, c1.0, c2.0],
            base: [c0.1, c1.1, c2.1],
            gain,
        }
    }

    fn value(&self, c: usize, y: f64, x: f64) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|&(fy, fx, ph)| (2.0 * PI * (fy * y + fx * x) + ph).sin())
            .sum();
        (self.base[c] + self.gain * self.colour[c] * s).clamp(0.0, 1.0)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of an `h x w x 3` image with edge clamping.
pub fn blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return img.to_vec();
    }
    let r = (k.len() / 2) as isize;
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                tmp[(y * w + x) * CHANNELS + c] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * img[(y * w + clampi(x as isize + i as isize - r, w)) * CHANNELS + c])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                out[(y * w + x) * CHANNELS + c] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[(clampi(y as isize + i as isize - r, h) * w + x) * CHANNELS + c])
                    .sum();
            }
        }
    }
    out
}

/// Renders one video: contrast, then blur, then noise, quantized to u8.
pub fn render_video(spec: &SyntheticSpec, distortion: Distortion, rng: &mut impl Rng) -> Result<FrameTensorFile> {
    let (h, w) = (spec.height, spec.width);
    let texture = Texture::sample(rng, &spec.frequencies, spec.amplitude);
    let velocity = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let noise = Normal::new(0.0, distortion.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut pixels = Vec::with_capacity(spec.frames * h * w * CHANNELS);
    for f in 0..spec.frames {
        let (oy, ox) = (velocity.0 * f as f64, velocity.1 * f as f64);
        let mut img = Vec::with_capacity(h * w * CHANNELS);
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    let v = texture.value(c, y as f64 + oy, x as f64 + ox);
                    img.push(0.5 + distortion.contrast * (v - 0.5));
                }
            }
        }
        let img = blur(&img, h, w, distortion.blur);
        for v in img {
            let n = if distortion.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            pixels.push(((v + n).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    FrameTensorFile::new(spec.frames, h, w, pixels)
}

/// One generated video and its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub id: String,
    pub distortion: Distortion,
    pub mos: f64,
    pub frames: FrameTensorFile,
}

/// Generates the videos in memory; video `i` depends only on `(seed, i)`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticVideo>> {
    if spec.frames == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("synthetic videos need positive frames, height and width".into()));
    }
    (0..spec.count)
        .map(|i| {
            let mut rng = RngState::new(spec.seed, format!("synthetic/video{i}")).rng();
            let distortion = Distortion::sample(&mut rng);
            let frames = render_video(spec, distortion, &mut rng)?;
            Ok(SyntheticVideo {
                id: format!("syn{i:04}"),
                distortion,
                mos: distortion.mos(),
                frames,
            })
        })
        .collect()
}

/// Generated videos as training samples on their native `[1, 5]` scale.
pub fn synthetic_samples(spec: &SyntheticSpec) -> Result<Vec<VideoSample>> {
    Ok(generate(spec)?
        .into_iter()
        .map(|v| VideoSample {
            id: v.id,
            frames: v.frames,
            raw_mos: v.mos,
            scaled_mos: v.mos,
        })
        .collect())
}

/// Writes `manifest.jsonl` plus one frame file per video under `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let videos = out_dir.join("videos");
    std::fs::create_dir_all(&videos).map_err(io_err(&videos))?;
    let mut entries = Vec::with_capacity(spec.count);
    for v in generate(spec)? {
        let rel = format!("videos/{}.ftb", v.id);
        v.frames.save(&out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            id: v.id,
            frames: rel,
            mos: v.mos,
        });
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}
