//! Frame files, equal-interval sampling, cropping, patch tokenization and the
//! initial token matrix of each frame.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{io_err, Error, Result};
use crate::numerics::nn::{sinusoid_positions, ParamBuilder};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const FRAME_MAGIC: &[u8; 4] = b"FTB1";
pub const CHANNELS: usize = 3;
/// Patch projection init is `PROJECTION_GAIN / sqrt(d)`; raw pixel patches have small variance.
const PROJECTION_GAIN: f64 = 6.0;

/// Decoded RGB frames, frame-major, each `height x width x 3` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameTensorFile {
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl FrameTensorFile {
    pub fn new(frame_count: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if frame_count == 0 || height == 0 || width == 0 {
            return Err(Error::Usage("frame file dimensions must be positive".into()));
        }
        let expected = frame_count * height * width * CHANNELS;
        if pixels.len() != expected {
            return Err(Error::Usage(format!(
                "payload has {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        Ok(Self {
            frame_count,
            height,
            width,
            pixels,
        })
    }

    pub fn frame(&self, index: usize) -> &[u8] {
        let n = self.height * self.width * CHANNELS;
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(FRAME_MAGIC)?;
        for v in [self.frame_count, self.height, self.width, CHANNELS] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.pixels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.pixels.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn parse(bytes: &[u8], origin: &str) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            path: origin.to_string(),
            detail,
        };
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| fmt(e.to_string()))?;
        if &magic != FRAME_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let mut header = [0usize; 4];
        for h in &mut header {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| fmt(e.to_string()))?;
            *h = u32::from_le_bytes(b) as usize;
        }
        let [frames, height, width, channels] = header;
        if channels != CHANNELS {
            return Err(fmt(format!("expected 3 channels, found {channels}")));
        }
        let expected = frames * height * width * CHANNELS;
        if r.len() != expected {
            return Err(fmt(format!("payload has {} bytes, expected {expected}", r.len())));
        }
        Self::new(frames, height, width, r.to_vec()).map_err(|e| fmt(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::parse(&bytes, &path.display().to_string())
    }
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Frame file path, relative to the manifest's directory unless absolute.
    pub frames: String,
    /// Raw MOS in the dataset's native range.
    pub mos: f64,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.display().to_string(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn resolve_frames_path(manifest: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.frames);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// A video with its label scaled into the reference-rating interval.
#[derive(Clone, Debug)]
pub struct VideoSample {
    pub id: String,
    pub frames: FrameTensorFile,
    pub raw_mos: f64,
    pub scaled_mos: f64,
}

/// Largest start offset that keeps `n` samples at `stride` inside the video, or
/// `None` when the sampling span does not fit.
pub fn max_offset(total: usize, n: usize, stride: usize) -> Option<usize> {
    let span = (n - 1) * stride;
    (span < total).then(|| total - span - 1)
}

/// `index_i = (offset + i * stride) mod total`.
pub fn frame_indices_with_offset(
    total: usize,
    n: usize,
    stride: usize,
    offset: usize,
) -> Result<Vec<usize>> {
    if n == 0 || stride == 0 {
        return Err(Error::Usage("frame count and stride must be positive".into()));
    }
    if total == 0 {
        return Err(Error::Usage("video has no frames".into()));
    }
    Ok((0..n).map(|i| (offset + i * stride) % total).collect())
}

/// Equal-interval sampling with a uniformly drawn start offset. Videos shorter
/// than the sampling span start at 0 and wrap around.
pub fn sample_frame_indices(
    total: usize,
    n: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if n == 0 || stride == 0 {
        return Err(Error::Usage("frame count and stride must be positive".into()));
    }
    let offset = match max_offset(total, n, stride) {
        Some(m) => rng.random_range(0..=m),
        None => 0,
    };
    frame_indices_with_offset(total, n, stride, offset)
}

/// Deterministic evaluation sampling: the offset sits in the middle of its range.
pub fn center_frame_indices(total: usize, n: usize, stride: usize) -> Result<Vec<usize>> {
    let offset = max_offset(total, n.max(1), stride.max(1)).map_or(0, |m| m / 2);
    frame_indices_with_offset(total, n, stride, offset)
}

/// Top-left corner of a crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropOrigin {
    pub y: usize,
    pub x: usize,
}

pub fn random_crop(frame_h: usize, frame_w: usize, h: usize, w: usize, rng: &mut impl Rng) -> Result<CropOrigin> {
    check_crop(frame_h, frame_w, h, w)?;
    Ok(CropOrigin {
        y: rng.random_range(0..=frame_h - h),
        x: rng.random_range(0..=frame_w - w),
    })
}

pub fn center_crop(frame_h: usize, frame_w: usize, h: usize, w: usize) -> Result<CropOrigin> {
    check_crop(frame_h, frame_w, h, w)?;
    Ok(CropOrigin {
        y: (frame_h - h) / 2,
        x: (frame_w - w) / 2,
    })
}

/// `views` crops spaced evenly along the frame diagonal; one view is the center crop.
pub fn view_crops(frame_h: usize, frame_w: usize, h: usize, w: usize, views: usize) -> Result<Vec<CropOrigin>> {
    check_crop(frame_h, frame_w, h, w)?;
    if views <= 1 {
        return Ok(vec![center_crop(frame_h, frame_w, h, w)?]);
    }
    let (sy, sx) = (frame_h - h, frame_w - w);
    Ok((0..views)
        .map(|i| CropOrigin {
            y: (sy * i + (views - 1) / 2) / (views - 1),
            x: (sx * i + (views - 1) / 2) / (views - 1),
        })
        .collect())
}

fn check_crop(frame_h: usize, frame_w: usize, h: usize, w: usize) -> Result<()> {
    if frame_h < h || frame_w < w {
        return Err(Error::CropTooLarge {
            frame_h,
            frame_w,
            crop_h: h,
            crop_w: w,
        });
    }
    Ok(())
}

/// Crops `h x w` at `origin` and splits it into non-overlapping `s x s` patches.
/// Returns a `P x (s*s*3)` matrix scaled to `[0, 1]`; patches follow the grid in
/// row-major order and each row is its patch flattened row-major (y, x, channel).
pub fn crop_and_patchify(
    frame: &[u8],
    frame_h: usize,
    frame_w: usize,
    origin: CropOrigin,
    h: usize,
    w: usize,
    s: usize,
) -> Result<Tensor> {
    check_crop(frame_h, frame_w, h, w)?;
    if origin.y + h > frame_h || origin.x + w > frame_w {
        return Err(Error::CropTooLarge {
            frame_h: frame_h.saturating_sub(origin.y),
            frame_w: frame_w.saturating_sub(origin.x),
            crop_h: h,
            crop_w: w,
        });
    }
    if frame.len() != frame_h * frame_w * CHANNELS {
        return Err(Error::Usage(format!(
            "frame buffer has {} bytes, expected {}",
            frame.len(),
            frame_h * frame_w * CHANNELS
        )));
    }
    let (gh, gw) = (h / s, w / s);
    if gh == 0 || gw == 0 {
        return Err(Error::Usage(format!("crop {h}x{w} holds no {s}x{s} patch")));
    }
    let d = s * s * CHANNELS;
    let mut data = Vec::with_capacity(gh * gw * d);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..s {
                let row = origin.y + py * s + y;
                let col0 = origin.x + px * s;
                let start = (row * frame_w + col0) * CHANNELS;
                data.extend(frame[start..start + s * CHANNELS].iter().map(|&b| f64::from(b) / 255.0));
            }
        }
    }
    Ok(Tensor::matrix(gh * gw, d, data)?)
}

/// Learnable patch projection (Θ) and shared pseudo-MOS token.
#[derive(Clone, Debug)]
pub struct FrameEmbedding {
    pub projection: ParamId,
    pub mos_token: ParamId,
    positions: Tensor,
    /// Adds the sinusoid position table to patch tokens. Cleared only by tests.
    pub use_positions: bool,
}

impl FrameEmbedding {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.width;
        Ok(Self {
            projection: b.normal("fpt.embed.projection", &[d, d], PROJECTION_GAIN * (d as f64).powf(-0.5))?,
            mos_token: b.normal("fpt.embed.mos_token", &[d], 0.02)?,
            positions: sinusoid_positions(cfg.patches(), d),
            use_positions: true,
        })
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    /// Builds `E_(n)`: row 0 is the pseudo-MOS token, rows `1..=P` are
    /// `x_p Θ + v_p` for each patch row `x_p`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: &Tensor) -> Result<Var> {
        let x = g.constant(patches.clone());
        self.forward_var(g, store, x)
    }

    /// [`Self::forward`] for a patch matrix already on the tape.
    pub fn forward_var(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (p, d) = g.shape(x);
        let (pp, pd) = self.positions.dims2();
        if p != pp || d != pd {
            return Err(crate::numerics::NumericsError::ShapeMismatch {
                op: "embed_frame_tokens",
                lhs: vec![p, d],
                rhs: vec![pp, pd],
            }
            .into());
        }
        let theta = g.param(store, self.projection);
        let mut tokens = g.matmul(x, theta)?;
        if self.use_positions {
            let pos = g.constant(self.positions.clone());
            tokens = g.add(tokens, pos)?;
        }
        let mos = g.param(store, self.mos_token);
        Ok(g.concat(&[mos, tokens], 0)?)
    }
}
