//! Clip storage, key-frame and chunk sampling, and base-path resize/crop.
//!
//! A clip directory holds `%06d.png` frames (8-bit RGB) and a `meta.json`
//! record. Samples are kept as `value / 255` in `[0, 1]`.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::pyramid::{bicubic_resample, round_half_up};

pub const META_FILE: &str = "meta.json";
pub const MANIFEST_HEADER: [&str; 6] = ["clip_path", "mos", "scene_id", "fps", "width", "height"];
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// A decoded clip: `N` RGB frames with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: Vec<Image<f32>>,
    fps: f64,
    pub clip_id: String,
    pub scene_id: String,
}

impl VideoTensor {
    pub fn new(
        frames: Vec<Image<f32>>,
        fps: f64,
        clip_id: impl Into<String>,
        scene_id: impl Into<String>,
    ) -> Result<Self> {
        let first = frames.first().ok_or_else(|| invalid!("clip has no frames"))?;
        if first.channels() != 3 {
            return Err(invalid!("frames must be RGB, got {} channels", first.channels()));
        }
        if first.height() < 8 || first.width() < 8 {
            return Err(invalid!(
                "frames must be at least 8x8, got {}x{}",
                first.height(),
                first.width()
            ));
        }
        if let Some(i) = frames.iter().position(|f| !f.same_shape(first)) {
            return Err(invalid!("frame {i} differs in size from frame 0"));
        }
        if frames
            .iter()
            .any(|f| f.data().iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(invalid!("sample values must lie in [0, 1]"));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(invalid!("fps must be positive, got {fps}"));
        }
        Ok(Self {
            frames,
            fps,
            clip_id: clip_id.into(),
            scene_id: scene_id.into(),
        })
    }

    pub fn frames(&self) -> &[Image<f32>] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Image<f32>> {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub fps: f64,
    pub num_frames: usize,
    pub clip_id: String,
    pub scene_id: String,
}

fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:06}.png"))
}

/// Decodes an 8-bit PNG into a 3-channel image in `[0, 1]`; gray input is replicated.
pub fn read_png(path: &Path) -> Result<Image<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::data(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::data(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::data(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::data(path, "only 8-bit PNG frames are supported"));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::data(path, format!("unsupported color type {other:?}"))),
    };
    let buf = &buf[..info.buffer_size()];
    let sample = |c: usize, y: usize, x: usize| {
        let c = if stride < 3 { 0 } else { c };
        buf[(y * w + x) * stride + c] as f32 / 255.0
    };
    Ok(Image::from_fn(3, h, w, sample))
}

/// Quantizes to 8 bits (round to nearest) and writes an RGB PNG.
pub fn write_png(path: &Path, img: &Image<f32>) -> Result<()> {
    if img.channels() != 3 && img.channels() != 1 {
        return Err(invalid!("PNG output needs 1 or 3 channels"));
    }
    let (h, w) = (img.height(), img.width());
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let c = c.min(img.channels() - 1);
                let v = img.get(c, y, x).clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::data(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::data(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::data(path, e.to_string()))
}

pub fn read_meta(dir: &Path) -> Result<ClipMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))
}

/// Decodes a clip directory.
pub fn load_clip(dir: impl AsRef<Path>) -> Result<VideoTensor> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    if meta.num_frames == 0 {
        return Err(Error::data(dir, "meta declares zero frames"));
    }
    let mut frames = Vec::with_capacity(meta.num_frames);
    for i in 0..meta.num_frames {
        let path = frame_path(dir, i);
        if !path.exists() {
            return Err(Error::data(
                dir,
                format!("meta declares {} frames but {} is missing", meta.num_frames, path.display()),
            ));
        }
        let frame = read_png(&path)?;
        if let Some(first) = frames.first() {
            if !frame.same_shape(first) {
                return Err(Error::data(&path, "frame size differs from frame 0"));
            }
        }
        frames.push(frame);
    }
    if frame_path(dir, meta.num_frames).exists() {
        return Err(Error::data(
            dir,
            format!("directory holds more than the {} declared frames", meta.num_frames),
        ));
    }
    VideoTensor::new(frames, meta.fps, meta.clip_id, meta.scene_id)
        .map_err(|e| Error::data(dir, e.to_string()))
}

/// Writes `video` as a clip directory (created if needed).
pub fn save_clip(video: &VideoTensor, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in video.frames().iter().enumerate() {
        write_png(&frame_path(dir, i), frame)?;
    }
    let meta = ClipMeta {
        fps: video.fps(),
        num_frames: video.num_frames(),
        clip_id: video.clip_id.clone(),
        scene_id: video.scene_id.clone(),
    };
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Uniformly sampled key frames at actual resolution.
#[derive(Debug, Clone)]
pub struct KeyFrameSet {
    pub frames: Vec<Image<f32>>,
    pub indices: Vec<usize>,
}

impl KeyFrameSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Segment-center indices `floor((i + 0.5) * n / m)` for `i in 0..m`.
pub fn key_frame_indices(n: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(invalid!("key-frame count must be at least 1"));
    }
    if m > n {
        return Err(invalid!("cannot sample {m} key frames from {n} frames"));
    }
    Ok((0..m)
        .map(|i| (((2 * i + 1) * n) / (2 * m)).min(n - 1))
        .collect())
}

pub fn sample_key_frames(video: &VideoTensor, m: usize) -> Result<KeyFrameSet> {
    let indices = key_frame_indices(video.num_frames(), m)?;
    Ok(KeyFrameSet {
        frames: indices.iter().map(|&i| video.frames()[i].clone()).collect(),
        indices,
    })
}

/// Consecutive-frame windows around each key frame, resized to `hv × wv`.
#[derive(Debug, Clone)]
pub struct ChunkSet {
    pub chunks: Vec<Vec<Image<f32>>>,
    pub center_indices: Vec<usize>,
}

impl ChunkSet {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Frame indices `[c - floor(L/2), c + ceil(L/2) - 1]`, clamped into `[0, n-1]`.
pub fn chunk_indices(n: usize, center: usize, chunk_len: usize) -> Vec<usize> {
    let start = center as i64 - (chunk_len / 2) as i64;
    (0..chunk_len as i64)
        .map(|j| (start + j).clamp(0, n as i64 - 1) as usize)
        .collect()
}

pub fn sample_chunks(
    video: &VideoTensor,
    keys: &KeyFrameSet,
    chunk_len: usize,
    hv: usize,
    wv: usize,
) -> Result<ChunkSet> {
    if keys.indices.is_empty() {
        return Err(invalid!("cannot sample chunks around an empty key-frame set"));
    }
    if chunk_len == 0 {
        return Err(invalid!("chunk length must be at least 1"));
    }
    let n = video.num_frames();
    let chunks = keys
        .indices
        .iter()
        .map(|&c| {
            chunk_indices(n, c, chunk_len)
                .into_iter()
                .map(|i| bicubic_resample(&video.frames()[i], hv, wv))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChunkSet {
        chunks,
        center_indices: keys.indices.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Uniform random offset (training).
    Random,
    /// Centered window (evaluation).
    Center,
}

/// Bicubic resize so the short side equals `target`, keeping aspect ratio.
pub fn resize_short_side(frame: &Image<f32>, target: usize) -> Result<Image<f32>> {
    if target == 0 {
        return Err(invalid!("resize target must be positive"));
    }
    let (h, w) = (frame.height(), frame.width());
    let (nh, nw) = if h <= w {
        (target, round_half_up(w as f64 * target as f64 / h as f64).max(target))
    } else {
        (round_half_up(h as f64 * target as f64 / w as f64).max(target), target)
    };
    bicubic_resample(frame, nh, nw)
}

/// Top-left corner of a `target × target` window inside an `h × w` image.
pub fn crop_offset(
    h: usize,
    w: usize,
    target: usize,
    mode: CropMode,
    rng: &mut impl Rng,
) -> (usize, usize) {
    let (sh, sw) = (h - target, w - target);
    match mode {
        CropMode::Center => (sh / 2, sw / 2),
        CropMode::Random => (rng.gen_range(0..=sh), rng.gen_range(0..=sw)),
    }
}

/// Resize so the short side is `target`, then cut a `target × target` square.
pub fn resize_short_side_crop(
    frame: &Image<f32>,
    target: usize,
    mode: CropMode,
    rng: &mut impl Rng,
) -> Result<Image<f32>> {
    let resized = resize_short_side(frame, target)?;
    let (top, left) = crop_offset(resized.height(), resized.width(), target, mode, rng);
    resized.crop(top, left, target, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub clip_path: String,
    pub mos: f64,
    pub scene_id: String,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
}

/// The list of clips and labels that drives training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    pub format_version: u32,
    /// Directory that relative `clip_path`s are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(rows: Vec<ManifestRow>, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for row in &rows {
            if !row.mos.is_finite() {
                return Err(invalid!("non-finite MOS for {}", row.clip_path));
            }
            if !seen.insert(row.clip_path.as_str()) {
                return Err(invalid!("duplicate clip_path {}", row.clip_path));
            }
        }
        Ok(Self {
            rows,
            format_version: MANIFEST_FORMAT_VERSION,
            root: root.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn clip_dir(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.clip_path)
    }

    /// Reads and validates a manifest CSV; every listed clip must have a meta record.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
        let header = reader
            .headers()
            .map_err(|e| Error::data(path, e.to_string()))?
            .clone();
        if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
            return Err(Error::data(
                path,
                format!("manifest header must be `{}`", MANIFEST_HEADER.join(",")),
            ));
        }
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()
            .map_err(|e| Error::data(path, e.to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::new(rows, root).map_err(|e| Error::data(path, e.to_string()))?;
        for row in &manifest.rows {
            let meta = manifest.clip_dir(row).join(META_FILE);
            if !meta.is_file() {
                return Err(Error::data(path, format!("clip {} has no {META_FILE}", row.clip_path)));
            }
        }
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
        for row in &self.rows {
            writer
                .serialize(row)
                .map_err(|e| Error::data(path, e.to_string()))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    /// Distinct scene ids in first-appearance order.
    pub fn scene_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.scene_id.as_str()))
            .map(|r| r.scene_id.clone())
            .collect()
    }
}
