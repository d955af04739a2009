//! Procedural benchmarks with controlled resolution and frame-rate damage.
//!
//! Every scene is the sum of a static fine texture (wavelengths of a few
//! pixels) and a fast-moving coarse component (wavelengths of 64 px and up).
//! Downscaling removes the texture but barely touches the motion; frame
//! averaging and frame holding remove the motion but leave each frame's
//! texture alone. Labels fall linearly with severity.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::media::{chunk_indices, save_clip, DatasetManifest, ManifestRow, VideoTensor};
use crate::pyramid::bicubic_resample;

/// Half-width of the uniform label jitter.
pub const MOS_JITTER: f64 = 0.02;
pub const GENERATOR_FILE: &str = "generator.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    DriftingSinusoids,
    MovingTexturedBlobs,
    RandomPhaseNoise,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [
        Pattern::DriftingSinusoids,
        Pattern::MovingTexturedBlobs,
        Pattern::RandomPhaseNoise,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub pattern: Pattern,
    pub base_h: usize,
    pub base_w: usize,
    pub base_fps: f64,
    pub duration_frames: usize,
}

/// `amp * cos(kx x + ky y + phase + omega t)`.
#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: f64,
    kx: f64,
    ky: f64,
    phase: f64,
    omega: f64,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, amp: f64, wavelength: (f64, f64), omega: (f64, f64)) -> Self {
        let lambda = rng.gen_range(wavelength.0..wavelength.1);
        let theta = rng.gen_range(0.0..TAU);
        let k = TAU / lambda;
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        Self {
            amp,
            kx: k * theta.cos(),
            ky: k * theta.sin(),
            phase: rng.gen_range(0.0..TAU),
            omega: if omega.1 > omega.0 { sign * rng.gen_range(omega.0..omega.1) } else { 0.0 },
        }
    }

    fn at(&self, t: f64, y: f64, x: f64) -> f64 {
        self.amp * (self.kx * x + self.ky * y + self.phase + self.omega * t).cos()
    }
}

/// A Gaussian bump vibrating along a line.
#[derive(Debug, Clone, Copy)]
struct Blob {
    amp: f64,
    sigma: f64,
    cy: f64,
    cx: f64,
    dy: f64,
    dx: f64,
    omega: f64,
    phase: f64,
}

impl Blob {
    fn at(&self, t: f64, y: f64, x: f64) -> f64 {
        let s = (self.omega * t + self.phase).sin();
        let (py, px) = (self.cy + self.dy * s, self.cx + self.dx * s);
        let r2 = (y - py).powi(2) + (x - px).powi(2);
        self.amp * (-r2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

const FINE_WAVELENGTH: (f64, f64) = (2.5, 5.0);
const COARSE_WAVELENGTH: (f64, f64) = (96.0, 192.0);
const COARSE_OMEGA: (f64, f64) = (0.9, 1.2);

/// Renders a deterministic clip for `spec`.
pub fn render_scene(spec: &SceneSpec) -> Result<VideoTensor> {
    if spec.base_h < 8 || spec.base_w < 8 || spec.duration_frames < 1 {
        return Err(invalid!(
            "scene of {}x{} with {} frames is too small",
            spec.base_h,
            spec.base_w,
            spec.duration_frames
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gains: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.8..1.2));
    let offsets: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.42..0.58));
    let n_fine = if spec.pattern == Pattern::RandomPhaseNoise { 16 } else { 8 };
    let fine_amp = 0.2 / n_fine as f64;
    let fine: Vec<Wave> = (0..n_fine)
        .map(|_| {
            let amp = fine_amp * rng.gen_range(0.8..1.2);
            Wave::random(&mut rng, amp, FINE_WAVELENGTH, (0.0, 0.0))
        })
        .collect();
    let (waves, blobs): (Vec<Wave>, Vec<Blob>) = match spec.pattern {
        Pattern::DriftingSinusoids => (
            (0..2).map(|_| Wave::random(&mut rng, 0.1, COARSE_WAVELENGTH, COARSE_OMEGA)).collect(),
            Vec::new(),
        ),
        Pattern::RandomPhaseNoise => (
            (0..6).map(|_| Wave::random(&mut rng, 0.05, (64.0, 192.0), COARSE_OMEGA)).collect(),
            Vec::new(),
        ),
        Pattern::MovingTexturedBlobs => {
            let (h, w) = (spec.base_h as f64, spec.base_w as f64);
            let blobs = (0..6)
                .map(|i| {
                    let theta: f64 = rng.gen_range(0.0..TAU);
                    let reach = rng.gen_range(12.0..20.0);
                    Blob {
                        amp: if i % 2 == 0 { 0.3 } else { -0.3 },
                        sigma: rng.gen_range(14.0..22.0),
                        cy: rng.gen_range(0.2 * h..0.8 * h),
                        cx: rng.gen_range(0.2 * w..0.8 * w),
                        dy: reach * theta.sin(),
                        dx: reach * theta.cos(),
                        omega: rng.gen_range(COARSE_OMEGA.0..COARSE_OMEGA.1),
                        phase: rng.gen_range(0.0..TAU),
                    }
                })
                .collect();
            (Vec::new(), blobs)
        }
    };
    let (h, w) = (spec.base_h, spec.base_w);
    let texture: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            fine.iter().map(|f| f.at(0.0, y, x)).sum()
        })
        .collect();
    let frames = (0..spec.duration_frames)
        .map(|t| {
            let t = t as f64;
            let lum: Vec<f64> = (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    let coarse: f64 = waves.iter().map(|c| c.at(t, y, x)).sum::<f64>()
                        + blobs.iter().map(|b| b.at(t, y, x)).sum::<f64>();
                    coarse + texture[i]
                })
                .collect();
            Image::from_fn(3, h, w, |c, y, x| {
                (offsets[c] + gains[c] * lum[y * w + x]).clamp(0.0, 1.0) as f32
            })
        })
        .collect();
    VideoTensor::new(frames, spec.base_fps, format!("scene_{}", spec.seed), format!("scene_{}", spec.seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    DownscaleUpscale,
    Quantize,
    FrameAverage,
    FrameDropHold,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 4] = [
        DistortionKind::DownscaleUpscale,
        DistortionKind::Quantize,
        DistortionKind::FrameAverage,
        DistortionKind::FrameDropHold,
    ];

    pub fn is_temporal(self) -> bool {
        matches!(self, DistortionKind::FrameAverage | DistortionKind::FrameDropHold)
    }
}

/// A distortion at one of `num_severities` levels; level 0 is pristine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub severity: usize,
    pub num_severities: usize,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, severity: usize, num_severities: usize) -> Result<Self> {
        if num_severities < 2 {
            return Err(invalid!("need at least 2 severities, got {num_severities}"));
        }
        if severity >= num_severities {
            return Err(invalid!("severity {severity} out of range 0..{num_severities}"));
        }
        Ok(Self {
            kind,
            severity,
            num_severities,
        })
    }

    /// Downscale factor `4^(s/(S-1))`.
    pub fn downscale_factor(&self) -> f64 {
        4f64.powf(self.severity as f64 / (self.num_severities - 1) as f64)
    }

    /// Quantizer step `0.25 * 2^-(S-1-s)`.
    pub fn quantize_step(&self) -> f64 {
        0.25 * 0.5f64.powi((self.num_severities - 1 - self.severity) as i32)
    }

    /// Averaging window or hold length `2^s`.
    pub fn frame_span(&self) -> usize {
        1 << self.severity
    }

    /// `1 - s/(S-1)` before jitter.
    pub fn clean_mos(&self) -> f64 {
        1.0 - self.severity as f64 / (self.num_severities - 1) as f64
    }
}

/// Degrades `video` in place of its original size and length, returning the label.
pub fn apply_distortion(video: &VideoTensor, d: &DistortionSpec, jitter_seed: u64) -> Result<(VideoTensor, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let mos = d.clean_mos() + rng.gen_range(-MOS_JITTER..MOS_JITTER);
    if d.severity == 0 {
        return Ok((video.clone(), mos));
    }
    let frames = video.frames();
    let n = frames.len();
    let (h, w) = (video.height(), video.width());
    let out: Vec<Image<f32>> = match d.kind {
        DistortionKind::DownscaleUpscale => {
            let f = d.downscale_factor();
            let (sh, sw) = (
                ((h as f64 / f).round() as usize).max(1),
                ((w as f64 / f).round() as usize).max(1),
            );
            frames
                .iter()
                .map(|fr| bicubic_resample(&bicubic_resample(fr, sh, sw)?, h, w).map(|i| i.map(|v| v.clamp(0.0, 1.0))))
                .collect::<Result<_>>()?
        }
        DistortionKind::Quantize => {
            let step = d.quantize_step() as f32;
            frames
                .iter()
                .map(|fr| fr.map(|v| ((v / step).round() * step).clamp(0.0, 1.0)))
                .collect()
        }
        DistortionKind::FrameAverage => {
            let span = d.frame_span();
            (0..n)
                .map(|i| {
                    let idx = chunk_indices(n, i, span);
                    let mut acc = Image::zeros(3, h, w);
                    for &j in &idx {
                        acc = acc.add(&frames[j]);
                    }
                    acc.map(|v| v / span as f32)
                })
                .collect()
        }
        DistortionKind::FrameDropHold => {
            let span = d.frame_span();
            (0..n).map(|i| frames[(i / span) * span].clone()).collect()
        }
    };
    let v = VideoTensor::new(out, video.fps(), video.clip_id.clone(), video.scene_id.clone())?;
    Ok((v, mos))
}

/// Mean absolute difference between consecutive frames.
pub fn temporal_energy(video: &VideoTensor) -> f64 {
    let f = video.frames();
    if f.len() < 2 {
        return 0.0;
    }
    f.windows(2).map(|p| p[1].sub(&p[0]).mean_abs() as f64).sum::<f64>() / (f.len() - 1) as f64
}

/// Mean absolute forward difference along both image axes, averaged over frames.
pub fn spatial_energy(video: &VideoTensor) -> f64 {
    let per_frame = |img: &Image<f32>| {
        let (h, w) = (img.height(), img.width());
        let mut s = 0.0f64;
        let mut count = 0usize;
        for c in 0..img.channels() {
            let p = img.plane(c);
            for y in 0..h {
                for x in 0..w {
                    let v = p[y * w + x];
                    if x + 1 < w {
                        s += (p[y * w + x + 1] - v).abs() as f64;
                        count += 1;
                    }
                    if y + 1 < h {
                        s += (p[(y + 1) * w + x] - v).abs() as f64;
                        count += 1;
                    }
                }
            }
        }
        s / count.max(1) as f64
    };
    video.frames().iter().map(per_frame).sum::<f64>() / video.num_frames() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    /// Downscale-upscale only.
    Spatial,
    /// Frame averaging and frame holding on alternating scenes.
    Temporal,
    /// Scene `i` gets distortion kind `i mod 4`.
    Mixed,
}

impl BenchmarkKind {
    pub fn distortion_for_scene(self, scene: usize) -> DistortionKind {
        match self {
            BenchmarkKind::Spatial => DistortionKind::DownscaleUpscale,
            BenchmarkKind::Temporal => {
                if scene % 2 == 0 {
                    DistortionKind::FrameAverage
                } else {
                    DistortionKind::FrameDropHold
                }
            }
            BenchmarkKind::Mixed => DistortionKind::ALL[scene % 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub kind: BenchmarkKind,
    pub n_scenes: usize,
    pub severities: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            kind: BenchmarkKind::Spatial,
            n_scenes: 24,
            severities: 5,
            height: 96,
            width: 128,
            frames: 64,
            fps: 60.0,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    /// Standard size for each benchmark kind: 24 scenes × 5 severities for
    /// spatial, 22 × 4 for temporal, 40 × 4 for mixed.
    pub fn preset(kind: BenchmarkKind) -> Self {
        let (n_scenes, severities) = match kind {
            BenchmarkKind::Spatial => (24, 5),
            BenchmarkKind::Temporal => (22, 4),
            BenchmarkKind::Mixed => (40, 4),
        };
        Self {
            kind,
            n_scenes,
            severities,
            ..Self::default()
        }
    }

    pub fn scene_spec(&self, scene: usize) -> SceneSpec {
        SceneSpec {
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(scene as u64),
            pattern: Pattern::ALL[scene % Pattern::ALL.len()],
            base_h: self.height,
            base_w: self.width,
            base_fps: self.fps,
            duration_frames: self.frames,
        }
    }
}

/// One generated clip before it is written out.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub video: VideoTensor,
    pub mos: f64,
    pub distortion: DistortionSpec,
}

/// Renders and degrades every clip of scene `scene`, severities in order.
pub fn scene_clips(cfg: &BenchmarkConfig, scene: usize) -> Result<Vec<SynthClip>> {
    let spec = cfg.scene_spec(scene);
    let pristine = render_scene(&spec)?;
    let kind = cfg.kind.distortion_for_scene(scene);
    let scene_id = format!("scene{scene:03}");
    (0..cfg.severities)
        .map(|s| {
            let d = DistortionSpec::new(kind, s, cfg.severities)?;
            let (mut video, mos) = apply_distortion(&pristine, &d, spec.seed.wrapping_mul(31).wrapping_add(s as u64))?;
            video.clip_id = format!("{scene_id}_sev{s}");
            video.scene_id = scene_id.clone();
            Ok(SynthClip {
                video,
                mos,
                distortion: d,
            })
        })
        .collect()
}

/// Writes clip directories, `manifest.csv` and `generator.json` under `out_dir`.
pub fn build_benchmark(cfg: &BenchmarkConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.n_scenes == 0 {
        return Err(invalid!("benchmark needs at least one scene"));
    }
    DistortionSpec::new(DistortionKind::Quantize, 0, cfg.severities)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = (0..cfg.n_scenes)
        .into_par_iter()
        .map(|scene| {
            scene_clips(cfg, scene)?
                .into_iter()
                .map(|clip| {
                    let rel = format!("clips/{}", clip.video.clip_id);
                    save_clip(&clip.video, out_dir.join(&rel))?;
                    Ok(ManifestRow {
                        clip_path: rel,
                        mos: clip.mos,
                        scene_id: clip.video.scene_id.clone(),
                        fps: clip.video.fps(),
                        width: clip.video.width(),
                        height: clip.video.height(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let manifest = DatasetManifest::new(rows, out_dir)?;
    manifest.write(out_dir.join("manifest.csv"))?;
    let gen = serde_json::to_string_pretty(cfg).map_err(|e| Error::Format(e.to_string()))?;
    let p = out_dir.join(GENERATOR_FILE);
    std::fs::write(&p, gen).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}
