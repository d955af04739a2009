//! The three-branch quality model and the modular score combination.
//!
//! `q_b` comes from key frames resized to the base size. The spatial
//! rectifier reads Laplacian-pyramid subbands of the same key frames at their
//! actual resolution, the temporal rectifier reads short chunks around them at
//! the actual frame rate. Each rectifier emits `(alpha, beta)`; active
//! rectifiers are merged by the geometric mean of their alphas and the
//! arithmetic mean of their betas, and `q_st = alpha_st * q_b + beta_st`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::media::{
    crop_offset, resize_short_side, sample_chunks, sample_key_frames, ChunkSet, CropMode,
    KeyFrameSet, VideoTensor,
};
use crate::nn::{
    softplus, Backbone, ConvBackbone, Graph, MlpHead, NodeId, ParamSet, Scalar, Tensor, WeightFile,
};
use crate::pyramid::{build_pyramid, compute_rho, upsample_subbands, RhoMode};

/// Added to `softplus(a)` so alphas stay strictly positive.
pub const ALPHA_EPS: f64 = 1e-4;

/// Weight-file tensor recording the rectifier feature layout as `[M, K, 2C]`.
pub const CONCAT_ORDER_META: &str = "__meta__.concat_order.frame_major_level_minor";

/// Raw head output that maps to `alpha = 1` exactly in real arithmetic.
pub fn identity_alpha_bias() -> f64 {
    // softplus^-1(y) = ln(e^y - 1)
    (1.0 - ALPHA_EPS).exp_m1().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Key frames per clip (`M`); also the number of chunks.
    pub m_keyframes: usize,
    /// Bandpass levels per pyramid (`K`).
    pub k_levels: usize,
    pub rho_mode: RhoMode,
    /// Short side and crop size of the base branch input.
    pub base_size: usize,
    pub chunk_len: usize,
    pub hv: usize,
    pub wv: usize,
    pub hidden_dim: usize,
    pub encoder_channels: Vec<usize>,
    pub subband_channels: Vec<usize>,
    pub temporal_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m_keyframes: 8,
            k_levels: 4,
            rho_mode: RhoMode::Linear,
            base_size: 224,
            chunk_len: 32,
            hv: 224,
            wv: 224,
            hidden_dim: 64,
            encoder_channels: vec![3, 16, 32, 64],
            subband_channels: vec![3, 16, 32],
            temporal_channels: vec![3, 8, 16],
        }
    }
}

impl ModelConfig {
    /// Small setting for the synthetic benchmarks on a desktop CPU.
    pub fn toy() -> Self {
        Self {
            m_keyframes: 4,
            k_levels: 4,
            rho_mode: RhoMode::Geometric,
            base_size: 32,
            chunk_len: 8,
            hv: 32,
            wv: 32,
            hidden_dim: 64,
            encoder_channels: vec![3, 16, 32, 64],
            subband_channels: vec![3, 4, 8],
            temporal_channels: vec![3, 8, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m_keyframes", self.m_keyframes),
            ("k_levels", self.k_levels),
            ("base_size", self.base_size),
            ("chunk_len", self.chunk_len),
            ("hv", self.hv),
            ("wv", self.wv),
            ("hidden_dim", self.hidden_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid!("model config: {name} must be positive"));
            }
        }
        for (name, ch) in [
            ("encoder_channels", &self.encoder_channels),
            ("subband_channels", &self.subband_channels),
            ("temporal_channels", &self.temporal_channels),
        ] {
            if ch.first() != Some(&3) || ch.len() < 2 {
                return Err(invalid!("model config: {name} must start at 3 and have a stage, got {ch:?}"));
            }
        }
        Ok(())
    }
}

/// Branch networks; parameters live in a separate [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub encoder: ConvBackbone,
    pub base_head: MlpHead,
    pub subband_cnn: ConvBackbone,
    pub spatial_head: MlpHead,
    pub temporal_cnn: ConvBackbone,
    pub temporal_head: MlpHead,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = ConvBackbone::image_encoder("base.encoder", &config.encoder_channels)?;
        let subband_cnn = ConvBackbone::subband_cnn("spatial.cnn", &config.subband_channels)?;
        let temporal_cnn = ConvBackbone::temporal_cnn("temporal.cnn", &config.temporal_channels)?;
        let spatial_in = config.m_keyframes * config.k_levels * subband_cnn.feature_dim();
        Ok(Self {
            base_head: MlpHead::new("base.head", encoder.feature_dim(), config.hidden_dim, 1)?,
            spatial_head: MlpHead::new("spatial.head", spatial_in, config.hidden_dim, 2)?,
            temporal_head: MlpHead::new("temporal.head", temporal_cnn.feature_dim(), config.hidden_dim, 2)?,
            encoder,
            subband_cnn,
            temporal_cnn,
        })
    }

    pub fn init_params<T: Scalar>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        let mut p = ParamSet::new();
        let identity = [identity_alpha_bias(), 0.0];
        self.encoder.init_params(&mut p, rng);
        self.base_head.init_params(&mut p, rng);
        self.subband_cnn.init_params(&mut p, rng);
        self.spatial_head.init_params_constant_output(&mut p, rng, &identity);
        self.temporal_cnn.init_params(&mut p, rng);
        self.temporal_head.init_params_constant_output(&mut p, rng, &identity);
        p
    }
}

/// Positive scale and real shift applied to `q_b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectifierOutput {
    pub alpha: f64,
    pub beta: f64,
}

impl RectifierOutput {
    pub const IDENTITY: Self = Self {
        alpha: 1.0,
        beta: 0.0,
    };

    /// `alpha = softplus(a) + ALPHA_EPS`, `beta = b`.
    pub fn from_raw(a: f64, b: f64) -> Self {
        Self {
            alpha: softplus(a) + ALPHA_EPS,
            beta: b,
        }
    }

    pub fn apply(&self, q_b: f64) -> f64 {
        self.alpha * q_b + self.beta
    }
}

/// One rectifier-dropout decision; a rectifier is active when `u >= p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutDraw {
    pub u_s: f64,
    pub u_t: f64,
    pub p_s: f64,
    pub p_t: f64,
    pub active_s: bool,
    pub active_t: bool,
}

impl DropoutDraw {
    pub fn new(u_s: f64, u_t: f64, p_s: f64, p_t: f64) -> Self {
        Self {
            u_s,
            u_t,
            p_s,
            p_t,
            active_s: u_s >= p_s,
            active_t: u_t >= p_t,
        }
    }

    /// Draws `u_s` then `u_t` uniformly from `[0, 1)`.
    pub fn sample(rng: &mut impl Rng, p_s: f64, p_t: f64) -> Self {
        let u_s = rng.gen::<f64>();
        let u_t = rng.gen::<f64>();
        Self::new(u_s, u_t, p_s, p_t)
    }

    /// Both rectifiers on, as at inference.
    pub fn all_active() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Combined {
    pub alpha: f64,
    pub beta: f64,
    pub q: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("rectifier alpha must be positive and finite, got {alpha}")))
    }
}

/// Merges the active rectifiers' corrections and applies them to `q_b`.
pub fn combine(
    q_b: f64,
    s: Option<RectifierOutput>,
    t: Option<RectifierOutput>,
    draw: &DropoutDraw,
) -> Result<Combined> {
    let pick = |active: bool, out: Option<RectifierOutput>, which: &str| -> Result<Option<RectifierOutput>> {
        if !active {
            return Ok(None);
        }
        let out = out.ok_or_else(|| invalid!("{which} rectifier is active but has no output"))?;
        check_alpha(out.alpha)?;
        Ok(Some(out))
    };
    let s = pick(draw.active_s, s, "spatial")?;
    let t = pick(draw.active_t, t, "temporal")?;
    let (alpha, beta) = match (s, t) {
        (None, None) => return Ok(Combined { alpha: 1.0, beta: 0.0, q: q_b }),
        (Some(r), None) | (None, Some(r)) => (r.alpha, r.beta),
        (Some(a), Some(b)) => (
            ((a.alpha.ln() + b.alpha.ln()) / 2.0).exp(),
            (a.beta + b.beta) / 2.0,
        ),
    };
    Ok(Combined {
        alpha,
        beta,
        q: alpha * q_b + beta,
    })
}

/// Scalar nodes `(alpha, beta)` of a rectifier inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct RectifierNodes {
    pub alpha: NodeId,
    pub beta: NodeId,
}

/// Maps a raw `[a, b]` head output to `(softplus(a) + ALPHA_EPS, b)`.
pub fn rectifier_nodes<T: Scalar>(g: &mut Graph<T>, raw: NodeId) -> Result<RectifierNodes> {
    let a = g.select(raw, 0)?;
    let sp = g.softplus(a);
    let alpha = g.shift(sp, T::lit(ALPHA_EPS));
    let beta = g.select(raw, 1)?;
    Ok(RectifierNodes { alpha, beta })
}

/// `alpha * q_b + beta` as graph nodes.
pub fn apply_nodes<T: Scalar>(g: &mut Graph<T>, q_b: NodeId, r: RectifierNodes) -> Result<NodeId> {
    let scaled = g.mul(r.alpha, q_b)?;
    g.add(scaled, r.beta)
}

/// Graph form of [`combine`] over whichever rectifiers are given.
pub fn combine_nodes<T: Scalar>(
    g: &mut Graph<T>,
    q_b: NodeId,
    s: Option<RectifierNodes>,
    t: Option<RectifierNodes>,
) -> Result<NodeId> {
    match (s, t) {
        (None, None) => Ok(q_b),
        (Some(r), None) | (None, Some(r)) => apply_nodes(g, q_b, r),
        (Some(a), Some(b)) => {
            let la = g.ln(a.alpha);
            let lb = g.ln(b.alpha);
            let sum = g.add(la, lb)?;
            let half = g.scale(sum, T::lit(0.5));
            let alpha = g.exp(half);
            let bsum = g.add(a.beta, b.beta)?;
            let beta = g.scale(bsum, T::lit(0.5));
            apply_nodes(g, q_b, RectifierNodes { alpha, beta })
        }
    }
}

/// The four scores the model reports for one clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityQuad {
    pub q_b: f64,
    pub q_s: f64,
    pub q_t: f64,
    pub q_st: f64,
}

impl QualityQuad {
    pub const NAMES: [&'static str; 4] = ["q_b", "q_s", "q_t", "q_st"];

    pub fn from_parts(q_b: f64, s: RectifierOutput, t: RectifierOutput) -> Result<Self> {
        let st = combine(q_b, Some(s), Some(t), &DropoutDraw::all_active())?;
        Ok(Self {
            q_b,
            q_s: s.apply(q_b),
            q_t: t.apply(q_b),
            q_st: st.q,
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.q_b, self.q_s, self.q_t, self.q_st]
    }
}

/// Everything the model reads from one clip, with the parameter-free
/// preprocessing (resizing, pyramids, chunk extraction) already done.
#[derive(Debug, Clone)]
pub struct ClipInputs {
    pub clip_id: String,
    /// Key frames resized so the short side is `base_size`, not yet cropped.
    pub base_frames: Vec<Image<f32>>,
    /// `subbands[i][k]`: level `k` of key frame `i`, upsampled to full size.
    pub subbands: Vec<Vec<Image<f32>>>,
    /// One `[3, L, hv, wv]` tensor per chunk.
    pub chunks: Vec<Tensor<f32>>,
}

impl ClipInputs {
    pub fn prepare(video: &VideoTensor, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let keys = sample_key_frames(video, config.m_keyframes)?;
        let chunks = sample_chunks(video, &keys, config.chunk_len, config.hv, config.wv)?;
        Self::from_sets(&video.clip_id, &keys, &chunks, config)
    }

    pub fn from_sets(clip_id: &str, keys: &KeyFrameSet, chunks: &ChunkSet, config: &ModelConfig) -> Result<Self> {
        if keys.is_empty() {
            return Err(invalid!("empty key-frame set"));
        }
        if chunks.is_empty() {
            return Err(invalid!("empty chunk set"));
        }
        let base_frames = keys
            .frames
            .iter()
            .map(|f| resize_short_side(f, config.base_size))
            .collect::<Result<_>>()?;
        let subbands = keys
            .frames
            .iter()
            .map(|f| key_frame_subbands(f, config))
            .collect::<Result<_>>()?;
        let chunks = chunks.chunks.iter().map(|c| chunk_tensor(c)).collect::<Result<_>>()?;
        Ok(Self {
            clip_id: clip_id.to_string(),
            base_frames,
            subbands,
            chunks,
        })
    }

    pub fn num_keyframes(&self) -> usize {
        self.base_frames.len()
    }
}

/// Bandpass subbands of one key frame, each brought back to the frame size.
pub fn key_frame_subbands(frame: &Image<f32>, config: &ModelConfig) -> Result<Vec<Image<f32>>> {
    let (h, w) = (frame.height(), frame.width());
    let rho = compute_rho(h, w, config.base_size, config.base_size, config.k_levels, config.rho_mode)?;
    let pyramid = build_pyramid(frame, rho, config.k_levels)?;
    upsample_subbands(&pyramid, h, w)
}

/// Stacks equally sized frames into a `[3, L, H, W]` tensor.
pub fn chunk_tensor(frames: &[Image<f32>]) -> Result<Tensor<f32>> {
    let first = frames.first().ok_or_else(|| invalid!("empty chunk"))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let plane = h * w;
    let mut data = vec![0.0f32; c * frames.len() * plane];
    for (t, f) in frames.iter().enumerate() {
        if !f.same_shape(first) {
            return Err(invalid!("chunk frames differ in size"));
        }
        for ch in 0..c {
            let dst = (ch * frames.len() + t) * plane;
            data[dst..dst + plane].copy_from_slice(f.plane(ch));
        }
    }
    Tensor::new(vec![c, frames.len(), h, w], data)
}

fn image_tensor<T: Scalar>(img: &Image<f32>) -> Tensor<T> {
    Tensor::new(
        vec![img.channels(), img.height(), img.width()],
        img.data().iter().map(|&v| T::lit(v as f64)).collect(),
    )
    .expect("image shape")
}

/// Crop offsets for every base frame: random when training, centered otherwise.
pub fn base_crops(inputs: &ClipInputs, size: usize, mode: CropMode, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    inputs
        .base_frames
        .iter()
        .map(|f| crop_offset(f.height(), f.width(), size, mode, rng))
        .collect()
}

/// Graph nodes produced by one clip's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ClipNodes {
    pub q_b: NodeId,
    pub spatial: Option<RectifierNodes>,
    pub temporal: Option<RectifierNodes>,
    pub q_st: NodeId,
}

impl Architecture {
    /// Mean of per-frame head scores over the cropped base frames.
    pub fn base_nodes<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        frames: &[Image<f32>],
    ) -> Result<NodeId> {
        if frames.is_empty() {
            return Err(invalid!("base quality needs at least one key frame"));
        }
        let scores = frames
            .iter()
            .map(|f| {
                let x = g.constant(image_tensor(f));
                let feat = self.encoder.forward(g, params, x)?;
                self.base_head.forward(g, params, feat)
            })
            .collect::<Result<Vec<_>>>()?;
        g.mean_of(&scores)
    }

    /// Raw spatial head output from `subbands[frame][level]`.
    pub fn spatial_raw<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        subbands: &[Vec<Image<f32>>],
    ) -> Result<NodeId> {
        let mut feats = Vec::new();
        for frame in subbands {
            for band in frame {
                let x = g.constant(image_tensor(band));
                feats.push(self.subband_cnn.forward(g, params, x)?);
            }
        }
        let joined = g.concat(&feats)?;
        if g.value(joined).len() != self.spatial_head.in_dim {
            return Err(invalid!(
                "spatial head expects {} features, got {}; check m_keyframes, k_levels and clip length",
                self.spatial_head.in_dim,
                g.value(joined).len()
            ));
        }
        self.spatial_head.forward(g, params, joined)
    }

    /// Raw temporal head output from `[3, L, hv, wv]` chunks.
    pub fn temporal_raw<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        chunks: &[Tensor<f32>],
    ) -> Result<NodeId> {
        if chunks.is_empty() {
            return Err(invalid!("temporal rectifier needs at least one chunk"));
        }
        let feats = chunks
            .iter()
            .map(|c| {
                let x = g.constant(c.cast());
                self.temporal_cnn.forward(g, params, x)
            })
            .collect::<Result<Vec<_>>>()?;
        let pooled = g.mean_of(&feats)?;
        self.temporal_head.forward(g, params, pooled)
    }

    /// Full forward pass for one clip. Inactive rectifiers are not evaluated.
    #[allow(clippy::too_many_arguments)]
    pub fn clip_nodes<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        inputs: &ClipInputs,
        crops: &[(usize, usize)],
        base_size: usize,
        active_s: bool,
        active_t: bool,
    ) -> Result<ClipNodes> {
        let frames = inputs
            .base_frames
            .iter()
            .zip(crops)
            .map(|(f, &(top, left))| f.crop(top, left, base_size, base_size))
            .collect::<Result<Vec<_>>>()?;
        let q_b = self.base_nodes(g, params, &frames)?;
        let spatial = if active_s {
            let raw = self.spatial_raw(g, params, &inputs.subbands)?;
            Some(rectifier_nodes(g, raw)?)
        } else {
            None
        };
        let temporal = if active_t {
            let raw = self.temporal_raw(g, params, &inputs.chunks)?;
            Some(rectifier_nodes(g, raw)?)
        } else {
            None
        };
        let q_st = combine_nodes(g, q_b, spatial, temporal)?;
        Ok(ClipNodes {
            q_b,
            spatial,
            temporal,
            q_st,
        })
    }
}

/// Architecture plus parameters.
#[derive(Debug, Clone)]
pub struct VqaModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParamSet<T>,
}

impl<T: Scalar> VqaModel<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        let params = arch.init_params(rng);
        Ok(Self {
            config,
            arch,
            params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> VqaModel<U> {
        VqaModel {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    fn inference_graph(&self) -> Graph<T> {
        let mut g = Graph::new();
        g.freeze_prefix("");
        g
    }

    /// `q_b` with every key frame resized and cropped per `mode`.
    pub fn base_quality(&self, keys: &KeyFrameSet, mode: CropMode, rng: &mut impl Rng) -> Result<f64> {
        if keys.is_empty() {
            return Err(invalid!("base quality needs at least one key frame"));
        }
        let size = self.config.base_size;
        let frames = keys
            .frames
            .iter()
            .map(|f| crate::media::resize_short_side_crop(f, size, mode, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut g = self.inference_graph();
        let q = self.arch.base_nodes(&mut g, &self.params, &frames)?;
        Ok(to_f64(g.scalar_value(q)))
    }

    pub fn spatial_rectifier(&self, keys: &KeyFrameSet) -> Result<RectifierOutput> {
        let subbands = keys
            .frames
            .iter()
            .map(|f| key_frame_subbands(f, &self.config))
            .collect::<Result<Vec<_>>>()?;
        let mut g = self.inference_graph();
        let raw = self.arch.spatial_raw(&mut g, &self.params, &subbands)?;
        Ok(raw_output(&g, raw))
    }

    pub fn temporal_rectifier(&self, chunks: &ChunkSet) -> Result<RectifierOutput> {
        let tensors = chunks.chunks.iter().map(|c| chunk_tensor(c)).collect::<Result<Vec<_>>>()?;
        let mut g = self.inference_graph();
        let raw = self.arch.temporal_raw(&mut g, &self.params, &tensors)?;
        Ok(raw_output(&g, raw))
    }

    /// All four scores from one forward pass with both rectifiers on.
    pub fn predict_inputs(&self, inputs: &ClipInputs) -> Result<QualityQuad> {
        let size = self.config.base_size;
        let crops = base_crops(inputs, size, CropMode::Center, &mut rand::rngs::mock::StepRng::new(0, 0));
        let mut g = self.inference_graph();
        let nodes = self.arch.clip_nodes(&mut g, &self.params, inputs, &crops, size, true, true)?;
        let q_b = to_f64(g.scalar_value(nodes.q_b));
        let read = |r: Option<RectifierNodes>| {
            let r = r.expect("both rectifiers evaluated");
            RectifierOutput {
                alpha: to_f64(g.scalar_value(r.alpha)),
                beta: to_f64(g.scalar_value(r.beta)),
            }
        };
        let quad = QualityQuad::from_parts(q_b, read(nodes.spatial), read(nodes.temporal))?;
        if quad.as_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite prediction for clip {}", inputs.clip_id)));
        }
        Ok(quad)
    }

    pub fn predict(&self, video: &VideoTensor) -> Result<QualityQuad> {
        self.predict_inputs(&ClipInputs::prepare(video, &self.config)?)
    }
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().expect("float")
}

fn raw_output<T: Scalar>(g: &Graph<T>, raw: NodeId) -> RectifierOutput {
    let v = g.value(raw).data();
    RectifierOutput::from_raw(to_f64(v[0]), to_f64(v[1]))
}

impl VqaModel<f32> {
    /// Writes all parameters plus the rectifier feature-layout record.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = WeightFile::from_params(&self.params);
        file.push(CONCAT_ORDER_META, Tensor::from_vec(self.concat_order()));
        file.save(path)
    }

    /// Builds the architecture from `config` and fills it from `path`.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let file = WeightFile::load(path)?;
        let arch = Architecture::new(&config)?;
        let mut params = arch.init_params(&mut rand::rngs::mock::StepRng::new(0, 0));
        file.load_into(&mut params)?;
        let model = Self {
            config,
            arch,
            params,
        };
        if let Some(order) = file.get(CONCAT_ORDER_META) {
            if order.data() != model.concat_order().as_slice() {
                return Err(Error::Format(format!(
                    "weight file was saved for spatial feature layout {:?}, model uses {:?}",
                    order.data(),
                    model.concat_order()
                )));
            }
        }
        Ok(model)
    }

    fn concat_order(&self) -> Vec<f32> {
        vec![
            self.config.m_keyframes as f32,
            self.config.k_levels as f32,
            self.arch.subband_cnn.feature_dim() as f32,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_bias_gives_unit_alpha() {
        let r = RectifierOutput::from_raw(identity_alpha_bias(), 0.0);
        assert!((r.alpha - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_positive_for_extreme_raw() {
        assert!(RectifierOutput::from_raw(-1e6, 0.0).alpha > 0.0);
        assert!(RectifierOutput::from_raw(-50.0, 0.0).alpha > 0.0);
    }

    #[test]
    fn combine_examples() {
        let none = DropoutDraw::new(0.1, 0.1, 0.2, 0.2);
        assert!(!none.active_s && !none.active_t);
        assert_eq!(combine(0.37, None, None, &none).unwrap().q, 0.37);

        let s = RectifierOutput { alpha: 4.0, beta: 0.2 };
        let t = RectifierOutput { alpha: 1.0, beta: 0.4 };
        let c = combine(0.5, Some(s), Some(t), &DropoutDraw::all_active()).unwrap();
        assert!((c.alpha - 2.0).abs() < 1e-12);
        assert!((c.beta - 0.3).abs() < 1e-12);
        assert!((c.q - 1.3).abs() < 1e-12);

        let only_s = DropoutDraw::new(0.5, 0.1, 0.2, 0.2);
        let s = RectifierOutput { alpha: 1.5, beta: -0.1 };
        assert_eq!(combine(0.2, Some(s), Some(t), &only_s).unwrap().q, 1.5 * 0.2 - 0.1);
    }

    #[test]
    fn combine_errors() {
        let both = DropoutDraw::all_active();
        let s = RectifierOutput { alpha: 1.0, beta: 0.0 };
        assert!(combine(0.5, Some(s), None, &both).is_err());
        let bad = RectifierOutput { alpha: 0.0, beta: 0.0 };
        assert!(combine(0.5, Some(bad), Some(s), &both).is_err());
    }

    #[test]
    fn hand_set_quad() {
        let quad = QualityQuad::from_parts(
            0.25,
            RectifierOutput { alpha: 2.0, beta: 0.0 },
            RectifierOutput { alpha: 8.0, beta: 1.0 },
        )
        .unwrap();
        assert_eq!(quad.q_b, 0.25);
        assert_eq!(quad.q_s, 0.5);
        assert_eq!(quad.q_t, 3.0);
        assert!((quad.q_st - 1.5).abs() < 1e-12);
    }

    #[test]
    fn chunk_tensor_layout() {
        let a = Image::from_fn(3, 2, 2, |c, y, x| (c * 100 + y * 10 + x) as f32);
        let b = a.map(|v| v + 1000.0);
        let t = chunk_tensor(&[a, b]).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2, 2]);
        // channel 1, frame 1, (y=1, x=0)
        assert_eq!(t.data()[(2 + 1) * 4 + 2], 1110.0);
    }
}
