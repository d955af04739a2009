//! Small convolutional feature extractors and the two-layer MLP head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// `[3, H, W]` image to a global-average feature vector.
    ImageEncoder,
    /// `[3, H, W]` subband to per-channel mean and standard deviation.
    SubbandCnn,
    /// `[3, T, H, W]` chunk to a global-average feature vector.
    TemporalCnn,
}

/// Common interface of the three feature extractors.
pub trait Backbone {
    fn kind(&self) -> BackboneKind;

    /// Length of the vector returned by [`Backbone::forward`].
    fn feature_dim(&self) -> usize;

    /// Names and shapes of every parameter the backbone reads.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)>;

    fn init_params<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut impl Rng);

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: NodeId) -> Result<NodeId>;
}

/// A stack of conv + ReLU stages followed by global pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBackbone {
    kind: BackboneKind,
    prefix: String,
    channels: Vec<usize>,
}

impl ConvBackbone {
    /// `channels` lists the input channel count followed by every stage's output.
    pub fn new(kind: BackboneKind, prefix: impl Into<String>, channels: &[usize]) -> Result<Self> {
        if channels.len() < 2 || channels.contains(&0) {
            return Err(invalid!("backbone needs at least one stage with positive widths, got {channels:?}"));
        }
        Ok(Self {
            kind,
            prefix: prefix.into(),
            channels: channels.to_vec(),
        })
    }

    pub fn image_encoder(prefix: impl Into<String>, channels: &[usize]) -> Result<Self> {
        Self::new(BackboneKind::ImageEncoder, prefix, channels)
    }

    pub fn subband_cnn(prefix: impl Into<String>, channels: &[usize]) -> Result<Self> {
        Self::new(BackboneKind::SubbandCnn, prefix, channels)
    }

    pub fn temporal_cnn(prefix: impl Into<String>, channels: &[usize]) -> Result<Self> {
        Self::new(BackboneKind::TemporalCnn, prefix, channels)
    }

    pub fn stages(&self) -> usize {
        self.channels.len() - 1
    }

    fn weight_shape(&self, stage: usize) -> Vec<usize> {
        let (i, o) = (self.channels[stage], self.channels[stage + 1]);
        match self.kind {
            BackboneKind::TemporalCnn => vec![o, i, 3, 3, 3],
            _ => vec![o, i, 3, 3],
        }
    }

    fn name(&self, stage: usize, what: &str) -> String {
        format!("{}.conv{stage}.{what}", self.prefix)
    }

    /// Temporal stages keep full frame rate in the first stage and halve it afterwards.
    fn temporal_stride(stage: usize) -> [usize; 3] {
        if stage == 0 {
            [1, 2, 2]
        } else {
            [2, 2, 2]
        }
    }
}

impl Backbone for ConvBackbone {
    fn kind(&self) -> BackboneKind {
        self.kind
    }

    fn feature_dim(&self) -> usize {
        let last = *self.channels.last().expect("non-empty");
        match self.kind {
            BackboneKind::SubbandCnn => 2 * last,
            _ => last,
        }
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        (0..self.stages())
            .flat_map(|s| {
                [
                    (self.name(s, "weight"), self.weight_shape(s)),
                    (self.name(s, "bias"), vec![self.channels[s + 1]]),
                ]
            })
            .collect()
    }

    fn init_params<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut impl Rng) {
        for s in 0..self.stages() {
            let shape = self.weight_shape(s);
            let fan_in = shape[1..].iter().product();
            params.init_kaiming(&self.name(s, "weight"), &shape, fan_in, rng);
            params.init_zeros(&self.name(s, "bias"), &[self.channels[s + 1]]);
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: NodeId) -> Result<NodeId> {
        let expected_rank = if self.kind == BackboneKind::TemporalCnn { 4 } else { 3 };
        let shape = g.value(x).shape();
        if shape.len() != expected_rank || shape[0] != self.channels[0] {
            return Err(invalid!(
                "{:?} expects {expected_rank}-d input with {} channels, got {shape:?}",
                self.kind,
                self.channels[0]
            ));
        }
        let mut h = x;
        for s in 0..self.stages() {
            let w = g.param(params, &self.name(s, "weight"))?;
            let b = g.param(params, &self.name(s, "bias"))?;
            h = match self.kind {
                BackboneKind::TemporalCnn => g.conv3d(h, w, b, Self::temporal_stride(s), [1, 1, 1])?,
                _ => g.conv2d(h, w, b, 2, 1)?,
            };
            h = g.relu(h);
        }
        match self.kind {
            BackboneKind::SubbandCnn => g.avg_std_pool(h),
            _ => g.global_avg_pool(h),
        }
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpHead {
    prefix: String,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl MlpHead {
    pub fn new(prefix: impl Into<String>, in_dim: usize, hidden_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || hidden_dim == 0 || !(1..=2).contains(&out_dim) {
            return Err(invalid!(
                "mlp head {in_dim}->{hidden_dim}->{out_dim}: widths must be positive and out_dim 1 or 2"
            ));
        }
        Ok(Self {
            prefix: prefix.into(),
            in_dim,
            hidden_dim,
            out_dim,
        })
    }

    fn name(&self, layer: usize, what: &str) -> String {
        format!("{}.fc{layer}.{what}", self.prefix)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            (self.name(0, "weight"), vec![self.hidden_dim, self.in_dim]),
            (self.name(0, "bias"), vec![self.hidden_dim]),
            (self.name(1, "weight"), vec![self.out_dim, self.hidden_dim]),
            (self.name(1, "bias"), vec![self.out_dim]),
        ]
    }

    /// Kaiming-uniform weights and zero biases throughout.
    pub fn init_params<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut impl Rng) {
        params.init_kaiming(&self.name(0, "weight"), &[self.hidden_dim, self.in_dim], self.in_dim, rng);
        params.init_zeros(&self.name(0, "bias"), &[self.hidden_dim]);
        params.init_kaiming(&self.name(1, "weight"), &[self.out_dim, self.hidden_dim], self.hidden_dim, rng);
        params.init_zeros(&self.name(1, "bias"), &[self.out_dim]);
    }

    /// Like [`MlpHead::init_params`] but the output layer emits exactly `bias`
    /// for every input until it is trained.
    pub fn init_params_constant_output<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut impl Rng, bias: &[f64]) {
        assert_eq!(bias.len(), self.out_dim, "one bias per output");
        self.init_params(params, rng);
        params.init_zeros(&self.name(1, "weight"), &[self.out_dim, self.hidden_dim]);
        params.insert(
            self.name(1, "bias"),
            Tensor::from_vec(bias.iter().map(|&b| T::lit(b)).collect()),
        );
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: NodeId) -> Result<NodeId> {
        let w0 = g.param(params, &self.name(0, "weight"))?;
        let b0 = g.param(params, &self.name(0, "bias"))?;
        let w1 = g.param(params, &self.name(1, "weight"))?;
        let b1 = g.param(params, &self.name(1, "bias"))?;
        let h = g.linear(x, w0, b0)?;
        let h = g.relu(h);
        g.linear(h, w1, b1)
    }
}
