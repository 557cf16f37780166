//! Two-branch grading: a main backbone produces the last feature maps, a
//! frozen side segmentation branch produces lesion maps, and a side-attention
//! block turns the maps into per-channel weight maps that multiply the
//! features before global average pooling and the 5-way head.
//!
//! Also provides the plain classifier (no side branch) and the baseline that
//! concatenates the m-dimensional presence vector to the pooled features.

use crate::error::{Error, Result};
use crate::nn::backbone::{Backbone, BackboneConfig, BackboneTrace};
use crate::nn::layers::{
    elu, elu_backward, global_avg_pool, global_avg_pool_backward, max_pool_down, resize_bilinear,
    sigmoid, sigmoid_backward, softmax, Conv2d, Linear, Param, Params,
};
use crate::nn::lesion_net::{LesionNet, LesionNetTrace};
use crate::tensor::Tensor;
use crate::types::{presence_from_maps, DRGrade, FundusImage, LesionPresenceVector, ProbMapStack};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    CwMaxPool,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleKind {
    MaxPool,
    Bilinear,
}

/// What sits between the pooled features and the grade probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradingKind {
    /// Backbone -> GAP -> FC -> softmax.
    Plain,
    /// GAP features concatenated with the side branch's presence vector.
    LesionConcat,
    /// Side-attention fusion of feature maps and lesion maps.
    MultiTask(AttentionMode),
}

/// Reduce full-resolution maps to the feature-map grid. Max pooling is the
/// default (keeps small-lesion responses); bilinear is available behind the
/// config flag.
pub fn downsample_maps(
    maps: &ProbMapStack,
    target_side: usize,
    kind: DownsampleKind,
) -> Result<ProbMapStack> {
    let side = maps.maps.h;
    if target_side == 0 || side % target_side != 0 {
        return Err(Error::Shape(format!(
            "target side {target_side} does not divide map side {side}"
        )));
    }
    if target_side == side {
        return Ok(maps.clone());
    }
    let t = match kind {
        DownsampleKind::MaxPool => max_pool_down(&maps.maps, side / target_side),
        DownsampleKind::Bilinear => resize_bilinear(&maps.maps, target_side, target_side),
    };
    ProbMapStack::new(t)
}

/// Channel-wise max pooling: one weight map w(x,y) = max_j s_j(x,y),
/// replicated across all k feature channels.
pub fn cw_maxpool_weights(maps: &Tensor, k: usize) -> Tensor {
    let mut out = Tensor::zeros(maps.h, maps.w, k);
    for (dst, src) in out
        .data
        .chunks_exact_mut(k)
        .zip(maps.data.chunks_exact(maps.c))
    {
        let w = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        dst.iter_mut().for_each(|v| *v = w);
    }
    out
}

/// Learned attention: 3x3 conv (m -> hidden) -> rectifier -> 3x3 conv
/// (hidden -> k) -> sigmoid, bounding the weights to [0,1].
#[derive(Clone, Debug)]
pub struct ConvAttention {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub struct ConvAttentionTrace {
    input: Tensor,
    act1: Tensor,
    pub weights: Tensor,
}

impl ConvAttention {
    pub fn new(m: usize, hidden: usize, k: usize, rng: &mut ChaCha20Rng) -> Self {
        ConvAttention {
            conv1: Conv2d::new(m, hidden, 3, 1, rng),
            conv2: Conv2d::new(hidden, k, 3, 1, rng),
        }
    }

    pub fn forward(&self, maps: &Tensor) -> ConvAttentionTrace {
        let act1 = elu(&self.conv1.forward(maps));
        let weights = sigmoid(&self.conv2.forward(&act1));
        ConvAttentionTrace {
            input: maps.clone(),
            act1,
            weights,
        }
    }

    /// Accumulate parameter gradients from a gradient on the weight maps.
    /// The input maps come from the frozen side branch, so their gradient
    /// is dropped.
    pub fn backward(&mut self, trace: &ConvAttentionTrace, grad_weights: &Tensor) {
        let g = sigmoid_backward(&trace.weights, grad_weights);
        let g = self.conv2.backward(&trace.act1, &g);
        let g = elu_backward(&trace.act1, &g);
        let _ = self.conv1.backward(&trace.input, &g);
    }
}

impl Params for ConvAttention {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("conv1.w", &self.conv1.w);
        f("conv1.b", &self.conv1.b);
        f("conv2.w", &self.conv2.w);
        f("conv2.b", &self.conv2.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("conv1.w", &mut self.conv1.w);
        f("conv1.b", &mut self.conv1.b);
        f("conv2.w", &mut self.conv2.w);
        f("conv2.b", &mut self.conv2.b);
    }
}

#[derive(Clone, Debug)]
pub struct GradingNet {
    pub kind: GradingKind,
    pub backbone: Backbone,
    pub head: Linear,
    pub attention: Option<ConvAttention>,
    pub downsample: DownsampleKind,
    /// Frozen segmentation branch; absent for the plain classifier.
    pub lesion_net: Option<LesionNet>,
    pub m: usize,
}

pub struct GradingTrace {
    backbone: BackboneTrace,
    feat: Tensor,
    attention: Option<ConvAttentionTrace>,
    cw_weights: Option<Tensor>,
    head_input: Vec<f64>,
    pub probs: Vec<f64>,
    pub maps: Option<ProbMapStack>,
    pub presence: Option<LesionPresenceVector>,
    /// Side-branch trace, kept alive for callers that need the low-res maps.
    pub lesion_trace: Option<LesionNetTrace>,
}

#[derive(Clone, Debug)]
pub struct GradingOutput {
    pub probs: Vec<f64>,
    pub maps: Option<ProbMapStack>,
    pub presence: Option<LesionPresenceVector>,
}

impl GradingNet {
    pub fn new(
        kind: GradingKind,
        backbone_config: &BackboneConfig,
        lesion_net: Option<LesionNet>,
        attention_hidden: usize,
        downsample: DownsampleKind,
        seed: u64,
    ) -> Result<Self> {
        backbone_config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let k = backbone_config.final_channels();
        let m = lesion_net.as_ref().map(|n| n.config.m).unwrap_or(0);
        match kind {
            GradingKind::Plain => {}
            _ => {
                if lesion_net.is_none() {
                    return Err(Error::Config(
                        "this grading model needs a side segmentation branch".into(),
                    ));
                }
            }
        }
        let backbone = Backbone::new(backbone_config, &mut rng)?;
        let head_in = match kind {
            GradingKind::LesionConcat => k + m,
            _ => k,
        };
        let head = Linear::new(head_in, 5, &mut rng);
        let attention = match kind {
            GradingKind::MultiTask(AttentionMode::Conv) => {
                Some(ConvAttention::new(m, attention_hidden, k, &mut rng))
            }
            _ => None,
        };
        Ok(GradingNet {
            kind,
            backbone,
            head,
            attention,
            downsample,
            lesion_net,
            m,
        })
    }

    /// One forward pass yielding all three task outputs: grade
    /// probabilities, full-resolution lesion maps and the presence vector.
    pub fn forward_trace(&self, image: &FundusImage) -> Result<GradingTrace> {
        let (pyramid, backbone_trace) = self.backbone.forward(image)?;
        let feat = pyramid.stages[4].clone();
        let k = feat.c;

        let (lesion_trace, maps, presence) = match &self.lesion_net {
            Some(net) => {
                let trace = net.forward_trace(image)?;
                let maps = ProbMapStack {
                    maps: trace.maps.clone(),
                };
                let presence = presence_from_maps(&maps)?;
                (Some(trace), Some(maps), Some(presence))
            }
            None => (None, None, None),
        };

        let mut attention = None;
        let mut cw_weights = None;
        let head_input = match self.kind {
            GradingKind::Plain => global_avg_pool(&feat),
            GradingKind::LesionConcat => {
                let mut pooled = global_avg_pool(&feat);
                pooled.extend_from_slice(&presence.as_ref().unwrap().values);
                pooled
            }
            GradingKind::MultiTask(mode) => {
                let sdown = downsample_maps(maps.as_ref().unwrap(), feat.h, self.downsample)?;
                let weights = match mode {
                    AttentionMode::CwMaxPool => {
                        let w = cw_maxpool_weights(&sdown.maps, k);
                        cw_weights = Some(w.clone());
                        w
                    }
                    AttentionMode::Conv => {
                        let tr = self.attention.as_ref().unwrap().forward(&sdown.maps);
                        let w = tr.weights.clone();
                        attention = Some(tr);
                        w
                    }
                };
                global_avg_pool(&feat.hadamard(&weights))
            }
        };
        let logits = self.head.forward(&head_input);
        let probs = softmax(&logits);
        Ok(GradingTrace {
            backbone: backbone_trace,
            feat,
            attention,
            cw_weights,
            head_input,
            probs,
            maps,
            presence,
            lesion_trace,
        })
    }

    pub fn fuse_and_grade(&self, image: &FundusImage) -> Result<GradingOutput> {
        let trace = self.forward_trace(image)?;
        Ok(GradingOutput {
            probs: trace.probs,
            maps: trace.maps,
            presence: trace.presence,
        })
    }

    /// Backward from a gradient on the logits (for softmax + cross-entropy
    /// that is `probs - onehot`). The side branch stays frozen.
    pub fn backward(&mut self, trace: &GradingTrace, grad_logits: &[f64]) {
        let g = self.head.backward(&trace.head_input, grad_logits);
        let feat = &trace.feat;
        let k = feat.c;
        let gfeat = match self.kind {
            GradingKind::Plain => global_avg_pool_backward(&g, feat.h, feat.w),
            GradingKind::LesionConcat => {
                // presence part is frozen side-branch output
                global_avg_pool_backward(&g[..k], feat.h, feat.w)
            }
            GradingKind::MultiTask(mode) => {
                let gfused = global_avg_pool_backward(&g, feat.h, feat.w);
                let weights = match mode {
                    AttentionMode::CwMaxPool => trace.cw_weights.as_ref().unwrap(),
                    AttentionMode::Conv => &trace.attention.as_ref().unwrap().weights,
                };
                if let (AttentionMode::Conv, Some(att)) = (mode, self.attention.as_mut()) {
                    let gw = gfused.hadamard(feat);
                    att.backward(trace.attention.as_ref().unwrap(), &gw);
                }
                gfused.hadamard(weights)
            }
        };
        let stage_grads = vec![None, None, None, None, Some(gfeat)];
        let _ = self.backbone.backward(&trace.backbone, stage_grads);
    }
}

/// Only the main branch and attention train; the side branch is excluded
/// here and checkpointed separately.
impl Params for GradingNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.backbone.visit(&mut |n, p| f(&format!("backbone.{n}"), p));
        f("head.w", &self.head.w);
        f("head.b", &self.head.b);
        if let Some(att) = &self.attention {
            att.visit(&mut |n, p| f(&format!("attention.{n}"), p));
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone
            .visit_mut(&mut |n, p| f(&format!("backbone.{n}"), p));
        f("head.w", &mut self.head.w);
        f("head.b", &mut self.head.b);
        if let Some(att) = &mut self.attention {
            att.visit_mut(&mut |n, p| f(&format!("attention.{n}"), p));
        }
    }
}

/// GAP features concatenated with the presence vector, through a
/// (k+m) x 5 head.
pub fn lesion_concat_forward(
    head: &Linear,
    feat: &Tensor,
    presence: &LesionPresenceVector,
) -> Result<Vec<f64>> {
    let mut pooled = global_avg_pool(feat);
    pooled.extend_from_slice(&presence.values);
    if pooled.len() != head.in_dim {
        return Err(Error::Shape(format!(
            "head expects {} inputs, got {}",
            head.in_dim,
            pooled.len()
        )));
    }
    Ok(softmax(&head.forward(&pooled)))
}

/// Argmax grade; ties break toward the lower grade.
pub fn predict_grade(probabilities: &[f64]) -> Result<DRGrade> {
    if probabilities.len() != 5 {
        return Err(Error::Shape("grade probabilities must have 5 entries".into()));
    }
    let mut best = 0usize;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[best] {
            best = i;
        }
    }
    DRGrade::new(best as u8)
}
