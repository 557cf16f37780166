//! The segmentation family: contracting path plus a variable-length
//! expansive path. Variant X stops the expansive path at stride X, so the
//! head output is upsampled by a parameter-free bilinear factor of X.
//!
//! Each merge step is: 1x1 conv (to the skip stage's width) -> bilinear x2
//! -> channel concatenation with the skip. The head is a 1x1 conv to m
//! channels followed by an element-wise sigmoid, applied before the final
//! upsample so interpolation stays inside [0,1].

use crate::error::{Error, Result};
use crate::nn::backbone::{Backbone, BackboneConfig, BackboneTrace};
use crate::nn::layers::{
    resize_bilinear, resize_bilinear_backward, sigmoid, sigmoid_backward, Conv2d, Param, Params,
};
use crate::tensor::Tensor;
use crate::types::{presence_from_maps, FundusImage, LesionPresenceVector, ProbMapStack};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub const VARIANTS: [u32; 5] = [2, 4, 8, 16, 32];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LesionNetConfig {
    /// X in {2,4,8,16,32}; the expansive path stops at stride X.
    pub variant: u32,
    pub backbone: BackboneConfig,
    /// Lesion channel count.
    pub m: usize,
}

impl Default for LesionNetConfig {
    fn default() -> Self {
        LesionNetConfig {
            variant: 16,
            backbone: BackboneConfig::default(),
            m: 8,
        }
    }
}

impl LesionNetConfig {
    pub fn merge_steps(&self) -> usize {
        (32 / self.variant).ilog2() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !VARIANTS.contains(&self.variant) {
            return Err(Error::Config(format!(
                "variant {} not in {{2,4,8,16,32}}",
                self.variant
            )));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        self.backbone.validate()
    }
}

#[derive(Clone, Debug)]
pub struct LesionNet {
    pub config: LesionNetConfig,
    pub backbone: Backbone,
    merges: Vec<Conv2d>,
    head: Conv2d,
}

/// Cached activations for one forward pass.
pub struct LesionNetTrace {
    pub backbone: BackboneTrace,
    /// Per merge step: (conv input, conv output, upsampled, merged).
    merge_io: Vec<(Tensor, Tensor, Tensor, Tensor)>,
    head_input: Tensor,
    /// Low-resolution probabilities (sigmoid output, before final upsample).
    pub low_res: Tensor,
    /// Full-resolution probability maps.
    pub maps: Tensor,
}

/// One expansive-path step: `current` -> 1x1 conv -> bilinear x2 -> concat
/// with `skip`. Returns (conv output, upsampled, merged); the merged tensor
/// has the skip's side and twice its channels.
pub fn merge_step(conv: &Conv2d, current: &Tensor, skip: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    if skip.h != 2 * current.h || skip.w != 2 * current.w {
        return Err(Error::Shape(format!(
            "skip side {}x{} must be twice the current side {}x{}",
            skip.h, skip.w, current.h, current.w
        )));
    }
    if conv.out_c != skip.c {
        return Err(Error::Shape(format!(
            "merge conv output width {} must match skip channels {}",
            conv.out_c, skip.c
        )));
    }
    let conv_out = conv.forward(current);
    let upsampled = resize_bilinear(&conv_out, skip.h, skip.w);
    let merged = Tensor::concat_channels(&upsampled, skip);
    Ok((conv_out, upsampled, merged))
}

pub fn build_lesion_net(config: &LesionNetConfig, seed: u64) -> Result<LesionNet> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let backbone = Backbone::new(&config.backbone, &mut rng)?;
    let ch = &config.backbone.stage_channels;
    let mut merges = Vec::new();
    let mut cur_c = ch[4];
    for step in 0..config.merge_steps() {
        let skip_c = ch[3 - step];
        merges.push(Conv2d::new(cur_c, skip_c, 1, 1, &mut rng));
        cur_c = 2 * skip_c;
    }
    let head = Conv2d::new(cur_c, config.m, 1, 1, &mut rng);
    Ok(LesionNet {
        config: config.clone(),
        backbone,
        merges,
        head,
    })
}

impl LesionNet {
    pub fn forward_trace(&self, image: &FundusImage) -> Result<LesionNetTrace> {
        Backbone::check_side(image.side())?;
        let (pyramid, backbone_trace) = self.backbone.forward(image)?;
        let mut current = pyramid.stages[4].clone();
        let mut merge_io = Vec::with_capacity(self.merges.len());
        for (step, conv) in self.merges.iter().enumerate() {
            let skip = &pyramid.stages[3 - step];
            let (conv_out, upsampled, merged) = merge_step(conv, &current, skip)?;
            merge_io.push((current, conv_out, upsampled, merged.clone()));
            current = merged;
        }
        let logits = self.head.forward(&current);
        let low_res = sigmoid(&logits);
        let side = image.side();
        let maps = resize_bilinear(&low_res, side, side);
        Ok(LesionNetTrace {
            backbone: backbone_trace,
            merge_io,
            head_input: current,
            low_res,
            maps,
        })
    }

    /// Probabilistic segmentation maps at full resolution (s x s x m).
    pub fn forward(&self, image: &FundusImage) -> Result<ProbMapStack> {
        Ok(ProbMapStack {
            maps: self.forward_trace(image)?.maps,
        })
    }

    /// Image-level lesion probabilities; by contract bit-equal to
    /// `presence_from_maps(self.forward(image))`.
    pub fn classify(&self, image: &FundusImage) -> Result<LesionPresenceVector> {
        presence_from_maps(&self.forward(image)?)
    }

    /// Backpropagate a gradient on the full-resolution maps, accumulating
    /// parameter gradients. Returns the gradient on the input image.
    pub fn backward(&mut self, trace: &LesionNetTrace, grad_maps: &Tensor) -> Tensor {
        let low = &trace.low_res;
        let mut g = resize_bilinear_backward(grad_maps, low.h, low.w);
        g = sigmoid_backward(low, &g);
        g = self.head.backward(&trace.head_input, &g);
        let mut stage_grads: Vec<Option<Tensor>> = vec![None, None, None, None, None];
        for (step, conv) in self.merges.iter_mut().enumerate().rev() {
            let (conv_input, conv_out, upsampled, _) = &trace.merge_io[step];
            let (g_up, g_skip) = g.split_channels(upsampled.c);
            let skip_idx = 3 - step;
            match &mut stage_grads[skip_idx] {
                Some(t) => t.add_assign(&g_skip),
                slot => *slot = Some(g_skip),
            }
            let g_conv_out = resize_bilinear_backward(&g_up, conv_out.h, conv_out.w);
            g = conv.backward(conv_input, &g_conv_out);
        }
        match &mut stage_grads[4] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
        self.backbone.backward(&trace.backbone, stage_grads)
    }
}

impl Params for LesionNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.backbone.visit(&mut |name, p| f(&format!("backbone.{name}"), p));
        for (i, conv) in self.merges.iter().enumerate() {
            f(&format!("merge{i}.w"), &conv.w);
            f(&format!("merge{i}.b"), &conv.b);
        }
        f("head.w", &self.head.w);
        f("head.b", &self.head.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone
            .visit_mut(&mut |name, p| f(&format!("backbone.{name}"), p));
        for (i, conv) in self.merges.iter_mut().enumerate() {
            f(&format!("merge{i}.w"), &mut conv.w);
            f(&format!("merge{i}.b"), &mut conv.b);
        }
        f("head.w", &mut self.head.w);
        f("head.b", &mut self.head.b);
    }
}

/// Zero the head so every output probability is exactly sigmoid(0) = 0.5.
/// Test/diagnostic helper.
pub fn zero_head(net: &mut LesionNet) {
    net.head.w.data.iter_mut().for_each(|v| *v = 0.0);
    net.head.b.data.iter_mut().for_each(|v| *v = 0.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::param_count;
    use rand::Rng;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            stage_channels: [2, 3, 4, 5, 6],
        }
    }

    fn image(side: usize, seed: u64) -> FundusImage {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(side, side, 3);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        FundusImage::new(t).unwrap()
    }

    #[test]
    fn variant_32_has_no_merges() {
        let cfg = LesionNetConfig {
            variant: 32,
            backbone: tiny_backbone(),
            m: 8,
        };
        let net = build_lesion_net(&cfg, 0).unwrap();
        assert_eq!(net.merges.len(), 0);
        assert_eq!(net.head.in_c, 6);
    }

    #[test]
    fn variant_2_uses_all_four_skips() {
        let cfg = LesionNetConfig {
            variant: 2,
            backbone: tiny_backbone(),
            m: 8,
        };
        let net = build_lesion_net(&cfg, 0).unwrap();
        assert_eq!(net.merges.len(), 4);
        // last merge consumes stage 0 (width 2), head sees 2*2 channels
        assert_eq!(net.head.in_c, 4);
    }

    #[test]
    fn invalid_variant_rejected() {
        let cfg = LesionNetConfig {
            variant: 7,
            backbone: tiny_backbone(),
            m: 8,
        };
        assert!(build_lesion_net(&cfg, 0).is_err());
    }

    #[test]
    fn merge_step_shape_example() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let conv = Conv2d::new(256, 128, 1, 1, &mut rng);
        let current = Tensor::zeros(4, 4, 256);
        let skip = Tensor::zeros(8, 8, 128);
        let (_, _, merged) = merge_step(&conv, &current, &skip).unwrap();
        assert_eq!(merged.shape(), (8, 8, 256));
    }

    #[test]
    fn merge_step_constant_upsample() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(2, 3, 1, 1, &mut rng);
        conv.b.data = vec![0.0; 3];
        let current = Tensor::filled(2, 2, 2, 1.0);
        let skip = Tensor::zeros(4, 4, 3);
        let (conv_out, upsampled, _) = merge_step(&conv, &current, &skip).unwrap();
        // bilinear is exact on constants
        for ch in 0..3 {
            let v = conv_out.at(0, 0, ch);
            for y in 0..4 {
                for x in 0..4 {
                    assert!((upsampled.at(y, x, ch) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn merge_step_rejects_equal_sides() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let conv = Conv2d::new(4, 4, 1, 1, &mut rng);
        let current = Tensor::zeros(4, 4, 4);
        let skip = Tensor::zeros(4, 4, 4);
        assert!(merge_step(&conv, &current, &skip).is_err());
    }

    #[test]
    fn all_variants_map_to_full_resolution() {
        for &variant in &VARIANTS {
            let cfg = LesionNetConfig {
                variant,
                backbone: tiny_backbone(),
                m: 8,
            };
            let net = build_lesion_net(&cfg, 1).unwrap();
            for side in [32usize, 64] {
                let maps = net.forward(&image(side, 9)).unwrap();
                assert_eq!(maps.maps.shape(), (side, side, 8), "variant {variant}");
                assert!(maps.maps.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn param_count_increases_with_expansive_path() {
        // holds for doubling stage widths (the merge conv into a wide skip
        // outweighs the narrower head)
        let mut prev = 0;
        for &variant in &[32u32, 16, 8, 4, 2] {
            let cfg = LesionNetConfig {
                variant,
                backbone: BackboneConfig {
                    stage_channels: [4, 8, 16, 32, 64],
                },
                m: 8,
            };
            let net = build_lesion_net(&cfg, 0).unwrap();
            let n = param_count(&net);
            assert!(n > prev, "variant {variant}: {n} <= {prev}");
            prev = n;
        }
    }

    #[test]
    fn zero_head_outputs_exactly_half() {
        let cfg = LesionNetConfig {
            variant: 16,
            backbone: tiny_backbone(),
            m: 8,
        };
        let mut net = build_lesion_net(&cfg, 0).unwrap();
        zero_head(&mut net);
        let maps = net.forward(&image(32, 3)).unwrap();
        assert!(maps.maps.data.iter().all(|&v| v == 0.5));
        let presence = net.classify(&image(32, 3)).unwrap();
        assert!(presence.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn classify_equals_composition() {
        let cfg = LesionNetConfig {
            variant: 8,
            backbone: tiny_backbone(),
            m: 8,
        };
        let net = build_lesion_net(&cfg, 2).unwrap();
        for seed in 0..5 {
            let img = image(32, seed);
            let a = net.classify(&img).unwrap();
            let b = presence_from_maps(&net.forward(&img).unwrap()).unwrap();
            assert_eq!(a.values, b.values);
        }
    }
}
