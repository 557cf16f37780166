//! Contracting path: five stages of feature maps at strides /2../32.
//!
//! The reference backbone is deliberately small — each stage is a stride-2
//! 3x3 conv and a stride-1 3x3 conv, each followed by a smooth rectifier.
//! Anything honoring the same stage contract (spatial sides halving, final
//! stage carrying the k feature maps) can be plugged in behind it.

use crate::error::{Error, Result};
use crate::nn::layers::{elu, elu_backward, Conv2d, Param, Params};
use crate::tensor::Tensor;
use crate::types::FundusImage;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    /// Channel widths of the five stages; the last one is k.
    pub stage_channels: [usize; 5],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: [16, 32, 64, 128, 256],
        }
    }
}

impl BackboneConfig {
    /// Width of the final stage (the k feature maps fed to grading heads).
    pub fn final_channels(&self) -> usize {
        self.stage_channels[4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        Ok(())
    }
}

/// The five per-stage outputs; stage i has side s/2^(i+1).
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor>,
}

#[derive(Clone, Debug)]
struct Stage {
    conv_a: Conv2d, // stride 2
    conv_b: Conv2d, // stride 1
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stages: Vec<Stage>,
}

/// Per-stage activations cached for the backward pass.
pub struct BackboneTrace {
    /// (input to conv_a, elu(conv_a) output, elu(conv_b) output) per stage.
    stage_io: Vec<(Tensor, Tensor, Tensor)>,
}

impl BackboneTrace {
    pub fn pyramid(&self) -> FeaturePyramid {
        FeaturePyramid {
            stages: self.stage_io.iter().map(|(_, _, out)| out.clone()).collect(),
        }
    }
}

impl Backbone {
    pub fn new(config: &BackboneConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(5);
        let mut in_c = 3;
        for &ch in &config.stage_channels {
            stages.push(Stage {
                conv_a: Conv2d::new(in_c, ch, 3, 2, rng),
                conv_b: Conv2d::new(ch, ch, 3, 1, rng),
            });
            in_c = ch;
        }
        Ok(Backbone {
            config: config.clone(),
            stages,
        })
    }

    pub fn check_side(side: usize) -> Result<()> {
        if side % 32 != 0 || side == 0 {
            return Err(Error::Shape(format!("side {side} not divisible by 32")));
        }
        Ok(())
    }

    pub fn forward(&self, image: &FundusImage) -> Result<(FeaturePyramid, BackboneTrace)> {
        Self::check_side(image.side())?;
        self.forward_tensor(&image.pixels)
    }

    /// Forward on a raw tensor (used by gradient checks on the input).
    pub fn forward_tensor(&self, pixels: &Tensor) -> Result<(FeaturePyramid, BackboneTrace)> {
        let mut stage_io = Vec::with_capacity(5);
        let mut x = pixels.clone();
        for stage in &self.stages {
            let a = elu(&stage.conv_a.forward(&x));
            let b = elu(&stage.conv_b.forward(&a));
            stage_io.push((x, a, b.clone()));
            x = b;
        }
        let trace = BackboneTrace { stage_io };
        Ok((trace.pyramid(), trace))
    }

    /// Backpropagate per-stage output gradients (deepest may come from the
    /// head, shallower ones from skip connections). Returns the gradient
    /// with respect to the input image.
    pub fn backward(
        &mut self,
        trace: &BackboneTrace,
        mut stage_grads: Vec<Option<Tensor>>,
    ) -> Tensor {
        assert_eq!(stage_grads.len(), 5);
        let mut g: Option<Tensor> = None;
        for (i, stage) in self.stages.iter_mut().enumerate().rev() {
            let (input, act_a, act_b) = &trace.stage_io[i];
            let mut gout = match (g.take(), stage_grads[i].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    a
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => Tensor::zeros(act_b.h, act_b.w, act_b.c),
            };
            gout = elu_backward(act_b, &gout);
            let ga = stage.conv_b.backward(act_a, &gout);
            let ga = elu_backward(act_a, &ga);
            g = Some(stage.conv_a.backward(input, &ga));
        }
        g.expect("backbone has stages")
    }
}

impl Params for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (i, s) in self.stages.iter().enumerate() {
            f(&format!("stage{i}.conv_a.w"), &s.conv_a.w);
            f(&format!("stage{i}.conv_a.b"), &s.conv_a.b);
            f(&format!("stage{i}.conv_b.w"), &s.conv_b.w);
            f(&format!("stage{i}.conv_b.b"), &s.conv_b.b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(&format!("stage{i}.conv_a.w"), &mut s.conv_a.w);
            f(&format!("stage{i}.conv_a.b"), &mut s.conv_a.b);
            f(&format!("stage{i}.conv_b.w"), &mut s.conv_b.w);
            f(&format!("stage{i}.conv_b.b"), &mut s.conv_b.b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::param_count;
    use rand::SeedableRng;

    fn image(side: usize) -> FundusImage {
        FundusImage::new(Tensor::filled(side, side, 3, 0.5)).unwrap()
    }

    #[test]
    fn stage_sides_follow_stride_contract() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let bb = Backbone::new(&BackboneConfig::default(), &mut rng).unwrap();
        let (pyr, _) = bb.forward(&image(128)).unwrap();
        let sides: Vec<usize> = pyr.stages.iter().map(|t| t.h).collect();
        assert_eq!(sides, vec![64, 32, 16, 8, 4]);
        let chans: Vec<usize> = pyr.stages.iter().map(|t| t.c).collect();
        assert_eq!(chans, vec![16, 32, 64, 128, 256]);
    }

    #[test]
    fn paper_scale_input_gives_28x28_deepest() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let cfg = BackboneConfig {
            stage_channels: [4, 4, 4, 4, 8],
        };
        let bb = Backbone::new(&cfg, &mut rng).unwrap();
        let (pyr, _) = bb.forward(&image(896)).unwrap();
        assert_eq!(pyr.stages[4].h, 28);
    }

    #[test]
    fn non_multiple_of_32_rejected() {
        assert!(Backbone::check_side(100).is_err());
    }

    #[test]
    fn backbone_param_count_is_hand_checkable() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let cfg = BackboneConfig {
            stage_channels: [2, 2, 2, 2, 2],
        };
        let bb = Backbone::new(&cfg, &mut rng).unwrap();
        // stage0: 3x3x3x2+2 + 3x3x2x2+2 = 56 + 38 = 94; stages 1-4: 38+38=76
        assert_eq!(param_count(&bb), 94 + 4 * 76);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let cfg = BackboneConfig {
            stage_channels: [2, 2, 3, 3, 4],
        };
        let mut bb = Backbone::new(&cfg, &mut rng).unwrap();
        let mut x = Tensor::zeros(32, 32, 3);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = 0.5 + 0.4 * ((i as f64) * 0.13).sin();
        }
        // scalar loss: 0.5 * sum of squares over all pyramid stages
        let loss_of = |bb: &Backbone, x: &Tensor| -> f64 {
            let (pyr, _) = bb.forward_tensor(x).unwrap();
            pyr.stages
                .iter()
                .flat_map(|t| t.data.iter())
                .map(|v| 0.5 * v * v)
                .sum()
        };
        let (pyr, trace) = bb.forward_tensor(&x).unwrap();
        let grads: Vec<Option<Tensor>> = pyr.stages.iter().map(|t| Some(t.clone())).collect();
        let gin = bb.backward(&trace, grads);
        let step = 1e-3;
        let mut checked = 0;
        for i in (0..x.data.len()).step_by(97) {
            let mut xp = x.clone();
            xp.data[i] += step;
            let mut xm = x.clone();
            xm.data[i] -= step;
            let fd = (loss_of(&bb, &xp) - loss_of(&bb, &xm)) / (2.0 * step);
            let rel = (fd - gin.data[i]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "x[{i}]: fd={fd} analytic={}", gin.data[i]);
            checked += 1;
        }
        assert!(checked > 10);
    }
}
