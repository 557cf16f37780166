//! Scratch harness for sizing the synthetic benchmark: prints loss and
//! held-out scores over training for a few learning rates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use retlesion::ingest::{synth_generate, SynthConfig};
use retlesion::losses::{dual_loss_grad, DualLossConfig};
use retlesion::metrics::{image_f1, pixel_f1};
use retlesion::nn::backbone::BackboneConfig;
use retlesion::nn::lesion_net::{build_lesion_net, LesionNetConfig};
use retlesion::tensor::Tensor;
use retlesion::train::runner::Sample;
use retlesion::train::sgd::SgdState;
use retlesion::types::{presence_from_maps, threshold_maps, ProbMapStack};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let momentum: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.9);
    let batches: u32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(250);
    let n_train: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(200);
    let decay_at: u32 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(u32::MAX);
    let lr2: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(lr * 0.1);

    let config = SynthConfig { seed: 70, ..SynthConfig::default() };
    let samples: Vec<Sample> = synth_generate(&config, n_train + 50)
        .unwrap()
        .into_iter()
        .map(|s| Sample { image: s.image, masks: s.masks, grade: s.grade })
        .collect();
    let (train, held) = samples.split_at(n_train);

    let net_cfg = LesionNetConfig {
        variant: 16,
        backbone: BackboneConfig { stage_channels: [8, 16, 32, 64, 128] },
        m: 8,
    };
    let mut net = build_lesion_net(&net_cfg, 70).unwrap();
    let mut sgd = SgdState::new(&net);
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let loss_cfg = DualLossConfig::default();
    let batch_size = 4;
    let t0 = std::time::Instant::now();
    for b in 0..batches {
        let mut traces = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..batch_size {
            let s = &train[rng.gen_range(0..train.len())];
            traces.push(net.forward_trace(&s.image).unwrap());
            targets.push(s.masks.masks.clone());
        }
        let maps: Vec<&Tensor> = traces.iter().map(|t| &t.maps).collect();
        let trefs: Vec<&Tensor> = targets.iter().collect();
        let (loss, grads) = dual_loss_grad(&maps, &trefs, &loss_cfg).unwrap();
        for (trace, g) in traces.iter().zip(&grads) {
            net.backward(trace, g);
        }
        if b % 25 == 0 {
            use retlesion::nn::layers::Params;
            let mut gn = 0.0f64;
            let mut pn = 0.0f64;
            net.visit(&mut |_, prm| {
                gn += prm.grad.iter().map(|v| v * v).sum::<f64>();
                pn += prm.data.iter().map(|v| v * v).sum::<f64>();
            });
            let lr0 = traces[0].low_res.data.iter().fold((1.0f64, 0.0f64), |(mn, mx), &v| (mn.min(v), mx.max(v)));
            println!("  gradnorm {:.3e} paramnorm {:.3e} lowres [{:.4},{:.4}]", gn.sqrt(), pn.sqrt(), lr0.0, lr0.1);
        }
        let cur_lr = if b >= decay_at { lr2 } else { lr };
        sgd.step(&mut net, cur_lr, momentum, 0.0).unwrap();
        if b % 25 == 0 || b + 1 == batches {
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            for s in &held[..20] {
                pred.push(threshold_maps(&net.forward(&s.image).unwrap(), 0.5).unwrap());
                truth.push(s.masks.clone());
            }
            let pf1 = pixel_f1(&pred, &truth).unwrap().mean;
            let bp = |m: &retlesion::types::LesionMaskStack| {
                presence_from_maps(&ProbMapStack { maps: m.masks.clone() }).unwrap()
            };
            let pp: Vec<_> = pred.iter().map(bp).collect();
            let tp: Vec<_> = truth.iter().map(bp).collect();
            let if1 = image_f1(&pp, &tp).unwrap().mean;
            let mean_p: f64 = pred.iter().map(|m| m.masks.data.iter().sum::<f64>()).sum::<f64>()
                / pred.iter().map(|m| m.masks.data.len()).sum::<usize>() as f64;
            println!(
                "batch {b:4} loss {loss:.4} pixF1 {pf1:.3} imgF1 {if1:.3} posfrac {mean_p:.4} ({:.1}s)",
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
