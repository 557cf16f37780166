//! Scratch harness for sizing the directional checks: trains the dice and
//! dual segmentation arms plus the plain and attention grading arms on the
//! small synthetic benchmark and prints per-seed scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use retlesion::ingest::{synth_generate, SynthConfig};
use retlesion::losses::{dice_seg_loss_grad, dual_loss_grad, DualLossConfig};
use retlesion::metrics::{image_f1, pixel_f1};
use retlesion::nn::backbone::BackboneConfig;
use retlesion::nn::lesion_net::{build_lesion_net, LesionNet, LesionNetConfig};
use retlesion::nn::multitask::{AttentionMode, DownsampleKind, GradingKind, GradingNet};
use retlesion::tensor::Tensor;
use retlesion::train::runner::{train_grading, validate_grading, DataSplits, Sample, TrainConfig};
use retlesion::train::sgd::SgdState;
use retlesion::types::{presence_from_maps, threshold_maps, LesionMaskStack, ProbMapStack};

fn train_seg(
    net_cfg: &LesionNetConfig,
    train: &[Sample],
    phases: &[(u32, f64, bool)],
    seed: u64,
) -> LesionNet {
    let mut net = build_lesion_net(net_cfg, seed).unwrap();
    let mut sgd = SgdState::new(&net);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xBEEF);
    let loss_cfg = DualLossConfig::default();
    for &(batches, lr, dual) in phases {
    for _ in 0..batches {
        let mut traces = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..4 {
            let s = &train[rng.gen_range(0..train.len())];
            traces.push(net.forward_trace(&s.image).unwrap());
            targets.push(s.masks.masks.clone());
        }
        let maps: Vec<&Tensor> = traces.iter().map(|t| &t.maps).collect();
        let trefs: Vec<&Tensor> = targets.iter().collect();
        let grads = if dual {
            dual_loss_grad(&maps, &trefs, &loss_cfg).unwrap().1
        } else {
            dice_seg_loss_grad(&maps, &trefs, loss_cfg.epsilon).unwrap().1
        };
        for (trace, g) in traces.iter().zip(&grads) {
            net.backward(trace, g);
        }
        sgd.step(&mut net, lr, 0.9, 0.0).unwrap();
    }
    }
    net
}

fn seg_scores(net: &LesionNet, held: &[Sample]) -> (f64, f64) {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for s in held {
        pred.push(threshold_maps(&net.forward(&s.image).unwrap(), 0.5).unwrap());
        truth.push(s.masks.clone());
    }
    let bp = |m: &LesionMaskStack| {
        presence_from_maps(&ProbMapStack { maps: m.masks.clone() }).unwrap()
    };
    let pp: Vec<_> = pred.iter().map(bp).collect();
    let tp: Vec<_> = truth.iter().map(bp).collect();
    (
        pixel_f1(&pred, &truth).unwrap().mean,
        image_f1(&pp, &tp).unwrap().mean,
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seg_batches: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(600);
    let grade_batches: u32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let grade_lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let seg_lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.01);

    let config = SynthConfig { image_side: 64, seed: 80, ..SynthConfig::default() };
    let all: Vec<Sample> = synth_generate(&config, 210)
        .unwrap()
        .into_iter()
        .map(|s| Sample { image: s.image, masks: s.masks, grade: s.grade })
        .collect();
    let (train, rest) = all.split_at(130);
    let (val, test) = rest.split_at(20);
    let net_cfg = LesionNetConfig {
        variant: 16,
        backbone: BackboneConfig { stage_channels: [6, 12, 24, 48, 96] },
        m: 8,
    };
    let t0 = std::time::Instant::now();
    // one strong shared side branch for the grading comparison
    let side = train_seg(
        &net_cfg,
        train,
        &[(900, 0.01, false), (300, 0.002, true)],
        9,
    );
    let (sp, si) = seg_scores(&side, test);
    println!("side net: pix {sp:.3} img {si:.3} ({:.0}s)", t0.elapsed().as_secs_f64());
    for seed in [1u64, 2, 3] {
        let p2 = seg_batches / 3;
        let d = train_seg(&net_cfg, train, &[(seg_batches, seg_lr, false), (p2, seg_lr * 0.2, false)], seed);
        let u = train_seg(&net_cfg, train, &[(seg_batches, seg_lr, false), (p2, seg_lr * 0.2, true)], seed);
        let (dp, di) = seg_scores(&d, test);
        let (up, ui) = seg_scores(&u, test);
        println!(
            "seed {seed}: dice pix {dp:.3} img {di:.3} | dual pix {up:.3} img {ui:.3} ({:.0}s)",
            t0.elapsed().as_secs_f64()
        );

        let train_cfg = TrainConfig {
            lr0: grade_lr,
            validate_every: 50,
            batch_size: 4,
            max_batches: grade_batches,
            seed,
            augment: retlesion::train::augment::AugmentConfig::disabled(),
            ..TrainConfig::default()
        };
        let splits = DataSplits { train: train.to_vec(), val: val.to_vec() };
        let bb = BackboneConfig { stage_channels: [6, 12, 24, 48, 96] };
        let plain = GradingNet::new(GradingKind::Plain, &bb, None, 0, DownsampleKind::MaxPool, seed)
            .unwrap();
        let plain = train_grading(plain, &splits, &train_cfg).unwrap().best;
        let pk = validate_grading(&plain, test).unwrap();
        let attn = GradingNet::new(
            GradingKind::MultiTask(AttentionMode::Conv),
            &bb,
            Some(side.clone()),
            16,
            DownsampleKind::MaxPool,
            seed,
        )
        .unwrap();
        let attn = train_grading(attn, &splits, &train_cfg).unwrap().best;
        let ak = validate_grading(&attn, test).unwrap();
        println!(
            "seed {seed}: kappa plain {pk:.3} attn {ak:.3} ({:.0}s)",
            t0.elapsed().as_secs_f64()
        );
    }
}
