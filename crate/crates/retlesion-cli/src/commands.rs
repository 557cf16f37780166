//! The four subcommand implementations.

use crate::dataio::{assign_splits, load_dataset, LoadedDataset};
use crate::imageio::{crop, pad_to_stride, read_rgb, write_gray, write_rgb};
use crate::overlay::render_overlay;
use crate::runconfig::{RunConfig, Task};
use anyhow::{bail, Context, Result};
use retlesion::ingest::{synth_generate, write_manifest, write_masks, SynthConfig};
use retlesion::metrics::{image_f1, pixel_f1, quadratic_weighted_kappa};
use retlesion::nn::checkpoint::{
    load_grading_net, load_lesion_net, save_grading_net, save_lesion_net,
};
use retlesion::nn::lesion_net::LesionNet;
use retlesion::nn::multitask::{predict_grade, GradingNet};
use retlesion::train::runner::{
    train_grading, train_segmentation, validate_grading, write_log, DataSplits, Sample,
};
use retlesion::types::{
    presence_from_maps, threshold_maps, DatasetRecord, FundusImage, LesionMaskStack,
    LesionPresenceVector, LesionVocabulary, ProbMapStack, Split, LESION_NAMES,
};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Create `dir`, refusing to reuse a non-empty one unless forced.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .with_context(|| format!("cannot inspect {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            );
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(())
}

pub fn load_synth_config(
    config_path: Option<&Path>,
    seed: Option<u64>,
    side: Option<usize>,
) -> Result<SynthConfig> {
    let mut config = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            serde_json::from_str::<SynthConfig>(&text)
                .with_context(|| format!("invalid synth config {}", p.display()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(s) = side {
        config.image_side = s;
    }
    config.validate()?;
    Ok(config)
}

pub fn cmd_synth(config: &SynthConfig, n: usize, out: &Path) -> Result<()> {
    let images_dir = out.join("images");
    let masks_dir = out.join("masks");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&masks_dir)?;

    let samples = synth_generate(config, n)?;
    let vocab = LesionVocabulary::default();
    let ids: Vec<String> = (0..n).map(|i| format!("synth_{i:05}")).collect();
    let splits = assign_splits(&ids, config.seed);
    let mut records = Vec::with_capacity(n);
    for ((id, sample), split) in ids.iter().zip(&samples).zip(&splits) {
        write_rgb(&images_dir.join(format!("{id}.png")), &sample.image.pixels)?;
        write_masks(&sample.masks, &masks_dir, id, &vocab)?;
        records.push(DatasetRecord {
            image_id: id.clone(),
            image: PathBuf::from(format!("images/{id}.png")),
            masks_dir: Some(PathBuf::from("masks")),
            annotations: None,
            grade: sample.grade.value(),
            split: *split,
        });
    }
    write_manifest(&out.join("manifest.jsonl"), &records)?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn dataset_splits(data: LoadedDataset) -> DataSplits {
    DataSplits {
        train: data.train,
        val: data.val,
    }
}

pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let data = load_dataset(&config.dataset_dir)?;
    std::fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("cannot create {}", config.out_dir.display()))?;
    match config.task {
        Task::Segment => {
            let result = train_segmentation(
                &config.lesion_net_config(),
                &dataset_splits(data),
                &config.train,
            )?;
            save_lesion_net(&config.out_dir.join("best.ckpt.json"), &result.best)?;
            save_lesion_net(&config.out_dir.join("final.ckpt.json"), &result.final_net)?;
            write_log(&config.out_dir.join("train_log.jsonl"), &result.log)?;
            println!("best validation mean pixel F1: {:.4}", result.best_score);
        }
        Task::Grade => {
            let side = match &config.lesion_checkpoint {
                Some(p) => Some(load_lesion_net(p)?),
                None => None,
            };
            let net = GradingNet::new(
                config.model.kind(),
                &config.backbone(),
                side,
                config.attention_hidden,
                config.downsample,
                config.train.seed,
            )?;
            let result = train_grading(net, &dataset_splits(data), &config.train)?;
            save_grading_net(&config.out_dir.join("best.ckpt.json"), &result.best)?;
            save_grading_net(&config.out_dir.join("final.ckpt.json"), &result.final_net)?;
            write_log(&config.out_dir.join("train_log.jsonl"), &result.log)?;
            println!("best validation kappa: {:.4}", result.best_score);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seg_f1_per_lesion: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seg_f1_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clf_f1_per_lesion: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clf_f1_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

fn presence_binary(masks: &LesionMaskStack) -> LesionPresenceVector {
    let maps = ProbMapStack {
        maps: masks.masks.clone(),
    };
    presence_from_maps(&maps).expect("masks are non-empty")
}

fn seg_metrics(
    report: &mut EvalReport,
    pred_masks: &[LesionMaskStack],
    truth: &[Sample],
    tau: f64,
) -> Result<()> {
    let truth_masks: Vec<LesionMaskStack> = truth.iter().map(|s| s.masks.clone()).collect();
    let pf1 = pixel_f1(pred_masks, &truth_masks)?;
    let pred_presence: Vec<LesionPresenceVector> =
        pred_masks.iter().map(presence_binary).collect();
    let truth_presence: Vec<LesionPresenceVector> =
        truth_masks.iter().map(presence_binary).collect();
    let if1 = image_f1(&pred_presence, &truth_presence)?;
    let _ = tau;
    report.seg_f1_per_lesion = Some(pf1.per_lesion);
    report.seg_f1_mean = Some(pf1.mean);
    report.clf_f1_per_lesion = Some(if1.per_lesion);
    report.clf_f1_mean = Some(if1.mean);
    Ok(())
}

/// Peek at a checkpoint's kind tag without loading the weights.
pub fn checkpoint_kind(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("invalid checkpoint {}", path.display()))?;
    match value.get("kind").and_then(|k| k.as_str()) {
        Some(kind) => Ok(kind.to_string()),
        None => bail!("checkpoint {} has no kind tag", path.display()),
    }
}

pub fn cmd_eval(
    config: &RunConfig,
    checkpoint: &Path,
    split: Split,
    oracle: bool,
) -> Result<()> {
    let data = load_dataset(&config.dataset_dir)?;
    let samples = match split {
        Split::Train => data.train,
        Split::Val => data.val,
        Split::Test => data.test,
    };
    if samples.is_empty() {
        bail!("split has no samples");
    }
    let split_name = match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    };
    let mut report = EvalReport {
        split: split_name.to_string(),
        seg_f1_per_lesion: None,
        seg_f1_mean: None,
        clf_f1_per_lesion: None,
        clf_f1_mean: None,
        kappa: None,
    };
    let tau = config.train.tau;

    if oracle {
        // ground truth against itself: fixes the report schema and the
        // trivial upper bound
        let truth_masks: Vec<LesionMaskStack> = samples.iter().map(|s| s.masks.clone()).collect();
        seg_metrics(&mut report, &truth_masks, &samples, tau)?;
        let grades: Vec<_> = samples.iter().map(|s| s.grade).collect();
        report.kappa = Some(quadratic_weighted_kappa(&grades, &grades)?);
    } else {
        match checkpoint_kind(checkpoint)?.as_str() {
            "lesion_net" => {
                let net = load_lesion_net(checkpoint)?;
                let mut pred = Vec::with_capacity(samples.len());
                for s in &samples {
                    pred.push(threshold_maps(&net.forward(&s.image)?, tau)?);
                }
                seg_metrics(&mut report, &pred, &samples, tau)?;
            }
            "grading" => {
                let net = load_grading_net(checkpoint)?;
                report.kappa = Some(validate_grading(&net, &samples)?);
                if net.lesion_net.is_some() {
                    let mut pred = Vec::with_capacity(samples.len());
                    for s in &samples {
                        let out = net.fuse_and_grade(&s.image)?;
                        pred.push(threshold_maps(out.maps.as_ref().unwrap(), tau)?);
                    }
                    seg_metrics(&mut report, &pred, &samples, tau)?;
                }
            }
            other => bail!("unsupported checkpoint kind {other}"),
        }
    }

    std::fs::create_dir_all(&config.out_dir)?;
    let path = config.out_dir.join(format!("eval_{split_name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("cannot write {}", path.display()))?;
    if let Some(m) = report.seg_f1_mean {
        println!("mean pixel F1: {m:.4}");
    }
    if let Some(m) = report.clf_f1_mean {
        println!("mean image F1: {m:.4}");
    }
    if let Some(k) = report.kappa {
        println!("kappa: {k:.4}");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PredictReport {
    presence: Vec<LesionProb>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grade: Option<u8>,
    tau: f64,
}

#[derive(Debug, Serialize)]
struct LesionProb {
    lesion: String,
    probability: f64,
}

/// Quantize to the 8-bit grid the PNG files use, so the written maps and
/// the report describe exactly the same values.
fn quantize_maps(maps: &ProbMapStack) -> ProbMapStack {
    ProbMapStack {
        maps: maps.maps.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0),
    }
}

pub fn cmd_predict(
    checkpoint: &Path,
    image_path: &Path,
    out: &Path,
    tau: f64,
    allow_resize: bool,
) -> Result<()> {
    let raw = read_rgb(image_path)?;
    let (padded, (orig_h, orig_w)) = pad_to_stride(&raw);
    if (padded.h, padded.w) != (orig_h, orig_w) && !allow_resize {
        bail!(
            "image is {orig_w}x{orig_h}; sides must be equal multiples of 32 \
             (pass --allow-resize to zero-pad)"
        );
    }
    let image = FundusImage::new(padded)?;

    enum Loaded {
        Seg(Box<LesionNet>),
        Grade(Box<GradingNet>),
    }
    let model = match checkpoint_kind(checkpoint)?.as_str() {
        "lesion_net" => Loaded::Seg(Box::new(load_lesion_net(checkpoint)?)),
        "grading" => {
            let net = load_grading_net(checkpoint)?;
            if net.lesion_net.is_none() {
                bail!("grading checkpoint has no side branch; nothing to segment");
            }
            Loaded::Grade(Box::new(net))
        }
        other => bail!("unsupported checkpoint kind {other}"),
    };

    let (maps, grade) = match &model {
        Loaded::Seg(net) => (net.forward(&image)?, None),
        Loaded::Grade(net) => {
            let out = net.fuse_and_grade(&image)?;
            let grade = predict_grade(&out.probs)?;
            (out.maps.unwrap(), Some(grade.value()))
        }
    };
    // crop padding back off so every artifact matches the input size
    let maps = quantize_maps(&ProbMapStack {
        maps: crop(&maps.maps, orig_h, orig_w),
    });
    let masks = threshold_maps(&maps, tau)?;
    let presence = presence_from_maps(&maps)?;

    let maps_dir = out.join("maps");
    let masks_dir = out.join("masks");
    std::fs::create_dir_all(&maps_dir)?;
    std::fs::create_dir_all(&masks_dir)?;
    for (ch, name) in LESION_NAMES.iter().enumerate() {
        write_gray(&maps_dir.join(format!("{name}.png")), &maps.maps, ch)?;
        write_gray(&masks_dir.join(format!("{name}.png")), &masks.masks, ch)?;
    }
    let overlay = render_overlay(&crop(&raw, orig_h, orig_w), &masks);
    write_rgb(&out.join("overlay.png"), &overlay)?;

    let report = PredictReport {
        presence: LESION_NAMES
            .iter()
            .zip(&presence.values)
            .map(|(n, &p)| LesionProb {
                lesion: n.to_string(),
                probability: p,
            })
            .collect(),
        grade,
        tau,
    };
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    for lp in &report.presence {
        println!("{}: {:.3}", lp.lesion, lp.probability);
    }
    if let Some(g) = report.grade {
        println!("predicted grade: DR{g}");
    }
    Ok(())
}
