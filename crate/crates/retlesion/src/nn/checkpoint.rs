//! Versioned JSON checkpoints. Parameters are stored as an ordered list of
//! named, shaped f64 blocks so that saving and re-loading round-trips
//! bit-identically and independently of map iteration order.

use crate::error::{Error, Result};
use crate::nn::backbone::BackboneConfig;
use crate::nn::layers::Params;
use crate::nn::lesion_net::{build_lesion_net, LesionNet, LesionNetConfig};
use crate::nn::multitask::{DownsampleKind, GradingKind, GradingNet};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

/// Everything needed to rebuild a grading model before loading weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradingCheckpointConfig {
    pub kind: GradingKind,
    pub backbone: BackboneConfig,
    pub downsample: DownsampleKind,
    pub attention_hidden: usize,
    pub lesion: Option<LesionNetConfig>,
}

pub fn collect_params(model: &dyn Params) -> Vec<ParamEntry> {
    let mut out = Vec::new();
    model.visit(&mut |name, p| {
        out.push(ParamEntry {
            name: name.to_string(),
            shape: p.shape.clone(),
            data: p.data.clone(),
        })
    });
    out
}

/// Write saved blocks back into a freshly built model, in visit order.
/// Names and shapes must line up exactly.
pub fn apply_params(model: &mut dyn Params, entries: &[ParamEntry]) -> Result<()> {
    let mut i = 0usize;
    let mut err: Option<Error> = None;
    model.visit_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        let Some(e) = entries.get(i) else {
            err = Some(Error::Checkpoint(format!(
                "checkpoint is missing parameter {name}"
            )));
            return;
        };
        if e.name != name || e.shape != p.shape || e.data.len() != p.data.len() {
            err = Some(Error::Checkpoint(format!(
                "parameter mismatch at index {i}: expected {name} {:?}, found {} {:?}",
                p.shape, e.name, e.shape
            )));
            return;
        }
        p.data.copy_from_slice(&e.data);
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != entries.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} extra parameter blocks",
            entries.len() - i
        )));
    }
    Ok(())
}

fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string(ckpt)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_checkpoint(path: &Path, expect_kind: &str) -> Result<Checkpoint> {
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    if ckpt.kind != expect_kind {
        return Err(Error::Checkpoint(format!(
            "expected a {expect_kind} checkpoint, found {}",
            ckpt.kind
        )));
    }
    Ok(ckpt)
}

pub fn save_lesion_net(path: &Path, net: &LesionNet) -> Result<()> {
    write_checkpoint(
        path,
        &Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: "lesion_net".into(),
            config: serde_json::to_value(&net.config)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            params: collect_params(net),
        },
    )
}

pub fn load_lesion_net(path: &Path) -> Result<LesionNet> {
    let ckpt = read_checkpoint(path, "lesion_net")?;
    let config: LesionNetConfig = serde_json::from_value(ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("bad lesion net config: {e}")))?;
    let mut net = build_lesion_net(&config, 0)?;
    apply_params(&mut net, &ckpt.params)?;
    Ok(net)
}

/// Grading checkpoints carry the trainable branch plus, when present, the
/// frozen side branch under a `side.` prefix, so one file restores the
/// whole model.
pub fn save_grading_net(path: &Path, net: &GradingNet) -> Result<()> {
    let config = GradingCheckpointConfig {
        kind: net.kind,
        backbone: net.backbone.config.clone(),
        downsample: net.downsample,
        attention_hidden: net
            .attention
            .as_ref()
            .map(|a| a.conv1.out_c)
            .unwrap_or(64),
        lesion: net.lesion_net.as_ref().map(|n| n.config.clone()),
    };
    let mut params = collect_params(net);
    if let Some(side) = &net.lesion_net {
        side.visit(&mut |name, p| {
            params.push(ParamEntry {
                name: format!("side.{name}"),
                shape: p.shape.clone(),
                data: p.data.clone(),
            })
        });
    }
    write_checkpoint(
        path,
        &Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: "grading".into(),
            config: serde_json::to_value(&config)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            params,
        },
    )
}

pub fn load_grading_net(path: &Path) -> Result<GradingNet> {
    let ckpt = read_checkpoint(path, "grading")?;
    let config: GradingCheckpointConfig = serde_json::from_value(ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("bad grading config: {e}")))?;
    let lesion_net = match &config.lesion {
        Some(lcfg) => Some(build_lesion_net(lcfg, 0)?),
        None => None,
    };
    let mut net = GradingNet::new(
        config.kind,
        &config.backbone,
        lesion_net,
        config.attention_hidden,
        config.downsample,
        0,
    )?;
    let n_main = collect_params(&net).len();
    if ckpt.params.len() < n_main {
        return Err(Error::Checkpoint("truncated grading checkpoint".into()));
    }
    let (main, side) = ckpt.params.split_at(n_main);
    apply_params(&mut net, main)?;
    if let Some(sn) = &mut net.lesion_net {
        let stripped: Vec<ParamEntry> = side
            .iter()
            .map(|e| ParamEntry {
                name: e
                    .name
                    .strip_prefix("side.")
                    .unwrap_or(&e.name)
                    .to_string(),
                shape: e.shape.clone(),
                data: e.data.clone(),
            })
            .collect();
        apply_params(sn, &stripped)?;
    } else if !side.is_empty() {
        return Err(Error::Checkpoint(
            "checkpoint has side-branch weights but no side-branch config".into(),
        ));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::multitask::AttentionMode;
    use crate::tensor::Tensor;
    use crate::types::FundusImage;

    fn tiny_lesion_cfg() -> LesionNetConfig {
        LesionNetConfig {
            variant: 16,
            backbone: BackboneConfig {
                stage_channels: [2, 3, 4, 5, 6],
            },
            m: 8,
        }
    }

    #[test]
    fn lesion_net_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = build_lesion_net(&tiny_lesion_cfg(), 42).unwrap();
        save_lesion_net(&path, &net).unwrap();
        let loaded = load_lesion_net(&path).unwrap();
        assert_eq!(collect_params(&net).len(), collect_params(&loaded).len());
        let img = FundusImage::new(Tensor::filled(32, 32, 3, 0.4)).unwrap();
        let a = net.forward(&img).unwrap();
        let b = loaded.forward(&img).unwrap();
        assert_eq!(a.maps.data, b.maps.data);
    }

    #[test]
    fn grading_round_trip_restores_both_branches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grading.json");
        let side = build_lesion_net(&tiny_lesion_cfg(), 7).unwrap();
        let net = GradingNet::new(
            GradingKind::MultiTask(AttentionMode::Conv),
            &BackboneConfig {
                stage_channels: [2, 3, 4, 5, 6],
            },
            Some(side),
            4,
            DownsampleKind::MaxPool,
            9,
        )
        .unwrap();
        save_grading_net(&path, &net).unwrap();
        let loaded = load_grading_net(&path).unwrap();
        let img = FundusImage::new(Tensor::filled(32, 32, 3, 0.6)).unwrap();
        let a = net.fuse_and_grade(&img).unwrap();
        let b = loaded.fuse_and_grade(&img).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(
            a.maps.as_ref().unwrap().maps.data,
            b.maps.as_ref().unwrap().maps.data
        );
    }

    #[test]
    fn kind_and_version_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = build_lesion_net(&tiny_lesion_cfg(), 0).unwrap();
        save_lesion_net(&path, &net).unwrap();
        assert!(read_checkpoint(&path, "grading").is_err());
        let mut ckpt = read_checkpoint(&path, "lesion_net").unwrap();
        ckpt.version = 99;
        write_checkpoint(&path, &ckpt).unwrap();
        assert!(load_lesion_net(&path).is_err());
    }

    #[test]
    fn shape_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = build_lesion_net(&tiny_lesion_cfg(), 0).unwrap();
        save_lesion_net(&path, &net).unwrap();
        let mut ckpt = read_checkpoint(&path, "lesion_net").unwrap();
        ckpt.params[3].data.push(0.0);
        ckpt.params[3].shape[0] += 1;
        write_checkpoint(&path, &ckpt).unwrap();
        assert!(load_lesion_net(&path).is_err());
    }
}
