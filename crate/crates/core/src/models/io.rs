//! Checkpoint persistence: a directory with `meta.json` (architecture,
//! data statistics, training summary) and `weights.bin` (all named
//! tensors in one little-endian blob).

use super::backbone::{BackboneConfig, TaskHeads, ToyBackbone};
use super::denoiser::{DenoiserConfig, ToyDenoiser};
use super::ModelBundle;
use crate::error::{Error, Result};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const META_FILE: &str = "meta.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const MAGIC: [u8; 4] = *b"DDSW";
const BLOB_VERSION: u32 = 1;
const META_FORMAT: &str = "ddsmooth-models";
const META_VERSION: u32 = 1;

/// Validation metrics recorded when the bundle was trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub final_train_loss: f64,
    pub val_cls_accuracy: f64,
    pub val_seg_miou: f64,
    pub val_depth_rmse: f64,
    pub val_retrieval_map: f64,
    pub denoiser_val_mse: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    version: u32,
    backbone: BackboneConfig,
    denoiser: DenoiserConfig,
    data_mean: [f64; 3],
    training: Option<TrainingSummary>,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Writes `meta.json` and `weights.bin` under `dir` (created if absent).
pub fn save_models(dir: &Path, bundle: &ModelBundle) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        format: META_FORMAT.into(),
        version: META_VERSION,
        backbone: bundle.backbone.config.clone(),
        denoiser: bundle.denoiser.config.clone(),
        data_mean: bundle.denoiser.data_mean,
        training: bundle.training.clone(),
    };
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta)?;
    std::fs::write(&meta_path, text.as_bytes()).map_err(|e| Error::io(&meta_path, e))?;

    let tensors = bundle.named_tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    push_u32(&mut buf, BLOB_VERSION);
    push_u32(&mut buf, tensors.len() as u32);
    for (name, shape, data) in &tensors {
        let expected: usize = shape.iter().product();
        debug_assert_eq!(expected, data.len());
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, shape.len() as u32);
        for &d in shape {
            push_u32(&mut buf, d as u32);
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin_path = dir.join(WEIGHTS_FILE);
    let mut f = std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Contract(format!(
                "weights blob truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("len 4")))
    }
}

/// Loads a bundle previously written by [`save_models`]. The tensor names,
/// order, and shapes must match the architecture declared in `meta.json`
/// exactly.
pub fn load_models(dir: &Path) -> Result<ModelBundle> {
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text)?;
    if meta.format != META_FORMAT {
        return Err(Error::Config(format!(
            "expected {META_FORMAT} checkpoint, got {:?}",
            meta.format
        )));
    }
    if meta.version != META_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} unsupported",
            meta.version
        )));
    }
    meta.backbone.validate()?;
    meta.denoiser.validate()?;

    // Rebuild the architecture, then overwrite every parameter from the blob.
    let mut seed_rng = rng::seeded(0);
    let backbone = ToyBackbone::init(meta.backbone.clone(), &mut seed_rng)?;
    let heads = TaskHeads::init(&meta.backbone, &mut seed_rng);
    let denoiser = ToyDenoiser::init(meta.denoiser, meta.data_mean, &mut seed_rng)?;
    let mut bundle = ModelBundle {
        backbone,
        heads,
        denoiser,
        training: meta.training,
    };
    let expected: Vec<(String, Vec<usize>)> = bundle
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();

    let bin_path = dir.join(WEIGHTS_FILE);
    let blob = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut cur = Cursor { buf: &blob, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Contract("weights blob has wrong magic".into()));
    }
    let ver = cur.u32()?;
    if ver != BLOB_VERSION {
        return Err(Error::Contract(format!(
            "weights blob version {ver} unsupported"
        )));
    }
    let count = cur.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Contract(format!(
            "weights blob has {count} tensors, architecture needs {}",
            expected.len()
        )));
    }
    let mut slices = bundle_slices(&mut bundle);
    debug_assert_eq!(slices.len(), expected.len());
    for ((want_name, want_shape), slice) in expected.iter().zip(slices.iter_mut()) {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Contract("tensor name is not utf-8".into()))?;
        if name != want_name {
            return Err(Error::Contract(format!(
                "tensor order mismatch: blob has {name:?}, expected {want_name:?}"
            )));
        }
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        if &shape != want_shape {
            return Err(Error::Contract(format!(
                "tensor {name:?} has shape {shape:?}, expected {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let bytes = cur.take(n * 8)?;
        for (i, out) in slice.iter_mut().enumerate() {
            *out = f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("len 8"));
        }
    }
    if cur.pos != blob.len() {
        return Err(Error::Contract(format!(
            "weights blob has {} trailing bytes",
            blob.len() - cur.pos
        )));
    }
    Ok(bundle)
}

fn bundle_slices(bundle: &mut ModelBundle) -> Vec<&mut [f64]> {
    let mut out = bundle.backbone.param_slices_mut();
    out.extend(bundle.heads.param_slices_mut());
    out.extend(bundle.denoiser.param_slices_mut());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelBundle;
    use tempfile::TempDir;

    fn small_bundle(seed: u64) -> ModelBundle {
        let backbone = BackboneConfig {
            resolution: 16,
            patch: 8,
            embed_dim: 8,
            hidden_dim: 16,
            blocks: 1,
            num_classes: 4,
            seg_classes: 5,
        };
        ModelBundle::init(backbone, DenoiserConfig::default(), [0.4, 0.4, 0.4], seed).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = TempDir::new().unwrap();
        let mut bundle = small_bundle(9);
        bundle.training = Some(TrainingSummary {
            epochs: 3,
            final_train_loss: 0.5,
            val_cls_accuracy: 0.9,
            val_seg_miou: 0.7,
            val_depth_rmse: 0.2,
            val_retrieval_map: 0.8,
            denoiser_val_mse: 0.01,
        });
        save_models(dir.path(), &bundle).unwrap();
        let loaded = load_models(dir.path()).unwrap();
        let a = bundle.named_tensors();
        let b = loaded.named_tensors();
        assert_eq!(a.len(), b.len());
        for ((na, sa, da), (nb, sb, db)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(sa, sb);
            assert_eq!(da, db, "tensor {na} changed across round trip");
        }
        assert_eq!(loaded.training, bundle.training);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = TempDir::new().unwrap();
        save_models(dir.path(), &small_bundle(10)).unwrap();
        let bin = dir.path().join(WEIGHTS_FILE);
        let blob = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &blob[..blob.len() - 9]).unwrap();
        assert!(load_models(dir.path()).is_err());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = TempDir::new().unwrap();
        save_models(dir.path(), &small_bundle(11)).unwrap();
        let bin = dir.path().join(WEIGHTS_FILE);
        let mut blob = std::fs::read(&bin).unwrap();
        blob.push(0);
        std::fs::write(&bin, &blob).unwrap();
        assert!(load_models(dir.path()).is_err());
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let dir = TempDir::new().unwrap();
        save_models(dir.path(), &small_bundle(12)).unwrap();
        let meta = dir.path().join(META_FILE);
        let text = std::fs::read_to_string(&meta).unwrap();
        std::fs::write(&meta, text.replace(META_FORMAT, "other-thing")).unwrap();
        assert!(load_models(dir.path()).is_err());
    }
}
