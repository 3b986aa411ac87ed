//! Single-file checkpoints.
//!
//! Layout (little-endian):
//! `HTCL` | u32 version | u64 meta length | meta JSON |
//! u32 tensor count | per tensor: u32 name length, name, u8 dtype (0 = f32), u32 rank, u64 dims…, u64 offset |
//! f32 payload, offsets relative to its start.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{HtclError, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::train::{AdamState, LogRecord, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"HTCL";
pub const FORMAT_VERSION: u32 = 1;
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

/// Configuration and progress stored in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: usize,
    pub history: Vec<LogRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub format_version: u32,
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub optim: AdamState<f32>,
}

fn to_f32<T: Scalar>(store: &ParamStore<T>) -> ParamStore<f32> {
    store
        .iter()
        .map(|(n, a)| (n.clone(), a.mapv(|v| v.as_f32())))
        .collect()
}

fn from_f32<T: Scalar>(store: &ParamStore<f32>) -> ParamStore<T> {
    store
        .iter()
        .map(|(n, a)| (n.clone(), a.mapv(|v| T::lit(v as f64))))
        .collect()
}

impl CheckpointBundle {
    pub fn from_state<T: Scalar>(state: &TrainState<T>, train: Option<&TrainConfig>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            meta: CheckpointMeta {
                model: state.model.config.clone(),
                train: train.cloned(),
                step: state.step,
                history: state.history.clone(),
            },
            params: to_f32(&state.model.params),
            optim: AdamState {
                m: to_f32(&state.optim.m),
                v: to_f32(&state.optim.v),
            },
        }
    }

    /// Rebuilds a training state, checking tensors against `expected` (defaults to the stored config).
    pub fn into_state<T: Scalar>(self, expected: Option<&ModelConfig>) -> Result<TrainState<T>> {
        let config = expected.cloned().unwrap_or(self.meta.model);
        let model = Model::from_params(config, from_f32(&self.params))?;
        Ok(TrainState {
            model,
            optim: AdamState {
                m: from_f32(&self.optim.m),
                v: from_f32(&self.optim.v),
            },
            step: self.meta.step,
            history: self.meta.history,
        })
    }
}

pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    let meta = serde_json::to_vec(&bundle.meta)?;
    let tensors: Vec<(String, &Array2<f32>)> = bundle
        .params
        .iter()
        .map(|(n, a)| (n.clone(), a))
        .chain(bundle.optim.m.iter().map(|(n, a)| (format!("{OPTIM_M}{n}"), a)))
        .chain(bundle.optim.v.iter().map(|(n, a)| (format!("{OPTIM_V}{n}"), a)))
        .collect();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&bundle.format_version.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, a) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(0);
        out.extend_from_slice(&2u32.to_le_bytes());
        for d in a.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * a.len() as u64;
    }
    for (_, a) in &tensors {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    // write-then-rename keeps an existing checkpoint intact on failure
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| HtclError::CorruptCheckpoint(format!("file ends early at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| HtclError::CorruptCheckpoint("length overflows".into()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4).map_err(|_| HtclError::CorruptCheckpoint("missing magic".into()))? != MAGIC {
        return Err(HtclError::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(HtclError::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = r.len()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| HtclError::CorruptCheckpoint(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut dir = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| HtclError::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        if r.u8()? != 0 {
            return Err(HtclError::CorruptCheckpoint(format!("{name}: unsupported dtype")));
        }
        let rank = r.u32()? as usize;
        if rank != 2 {
            return Err(HtclError::CorruptCheckpoint(format!("{name}: rank {rank}, expected 2")));
        }
        let dims = (r.len()?, r.len()?);
        let offset = r.len()?;
        dir.push((name, dims, offset));
    }
    let payload = &bytes[r.pos..];
    let mut params = ParamStore::new();
    let mut optim = AdamState::default();
    for (name, (rows, cols), offset) in dir {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| HtclError::CorruptCheckpoint(format!("{name}: size overflows")))?;
        let data = offset
            .checked_add(n)
            .and_then(|end| payload.get(offset..end))
            .ok_or_else(|| HtclError::CorruptCheckpoint(format!("{name}: payload truncated")))?;
        let values: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let a = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        if let Some(base) = name.strip_prefix(OPTIM_M) {
            optim.m.insert(base, a);
        } else if let Some(base) = name.strip_prefix(OPTIM_V) {
            optim.v.insert(base, a);
        } else {
            params.insert(name, a);
        }
    }
    Ok(CheckpointBundle {
        format_version: version,
        meta,
        params,
        optim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{AudioEncoderConfig, TextEncoderConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            audio_encoder: AudioEncoderConfig {
                n_mels: 8,
                cnn_channels: 8,
                tf_hidden: 8,
                tf_heads: 2,
                tf_layers: 1,
                embed_dim: 4,
                max_frames_after_cnn: 16,
                ..AudioEncoderConfig::default()
            },
            text_encoder: TextEncoderConfig {
                vocab_size: 20,
                tf_hidden: 8,
                tf_heads: 2,
                tf_layers: 1,
                embed_dim: 4,
                max_text_len: 16,
                ..TextEncoderConfig::default()
            },
            fusion_hidden: 6,
            ..ModelConfig::default()
        }
    }

    fn saved(dir: &Path) -> (std::path::PathBuf, TrainState<f32>) {
        let mut state = TrainState::new(Model::<f32>::init(tiny(), 11).unwrap());
        state.step = 5;
        state.optim.m.insert("audio.proj.bias", Array2::from_elem((1, 4), 0.25));
        state.optim.v.insert("audio.proj.bias", Array2::from_elem((1, 4), 1e-7));
        let path = dir.join("ck.htcl");
        save_checkpoint(&CheckpointBundle::from_state(&state, None), &path).unwrap();
        (path, state)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (path, state) = saved(dir.path());
        let back: TrainState<f32> = load_checkpoint(&path).unwrap().into_state(None).unwrap();
        assert_eq!(back.model.params, state.model.params);
        assert_eq!(back.optim, state.optim);
        assert_eq!(back.step, 5);
        assert_eq!(back.model.config, state.model.config);
    }

    #[test]
    fn truncation_is_reported_not_panicked() {
        let dir = tempfile::tempdir().unwrap();
        let (path, _) = saved(dir.path());
        let bytes = fs::read(&path).unwrap();
        for cut in [2, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&path), Err(HtclError::CorruptCheckpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let (path, _) = saved(dir.path());
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(HtclError::CheckpointVersion { found: 9, .. })));
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(HtclError::CorruptCheckpoint(_))));
    }

    #[test]
    fn mismatched_embed_dim_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let (path, _) = saved(dir.path());
        let mut cfg = tiny();
        cfg.audio_encoder.embed_dim = 8;
        cfg.text_encoder.embed_dim = 8;
        let err = load_checkpoint(&path).unwrap().into_state::<f32>(Some(&cfg)).unwrap_err();
        match err {
            HtclError::Incompatible { name, expected, found } => {
                assert_eq!(name, "audio.proj.bias");
                assert_eq!(expected, vec![1, 8]);
                assert_eq!(found, vec![1, 4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let (path, _) = saved(dir.path());
        let mut bundle = load_checkpoint(&path).unwrap();
        bundle.params = bundle
            .params
            .iter()
            .filter(|(n, _)| n.as_str() != "text.proj.weight")
            .map(|(n, a)| (n.clone(), a.clone()))
            .collect();
        match bundle.into_state::<f32>(None) {
            Err(HtclError::MissingTensor(n)) => assert_eq!(n, "text.proj.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
