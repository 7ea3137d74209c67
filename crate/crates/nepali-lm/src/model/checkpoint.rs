//! Checkpoint serialization.
//!
//! A checkpoint is the complete training state: config, parameters, Adam
//! moments, RNG position, and per-epoch history. Loading one and resuming
//! reproduces an uninterrupted run bit for bit, which is why the format is
//! a fixed little-endian binary layout rather than anything lossy.
//!
//! Layout: magic "NGPT", format version u32, dtype byte, config fields,
//! optimizer step u64, RNG state (32-byte seed, stream u64, word position
//! u128), then every tensor (ndim u8, dims u64 each, raw scalars) for the
//! parameters, first moments, and second moments in the canonical tensor
//! order, and finally the epoch history as length-prefixed JSON.

use std::path::Path;

use super::adam::AdamState;
use super::float::{Dtype, Float};
use super::net::Parameters;
use super::train::{EpochMetrics, RngState};
use super::{ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"NGPT";
const FORMAT_VERSION: u32 = 1;

/// Complete training state. `opt.step` doubles as the global step counter.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub rng: RngState,
    pub params: Parameters<T>,
    pub opt: AdamState<T>,
    pub history: Vec<EpochMetrics>,
}

impl<T: Float> Checkpoint<T> {
    /// Guards against pairing a model with the wrong tokenizer.
    pub fn expect_vocab(&self, tokenizer_vocab: usize) -> Result<(), ModelError> {
        if self.config.vocab_size != tokenizer_vocab {
            return Err(ModelError::VocabMismatch {
                checkpoint: self.config.vocab_size,
                tokenizer: tokenizer_vocab,
            });
        }
        Ok(())
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor_group<T: Float>(buf: &mut Vec<u8>, cfg: &ModelConfig, group: &Parameters<T>) {
    let descs = cfg.tensor_descs();
    for (desc, tensor) in descs.iter().zip(group.tensors()) {
        buf.push(desc.shape.len() as u8);
        for &d in &desc.shape {
            push_u64(buf, d as u64);
        }
        for &v in tensor.iter() {
            v.write_le(buf);
        }
    }
}

/// Writes `ckpt` to `path` atomically enough for our purposes: the whole
/// file is assembled in memory and written in one call.
pub fn save_checkpoint<T: Float>(path: &Path, ckpt: &Checkpoint<T>) -> Result<(), ModelError> {
    let cfg = &ckpt.config;
    let mut buf = Vec::with_capacity(64 + 3 * ckpt.params.num_params() * T::DTYPE.size());
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, FORMAT_VERSION);
    buf.push(T::DTYPE.code());
    for dim in [
        cfg.vocab_size,
        cfg.context_len,
        cfg.d_model,
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_ff,
    ] {
        push_u64(&mut buf, dim as u64);
    }
    push_f64(&mut buf, cfg.dropout);
    push_f64(&mut buf, cfg.init_std);
    push_u64(&mut buf, ckpt.opt.step);
    buf.extend_from_slice(&ckpt.rng.seed);
    push_u64(&mut buf, ckpt.rng.stream);
    buf.extend_from_slice(&ckpt.rng.word_pos.to_le_bytes());
    push_tensor_group(&mut buf, cfg, &ckpt.params);
    push_tensor_group(&mut buf, cfg, &ckpt.opt.m);
    push_tensor_group(&mut buf, cfg, &ckpt.opt.v);
    let history = serde_json::to_vec(&ckpt.history).expect("history serializes");
    push_u64(&mut buf, history.len() as u64);
    buf.extend_from_slice(&history);
    std::fs::write(path, &buf).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, context: &str) -> ModelError {
        ModelError::Corrupt {
            path: self.path.to_path_buf(),
            context: context.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupt(&format!("truncated while reading {what}")));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u128(&mut self, what: &str) -> Result<u128, ModelError> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn dim(&mut self, what: &str) -> Result<usize, ModelError> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| self.corrupt(&format!("{what} does not fit in usize")))
    }
}

fn read_tensor_group<T: Float>(
    r: &mut Reader,
    cfg: &ModelConfig,
    group: &mut Parameters<T>,
    group_name: &str,
) -> Result<(), ModelError> {
    let descs = cfg.tensor_descs();
    for (desc, tensor) in descs.iter().zip(group.tensors_mut()) {
        let name = format!("{group_name}{}", desc.name);
        let ndim = r.u8(&name)? as usize;
        let mut found = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            found.push(r.dim(&name)?);
        }
        if found != desc.shape {
            return Err(ModelError::ShapeMismatch {
                name,
                expected: desc.shape.clone(),
                found,
            });
        }
        let width = T::DTYPE.size();
        let raw = r.take(tensor.len() * width, &name)?;
        for (i, v) in tensor.iter_mut().enumerate() {
            *v = T::read_le(&raw[i * width..]);
        }
    }
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. The requested float
/// type must match the dtype recorded in the file.
pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader { buf: &bytes, pos: 0, path };
    if r.take(4, "magic").map(|m| m != MAGIC).unwrap_or(true) {
        return Err(ModelError::BadMagic { path: path.to_path_buf() });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(ModelError::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let dtype_code = r.u8("dtype")?;
    let dtype = Dtype::from_code(dtype_code)
        .ok_or_else(|| r.corrupt(&format!("unknown dtype code {dtype_code}")))?;
    if dtype != T::DTYPE {
        return Err(ModelError::DtypeMismatch {
            found: dtype,
            expected: T::DTYPE,
        });
    }
    let config = ModelConfig {
        vocab_size: r.dim("vocab_size")?,
        context_len: r.dim("context_len")?,
        d_model: r.dim("d_model")?,
        n_layers: r.dim("n_layers")?,
        n_heads: r.dim("n_heads")?,
        d_ff: r.dim("d_ff")?,
        dropout: r.f64("dropout")?,
        init_std: r.f64("init_std")?,
    };
    config.validate()?;
    let step = r.u64("step")?;
    let rng = RngState {
        seed: r.take(32, "rng seed")?.try_into().unwrap(),
        stream: r.u64("rng stream")?,
        word_pos: r.u128("rng word position")?,
    };
    let mut params = Parameters::<T>::zeros(&config);
    let mut opt = AdamState::<T>::new(&config);
    opt.step = step;
    read_tensor_group(&mut r, &config, &mut params, "")?;
    read_tensor_group(&mut r, &config, &mut opt.m, "m.")?;
    read_tensor_group(&mut r, &config, &mut opt.v, "v.")?;
    let history_len = r.dim("history length")?;
    let history_bytes = r.take(history_len, "history")?;
    let history: Vec<EpochMetrics> = serde_json::from_slice(history_bytes)
        .map_err(|e| r.corrupt(&format!("history is not valid JSON: {e}")))?;
    if r.pos != bytes.len() {
        return Err(r.corrupt("trailing bytes after history"));
    }
    Ok(Checkpoint {
        config,
        rng,
        params,
        opt,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{train_clm, TrainConfig};

    fn trained() -> (ModelConfig, Checkpoint<f32>) {
        let cfg = ModelConfig {
            vocab_size: 9,
            context_len: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            init_std: 0.02,
        };
        let stream: Vec<u32> = (0..40).map(|i| (i % 5 + 4) as u32).collect();
        let tc = TrainConfig { epochs: 2, train_batch_size: 2, ..TrainConfig::default() };
        let out = train_clm::<f32>(&cfg, &tc, &stream, 0.25, None, None).unwrap();
        (cfg, out.last)
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let (_, ckpt) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.rng, ckpt.rng);
        assert_eq!(loaded.params, ckpt.params);
        assert_eq!(loaded.opt, ckpt.opt);
        assert_eq!(loaded.history, ckpt.history);
    }

    #[test]
    fn loading_with_the_wrong_float_type_is_refused() {
        let (_, ckpt) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(ModelError::DtypeMismatch {
                found: Dtype::F32,
                expected: Dtype::F64
            })
        ));
    }

    #[test]
    fn non_checkpoint_files_are_rejected_by_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_ckpt.bin");
        std::fs::write(&path, b"hello world").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(ModelError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_files_report_corruption() {
        let (_, ckpt) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&cut),
            Err(ModelError::Corrupt { .. })
        ));
    }

    #[test]
    fn unknown_version_is_reported_as_such() {
        let (_, ckpt) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(ModelError::CheckpointVersion { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn resuming_from_disk_matches_resuming_in_memory() {
        let cfg = ModelConfig {
            vocab_size: 9,
            context_len: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            init_std: 0.02,
        };
        let stream: Vec<u32> = (0..60).map(|i| (i % 5 + 4) as u32).collect();
        let tc2 = TrainConfig { epochs: 2, train_batch_size: 2, ..TrainConfig::default() };
        let tc4 = TrainConfig { epochs: 4, ..tc2 };
        let half = train_clm::<f32>(&cfg, &tc2, &stream, 0.0, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.ckpt");
        save_checkpoint(&path, &half.last).unwrap();
        let reloaded = load_checkpoint::<f32>(&path).unwrap();
        let via_disk = train_clm::<f32>(&cfg, &tc4, &stream, 0.0, Some(reloaded), None).unwrap();
        let in_memory = train_clm::<f32>(&cfg, &tc4, &stream, 0.0, Some(half.last), None).unwrap();
        assert_eq!(via_disk.last.params, in_memory.last.params);
        assert_eq!(via_disk.last.opt, in_memory.last.opt);
    }

    #[test]
    fn vocab_guard_catches_tokenizer_mismatch() {
        let (_, ckpt) = trained();
        assert!(ckpt.expect_vocab(9).is_ok());
        assert!(matches!(
            ckpt.expect_vocab(11),
            Err(ModelError::VocabMismatch { checkpoint: 9, tokenizer: 11 })
        ));
    }
}
